#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace semconmf {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad magic, unsupported version or dtype.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Header and payload disagree (truncated or padded file).
class CorruptFile : public Error {
 public:
  using Error::Error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

class EmptyBank : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class Degenerate : public Error {
 public:
  using Error::Error;
};

class SegmenterError : public Error {
 public:
  using Error::Error;
};

class NotFound : public Error {
 public:
  using Error::Error;
};

/// Raised when the objective becomes non-finite during optimization.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t iteration, const std::string& what)
      : Error("diverged at iteration " + std::to_string(iteration) + ": " + what),
        iteration_(iteration) {}

  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

}  // namespace semconmf
