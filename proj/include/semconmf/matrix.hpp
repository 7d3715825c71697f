#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>

#include "semconmf/errors.hpp"

namespace semconmf {

// Row-major so that a column of HW activations reshapes to an H x W grid
// without copying through a transpose.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using BinaryMask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Modality { Audio, Image };

inline const char* to_string(Modality m) { return m == Modality::Audio ? "audio" : "image"; }

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw DimensionMismatch(what);
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Matrix sigmoid(const Matrix& logits) {
  return logits.unaryExpr([](double x) { return sigmoid(x); });
}

/// Cosine similarity; 0 when either side has zero norm.
inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

/// d cos(a, b) / d a; zero when either side has zero norm.
inline Vector cosine_grad(const Vector& a, const Vector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return Vector::Zero(a.size());
  const double c = a.dot(b) / (na * nb);
  return (b / nb - c * a / na) / na;
}

}  // namespace semconmf
