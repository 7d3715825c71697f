#pragma once

// Masks from decompositions, the pluggable segmenter boundary, and labelling
// of the sounding factor.

#include <algorithm>
#include <cerrno>
#include <csignal>
#include <cstdio>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "semconmf/errors.hpp"
#include "semconmf/matrix.hpp"
#include "semconmf/semantics.hpp"

namespace semconmf {

enum class MaskSource { ActivationRow, SegmenterOutput };

struct SoftMask {
  Matrix values;  // H x W
  MaskSource source = MaskSource::ActivationRow;

  Eigen::Index height() const { return values.rows(); }
  Eigen::Index width() const { return values.cols(); }
};

/// Column k* of the image activations, reshaped row-major to H x W. No renormalization.
inline SoftMask activation_mask(const Matrix& image_activations, std::size_t k_star, Eigen::Index height,
                                Eigen::Index width) {
  require_shape(height * width == image_activations.rows(),
                "H x W = " + std::to_string(height * width) + " but activations have " +
                    std::to_string(image_activations.rows()) + " rows");
  require_shape(static_cast<Eigen::Index>(k_star) < image_activations.cols(), "k* out of range");
  SoftMask m;
  m.values.resize(height, width);
  for (Eigen::Index i = 0; i < image_activations.rows(); ++i)
    m.values.data()[i] = image_activations(i, static_cast<Eigen::Index>(k_star));
  return m;
}

/// Bilinear resize with aligned corners: the four corner values are kept exactly.
inline SoftMask upsample_bilinear(const SoftMask& in, Eigen::Index height, Eigen::Index width) {
  if (height < 1 || width < 1) throw InvalidInput("target size must be positive");
  SoftMask out;
  out.source = in.source;
  out.values.resize(height, width);
  const Eigen::Index h0 = in.height(), w0 = in.width();
  auto coord = [](Eigen::Index i, Eigen::Index n_out, Eigen::Index n_in) {
    return n_out == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
  };
  for (Eigen::Index r = 0; r < height; ++r) {
    const double y = coord(r, height, h0);
    const auto y0 = std::min(static_cast<Eigen::Index>(y), h0 - 1);
    const auto y1 = std::min(y0 + 1, h0 - 1);
    const double fy = y - static_cast<double>(y0);
    for (Eigen::Index c = 0; c < width; ++c) {
      const double x = coord(c, width, w0);
      const auto x0 = std::min(static_cast<Eigen::Index>(x), w0 - 1);
      const auto x1 = std::min(x0 + 1, w0 - 1);
      const double fx = x - static_cast<double>(x0);
      const double top = (1.0 - fx) * in.values(y0, x0) + fx * in.values(y0, x1);
      const double bottom = (1.0 - fx) * in.values(y1, x0) + fx * in.values(y1, x1);
      out.values(r, c) = (1.0 - fy) * top + fy * bottom;
    }
  }
  return out;
}

inline constexpr double kDefaultThreshold = 0.5;

/// value >= threshold -> 1
inline BinaryMask binarize(const SoftMask& mask, double threshold = kDefaultThreshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidInput("threshold must lie in (0, 1)");
  return (mask.values.array() >= threshold).cast<std::uint8_t>();
}

struct Classification {
  std::string label;
  double score = 0.0;
  std::size_t index = 0;
};

/// Label of the image anchor closest (cosine) to the sounding factor; ties go to the lowest index.
inline Classification classify_sounding_factor(const Vector& factor, const AnchorBank& bank) {
  if (bank.size() == 0) throw EmptyBank("anchor bank has no entries");
  require_shape(factor.size() == bank.image_anchors.cols(), "factor width differs from image anchors");
  if (factor.norm() == 0.0) throw Degenerate("sounding factor has zero norm");
  Classification best{bank.labels[0], cosine(factor, bank.image_anchors.row(0).transpose()), 0};
  for (Eigen::Index j = 1; j < bank.image_anchors.rows(); ++j) {
    const double s = cosine(factor, bank.image_anchors.row(j).transpose());
    if (s > best.score) best = {bank.labels[static_cast<std::size_t>(j)], s, static_cast<std::size_t>(j)};
  }
  return best;
}

// ---------------------------------------------------------------------------
// Segmenter boundary

struct SegmenterPrompt {
  Matrix factor_vectors;  // K x C_I, rows of V_I
  std::size_t selected = 0;
};

struct SegmenterInput {
  std::string sample_id;
  const Matrix* image_features = nullptr;  // HW x C_I
  Eigen::Index height = 0;
  Eigen::Index width = 0;
  std::string image_path;
};

class Segmenter {
 public:
  virtual ~Segmenter() = default;
  /// One mask per factor, in factor order.
  virtual std::vector<SoftMask> prompt(const SegmenterPrompt& prompt, const SegmenterInput& input) = 0;
  virtual std::string name() const = 0;
};

/// Assigns every image token to the factor whose V_I row is most cosine-similar
/// (ties to the lowest index) and returns one-hot masks on the token grid.
class StubSegmenter final : public Segmenter {
 public:
  std::vector<SoftMask> prompt(const SegmenterPrompt& p, const SegmenterInput& in) override {
    if (!in.image_features) throw SegmenterError("stub segmenter needs image features");
    const Matrix& x = *in.image_features;
    require_shape(x.rows() == in.height * in.width, "image features do not match the spatial grid");
    require_shape(x.cols() == p.factor_vectors.cols(), "factor width differs from image features");
    const Eigen::Index k_count = p.factor_vectors.rows();
    std::vector<SoftMask> masks(static_cast<std::size_t>(k_count));
    for (auto& m : masks) {
      m.values = Matrix::Zero(in.height, in.width);
      m.source = MaskSource::SegmenterOutput;
    }
    for (Eigen::Index n = 0; n < x.rows(); ++n) {
      const Vector token = x.row(n).transpose();
      Eigen::Index best = 0;
      double best_sim = cosine(token, p.factor_vectors.row(0).transpose());
      for (Eigen::Index k = 1; k < k_count; ++k) {
        const double s = cosine(token, p.factor_vectors.row(k).transpose());
        if (s > best_sim) {
          best_sim = s;
          best = k;
        }
      }
      masks[static_cast<std::size_t>(best)].values.data()[n] = 1.0;
    }
    return masks;
  }

  std::string name() const override { return "stub"; }
};

// Wire protocol: one JSON object per '\n'-terminated UTF-8 line.
//   request  {"sample_id", "K", "C_I", "factors": [[...] x K], "image_path"}
//   response {"masks": [[[row], ...] x K]}  or  {"error": "message"}

inline std::string encode_segmenter_request(const SegmenterPrompt& p, const SegmenterInput& in) {
  nlohmann::json factors = nlohmann::json::array();
  for (Eigen::Index k = 0; k < p.factor_vectors.rows(); ++k) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < p.factor_vectors.cols(); ++c) row.push_back(p.factor_vectors(k, c));
    factors.push_back(std::move(row));
  }
  nlohmann::json j{{"sample_id", in.sample_id},
                   {"K", p.factor_vectors.rows()},
                   {"C_I", p.factor_vectors.cols()},
                   {"factors", std::move(factors)},
                   {"image_path", in.image_path}};
  return j.dump() + "\n";
}

inline std::vector<SoftMask> decode_segmenter_response(std::string_view line, std::size_t expected_masks) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw SegmenterError(std::string("malformed response: ") + e.what());
  }
  if (j.contains("error")) throw SegmenterError("segmenter reported: " + j.at("error").dump());
  if (!j.contains("masks") || !j.at("masks").is_array()) throw SegmenterError("response lacks a masks array");
  const auto& masks = j.at("masks");
  if (masks.size() != expected_masks)
    throw SegmenterError("expected " + std::to_string(expected_masks) + " masks, got " + std::to_string(masks.size()));
  std::vector<SoftMask> out;
  try {
    for (const auto& m : masks) {
      const auto rows = static_cast<Eigen::Index>(m.size());
      const auto cols = rows == 0 ? 0 : static_cast<Eigen::Index>(m.at(0).size());
      if (rows == 0 || cols == 0) throw SegmenterError("empty mask");
      SoftMask sm;
      sm.source = MaskSource::SegmenterOutput;
      sm.values.resize(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = m.at(static_cast<std::size_t>(r));
        if (static_cast<Eigen::Index>(row.size()) != cols) throw SegmenterError("ragged mask rows");
        for (Eigen::Index c = 0; c < cols; ++c) {
          const double v = row.at(static_cast<std::size_t>(c)).get<double>();
          if (!(v >= 0.0 && v <= 1.0)) throw SegmenterError("mask value outside [0, 1]");
          sm.values(r, c) = v;
        }
      }
      out.push_back(std::move(sm));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SegmenterError(std::string("bad mask payload: ") + e.what());
  }
  return out;
}

/// Talks to a long-running child process (`/bin/sh -c command`) over stdin/stdout.
/// Requests are serialized: at most one is in flight.
class ExternalSegmenter final : public Segmenter {
 public:
  explicit ExternalSegmenter(std::string command) : command_(std::move(command)) {
    std::signal(SIGPIPE, SIG_IGN);
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0) throw SegmenterError("pipe failed");
    if (pipe(from_child) != 0) {
      close(to_child[0]);
      close(to_child[1]);
      throw SegmenterError("pipe failed");
    }
    pid_ = fork();
    if (pid_ < 0) throw SegmenterError("fork failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    in_ = fdopen(to_child[1], "w");
    out_ = fdopen(from_child[0], "r");
    if (!in_ || !out_) throw SegmenterError("fdopen failed");
  }

  ExternalSegmenter(const ExternalSegmenter&) = delete;
  ExternalSegmenter& operator=(const ExternalSegmenter&) = delete;

  ~ExternalSegmenter() override {
    if (in_) std::fclose(in_);
    if (out_) std::fclose(out_);
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
  }

  std::vector<SoftMask> prompt(const SegmenterPrompt& p, const SegmenterInput& in) override {
    const std::string request = encode_segmenter_request(p, in);
    std::lock_guard lock(mutex_);
    if (std::fwrite(request.data(), 1, request.size(), in_) != request.size() || std::fflush(in_) != 0)
      throw SegmenterError("failed to send request to '" + command_ + "'");
    std::string line;
    int ch;
    while ((ch = std::fgetc(out_)) != EOF && ch != '\n') line.push_back(static_cast<char>(ch));
    if (ch == EOF && line.empty()) throw SegmenterError("segmenter process '" + command_ + "' closed its output");
    return decode_segmenter_response(line, static_cast<std::size_t>(p.factor_vectors.rows()));
  }

  std::string name() const override { return "external:" + command_; }

 private:
  std::string command_;
  pid_t pid_ = -1;
  FILE* in_ = nullptr;
  FILE* out_ = nullptr;
  std::mutex mutex_;
};

/// "stub" or "external:<command>".
inline std::unique_ptr<Segmenter> make_segmenter(const std::string& spec) {
  if (spec == "stub") return std::make_unique<StubSegmenter>();
  constexpr std::string_view prefix = "external:";
  if (spec.rfind(prefix, 0) == 0 && spec.size() > prefix.size())
    return std::make_unique<ExternalSegmenter>(spec.substr(prefix.size()));
  throw InvalidInput("unknown segmenter '" + spec + "' (expected stub or external:<command>)");
}

}  // namespace semconmf
