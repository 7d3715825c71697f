#pragma once

// Cross-modal semantic penalty.
//
// For every factor k the activation column U^k soft-masks the features; the
// masked average is the factor's semantic component. Its cosine similarities
// with the J anchors of the same modality form the factor's descriptor. The
// penalty compares image and audio descriptors through softmax distributions
// and keeps the best-matching factor (k*).

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "semconmf/errors.hpp"
#include "semconmf/matrix.hpp"

namespace semconmf {

/// Paired per-modality anchors: row j of both matrices encodes labels[j].
struct AnchorBank {
  std::vector<std::string> labels;
  Matrix image_anchors;  // J x C_I
  Matrix audio_anchors;  // J x C_A

  std::size_t size() const { return labels.size(); }

  void validate_shape() const {
    if (labels.empty()) throw EmptyBank("anchor bank has no entries");
    require_shape(image_anchors.rows() == static_cast<Eigen::Index>(labels.size()) &&
                      audio_anchors.rows() == static_cast<Eigen::Index>(labels.size()),
                  "anchor rows do not match label count");
  }

  /// Shape check plus the non-zero-row invariant cosine similarity relies on.
  void validate() const {
    validate_shape();
    for (Eigen::Index j = 0; j < image_anchors.rows(); ++j)
      if (image_anchors.row(j).norm() == 0.0 || audio_anchors.row(j).norm() == 0.0)
        throw InvalidInput("anchor '" + labels[static_cast<std::size_t>(j)] + "' has zero norm");
  }
};

enum class PenaltyKind { CrossEntropy, KL };
enum class MinMode { Min, Mean };
enum class ComponentMode { SoftMask, FactorRow };

struct PenaltyOptions {
  PenaltyKind kind = PenaltyKind::CrossEntropy;
  MinMode min_mode = MinMode::Min;
  ComponentMode component_mode = ComponentMode::SoftMask;
  double temperature = 1.0;
};

/// C[c] = (1/N) sum_n X[n,c] * u[n]
inline Vector semantic_component(const Matrix& features, const Vector& activation) {
  require_shape(activation.size() == features.rows(), "activation length must equal feature rows");
  return features.transpose() * activation / static_cast<double>(features.rows());
}

/// All K components at once: (1/N) U^T X, one row per factor.
inline Matrix semantic_components(const Matrix& features, const Matrix& activations) {
  require_shape(activations.rows() == features.rows(), "activation rows must equal feature rows");
  return activations.transpose() * features / static_cast<double>(features.rows());
}

struct Descriptor {
  Vector values;
  bool degenerate = false;  // zero-norm component, values forced to 0
};

inline Descriptor semantic_descriptor(const Vector& component, const Matrix& anchors) {
  require_shape(anchors.cols() == component.size(), "anchor width must equal component length");
  Descriptor d;
  d.values = Vector::Zero(anchors.rows());
  const double norm = component.norm();
  if (norm == 0.0) {
    d.degenerate = true;
    return d;
  }
  for (Eigen::Index j = 0; j < anchors.rows(); ++j) {
    const double an = anchors.row(j).norm();
    d.values[j] = an == 0.0 ? 0.0 : anchors.row(j).dot(component) / (norm * an);
  }
  return d;
}

namespace detail {

inline Vector log_softmax(const Vector& logits, double temperature) {
  const Vector z = logits / temperature;
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return (z.array() - lse).matrix();
}

}  // namespace detail

/// CE(p, q) = -sum_j p_j log q_j, p = softmax(d_image / T), q = softmax(d_audio / T).
inline double descriptor_cross_entropy(const Vector& d_image, const Vector& d_audio, double temperature = 1.0) {
  require_shape(d_image.size() == d_audio.size(), "descriptor lengths differ");
  const Vector p = detail::log_softmax(d_image, temperature).array().exp().matrix();
  return -p.dot(detail::log_softmax(d_audio, temperature));
}

/// KL(softmax(d_image / T) || softmax(d_audio / T)).
inline double descriptor_kl(const Vector& d_image, const Vector& d_audio, double temperature = 1.0) {
  require_shape(d_image.size() == d_audio.size(), "descriptor lengths differ");
  const Vector log_p = detail::log_softmax(d_image, temperature);
  const Vector log_q = detail::log_softmax(d_audio, temperature);
  return log_p.array().exp().matrix().dot(log_p - log_q);
}

inline double descriptor_divergence(PenaltyKind kind, const Vector& d_image, const Vector& d_audio, double temperature) {
  return kind == PenaltyKind::KL ? descriptor_kl(d_image, d_audio, temperature)
                                 : descriptor_cross_entropy(d_image, d_audio, temperature);
}

struct DivergenceGrad {
  double value = 0.0;
  Vector d_image;  // d value / d d_image
  Vector d_audio;  // d value / d d_audio
};

/// Divergence and its gradient with respect to both descriptors.
inline DivergenceGrad descriptor_divergence_grad(PenaltyKind kind, const Vector& d_image, const Vector& d_audio,
                                                 double temperature) {
  const Vector log_p = detail::log_softmax(d_image, temperature);
  const Vector log_q = detail::log_softmax(d_audio, temperature);
  const Vector p = log_p.array().exp().matrix();
  const Vector q = log_q.array().exp().matrix();
  DivergenceGrad g;
  g.d_audio = (q - p) / temperature;
  if (kind == PenaltyKind::KL) {
    g.value = p.dot(log_p - log_q);
    g.d_image = (p.array() * (log_p - log_q).array() - p.array() * g.value).matrix() / temperature;
  } else {
    g.value = -p.dot(log_q);
    g.d_image = (p.array() * (-log_q.array() - g.value)).matrix() / temperature;
  }
  return g;
}

/// Argmin with ties going to the lowest index.
inline std::size_t select_kstar(const Vector& per_factor_ce) {
  if (per_factor_ce.size() == 0) throw InvalidInput("select_kstar needs at least one factor");
  std::size_t best = 0;
  for (Eigen::Index k = 1; k < per_factor_ce.size(); ++k)
    if (per_factor_ce[k] < per_factor_ce[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(k);
  return best;
}

struct DescriptorSet {
  Matrix image_desc;  // K x J
  Matrix audio_desc;  // K x J
  Vector per_factor_ce;
  std::size_t k_star = 0;
  std::vector<bool> image_degenerate;
  std::vector<bool> audio_degenerate;

  bool any_degenerate() const {
    for (bool b : image_degenerate)
      if (b) return true;
    for (bool b : audio_degenerate)
      if (b) return true;
    return false;
  }
};

/// Inputs to the penalty for one frame. All references must outlive the call.
struct PenaltyInputs {
  const Matrix& audio_features;  // N_T x C_A
  const Matrix& image_features;  // HW x C_I
  const Matrix& audio_activations;  // N_T x K
  const Matrix& image_activations;  // HW x K
  const Matrix& audio_factors;  // K x C_A
  const Matrix& image_factors;  // K x C_I
};

struct PenaltyResult {
  double value = 0.0;
  std::size_t k_star = 0;
  DescriptorSet descriptors;
  // Unweighted gradients of `value`. Empty unless requested.
  Matrix grad_audio_activations;
  Matrix grad_image_activations;
  Matrix grad_audio_factors;
  Matrix grad_image_factors;
};

namespace detail {

/// Gradient of a descriptor entry set with respect to its component, contracted with `upstream`.
inline Vector descriptor_backward(const Vector& component, const Matrix& anchors, const Vector& desc,
                                  const Vector& upstream) {
  const double norm = component.norm();
  if (norm == 0.0) return Vector::Zero(component.size());
  Vector g = Vector::Zero(component.size());
  for (Eigen::Index j = 0; j < anchors.rows(); ++j) {
    const double an = anchors.row(j).norm();
    if (an == 0.0 || upstream[j] == 0.0) continue;
    g += upstream[j] * anchors.row(j).transpose() / an;
  }
  g -= upstream.dot(desc) * component / norm;
  return g / norm;
}

}  // namespace detail

/// Computes all K descriptors and the min (or mean) divergence across factors.
/// Under Min the gradient flows through the arg-min factor only.
inline PenaltyResult penalty_term(const PenaltyInputs& in, const AnchorBank& bank, const PenaltyOptions& opts,
                                  bool with_gradient) {
  bank.validate_shape();
  const Eigen::Index k_count = in.image_activations.cols();
  require_shape(in.audio_activations.cols() == k_count && in.image_factors.rows() == k_count &&
                    in.audio_factors.rows() == k_count,
                "factor count differs between matrices");
  require_shape(bank.image_anchors.cols() == in.image_features.cols(),
                "image anchors have " + std::to_string(bank.image_anchors.cols()) + " channels, features have " +
                    std::to_string(in.image_features.cols()));
  require_shape(bank.audio_anchors.cols() == in.audio_features.cols(),
                "audio anchors have " + std::to_string(bank.audio_anchors.cols()) + " channels, features have " +
                    std::to_string(in.audio_features.cols()));

  const bool soft = opts.component_mode == ComponentMode::SoftMask;
  const Matrix comp_i = soft ? semantic_components(in.image_features, in.image_activations) : in.image_factors;
  const Matrix comp_a = soft ? semantic_components(in.audio_features, in.audio_activations) : in.audio_factors;

  const auto j_count = static_cast<Eigen::Index>(bank.size());
  PenaltyResult r;
  auto& ds = r.descriptors;
  ds.image_desc.resize(k_count, j_count);
  ds.audio_desc.resize(k_count, j_count);
  ds.per_factor_ce.resize(k_count);
  std::vector<DivergenceGrad> grads;
  for (Eigen::Index k = 0; k < k_count; ++k) {
    const auto di = semantic_descriptor(comp_i.row(k).transpose(), bank.image_anchors);
    const auto da = semantic_descriptor(comp_a.row(k).transpose(), bank.audio_anchors);
    ds.image_desc.row(k) = di.values.transpose();
    ds.audio_desc.row(k) = da.values.transpose();
    ds.image_degenerate.push_back(di.degenerate);
    ds.audio_degenerate.push_back(da.degenerate);
    auto g = descriptor_divergence_grad(opts.kind, di.values, da.values, opts.temperature);
    ds.per_factor_ce[k] = g.value;
    grads.push_back(std::move(g));
  }
  ds.k_star = select_kstar(ds.per_factor_ce);
  r.k_star = ds.k_star;
  r.value = opts.min_mode == MinMode::Min ? ds.per_factor_ce[static_cast<Eigen::Index>(r.k_star)]
                                          : ds.per_factor_ce.mean();
  if (!with_gradient) return r;

  // Upstream weights per factor: 1 on the active branch of the min, 1/K for the mean.
  Vector weight = Vector::Zero(k_count);
  if (opts.min_mode == MinMode::Min)
    weight[static_cast<Eigen::Index>(r.k_star)] = 1.0;
  else
    weight.setConstant(1.0 / static_cast<double>(k_count));

  Matrix g_comp_i = Matrix::Zero(k_count, comp_i.cols());
  Matrix g_comp_a = Matrix::Zero(k_count, comp_a.cols());
  for (Eigen::Index k = 0; k < k_count; ++k) {
    if (weight[k] == 0.0) continue;
    const auto& g = grads[static_cast<std::size_t>(k)];
    g_comp_i.row(k) = weight[k] * detail::descriptor_backward(comp_i.row(k).transpose(), bank.image_anchors,
                                                              ds.image_desc.row(k).transpose(), g.d_image)
                                      .transpose();
    g_comp_a.row(k) = weight[k] * detail::descriptor_backward(comp_a.row(k).transpose(), bank.audio_anchors,
                                                              ds.audio_desc.row(k).transpose(), g.d_audio)
                                      .transpose();
  }

  if (soft) {
    // C = (1/N) U^T X  =>  dP/dU = (1/N) X G^T
    r.grad_image_activations = in.image_features * g_comp_i.transpose() / static_cast<double>(in.image_features.rows());
    r.grad_audio_activations = in.audio_features * g_comp_a.transpose() / static_cast<double>(in.audio_features.rows());
    r.grad_image_factors = Matrix::Zero(in.image_factors.rows(), in.image_factors.cols());
    r.grad_audio_factors = Matrix::Zero(in.audio_factors.rows(), in.audio_factors.cols());
  } else {
    r.grad_image_activations = Matrix::Zero(in.image_activations.rows(), k_count);
    r.grad_audio_activations = Matrix::Zero(in.audio_activations.rows(), k_count);
    r.grad_image_factors = std::move(g_comp_i);
    r.grad_audio_factors = std::move(g_comp_a);
  }
  return r;
}

}  // namespace semconmf
