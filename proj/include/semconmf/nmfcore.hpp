#pragma once

// Decomposition state, reconstruction and temporal losses, and the exact
// gradient of the full objective with respect to every decision variable.
//
// Activations are parameterized through logits (U = sigmoid(logits)) so they
// stay inside (0, 1); factors are plain non-negative matrices.

#include <algorithm>
#include <cstdint>
#include <iostream>
#include <random>
#include <vector>

#include "semconmf/errors.hpp"
#include "semconmf/matrix.hpp"
#include "semconmf/semantics.hpp"

namespace semconmf {

inline constexpr double kInitStddev = 0.1;

/// Logits and factors of one modality: X ~ sigmoid(logits) * factors.
struct FactorPair {
  Matrix logits;   // N x K
  Matrix factors;  // K x C

  Matrix activations() const { return sigmoid(logits); }
  Eigen::Index rank() const { return factors.rows(); }
};

struct DecompositionState {
  FactorPair audio;
  FactorPair image;

  Eigen::Index rank() const { return image.rank(); }
  FactorPair& modality(Modality m) { return m == Modality::Audio ? audio : image; }
  const FactorPair& modality(Modality m) const { return m == Modality::Audio ? audio : image; }
};

namespace detail {

// Each (seed, modality, block) pair owns an independent stream so that a
// single-modality run draws exactly the values a joint run would.
inline Matrix gaussian_block(std::uint64_t seed, Modality m, std::uint32_t block, Eigen::Index rows, Eigen::Index cols) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(m == Modality::Audio ? 0xA0D10u : 0x1A6Eu), block};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> dist(0.0, kInitStddev);
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = dist(rng);
  return out;
}

}  // namespace detail

inline FactorPair init_modality(Eigen::Index rows, Eigen::Index channels, Eigen::Index rank, std::uint64_t seed,
                                Modality m) {
  if (rows < 1 || channels < 1 || rank < 1) throw InvalidInput("all dimensions must be >= 1");
  return {detail::gaussian_block(seed, m, 0, rows, rank),
          detail::gaussian_block(seed, m, 1, rank, channels).cwiseMax(0.0)};
}

/// Gaussian(0, 0.1^2) logits and factors; factors clamped to >= 0 right after the draw.
inline DecompositionState init_state(Eigen::Index n_tokens, Eigen::Index n_patches, Eigen::Index audio_channels,
                                     Eigen::Index image_channels, Eigen::Index rank, std::uint64_t seed,
                                     std::ostream* warn = &std::cerr) {
  if (warn && rank > std::min(n_tokens, n_patches))
    *warn << "warning: K=" << rank << " exceeds min(N_T, HW)=" << std::min(n_tokens, n_patches)
          << " (over-complete factorization)\n";
  return {init_modality(n_tokens, audio_channels, rank, seed, Modality::Audio),
          init_modality(n_patches, image_channels, rank, seed, Modality::Image)};
}

/// sum_ij (X - U V)^2
inline double reconstruction_loss(const Matrix& x, const Matrix& u, const Matrix& v) {
  require_shape(u.cols() == v.rows() && x.rows() == u.rows() && x.cols() == v.cols(),
                "reconstruction shapes incompatible");
  return (x - u * v).squaredNorm();
}

/// How the squared reconstruction error enters the objective.
enum class ReconScale {
  Sum,   // plain sum over entries
  Mean,  // sum divided by the number of entries
};

inline double recon_weight(ReconScale scale, const Matrix& x) {
  return scale == ReconScale::Mean ? 1.0 / static_cast<double>(x.size()) : 1.0;
}

struct LossBreakdown {
  double recon_audio = 0.0;  // scaled as it enters the objective
  double recon_image = 0.0;
  double penalty = 0.0;      // unweighted
  double temporal = 0.0;     // already multiplied by -beta_temp
  double total = 0.0;
};

struct Gradients {
  Matrix audio_logits;
  Matrix image_logits;
  Matrix audio_factors;
  Matrix image_factors;
};

struct ObjectiveConfig {
  double beta_p = 125.0;
  double beta_temp = 1.0;
  ReconScale recon_scale = ReconScale::Mean;
  PenaltyOptions penalty;
};

struct ReconGradient {
  double value = 0.0;  // weighted
  Matrix logits;
  Matrix factors;
};

/// Weighted reconstruction loss of one modality and its gradient w.r.t. logits and factors.
inline ReconGradient recon_gradient(const Matrix& x, const FactorPair& fp, double weight) {
  const Matrix u = fp.activations();
  require_shape(x.rows() == u.rows() && x.cols() == fp.factors.cols(), "feature matrix does not match state");
  const Matrix residual = u * fp.factors - x;
  ReconGradient g;
  g.value = weight * residual.squaredNorm();
  g.factors = 2.0 * weight * u.transpose() * residual;
  const Matrix d_u = 2.0 * weight * residual * fp.factors.transpose();
  g.logits = (d_u.array() * u.array() * (1.0 - u.array())).matrix();
  return g;
}

/// Unweighted penalty gradient mapped to logits and factors (sigmoid chain rule applied).
inline Gradients penalty_gradients(const PenaltyResult& p, const Matrix& audio_activations,
                                   const Matrix& image_activations) {
  auto chain = [](const Matrix& d_u, const Matrix& u) {
    return Matrix((d_u.array() * u.array() * (1.0 - u.array())).matrix());
  };
  return {chain(p.grad_audio_activations, audio_activations), chain(p.grad_image_activations, image_activations),
          p.grad_audio_factors, p.grad_image_factors};
}

struct FrameEvaluation {
  LossBreakdown loss;  // temporal left at 0
  PenaltyResult penalty;
  Gradients grad;  // empty unless requested
};

/// Loss of a single frame (reconstruction + penalty) and optionally its gradient.
/// The penalty gradient is skipped entirely when beta_p is zero.
inline FrameEvaluation evaluate_frame(const DecompositionState& s, const Matrix& x_audio, const Matrix& x_image,
                                      const AnchorBank& bank, const ObjectiveConfig& cfg, bool with_gradient) {
  FrameEvaluation ev;
  auto ra = recon_gradient(x_audio, s.audio, recon_weight(cfg.recon_scale, x_audio));
  auto ri = recon_gradient(x_image, s.image, recon_weight(cfg.recon_scale, x_image));
  const Matrix ua = s.audio.activations();
  const Matrix ui = s.image.activations();
  const bool penalty_grad = with_gradient && cfg.beta_p != 0.0;
  ev.penalty = penalty_term({x_audio, x_image, ua, ui, s.audio.factors, s.image.factors}, bank, cfg.penalty,
                            penalty_grad);
  ev.loss.recon_audio = ra.value;
  ev.loss.recon_image = ri.value;
  ev.loss.penalty = ev.penalty.value;
  ev.loss.total = ra.value + ri.value + cfg.beta_p * ev.penalty.value;
  if (!with_gradient) return ev;

  ev.grad.audio_logits = std::move(ra.logits);
  ev.grad.image_logits = std::move(ri.logits);
  ev.grad.audio_factors = std::move(ra.factors);
  ev.grad.image_factors = std::move(ri.factors);
  if (penalty_grad) {
    const auto pg = penalty_gradients(ev.penalty, ua, ui);
    ev.grad.audio_logits += cfg.beta_p * pg.audio_logits;
    ev.grad.image_logits += cfg.beta_p * pg.image_logits;
    ev.grad.audio_factors += cfg.beta_p * pg.audio_factors;
    ev.grad.image_factors += cfg.beta_p * pg.image_factors;
  }
  return ev;
}

/// Context the penalty needs beyond the state and features.
struct SemanticsContext {
  const AnchorBank& bank;
  ObjectiveConfig objective;
};

/// Gradient of the single-frame objective.
inline Gradients loss_gradients(const DecompositionState& s, const Matrix& x_audio, const Matrix& x_image,
                                const SemanticsContext& ctx) {
  return evaluate_frame(s, x_audio, x_image, ctx.bank, ctx.objective, true).grad;
}

struct TemporalTerm {
  std::vector<double> per_pair;  // weighted contribution of pair (t, t+1), size T-1
  std::vector<Matrix> grad_audio_factors;  // one per frame
  std::vector<Matrix> grad_image_factors;
  double total() const {
    double s = 0.0;
    for (double v : per_pair) s += v;
    return s;
  }
};

/// -beta_temp * sum_t [cos(V_I,t^{k*_t}, V_I,t+1^{k*_t+1}) + cos(V_A,t^{k*_t}, V_A,t+1^{k*_t+1})]
/// The k* indices are treated as constants.
inline TemporalTerm temporal_term(const std::vector<DecompositionState>& states, const std::vector<std::size_t>& k_star,
                                  double beta_temp, bool with_gradient) {
  require_shape(states.size() == k_star.size(), "one k* per frame required");
  TemporalTerm t;
  if (with_gradient)
    for (const auto& s : states) {
      t.grad_audio_factors.push_back(Matrix::Zero(s.audio.factors.rows(), s.audio.factors.cols()));
      t.grad_image_factors.push_back(Matrix::Zero(s.image.factors.rows(), s.image.factors.cols()));
    }
  for (std::size_t f = 0; f + 1 < states.size(); ++f) {
    const auto ka = static_cast<Eigen::Index>(k_star[f]);
    const auto kb = static_cast<Eigen::Index>(k_star[f + 1]);
    const Vector ia = states[f].image.factors.row(ka).transpose();
    const Vector ib = states[f + 1].image.factors.row(kb).transpose();
    const Vector aa = states[f].audio.factors.row(ka).transpose();
    const Vector ab = states[f + 1].audio.factors.row(kb).transpose();
    t.per_pair.push_back(-beta_temp * (cosine(ia, ib) + cosine(aa, ab)));
    if (!with_gradient) continue;
    t.grad_image_factors[f].row(ka) -= beta_temp * cosine_grad(ia, ib).transpose();
    t.grad_image_factors[f + 1].row(kb) -= beta_temp * cosine_grad(ib, ia).transpose();
    t.grad_audio_factors[f].row(ka) -= beta_temp * cosine_grad(aa, ab).transpose();
    t.grad_audio_factors[f + 1].row(kb) -= beta_temp * cosine_grad(ab, aa).transpose();
  }
  return t;
}

}  // namespace semconmf
