#pragma once

// Full-batch projected gradient descent on the co-factorization objective.
//
// Every iteration evaluates the objective of every frame at the current
// state, then updates logits and factors of both modalities simultaneously
// from that single evaluation and projects the factors back onto V >= 0.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "semconmf/errors.hpp"
#include "semconmf/matrix.hpp"
#include "semconmf/nmfcore.hpp"
#include "semconmf/semantics.hpp"

namespace semconmf {

struct SolverConfig {
  int K = 8;
  double beta_p = 125.0;
  double beta_temp = 1.0;  // use 0 for multi-source material
  double learning_rate = 0.25;
  int iterations = 1800;
  std::uint64_t seed = 0;
  PenaltyKind penalty_kind = PenaltyKind::CrossEntropy;
  MinMode min_mode = MinMode::Min;
  ComponentMode component_mode = ComponentMode::SoftMask;
  double temperature = 1.0;
  ReconScale recon_scale = ReconScale::Mean;

  void validate() const {
    if (K < 1) throw InvalidInput("K must be >= 1");
    if (iterations < 1) throw InvalidInput("iterations must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidInput("learning_rate must be > 0");
    if (!(beta_p >= 0.0)) throw InvalidInput("beta_p must be >= 0");
    if (!(beta_temp >= 0.0)) throw InvalidInput("beta_temp must be >= 0");
    if (!(temperature > 0.0)) throw InvalidInput("temperature must be > 0");
  }

  ObjectiveConfig objective() const {
    return {beta_p, beta_temp, recon_scale, {penalty_kind, min_mode, component_mode, temperature}};
  }

  /// Seed of frame t in a sequence; frame 0 uses `seed` itself.
  std::uint64_t frame_seed(std::size_t t) const { return seed + t; }
};

struct FramePair {
  Matrix audio;  // N_T x C_A
  Matrix image;  // HW x C_I
};

struct DecompositionResult {
  DecompositionState state;
  std::size_t k_star = 0;
  std::vector<LossBreakdown> loss_trace;  // one entry per iteration, evaluated before its update
  DescriptorSet descriptors;              // at the final state
};

/// Called after every update with the 1-based iteration number and the new states.
using IterationObserver = std::function<void(std::size_t, const std::vector<DecompositionState>&)>;

namespace detail {

inline void require_nonneg(const Matrix& x, const char* what) {
  if (!x.allFinite()) throw InvalidInput(std::string(what) + " has non-finite entries");
  if (x.size() > 0 && x.minCoeff() < 0.0) throw InvalidInput(std::string(what) + " has negative entries; clamp first");
}

inline void step(FactorPair& fp, const Matrix& d_logits, const Matrix& d_factors, double lr) {
  fp.logits -= lr * d_logits;
  fp.factors = (fp.factors - lr * d_factors).cwiseMax(0.0);
}

}  // namespace detail

/// Jointly optimizes T frame states. With T > 1 and beta_temp > 0 the temporal
/// consistency term couples consecutive frames through their current k*.
inline std::vector<DecompositionResult> decompose_sequence(const std::vector<FramePair>& frames, const AnchorBank& bank,
                                                           const SolverConfig& config,
                                                           const IterationObserver& observer = {}) {
  config.validate();
  bank.validate();
  if (frames.empty()) throw InvalidInput("at least one frame is required");
  for (const auto& f : frames) {
    detail::require_nonneg(f.audio, "audio features");
    detail::require_nonneg(f.image, "image features");
    require_shape(f.audio.cols() == bank.audio_anchors.cols(),
                  "audio features have " + std::to_string(f.audio.cols()) + " channels, anchors have " +
                      std::to_string(bank.audio_anchors.cols()));
    require_shape(f.image.cols() == bank.image_anchors.cols(),
                  "image features have " + std::to_string(f.image.cols()) + " channels, anchors have " +
                      std::to_string(bank.image_anchors.cols()));
  }

  const std::size_t n_frames = frames.size();
  const auto objective = config.objective();
  const bool temporal = n_frames > 1 && config.beta_temp > 0.0;

  std::vector<DecompositionState> states;
  std::vector<DecompositionResult> results(n_frames);
  for (std::size_t t = 0; t < n_frames; ++t) {
    states.push_back(init_state(frames[t].audio.rows(), frames[t].image.rows(), frames[t].audio.cols(),
                                frames[t].image.cols(), config.K, config.frame_seed(t)));
    results[t].loss_trace.reserve(static_cast<std::size_t>(config.iterations));
  }

  std::vector<FrameEvaluation> evals(n_frames);
  std::vector<std::size_t> k_star(n_frames);
  for (int it = 0; it < config.iterations; ++it) {
    double total = 0.0;
    for (std::size_t t = 0; t < n_frames; ++t) {
      evals[t] = evaluate_frame(states[t], frames[t].audio, frames[t].image, bank, objective, true);
      k_star[t] = evals[t].penalty.k_star;
    }
    TemporalTerm temp;
    if (temporal) temp = temporal_term(states, k_star, config.beta_temp, true);
    for (std::size_t t = 0; t < n_frames; ++t) {
      LossBreakdown lb = evals[t].loss;
      if (temporal && t + 1 < n_frames) {
        lb.temporal = temp.per_pair[t];
        lb.total += lb.temporal;
      }
      total += lb.total;
      results[t].loss_trace.push_back(lb);
    }
    if (!std::isfinite(total)) throw DivergenceError(static_cast<std::size_t>(it) + 1, "non-finite loss");

    for (std::size_t t = 0; t < n_frames; ++t) {
      auto& g = evals[t].grad;
      if (temporal) {
        g.audio_factors += temp.grad_audio_factors[t];
        g.image_factors += temp.grad_image_factors[t];
      }
      detail::step(states[t].audio, g.audio_logits, g.audio_factors, config.learning_rate);
      detail::step(states[t].image, g.image_logits, g.image_factors, config.learning_rate);
    }
    if (observer) observer(static_cast<std::size_t>(it) + 1, states);
  }

  for (std::size_t t = 0; t < n_frames; ++t) {
    auto final_eval = evaluate_frame(states[t], frames[t].audio, frames[t].image, bank, objective, false);
    if (!std::isfinite(final_eval.loss.total))
      throw DivergenceError(static_cast<std::size_t>(config.iterations), "non-finite loss at final state");
    results[t].k_star = final_eval.penalty.k_star;
    results[t].descriptors = std::move(final_eval.penalty.descriptors);
    results[t].state = std::move(states[t]);
  }
  return results;
}

/// Single audio-image pair.
inline DecompositionResult decompose(const Matrix& x_audio, const Matrix& x_image, const AnchorBank& bank,
                                     const SolverConfig& config, const IterationObserver& observer = {}) {
  std::vector<FramePair> frames{{x_audio, x_image}};
  return std::move(decompose_sequence(frames, bank, config, observer).front());
}

struct ModalityResult {
  FactorPair factors;
  std::vector<double> loss_trace;
};

/// Sigmoid-parameterized NMF of a single modality with no cross-modal terms.
/// Draws the same initial values the joint solver uses for that modality.
inline ModalityResult decompose_modality(const Matrix& x, Modality modality, const SolverConfig& config,
                                         const std::function<void(std::size_t, const FactorPair&)>& observer = {}) {
  config.validate();
  detail::require_nonneg(x, "features");
  ModalityResult r;
  r.factors = init_modality(x.rows(), x.cols(), config.K, config.seed, modality);
  const double weight = recon_weight(config.recon_scale, x);
  for (int it = 0; it < config.iterations; ++it) {
    auto g = recon_gradient(x, r.factors, weight);
    if (!std::isfinite(g.value)) throw DivergenceError(static_cast<std::size_t>(it) + 1, "non-finite loss");
    r.loss_trace.push_back(g.value);
    detail::step(r.factors, g.logits, g.factors, config.learning_rate);
    if (observer) observer(static_cast<std::size_t>(it) + 1, r.factors);
  }
  return r;
}

}  // namespace semconmf
