// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "semconmf/dataset.hpp"
#include "semconmf/metrics.hpp"
#include "semconmf/pipeline.hpp"
#include "semconmf/solver.hpp"
#include "semconmf/synthetic.hpp"

using namespace semconmf;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr int kGradFixtures = 5;
constexpr double kGradStep = 1e-4;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradSeconds = 10.0;
constexpr int kPlantedRuns = 20;
constexpr int kPlantedKStarMin = 18;
constexpr int kPlantedIouMin = 16;
constexpr double kPlantedIou = 0.8;
constexpr double kPlantedSeconds = 120.0;
constexpr double kRankOneRatio = 1e-3;
constexpr int kRankOneIterations = 1800;
constexpr int kMetricMasks = 100;
constexpr double kMetricTol = 1e-12;
constexpr int kTemporalSeeds = 10;
constexpr int kTemporalWinsMin = 9;

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Gradients zeros_like(const DecompositionState& s) {
  return {Matrix::Zero(s.audio.logits.rows(), s.audio.logits.cols()),
          Matrix::Zero(s.image.logits.rows(), s.image.logits.cols()),
          Matrix::Zero(s.audio.factors.rows(), s.audio.factors.cols()),
          Matrix::Zero(s.image.factors.rows(), s.image.factors.cols())};
}

Outcome gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  const std::size_t ks_pair[2] = {1, 0};
  for (int f = 0; f < kGradFixtures; ++f) {
    auto [p, s] = oracle::random_problem(1000 + static_cast<std::uint64_t>(f), 6, 9, 5, 7, 2, 3);
    auto s2 = oracle::random_problem(2000 + static_cast<std::uint64_t>(f), 6, 9, 5, 7, 2, 3).second;
    const double wa = 1.0 / 30.0, wi = 1.0 / 63.0, beta_p = 125.0, beta_temp = 1.0;
    using States = std::vector<DecompositionState>;
    auto check = [&](const States& states, const std::vector<Gradients>& analytic,
                     const std::function<double(const States&)>& fn) {
      const auto fd = oracle::finite_difference(states, fn, kGradStep);
      worst = std::max(worst, oracle::max_rel_error(oracle::flatten(analytic), fd));
    };

    // reconstruction, audio and image separately
    {
      auto g = zeros_like(s);
      const auto r = recon_gradient(p.x_audio, s.audio, wa);
      g.audio_logits = r.logits;
      g.audio_factors = r.factors;
      check({s}, {g}, [&](const States& st) {
        return wa * oracle::recon_sum(p.x_audio, oracle::activations(st[0].audio.logits), st[0].audio.factors);
      });
    }
    {
      auto g = zeros_like(s);
      const auto r = recon_gradient(p.x_image, s.image, wi);
      g.image_logits = r.logits;
      g.image_factors = r.factors;
      check({s}, {g}, [&](const States& st) {
        return wi * oracle::recon_sum(p.x_image, oracle::activations(st[0].image.logits), st[0].image.factors);
      });
    }
    // semantic penalty, each divergence and reduction variant
    for (auto kind : {PenaltyKind::CrossEntropy, PenaltyKind::KL})
      for (auto mode : {MinMode::Min, MinMode::Mean})
        for (auto comp : {ComponentMode::SoftMask, ComponentMode::FactorRow}) {
          p.penalty = {kind, mode, comp, 1.0};
          const Matrix ua = s.audio.activations(), ui = s.image.activations();
          const auto pr =
              penalty_term({p.x_audio, p.x_image, ua, ui, s.audio.factors, s.image.factors}, p.bank, p.penalty, true);
          check({s}, {penalty_gradients(pr, ua, ui)}, [&](const States& st) { return oracle::penalty_value(p, st[0]); });
        }
    p.penalty = {};
    // temporal term over a two-frame sequence
    {
      const States states{s, s2};
      const auto tt = temporal_term(states, {ks_pair[0], ks_pair[1]}, beta_temp, true);
      std::vector<Gradients> g{zeros_like(s), zeros_like(s2)};
      for (int t = 0; t < 2; ++t) {
        g[static_cast<std::size_t>(t)].audio_factors = tt.grad_audio_factors[static_cast<std::size_t>(t)];
        g[static_cast<std::size_t>(t)].image_factors = tt.grad_image_factors[static_cast<std::size_t>(t)];
      }
      check(states, g, [&](const States& st) {
        return -beta_temp *
               (oracle::cos_sim(oracle::row(st[0].image.factors, 1), oracle::row(st[1].image.factors, 0)) +
                oracle::cos_sim(oracle::row(st[0].audio.factors, 1), oracle::row(st[1].audio.factors, 0)));
      });
    }
    // total single-frame objective at the default weights
    {
      ObjectiveConfig cfg;
      cfg.beta_p = beta_p;
      const auto ev = evaluate_frame(s, p.x_audio, p.x_image, p.bank, cfg, true);
      check({s}, {ev.grad}, [&](const States& st) {
        return wa * oracle::recon_sum(p.x_audio, oracle::activations(st[0].audio.logits), st[0].audio.factors) +
               wi * oracle::recon_sum(p.x_image, oracle::activations(st[0].image.logits), st[0].image.factors) +
               beta_p * oracle::penalty_value(p, st[0]);
      });
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= kGradRelTol && secs < kGradSeconds,
          fmt("max relative error %.3g (tol %.0e), %.2f s", worst, kGradRelTol, secs)};
}

Outcome decoupling() {
  auto [p, s] = oracle::random_problem(77, 6, 9, 5, 7, 2, 3);
  SolverConfig cfg;
  cfg.K = 2;
  cfg.beta_p = 0.0;
  cfg.beta_temp = 0.0;
  cfg.seed = 9;
  std::vector<DecompositionState> joint;
  decompose(p.x_audio, p.x_image, p.bank, cfg,
            [&](std::size_t, const std::vector<DecompositionState>& st) { joint.push_back(st[0]); });
  std::vector<FactorPair> audio, image;
  decompose_modality(p.x_audio, Modality::Audio, cfg, [&](std::size_t, const FactorPair& fp) { audio.push_back(fp); });
  decompose_modality(p.x_image, Modality::Image, cfg, [&](std::size_t, const FactorPair& fp) { image.push_back(fp); });
  std::size_t mismatches = 0;
  for (std::size_t i = 0; i < joint.size(); ++i)
    mismatches += !(joint[i].audio.logits == audio[i].logits && joint[i].audio.factors == audio[i].factors &&
                    joint[i].image.logits == image[i].logits && joint[i].image.factors == image[i].factors);
  const bool same_len = joint.size() == audio.size() && joint.size() == image.size();
  return {same_len && mismatches == 0,
          fmt("%.0f iterations compared, %.0f differ", static_cast<double>(joint.size()), static_cast<double>(mismatches))};
}

Outcome planted_recovery() {
  const auto t0 = Clock::now();
  int kstar_ok = 0, iou_ok = 0;
  for (int i = 0; i < kPlantedRuns; ++i) {
    const auto fx = synthetic::make_planted(static_cast<std::uint64_t>(i));
    SolverConfig cfg;
    cfg.seed = 100 + static_cast<std::uint64_t>(i);
    const auto r = decompose(fx.audio, fx.image, fx.bank, cfg);
    const auto k = static_cast<Eigen::Index>(r.k_star);
    Eigen::Index img = -1, aud = -1;
    r.descriptors.image_desc.row(k).maxCoeff(&img);
    r.descriptors.audio_desc.row(k).maxCoeff(&aud);
    kstar_ok += img == synthetic::kSounding && aud == synthetic::kSounding;
    const BinaryMask pred = binarize(activation_mask(r.state.image.activations(), r.k_star, fx.height, fx.width));
    iou_ok += mask_iou(pred, fx.sounding_blob) >= kPlantedIou;
  }
  const double secs = seconds_since(t0);
  return {kstar_ok >= kPlantedKStarMin && iou_ok >= kPlantedIouMin && secs < kPlantedSeconds,
          fmt("k* correct %.0f/20, IoU >= 0.8 in %.0f/20, %.1f s", kstar_ok, iou_ok, secs)};
}

Outcome rank_one() {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> a(0.2, 0.9), b(0.0, 2.0);
  auto make = [&](Eigen::Index rows, Eigen::Index cols) {
    Vector u(rows), v(cols);
    for (auto& x : u) x = a(rng);
    for (auto& x : v) x = b(rng);
    return Matrix(u * v.transpose());
  };
  const Matrix xa = make(6, 5), xi = make(9, 7);
  auto [p, s] = oracle::random_problem(32, 6, 9, 5, 7, 1, 3);
  SolverConfig cfg;
  cfg.K = 1;
  cfg.iterations = kRankOneIterations;
  const auto r = decompose(xa, xi, p.bank, cfg);
  const auto last = evaluate_frame(r.state, xa, xi, p.bank, cfg.objective(), false).loss;
  const double ra = last.recon_audio / r.loss_trace.front().recon_audio;
  const double ri = last.recon_image / r.loss_trace.front().recon_image;
  return {ra < kRankOneRatio && ri < kRankOneRatio, fmt("final/initial audio %.3g, image %.3g", ra, ri)};
}

Outcome metric_oracle() {
  std::mt19937_64 rng(555);
  std::uniform_real_distribution<double> density(0.0, 1.0);
  std::uniform_int_distribution<int> level(0, 7);
  double worst = 0.0;
  for (int i = 0; i < kMetricMasks; ++i) {
    BinaryMask pred(8, 8), gt(8, 8);
    std::bernoulli_distribution bp(density(rng)), bg(density(rng));
    for (Eigen::Index j = 0; j < 64; ++j) {
      pred.data()[j] = bp(rng);
      gt.data()[j] = bg(rng);
    }
    Matrix scores(8, 8);
    for (Eigen::Index j = 0; j < 64; ++j) scores.data()[j] = level(rng) / 7.0;
    const auto c = oracle::count(pred, gt);
    worst = std::max({worst, std::abs(mask_iou(pred, gt) - oracle::iou_fg(c)),
                      std::abs(mean_iou_binary(pred, gt) - 0.5 * (oracle::iou_fg(c) + oracle::iou_bg(c))),
                      std::abs(f_score(pred, gt) - oracle::fbeta(c, kDefaultBetaSq)),
                      std::abs(average_precision(scores, gt) - oracle::ap_threshold_sweep(scores, gt))});
  }
  BinaryMask gt(2, 2);
  gt << 0, 0, 0, 1;
  const double ap = average_precision(Matrix{{0.9, 0.8}, {0.7, 0.6}}, gt);
  return {worst <= kMetricTol && ap == 0.25, fmt("max deviation %.3g, reversed-ranking AP %.17g", worst, ap)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "semconmf_acceptance_determinism";
  fs::remove_all(root);
  const auto manifest = synthetic::write_planted_dataset(root / "data", {2, 1, 0, {}});
  std::ostringstream log;
  int codes = 0;
  for (const char* out : {"a", "b"}) {
    RunConfig cfg;
    cfg.manifest_path = manifest;
    cfg.output_dir = root / out;
    cfg.solver.seed = 7;
    codes += cmd_decompose(cfg, log);
  }
  std::size_t compared = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (e.path().extension() != ".json") continue;
    ++compared;
    differing += slurp(e.path()) != slurp(root / "b" / fs::relative(e.path(), root / "a"));
  }
  return {codes == 0 && compared >= 3 && differing == 0,
          fmt("%.0f JSON files compared, %.0f differ", static_cast<double>(compared), static_cast<double>(differing))};
}

Outcome temporal_effect() {
  int wins = 0;
  for (int i = 0; i < kTemporalSeeds; ++i) {
    const auto fx = synthetic::make_planted(300 + static_cast<std::uint64_t>(i));
    const std::vector<FramePair> frames{{fx.audio, fx.image}, {fx.audio, fx.image}};
    auto cos_kstar = [&](double beta_temp) {
      SolverConfig cfg;
      cfg.seed = static_cast<std::uint64_t>(i);
      cfg.beta_temp = beta_temp;
      const auto r = decompose_sequence(frames, fx.bank, cfg);
      return cosine(r[0].state.image.factors.row(static_cast<Eigen::Index>(r[0].k_star)).transpose(),
                    r[1].state.image.factors.row(static_cast<Eigen::Index>(r[1].k_star)).transpose());
    };
    wins += cos_kstar(1.0) >= cos_kstar(0.0);
  }
  return {wins >= kTemporalWinsMin, fmt("beta_temp=1 at least as aligned in %.0f/10 seeds", wins)};
}

Outcome ablation() {
  int differ = 0;
  const int n = 10;
  for (int i = 0; i < n; ++i) {
    auto [p, s] = oracle::random_problem(900 + static_cast<std::uint64_t>(i), 6, 9, 5, 7, 2, 3);
    const Matrix ua = s.audio.activations(), ui = s.image.activations();
    const PenaltyInputs in{p.x_audio, p.x_image, ua, ui, s.audio.factors, s.image.factors};
    PenaltyOptions rows;
    rows.component_mode = ComponentMode::FactorRow;
    differ += penalty_term(in, p.bank, {}, false).value != penalty_term(in, p.bank, rows, false).value;
  }
  return {differ == n, fmt("FactorRow and SoftMask penalties differ on %.0f/%.0f fixtures", differ, n)};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient-check", gradient_check},   {"decoupling", decoupling},
      {"planted-recovery", planted_recovery}, {"rank-one", rank_one},
      {"metric-oracle", metric_oracle},     {"determinism", determinism},
      {"temporal-effect", temporal_effect}, {"ablation-inequality", ablation},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %-20s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
