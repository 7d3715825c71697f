#pragma once

// Batch front-end behind the command-line tool: decompose every manifest
// sample, run the segmenter stage, score the results and export inspection
// artifacts.
//
// Output layout of `decompose`:
//   <out>/results.json                         batch summary
//   <out>/<sample>/seed_<S>/result.json        k*, label, descriptor tables
//   <out>/<sample>/seed_<S>/frame_<t>_*.tensor raw masks and decomposition
//   <out>/<sample>/seed_<S>/frame_<t>_*.png    grayscale masks
//   <out>/<sample>/seed_<S>/frame_<t>_loss_trace.csv

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "semconmf/errors.hpp"
#include "semconmf/metrics.hpp"
#include "semconmf/png.hpp"
#include "semconmf/segment.hpp"
#include "semconmf/solver.hpp"
#include "semconmf/tensorio.hpp"

namespace semconmf {

namespace fs = std::filesystem;

struct RunConfig {
  fs::path manifest_path;
  fs::path output_dir;
  SolverConfig solver;
  int repeats = 1;  // seeds solver.seed .. solver.seed + repeats - 1
  std::string segmenter = "stub";
  double threshold = kDefaultThreshold;
  int workers = 1;
};

struct EvalConfig {
  fs::path results_dir;
  fs::path manifest_path;
  double beta_sq = kDefaultBetaSq;
  double threshold = kDefaultThreshold;
};

struct InspectConfig {
  fs::path results_dir;
  std::string sample_id;
  std::optional<std::uint64_t> seed;
};

inline const char* to_string(PenaltyKind k) { return k == PenaltyKind::KL ? "kl" : "ce"; }
inline const char* to_string(MinMode m) { return m == MinMode::Mean ? "mean" : "min"; }
inline const char* to_string(ComponentMode m) { return m == ComponentMode::FactorRow ? "factorrow" : "softmask"; }
inline const char* to_string(ReconScale s) { return s == ReconScale::Sum ? "sum" : "mean"; }

/// Worker cap from SEMCONMF_THREADS, if set to a positive integer.
inline int effective_workers(int requested) {
  int n = std::max(1, requested);
  if (const char* env = std::getenv("SEMCONMF_THREADS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && cap >= 1) n = std::min<int>(n, static_cast<int>(cap));
  }
  return n;
}

namespace detail {

inline nlohmann::json matrix_json(const Matrix& m) {
  auto rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline nlohmann::json solver_json(const SolverConfig& c) {
  return {{"K", c.K},
          {"beta_p", c.beta_p},
          {"beta_temp", c.beta_temp},
          {"learning_rate", c.learning_rate},
          {"iterations", c.iterations},
          {"seed", c.seed},
          {"penalty", to_string(c.penalty_kind)},
          {"min_mode", to_string(c.min_mode)},
          {"component_mode", to_string(c.component_mode)},
          {"temperature", c.temperature},
          {"recon_scale", to_string(c.recon_scale)}};
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
}

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_loss_trace(const fs::path& path, const std::vector<LossBreakdown>& trace) {
  std::ostringstream os;
  os << "iteration,recon_audio,recon_image,penalty,temporal,total\n";
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& l = trace[i];
    os << i + 1 << ',' << fmt_double(l.recon_audio) << ',' << fmt_double(l.recon_image) << ','
       << fmt_double(l.penalty) << ',' << fmt_double(l.temporal) << ',' << fmt_double(l.total) << '\n';
  }
  write_text(path, os.str());
}

inline void write_mask(const fs::path& dir, const std::string& stem, const SoftMask& m) {
  write_tensor(dir / (stem + ".tensor"), to_tensor(m.values));
  write_png_gray(dir / (stem + ".png"), m.values);
}

inline std::string frame_prefix(std::size_t t) { return "frame_" + std::to_string(t) + "_"; }
inline std::string seed_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

class Logger {
 public:
  explicit Logger(std::ostream& os) : os_(os) {}
  void operator()(const std::string& msg) {
    std::lock_guard lock(mutex_);
    os_ << msg << '\n';
  }

 private:
  std::ostream& os_;
  std::mutex mutex_;
};

struct LoadedSample {
  std::vector<FramePair> frames;
  AnchorBank bank;
};

inline LoadedSample load_sample(const SampleManifest& s) {
  LoadedSample ls;
  ls.bank = read_anchor_bank(s.anchor_bank_path);
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    FramePair fp;
    fp.image = clamp_nonneg(read_tensor(s.frames[t].image_features_path, Modality::Image).values);
    fp.audio = clamp_nonneg(read_tensor(s.frames[t].audio_features_path, Modality::Audio).values);
    require_shape(static_cast<Eigen::Index>(s.height * s.width) == fp.image.rows(),
                  "sample " + s.sample_id + " frame " + std::to_string(t) + ": H x W = " +
                      std::to_string(s.height * s.width) + " but image features have " +
                      std::to_string(fp.image.rows()) + " rows");
    ls.frames.push_back(std::move(fp));
  }
  return ls;
}

/// Runs one (sample, seed) and writes its directory. Returns the summary record.
inline nlohmann::json run_sample_seed(const SampleManifest& s, const LoadedSample& data, const RunConfig& cfg,
                                      std::uint64_t seed, Segmenter& segmenter, const fs::path& sample_dir) {
  SolverConfig sc = cfg.solver;
  sc.seed = seed;
  const auto results = decompose_sequence(data.frames, data.bank, sc);
  const fs::path dir = sample_dir / seed_dir_name(seed);
  fs::create_directories(dir);

  const auto h = static_cast<Eigen::Index>(s.height);
  const auto w = static_cast<Eigen::Index>(s.width);
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t t = 0; t < results.size(); ++t) {
    const auto& r = results[t];
    const std::string pre = frame_prefix(t);
    const Matrix ui = r.state.image.activations();
    const Matrix ua = r.state.audio.activations();

    const SoftMask act = activation_mask(ui, r.k_star, h, w);
    write_mask(dir, pre + "activation_mask", act);

    SegmenterPrompt prompt{r.state.image.factors, r.k_star};
    SegmenterInput input{s.sample_id, &data.frames[t].image, h, w,
                         s.image_path.value_or(s.frames[t].image_features_path)};
    auto masks = segmenter.prompt(prompt, input);
    if (masks.size() != static_cast<std::size_t>(sc.K))
      throw SegmenterError("segmenter returned " + std::to_string(masks.size()) + " masks for K=" +
                           std::to_string(sc.K));
    write_mask(dir, pre + "segmenter_mask", masks[r.k_star]);

    write_tensor(dir / (pre + "image_activations.tensor"), to_tensor(ui));
    write_tensor(dir / (pre + "audio_activations.tensor"), to_tensor(ua));
    write_tensor(dir / (pre + "image_factors.tensor"), to_tensor(r.state.image.factors));
    write_tensor(dir / (pre + "audio_factors.tensor"), to_tensor(r.state.audio.factors));
    write_loss_trace(dir / (pre + "loss_trace.csv"), r.loss_trace);

    nlohmann::json fj;
    fj["frame"] = t;
    fj["k_star"] = r.k_star;
    const Vector v_star = r.state.image.factors.row(static_cast<Eigen::Index>(r.k_star)).transpose();
    if (v_star.norm() > 0.0) {
      const auto cls = classify_sounding_factor(v_star, data.bank);
      fj["label"] = cls.label;
      fj["label_score"] = cls.score;
    } else {
      fj["label"] = nullptr;
      fj["label_score"] = nullptr;
    }
    fj["per_factor_ce"] = std::vector<double>(r.descriptors.per_factor_ce.data(),
                                              r.descriptors.per_factor_ce.data() + r.descriptors.per_factor_ce.size());
    fj["image_descriptors"] = matrix_json(r.descriptors.image_desc);
    fj["audio_descriptors"] = matrix_json(r.descriptors.audio_desc);
    fj["degenerate"] = r.descriptors.any_degenerate();
    const auto& last = r.loss_trace.back();
    fj["final_loss"] = {{"recon_audio", last.recon_audio},
                        {"recon_image", last.recon_image},
                        {"penalty", last.penalty},
                        {"temporal", last.temporal},
                        {"total", last.total}};
    fj["segmenter_mask_dims"] = {masks[r.k_star].height(), masks[r.k_star].width()};
    frames.push_back(std::move(fj));
  }

  nlohmann::json doc{{"sample_id", s.sample_id},
                     {"seed", seed},
                     {"spatial_dims", {s.height, s.width}},
                     {"labels", data.bank.labels},
                     {"segmenter", segmenter.name()},
                     {"config", solver_json(sc)},
                     {"frames", frames}};
  if (s.gt_class_label) doc["gt_class_label"] = *s.gt_class_label;
  write_text(dir / "result.json", doc.dump(2) + "\n");

  nlohmann::json summary{{"seed", seed}, {"dir", (fs::path(s.sample_id) / seed_dir_name(seed)).generic_string()}};
  auto fsum = nlohmann::json::array();
  for (const auto& fj : frames) fsum.push_back({{"frame", fj["frame"]}, {"k_star", fj["k_star"]}, {"label", fj["label"]}});
  summary["frames"] = std::move(fsum);
  return summary;
}

}  // namespace detail

/// Decomposes every sample of the manifest. Failures are isolated per sample;
/// the exit code is 1 if any sample failed, 0 otherwise.
inline int cmd_decompose(const RunConfig& cfg, std::ostream& log = std::cerr) {
  detail::Logger logger(log);
  Manifest manifest;
  std::unique_ptr<Segmenter> segmenter;
  try {
    cfg.solver.validate();
    if (cfg.repeats < 1) throw InvalidInput("repeats must be >= 1");
    manifest = read_manifest(cfg.manifest_path);
    fs::create_directories(cfg.output_dir);
    segmenter = make_segmenter(cfg.segmenter);
  } catch (const std::exception& e) {
    logger(std::string("error: ") + e.what());
    return 2;
  }

  const std::size_t n = manifest.samples.size();
  std::vector<nlohmann::json> records(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> any_failed{false};

  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const auto& s = manifest.samples[i];
      nlohmann::json rec{{"sample_id", s.sample_id}, {"frames", s.frame_count()}};
      try {
        if (s.sample_id.empty() || s.sample_id.find('/') != std::string::npos || s.sample_id == "." ||
            s.sample_id == "..")
          throw InvalidInput("sample_id must be a plain directory name");
        const auto data = detail::load_sample(s);
        auto runs = nlohmann::json::array();
        for (int rep = 0; rep < cfg.repeats; ++rep)
          runs.push_back(detail::run_sample_seed(s, data, cfg, cfg.solver.seed + static_cast<std::uint64_t>(rep),
                                                 *segmenter, cfg.output_dir / s.sample_id));
        rec["status"] = "ok";
        rec["runs"] = std::move(runs);
        logger("ok: " + s.sample_id);
      } catch (const std::exception& e) {
        rec["status"] = "failed";
        rec["error"] = e.what();
        any_failed = true;
        logger("failed: " + s.sample_id + ": " + e.what());
      }
      records[i] = std::move(rec);
    }
  };

  const int workers = std::min<int>(effective_workers(cfg.workers), static_cast<int>(std::max<std::size_t>(n, 1)));
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  nlohmann::json summary{{"config", detail::solver_json(cfg.solver)},
                         {"repeats", cfg.repeats},
                         {"segmenter", segmenter->name()},
                         {"samples", records}};
  try {
    detail::write_text(cfg.output_dir / "results.json", summary.dump(2) + "\n");
  } catch (const std::exception& e) {
    logger(std::string("error: ") + e.what());
    return 2;
  }
  return any_failed ? 1 : 0;
}

// ---------------------------------------------------------------------------
// eval

struct SeedScores {
  std::uint64_t seed = 0;
  MetricReport final_masks;       // segmenter output for k*
  MetricReport activation_masks;  // U_I column k*
  std::optional<SemanticReport> semantic;
};

namespace detail {

inline BinaryMask load_gt_mask(const fs::path& path) {
  const Matrix m = read_tensor(path).values;
  return (m.array() >= 0.5).cast<std::uint8_t>();
}

inline SoftMask load_mask(const fs::path& path) {
  SoftMask m;
  m.values = read_tensor(path).values;
  return m;
}

inline SoftMask fit_to(const SoftMask& m, const BinaryMask& gt) {
  if (m.height() == gt.rows() && m.width() == gt.cols()) return m;
  return upsample_bilinear(m, gt.rows(), gt.cols());
}

inline nlohmann::json report_json(const MetricReport& r) {
  auto per = nlohmann::json::array();
  for (const auto& s : r.per_sample)
    per.push_back({{"sample", s.sample_id}, {"mask_iou", s.mask_iou}, {"mean_iou", s.mean_iou},
                   {"f_score", s.f_score}, {"ap", s.ap}});
  return {{"mask_iou", r.mask_iou}, {"mean_iou", r.mean_iou}, {"f_score", r.f_score}, {"m_ap", r.m_ap},
          {"per_sample", std::move(per)}};
}

}  // namespace detail

/// Scores a decompose output directory against the manifest's ground truth.
/// Prints one line per metric with mean and standard deviation over seeds.
inline int cmd_eval(const EvalConfig& cfg, std::ostream& out = std::cout, std::ostream& log = std::cerr) {
  Manifest manifest;
  nlohmann::json summary;
  try {
    manifest = read_manifest(cfg.manifest_path);
    summary = nlohmann::json::parse(detail::slurp(cfg.results_dir / "results.json"));
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 2;
  }

  std::map<std::string, const SampleManifest*> by_id;
  for (const auto& s : manifest.samples) by_id[s.sample_id] = &s;

  std::map<std::uint64_t, std::vector<SampleMetrics>> final_scores, act_scores;
  std::map<std::uint64_t, SemanticAccumulator> semantic;
  std::vector<std::uint64_t> seeds;
  for (const auto& rec : summary.at("samples")) {
    if (rec.value("status", "") != "ok") continue;
    for (const auto& run : rec.at("runs"))
      if (std::find(seeds.begin(), seeds.end(), run.at("seed").get<std::uint64_t>()) == seeds.end())
        seeds.push_back(run.at("seed").get<std::uint64_t>());
  }

  for (const auto& rec : summary.at("samples")) {
    const auto id = rec.at("sample_id").get<std::string>();
    if (rec.value("status", "") != "ok") {
      log << "warning: " << id << " failed during decompose, excluded\n";
      continue;
    }
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      log << "warning: " << id << " not in manifest, excluded\n";
      continue;
    }
    const SampleManifest& sm = *it->second;
    for (const auto& run : rec.at("runs")) {
      const auto seed = run.at("seed").get<std::uint64_t>();
      const fs::path dir = cfg.results_dir / run.at("dir").get<std::string>();
      try {
        const auto result = nlohmann::json::parse(detail::slurp(dir / "result.json"));
        for (std::size_t t = 0; t < sm.frame_count(); ++t) {
          const auto gt_path = sm.ground_truth_for(t);
          if (!gt_path) {
            log << "warning: " << id << " frame " << t << " has no ground truth, excluded\n";
            continue;
          }
          const BinaryMask gt = detail::load_gt_mask(*gt_path);
          const std::string pre = detail::frame_prefix(t);
          const std::string key = sm.frame_count() > 1 ? id + "#" + std::to_string(t) : id;
          const SoftMask fin = detail::fit_to(detail::load_mask(dir / (pre + "segmenter_mask.tensor")), gt);
          const SoftMask act = detail::fit_to(detail::load_mask(dir / (pre + "activation_mask.tensor")), gt);
          const BinaryMask fin_bin = binarize(fin, cfg.threshold);
          final_scores[seed].push_back(score_sample(key, fin.values, fin_bin, gt, cfg.beta_sq));
          act_scores[seed].push_back(score_sample(key, act.values, binarize(act, cfg.threshold), gt, cfg.beta_sq));
          const auto& label = result.at("frames").at(t).at("label");
          if (sm.gt_class_label && label.is_string())
            semantic[seed].add(fin_bin, label.get<std::string>(), gt, *sm.gt_class_label);
        }
      } catch (const std::exception& e) {
        log << "warning: " << id << " seed " << seed << ": " << e.what() << ", excluded\n";
      }
    }
  }

  std::vector<SeedScores> per_seed;
  for (auto seed : seeds) {
    SeedScores ss;
    ss.seed = seed;
    ss.final_masks = aggregate(final_scores[seed]);
    ss.activation_masks = aggregate(act_scores[seed]);
    if (semantic.count(seed)) ss.semantic = semantic.at(seed).report();
    per_seed.push_back(std::move(ss));
  }

  struct Row {
    std::string name;
    MeanStd stat;
  };
  std::vector<Row> rows;
  auto collect = [&](const std::string& name, auto getter) {
    std::vector<double> v;
    for (const auto& s : per_seed) v.push_back(getter(s));
    rows.push_back({name, mean_std(v)});
  };
  collect("mask_iou", [](const SeedScores& s) { return s.final_masks.mask_iou; });
  collect("mean_iou", [](const SeedScores& s) { return s.final_masks.mean_iou; });
  collect("f_score", [](const SeedScores& s) { return s.final_masks.f_score; });
  collect("m_ap", [](const SeedScores& s) { return s.final_masks.m_ap; });
  collect("activation_mask_iou", [](const SeedScores& s) { return s.activation_masks.mask_iou; });
  collect("activation_mean_iou", [](const SeedScores& s) { return s.activation_masks.mean_iou; });
  collect("activation_f_score", [](const SeedScores& s) { return s.activation_masks.f_score; });
  collect("activation_m_ap", [](const SeedScores& s) { return s.activation_masks.m_ap; });
  const bool has_semantic =
      std::any_of(per_seed.begin(), per_seed.end(), [](const SeedScores& s) { return s.semantic.has_value(); });
  if (has_semantic)
    collect("semantic_miou", [](const SeedScores& s) { return s.semantic ? s.semantic->mean_iou : 0.0; });

  std::size_t scored = 0;
  for (const auto& s : per_seed) scored = std::max(scored, s.final_masks.per_sample.size());

  nlohmann::json doc;
  doc["beta_sq"] = cfg.beta_sq;
  doc["threshold"] = cfg.threshold;
  doc["scored_frames"] = scored;
  doc["seeds"] = seeds;
  nlohmann::json summary_json = nlohmann::json::object();
  for (const auto& r : rows) summary_json[r.name] = {{"mean", r.stat.mean}, {"std", r.stat.stddev}};
  doc["summary"] = std::move(summary_json);
  auto runs = nlohmann::json::array();
  for (const auto& s : per_seed) {
    nlohmann::json rj{{"seed", s.seed},
                      {"final", detail::report_json(s.final_masks)},
                      {"activation", detail::report_json(s.activation_masks)}};
    if (s.semantic) rj["semantic"] = {{"class_iou", s.semantic->class_iou}, {"mean_iou", s.semantic->mean_iou}};
    runs.push_back(std::move(rj));
  }
  doc["runs"] = std::move(runs);

  std::ostringstream csv;
  csv << "metric,mean,std\n";
  for (const auto& r : rows) csv << r.name << ',' << detail::fmt_double(r.stat.mean) << ',' << detail::fmt_double(r.stat.stddev) << '\n';
  try {
    detail::write_text(cfg.results_dir / "metrics.json", doc.dump(2) + "\n");
    detail::write_text(cfg.results_dir / "metrics.csv", csv.str());
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 2;
  }

  out << "scored frames: " << scored << ", seeds: " << seeds.size() << '\n';
  char line[128];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-22s %.4f +/- %.4f\n", r.name.c_str(), r.stat.mean, r.stat.stddev);
    out << line;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// inspect

/// Writes per-factor activation heatmaps and the factor x anchor descriptor
/// table for one sample into <results>/<sample>/seed_<S>/inspect/.
/// Returns 0 on success, 1 when some artifacts were missing, 2 when the
/// result itself cannot be found.
inline int cmd_inspect(const InspectConfig& cfg, std::ostream& log = std::cerr) {
  const fs::path sample_dir = cfg.results_dir / cfg.sample_id;
  fs::path dir;
  if (cfg.seed) {
    dir = sample_dir / detail::seed_dir_name(*cfg.seed);
  } else if (fs::is_directory(sample_dir)) {
    std::vector<fs::path> candidates;
    for (const auto& e : fs::directory_iterator(sample_dir))
      if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0) candidates.push_back(e.path());
    std::sort(candidates.begin(), candidates.end());
    if (!candidates.empty()) dir = candidates.front();
  }
  nlohmann::json result;
  try {
    if (dir.empty() || !fs::exists(dir / "result.json"))
      throw NotFound("no result for sample '" + cfg.sample_id + "' under " + cfg.results_dir.string());
    result = nlohmann::json::parse(detail::slurp(dir / "result.json"));
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return 2;
  }

  const fs::path out = dir / "inspect";
  fs::create_directories(out);
  const auto labels = result.at("labels").get<std::vector<std::string>>();
  const auto h = result.at("spatial_dims").at(0).get<Eigen::Index>();
  const auto w = result.at("spatial_dims").at(1).get<Eigen::Index>();
  bool partial = false;

  for (const auto& frame : result.at("frames")) {
    const auto t = frame.at("frame").get<std::size_t>();
    const std::string pre = detail::frame_prefix(t);
    const auto k_star = frame.at("k_star").get<std::size_t>();

    std::ostringstream csv;
    csv << "modality,factor,is_k_star,ce";
    for (const auto& l : labels) csv << ',' << '"' << l << '"';
    csv << '\n';
    for (const char* mod : {"image", "audio"}) {
      const auto& table = frame.at(std::string(mod) + "_descriptors");
      for (std::size_t k = 0; k < table.size(); ++k) {
        csv << mod << ',' << k << ',' << (k == k_star ? 1 : 0) << ','
            << detail::fmt_double(frame.at("per_factor_ce").at(k).get<double>());
        for (const auto& v : table.at(k)) csv << ',' << detail::fmt_double(v.get<double>());
        csv << '\n';
      }
    }
    detail::write_text(out / (pre + "descriptors.csv"), csv.str());

    try {
      const Matrix ui = read_tensor(dir / (pre + "image_activations.tensor")).values;
      for (Eigen::Index k = 0; k < ui.cols(); ++k) {
        const SoftMask m = activation_mask(ui, static_cast<std::size_t>(k), h, w);
        write_png_gray(out / (pre + "factor_" + std::to_string(k) + "_activation.png"), m.values);
      }
    } catch (const std::exception& e) {
      log << "warning: heatmaps for frame " << t << " skipped: " << e.what() << '\n';
      partial = true;
    }
  }
  return partial ? 1 : 0;
}

}  // namespace semconmf
