// Command-line front-end: decompose | eval | inspect | synth

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "semconmf/dataset.hpp"
#include "semconmf/pipeline.hpp"

using namespace semconmf;

int main(int argc, char** argv) {
  CLI::App app{"Semantic audio-visual co-factorization"};
  app.require_subcommand(1);

  RunConfig run;
  std::string penalty = "ce", min_mode = "min", component_mode = "softmask", recon = "mean";
  auto* dec = app.add_subcommand("decompose", "Decompose every sample of a manifest");
  dec->add_option("--manifest", run.manifest_path, "Manifest JSON")->required();
  dec->add_option("--out", run.output_dir, "Output directory")->required();
  dec->add_option("--K", run.solver.K, "Number of factors")->capture_default_str();
  dec->add_option("--beta-p", run.solver.beta_p, "Semantic penalty weight")->capture_default_str();
  dec->add_option("--beta-temp", run.solver.beta_temp, "Temporal consistency weight")->capture_default_str();
  dec->add_option("--iters", run.solver.iterations, "Gradient steps")->capture_default_str();
  dec->add_option("--lr", run.solver.learning_rate, "Learning rate")->capture_default_str();
  dec->add_option("--seed", run.solver.seed, "Initialization seed")->capture_default_str();
  dec->add_option("--repeats", run.repeats, "Runs with consecutive seeds")->capture_default_str();
  dec->add_option("--segmenter", run.segmenter, "stub | external:<command>")->capture_default_str();
  dec->add_option("--penalty", penalty, "ce | kl")->check(CLI::IsMember({"ce", "kl"}))->capture_default_str();
  dec->add_option("--min-mode", min_mode, "min | mean")->check(CLI::IsMember({"min", "mean"}))->capture_default_str();
  dec->add_option("--component-mode", component_mode, "softmask | factorrow")
      ->check(CLI::IsMember({"softmask", "factorrow"}))
      ->capture_default_str();
  dec->add_option("--temperature", run.solver.temperature, "Descriptor softmax temperature")->capture_default_str();
  dec->add_option("--recon-scale", recon, "mean | sum")->check(CLI::IsMember({"mean", "sum"}))->capture_default_str();
  dec->add_option("--workers", run.workers, "Parallel samples (capped by SEMCONMF_THREADS)")->capture_default_str();

  EvalConfig eval;
  auto* ev = app.add_subcommand("eval", "Score decompose output against ground truth");
  ev->add_option("--results", eval.results_dir, "decompose output directory")->required();
  ev->add_option("--manifest", eval.manifest_path, "Manifest JSON")->required();
  ev->add_option("--beta-sq", eval.beta_sq, "F-score beta^2")->capture_default_str();
  ev->add_option("--threshold", eval.threshold, "Binarization threshold")->capture_default_str();

  InspectConfig inspect;
  std::uint64_t inspect_seed = 0;
  auto* ins = app.add_subcommand("inspect", "Export factor heatmaps and descriptor tables");
  ins->add_option("--results", inspect.results_dir, "decompose output directory")->required();
  ins->add_option("--sample", inspect.sample_id, "Sample id")->required();
  auto* seed_opt = ins->add_option("--seed", inspect_seed, "Run seed (default: lowest available)");

  synthetic::DatasetOptions synth;
  std::string synth_dir;
  auto* syn = app.add_subcommand("synth", "Write a planted synthetic dataset");
  syn->add_option("--out", synth_dir, "Output directory")->required();
  syn->add_option("--samples", synth.samples, "Number of samples")->capture_default_str();
  syn->add_option("--frames", synth.frames, "Frames per sample")->capture_default_str();
  syn->add_option("--seed", synth.seed, "Fixture seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*dec) {
      run.solver.penalty_kind = penalty == "kl" ? PenaltyKind::KL : PenaltyKind::CrossEntropy;
      run.solver.min_mode = min_mode == "mean" ? MinMode::Mean : MinMode::Min;
      run.solver.component_mode = component_mode == "factorrow" ? ComponentMode::FactorRow : ComponentMode::SoftMask;
      run.solver.recon_scale = recon == "sum" ? ReconScale::Sum : ReconScale::Mean;
      return cmd_decompose(run);
    }
    if (*ev) return cmd_eval(eval);
    if (*ins) {
      if (seed_opt->count() > 0) inspect.seed = inspect_seed;
      return cmd_inspect(inspect);
    }
    if (*syn) {
      std::cout << synthetic::write_planted_dataset(synth_dir, synth).string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
