#pragma once

// Writes planted fixtures to disk as a ready-to-run manifest.

#include <cstdint>
#include <filesystem>
#include <string>

#include "semconmf/synthetic.hpp"
#include "semconmf/tensorio.hpp"

namespace semconmf::synthetic {

struct DatasetOptions {
  std::size_t samples = 4;
  std::size_t frames = 1;  // frames per sample; all frames of a sample share the fixture seed
  std::uint64_t seed = 0;
  PlantedSpec spec;
};

/// Writes tensors, anchor banks, ground-truth masks and manifest.json under `dir`.
/// Paths in the manifest are relative to `dir`. Returns the manifest path.
inline std::filesystem::path write_planted_dataset(const std::filesystem::path& dir, const DatasetOptions& opts) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  Manifest manifest;
  for (std::size_t i = 0; i < opts.samples; ++i) {
    const std::string id = "planted_" + std::to_string(i);
    const auto fx = make_planted(opts.seed + i, opts.spec);
    write_anchor_bank(dir / (id + "_bank.scnb"), fx.bank);
    write_tensor(dir / (id + "_gt.tensor"), to_tensor(fx.sounding_blob.cast<double>().matrix()));
    SampleManifest s;
    s.sample_id = id;
    s.anchor_bank_path = id + "_bank.scnb";
    s.ground_truth_mask_path = id + "_gt.tensor";
    s.gt_class_label = planted_labels()[kSounding];
    s.height = static_cast<std::size_t>(fx.height);
    s.width = static_cast<std::size_t>(fx.width);
    for (std::size_t t = 0; t < opts.frames; ++t) {
      const std::string stem = opts.frames > 1 ? id + "_f" + std::to_string(t) : id;
      write_tensor(dir / (stem + "_image.tensor"), to_tensor(fx.image));
      write_tensor(dir / (stem + "_audio.tensor"), to_tensor(fx.audio));
      s.frames.push_back({stem + "_image.tensor", stem + "_audio.tensor", std::nullopt});
    }
    manifest.samples.push_back(std::move(s));
  }
  const fs::path path = dir / "manifest.json";
  semconmf::detail::dump(path, manifest_to_json(manifest).dump(2) + "\n");
  return path;
}

}  // namespace semconmf::synthetic
