#pragma once

// Planted audio-visual fixtures with known ground truth.
//
// The image is a patch grid with a background and two rectangular blobs: one
// shows the sounding concept, the other a silent concept. The audio token
// sequence contains the sounding concept and an off-screen concept. Every
// concept has a non-negative anchor in both modalities; features are noisy
// copies of the anchors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "semconmf/matrix.hpp"
#include "semconmf/semantics.hpp"

namespace semconmf::synthetic {

struct PlantedSpec {
  Eigen::Index height = 8;
  Eigen::Index width = 8;
  Eigen::Index tokens = 12;
  Eigen::Index image_channels = 24;
  Eigen::Index audio_channels = 16;
  Eigen::Index distractor_anchors = 3;  // extra bank entries present in neither modality
  double noise = 0.05;
  double anchor_density = 0.35;  // fraction of non-zero anchor channels
  double sounding_fraction = 0.5;  // share of audio tokens carrying the sounding concept
};

inline const std::vector<std::string>& planted_labels() {
  static const std::vector<std::string> labels{"dog", "piano", "background", "wind"};
  return labels;
}

/// Bank indices of the planted concepts.
enum PlantedConcept : Eigen::Index { kSounding = 0, kSilent = 1, kBackground = 2, kOffscreen = 3 };

struct PlantedFixture {
  Matrix audio;  // tokens x C_A
  Matrix image;  // HW x C_I
  AnchorBank bank;
  BinaryMask sounding_blob;  // H x W
  BinaryMask silent_blob;
  Eigen::Index height = 0;
  Eigen::Index width = 0;
};

namespace detail {

// Unit-norm anchor supported on channels [lo, hi) with the given density.
inline Vector sparse_anchor(std::mt19937_64& rng, Eigen::Index channels, Eigen::Index lo, Eigen::Index hi,
                            double density) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vector v = Vector::Zero(channels);
  while (v.norm() == 0.0)
    for (Eigen::Index c = lo; c < hi; ++c)
      if (u(rng) < density) v[c] = 0.5 + u(rng);
  return v / v.norm();
}

inline Vector noisy(std::mt19937_64& rng, const Vector& base, double noise) {
  std::normal_distribution<double> n(0.0, noise);
  Vector v = base;
  for (Eigen::Index c = 0; c < v.size(); ++c) v[c] = std::max(0.0, v[c] + n(rng));
  return v;
}

}  // namespace detail

/// Builds a fixture; blob placement and sizes vary with the seed.
inline PlantedFixture make_planted(std::uint64_t seed, const PlantedSpec& spec = {}) {
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + 17);
  PlantedFixture f;
  f.height = spec.height;
  f.width = spec.width;

  const auto& names = planted_labels();
  const Eigen::Index j = static_cast<Eigen::Index>(names.size()) + spec.distractor_anchors;
  f.bank.image_anchors.resize(j, spec.image_channels);
  f.bank.audio_anchors.resize(j, spec.audio_channels);
  // Planted concepts live on disjoint channel ranges; distractors may use any channel.
  const auto planted = static_cast<Eigen::Index>(names.size());
  auto anchor = [&](Eigen::Index a, Eigen::Index channels) {
    if (a >= planted) return detail::sparse_anchor(rng, channels, 0, channels, spec.anchor_density);
    const Eigen::Index width = channels / planted;
    return detail::sparse_anchor(rng, channels, a * width, (a + 1) * width, std::max(spec.anchor_density, 0.5));
  };
  for (Eigen::Index a = 0; a < j; ++a) {
    f.bank.labels.push_back(a < planted ? names[static_cast<std::size_t>(a)] : "distractor" + std::to_string(a));
    f.bank.image_anchors.row(a) = anchor(a, spec.image_channels).transpose();
    f.bank.audio_anchors.row(a) = anchor(a, spec.audio_channels).transpose();
  }

  // Two non-overlapping blobs: the sounding one in the left half, the silent one in the right half.
  const Eigen::Index half = spec.width / 2;
  auto blob = [&](Eigen::Index col_lo, Eigen::Index col_hi) {
    std::uniform_int_distribution<Eigen::Index> bh(spec.height / 3, spec.height / 2 + 1);
    std::uniform_int_distribution<Eigen::Index> bw(std::max<Eigen::Index>(2, (col_hi - col_lo) / 2), col_hi - col_lo - 1);
    const Eigen::Index h = bh(rng), w = bw(rng);
    std::uniform_int_distribution<Eigen::Index> r0(0, spec.height - h);
    std::uniform_int_distribution<Eigen::Index> c0(col_lo, col_hi - w);
    const Eigen::Index top = r0(rng), left = c0(rng);
    BinaryMask m = BinaryMask::Zero(spec.height, spec.width);
    m.block(top, left, h, w).setOnes();
    return m;
  };
  f.sounding_blob = blob(0, half);
  f.silent_blob = blob(half, spec.width);
  if (std::uniform_int_distribution<int>(0, 1)(rng) == 1) {
    // mirror so the sounding blob is not always on the left
    f.sounding_blob = f.sounding_blob.rowwise().reverse().eval();
    f.silent_blob = f.silent_blob.rowwise().reverse().eval();
  }

  f.image.resize(spec.height * spec.width, spec.image_channels);
  for (Eigen::Index r = 0; r < spec.height; ++r)
    for (Eigen::Index c = 0; c < spec.width; ++c) {
      const Eigen::Index label = f.sounding_blob(r, c) ? kSounding : f.silent_blob(r, c) ? kSilent : kBackground;
      f.image.row(r * spec.width + c) =
          detail::noisy(rng, f.bank.image_anchors.row(label).transpose(), spec.noise).transpose();
    }

  // Audio: the first tokens carry the sounding concept, the rest the off-screen one.
  f.audio.resize(spec.tokens, spec.audio_channels);
  const auto sounding_tokens = static_cast<Eigen::Index>(std::lround(spec.sounding_fraction * static_cast<double>(spec.tokens)));
  for (Eigen::Index t = 0; t < spec.tokens; ++t) {
    const Eigen::Index label = t < sounding_tokens ? kSounding : kOffscreen;
    f.audio.row(t) = detail::noisy(rng, f.bank.audio_anchors.row(label).transpose(), spec.noise).transpose();
  }
  return f;
}

}  // namespace semconmf::synthetic
