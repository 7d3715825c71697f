#pragma once

// Binary tensor / anchor-bank files and the JSON sample manifest.
//
// Tensor file (little-endian throughout):
//   magic "SCNM" | version u16 (=1) | dtype u8 (0 = float32) | ndim u8 |
//   dims u64 x ndim | payload float32 x prod(dims), row-major
//
// Anchor bank file:
//   magic "SCNB" | version u16 (=1) | J u64 | C_I u64 | C_A u64 |
//   J labels (u32 byte length + UTF-8 bytes) |
//   J x C_I float32 image anchors | J x C_A float32 audio anchors

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "semconmf/errors.hpp"
#include "semconmf/matrix.hpp"
#include "semconmf/semantics.hpp"

namespace semconmf {

inline constexpr char kTensorMagic[4] = {'S', 'C', 'N', 'M'};
inline constexpr char kBankMagic[4] = {'S', 'C', 'N', 'B'};
inline constexpr std::uint16_t kFormatVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 0;

struct Tensor {
  std::vector<std::uint64_t> dims;
  std::vector<float> values;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

/// Non-negative observations x channels matrix tagged with its modality.
struct FeatureMatrix {
  Modality modality = Modality::Image;
  Matrix values;
};

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<char>(u & 0xFF));
      u = static_cast<U>(u >> 8);
    }
  }
  void put_f32(float f) { put(std::bit_cast<std::uint32_t>(f)); }
  void put_bytes(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string_view get_bytes(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CorruptFile("unexpected end of data");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void dump(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void check_magic(std::string_view got, const char (&want)[4], const std::string& what) {
  if (got.size() != 4 || std::memcmp(got.data(), want, 4) != 0) throw FormatError("bad magic in " + what);
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  if (t.dims.size() > 255) throw InvalidInput("too many dimensions");
  if (t.element_count() != t.values.size()) throw InvalidInput("tensor dims do not match value count");
  detail::ByteWriter w;
  w.put_bytes(std::string_view(kTensorMagic, 4));
  w.put(kFormatVersion);
  w.put(kDtypeFloat32);
  w.put(static_cast<std::uint8_t>(t.dims.size()));
  for (auto d : t.dims) w.put(d);
  for (float v : t.values) w.put_f32(v);
  return w.take();
}

inline Tensor decode_tensor(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4) throw FormatError("tensor file too short");
  detail::check_magic(r.get_bytes(4), kTensorMagic, "tensor");
  if (r.get<std::uint16_t>() != kFormatVersion) throw FormatError("unsupported tensor version");
  if (r.get<std::uint8_t>() != kDtypeFloat32) throw FormatError("unsupported dtype code");
  const auto ndim = r.get<std::uint8_t>();
  Tensor t;
  t.dims.reserve(ndim);
  for (int i = 0; i < ndim; ++i) t.dims.push_back(r.get<std::uint64_t>());
  const std::uint64_t n = t.element_count();
  if (r.remaining() % 4 != 0 || r.remaining() / 4 != n)
    throw CorruptFile("payload holds " + std::to_string(r.remaining() / 4) + " values, dims require " +
                      std::to_string(n));
  t.values.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) t.values.push_back(r.get_f32());
  return t;
}

inline void write_tensor(const std::filesystem::path& path, const Tensor& t) { detail::dump(path, encode_tensor(t)); }

inline Tensor read_tensor_file(const std::filesystem::path& path) {
  try {
    return decode_tensor(detail::slurp(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const CorruptFile& e) {
    throw CorruptFile(path.string() + ": " + e.what());
  }
}

inline Tensor to_tensor(const Matrix& m) {
  Tensor t;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.values.reserve(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.values.push_back(static_cast<float>(m(i, j)));
  return t;
}

inline Matrix to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) throw DimensionMismatch("expected a 2-d tensor, got " + std::to_string(t.dims.size()) + "-d");
  Matrix m(static_cast<Eigen::Index>(t.dims[0]), static_cast<Eigen::Index>(t.dims[1]));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = t.values[static_cast<std::size_t>(i)];
  return m;
}

/// Reads a 2-d tensor as a matrix. Values are returned exactly as stored.
inline FeatureMatrix read_tensor(const std::filesystem::path& path, Modality modality = Modality::Image) {
  return {modality, to_matrix(read_tensor_file(path))};
}

/// Elementwise max(M, 0). Rejects NaN and infinite entries.
inline Matrix clamp_nonneg(const Matrix& m) {
  if (!m.allFinite()) throw InvalidInput("matrix has non-finite entries");
  return m.cwiseMax(0.0);
}

inline FeatureMatrix clamp_nonneg(FeatureMatrix f) {
  f.values = clamp_nonneg(f.values);
  return f;
}

inline std::string encode_anchor_bank(const AnchorBank& bank) {
  bank.validate_shape();
  detail::ByteWriter w;
  w.put_bytes(std::string_view(kBankMagic, 4));
  w.put(kFormatVersion);
  w.put(static_cast<std::uint64_t>(bank.size()));
  w.put(static_cast<std::uint64_t>(bank.image_anchors.cols()));
  w.put(static_cast<std::uint64_t>(bank.audio_anchors.cols()));
  for (const auto& label : bank.labels) {
    w.put(static_cast<std::uint32_t>(label.size()));
    w.put_bytes(label);
  }
  for (const Matrix* m : {&bank.image_anchors, &bank.audio_anchors})
    for (Eigen::Index i = 0; i < m->size(); ++i) w.put_f32(static_cast<float>(m->data()[i]));
  return w.take();
}

/// Decodes a bank and clamps its anchors to be non-negative.
inline AnchorBank decode_anchor_bank(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4) throw FormatError("anchor bank too short");
  detail::check_magic(r.get_bytes(4), kBankMagic, "anchor bank");
  if (r.get<std::uint16_t>() != kFormatVersion) throw FormatError("unsupported anchor bank version");
  const auto j = r.get<std::uint64_t>();
  const auto ci = r.get<std::uint64_t>();
  const auto ca = r.get<std::uint64_t>();
  if (j == 0) throw EmptyBank("anchor bank has no entries");
  if (ci == 0 || ca == 0) throw CorruptFile("anchor bank declares zero channels");
  AnchorBank bank;
  bank.labels.reserve(j);
  for (std::uint64_t i = 0; i < j; ++i) {
    const auto len = r.get<std::uint32_t>();
    bank.labels.emplace_back(r.get_bytes(len));
  }
  if (r.remaining() != 4 * j * (ci + ca))
    throw CorruptFile("anchor payload size does not match J x (C_I + C_A)");
  bank.image_anchors.resize(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(ci));
  bank.audio_anchors.resize(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(ca));
  for (Matrix* m : {&bank.image_anchors, &bank.audio_anchors})
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = r.get_f32();
  bank.image_anchors = clamp_nonneg(bank.image_anchors);
  bank.audio_anchors = clamp_nonneg(bank.audio_anchors);
  return bank;
}

inline void write_anchor_bank(const std::filesystem::path& path, const AnchorBank& bank) {
  detail::dump(path, encode_anchor_bank(bank));
}

inline AnchorBank read_anchor_bank(const std::filesystem::path& path) {
  try {
    return decode_anchor_bank(detail::slurp(path));
  } catch (const CorruptFile& e) {
    throw CorruptFile(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Manifest

struct FrameEntry {
  std::string image_features_path;
  std::string audio_features_path;
  std::optional<std::string> ground_truth_mask_path;
};

struct SampleManifest {
  std::string sample_id;
  std::string anchor_bank_path;
  std::optional<std::string> ground_truth_mask_path;
  std::optional<std::string> gt_class_label;
  std::optional<std::string> image_path;
  std::vector<FrameEntry> frames;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t frame_count() const { return frames.size(); }

  /// Ground truth for frame t: its own path, else the sample-level one.
  std::optional<std::string> ground_truth_for(std::size_t t) const {
    if (frames.at(t).ground_truth_mask_path) return frames[t].ground_truth_mask_path;
    return ground_truth_mask_path;
  }
};

struct Manifest {
  std::vector<SampleManifest> samples;
};

namespace detail {

inline std::string resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? p : (base / path).lexically_normal().string();
}

template <typename T>
std::optional<T> opt(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<T>();
}

}  // namespace detail

/// Parses a manifest; relative paths are resolved against `base_dir`.
inline Manifest parse_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir = {}) {
  Manifest m;
  if (!doc.is_object() || !doc.contains("samples") || !doc.at("samples").is_array())
    throw InvalidInput("manifest must be an object with a \"samples\" array");
  for (const auto& s : doc.at("samples")) {
    SampleManifest sm;
    try {
      sm.sample_id = s.at("sample_id").get<std::string>();
      sm.anchor_bank_path = detail::resolve(base_dir, s.at("anchor_bank_path").get<std::string>());
      if (auto gt = detail::opt<std::string>(s, "ground_truth_mask_path")) sm.ground_truth_mask_path = detail::resolve(base_dir, *gt);
      sm.gt_class_label = detail::opt<std::string>(s, "gt_class_label");
      if (auto ip = detail::opt<std::string>(s, "image_path")) sm.image_path = detail::resolve(base_dir, *ip);
      const auto& dims = s.at("spatial_dims");
      if (!dims.is_array() || dims.size() != 2) throw InvalidInput("spatial_dims must be [H, W]");
      sm.height = dims[0].get<std::size_t>();
      sm.width = dims[1].get<std::size_t>();
      if (s.contains("frames")) {
        for (const auto& f : s.at("frames")) {
          FrameEntry fe;
          fe.image_features_path = detail::resolve(base_dir, f.at("image_features_path").get<std::string>());
          fe.audio_features_path = detail::resolve(base_dir, f.at("audio_features_path").get<std::string>());
          if (auto gt = detail::opt<std::string>(f, "ground_truth_mask_path")) fe.ground_truth_mask_path = detail::resolve(base_dir, *gt);
          sm.frames.push_back(std::move(fe));
        }
      } else {
        sm.frames.push_back({detail::resolve(base_dir, s.at("image_features_path").get<std::string>()),
                             detail::resolve(base_dir, s.at("audio_features_path").get<std::string>()), std::nullopt});
      }
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput("manifest sample: " + std::string(e.what()));
    }
    if (sm.frames.empty()) throw InvalidInput("sample " + sm.sample_id + " has no frames");
    if (sm.height == 0 || sm.width == 0) throw InvalidInput("sample " + sm.sample_id + " has empty spatial dims");
    m.samples.push_back(std::move(sm));
  }
  return m;
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(detail::slurp(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
  return parse_manifest(doc, path.parent_path());
}

inline nlohmann::json manifest_to_json(const Manifest& m) {
  auto samples = nlohmann::json::array();
  for (const auto& s : m.samples) {
    nlohmann::json j;
    j["sample_id"] = s.sample_id;
    j["anchor_bank_path"] = s.anchor_bank_path;
    if (s.ground_truth_mask_path) j["ground_truth_mask_path"] = *s.ground_truth_mask_path;
    if (s.gt_class_label) j["gt_class_label"] = *s.gt_class_label;
    if (s.image_path) j["image_path"] = *s.image_path;
    j["spatial_dims"] = {s.height, s.width};
    auto frames = nlohmann::json::array();
    for (const auto& f : s.frames) {
      nlohmann::json fj{{"image_features_path", f.image_features_path}, {"audio_features_path", f.audio_features_path}};
      if (f.ground_truth_mask_path) fj["ground_truth_mask_path"] = *f.ground_truth_mask_path;
      frames.push_back(std::move(fj));
    }
    j["frames"] = std::move(frames);
    samples.push_back(std::move(j));
  }
  return {{"samples", std::move(samples)}};
}

}  // namespace semconmf
