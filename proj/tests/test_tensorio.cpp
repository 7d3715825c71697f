#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "semconmf/tensorio.hpp"

using namespace semconmf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("semconmf_tensorio_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

AnchorBank toy_bank() {
  AnchorBank b;
  b.labels = {"dog", "piano"};
  b.image_anchors = Matrix{{1.0, 0.0, 0.5}, {0.0, 1.0, 0.25}};
  b.audio_anchors = Matrix{{0.5, 0.5}, {1.0, 0.0}};
  return b;
}

}  // namespace

TEST(TensorIO, ReadsRowMajorPayload) {
  Tensor t{{2, 3}, {0, 1, 2, 3, 4, 5}};
  const auto dir = temp_dir("rowmajor");
  write_tensor(dir / "t.tensor", t);
  const auto m = read_tensor(dir / "t.tensor").values;
  ASSERT_EQ(m.rows(), 2);
  ASSERT_EQ(m.cols(), 3);
  EXPECT_EQ(m(0, 0), 0.0);
  EXPECT_EQ(m(0, 2), 2.0);
  EXPECT_EQ(m(1, 0), 3.0);
  EXPECT_EQ(m(1, 2), 5.0);
}

TEST(TensorIO, HeaderLayoutIsLittleEndian) {
  const std::string bytes = encode_tensor({{2, 3}, {0, 1, 2, 3, 4, 5}});
  ASSERT_EQ(bytes.size(), 4u + 2 + 1 + 1 + 2 * 8 + 6 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "SCNM");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 0);  // dtype float32
  EXPECT_EQ(bytes[7], 2);  // ndim
  EXPECT_EQ(bytes[8], 2);  // dims[0] low byte
  EXPECT_EQ(bytes[16], 3);
  float one;
  std::memcpy(&one, bytes.data() + 24 + 4, 4);
  EXPECT_EQ(one, 1.0f);
}

TEST(TensorIO, RoundTripIsBitwiseIdentityOverRandomShapes) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> ndim(0, 4), extent(1, 5);
  std::uniform_int_distribution<std::uint32_t> bits;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor t;
    const int nd = ndim(rng);
    for (int d = 0; d < nd; ++d) t.dims.push_back(static_cast<std::uint64_t>(extent(rng)));
    for (std::uint64_t i = 0; i < t.element_count(); ++i) {
      float f;
      do {
        f = std::bit_cast<float>(bits(rng));
      } while (std::isnan(f));
      t.values.push_back(f);
    }
    const Tensor back = decode_tensor(encode_tensor(t));
    ASSERT_EQ(back.dims, t.dims);
    ASSERT_EQ(back.values.size(), t.values.size());
    EXPECT_EQ(std::memcmp(back.values.data(), t.values.data(), t.values.size() * 4), 0);
  }
}

TEST(TensorIO, ShortPayloadIsCorrupt) {
  std::string bytes = encode_tensor({{2, 3}, {0, 1, 2, 3, 4, 5}});
  bytes.resize(bytes.size() - 4);
  EXPECT_THROW(decode_tensor(bytes), CorruptFile);
  bytes.append(8, '\0');
  EXPECT_THROW(decode_tensor(bytes), CorruptFile);
}

TEST(TensorIO, BadMagicVersionOrDtypeIsFormatError) {
  const std::string good = encode_tensor({{1}, {1.0f}});
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW(decode_tensor(bad), FormatError);
  bad = good;
  bad[4] = 2;
  EXPECT_THROW(decode_tensor(bad), FormatError);
  bad = good;
  bad[6] = 1;
  EXPECT_THROW(decode_tensor(bad), FormatError);
  EXPECT_THROW(decode_tensor("SC"), FormatError);
}

TEST(TensorIO, MissingFileIsNotFound) {
  EXPECT_THROW(read_tensor("/nonexistent/path.tensor"), NotFound);
}

TEST(TensorIO, ToMatrixRequiresTwoDims) {
  EXPECT_THROW(to_matrix(Tensor{{2, 2, 1}, {1, 2, 3, 4}}), DimensionMismatch);
}

TEST(ClampNonneg, Definition) {
  const Matrix m{{-1, 2}, {0, -3}};
  const Matrix c = clamp_nonneg(m);
  EXPECT_EQ(c, (Matrix{{0, 2}, {0, 0}}));
}

TEST(ClampNonneg, IdentityOnNonnegativeAndIdempotent) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    Matrix m(4, 5);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    const Matrix once = clamp_nonneg(m);
    EXPECT_EQ(clamp_nonneg(once), once);
    const Matrix pos = m.cwiseAbs();
    EXPECT_EQ(clamp_nonneg(pos), pos);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      for (Eigen::Index j = 0; j < m.size(); ++j)
        if (m.data()[i] >= 0 && m.data()[j] >= 0 && m.data()[i] < m.data()[j]) EXPECT_LT(once.data()[i], once.data()[j]);
  }
}

TEST(ClampNonneg, RejectsNaN) {
  Matrix m{{1.0, std::nan("")}};
  EXPECT_THROW(clamp_nonneg(m), InvalidInput);
}

TEST(AnchorBankIO, RoundTrip) {
  const auto dir = temp_dir("bank");
  write_anchor_bank(dir / "b.scnb", toy_bank());
  const auto b = read_anchor_bank(dir / "b.scnb");
  EXPECT_EQ(b.size(), 2u);
  EXPECT_EQ(b.labels, (std::vector<std::string>{"dog", "piano"}));
  EXPECT_EQ(b.image_anchors, toy_bank().image_anchors);
  EXPECT_EQ(b.audio_anchors, toy_bank().audio_anchors);
}

TEST(AnchorBankIO, ClampsAnchorsOnLoad) {
  auto bank = toy_bank();
  bank.image_anchors(0, 1) = -0.75;
  const auto b = decode_anchor_bank(encode_anchor_bank(bank));
  EXPECT_EQ(b.image_anchors(0, 1), 0.0);
  EXPECT_EQ(b.image_anchors(0, 0), 1.0);
}

TEST(AnchorBankIO, EmptyBank) {
  std::string bytes = encode_anchor_bank(toy_bank());
  // zero the J field (offset 6)
  for (int i = 0; i < 8; ++i) bytes[6 + i] = 0;
  EXPECT_THROW(decode_anchor_bank(bytes), EmptyBank);
}

TEST(AnchorBankIO, DeclaredChannelMismatchIsCorrupt) {
  std::string bytes = encode_anchor_bank(toy_bank());
  bytes[14] = 4;  // C_I 3 -> 4
  EXPECT_THROW(decode_anchor_bank(bytes), CorruptFile);
}

TEST(Manifest, ParsesSingleFrameAndSequences) {
  const auto doc = nlohmann::json::parse(R"({
    "samples": [
      {"sample_id": "a", "image_features_path": "a_i.tensor", "audio_features_path": "a_a.tensor",
       "anchor_bank_path": "bank.scnb", "ground_truth_mask_path": "a_gt.tensor", "gt_class_label": "dog",
       "spatial_dims": [2, 3]},
      {"sample_id": "b", "anchor_bank_path": "/abs/bank.scnb", "spatial_dims": [4, 4],
       "frames": [{"image_features_path": "b0_i", "audio_features_path": "b0_a"},
                  {"image_features_path": "b1_i", "audio_features_path": "b1_a", "ground_truth_mask_path": "b1_gt"}]}
    ]})");
  const auto m = parse_manifest(doc, "/data");
  ASSERT_EQ(m.samples.size(), 2u);
  const auto& a = m.samples[0];
  EXPECT_EQ(a.frame_count(), 1u);
  EXPECT_EQ(a.frames[0].image_features_path, "/data/a_i.tensor");
  EXPECT_EQ(a.height, 2u);
  EXPECT_EQ(a.width, 3u);
  EXPECT_EQ(a.gt_class_label.value(), "dog");
  EXPECT_EQ(a.ground_truth_for(0).value(), "/data/a_gt.tensor");
  const auto& b = m.samples[1];
  EXPECT_EQ(b.anchor_bank_path, "/abs/bank.scnb");
  EXPECT_EQ(b.frame_count(), 2u);
  EXPECT_FALSE(b.ground_truth_for(0).has_value());
  EXPECT_EQ(b.ground_truth_for(1).value(), "/data/b1_gt");

  const auto again = parse_manifest(manifest_to_json(m), "/elsewhere");
  EXPECT_EQ(again.samples[1].frames[1].audio_features_path, "/data/b1_a");
}

TEST(Manifest, RejectsMissingFieldsAndEmptyFrames) {
  EXPECT_THROW(parse_manifest(nlohmann::json::parse(R"({"samples": [{"sample_id": "x"}]})")), InvalidInput);
  EXPECT_THROW(parse_manifest(nlohmann::json::parse(R"({"samples": [{"sample_id": "x", "anchor_bank_path": "b",
      "spatial_dims": [1, 1], "frames": []}]})")),
               InvalidInput);
  EXPECT_THROW(parse_manifest(nlohmann::json::parse(R"([1, 2])")), InvalidInput);
}
