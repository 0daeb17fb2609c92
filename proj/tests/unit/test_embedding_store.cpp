#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <random>

#include "hbias/embedding_store.hpp"
#include "hbias/error.hpp"
#include "hbias/util.hpp"
#include "support/temp_dir.hpp"

namespace hbias::embedding {
namespace {

EmbeddingMatrix make_matrix(std::uint32_t rows, std::uint32_t dim, std::uint32_t seed = 1) {
  EmbeddingMatrix m;
  m.prompt_id = "story__African__man";
  m.encoder = {"bert-base-uncased", -2, Pooling::kMean, dim};
  m.n_rows = rows;
  std::mt19937 rng(seed);
  std::normal_distribution<float> nd;
  m.vectors.resize(static_cast<std::size_t>(rows) * dim);
  for (auto& v : m.vectors) v = nd(rng);
  return m;
}

std::string le_bytes(const std::vector<float>& v) {
  std::string out(v.size() * 4, '\0');
  std::memcpy(out.data(), v.data(), out.size());  // test host is little-endian
  return out;
}

TEST(EncoderSlug, PathSafeLabels) {
  EXPECT_EQ(encoder_slug({"bert-base-uncased", -2, Pooling::kMean, 768}), "bert-base-uncased_L-2");
  EXPECT_EQ(encoder_slug({"sentence-transformers/all-mpnet-base-v2", 0, Pooling::kNative, 768}),
            "sentence-transformers--all-mpnet-base-v2");
}

TEST(EncoderSpec, ParseAndCanonical) {
  const auto e = parse_encoder("bert-base-uncased:-2:mean:768");
  EXPECT_EQ(e, (EncoderSpec{"bert-base-uncased", -2, Pooling::kMean, 768}));
  EXPECT_TRUE(e.canonical());
  EXPECT_FALSE((EncoderSpec{"x", -5, Pooling::kMean, 3}).canonical());
  EXPECT_THROW(parse_encoder("bert:-2:mean"), ValidationError);
  EXPECT_THROW(parse_encoder("bert:-2:max:768"), ValidationError);
  EXPECT_THROW(parse_encoder("bert:x:mean:768"), ValidationError);
  EXPECT_THROW(parse_encoder("bert:-2:mean:0"), ValidationError);
}

TEST(EmbeddingStore, RoundTripIsExact) {
  hbias::testing::TempDir dir;
  const auto m = make_matrix(3, 4);
  write_embeddings(m, dir.path());
  const auto paths = embedding_paths(dir.path(), m.prompt_id, m.encoder);
  EXPECT_EQ(paths.manifest.filename(), "story__African__man.bert-base-uncased_L-2.emb.json");
  const auto back = read_embeddings(paths.manifest);
  EXPECT_EQ(back.prompt_id, m.prompt_id);
  EXPECT_EQ(back.encoder, m.encoder);
  EXPECT_EQ(back.n_rows, 3U);
  EXPECT_EQ(back.vectors, m.vectors);
  EXPECT_EQ(back.checksum, sha256_hex(le_bytes(m.vectors)));
  EXPECT_EQ(std::filesystem::file_size(paths.payload), 3U * 4U * 4U);
}

TEST(EmbeddingStore, ManifestFields) {
  const auto m = make_matrix(2, 3);
  const auto j = nlohmann::json::parse(manifest_json(m));
  EXPECT_EQ(j["format_version"], 1);
  EXPECT_EQ(j["dtype"], "f32le");
  EXPECT_EQ(j["n_rows"], 2);
  EXPECT_EQ(j["dim"], 3);
  EXPECT_EQ(j["layer_offset"], -2);
  EXPECT_EQ(j["pooling"], "mean");
  EXPECT_EQ(j["sha256"], payload_checksum(m));
}

TEST(EmbeddingStore, RandomShapesRoundTrip) {
  hbias::testing::TempDir dir;
  std::mt19937 rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    const auto rows = 1 + static_cast<std::uint32_t>(rng() % 40);
    const auto dim = 1 + static_cast<std::uint32_t>(rng() % 70);
    auto m = make_matrix(rows, dim, static_cast<std::uint32_t>(trial));
    m.prompt_id = "p" + std::to_string(trial);
    write_embeddings(m, dir.path());
    const auto back = read_embeddings(embedding_paths(dir.path(), m.prompt_id, m.encoder));
    ASSERT_EQ(back.vectors, m.vectors);
    ASSERT_EQ(back.n_rows, rows);
    ASSERT_EQ(back.encoder.dim, dim);
  }
}

TEST(EmbeddingStore, TruncatedPayloadIsCorrupt) {
  hbias::testing::TempDir dir;
  const auto m = make_matrix(3, 4);
  write_embeddings(m, dir.path());
  const auto paths = embedding_paths(dir.path(), m.prompt_id, m.encoder);
  std::filesystem::resize_file(paths.payload, 3 * 4 * 4 - 4);
  EXPECT_THROW(read_embeddings(paths), CorruptFileError);
}

TEST(EmbeddingStore, DimensionMismatchIsCorrupt) {
  hbias::testing::TempDir dir;
  // A payload written at stride 512 declared as dim 768.
  auto m = make_matrix(3, 512);
  write_embeddings(m, dir.path());
  const auto paths = embedding_paths(dir.path(), m.prompt_id, m.encoder);
  auto j = nlohmann::json::parse(read_file(paths.manifest));
  j["dim"] = 768;
  write_file_atomic(paths.manifest, j.dump(2));
  try {
    read_embeddings(paths);
    FAIL() << "expected CorruptFileError";
  } catch (const CorruptFileError& e) {
    EXPECT_NE(std::string(e.what()).find("768"), std::string::npos);
  }
}

TEST(EmbeddingStore, ChecksumMismatchIsCorrupt) {
  hbias::testing::TempDir dir;
  const auto m = make_matrix(3, 4);
  write_embeddings(m, dir.path());
  const auto paths = embedding_paths(dir.path(), m.prompt_id, m.encoder);
  auto bytes = read_file(paths.payload);
  bytes[5] ^= 0x01;
  write_file_atomic(paths.payload, bytes);
  EXPECT_THROW(read_embeddings(paths), CorruptFileError);
}

TEST(EmbeddingStore, GarbageManifestIsCorrupt) {
  hbias::testing::TempDir dir;
  const auto m = make_matrix(2, 2);
  write_embeddings(m, dir.path());
  const auto paths = embedding_paths(dir.path(), m.prompt_id, m.encoder);
  write_file_atomic(paths.manifest, "{not json");
  EXPECT_THROW(read_embeddings(paths), CorruptFileError);
  auto j = nlohmann::json::parse(manifest_json(m));
  j["dtype"] = "f64le";
  write_file_atomic(paths.manifest, j.dump());
  EXPECT_THROW(read_embeddings(paths), CorruptFileError);
}

TEST(EmbeddingStore, NonFiniteValuesAreRejected) {
  hbias::testing::TempDir dir;
  auto m = make_matrix(2, 3);
  m.vectors[4] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(write_embeddings(m, dir.path()), ValidationError);

  // A file produced elsewhere with a consistent checksum but a NaN inside.
  const auto paths = embedding_paths(dir.path(), m.prompt_id, m.encoder);
  const auto bytes = le_bytes(m.vectors);
  write_file_atomic(paths.payload, bytes);
  auto j = nlohmann::json::parse(manifest_json(make_matrix(2, 3)));
  j["sha256"] = sha256_hex(bytes);
  write_file_atomic(paths.manifest, j.dump());
  EXPECT_THROW(read_embeddings(paths), ValidationError);
}

TEST(EmbeddingStore, ZeroRowsAreRejected) {
  auto m = make_matrix(2, 3);
  std::fill(m.vectors.begin() + 3, m.vectors.end(), 0.0F);
  EXPECT_THROW(validate(m), ValidationError);
  m = make_matrix(2, 3);
  m.vectors.pop_back();
  EXPECT_THROW(validate(m), ValidationError);
}

TEST(EmbeddingStore, StaleChecksumIsRefusedOnWrite) {
  hbias::testing::TempDir dir;
  auto m = make_matrix(2, 3);
  m.checksum = std::string(64, '0');
  EXPECT_THROW(write_embeddings(m, dir.path()), ValidationError);
}

}  // namespace
}  // namespace hbias::embedding
