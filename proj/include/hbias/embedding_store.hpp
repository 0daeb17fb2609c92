#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hbias::embedding {

enum class Pooling : std::uint8_t { kMean, kNative };

std::string_view to_string(Pooling p);

struct EncoderSpec {
  std::string model_id;
  int layer_offset = 0;  // -2 second-to-last, -3 third-to-last, 0 pooled output
  Pooling pooling = Pooling::kMean;
  std::uint32_t dim = 0;

  // Offsets other than {0, -2, -3} are accepted but non-canonical.
  bool canonical() const noexcept;
  bool operator==(const EncoderSpec&) const = default;
};

// Path-safe encoder label: "bert-base-uncased_L-2", "sentence-transformers--all-mpnet-base-v2".
std::string encoder_slug(const EncoderSpec& e);

// Parses "model_id:layer:pooling:dim", e.g. "bert-base-uncased:-2:mean:768".
EncoderSpec parse_encoder(std::string_view text);

struct EmbeddingMatrix {
  std::string prompt_id;
  EncoderSpec encoder;
  std::uint32_t n_rows = 0;
  std::vector<float> vectors;  // row-major n_rows × encoder.dim
  std::string checksum;        // sha256 of the little-endian payload

  std::span<const float> row(std::size_t i) const {
    return {vectors.data() + i * encoder.dim, encoder.dim};
  }
};

inline constexpr int kFormatVersion = 1;

// Finite values, no all-zero rows, size consistent with n_rows × dim.
// Throws ValidationError.
void validate(const EmbeddingMatrix& m);

// Fills in m.checksum from the payload bytes.
std::string payload_checksum(const EmbeddingMatrix& m);

struct EmbeddingPaths {
  std::filesystem::path manifest;
  std::filesystem::path payload;
};

// <dir>/<prompt_id>.<encoder-slug>.emb.{json,bin}
EmbeddingPaths embedding_paths(const std::filesystem::path& dir, std::string_view prompt_id,
                               const EncoderSpec& encoder);

// Manifest text exactly as written to disk.
std::string manifest_json(const EmbeddingMatrix& m);

void write_embeddings(const EmbeddingMatrix& m, const EmbeddingPaths& paths);
void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& dir);

// Throws CorruptFileError on shape/size/checksum mismatch and ValidationError
// on non-finite or zero rows.
EmbeddingMatrix read_embeddings(const EmbeddingPaths& paths);
EmbeddingMatrix read_embeddings(const std::filesystem::path& manifest_path);

// ---- text preprocessing ----

struct PreprocessOptions {
  bool lowercase = false;
  bool strip_non_alphanumeric = false;
  bool collapse_whitespace = false;
  bool remove_group_terms = false;
  std::vector<std::string> group_term_list;

  bool any() const noexcept {
    return lowercase || strip_non_alphanumeric || collapse_whitespace || remove_group_terms;
  }
  void validate() const;
};

std::vector<std::string> default_group_terms();

// Ordered rules: lowercase, group-term removal (whole word, case-insensitive),
// strip non-alphanumerics (spaces kept), collapse whitespace, trim. The rule
// chain is repeated until the text stops changing, so the result is a fixpoint.
std::string preprocess_text(std::string_view text, const PreprocessOptions& options);

}  // namespace hbias::embedding
