#include "hbias/embedding_store.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "hbias/error.hpp"
#include "hbias/util.hpp"

namespace hbias::embedding {
namespace {

using nlohmann::ordered_json;

std::string payload_bytes(const EmbeddingMatrix& m) {
  std::string bytes(m.vectors.size() * sizeof(float), '\0');
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(bytes.data(), m.vectors.data(), bytes.size());
  } else {
    for (std::size_t k = 0; k < m.vectors.size(); ++k) {
      const auto bits = std::bit_cast<std::uint32_t>(m.vectors[k]);
      for (int b = 0; b < 4; ++b) bytes[4 * k + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
  }
  return bytes;
}

std::vector<float> decode_payload(std::string_view bytes) {
  std::vector<float> out(bytes.size() / sizeof(float));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data(), bytes.data(), out.size() * sizeof(float));
  } else {
    for (std::size_t k = 0; k < out.size(); ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * k + b])) << (8 * b);
      out[k] = std::bit_cast<float>(bits);
    }
  }
  return out;
}

bool is_word_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9');
}

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string remove_terms(std::string_view text, const std::vector<std::string>& lowered_terms) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_word_char(text[i])) {
      out.push_back(text[i++]);
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_word_char(text[j])) ++j;
    const std::string word = to_lower_ascii(text.substr(i, j - i));
    bool drop = false;
    for (const auto& t : lowered_terms) {
      if (t == word) {
        drop = true;
        break;
      }
    }
    if (!drop) out.append(text.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string apply_once(std::string_view text, const PreprocessOptions& o,
                       const std::vector<std::string>& lowered_terms) {
  std::string s(text);
  if (o.lowercase) s = to_lower_ascii(s);
  if (o.remove_group_terms) s = remove_terms(s, lowered_terms);
  if (o.strip_non_alphanumeric) {
    std::string t;
    t.reserve(s.size());
    for (char c : s) {
      if (is_word_char(c) || is_space(c)) t.push_back(c);
    }
    s = std::move(t);
  }
  if (o.collapse_whitespace) {
    std::string t;
    t.reserve(s.size());
    bool prev_space = false;
    for (char c : s) {
      if (is_space(c)) {
        if (!prev_space) t.push_back(' ');
        prev_space = true;
      } else {
        t.push_back(c);
        prev_space = false;
      }
    }
    s = trim(t);
  }
  return s;
}

}  // namespace

std::string_view to_string(Pooling p) { return p == Pooling::kMean ? "mean" : "native"; }

bool EncoderSpec::canonical() const noexcept {
  return layer_offset == 0 || layer_offset == -2 || layer_offset == -3;
}

std::string encoder_slug(const EncoderSpec& e) {
  std::string s;
  for (std::size_t i = 0; i < e.model_id.size(); ++i) {
    const char c = e.model_id[i];
    if (c == '/') {
      s += "--";
    } else if (is_word_char(c) || c == '-' || c == '_' || c == '.') {
      s.push_back(c);
    } else {
      s.push_back('_');
    }
  }
  if (e.layer_offset != 0) s += "_L" + std::to_string(e.layer_offset);
  return s;
}

EncoderSpec parse_encoder(std::string_view text) {
  // model ids may contain ':' only in exotic cases; split from the right.
  const auto parts = split(trim(text), ':');
  if (parts.size() < 4) {
    throw ValidationError("encoder '" + std::string(text) + "' must be model_id:layer:pooling:dim");
  }
  EncoderSpec e;
  for (std::size_t i = 0; i + 3 < parts.size(); ++i) {
    if (i) e.model_id += ':';
    e.model_id += parts[i];
  }
  e.model_id = trim(e.model_id);
  try {
    e.layer_offset = std::stoi(parts[parts.size() - 3]);
    const long dim = std::stol(parts.back());
    if (dim <= 0) throw ValidationError("encoder dim must be positive");
    e.dim = static_cast<std::uint32_t>(dim);
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception&) {
    throw ValidationError("encoder '" + std::string(text) + "' has a non-integer layer or dim");
  }
  const std::string pooling = to_lower_ascii(trim(parts[parts.size() - 2]));
  if (pooling == "mean") {
    e.pooling = Pooling::kMean;
  } else if (pooling == "native") {
    e.pooling = Pooling::kNative;
  } else {
    throw ValidationError("encoder pooling must be mean or native, got '" + pooling + "'");
  }
  if (e.model_id.empty()) throw ValidationError("encoder model_id is empty");
  return e;
}

void validate(const EmbeddingMatrix& m) {
  if (m.encoder.dim == 0) throw ValidationError("embedding dim must be positive");
  if (m.vectors.size() != static_cast<std::size_t>(m.n_rows) * m.encoder.dim) {
    throw ValidationError("embedding matrix size does not equal n_rows × dim");
  }
  for (std::uint32_t i = 0; i < m.n_rows; ++i) {
    bool nonzero = false;
    for (float v : m.row(i)) {
      if (!std::isfinite(v)) {
        throw ValidationError(m.prompt_id + ": non-finite value in row " + std::to_string(i));
      }
      nonzero = nonzero || v != 0.0f;
    }
    if (!nonzero) throw ValidationError(m.prompt_id + ": all-zero row " + std::to_string(i));
  }
}

std::string payload_checksum(const EmbeddingMatrix& m) { return sha256_hex(payload_bytes(m)); }

EmbeddingPaths embedding_paths(const std::filesystem::path& dir, std::string_view prompt_id,
                               const EncoderSpec& encoder) {
  const std::string stem = std::string(prompt_id) + "." + encoder_slug(encoder) + ".emb";
  return {dir / (stem + ".json"), dir / (stem + ".bin")};
}

std::string manifest_json(const EmbeddingMatrix& m) {
  ordered_json j;
  j["format_version"] = kFormatVersion;
  j["prompt_id"] = m.prompt_id;
  j["model_id"] = m.encoder.model_id;
  j["layer_offset"] = m.encoder.layer_offset;
  j["pooling"] = std::string(to_string(m.encoder.pooling));
  j["dim"] = m.encoder.dim;
  j["n_rows"] = m.n_rows;
  j["dtype"] = "f32le";
  j["sha256"] = m.checksum.empty() ? payload_checksum(m) : m.checksum;
  return j.dump(2) + "\n";
}

void write_embeddings(const EmbeddingMatrix& m, const EmbeddingPaths& paths) {
  validate(m);
  const std::string bytes = payload_bytes(m);
  const std::string sum = sha256_hex(bytes);
  if (!m.checksum.empty() && m.checksum != sum) {
    throw ValidationError(m.prompt_id + ": stored checksum does not match vectors");
  }
  EmbeddingMatrix header;
  header.prompt_id = m.prompt_id;
  header.encoder = m.encoder;
  header.n_rows = m.n_rows;
  header.checksum = sum;
  write_file_atomic(paths.payload, bytes);
  write_file_atomic(paths.manifest, manifest_json(header));
}

void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& dir) {
  write_embeddings(m, embedding_paths(dir, m.prompt_id, m.encoder));
}

EmbeddingMatrix read_embeddings(const EmbeddingPaths& paths) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(paths.manifest));
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& ex) {
    throw CorruptFileError(paths.manifest.string() + ": manifest is not JSON: " + ex.what());
  }
  EmbeddingMatrix m;
  std::string expected_sum;
  try {
    if (j.at("format_version").get<int>() != kFormatVersion) {
      throw CorruptFileError(paths.manifest.string() + ": unsupported format_version");
    }
    if (j.at("dtype").get<std::string>() != "f32le") {
      throw CorruptFileError(paths.manifest.string() + ": dtype must be f32le");
    }
    m.prompt_id = j.at("prompt_id").get<std::string>();
    m.encoder.model_id = j.at("model_id").get<std::string>();
    m.encoder.layer_offset = j.at("layer_offset").get<int>();
    const auto pooling = j.at("pooling").get<std::string>();
    if (pooling != "mean" && pooling != "native") {
      throw CorruptFileError(paths.manifest.string() + ": unknown pooling " + pooling);
    }
    m.encoder.pooling = pooling == "mean" ? Pooling::kMean : Pooling::kNative;
    m.encoder.dim = j.at("dim").get<std::uint32_t>();
    m.n_rows = j.at("n_rows").get<std::uint32_t>();
    expected_sum = j.at("sha256").get<std::string>();
  } catch (const CorruptFileError&) {
    throw;
  } catch (const std::exception& ex) {
    throw CorruptFileError(paths.manifest.string() + ": bad manifest field: " + ex.what());
  }
  if (m.encoder.dim == 0) throw CorruptFileError(paths.manifest.string() + ": dim is zero");

  const std::string bytes = read_file(paths.payload);
  const std::size_t expected = static_cast<std::size_t>(m.n_rows) * m.encoder.dim * sizeof(float);
  if (bytes.size() != expected) {
    throw CorruptFileError(paths.payload.string() + ": payload has " + std::to_string(bytes.size()) +
                           " bytes, manifest implies " + std::to_string(expected) + " (" +
                           std::to_string(m.n_rows) + " rows × " + std::to_string(m.encoder.dim) + " f32)");
  }
  const std::string actual_sum = sha256_hex(bytes);
  if (actual_sum != expected_sum) {
    throw CorruptFileError(paths.payload.string() + ": sha256 mismatch");
  }
  m.vectors = decode_payload(bytes);
  m.checksum = actual_sum;
  validate(m);
  return m;
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& manifest_path) {
  std::string s = manifest_path.string();
  const std::string suffix = ".json";
  if (s.size() < suffix.size() || s.compare(s.size() - suffix.size(), suffix.size(), suffix) != 0) {
    throw IoError("manifest path must end in .json: " + s);
  }
  std::string payload = s.substr(0, s.size() - suffix.size()) + ".bin";
  return read_embeddings(EmbeddingPaths{manifest_path, payload});
}

void PreprocessOptions::validate() const {
  if (remove_group_terms && group_term_list.empty()) {
    throw ValidationError("preprocess: remove_group_terms needs a non-empty group_term_list");
  }
}

std::vector<std::string> default_group_terms() {
  return {"african", "asian", "hispanic", "white", "american", "man", "woman",
          "men", "women", "male", "female"};
}

std::string preprocess_text(std::string_view text, const PreprocessOptions& options) {
  options.validate();
  std::vector<std::string> lowered;
  lowered.reserve(options.group_term_list.size());
  for (const auto& t : options.group_term_list) lowered.push_back(to_lower_ascii(t));

  std::string current(text);
  while (true) {
    std::string next = apply_once(current, options, lowered);
    if (next == current) return next;
    current = std::move(next);
  }
}

}  // namespace hbias::embedding
