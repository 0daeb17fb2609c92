#pragma once

// Audit configuration: one human-editable file of `key = value` lines.
//
//   # comment
//   run_id = main-study
//   [prompts]                 # later keys are read as prompts.<key>
//   formats = story, biography
//   template = "Write a {word_limit}-word {format} {article} {race} American {gender}."
//
// Values are trimmed; wrap a value in double quotes to keep edge whitespace.
// Lists are comma-separated, except refusal.rules which uses '|'. Relative
// paths resolve against the config file's directory. Unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hbias/corpus.hpp"
#include "hbias/embedding_store.hpp"
#include "hbias/llm_client.hpp"
#include "hbias/mixedmodel.hpp"

namespace hbias::audit {

enum class CorpusSource { kLoad, kCollect };

struct AuditConfig {
  std::string run_id = "audit";
  std::uint64_t seed = 0;
  int parallelism = 0;  // 0: OpenMP default
  std::filesystem::path output_dir = "out";
  std::filesystem::path base_dir = ".";

  CorpusSource corpus_source = CorpusSource::kLoad;
  std::filesystem::path corpus_path;

  std::vector<TextFormat> formats{kAllFormats.begin(), kAllFormats.end()};
  std::vector<Race> races{kAllRaces.begin(), kAllRaces.end()};
  std::vector<Gender> genders{kAllGenders.begin(), kAllGenders.end()};
  std::string prompt_template{corpus::kDefaultTemplate};
  std::optional<std::string> prompt_suffix;
  corpus::PromptOptions prompt_options;
  int n_per_prompt = 500;

  llm::EndpointConfig endpoint;
  int max_in_flight = 4;
  std::optional<std::filesystem::path> replay_transcript;
  std::vector<corpus::RefusalRule> refusal_rules = corpus::default_refusal_rules();

  std::filesystem::path embeddings_dir = "embeddings";
  std::vector<embedding::EncoderSpec> encoders;
  embedding::PreprocessOptions preprocess;

  std::vector<std::string> models = {"race", "gender", "race_gender", "interaction"};
  std::vector<std::string> lrt_effects = {"race", "gender", "interaction"};
  bool gender_within_race = true;

  std::optional<std::filesystem::path> theta_path;
  std::vector<std::size_t> topic_set;  // 0-based
  std::size_t top_k = 5;

  std::filesystem::path resolve(const std::filesystem::path& p) const;

  // Throws ConfigError naming the offending field.
  void validate() const;
  void validate_prompts() const;

  // Every setting that influences outputs, one `key=value` per line in a
  // fixed order. output_dir and parallelism are excluded.
  std::string canonical() const;
  std::string hash() const;

  std::vector<corpus::PromptSpec> prompt_matrix() const;
};

lmm::ModelFormula model_by_key(std::string_view key);
lmm::Term effect_by_key(std::string_view key);

AuditConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = ".");
AuditConfig load_config(const std::filesystem::path& path);

}  // namespace hbias::audit
