#include "hbias/config.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <map>

#include "hbias/error.hpp"
#include "hbias/util.hpp"

namespace hbias::audit {
namespace {

std::string unquote(std::string v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  const auto l = to_lower_ascii(v);
  if (l == "true" || l == "yes" || l == "1" || l == "on") return true;
  if (l == "false" || l == "no" || l == "0" || l == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::string> parse_list(const std::string& v, char sep = ',') {
  std::vector<std::string> out;
  for (auto& item : split(v, sep)) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

std::string rule_id_from(std::string_view pattern) {
  std::string id;
  for (char c : to_lower_ascii(pattern)) {
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
      id.push_back(c);
    } else if (!id.empty() && id.back() != '-' && c == ' ') {
      id.push_back('-');
    }
  }
  while (!id.empty() && id.back() == '-') id.pop_back();
  return id;
}

template <typename E, typename F>
std::string join(const std::vector<E>& xs, F&& fn, std::string_view sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += fn(xs[i]);
  }
  return out;
}

}  // namespace

lmm::ModelFormula model_by_key(std::string_view key) {
  if (key == "race") return lmm::ModelFormula::race_model();
  if (key == "gender") return lmm::ModelFormula::gender_model();
  if (key == "race_gender") return lmm::ModelFormula::race_gender_model();
  if (key == "interaction") return lmm::ModelFormula::interaction_model();
  throw ConfigError("analysis.models: unknown model '" + std::string(key) +
                    "' (race, gender, race_gender, interaction)");
}

lmm::Term effect_by_key(std::string_view key) {
  if (key == "race") return lmm::Term::kRace;
  if (key == "gender") return lmm::Term::kGender;
  if (key == "interaction") return lmm::Term::kRaceGender;
  throw ConfigError("analysis.lrt: unknown effect '" + std::string(key) + "' (race, gender, interaction)");
}

std::filesystem::path AuditConfig::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : base_dir / p;
}

void AuditConfig::validate_prompts() const {
  if (formats.empty()) throw ConfigError("prompts.formats: at least one format is required");
  if (races.empty()) throw ConfigError("prompts.races: at least one race is required");
  if (genders.empty()) throw ConfigError("prompts.genders: at least one gender is required");
  try {
    (void)prompt_matrix();
  } catch (const TemplateError& ex) {
    throw ConfigError(std::string("prompts.template: ") + ex.what());
  }
}

void AuditConfig::validate() const {
  if (run_id.empty()) throw ConfigError("run_id: must not be empty");
  if (encoders.empty()) throw ConfigError("embeddings.encoders: at least one encoder is required");
  std::vector<std::string> slugs;
  for (const auto& e : encoders) slugs.push_back(embedding::encoder_slug(e));
  std::sort(slugs.begin(), slugs.end());
  if (std::adjacent_find(slugs.begin(), slugs.end()) != slugs.end()) {
    throw ConfigError("embeddings.encoders: duplicate encoder");
  }
  if (corpus_source == CorpusSource::kLoad && corpus_path.empty()) {
    throw ConfigError("corpus.path: required when corpus.source = load");
  }
  if (corpus_source == CorpusSource::kCollect) {
    validate_prompts();
    if (n_per_prompt < 1) throw ConfigError("prompts.n_per_prompt: must be >= 1");
    if (endpoint.model_id.empty()) throw ConfigError("endpoint.model: required when corpus.source = collect");
    if (endpoint.base_url.empty() && !replay_transcript) {
      throw ConfigError("endpoint.base_url: required when corpus.source = collect");
    }
    if (endpoint.per_request_max < 1) throw ConfigError("endpoint.per_request_max: must be >= 1");
    if (endpoint.timeout.count() <= 0) throw ConfigError("endpoint.timeout_ms: must be > 0");
    if (max_in_flight < 1) throw ConfigError("endpoint.max_in_flight: must be >= 1");
  }
  try {
    preprocess.validate();
  } catch (const ValidationError& ex) {
    throw ConfigError(std::string("preprocess.group_terms: ") + ex.what());
  }
  for (const auto& m : models) (void)model_by_key(m);
  for (const auto& e : lrt_effects) (void)effect_by_key(e);
  if (!lrt_effects.empty() && std::find(models.begin(), models.end(), "interaction") == models.end()) {
    throw ConfigError("analysis.lrt: likelihood-ratio tests drop terms from the interaction model, "
                      "so analysis.models must include interaction");
  }
  if (gender_within_race && std::find(models.begin(), models.end(), "interaction") == models.end()) {
    throw ConfigError("analysis.contrasts: gender_within_race needs the interaction model");
  }
  if (theta_path && topic_set.empty()) throw ConfigError("topics.topic_set: required with topics.theta_path");
  if (theta_path && top_k < 1) throw ConfigError("topics.top_k: must be >= 1");
  if (parallelism < 0) throw ConfigError("parallelism: must be >= 0");
}

std::vector<corpus::PromptSpec> AuditConfig::prompt_matrix() const {
  return corpus::build_prompt_matrix(formats, races, genders, prompt_template, prompt_suffix, prompt_options);
}

std::string AuditConfig::canonical() const {
  std::string out;
  auto line = [&](std::string_view k, const std::string& v) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  };
  line("run_id", run_id);
  line("seed", std::to_string(seed));
  line("corpus.source", corpus_source == CorpusSource::kLoad ? "load" : "collect");
  line("corpus.path", corpus_path.generic_string());
  line("prompts.formats", join(formats, [](TextFormat f) { return std::string(slug(f)); }));
  line("prompts.races", join(races, [](Race r) { return std::string(to_string(r)); }));
  line("prompts.genders", join(genders, [](Gender g) { return std::string(to_string(g)); }));
  line("prompts.template", prompt_template);
  line("prompts.suffix", prompt_suffix.value_or(""));
  line("prompts.word_limit", std::to_string(prompt_options.word_limit));
  line("prompts.gender_words",
       prompt_options.gender_words ? prompt_options.gender_words->first + "," + prompt_options.gender_words->second : "");
  line("prompts.n_per_prompt", std::to_string(n_per_prompt));
  line("endpoint.base_url", endpoint.base_url);
  line("endpoint.model", endpoint.model_id);
  line("endpoint.system_role", endpoint.system_role_text);
  line("endpoint.per_request_max", std::to_string(endpoint.per_request_max));
  for (const auto& [k, v] : endpoint.sampling_params) line("endpoint.param." + k, v.dump());
  line("refusal.rules", join(refusal_rules, [](const corpus::RefusalRule& r) { return r.id + "=" + r.pattern; }, "|"));
  line("embeddings.dir", embeddings_dir.generic_string());
  line("embeddings.encoders", join(encoders, [](const embedding::EncoderSpec& e) {
         return fmt::format("{}:{}:{}:{}", e.model_id, e.layer_offset, embedding::to_string(e.pooling), e.dim);
       }));
  line("preprocess.lowercase", preprocess.lowercase ? "true" : "false");
  line("preprocess.strip_non_alphanumeric", preprocess.strip_non_alphanumeric ? "true" : "false");
  line("preprocess.collapse_whitespace", preprocess.collapse_whitespace ? "true" : "false");
  line("preprocess.remove_group_terms", preprocess.remove_group_terms ? "true" : "false");
  line("preprocess.group_terms", join(preprocess.group_term_list, [](const std::string& s) { return s; }));
  line("analysis.models", join(models, [](const std::string& s) { return s; }));
  line("analysis.lrt", join(lrt_effects, [](const std::string& s) { return s; }));
  line("analysis.contrasts", gender_within_race ? "gender_within_race" : "none");
  line("topics.theta_path", theta_path ? theta_path->generic_string() : "");
  line("topics.topic_set", join(topic_set, [](std::size_t t) { return std::to_string(t + 1); }));
  line("topics.top_k", std::to_string(top_k));
  return out;
}

std::string AuditConfig::hash() const { return sha256_hex(canonical()); }

AuditConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
  AuditConfig c;
  c.base_dir = base_dir;
  std::string section;
  std::size_t line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    const std::string v = unquote(trim(line.substr(eq + 1)));

    if (key == "run_id") c.run_id = v;
    else if (key == "seed") c.seed = parse_int<std::uint64_t>(key, v);
    else if (key == "parallelism") c.parallelism = parse_int<int>(key, v);
    else if (key == "output_dir") c.output_dir = v;
    else if (key == "corpus.source") {
      if (v == "load") c.corpus_source = CorpusSource::kLoad;
      else if (v == "collect") c.corpus_source = CorpusSource::kCollect;
      else throw ConfigError("corpus.source: expected load or collect, got '" + v + "'");
    } else if (key == "corpus.path") c.corpus_path = v;
    else if (key == "prompts.formats") {
      c.formats.clear();
      for (const auto& s : parse_list(v)) {
        auto f = parse_format(s);
        if (!f) throw ConfigError("prompts.formats: unknown format '" + s + "'");
        c.formats.push_back(*f);
      }
    } else if (key == "prompts.races") {
      c.races.clear();
      for (const auto& s : parse_list(v)) {
        auto r = parse_race(s);
        if (!r) throw ConfigError("prompts.races: unknown race '" + s + "'");
        c.races.push_back(*r);
      }
    } else if (key == "prompts.genders") {
      c.genders.clear();
      for (const auto& s : parse_list(v)) {
        auto g = parse_gender(s);
        if (!g) throw ConfigError("prompts.genders: unknown gender '" + s + "'");
        c.genders.push_back(*g);
      }
    } else if (key == "prompts.template") c.prompt_template = v;
    else if (key == "prompts.suffix") c.prompt_suffix = v.empty() ? std::nullopt : std::optional(v);
    else if (key == "prompts.word_limit") c.prompt_options.word_limit = parse_int<int>(key, v);
    else if (key == "prompts.gender_words" && v.empty()) c.prompt_options.gender_words.reset();
    else if (key == "prompts.gender_words") {
      auto words = parse_list(v);
      if (words.size() != 2) throw ConfigError("prompts.gender_words: expected two words (man, woman)");
      c.prompt_options.gender_words = std::pair{words[0], words[1]};
    } else if (key == "prompts.n_per_prompt") c.n_per_prompt = parse_int<int>(key, v);
    else if (key == "endpoint.base_url") c.endpoint.base_url = v;
    else if (key == "endpoint.model") c.endpoint.model_id = v;
    else if (key == "endpoint.system_role") c.endpoint.system_role_text = v;
    else if (key == "endpoint.per_request_max") c.endpoint.per_request_max = parse_int<int>(key, v);
    else if (key == "endpoint.api_key_env") c.endpoint.api_key_env = v;
    else if (key == "endpoint.timeout_ms") c.endpoint.timeout = std::chrono::milliseconds(parse_int<long>(key, v));
    else if (key == "endpoint.max_retries") c.endpoint.max_retries = parse_int<int>(key, v);
    else if (key == "endpoint.max_in_flight") c.max_in_flight = parse_int<int>(key, v);
    else if (key == "endpoint.replay_transcript") {
      c.replay_transcript = v.empty() ? std::nullopt : std::optional<std::filesystem::path>(v);
    }
    else if (key.rfind("endpoint.param.", 0) == 0) {
      try {
        c.endpoint.sampling_params[key.substr(15)] = nlohmann::json::parse(v);
      } catch (const std::exception&) {
        throw ConfigError(key + ": value must be a JSON literal");
      }
    } else if (key == "refusal.rules") {
      c.refusal_rules.clear();
      for (const auto& item : parse_list(v, '|')) {
        const auto e = item.find('=');
        if (e == std::string::npos) {
          c.refusal_rules.push_back({rule_id_from(item), item});
        } else {
          c.refusal_rules.push_back({trim(item.substr(0, e)), trim(item.substr(e + 1))});
        }
      }
    } else if (key == "embeddings.dir") c.embeddings_dir = v;
    else if (key == "embeddings.encoders") {
      c.encoders.clear();
      for (const auto& s : parse_list(v)) {
        try {
          c.encoders.push_back(embedding::parse_encoder(s));
        } catch (const ValidationError& ex) {
          throw ConfigError(std::string("embeddings.encoders: ") + ex.what());
        }
      }
    } else if (key == "preprocess.lowercase") c.preprocess.lowercase = parse_bool(key, v);
    else if (key == "preprocess.strip_non_alphanumeric") c.preprocess.strip_non_alphanumeric = parse_bool(key, v);
    else if (key == "preprocess.collapse_whitespace") c.preprocess.collapse_whitespace = parse_bool(key, v);
    else if (key == "preprocess.remove_group_terms") c.preprocess.remove_group_terms = parse_bool(key, v);
    else if (key == "preprocess.group_terms") c.preprocess.group_term_list = parse_list(v);
    else if (key == "analysis.models") c.models = parse_list(v);
    else if (key == "analysis.lrt") c.lrt_effects = v == "none" ? std::vector<std::string>{} : parse_list(v);
    else if (key == "analysis.contrasts") {
      if (v == "gender_within_race") c.gender_within_race = true;
      else if (v == "none" || v.empty()) c.gender_within_race = false;
      else throw ConfigError("analysis.contrasts: expected gender_within_race or none");
    } else if (key == "topics.theta_path") {
      c.theta_path = v.empty() ? std::nullopt : std::optional<std::filesystem::path>(v);
    }
    else if (key == "topics.topic_set") {
      c.topic_set.clear();
      for (const auto& s : parse_list(v)) {
        const auto t = parse_int<std::size_t>(key, s);
        if (t < 1) throw ConfigError("topics.topic_set: topics are numbered from 1");
        c.topic_set.push_back(t - 1);
      }
    } else if (key == "topics.top_k") c.top_k = parse_int<std::size_t>(key, v);
    else throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  if (c.preprocess.remove_group_terms && c.preprocess.group_term_list.empty()) {
    c.preprocess.group_term_list = embedding::default_group_terms();
  }
  return c;
}

AuditConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& ex) {
    throw ConfigError(ex.what());
  }
  return parse_config(text, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

}  // namespace hbias::audit
