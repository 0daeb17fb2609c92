#include "hbias/audit.hpp"

#include <fmt/format.h>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <json.hpp>
#include <random>
#include <regex>
#include <set>

#include "hbias/embedding_store.hpp"
#include "hbias/mixedmodel.hpp"
#include "hbias/plots.hpp"
#include "hbias/similarity.hpp"
#include "hbias/util.hpp"

namespace hbias::audit {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::kCorpus: return "corpus";
    case Stage::kEmbedCheck: return "embed-check";
    case Stage::kSimilarity: return "similarity";
    case Stage::kModels: return "models";
    case Stage::kReport: return "report";
  }
  return "unknown";
}

std::optional<Stage> parse_stage(std::string_view s) {
  for (auto st : {Stage::kCorpus, Stage::kEmbedCheck, Stage::kSimilarity, Stage::kModels, Stage::kReport}) {
    if (s == to_string(st)) return st;
  }
  return std::nullopt;
}

StageError::StageError(Stage stage, std::string cell, const std::string& message)
    : Error(fmt::format("stage {}{}: {}", to_string(stage), cell.empty() ? "" : " [" + cell + "]", message)),
      stage_(stage),
      cell_(std::move(cell)) {}

std::string format_value(double x) {
  if (std::isnan(x)) return "NA";
  return format_double(x);
}

double ci_half_width(const stats::DescriptiveCell& c) {
  return c.n > 1 ? 1.96 * c.sd / std::sqrt(static_cast<double>(c.n)) : 0.0;
}

namespace {

constexpr std::size_t kKeyChars = 16;

std::string short_key(std::string_view material) { return sha256_hex(material).substr(0, kKeyChars); }

// Canonical config lines whose key starts with one of the prefixes.
std::string config_section(const AuditConfig& c, std::initializer_list<std::string_view> prefixes) {
  std::string out;
  for (const auto& line : split(c.canonical(), '\n')) {
    for (auto p : prefixes) {
      if (line.rfind(p, 0) == 0) {
        out += line;
        out += '\n';
        break;
      }
    }
  }
  return out;
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

double json_double(const ojson& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

// Files written into the bundle, with their digests.
class Emitter {
 public:
  Emitter(fs::path root, std::string config_hash) : root_(std::move(root)), hash_(std::move(config_hash)) {}

  void write(const std::string& rel, std::string_view contents) {
    write_file_atomic(root_ / rel, contents);
    files_[rel] = sha256_hex(contents);
  }

  void table(const std::string& rel, std::string_view header, const std::vector<std::string>& rows) {
    std::string s = "# config_sha256: " + hash_ + "\n";
    s += header;
    s += '\n';
    for (const auto& r : rows) {
      s += r;
      s += '\n';
    }
    write(rel, s);
  }

  void copy(const std::string& rel, const fs::path& src) {
    fs::create_directories((root_ / rel).parent_path());
    fs::copy_file(src, root_ / rel, fs::copy_options::overwrite_existing);
    files_[rel] = sha256_file(root_ / rel);
  }

  void track(const std::string& rel) { files_[rel] = sha256_file(root_ / rel); }

  const fs::path& root() const { return root_; }
  const std::string& hash() const { return hash_; }
  const std::map<std::string, std::string>& files() const { return files_; }

 private:
  fs::path root_;
  std::string hash_;
  std::map<std::string, std::string> files_;
};

// A checkpoint payload is trusted only when its .done marker records the
// payload's current digest.
bool checkpoint_valid(const fs::path& payload) {
  auto marker = payload;
  marker += ".done";
  if (!fs::exists(payload) || !fs::exists(marker)) return false;
  try {
    return trim(read_file(marker)) == sha256_file(payload);
  } catch (const Error&) {
    return false;
  }
}

void seal_checkpoint(const fs::path& payload) {
  auto marker = payload;
  marker += ".done";
  write_file_atomic(marker, sha256_file(payload) + "\n");
}

struct CorpusState {
  std::vector<corpus::CorpusEntry> entries;
  std::vector<corpus::PromptSpec> specs;
  fs::path file;
  std::string sha256;
  bool collected = false;
  std::optional<fs::path> preprocessed;
};

// Compliant rows per prompt in corpus order, which is also embedding row order.
struct CellRows {
  similarity::CellInfo info;
  std::vector<const corpus::Completion*> rows;
};

std::vector<CellRows> compliant_cells(std::span<const corpus::CorpusEntry> entries) {
  std::vector<CellRows> cells;
  std::map<std::string, std::size_t> index;
  for (const auto& e : entries) {
    auto [it, fresh] = index.try_emplace(e.completion.prompt_id, cells.size());
    if (fresh) cells.push_back({{e.completion.prompt_id, e.text_format, e.race, e.gender}, {}});
    if (e.completion.compliant) cells[it->second].rows.push_back(&e.completion);
  }
  for (auto& c : cells) {
    std::sort(c.rows.begin(), c.rows.end(),
              [](const corpus::Completion* a, const corpus::Completion* b) { return a->sequence_no < b->sequence_no; });
  }
  return cells;
}

std::string prompt_in_message(std::string_view what) {
  static const std::regex re(R"(prompt ([A-Za-z0-9_\-]+))");
  std::cmatch m;
  if (std::regex_search(what.data(), what.data() + what.size(), m, re)) return m[1].str();
  return {};
}

class Runner {
 public:
  Runner(const AuditConfig& config, const RunOptions& options)
      : c_(config),
        o_(options),
        root_(config.resolve(config.output_dir)),
        ck_(root_ / "checkpoints"),
        emit_(root_, config.hash()) {}

  ReportBundle run() {
    fs::create_directories(ck_);
    bundle_.root = root_;
    bundle_.config_hash = emit_.hash();

    stage(Stage::kCorpus, [&] { corpus_stage(); });
    if (done(Stage::kCorpus)) return bundle_;
    stage(Stage::kEmbedCheck, [&] { embed_check_stage(); });
    if (done(Stage::kEmbedCheck)) return bundle_;
    stage(Stage::kSimilarity, [&] { similarity_stage(); });
    if (done(Stage::kSimilarity)) return bundle_;
    stage(Stage::kModels, [&] { models_stage(); });
    if (done(Stage::kModels)) return bundle_;
    stage(Stage::kReport, [&] { report_stage(); });
    done(Stage::kReport);
    return bundle_;
  }

 private:
  template <typename F>
  void stage(Stage s, F&& body) {
    log(fmt::format("[{}] start", to_string(s)));
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& ex) {
      throw StageError(s, prompt_in_message(ex.what()), ex.what());
    }
    bundle_.completed = s;
    log(fmt::format("[{}] done", to_string(s)));
    if (o_.fail_after && *o_.fail_after == s) throw StageError(s, "", "simulated failure after stage");
  }

  bool done(Stage s) const { return o_.last_stage == s; }

  void log(std::string_view msg) const {
    if (o_.log) o_.log(msg);
  }

  void resumed(Stage s) {
    if (std::find(bundle_.resumed.begin(), bundle_.resumed.end(), s) == bundle_.resumed.end()) {
      bundle_.resumed.push_back(s);
    }
  }

  // ---- corpus ----

  void corpus_stage() {
    std::string material = "corpus\n";
    if (c_.corpus_source == CorpusSource::kLoad) {
      const auto src = c_.resolve(c_.corpus_path);
      if (!fs::exists(src)) throw StageError(Stage::kCorpus, src.generic_string(), "corpus file not found");
      material += "load\n" + sha256_file(src) + "\n";
    } else {
      material += config_section(c_, {"seed=", "corpus.", "prompts.", "endpoint.", "refusal."});
    }
    material += config_section(c_, {"preprocess."});
    const auto dir = ck_ / ("corpus-" + short_key(material));
    corpus_.file = dir / "corpus.jsonl";
    const auto pre = dir / "corpus.preprocessed.jsonl";
    corpus_.collected = c_.corpus_source == CorpusSource::kCollect;

    const bool reuse = o_.resume && checkpoint_valid(corpus_.file) && (!c_.preprocess.any() || checkpoint_valid(pre));
    if (reuse) {
      resumed(Stage::kCorpus);
      corpus_.entries = corpus::read_corpus(corpus_.file);
    } else {
      corpus_.entries = c_.corpus_source == CorpusSource::kLoad ? corpus::read_corpus(c_.resolve(c_.corpus_path))
                                                                : collect_corpus(dir);
      corpus::write_corpus(corpus_.file, corpus_.entries);
      seal_checkpoint(corpus_.file);
      if (c_.preprocess.any()) {
        auto processed = corpus_.entries;
        for (auto& e : processed) e.completion.text = embedding::preprocess_text(e.completion.text, c_.preprocess);
        corpus::write_corpus(pre, processed);
        seal_checkpoint(pre);
      }
    }
    if (c_.preprocess.any()) corpus_.preprocessed = pre;
    if (corpus_.entries.empty()) throw StageError(Stage::kCorpus, "", "corpus is empty");
    corpus_.sha256 = sha256_file(corpus_.file);
    corpus_.specs = corpus::specs_from_corpus(corpus_.entries);
  }

  std::vector<corpus::CorpusEntry> collect_corpus(const fs::path& dir) {
    const auto prompts = c_.prompt_matrix();
    const auto plan = llm::plan_batches(c_.n_per_prompt, c_.endpoint.per_request_max);
    std::unique_ptr<llm::ChatTransport> owned;
    llm::ChatTransport* transport = o_.transport;
    if (transport == nullptr) {
      if (c_.replay_transcript) {
        owned = std::make_unique<llm::ReplayTransport>(c_.resolve(*c_.replay_transcript));
      } else {
        owned = std::make_unique<llm::HttpChatTransport>(c_.endpoint);
      }
      transport = owned.get();
    }
    fs::create_directories(dir);
    fs::remove(dir / "transcript.jsonl");
    llm::TranscriptLog transcript(dir / "transcript.jsonl");
    llm::CollectOptions co;
    co.jitter_seed = c_.seed;
    co.transcript = &transcript;
    if (o_.sleep) co.sleep = o_.sleep;
    log(fmt::format("[corpus] collecting {} prompts x {} texts", prompts.size(), c_.n_per_prompt));
    const auto results =
        llm::collect_all(prompts, plan, c_.endpoint, c_.refusal_rules, *transport, c_.max_in_flight, co);

    std::vector<corpus::CorpusEntry> entries;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
      for (const auto* list : {&results[p].completions, &results[p].rejected}) {
        for (const auto& comp : *list) {
          entries.push_back({comp, prompts[p].text_format, prompts[p].race, prompts[p].gender});
        }
      }
    }
    return entries;
  }

  // ---- embed-check ----

  void embed_check_stage() {
    const auto issues = check_embeddings(c_, corpus_.entries);
    if (!issues.empty()) {
      std::string msg = fmt::format("{} embedding problem(s)", issues.size());
      for (std::size_t i = 0; i < std::min<std::size_t>(issues.size(), 10); ++i) {
        msg += fmt::format("\n  {} [{}]: {}", issues[i].prompt_id, issues[i].encoder, issues[i].message);
      }
      throw StageError(Stage::kEmbedCheck, issues.front().prompt_id, msg);
    }
    cells_ = compliant_cells(corpus_.entries);
    const auto emb_dir = c_.resolve(c_.embeddings_dir);
    for (const auto& enc : c_.encoders) {
      auto& sums = checksums_[embedding::encoder_slug(enc)];
      for (const auto& cell : cells_) {
        const auto paths = embedding::embedding_paths(emb_dir, cell.info.prompt_id, enc);
        sums.emplace_back(cell.info.prompt_id,
                          nlohmann::json::parse(read_file(paths.manifest)).at("sha256").get<std::string>());
      }
    }
  }

  // ---- similarity ----

  void similarity_stage() {
    const auto emb_dir = c_.resolve(c_.embeddings_dir);
    for (const auto& enc : c_.encoders) {
      const auto slug = embedding::encoder_slug(enc);
      std::string material = "similarity\n" + corpus_.sha256 + "\n" +
                             fmt::format("{}:{}:{}:{}\n", enc.model_id, enc.layer_offset,
                                         embedding::to_string(enc.pooling), enc.dim);
      for (const auto& [pid, sum] : checksums_.at(slug)) material += pid + "=" + sum + "\n";
      const auto key = sha256_hex(material);
      const auto csv = ck_ / fmt::format("similarity-{}-{}.csv", slug, key.substr(0, kKeyChars));
      sim_keys_[slug] = key;
      sim_files_[slug] = csv;
      if (o_.resume && checkpoint_valid(csv)) {
        resumed(Stage::kSimilarity);
        continue;
      }
      std::vector<similarity::CellInfo> infos;
      for (const auto& cell : cells_) infos.push_back(cell.info);
      auto load = [&](std::size_t i) {
        try {
          return embedding::read_embeddings(embedding::embedding_paths(emb_dir, infos[i].prompt_id, enc));
        } catch (const std::exception& ex) {
          throw StageError(Stage::kSimilarity, infos[i].prompt_id, ex.what());
        }
      };
      log(fmt::format("[similarity] {}: {} cells", slug, infos.size()));
      auto cells = similarity::pairwise_cells(infos, load, similarity::Execution::kParallel);
      auto data = similarity::standardize(std::move(cells), enc);
      similarity::write_analysis_csv(data, csv);
      seal_checkpoint(csv);
    }
  }

  // ---- models ----

  void models_stage() {
    const std::string analysis = config_section(c_, {"analysis."});
    for (const auto& enc : c_.encoders) {
      const auto slug = embedding::encoder_slug(enc);
      const auto key = short_key("models\n" + sim_keys_.at(slug) + "\n" + analysis);
      const auto file = ck_ / fmt::format("models-{}-{}.json", slug, key);
      model_files_[slug] = file;
      if (o_.resume && checkpoint_valid(file)) {
        resumed(Stage::kModels);
        continue;
      }
      log(fmt::format("[models] {}: fitting", slug));
      const auto data = similarity::read_analysis_csv(sim_files_.at(slug));
      try {
        write_file_atomic(file, analyse(data).dump(1) + "\n");
      } catch (const StageError&) {
        throw;
      } catch (const std::exception& ex) {
        throw StageError(Stage::kModels, slug, ex.what());
      }
      seal_checkpoint(file);
    }
  }

  static ojson fit_json(const std::string& key, const lmm::LmmFit& f) {
    ojson m;
    m["key"] = key;
    m["name"] = f.layout.formula.name;
    m["columns"] = f.columns();
    std::vector<double> est, se, z, p;
    for (std::size_t k = 0; k < f.p; ++k) {
      est.push_back(f.beta(static_cast<Eigen::Index>(k)));
      se.push_back(f.se(k));
      z.push_back(est.back() / se.back());
      p.push_back(lmm::normal_two_sided_p(z.back()));
    }
    m["estimate"] = est;
    m["se"] = se;
    m["z"] = z;
    m["p_value"] = p;
    m["df"] = f.df_display();
    m["var_group"] = f.sigma2_group;
    m["var_residual"] = f.sigma2_resid;
    m["lambda"] = f.lambda;
    m["loglik"] = f.loglik;
    m["n_obs"] = f.n_obs;
    m["n_groups"] = f.n_groups;
    m["converged"] = f.converged;
    return m;
  }

  static lmm::LmmFit fit_or_flag(const similarity::AnalysisDataset& data, const lmm::ModelFormula& f) {
    try {
      return lmm::fit(data, f);
    } catch (const lmm::ConvergenceError& ex) {
      return ex.fit();
    }
  }

  static ojson descriptives_json(const std::vector<stats::DescriptiveCell>& cells) {
    ojson arr = ojson::array();
    for (const auto& d : cells) {
      arr.push_back({{"label", d.label}, {"n", d.n}, {"mean", d.mean}, {"sd", d.sd}});
    }
    return arr;
  }

  ojson analyse(const similarity::AnalysisDataset& data) const {
    ojson out;
    out["record_count"] = data.record_count();
    out["mean"] = data.standardization.mean;
    out["sd"] = data.standardization.sd;
    out["descriptives"] = {{"race", descriptives_json(stats::descriptives(data, stats::Grouping::kRace))},
                           {"gender", descriptives_json(stats::descriptives(data, stats::Grouping::kGender))},
                           {"race_gender", descriptives_json(stats::descriptives(data, stats::Grouping::kRaceGender))}};
    out["models"] = ojson::array();
    std::optional<lmm::LmmFit> interaction;
    for (const auto& key : c_.models) {
      auto f = fit_or_flag(data, model_by_key(key));
      out["models"].push_back(fit_json(key, f));
      if (key == "interaction") interaction = std::move(f);
    }
    out["lrt"] = ojson::array();
    if (!c_.lrt_effects.empty()) {
      auto full_formula = lmm::ModelFormula::interaction_model();
      full_formula.coding = lmm::Coding::kSum;
      const auto full = fit_or_flag(data, full_formula);
      for (const auto& effect : c_.lrt_effects) {
        auto reduced_formula = full_formula.without(effect_by_key(effect));
        reduced_formula.name = full_formula.name + " - " + effect;
        const auto reduced = fit_or_flag(data, reduced_formula);
        const auto r = lmm::lrt(full, reduced);
        out["lrt"].push_back({{"effect", effect},
                              {"full", full_formula.name},
                              {"reduced", reduced_formula.name},
                              {"df", r.df},
                              {"chi2", r.chi2},
                              {"p_value", r.p_value},
                              {"full_loglik", r.full_loglik},
                              {"reduced_loglik", r.reduced_loglik},
                              {"converged", full.converged && reduced.converged}});
      }
    }
    out["contrasts"] = ojson::array();
    if (c_.gender_within_race && interaction) {
      for (const auto& ct : lmm::gender_within_race(*interaction)) {
        out["contrasts"].push_back({{"label", ct.label},
                                    {"race", std::string(hbias::to_string(ct.race))},
                                    {"estimate", ct.estimate},
                                    {"se", ct.se},
                                    {"z", ct.z},
                                    {"p_value", ct.p_value}});
      }
    }
    return out;
  }

  // ---- report ----

  static std::vector<stats::DescriptiveCell> descriptives_from(const ojson& arr) {
    std::vector<stats::DescriptiveCell> out;
    for (const auto& d : arr) {
      stats::DescriptiveCell c;
      c.label = d.at("label").get<std::string>();
      c.n = d.at("n").get<std::uint64_t>();
      c.mean = json_double(d.at("mean"));
      c.sd = json_double(d.at("sd"));
      out.push_back(std::move(c));
    }
    return out;
  }

  void report_stage() {
    compliance_table();
    std::vector<EncoderDescriptives> descs;
    ojson embeddings_in;
    for (const auto& enc : c_.encoders) {
      const auto slug = embedding::encoder_slug(enc);
      const auto m = ojson::parse(read_file(model_files_.at(slug)));
      EncoderSummary summary;
      summary.slug = slug;
      summary.similarity_rows = m.at("record_count").get<std::size_t>();

      emit_.copy("data/" + slug + "/similarity.csv", sim_files_.at(slug));
      // The checkpoint is shared across configs; the bundle's sidecar names this one.
      auto sidecar_path = sim_files_.at(slug);
      sidecar_path += ".json";
      auto sidecar = ojson::parse(read_file(sidecar_path));
      sidecar["config_sha256"] = emit_.hash();
      emit_.write("data/" + slug + "/similarity.csv.json", sidecar.dump(2) + "\n");

      EncoderDescriptives d;
      d.slug = slug;
      d.race = descriptives_from(m.at("descriptives").at("race"));
      d.gender = descriptives_from(m.at("descriptives").at("gender"));
      d.race_gender = descriptives_from(m.at("descriptives").at("race_gender"));
      descriptives_table(slug, d);
      descs.push_back(std::move(d));

      summary.model_tables = model_tables(slug, enc, m.at("models"));
      summary.lrt_rows = lrt_table(slug, m.at("lrt"));
      summary.contrast_rows = contrast_table(slug, m.at("contrasts"));
      bundle_.encoders.push_back(summary);

      ojson sums = ojson::object();
      for (const auto& [pid, sum] : checksums_.at(slug)) sums[pid] = sum;
      embeddings_in[slug] = sums;
    }
    for (const auto& rel : emit_plots(descs, root_ / "plots")) emit_.track("plots/" + rel);
    std::optional<std::string> theta_sha;
    if (c_.theta_path) theta_sha = topic_tables();
    if (corpus_.collected) emit_.copy("corpus/corpus.jsonl", corpus_.file);
    if (corpus_.preprocessed) emit_.copy("corpus/corpus.preprocessed.jsonl", *corpus_.preprocessed);

    ojson manifest;
    manifest["run_id"] = c_.run_id;
    manifest["config_sha256"] = emit_.hash();
    manifest["seed"] = c_.seed;
    manifest["config"] = split(c_.canonical(), '\n');
    manifest["config"].erase(manifest["config"].end() - 1);  // trailing empty line
    ojson inputs;
    inputs["corpus_sha256"] = corpus_.sha256;
    inputs["embeddings"] = embeddings_in;
    if (theta_sha) inputs["theta_sha256"] = *theta_sha;
    manifest["inputs"] = inputs;
    manifest["outputs"] = emit_.files();
    const std::string text = manifest.dump(2) + "\n";
    write_file_atomic(root_ / "manifest.json", text);
    bundle_.files = emit_.files();
    bundle_.files["manifest.json"] = sha256_hex(text);
    bundle_.manifest = root_ / "manifest.json";
  }

  void compliance_table() {
    std::vector<corpus::Completion> completions;
    for (const auto& e : corpus_.entries) completions.push_back(e.completion);
    const auto tally = corpus::compliance_tally(completions, corpus_.specs);
    std::map<Race, std::uint64_t> gen_race;
    std::map<Gender, std::uint64_t> gen_gender;
    std::map<TextFormat, std::uint64_t> gen_format;
    for (const auto& e : corpus_.entries) {
      ++gen_race[e.race];
      ++gen_gender[e.gender];
      ++gen_format[e.text_format];
    }
    std::vector<std::string> rows;
    for (auto r : kAllRaces) {
      if (tally.by_race.count(r)) rows.push_back(fmt::format("race,{},{},{}", to_string(r), tally.by_race.at(r), gen_race[r]));
    }
    for (auto g : kAllGenders) {
      if (tally.by_gender.count(g)) {
        rows.push_back(fmt::format("gender,{},{},{}", to_string(g), tally.by_gender.at(g), gen_gender[g]));
      }
    }
    for (auto f : kAllFormats) {
      if (tally.by_format.count(f)) {
        rows.push_back(fmt::format("format,{},{},{}", slug(f), tally.by_format.at(f), gen_format[f]));
      }
    }
    rows.push_back(fmt::format("total,all,{},{}", tally.total, corpus_.entries.size()));
    emit_.table("tables/compliance.csv", "dimension,level,noncompliant,generated", rows);
  }

  void descriptives_table(const std::string& slug, const EncoderDescriptives& d) {
    std::vector<std::string> rows;
    auto add = [&](std::string_view grouping, const std::vector<stats::DescriptiveCell>& cells) {
      for (const auto& c : cells) {
        rows.push_back(fmt::format("{},{},{},{},{},{}", grouping, csv_field(c.label), c.n, format_value(c.mean),
                                   format_value(c.sd), format_value(ci_half_width(c))));
      }
    };
    add("race", d.race);
    add("gender", d.gender);
    add("race_gender", d.race_gender);
    emit_.table("tables/" + slug + "/descriptives.csv", "grouping,group,n,mean,sd,ci_half_width", rows);
  }

  std::size_t model_tables(const std::string& slug, const embedding::EncoderSpec& enc, const ojson& models) {
    ojson summary;
    summary["config_sha256"] = emit_.hash();
    summary["encoder"] = slug;
    summary["layer_offset"] = enc.layer_offset;
    summary["models"] = ojson::array();
    for (const auto& m : models) {
      std::vector<std::string> rows;
      ojson fixed = ojson::array();
      const auto& cols = m.at("columns");
      for (std::size_t k = 0; k < cols.size(); ++k) {
        const double est = json_double(m["estimate"][k]);
        const double se = json_double(m["se"][k]);
        const double z = json_double(m["z"][k]);
        const double p = json_double(m["p_value"][k]);
        rows.push_back(fmt::format("{},{},{},{},{},{}", csv_field(cols[k].get<std::string>()), format_value(est),
                                   format_value(se), format_value(z), format_value(p), m["df"].get<std::uint64_t>()));
        fixed.push_back({{"term", cols[k]}, {"estimate", est}, {"se", se}, {"z", z}, {"p_value", p}});
      }
      rows.push_back(fmt::format("var(text_format),{},,,,", format_value(json_double(m["var_group"]))));
      rows.push_back(fmt::format("var(residual),{},,,,", format_value(json_double(m["var_residual"]))));
      emit_.table("tables/" + slug + "/model_" + m["key"].get<std::string>() + ".csv", "term,estimate,se,z,p_value,df",
                  rows);
      ojson entry;
      entry["model"] = m["name"];
      entry["fixed_effects"] = fixed;
      entry["random_effects"] = {{"text_format_variance", m["var_group"]}, {"residual_variance", m["var_residual"]}};
      entry["df"] = m["df"];
      entry["loglik"] = m["loglik"];
      entry["n_obs"] = m["n_obs"];
      entry["n_groups"] = m["n_groups"];
      entry["converged"] = m["converged"];
      summary["models"].push_back(entry);
    }
    emit_.write("tables/" + slug + "/model_summary.json", summary.dump(2) + "\n");
    return models.size();
  }

  std::size_t lrt_table(const std::string& slug, const ojson& lrts) {
    std::vector<std::string> rows;
    for (const auto& r : lrts) {
      rows.push_back(fmt::format("{},{},{},{},{},{},{},{}", r["effect"].get<std::string>(),
                                 csv_field(r["full"].get<std::string>()), csv_field(r["reduced"].get<std::string>()),
                                 r["df"].get<int>(), format_value(json_double(r["chi2"])),
                                 format_value(json_double(r["p_value"])), format_value(json_double(r["full_loglik"])),
                                 format_value(json_double(r["reduced_loglik"]))));
    }
    emit_.table("tables/" + slug + "/lrt.csv", "effect,full_model,reduced_model,df,chi2,p_value,full_loglik,reduced_loglik",
                rows);
    return lrts.size();
  }

  std::size_t contrast_table(const std::string& slug, const ojson& contrasts) {
    std::vector<std::string> rows;
    for (const auto& r : contrasts) {
      rows.push_back(fmt::format("{},{},{},{},{},{}", csv_field(r["label"].get<std::string>()),
                                 r["race"].get<std::string>(), format_value(json_double(r["estimate"])),
                                 format_value(json_double(r["se"])), format_value(json_double(r["z"])),
                                 format_value(json_double(r["p_value"]))));
    }
    emit_.table("tables/" + slug + "/contrasts.csv", "contrast,race,estimate,se,z,p_value", rows);
    return contrasts.size();
  }

  std::string topic_tables() {
    const auto path = c_.resolve(*c_.theta_path);
    const auto assignments = stats::read_theta_csv(path);
    std::map<std::string, const corpus::CorpusEntry*> by_doc;
    for (const auto& e : corpus_.entries) by_doc[corpus::doc_id(e.completion)] = &e;
    std::vector<std::string> race_labels;
    std::vector<std::string> cell_labels;
    for (const auto& a : assignments) {
      const auto it = by_doc.find(a.doc_id);
      if (it == by_doc.end()) throw IntegrityError("theta file: doc_id '" + a.doc_id + "' is not in the corpus");
      race_labels.emplace_back(to_string(it->second->race));
      cell_labels.push_back(race_labels.back() + " " + std::string(to_string(it->second->gender)));
    }
    const std::size_t k_topics = assignments.empty() ? 0 : assignments.front().theta.size();
    for (auto t : c_.topic_set) {
      if (t >= k_topics) throw ConfigError(fmt::format("topics.topic_set: topic {} exceeds K = {}", t + 1, k_topics));
    }

    auto canonical = [](std::vector<stats::GroupProportion> v) {
      std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) {
        auto rank = [](const std::string& g) {
          for (std::size_t r = 0; r < kAllRaces.size(); ++r) {
            const auto name = std::string(to_string(kAllRaces[r]));
            if (g == name) return 2 * r;
            if (g == name + " man") return 2 * r;
            if (g == name + " woman") return 2 * r + 1;
          }
          return std::size_t{99};
        };
        return rank(a.group) < rank(b.group);
      });
      return v;
    };

    const auto by_race = canonical(stats::majority_topic_prevalence(assignments, race_labels, c_.topic_set));
    const auto by_cell = canonical(stats::majority_topic_prevalence(assignments, cell_labels, c_.topic_set));
    std::vector<std::string> rows;
    for (const auto* set : {&by_race, &by_cell}) {
      for (const auto& g : *set) {
        rows.push_back(fmt::format("{},{},{},{},{}", set == &by_race ? "race" : "race_gender", csv_field(g.group), g.count,
                                   g.total, format_value(g.proportion)));
      }
    }
    emit_.table("tables/topics_prevalence.csv", "grouping,group,count,total,proportion", rows);

    rows.clear();
    const auto white = std::find_if(by_race.begin(), by_race.end(), [](const auto& g) { return g.group == "White"; });
    if (white != by_race.end()) {
      for (const auto& g : by_race) {
        if (&g == &*white) continue;
        const auto r = stats::two_prop_chisq(g.count, g.total, white->count, white->total);
        rows.push_back(fmt::format("{},White,{},{},{}", g.group, format_value(r.chi2), r.df, format_value(r.p_value)));
      }
    }
    emit_.table("tables/topics_chisq.csv", "group,reference,chi2,df,p_value", rows);

    rows.clear();
    std::set<std::size_t> ks{1, std::min(c_.top_k, k_topics)};
    for (auto k : ks) {
      if (k < 1) continue;
      for (const auto& g : canonical(stats::topk_topic_coverage(assignments, race_labels, k))) {
        rows.push_back(fmt::format("{},{},{},{}", g.group, k, g.total, format_value(g.proportion)));
      }
    }
    emit_.table("tables/topics_topk.csv", "group,k,total,coverage", rows);
    return sha256_file(path);
  }

  const AuditConfig& c_;
  const RunOptions& o_;
  fs::path root_;
  fs::path ck_;
  Emitter emit_;
  ReportBundle bundle_;
  CorpusState corpus_;
  std::vector<CellRows> cells_;
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> checksums_;
  std::map<std::string, std::string> sim_keys_;
  std::map<std::string, fs::path> sim_files_;
  std::map<std::string, fs::path> model_files_;
};

}  // namespace

ReportBundle run_audit(const AuditConfig& config, const RunOptions& options) {
  config.validate();
  const int saved_threads = omp_get_max_threads();
  if (config.parallelism > 0) omp_set_num_threads(config.parallelism);
  struct Restore {
    int n;
    ~Restore() { omp_set_num_threads(n); }
  } restore{saved_threads};
  return Runner(config, options).run();
}

std::vector<std::string> emit_plots(std::span<const EncoderDescriptives> encoders, const fs::path& dir) {
  std::vector<std::string> written;
  auto emit = [&](const std::string& rel, const plots::BarChart& chart) {
    write_file_atomic(dir / rel, plots::render_svg(chart));
    written.push_back(rel);
  };
  auto bar = [](std::string group, std::string hue, const stats::DescriptiveCell& c) {
    const double ci = ci_half_width(c);
    return plots::Bar{std::move(group), std::move(hue), c.mean, format_value(c.mean), ci, format_value(ci)};
  };
  const std::string y_label = "mean standardized cosine similarity";
  for (const auto& e : encoders) {
    plots::BarChart race{"Race/ethnicity (" + e.slug + ")", y_label, {}};
    for (const auto& c : e.race) race.bars.push_back(bar(c.label, "", c));
    emit(e.slug + "/race.svg", race);

    plots::BarChart gender{"Gender (" + e.slug + ")", y_label, {}};
    for (const auto& c : e.gender) gender.bars.push_back(bar(c.label, "", c));
    emit(e.slug + "/gender.svg", gender);

    plots::BarChart cells{"Intersectional groups (" + e.slug + ")", y_label, {}};
    for (const auto& c : e.race_gender) {
      const auto space = c.label.rfind(' ');
      cells.bars.push_back(bar(c.label.substr(0, space), space == std::string::npos ? "" : c.label.substr(space + 1), c));
    }
    emit(e.slug + "/intersectional.svg", cells);
  }
  if (encoders.size() > 1) {
    plots::BarChart all{"Intersectional groups, all encoders", y_label, {}};
    for (const auto& e : encoders) {
      for (const auto& c : e.race_gender) all.bars.push_back(bar(c.label, e.slug, c));
    }
    emit("all_encoders.svg", all);
  }
  return written;
}

std::vector<EmbeddingIssue> check_embeddings(const AuditConfig& config, std::span<const corpus::CorpusEntry> entries) {
  std::vector<EmbeddingIssue> issues;
  const auto cells = compliant_cells(entries);
  const auto dir = config.resolve(config.embeddings_dir);
  for (const auto& enc : config.encoders) {
    const auto slug = embedding::encoder_slug(enc);
    for (const auto& cell : cells) {
      const auto& pid = cell.info.prompt_id;
      const auto expected = cell.rows.size();
      if (expected < 2) {
        issues.push_back({pid, slug, fmt::format("only {} compliant completion(s); need at least 2", expected)});
        continue;
      }
      const auto paths = embedding::embedding_paths(dir, pid, enc);
      if (!fs::exists(paths.manifest) || !fs::exists(paths.payload)) {
        issues.push_back({pid, slug, "missing " + paths.manifest.filename().string() + " or its payload"});
        continue;
      }
      try {
        const auto m = embedding::read_embeddings(paths);
        if (m.prompt_id != pid) issues.push_back({pid, slug, "manifest prompt_id is '" + m.prompt_id + "'"});
        if (!(m.encoder == enc)) {
          issues.push_back({pid, slug,
                            fmt::format("manifest encoder {}:{}:{}:{} does not match the config", m.encoder.model_id,
                                        m.encoder.layer_offset, embedding::to_string(m.encoder.pooling),
                                        m.encoder.dim)});
        }
        if (m.n_rows != expected) {
          issues.push_back({pid, slug, fmt::format("{} rows, corpus has {} compliant completions", m.n_rows, expected)});
        }
      } catch (const Error& ex) {
        issues.push_back({pid, slug, ex.what()});
      }
    }
  }
  return issues;
}

fs::path write_fixture(const fs::path& dir, const FixtureOptions& options) {
  if (options.texts_per_cell < 2) throw ValidationError("fixture: texts_per_cell must be >= 2");
  if (options.dim < 1 || options.topics < 2 || options.encoders < 1) throw ValidationError("fixture: bad shape");
  fs::create_directories(dir / "embeddings");
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, 19);
  static constexpr std::string_view kWords[] = {"he",    "she",   "walked", "city",  "family", "worked", "dream",
                                                "music", "river", "school", "quiet", "bright", "market", "home",
                                                "story", "kind",  "strong", "night", "garden", "friend"};
  const auto rules = corpus::default_refusal_rules();

  std::vector<corpus::CorpusEntry> entries;
  std::vector<std::string> theta_rows;
  std::vector<std::pair<corpus::PromptSpec, std::size_t>> cells;
  for (auto r : kAllRaces) {
    // Two formats keep the random-intercept factor at two levels.
    const auto f = (r == Race::kAfrican || r == Race::kAsian) ? TextFormat::kStory : TextFormat::kBiography;
    for (auto g : kAllGenders) {
      corpus::PromptSpec spec;
      spec.prompt_id = corpus::make_prompt_id(f, r, g);
      spec.text_format = f;
      spec.race = r;
      spec.gender = g;
      cells.emplace_back(spec, 0);
    }
  }
  for (std::size_t ci = 0; ci < cells.size(); ++ci) {
    const auto& spec = cells[ci].first;
    for (std::uint32_t s = 0; s < options.texts_per_cell; ++s) {
      std::string text;
      for (int w = 0; w < 30; ++w) text += std::string(w ? " " : "") + std::string(kWords[pick(rng)]);
      text += ".";
      entries.push_back({corpus::make_completion(spec.prompt_id, s, text, 0, rules), spec.text_format, spec.race,
                         spec.gender});
    }
    // One refusal in every other cell gives the compliance table some texture.
    if (ci % 2 == 0) {
      entries.push_back({corpus::make_completion(spec.prompt_id, static_cast<std::uint32_t>(options.texts_per_cell),
                                                 "I'm sorry, but I can't write that.", 0, rules),
                         spec.text_format, spec.race, spec.gender});
    }
  }
  corpus::write_corpus(dir / "corpus.jsonl", entries);

  std::string encoders;
  for (std::size_t e = 0; e < options.encoders; ++e) {
    embedding::EncoderSpec enc{fmt::format("fixture-encoder-{}", e + 1), e == 0 ? 0 : -2, embedding::Pooling::kMean,
                               options.dim};
    encoders += fmt::format("{}{}:{}:mean:{}", e ? ", " : "", enc.model_id, enc.layer_offset, enc.dim);
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
      const auto& spec = cells[ci].first;
      // Shared per-cell direction plus noise: cells differ in how tightly
      // their texts cluster.
      std::vector<double> centre(options.dim);
      for (auto& x : centre) x = normal(rng);
      const double spread = 0.6 + 0.15 * static_cast<double>(ci);
      embedding::EmbeddingMatrix m;
      m.prompt_id = spec.prompt_id;
      m.encoder = enc;
      m.n_rows = static_cast<std::uint32_t>(options.texts_per_cell);
      for (std::size_t i = 0; i < options.texts_per_cell; ++i) {
        for (std::uint32_t d = 0; d < options.dim; ++d) {
          m.vectors.push_back(static_cast<float>(centre[d] + spread * normal(rng)));
        }
      }
      embedding::write_embeddings(m, dir / "embeddings");
    }
  }

  std::string theta = "doc_id";
  for (std::size_t k = 0; k < options.topics; ++k) theta += fmt::format(",theta_{}", k + 1);
  theta += '\n';
  std::gamma_distribution<double> gamma(0.5, 1.0);
  for (const auto& e : entries) {
    if (!e.completion.compliant) continue;
    std::vector<double> t(options.topics);
    double sum = 0.0;
    for (auto& x : t) sum += (x = gamma(rng) + 1e-3);
    theta += corpus::doc_id(e.completion);
    for (double x : t) theta += "," + format_double(x / sum);
    theta += '\n';
  }
  write_file_atomic(dir / "theta.csv", theta);

  const std::string conf = fmt::format(
      "# Fixture study: 8 race x gender cells over two text formats.\n"
      "run_id = fixture\n"
      "seed = {}\n"
      "output_dir = out\n"
      "\n"
      "[corpus]\n"
      "source = load\n"
      "path = corpus.jsonl\n"
      "\n"
      "[embeddings]\n"
      "dir = embeddings\n"
      "encoders = {}\n"
      "\n"
      "[topics]\n"
      "theta_path = theta.csv\n"
      "topic_set = 1, 2\n"
      "top_k = 2\n",
      options.seed, encoders);
  write_file_atomic(dir / "audit.conf", conf);
  return dir / "audit.conf";
}

}  // namespace hbias::audit
