// hbias: command-line front end for homogeneity-bias audits.
//
//   hbias plan        --config audit.conf           list the prompt grid and batch plan
//   hbias collect     --config audit.conf           build (or load) the corpus
//   hbias embed-check --config audit.conf           validate embedding files against the corpus
//   hbias analyze     --config audit.conf           similarity + mixed models
//   hbias report      --config audit.conf           render the bundle from checkpoints
//   hbias all         --config audit.conf           every stage
//   hbias fixture     --out DIR                     write a small self-contained study
//
// Exit codes: 0 success, 2 invalid configuration or arguments, 3 stage failure.

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include <iostream>

#include "hbias/audit.hpp"
#include "hbias/config.hpp"
#include "hbias/llm_client.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitStage = 3;

struct Args {
  std::string config;
  std::string out;
  bool resume = false;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  bool dry_run = false;
};

hbias::audit::AuditConfig load(const Args& a) {
  auto c = a.config.empty() ? hbias::audit::AuditConfig{} : hbias::audit::load_config(a.config);
  if (!a.out.empty()) c.output_dir = std::filesystem::absolute(a.out);
  if (a.seed) c.seed = *a.seed;
  return c;
}

int plan(const hbias::audit::AuditConfig& c) {
  c.validate_prompts();
  const auto prompts = c.prompt_matrix();
  const auto batches = hbias::llm::plan_batches(c.n_per_prompt, c.endpoint.per_request_max);
  for (const auto& p : prompts) fmt::print("{}\t{}\n", p.prompt_id, p.rendered);
  fmt::print("# {} prompts x {} texts = {} texts; {} request(s) per prompt (max {} per request)\n", prompts.size(),
             c.n_per_prompt, prompts.size() * static_cast<std::size_t>(c.n_per_prompt), batches.batch_sizes.size(),
             c.endpoint.per_request_max);
  fmt::print("# batch sizes: {}\n", fmt::join(batches.batch_sizes, ","));
  return 0;
}

int run(const Args& a, hbias::audit::Stage last) {
  const auto c = load(a);
  if (a.dry_run) return plan(c);
  hbias::audit::RunOptions o;
  o.resume = a.resume;
  o.last_stage = last;
  if (!a.quiet) o.log = [](std::string_view m) { std::cerr << m << '\n'; };
  const auto b = hbias::audit::run_audit(c, o);
  fmt::print("config_sha256 {}\n", b.config_hash);
  for (const auto s : b.resumed) fmt::print("resumed {}\n", hbias::audit::to_string(s));
  for (const auto& e : b.encoders) {
    fmt::print("{}: {} similarity rows, {} model tables, {} LRT rows, {} contrasts\n", e.slug, e.similarity_rows,
               e.model_tables, e.lrt_rows, e.contrast_rows);
  }
  if (!b.manifest.empty()) fmt::print("manifest {}\n", b.manifest.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Homogeneity-bias audit toolkit"};
  app.require_subcommand(1);
  Args a;
  auto common = [&](CLI::App* sub, bool need_config) {
    auto* opt = sub->add_option("--config", a.config, "Audit configuration file");
    if (need_config) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--out", a.out, "Output directory (overrides output_dir)");
    sub->add_flag("--resume", a.resume, "Reuse valid checkpoints");
    sub->add_option("--seed", a.seed, "Random seed (overrides seed)");
    sub->add_flag("-q,--quiet", a.quiet, "No progress messages");
    sub->add_flag("--dry-run", a.dry_run, "Print the prompt plan and exit");
  };
  auto* plan_cmd = app.add_subcommand("plan", "List the prompt grid and batch plan");
  common(plan_cmd, false);
  auto* collect_cmd = app.add_subcommand("collect", "Collect or load the corpus");
  common(collect_cmd, true);
  auto* check_cmd = app.add_subcommand("embed-check", "Validate embedding files against the corpus");
  common(check_cmd, true);
  auto* analyze_cmd = app.add_subcommand("analyze", "Compute similarities and fit models");
  common(analyze_cmd, true);
  auto* report_cmd = app.add_subcommand("report", "Write the report bundle (resumes from checkpoints)");
  common(report_cmd, true);
  auto* all_cmd = app.add_subcommand("all", "Run every stage");
  common(all_cmd, true);
  auto* fixture_cmd = app.add_subcommand("fixture", "Write a small self-contained study");
  hbias::audit::FixtureOptions fx;
  std::string fixture_dir;
  fixture_cmd->add_option("--out", fixture_dir, "Directory to create")->required();
  fixture_cmd->add_option("--seed", fx.seed, "Random seed");
  fixture_cmd->add_option("--texts", fx.texts_per_cell, "Compliant texts per cell");
  fixture_cmd->add_option("--dim", fx.dim, "Embedding dimension");
  fixture_cmd->add_option("--encoders", fx.encoders, "Number of encoders");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  using hbias::audit::Stage;
  try {
    if (*plan_cmd) return plan(load(a));
    if (*collect_cmd) return run(a, Stage::kCorpus);
    if (*check_cmd) return run(a, Stage::kEmbedCheck);
    if (*analyze_cmd) return run(a, Stage::kModels);
    if (*report_cmd) {
      a.resume = true;
      return run(a, Stage::kReport);
    }
    if (*all_cmd) return run(a, Stage::kReport);
    if (*fixture_cmd) {
      fmt::print("{}\n", hbias::audit::write_fixture(fixture_dir, fx).string());
      return 0;
    }
  } catch (const hbias::ConfigError& e) {
    fmt::print(stderr, "configuration error: {}\n", e.what());
    return kExitValidation;
  } catch (const hbias::ValidationError& e) {
    fmt::print(stderr, "validation error: {}\n", e.what());
    return kExitValidation;
  } catch (const hbias::audit::StageError& e) {
    fmt::print(stderr, "{}\n", e.what());
    return kExitStage;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitStage;
  }
  return 0;
}
