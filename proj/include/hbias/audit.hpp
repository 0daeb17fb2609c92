#pragma once

// End-to-end audit: corpus -> embed-check -> similarity -> models -> report.
//
// Stages that do real work write content-addressed checkpoints under
// <output_dir>/checkpoints. A checkpoint's name is derived from the hash of
// everything that can change its contents, so re-running with another
// encoder reuses the collected corpus, and --resume skips finished work.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hbias/classic_stats.hpp"
#include "hbias/config.hpp"
#include "hbias/corpus.hpp"
#include "hbias/error.hpp"
#include "hbias/llm_client.hpp"

namespace hbias::audit {

enum class Stage : std::uint8_t { kCorpus, kEmbedCheck, kSimilarity, kModels, kReport };

std::string_view to_string(Stage s);
std::optional<Stage> parse_stage(std::string_view s);

class StageError : public Error {
 public:
  StageError(Stage stage, std::string cell, const std::string& message);
  Stage stage() const noexcept { return stage_; }
  // Prompt id, encoder slug or file the failure is attributed to; may be empty.
  const std::string& cell() const noexcept { return cell_; }

 private:
  Stage stage_;
  std::string cell_;
};

struct RunOptions {
  bool resume = false;
  Stage last_stage = Stage::kReport;
  // Test hook: throw StageError right after this stage has checkpointed.
  std::optional<Stage> fail_after;
  // Overrides the configured endpoint (tests, dry runs).
  llm::ChatTransport* transport = nullptr;
  std::function<void(std::chrono::milliseconds)> sleep;
  std::function<void(std::string_view)> log;
};

// Per-encoder descriptive statistics, the input to every chart.
struct EncoderDescriptives {
  std::string slug;
  std::vector<stats::DescriptiveCell> race;
  std::vector<stats::DescriptiveCell> gender;
  std::vector<stats::DescriptiveCell> race_gender;
};

struct EncoderSummary {
  std::string slug;
  std::size_t similarity_rows = 0;
  std::size_t model_tables = 0;
  std::size_t lrt_rows = 0;
  std::size_t contrast_rows = 0;
};

struct ReportBundle {
  std::filesystem::path root;
  std::string config_hash;
  std::vector<EncoderSummary> encoders;
  std::map<std::string, std::string> files;  // path relative to root -> sha256
  std::vector<Stage> resumed;                // stages satisfied from checkpoints
  Stage completed = Stage::kCorpus;
  std::filesystem::path manifest;
};

ReportBundle run_audit(const AuditConfig& config, const RunOptions& options = {});

// Table value formatting, shared by CSVs and plot annotations.
std::string format_value(double x);
double ci_half_width(const stats::DescriptiveCell& c);

// Writes race, gender and intersectional charts per encoder plus a combined
// chart when there is more than one encoder. Returns paths relative to dir.
std::vector<std::string> emit_plots(std::span<const EncoderDescriptives> encoders,
                                    const std::filesystem::path& dir);

struct EmbeddingIssue {
  std::string prompt_id;
  std::string encoder;
  std::string message;
};

// Checks every (cell, encoder) file against the corpus: readable, checksum,
// encoder identity, one row per compliant completion, at least two rows.
std::vector<EmbeddingIssue> check_embeddings(const AuditConfig& config,
                                             std::span<const corpus::CorpusEntry> entries);

// A small self-contained study: 8 race × gender cells (two text formats),
// compliant and refused completions, random embeddings, topic thetas, and an
// audit.conf that ties them together. Returns the config path.
struct FixtureOptions {
  std::size_t texts_per_cell = 12;
  std::uint32_t dim = 16;
  std::uint64_t seed = 7;
  std::size_t encoders = 1;
  std::size_t topics = 4;
};
std::filesystem::path write_fixture(const std::filesystem::path& dir, const FixtureOptions& options = {});

}  // namespace hbias::audit
