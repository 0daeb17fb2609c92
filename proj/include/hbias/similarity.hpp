#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hbias/embedding_store.hpp"
#include "hbias/types.hpp"

namespace hbias::similarity {

enum class Execution { kSerial, kParallel };

// Throws ShapeError on dimension mismatch, UndefinedSimilarityError when a
// norm is zero.
double cosine(std::span<const float> u, std::span<const float> v);
double cosine(std::span<const double> u, std::span<const double> v);

struct CellInfo {
  std::string prompt_id;
  TextFormat text_format{};
  Race race{};
  Gender gender{};
};

// All pairs of one prompt cell. Pairs are stored implicitly in (i, j)
// lexicographic order, i < j; z stays empty until standardization.
struct CellSimilarity {
  CellInfo info;
  std::uint32_t n = 0;
  std::vector<double> cos;
  std::vector<double> z;

  std::size_t pair_count() const noexcept { return cos.size(); }
};

struct SimilarityRecord {
  const CellInfo* cell = nullptr;
  std::uint32_t i = 0;
  std::uint32_t j = 0;
  double cos = 0.0;
  double z = 0.0;
};

struct Standardization {
  double mean = 0.0;
  double sd = 0.0;
  std::string population = "global";
};

struct AnalysisDataset {
  std::vector<CellSimilarity> cells;
  embedding::EncoderSpec encoder;
  Standardization standardization;

  std::size_t record_count() const noexcept;
  // Visits every record in cell order, then (i, j) order.
  void for_each_record(const std::function<void(const SimilarityRecord&)>& fn) const;
};

// Throws InsufficientDataError when n_rows < 2.
CellSimilarity pairwise(const embedding::EmbeddingMatrix& matrix, CellInfo info,
                        Execution exec = Execution::kParallel);

// Cells are independent work units; output order follows `cells` whatever
// the execution mode. `load` is called once per cell and must be thread-safe
// under Execution::kParallel. Only one embedding matrix per worker is alive.
std::vector<CellSimilarity> pairwise_cells(
    std::span<const CellInfo> cells,
    const std::function<embedding::EmbeddingMatrix(std::size_t)>& load,
    Execution exec = Execution::kParallel);

// Global z-scores with the pooled mean and sample (n-1) SD over every record.
// Throws InsufficientDataError (< 2 records) or DegenerateError (SD = 0).
AnalysisDataset standardize(std::vector<CellSimilarity> cells, embedding::EncoderSpec encoder);

// Columnar CSV (prompt_id,format,race,gender,i,j,cos,z) plus a JSON sidecar
// with the standardization constants at <csv>.json.
void write_analysis_csv(const AnalysisDataset& data, const std::filesystem::path& csv,
                        const std::string& config_hash = {});
AnalysisDataset read_analysis_csv(const std::filesystem::path& csv);

}  // namespace hbias::similarity
