#include "hbias/similarity.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <unordered_map>

#include "hbias/error.hpp"
#include "hbias/kernels.hpp"
#include "hbias/util.hpp"

namespace hbias::similarity {
namespace {

template <typename T>
double cosine_impl(std::span<const T> u, std::span<const T> v) {
  if (u.size() != v.size()) {
    throw ShapeError("cosine: dimension mismatch " + std::to_string(u.size()) + " vs " +
                     std::to_string(v.size()));
  }
  const double nu = kernels::norm(u.data(), u.size());
  const double nv = kernels::norm(v.data(), v.size());
  if (!(nu > 0.0) || !(nv > 0.0)) throw UndefinedSimilarityError("cosine: zero-norm vector");
  return kernels::cosine_from_parts(kernels::dot_compensated(u.data(), v.data(), u.size()), nu, nv);
}

double parse_double(std::string_view s) {
  double x = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ParseError("analysis csv: bad number '" + std::string(s) + "'");
  }
  return x;
}

std::uint32_t parse_u32(std::string_view s) {
  std::uint32_t x = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw ParseError("analysis csv: bad index '" + std::string(s) + "'");
  }
  return x;
}

}  // namespace

double cosine(std::span<const float> u, std::span<const float> v) { return cosine_impl(u, v); }
double cosine(std::span<const double> u, std::span<const double> v) { return cosine_impl(u, v); }

std::size_t AnalysisDataset::record_count() const noexcept {
  std::size_t n = 0;
  for (const auto& c : cells) n += c.pair_count();
  return n;
}

void AnalysisDataset::for_each_record(const std::function<void(const SimilarityRecord&)>& fn) const {
  SimilarityRecord r;
  for (const auto& cell : cells) {
    r.cell = &cell.info;
    std::size_t k = 0;
    for (std::uint32_t i = 0; i < cell.n; ++i) {
      for (std::uint32_t j = i + 1; j < cell.n; ++j, ++k) {
        r.i = i;
        r.j = j;
        r.cos = cell.cos[k];
        r.z = cell.z.empty() ? 0.0 : cell.z[k];
        fn(r);
      }
    }
  }
}

CellSimilarity pairwise(const embedding::EmbeddingMatrix& matrix, CellInfo info, Execution exec) {
  if (matrix.n_rows < 2) {
    throw InsufficientDataError(info.prompt_id + ": need at least 2 sentences, got " +
                                std::to_string(matrix.n_rows));
  }
  if (matrix.vectors.size() != static_cast<std::size_t>(matrix.n_rows) * matrix.encoder.dim) {
    throw ShapeError(info.prompt_id + ": embedding matrix size does not match n_rows × dim");
  }
  CellSimilarity out;
  out.info = std::move(info);
  out.n = matrix.n_rows;
  out.cos.resize(kernels::pair_count(matrix.n_rows));
  std::vector<double> norms(matrix.n_rows);
  kernels::serial::row_norms(matrix.vectors.data(), matrix.n_rows, matrix.encoder.dim, norms.data());
  for (std::size_t i = 0; i < norms.size(); ++i) {
    if (!(norms[i] > 0.0)) {
      throw UndefinedSimilarityError(out.info.prompt_id + ": zero vector at row " + std::to_string(i));
    }
  }
  if (exec == Execution::kParallel) {
    kernels::parallel::pairwise_cosine(matrix.vectors.data(), matrix.n_rows, matrix.encoder.dim, out.cos.data());
  } else {
    kernels::serial::pairwise_cosine(matrix.vectors.data(), matrix.n_rows, matrix.encoder.dim, out.cos.data());
  }
  return out;
}

std::vector<CellSimilarity> pairwise_cells(
    std::span<const CellInfo> cells,
    const std::function<embedding::EmbeddingMatrix(std::size_t)>& load, Execution exec) {
  std::vector<CellSimilarity> out(cells.size());
  if (exec == Execution::kSerial) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out[c] = pairwise(load(c), cells[c], Execution::kSerial);
    }
    return out;
  }
  std::vector<std::exception_ptr> errors(cells.size());
  const auto nc = static_cast<std::ptrdiff_t>(cells.size());
  // Parallel across cells, serial within: same per-pair arithmetic either way.
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t c = 0; c < nc; ++c) {
    try {
      out[c] = pairwise(load(static_cast<std::size_t>(c)), cells[c], Execution::kSerial);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

AnalysisDataset standardize(std::vector<CellSimilarity> cells, embedding::EncoderSpec encoder) {
  AnalysisDataset data;
  data.cells = std::move(cells);
  data.encoder = std::move(encoder);
  const std::size_t total = data.record_count();
  if (total < 2) throw InsufficientDataError("standardize: need at least 2 similarity records");

  KahanSum sum;
  for (const auto& c : data.cells) {
    for (double x : c.cos) sum.add(x);
  }
  const double mean = sum.value() / static_cast<double>(total);
  KahanSum ss;
  for (const auto& c : data.cells) {
    for (double x : c.cos) ss.add((x - mean) * (x - mean));
  }
  const double sd = std::sqrt(ss.value() / static_cast<double>(total - 1));
  if (!(sd > 0.0)) throw DegenerateError("standardize: pooled standard deviation is zero");

  for (auto& c : data.cells) {
    c.z.resize(c.cos.size());
    for (std::size_t k = 0; k < c.cos.size(); ++k) c.z[k] = (c.cos[k] - mean) / sd;
  }
  data.standardization = {mean, sd, "global"};
  return data;
}

void write_analysis_csv(const AnalysisDataset& data, const std::filesystem::path& csv,
                        const std::string& config_hash) {
  std::string out = "prompt_id,format,race,gender,i,j,cos,z\n";
  out.reserve(out.size() + data.record_count() * 80);
  fmt::memory_buffer buf;
  data.for_each_record([&](const SimilarityRecord& r) {
    buf.clear();
    fmt::format_to(std::back_inserter(buf), "{},{},{},{},{},{},{},{}\n", r.cell->prompt_id,
                   slug(r.cell->text_format), to_string(r.cell->race), to_string(r.cell->gender),
                   r.i, r.j, format_double(r.cos), format_double(r.z));
    out.append(buf.data(), buf.size());
  });
  write_file_atomic(csv, out);

  nlohmann::ordered_json side;
  side["record_count"] = data.record_count();
  side["cells"] = data.cells.size();
  side["mean"] = data.standardization.mean;
  side["sd"] = data.standardization.sd;
  side["sd_ddof"] = 1;
  side["population"] = data.standardization.population;
  side["encoder"] = {{"model_id", data.encoder.model_id},
                     {"layer_offset", data.encoder.layer_offset},
                     {"pooling", std::string(embedding::to_string(data.encoder.pooling))},
                     {"dim", data.encoder.dim}};
  if (!config_hash.empty()) side["config_sha256"] = config_hash;
  auto side_path = csv;
  side_path += ".json";
  write_file_atomic(side_path, side.dump(2) + "\n");
}

AnalysisDataset read_analysis_csv(const std::filesystem::path& csv) {
  auto side_path = csv;
  side_path += ".json";
  const auto side = nlohmann::json::parse(read_file(side_path));
  AnalysisDataset data;
  data.standardization.mean = side.at("mean").get<double>();
  data.standardization.sd = side.at("sd").get<double>();
  data.standardization.population = side.at("population").get<std::string>();
  const auto& enc = side.at("encoder");
  data.encoder.model_id = enc.at("model_id").get<std::string>();
  data.encoder.layer_offset = enc.at("layer_offset").get<int>();
  data.encoder.pooling = enc.at("pooling").get<std::string>() == "mean" ? embedding::Pooling::kMean
                                                                        : embedding::Pooling::kNative;
  data.encoder.dim = enc.at("dim").get<std::uint32_t>();

  const std::string text = read_file(csv);
  std::size_t pos = text.find('\n');
  if (pos == std::string::npos || text.substr(0, pos) != "prompt_id,format,race,gender,i,j,cos,z") {
    throw ParseError(csv.string() + ": unexpected header");
  }
  ++pos;
  std::unordered_map<std::string, std::size_t> index;
  std::vector<std::uint32_t> max_index;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> last_pair;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (line.empty()) continue;
    std::string_view f[8];
    std::size_t start = 0;
    for (int k = 0; k < 8; ++k) {
      const auto comma = k < 7 ? line.find(',', start) : line.size();
      if (comma == std::string_view::npos) throw ParseError(csv.string() + ": short row");
      f[k] = line.substr(start, comma - start);
      start = comma + 1;
    }
    const std::string pid(f[0]);
    auto [it, inserted] = index.try_emplace(pid, data.cells.size());
    if (inserted) {
      CellSimilarity c;
      c.info.prompt_id = pid;
      auto fm = parse_format(f[1]);
      auto rc = parse_race(f[2]);
      auto gd = parse_gender(f[3]);
      if (!fm || !rc || !gd) throw ParseError(csv.string() + ": unknown factor level in row for " + pid);
      c.info.text_format = *fm;
      c.info.race = *rc;
      c.info.gender = *gd;
      data.cells.push_back(std::move(c));
      max_index.push_back(0);
      last_pair.emplace_back(0, 0);
    }
    auto& cell = data.cells[it->second];
    const auto i = parse_u32(f[4]);
    const auto j = parse_u32(f[5]);
    if (i >= j) throw ParseError(csv.string() + ": row with i >= j");
    auto& last = last_pair[it->second];
    if (!cell.cos.empty() && !(last.first < i || (last.first == i && last.second < j))) {
      throw ParseError(csv.string() + ": rows of cell " + pid + " are not in (i, j) order");
    }
    last = {i, j};
    max_index[it->second] = std::max(max_index[it->second], j);
    cell.cos.push_back(parse_double(f[6]));
    cell.z.push_back(parse_double(f[7]));
  }
  for (std::size_t c = 0; c < data.cells.size(); ++c) {
    auto& cell = data.cells[c];
    cell.n = max_index[c] + 1;
    if (kernels::pair_count(cell.n) != cell.cos.size()) {
      throw ParseError(csv.string() + ": cell " + cell.info.prompt_id + " does not hold all pairs");
    }
  }
  if (data.record_count() != side.at("record_count").get<std::size_t>()) {
    throw ParseError(csv.string() + ": record count disagrees with sidecar");
  }
  return data;
}

}  // namespace hbias::similarity
