#include "hbias/classic_stats.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "hbias/error.hpp"
#include "hbias/util.hpp"

namespace hbias::stats {
namespace {

struct MeanVar {
  double mean = 0.0;
  double var = 0.0;
};

MeanVar mean_var(std::span<const double> x) {
  KahanSum s;
  for (double v : x) s.add(v);
  const double mean = s.value() / static_cast<double>(x.size());
  KahanSum ss;
  for (double v : x) ss.add((v - mean) * (v - mean));
  return {mean, x.size() > 1 ? ss.value() / static_cast<double>(x.size() - 1) : 0.0};
}

// Stable group order: first appearance.
std::vector<std::string> group_order(std::span<const std::string> groups) {
  std::vector<std::string> order;
  for (const auto& g : groups) {
    if (std::find(order.begin(), order.end(), g) == order.end()) order.push_back(g);
  }
  return order;
}

void check_labels(std::span<const TopicAssignment> assignments, std::span<const std::string> groups) {
  if (assignments.size() != groups.size()) {
    throw EmptyGroupError("every document needs a group label (" + std::to_string(assignments.size()) +
                          " documents, " + std::to_string(groups.size()) + " labels)");
  }
  if (assignments.empty()) throw EmptyGroupError("no documents");
}

}  // namespace

double student_t_two_sided_p(double t, double df) {
  if (t == 0.0) return 1.0;
  if (std::isinf(t)) return 0.0;
  const double x = df / (df + t * t);
  return boost::math::ibeta(0.5 * df, 0.5, x);
}

WelchResult welch_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) {
    throw InsufficientDataError("welch_t: each sample needs at least 2 observations");
  }
  const auto ma = mean_var(a), mb = mean_var(b);
  if (ma.var == 0.0 && mb.var == 0.0) throw DegenerateError("welch_t: both samples have zero variance");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double va = ma.var / na, vb = mb.var / nb;
  const double se2 = va + vb;
  WelchResult r;
  r.t = (ma.mean - mb.mean) / std::sqrt(se2);
  r.df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
  r.p_value = student_t_two_sided_p(r.t, r.df);
  return r;
}

ChiSquaredResult two_prop_chisq(std::uint64_t k1, std::uint64_t n1, std::uint64_t k2, std::uint64_t n2) {
  if (n1 == 0 || n2 == 0) throw EmptyGroupError("two_prop_chisq: a group has no observations");
  if (k1 > n1 || k2 > n2) throw ValidationError("two_prop_chisq: count exceeds group size");
  ChiSquaredResult r;
  const std::uint64_t k = k1 + k2, n = n1 + n2;
  if (k == 0 || k == n) return r;  // no variation in the outcome
  const double a = static_cast<double>(k1), b = static_cast<double>(n1 - k1);
  const double c = static_cast<double>(k2), d = static_cast<double>(n2 - k2);
  const double cross = a * d - b * c;
  r.chi2 = static_cast<double>(n) * cross * cross /
           (static_cast<double>(n1) * static_cast<double>(n2) * static_cast<double>(k) *
            static_cast<double>(n - k));
  r.p_value = r.chi2 > 0.0 ? std::erfc(std::sqrt(0.5 * r.chi2)) : 1.0;  // chi2(1) tail
  return r;
}

TopicAssignment make_assignment(std::string doc_id, std::vector<double> theta) {
  if (theta.empty()) throw ValidationError(doc_id + ": empty theta vector");
  double total = 0.0;
  for (double v : theta) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError(doc_id + ": theta must be finite and non-negative");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) throw ValidationError(doc_id + ": theta does not sum to 1");
  TopicAssignment a;
  a.doc_id = std::move(doc_id);
  a.majority_topic = static_cast<std::size_t>(std::max_element(theta.begin(), theta.end()) - theta.begin());
  a.theta = std::move(theta);
  return a;
}

std::vector<TopicAssignment> read_theta_csv(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  auto lines = split(text, '\n');
  if (lines.empty()) throw ParseError(path.string() + ": empty theta file");
  const auto header = split(trim(lines[0]), ',');
  if (header.size() < 2 || trim(header[0]) != "doc_id") {
    throw ParseError(path.string() + ": header must start with doc_id");
  }
  for (std::size_t k = 1; k < header.size(); ++k) {
    if (trim(header[k]) != "theta_" + std::to_string(k)) {
      throw ParseError(path.string() + ": expected column theta_" + std::to_string(k));
    }
  }
  const std::size_t K = header.size() - 1;
  std::vector<TopicAssignment> out;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::string line = trim(lines[li]);
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    if (fields.size() != K + 1) {
      throw ParseError(path.string() + ":" + std::to_string(li + 1) + ": expected " + std::to_string(K + 1) + " fields");
    }
    std::vector<double> theta(K);
    for (std::size_t k = 0; k < K; ++k) {
      const std::string f = trim(fields[k + 1]);
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), theta[k]);
      if (ec != std::errc{} || ptr != f.data() + f.size()) {
        throw ParseError(path.string() + ":" + std::to_string(li + 1) + ": bad theta value '" + f + "'");
      }
    }
    out.push_back(make_assignment(trim(fields[0]), std::move(theta)));
  }
  return out;
}

std::vector<GroupProportion> majority_topic_prevalence(std::span<const TopicAssignment> assignments,
                                                       std::span<const std::string> groups,
                                                       std::span<const std::size_t> topic_set) {
  check_labels(assignments, groups);
  std::vector<GroupProportion> out;
  for (const auto& g : group_order(groups)) out.push_back({g, 0, 0, 0.0});
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    auto& gp = *std::find_if(out.begin(), out.end(), [&](const auto& x) { return x.group == groups[i]; });
    ++gp.total;
    if (std::find(topic_set.begin(), topic_set.end(), assignments[i].majority_topic) != topic_set.end()) {
      ++gp.count;
    }
  }
  for (auto& gp : out) gp.proportion = static_cast<double>(gp.count) / static_cast<double>(gp.total);
  return out;
}

std::vector<GroupProportion> topk_topic_coverage(std::span<const TopicAssignment> assignments,
                                                 std::span<const std::string> groups, std::size_t k) {
  check_labels(assignments, groups);
  const std::size_t K = assignments.front().theta.size();
  for (const auto& a : assignments) {
    if (a.theta.size() != K) throw ValidationError("topk_topic_coverage: documents disagree on K");
  }
  if (k < 1 || k > K) {
    throw ValidationError("topk_topic_coverage: k must be in [1, " + std::to_string(K) + "]");
  }
  const auto order = group_order(groups);
  std::vector<std::vector<std::uint64_t>> counts(order.size(), std::vector<std::uint64_t>(K, 0));
  std::vector<std::uint64_t> totals(order.size(), 0);
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    const auto g = static_cast<std::size_t>(std::find(order.begin(), order.end(), groups[i]) - order.begin());
    ++counts[g][assignments[i].majority_topic];
    ++totals[g];
  }
  std::vector<GroupProportion> out;
  for (std::size_t g = 0; g < order.size(); ++g) {
    std::vector<std::size_t> idx(K);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t x, std::size_t y) { return counts[g][x] > counts[g][y]; });
    std::uint64_t covered = 0;
    for (std::size_t r = 0; r < k; ++r) covered += counts[g][idx[r]];
    out.push_back({order[g], covered, totals[g], static_cast<double>(covered) / static_cast<double>(totals[g])});
  }
  return out;
}

std::vector<DescriptiveCell> descriptives(const similarity::AnalysisDataset& data, Grouping grouping) {
  struct Acc {
    std::uint64_t n = 0;
    std::vector<std::span<const double>> parts;
  };
  // key: race * 2 + gender, or race, or gender
  std::map<int, Acc> acc;
  for (const auto& c : data.cells) {
    if (c.z.empty()) throw DatasetError("descriptives: dataset is not standardized");
    int key = 0;
    switch (grouping) {
      case Grouping::kRace: key = static_cast<int>(c.info.race); break;
      case Grouping::kGender: key = static_cast<int>(c.info.gender); break;
      case Grouping::kRaceGender: key = static_cast<int>(c.info.race) * 2 + static_cast<int>(c.info.gender); break;
    }
    auto& a = acc[key];
    a.n += c.z.size();
    a.parts.push_back(c.z);
  }
  std::vector<DescriptiveCell> out;
  for (const auto& [key, a] : acc) {
    if (a.n < 2) throw InsufficientDataError("descriptives: a group has fewer than 2 records");
    DescriptiveCell d;
    switch (grouping) {
      case Grouping::kRace:
        d.race = static_cast<Race>(key);
        d.label = std::string(to_string(*d.race));
        break;
      case Grouping::kGender:
        d.gender = static_cast<Gender>(key);
        d.label = std::string(to_string(*d.gender));
        break;
      case Grouping::kRaceGender:
        d.race = static_cast<Race>(key / 2);
        d.gender = static_cast<Gender>(key % 2);
        d.label = std::string(to_string(*d.race)) + " " + std::string(to_string(*d.gender));
        break;
    }
    KahanSum s;
    for (auto part : a.parts) {
      for (double v : part) s.add(v);
    }
    d.n = a.n;
    d.mean = s.value() / static_cast<double>(a.n);
    KahanSum ss;
    for (auto part : a.parts) {
      for (double v : part) ss.add((v - d.mean) * (v - d.mean));
    }
    d.sd = std::sqrt(ss.value() / static_cast<double>(a.n - 1));
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace hbias::stats
