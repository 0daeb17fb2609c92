#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hbias/similarity.hpp"
#include "hbias/types.hpp"

namespace hbias::stats {

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
};

// Welch two-sample t with Welch–Satterthwaite df and two-sided p. Throws
// InsufficientDataError (< 2 per sample) or DegenerateError (both variances 0).
WelchResult welch_t(std::span<const double> a, std::span<const double> b);

struct ChiSquaredResult {
  double chi2 = 0.0;
  int df = 1;
  double p_value = 1.0;
};

// Pearson chi-squared on the 2×2 table [[k1, n1-k1], [k2, n2-k2]], no
// continuity correction. Throws EmptyGroupError when n1 or n2 is zero.
ChiSquaredResult two_prop_chisq(std::uint64_t k1, std::uint64_t n1, std::uint64_t k2, std::uint64_t n2);

// Two-sided p for Student t with fractional df.
double student_t_two_sided_p(double t, double df);

struct TopicAssignment {
  std::string doc_id;
  std::vector<double> theta;
  std::size_t majority_topic = 0;  // 0-based, lowest index wins ties
};

// Validates |sum(theta) - 1| <= 1e-6 and non-negativity; fills majority_topic.
TopicAssignment make_assignment(std::string doc_id, std::vector<double> theta);

// CSV with header doc_id,theta_1,...,theta_K.
std::vector<TopicAssignment> read_theta_csv(const std::filesystem::path& path);

struct GroupProportion {
  std::string group;
  std::uint64_t count = 0;  // docs satisfying the criterion
  std::uint64_t total = 0;
  double proportion = 0.0;
};

// Share of each group's documents whose majority topic is in topic_set.
// `groups[i]` labels `assignments[i]`; output follows first appearance.
std::vector<GroupProportion> majority_topic_prevalence(std::span<const TopicAssignment> assignments,
                                                       std::span<const std::string> groups,
                                                       std::span<const std::size_t> topic_set);

// For each group, topics ranked by majority frequency (ties to the lower
// index); returns the summed share of the top k. Requires 1 <= k <= K.
std::vector<GroupProportion> topk_topic_coverage(std::span<const TopicAssignment> assignments,
                                                 std::span<const std::string> groups, std::size_t k);

struct DescriptiveCell {
  std::string label;  // "African man", "African", "woman"
  std::optional<Race> race;
  std::optional<Gender> gender;
  std::uint64_t n = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample SD
};

enum class Grouping { kRace, kGender, kRaceGender };

// Mean and SD of z per group, groups in canonical factor order.
std::vector<DescriptiveCell> descriptives(const similarity::AnalysisDataset& data,
                                          Grouping grouping = Grouping::kRaceGender);

}  // namespace hbias::stats
