#pragma once

// Gaussian linear mixed model with one random-intercept grouping factor,
//
//   y = X beta + Z b + e,   b ~ N(0, tau^2 I),   e ~ N(0, sigma^2 I),
//
// fitted by maximum likelihood profiled over lambda = tau^2 / sigma^2.
// Within group g, (I + lambda 1 1')^-1 = I - w_g 1 1' with
// w_g = lambda / (1 + lambda n_g), so X'V^-1X, X'V^-1y and y'V^-1y only need
// the per-group sums X_g'X_g, X_g'1, X_g'y, 1'y, y'y and n_g. Those are
// accumulated in one pass; every profile evaluation afterwards is O(G p^2).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hbias/error.hpp"
#include "hbias/similarity.hpp"
#include "hbias/types.hpp"

namespace hbias::lmm {

enum class Term : std::uint8_t { kIntercept, kRace, kGender, kRaceGender };

enum class Coding : std::uint8_t {
  kTreatment,  // dummies against White / man
  kSum,        // sum-to-zero, White / man coded -1; allows dropping any term
};

struct ModelFormula {
  std::string name;
  std::string response = "z";
  bool race = false;
  bool gender = false;
  bool race_gender = false;
  std::string random_intercept = "text_format";
  Coding coding = Coding::kTreatment;

  // Throws SpecificationError.
  void validate() const;
  // Same formula minus one term. Requires sum coding unless the result is
  // still hierarchical.
  ModelFormula without(Term term) const;
  bool has(Term term) const noexcept;

  static ModelFormula race_model();
  static ModelFormula gender_model();
  static ModelFormula race_gender_model();
  static ModelFormula interaction_model();
};

// Observations sharing one design row and one grouping level.
struct ResponseBlock {
  std::string group;
  Race race{};
  Gender gender{};
  std::span<const double> y;
};

// One block per prompt cell, y = standardized cosine. Spans point into `data`.
std::vector<ResponseBlock> blocks_from(const similarity::AnalysisDataset& data);

// Column layout for a formula over the race/gender levels present.
struct DesignLayout {
  ModelFormula formula;
  std::vector<Race> races;      // present levels, canonical order
  std::vector<Gender> genders;  // present levels, canonical order
  std::vector<std::string> columns;

  Eigen::VectorXd row(Race r, Gender g) const;
  std::size_t p() const noexcept { return columns.size(); }
};

// Throws DesignError when a reference level is missing or a factor has a
// single level.
DesignLayout make_layout(const ModelFormula& formula, std::span<const ResponseBlock> blocks);

// Fingerprint used to refuse LRTs between fits on different data.
struct DataSignature {
  std::uint64_t n_obs = 0;
  std::uint64_t n_groups = 0;
  double y_sum = 0.0;
  double y_sum_sq = 0.0;
  bool operator==(const DataSignature&) const = default;
};

struct GroupStats {
  std::string label;
  double n = 0.0;
  Eigen::MatrixXd xtx;  // X_g' X_g
  Eigen::VectorXd xty;  // X_g' y_g
  Eigen::VectorXd x_sum;  // X_g' 1
  double y_sum = 0.0;
  double yty = 0.0;
};

struct SufficientStats {
  std::vector<GroupStats> groups;  // first-appearance order
  std::uint64_t n_obs = 0;
  std::size_t p = 0;
  DataSignature signature;
};

SufficientStats accumulate(std::span<const ResponseBlock> blocks, const DesignLayout& layout,
                           similarity::Execution exec = similarity::Execution::kParallel);

struct ProfilePoint {
  double lambda = 0.0;
  double loglik = 0.0;
  double rss = 0.0;  // y'H^-1 y - b'beta at the GLS solution, H = I + lambda Z Z'
  double sigma2 = 0.0;
  Eigen::VectorXd beta;
  Eigen::MatrixXd xhx_inv;  // (X'H^-1X)^-1
};

// Profiled ML log-likelihood and GLS solution at a fixed lambda >= 0.
ProfilePoint profile(const SufficientStats& stats, double lambda);

// d loglik / d log(lambda) at lambda > 0.
double profile_score(const SufficientStats& stats, double lambda);

struct LmmFit {
  DesignLayout layout;
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov_beta;
  double sigma2_resid = 0.0;
  double sigma2_group = 0.0;
  double lambda = 0.0;
  double loglik = 0.0;
  std::uint64_t n_obs = 0;
  std::size_t n_groups = 0;
  std::size_t p = 0;
  bool converged = false;
  int iterations = 0;
  SufficientStats stats;

  const std::vector<std::string>& columns() const noexcept { return layout.columns; }
  double se(std::size_t k) const { return std::sqrt(cov_beta(k, k)); }
  std::uint64_t df_display() const noexcept { return n_obs - p; }
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, LmmFit fit) : Error(what), fit_(std::move(fit)) {}
  const LmmFit& fit() const noexcept { return fit_; }

 private:
  LmmFit fit_;
};

struct FitOptions {
  similarity::Execution exec = similarity::Execution::kParallel;
  double log_lambda_min = -20.0;
  double log_lambda_max = 20.0;
  int grid_points = 41;
  double brent_tol = 1e-10;
  int max_iter = 200;
};

// Throws DesignError (rank deficiency, < 2 groups, empty data) and
// ConvergenceError (carrying the fit with converged = false).
LmmFit fit(std::span<const ResponseBlock> blocks, const ModelFormula& formula,
           const FitOptions& options = {});
LmmFit fit(const similarity::AnalysisDataset& data, const ModelFormula& formula,
           const FitOptions& options = {});

// Recomputed from the stored sufficient statistics at the fitted lambda.
double log_likelihood(const LmmFit& fit);

struct LrtResult {
  double chi2 = 0.0;
  int df = 0;
  double p_value = 1.0;
  double full_loglik = 0.0;
  double reduced_loglik = 0.0;
};

// Throws DatasetError when fits come from different data and NestingError
// when reduced's columns are not a subset of full's.
LrtResult lrt(const LmmFit& full, const LmmFit& reduced);

struct ContrastResult {
  std::string label;
  Race race{};
  double estimate = 0.0;
  double se = 0.0;
  double z = 0.0;
  double p_value = 1.0;
  Eigen::VectorXd contrast_vector;
};

// Arbitrary linear combination L'beta with normal-theory inference.
// Throws SpecificationError on a wrong-length or all-zero vector.
ContrastResult linear_contrast(const LmmFit& fit, std::string label, const Eigen::VectorXd& weights);

// Women minus men within each race level present in the fit: the difference
// of estimated marginal means x(r, woman)'beta - x(r, man)'beta. Throws
// SpecificationError when the fit has no gender term.
std::vector<ContrastResult> gender_within_race(const LmmFit& fit);

// Two-sided normal tail.
double normal_two_sided_p(double z);
double chi2_upper_p(double chi2, int df);

}  // namespace hbias::lmm
