#include "hbias/mixedmodel.hpp"

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>

#include "hbias/kernels.hpp"
#include "hbias/optimize.hpp"
#include "hbias/util.hpp"

namespace hbias::lmm {

// ---------------------------------------------------------------------------
// formulas

void ModelFormula::validate() const {
  if (response.empty()) throw SpecificationError("formula: response column is empty");
  if (random_intercept.empty()) throw SpecificationError("formula: grouping column is empty");
  if (coding == Coding::kTreatment && race_gender && !(race && gender)) {
    throw SpecificationError("formula '" + name +
                             "': race×gender under treatment coding needs both main effects");
  }
}

bool ModelFormula::has(Term term) const noexcept {
  switch (term) {
    case Term::kIntercept: return true;
    case Term::kRace: return race;
    case Term::kGender: return gender;
    case Term::kRaceGender: return race_gender;
  }
  return false;
}

ModelFormula ModelFormula::without(Term term) const {
  if (term != Term::kIntercept && !has(term)) {
    throw SpecificationError("formula '" + name + "' has no such term to drop");
  }
  ModelFormula f = *this;
  switch (term) {
    case Term::kIntercept: throw SpecificationError("formula: the intercept cannot be dropped");
    case Term::kRace: f.race = false; f.name += " - race"; break;
    case Term::kGender: f.gender = false; f.name += " - gender"; break;
    case Term::kRaceGender: f.race_gender = false; f.name += " - race:gender"; break;
  }
  f.validate();
  return f;
}

ModelFormula ModelFormula::race_model() { return {.name = "Race/Ethnicity", .race = true}; }
ModelFormula ModelFormula::gender_model() { return {.name = "Gender", .gender = true}; }
ModelFormula ModelFormula::race_gender_model() {
  return {.name = "Race/Ethnicity, Gender", .race = true, .gender = true};
}
ModelFormula ModelFormula::interaction_model() {
  return {.name = "Interaction", .race = true, .gender = true, .race_gender = true};
}

std::vector<ResponseBlock> blocks_from(const similarity::AnalysisDataset& data) {
  std::vector<ResponseBlock> out;
  out.reserve(data.cells.size());
  for (const auto& c : data.cells) {
    if (c.z.size() != c.cos.size()) {
      throw DatasetError("dataset cell " + c.info.prompt_id + " is not standardized");
    }
    out.push_back({std::string(to_string(c.info.text_format)), c.info.race, c.info.gender, c.z});
  }
  return out;
}

// ---------------------------------------------------------------------------
// design

namespace {

std::string race_col(Race r, Coding c) {
  return c == Coding::kSum ? "race[sum:" + std::string(to_string(r)) + "]"
                           : "race[" + std::string(to_string(r)) + "]";
}

std::string gender_col(Coding c) { return c == Coding::kSum ? "gender[sum:woman]" : "gender[woman]"; }

}  // namespace

DesignLayout make_layout(const ModelFormula& formula, std::span<const ResponseBlock> blocks) {
  formula.validate();
  DesignLayout layout;
  layout.formula = formula;
  bool race_seen[4] = {};
  bool gender_seen[2] = {};
  for (const auto& b : blocks) {
    if (b.y.empty()) continue;
    race_seen[static_cast<int>(b.race)] = true;
    gender_seen[static_cast<int>(b.gender)] = true;
  }
  for (Race r : kAllRaces) {
    if (race_seen[static_cast<int>(r)]) layout.races.push_back(r);
  }
  for (Gender g : kAllGenders) {
    if (gender_seen[static_cast<int>(g)]) layout.genders.push_back(g);
  }
  const bool needs_race = formula.race || formula.race_gender;
  const bool needs_gender = formula.gender || formula.race_gender;
  if (needs_race && (!race_seen[static_cast<int>(Race::kWhite)] || layout.races.size() < 2)) {
    throw DesignError("race term needs the White reference level and at least one other level");
  }
  if (needs_gender && layout.genders.size() < 2) {
    throw DesignError("gender term needs both gender levels in the data");
  }

  layout.columns.push_back("(Intercept)");
  if (formula.race) {
    for (Race r : layout.races) {
      if (r != Race::kWhite) layout.columns.push_back(race_col(r, formula.coding));
    }
  }
  if (formula.gender) layout.columns.push_back(gender_col(formula.coding));
  if (formula.race_gender) {
    for (Race r : layout.races) {
      if (r != Race::kWhite) {
        layout.columns.push_back(race_col(r, formula.coding) + ":" + gender_col(formula.coding));
      }
    }
  }
  return layout;
}

Eigen::VectorXd DesignLayout::row(Race r, Gender g) const {
  Eigen::VectorXd x(static_cast<Eigen::Index>(p()));
  Eigen::Index k = 0;
  x[k++] = 1.0;
  const bool sum = formula.coding == Coding::kSum;
  const double gval = g == Gender::kWoman ? 1.0 : (sum ? -1.0 : 0.0);
  auto rval = [&](Race level) {
    if (r == level) return 1.0;
    return sum && r == Race::kWhite ? -1.0 : 0.0;
  };
  if (formula.race) {
    for (Race level : races) {
      if (level != Race::kWhite) x[k++] = rval(level);
    }
  }
  if (formula.gender) x[k++] = gval;
  if (formula.race_gender) {
    for (Race level : races) {
      if (level != Race::kWhite) x[k++] = rval(level) * gval;
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// sufficient statistics

SufficientStats accumulate(std::span<const ResponseBlock> blocks, const DesignLayout& layout,
                           similarity::Execution exec) {
  std::vector<std::span<const double>> ys;
  ys.reserve(blocks.size());
  for (const auto& b : blocks) ys.push_back(b.y);
  std::vector<kernels::Moments> moments(blocks.size());
  if (exec == similarity::Execution::kParallel) {
    kernels::parallel::block_moments(ys, moments.data());
  } else {
    kernels::serial::block_moments(ys, moments.data());
  }

  const auto p = static_cast<Eigen::Index>(layout.p());
  SufficientStats st;
  st.p = layout.p();
  std::unordered_map<std::string, std::size_t> index;
  KahanSum total_y, total_yy;
  // Merge in block order so the result does not depend on scheduling.
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& m = moments[b];
    if (m.n == 0) continue;
    auto [it, inserted] = index.try_emplace(blocks[b].group, st.groups.size());
    if (inserted) {
      GroupStats g;
      g.label = blocks[b].group;
      g.xtx = Eigen::MatrixXd::Zero(p, p);
      g.xty = Eigen::VectorXd::Zero(p);
      g.x_sum = Eigen::VectorXd::Zero(p);
      st.groups.push_back(std::move(g));
    }
    GroupStats& g = st.groups[it->second];
    const Eigen::VectorXd x = layout.row(blocks[b].race, blocks[b].gender);
    const double n = static_cast<double>(m.n);
    g.n += n;
    g.xtx.noalias() += n * x * x.transpose();
    g.xty += m.sum * x;
    g.x_sum += n * x;
    g.y_sum += m.sum;
    g.yty += m.sum_sq;
    st.n_obs += m.n;
    total_y.add(m.sum);
    total_yy.add(m.sum_sq);
  }
  st.signature = {st.n_obs, st.groups.size(), total_y.value(), total_yy.value()};
  return st;
}

// ---------------------------------------------------------------------------
// profile likelihood

ProfilePoint profile(const SufficientStats& stats, double lambda) {
  const auto p = static_cast<Eigen::Index>(stats.p);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  double c = 0.0;
  double logdet = 0.0;
  for (const auto& g : stats.groups) {
    const double w = lambda / (1.0 + lambda * g.n);
    a += g.xtx;
    a.noalias() -= w * g.x_sum * g.x_sum.transpose();
    b += g.xty - w * g.y_sum * g.x_sum;
    c += g.yty - w * g.y_sum * g.y_sum;
    logdet += std::log1p(lambda * g.n);
  }
  Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  if (ldlt.info() != Eigen::Success) throw DesignError("profile: X'V^-1X is not positive definite");
  ProfilePoint pt;
  pt.lambda = lambda;
  pt.beta = ldlt.solve(b);
  pt.xhx_inv = ldlt.solve(Eigen::MatrixXd::Identity(p, p));
  pt.rss = c - b.dot(pt.beta);
  const double n = static_cast<double>(stats.n_obs);
  if (!(pt.rss > 0.0)) throw DegenerateError("profile: residual sum of squares is not positive");
  pt.sigma2 = pt.rss / n;
  pt.loglik = -0.5 * (n * (std::log(2.0 * std::numbers::pi) + 1.0 + std::log(pt.sigma2)) + logdet);
  return pt;
}

double profile_score(const SufficientStats& stats, double lambda) {
  const ProfilePoint pt = profile(stats, lambda);
  const double n = static_cast<double>(stats.n_obs);
  double quad = 0.0, trace = 0.0;
  for (const auto& g : stats.groups) {
    const double d = 1.0 + lambda * g.n;
    const double s = g.y_sum - g.x_sum.dot(pt.beta);
    quad += s * s / (d * d);
    trace += g.n / d;
  }
  return lambda * (0.5 * n * quad / pt.rss - 0.5 * trace);
}

// ---------------------------------------------------------------------------
// fitting

namespace {

LmmFit finish(DesignLayout layout, SufficientStats stats, double lambda, bool converged, int iterations) {
  const ProfilePoint pt = profile(stats, lambda);
  LmmFit f;
  f.layout = std::move(layout);
  f.beta = pt.beta;
  f.cov_beta = pt.sigma2 * pt.xhx_inv;
  f.cov_beta = 0.5 * (f.cov_beta + f.cov_beta.transpose()).eval();
  f.sigma2_resid = pt.sigma2;
  f.lambda = lambda;
  f.sigma2_group = lambda * pt.sigma2;
  f.loglik = pt.loglik;
  f.n_obs = stats.n_obs;
  f.n_groups = stats.groups.size();
  f.p = stats.p;
  f.converged = converged;
  f.iterations = iterations;
  f.stats = std::move(stats);
  return f;
}

}  // namespace

LmmFit fit(std::span<const ResponseBlock> blocks, const ModelFormula& formula, const FitOptions& options) {
  DesignLayout layout = make_layout(formula, blocks);
  SufficientStats stats = accumulate(blocks, layout, options.exec);
  if (stats.n_obs == 0) throw DesignError("fit: no observations");
  if (stats.groups.size() < 2) {
    throw DesignError("fit: grouping factor '" + formula.random_intercept + "' needs at least 2 levels");
  }
  if (stats.n_obs <= stats.p) throw DesignError("fit: fewer observations than fixed-effect columns");

  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(stats.p), static_cast<Eigen::Index>(stats.p));
  for (const auto& g : stats.groups) xtx += g.xtx;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(xtx, Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();
  if (!(ev.minCoeff() > 1e-10 * ev.maxCoeff())) {
    throw DesignError("fit: fixed-effect design is rank deficient for formula '" + formula.name + "'");
  }

  auto loglik_at = [&](double t) { return profile(stats, std::exp(t)).loglik; };
  const int grid = std::max(options.grid_points, 3);
  const double lo = options.log_lambda_min, hi = options.log_lambda_max;
  const double step = (hi - lo) / (grid - 1);
  int best = 0;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < grid; ++k) {
    const double ll = loglik_at(lo + k * step);
    if (ll > best_ll) {
      best_ll = ll;
      best = k;
    }
  }
  const double a = lo + std::max(best - 1, 0) * step;
  const double b = lo + std::min(best + 1, grid - 1) * step;
  auto brent = optimize::brent_minimize([&](double t) { return -loglik_at(t); }, a, b,
                                        options.brent_tol, options.max_iter);
  double t_hat = brent.x;
  double ll_hat = -brent.fx;
  int iterations = grid + brent.iterations;
  bool converged = brent.converged;

  // The log-likelihood is flat to ~eps near its maximum, which caps how
  // well the argmax can be located from function values. Polish on the
  // analytic score, whose zero is well conditioned.
  auto score = [&](double t) { return profile_score(stats, std::exp(t)); };
  const double s_a = score(a), s_b = score(b);
  if (s_a > 0.0 && s_b < 0.0) {
    auto root = optimize::find_root(score, a, b, 1e-14, options.max_iter);
    iterations += root.iterations;
    const double ll_root = loglik_at(root.x);
    if (root.converged && ll_root >= ll_hat - 1e-12 * std::abs(ll_hat)) {
      t_hat = root.x;
      ll_hat = ll_root;
    }
  }

  double lambda = std::exp(t_hat);
  const double ll_zero = profile(stats, 0.0).loglik;
  if (ll_zero >= ll_hat) {
    lambda = 0.0;
  } else if (hi - t_hat <= 10 * options.brent_tol) {
    converged = false;  // pinned at the upper bound
  }

  LmmFit f = finish(std::move(layout), std::move(stats), lambda, converged, iterations);
  if (!f.converged) {
    throw ConvergenceError("fit: profile optimization for '" + formula.name + "' did not converge", std::move(f));
  }
  return f;
}

LmmFit fit(const similarity::AnalysisDataset& data, const ModelFormula& formula, const FitOptions& options) {
  const auto blocks = blocks_from(data);
  return fit(blocks, formula, options);
}

double log_likelihood(const LmmFit& fit) { return profile(fit.stats, fit.lambda).loglik; }

// ---------------------------------------------------------------------------
// inference

double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::numbers::sqrt2); }

double chi2_upper_p(double chi2, int df) {
  if (df <= 0) return 1.0;
  if (chi2 <= 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * df, 0.5 * chi2);
}

LrtResult lrt(const LmmFit& full, const LmmFit& reduced) {
  if (!(full.stats.signature == reduced.stats.signature)) {
    throw DatasetError("lrt: fits were made on different datasets");
  }
  for (std::size_t g = 0; g < full.stats.groups.size(); ++g) {
    if (full.stats.groups[g].label != reduced.stats.groups[g].label) {
      throw DatasetError("lrt: fits use different grouping levels");
    }
  }
  if (full.layout.formula.random_intercept != reduced.layout.formula.random_intercept) {
    throw NestingError("lrt: fits use different random-effect structures");
  }
  const auto& fc = full.columns();
  for (const auto& col : reduced.columns()) {
    if (std::find(fc.begin(), fc.end(), col) == fc.end()) {
      throw NestingError("lrt: column '" + col + "' of '" + reduced.layout.formula.name +
                         "' is not in '" + full.layout.formula.name + "'");
    }
  }
  LrtResult r;
  r.full_loglik = full.loglik;
  r.reduced_loglik = reduced.loglik;
  r.df = static_cast<int>(full.p - reduced.p);
  r.chi2 = std::max(0.0, 2.0 * (full.loglik - reduced.loglik));
  r.p_value = chi2_upper_p(r.chi2, r.df);
  return r;
}

ContrastResult linear_contrast(const LmmFit& fit, std::string label, const Eigen::VectorXd& weights) {
  if (weights.size() != fit.beta.size()) {
    throw SpecificationError("contrast '" + label + "' has " + std::to_string(weights.size()) +
                             " weights for " + std::to_string(fit.beta.size()) + " coefficients");
  }
  if (weights.isZero(0.0)) throw SpecificationError("contrast '" + label + "' is the zero vector");
  ContrastResult c;
  c.label = std::move(label);
  c.contrast_vector = weights;
  c.estimate = weights.dot(fit.beta);
  c.se = std::sqrt(weights.dot(fit.cov_beta * weights));
  c.z = c.estimate / c.se;
  c.p_value = normal_two_sided_p(c.z);
  return c;
}

std::vector<ContrastResult> gender_within_race(const LmmFit& fit) {
  const auto& f = fit.layout.formula;
  if (!f.gender && !f.race_gender) {
    throw SpecificationError("contrast women - men needs a gender term in '" + f.name + "'");
  }
  std::vector<ContrastResult> out;
  for (Race r : fit.layout.races) {
    const Eigen::VectorXd w = fit.layout.row(r, Gender::kWoman) - fit.layout.row(r, Gender::kMan);
    auto c = linear_contrast(fit, "women - men | " + std::string(to_string(r)), w);
    c.race = r;
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace hbias::lmm
