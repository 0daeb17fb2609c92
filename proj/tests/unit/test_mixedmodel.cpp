#include <gtest/gtest.h>

#include <cmath>

#include "hbias/mixedmodel.hpp"
#include "support/oracles.hpp"
#include "support/simulate.hpp"

namespace hbias::lmm {
namespace {

using hbias::testing::DenseOracle;
using hbias::testing::near_rel;
using hbias::testing::SimData;
using hbias::testing::SimDesign;

SimDesign study_like(std::uint64_t seed, std::size_t per_cell = 6) {
  SimDesign d;
  d.per_cell = per_cell;
  d.mean = [](Race r, Gender g) {
    const double race[] = {-0.2 + 0.33, -0.2 + 0.31, -0.2 + 0.18, -0.2};
    return race[static_cast<int>(r)] + (g == Gender::kWoman ? 0.1 : 0.0) +
           (r == Race::kAsian && g == Gender::kWoman ? -0.15 : 0.0);
  };
  d.tau = 0.5;
  d.sigma = 0.83;
  d.seed = seed;
  return d;
}

// Truncates block k to a seed-dependent length so groups are unbalanced.
std::vector<ResponseBlock> unbalance(const SimData& s) {
  auto blocks = s.blocks;
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const std::size_t keep = 1 + (k * 7 + 3) % blocks[k].y.size();
    blocks[k].y = blocks[k].y.first(keep);
  }
  return blocks;
}

void expect_matches_oracle(std::span<const ResponseBlock> blocks, const ModelFormula& formula, double tol) {
  const auto f = fit(blocks, formula);
  ASSERT_TRUE(f.converged);
  const auto problem = hbias::testing::dense_problem(blocks, f.layout);
  const auto ref = DenseOracle(problem).fit();
  for (Eigen::Index k = 0; k < ref.beta.size(); ++k) {
    EXPECT_TRUE(near_rel(f.beta(k), ref.beta(k), tol)) << f.columns()[k] << ": " << f.beta(k) << " vs " << ref.beta(k);
    EXPECT_TRUE(near_rel(f.cov_beta(k, k), ref.cov_beta(k, k), tol));
  }
  EXPECT_TRUE(near_rel(f.sigma2_resid, ref.sigma2, tol)) << f.sigma2_resid << " vs " << ref.sigma2;
  EXPECT_TRUE(near_rel(f.sigma2_group, ref.tau2, tol)) << f.sigma2_group << " vs " << ref.tau2;
  EXPECT_TRUE(near_rel(f.loglik, ref.loglik, tol)) << f.loglik << " vs " << ref.loglik;
  const double dense = hbias::testing::dense_marginal_loglik(problem, f.beta, f.sigma2_resid, f.sigma2_group);
  EXPECT_TRUE(near_rel(f.loglik, dense, tol)) << f.loglik << " vs dense " << dense;
}

TEST(Formula, CanonicalModelsAndTermDeletion) {
  const auto inter = ModelFormula::interaction_model();
  EXPECT_TRUE(inter.has(Term::kRaceGender));
  EXPECT_THROW(inter.without(Term::kRace), SpecificationError);  // treatment coding
  auto sum = inter;
  sum.coding = Coding::kSum;
  EXPECT_FALSE(sum.without(Term::kRace).has(Term::kRace));
  EXPECT_THROW(sum.without(Term::kIntercept), SpecificationError);
  EXPECT_THROW(ModelFormula::race_model().without(Term::kGender), SpecificationError);
  ModelFormula bad = ModelFormula::race_model();
  bad.random_intercept.clear();
  EXPECT_THROW(bad.validate(), SpecificationError);
}

TEST(Layout, ColumnsFollowReferenceLevels) {
  const auto s = simulate(study_like(1, 2));
  const auto l = make_layout(ModelFormula::interaction_model(), s.blocks);
  const std::vector<std::string> expect = {"(Intercept)",
                                           "race[African]",
                                           "race[Asian]",
                                           "race[Hispanic]",
                                           "gender[woman]",
                                           "race[African]:gender[woman]",
                                           "race[Asian]:gender[woman]",
                                           "race[Hispanic]:gender[woman]"};
  EXPECT_EQ(l.columns, expect);
  EXPECT_EQ(l.row(Race::kWhite, Gender::kMan), (Eigen::VectorXd::Unit(8, 0)));

  SimDesign no_white = study_like(1, 2);
  no_white.races = {Race::kAfrican, Race::kAsian};
  const auto nw = simulate(no_white);
  EXPECT_THROW(make_layout(ModelFormula::race_model(), nw.blocks), DesignError);
  SimDesign one_gender = study_like(1, 2);
  one_gender.genders = {Gender::kWoman};
  const auto og = simulate(one_gender);
  EXPECT_THROW(make_layout(ModelFormula::gender_model(), og.blocks), DesignError);
}

TEST(Fit, ReducesToOlsWithoutBetweenGroupVariation) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SimDesign d = study_like(seed, 4);
    d.tau = 0.0;
    d.center_noise_within_group = true;
    const auto s = simulate(d);
    const auto f = fit(s.blocks, ModelFormula::race_gender_model());
    const auto p = hbias::testing::dense_problem(s.blocks, f.layout);
    const auto beta = hbias::testing::ols(p.x, p.y);
    EXPECT_EQ(f.lambda, 0.0);
    EXPECT_EQ(f.sigma2_group, 0.0);
    for (Eigen::Index k = 0; k < beta.size(); ++k) EXPECT_TRUE(near_rel(f.beta(k), beta(k), 1e-10));
    EXPECT_TRUE(near_rel(f.loglik, hbias::testing::ols_loglik(p.x, p.y), 1e-10));
    const double rss = (p.y - p.x * beta).squaredNorm();
    EXPECT_TRUE(near_rel(f.sigma2_resid, rss / static_cast<double>(p.y.size()), 1e-10));
  }
}

TEST(Fit, MatchesDenseOracleBalanced) {
  const auto s = simulate(study_like(3));
  for (const auto& formula : {ModelFormula::race_model(), ModelFormula::gender_model(),
                              ModelFormula::race_gender_model(), ModelFormula::interaction_model()}) {
    SCOPED_TRACE(formula.name);
    expect_matches_oracle(s.blocks, formula, 1e-8);
  }
}

TEST(Fit, MatchesDenseOracleUnbalancedAndSumCoded) {
  const auto s = simulate(study_like(8, 9));
  const auto blocks = unbalance(s);
  auto sum = ModelFormula::interaction_model();
  sum.coding = Coding::kSum;
  expect_matches_oracle(blocks, ModelFormula::interaction_model(), 1e-8);
  expect_matches_oracle(blocks, sum, 1e-8);
  expect_matches_oracle(blocks, sum.without(Term::kRace), 1e-8);
}

TEST(Fit, MaximumBeatsBoundaryAndScoreVanishes) {
  const auto s = simulate(study_like(5));
  const auto f = fit(s.blocks, ModelFormula::interaction_model());
  EXPECT_GT(f.lambda, 0.0);
  EXPECT_GE(log_likelihood(f), profile(f.stats, 0.0).loglik);
  EXPECT_NEAR(log_likelihood(f), f.loglik, 1e-9);
  EXPECT_NEAR(profile_score(f.stats, f.lambda), 0.0, 1e-6);
}

TEST(Profile, ScoreIsTheLogLambdaDerivative) {
  const auto s = simulate(study_like(6));
  const auto layout = make_layout(ModelFormula::race_model(), s.blocks);
  const auto stats = accumulate(s.blocks, layout);
  for (double lambda : {0.01, 0.3, 2.0, 40.0}) {
    const double h = 1e-5;
    const double num = (profile(stats, lambda * std::exp(h)).loglik - profile(stats, lambda * std::exp(-h)).loglik) / (2 * h);
    EXPECT_NEAR(profile_score(stats, lambda), num, 1e-5 * std::max(1.0, std::abs(num)));
  }
}

TEST(Accumulate, SerialEqualsParallel) {
  const auto s = simulate(study_like(2));
  const auto layout = make_layout(ModelFormula::interaction_model(), s.blocks);
  const auto a = accumulate(s.blocks, layout, similarity::Execution::kSerial);
  const auto b = accumulate(s.blocks, layout, similarity::Execution::kParallel);
  ASSERT_EQ(a.groups.size(), 13U);
  EXPECT_EQ(a.signature, b.signature);
  for (std::size_t g = 0; g < a.groups.size(); ++g) {
    EXPECT_EQ(a.groups[g].label, b.groups[g].label);
    EXPECT_EQ(a.groups[g].xtx, b.groups[g].xtx);
    EXPECT_EQ(a.groups[g].xty, b.groups[g].xty);
    EXPECT_EQ(a.groups[g].yty, b.groups[g].yty);
  }
}

TEST(Fit, ScaleEquivariance) {
  const auto s = simulate(study_like(4));
  const double c = 3.5;
  std::vector<std::vector<double>> scaled = s.ys;
  for (auto& v : scaled)
    for (auto& y : v) y *= c;
  auto blocks = s.blocks;
  for (std::size_t k = 0; k < blocks.size(); ++k) blocks[k].y = scaled[k];
  const auto f1 = fit(s.blocks, ModelFormula::race_gender_model());
  const auto f2 = fit(blocks, ModelFormula::race_gender_model());
  for (Eigen::Index k = 0; k < f1.beta.size(); ++k) EXPECT_TRUE(near_rel(f2.beta(k), c * f1.beta(k), 1e-8));
  EXPECT_TRUE(near_rel(f2.sigma2_resid, c * c * f1.sigma2_resid, 1e-8));
  EXPECT_TRUE(near_rel(f2.sigma2_group, c * c * f1.sigma2_group, 1e-7));
  EXPECT_TRUE(near_rel(f2.loglik, f1.loglik - static_cast<double>(f1.n_obs) * std::log(c), 1e-9));
}

TEST(Fit, NestedModelsHaveOrderedLikelihoods) {
  const auto s = simulate(study_like(7));
  const double race = fit(s.blocks, ModelFormula::race_model()).loglik;
  const double both = fit(s.blocks, ModelFormula::race_gender_model()).loglik;
  const double inter = fit(s.blocks, ModelFormula::interaction_model()).loglik;
  EXPECT_GE(both, race - 1e-9);
  EXPECT_GE(inter, both - 1e-9);
}

TEST(Fit, TooFewGroupsIsADesignError) {
  SimDesign d = study_like(1, 3);
  d.groups = 1;
  const auto s = simulate(d);
  EXPECT_THROW(fit(s.blocks, ModelFormula::race_model()), DesignError);
}

TEST(Lrt, IdenticalModelsGiveZero) {
  const auto s = simulate(study_like(9));
  const auto f = fit(s.blocks, ModelFormula::race_gender_model());
  const auto r = lrt(f, f);
  EXPECT_EQ(r.chi2, 0.0);
  EXPECT_EQ(r.df, 0);
  EXPECT_EQ(r.p_value, 1.0);
}

TEST(Lrt, TermDeletionDegreesOfFreedom) {
  const auto s = simulate(study_like(10));
  auto full = ModelFormula::interaction_model();
  full.coding = Coding::kSum;
  const auto ff = fit(s.blocks, full);
  const auto race = lrt(ff, fit(s.blocks, full.without(Term::kRace)));
  const auto gender = lrt(ff, fit(s.blocks, full.without(Term::kGender)));
  const auto inter = lrt(ff, fit(s.blocks, full.without(Term::kRaceGender)));
  EXPECT_EQ(race.df, 3);
  EXPECT_EQ(gender.df, 1);
  EXPECT_EQ(inter.df, 3);
  for (const auto& r : {race, gender, inter}) {
    EXPECT_GE(r.chi2, 0.0);
    EXPECT_NEAR(r.chi2, 2 * (r.full_loglik - r.reduced_loglik), 1e-12);
    EXPECT_NEAR(r.p_value, chi2_upper_p(r.chi2, r.df), 1e-15);
  }
}

TEST(Lrt, RefusesMismatchedFits) {
  const auto s = simulate(study_like(11));
  const auto t = simulate(study_like(12));
  const auto race = fit(s.blocks, ModelFormula::race_model());
  const auto gender = fit(s.blocks, ModelFormula::gender_model());
  EXPECT_THROW(lrt(race, gender), NestingError);
  EXPECT_THROW(lrt(fit(t.blocks, ModelFormula::race_gender_model()), race), DatasetError);
}

TEST(Pvalues, KnownValues) {
  EXPECT_NEAR(normal_two_sided_p(1.959963984540054), 0.05, 1e-12);
  EXPECT_NEAR(chi2_upper_p(3.841458820694124, 1), 0.05, 1e-12);
  EXPECT_NEAR(chi2_upper_p(7.814727903251178, 3), 0.05, 1e-12);
  EXPECT_EQ(chi2_upper_p(0.0, 3), 1.0);
}

TEST(Contrasts, WithoutInteractionAllRacesShareTheGenderEffect) {
  const auto s = simulate(study_like(13));
  const auto f = fit(s.blocks, ModelFormula::race_gender_model());
  const auto cs = gender_within_race(f);
  ASSERT_EQ(cs.size(), 4U);
  const std::size_t g = 4;
  ASSERT_EQ(f.columns()[g], "gender[woman]");
  for (const auto& c : cs) {
    EXPECT_NEAR(c.estimate, f.beta(g), 1e-14);
    EXPECT_NEAR(c.se, f.se(g), 1e-14);
  }
  EXPECT_THROW(gender_within_race(fit(s.blocks, ModelFormula::race_model())), SpecificationError);
}

TEST(Contrasts, InteractionModelAgainstDenseGls) {
  SimDesign d = study_like(14, 8);
  d.races = {Race::kAfrican, Race::kWhite};
  d.groups = 6;
  const auto s = simulate(d);
  const auto f = fit(s.blocks, ModelFormula::interaction_model());
  ASSERT_EQ(f.columns().size(), 4U);
  const auto ref = DenseOracle(hbias::testing::dense_problem(s.blocks, f.layout)).fit();
  const auto cs = gender_within_race(f);
  ASSERT_EQ(cs.size(), 2U);
  EXPECT_EQ(cs[0].race, Race::kAfrican);
  EXPECT_EQ(cs[1].race, Race::kWhite);
  const Eigen::Vector4d african(0, 0, 1, 1), white(0, 0, 1, 0);
  EXPECT_TRUE(near_rel(cs[0].estimate, african.dot(ref.beta), 1e-8));
  EXPECT_TRUE(near_rel(cs[0].se, std::sqrt(african.dot(ref.cov_beta * african)), 1e-8));
  EXPECT_TRUE(near_rel(cs[1].estimate, white.dot(ref.beta), 1e-8));
  // White is the reference level: its contrast is the gender coefficient itself.
  EXPECT_EQ(cs[1].estimate, f.beta(2));
  EXPECT_NEAR(cs[1].p_value, normal_two_sided_p(cs[1].estimate / cs[1].se), 1e-15);
}

TEST(Contrasts, LinearContrastValidation) {
  const auto s = simulate(study_like(15, 3));
  const auto f = fit(s.blocks, ModelFormula::race_model());
  EXPECT_THROW(linear_contrast(f, "zero", Eigen::VectorXd::Zero(4)), SpecificationError);
  EXPECT_THROW(linear_contrast(f, "short", Eigen::VectorXd::Ones(3)), SpecificationError);
  const auto c = linear_contrast(f, "intercept", Eigen::VectorXd::Unit(4, 0));
  EXPECT_EQ(c.estimate, f.beta(0));
  EXPECT_NEAR(c.z, f.beta(0) / f.se(0), 1e-14);
}

TEST(Blocks, UnstandardizedDatasetIsRejected) {
  similarity::AnalysisDataset data;
  similarity::CellSimilarity c;
  c.info = {"story__African__man", TextFormat::kStory, Race::kAfrican, Gender::kMan};
  c.n = 2;
  c.cos = {0.5};
  data.cells.push_back(c);
  EXPECT_THROW(blocks_from(data), DatasetError);
}

}  // namespace
}  // namespace hbias::lmm
