#include <cmath>
#include <cstdio>
#include <fstream>

#include <gtest/gtest.h>

#include "conjugacy.hpp"
#include "geweke.hpp"
#include "msd/chain.hpp"

using namespace msd;
using namespace msd::testing;

namespace {

Schema two_continuous() {
  Schema s;
  s.responses = {continuous("y1"), continuous("y2")};
  return s;
}

ModelConfig scalar_config(int H) {
  ModelConfig c = tiny_config(H, 2);
  c.factor_dim = 1;
  c.time_effect_dim = 1;
  c.factor_time_dim = 1;
  c.sigma2_scales = {1.0, 1.0};
  return c;
}

/// All latent means zero: no factors, no time effects, zero loadings.
void zero_out(ChainState& st) {
  for (auto& c : st.components) {
    c.B.setZero();
    c.Omega.setZero();
    c.Lambda.setZero();
    c.V.setZero();
  }
  st.time.mu.setZero();
  for (auto& x : st.time.xi) x.setZero();
  for (auto& s : st.subjects) {
    s.eta_star = 0.0;
    s.eta_tilde.setZero();
  }
}

struct Owned {
  PanelDataset ds;
  std::optional<GibbsSampler> g;
};

std::unique_ptr<Owned> sampler_for(PanelDataset ds, const ModelConfig& cfg, std::uint64_t seed) {
  auto o = std::make_unique<Owned>();
  o->ds = std::move(ds);
  Rng rng(seed);
  o->g.emplace(o->ds, cfg, rng);
  return o;
}

std::vector<double> normalise_log(std::vector<double> lp) {
  const double m = *std::max_element(lp.begin(), lp.end());
  double s = 0.0;
  for (auto& v : lp) s += (v = std::exp(v - m));
  for (auto& v : lp) v /= s;
  return lp;
}

/// Direct-space allocation probabilities from the loop oracle.
std::vector<double> direct_allocation(const GibbsSampler& g, std::size_t i) {
  const auto& st = g.state();
  const auto& s = st.subjects[i];
  std::vector<double> w;
  for (int h = 0; h < g.context().H; ++h) {
    const auto& c = st.components[static_cast<std::size_t>(h)];
    double v = st.sticks.pi[h];
    for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
      const int t = g.time_index(i, j);
      const VectorXd m = naive_mean(c, s.x, st.time.mu.row(t).transpose(), st.time.xi[static_cast<std::size_t>(t)], s.eta_star, s.eta_tilde);
      for (Eigen::Index k = 0; k < m.size(); ++k) {
        const double r = s.ystar(k, j) - m[k];
        v *= std::exp(-0.5 * r * r / c.sigma2[k]) / std::sqrt(2.0 * std::numbers::pi * c.sigma2[k]);
      }
    }
    for (std::size_t l = 0; l < s.covariates.size(); ++l) v *= c.theta_x[l][s.covariates[l]];
    w.push_back(v);
  }
  double sum = 0.0;
  for (double v : w) sum += v;
  for (auto& v : w) v /= sum;
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// Oracle suites

TEST(ConjugacyOracle, EveryFullConditionalMatches) {
  const auto rep = run_conjugacy_suite(2024, 20000);
  EXPECT_GT(rep.parameter_checks.size(), 50u);
  for (const auto& c : rep.parameter_checks) EXPECT_TRUE(c.pass) << c.name << ": " << c.detail;
  for (const auto& c : rep.monte_carlo_checks) EXPECT_TRUE(c.pass) << c.name << ": " << c.detail;
  RecordProperty("worst_parameter_error", fmt(rep.worst_parameter_error));
  RecordProperty("worst_z", fmt(rep.worst_z));
}

TEST(JointDistribution, GewekeMomentsAgree) {
  for (const auto& m : run_geweke(20000, 31)) {
    EXPECT_LT(std::abs(m.z()), 4.0) << m.name << " marginal " << m.marginal_mean << " successive " << m.successive_mean << " se " << m.se;
  }
}

// ---------------------------------------------------------------------------
// Steps 1-2

TEST(Sticks, ConditionalExamples) {
  Rng rng(1);
  auto o = sampler_for(tiny_panel(two_continuous(), 5, {1}, rng), scalar_config(3), 2);
  auto& g = *o->g;
  for (auto& s : g.state().subjects) s.component = 0;
  g.state().sticks.alpha = 0.7;
  EXPECT_DOUBLE_EQ(g.stick_conditional(0).a, 6.0);
  EXPECT_DOUBLE_EQ(g.stick_conditional(0).b, 0.7);
  EXPECT_DOUBLE_EQ(g.stick_conditional(1).a, 1.0);
  EXPECT_DOUBLE_EQ(g.stick_conditional(1).b, 0.7);

  auto big = sampler_for(tiny_panel(two_continuous(), 2, {1}, rng), scalar_config(60), 3);
  EXPECT_DOUBLE_EQ(big->g->alpha_conditional().shape, 0.25 + 59.0);
}

// ---------------------------------------------------------------------------
// Step 3

TEST(Allocations, SingleComponent) {
  Rng rng(4);
  auto o = sampler_for(tiny_panel(two_continuous(), 10, {1, 2}, rng), scalar_config(1), 5);
  for (int s = 0; s < 20; ++s) {
    o->g->sweep(rng);
    for (auto c : o->g->allocations()) ASSERT_EQ(c, 0);
  }
}

TEST(Allocations, IdenticalComponentsSplitEvenly) {
  Rng rng(5);
  auto o = sampler_for(tiny_panel(two_continuous(), 1, {1, 2}, rng), scalar_config(2), 6);
  auto& st = o->g->state();
  st.components[1] = st.components[0];
  st.sticks.v[0] = 0.5;
  st.sticks.set_from_v();
  st.sticks.pi = stick_to_weights(st.sticks.v);
  const int N = 10000;
  int ones = 0;
  for (int r = 0; r < N; ++r) {
    o->g->update_allocations(rng);
    ones += o->g->state().subjects[0].component;
  }
  EXPECT_NEAR(ones / double(N), 0.5, 3.0 * std::sqrt(0.25 / N));
}

TEST(Allocations, LogSpaceMatchesDirectSpace) {
  auto fx = conjugacy_fixture(17);
  const auto& g = *fx->g;
  for (std::size_t i = 0; i < g.state().subjects.size(); ++i) {
    const auto a = normalise_log(g.allocation_log_probs(i));
    const auto b = direct_allocation(g, i);
    for (std::size_t h = 0; h < a.size(); ++h) EXPECT_NEAR(a[h], b[h], 1e-12);
  }
}

TEST(Allocations, CachedUpdateDrawsFromExposedConditional) {
  auto fx = conjugacy_fixture(18);
  for (int rep = 0; rep < 50; ++rep) {
    GibbsSampler a = *fx->g;
    Rng r1(100 + rep), r2(100 + rep);
    std::vector<int> expected;
    for (std::size_t i = 0; i < a.state().subjects.size(); ++i) expected.push_back(static_cast<int>(r2.categorical_log(a.allocation_log_probs(i))));
    a.update_allocations(r1);
    EXPECT_EQ(a.allocations(), expected);
  }
}

TEST(Allocations, VanishingProbabilitiesAbort) {
  Rng rng(6);
  auto o = sampler_for(tiny_panel(two_continuous(), 3, {1}, rng), scalar_config(2), 7);
  o->g->state().sticks.pi.setConstant(0.0);
  EXPECT_THROW(o->g->update_allocations(rng), NumericalError);
}

// ---------------------------------------------------------------------------
// Step 4

TEST(Variances, EmptyComponentAndZeroResiduals) {
  Rng rng(7);
  auto o = sampler_for(tiny_panel(two_continuous(), 4, {1, 2, 3}, rng), scalar_config(2), 8);
  auto& g = *o->g;
  zero_out(g.state());
  for (auto& s : g.state().subjects) {
    s.component = 0;
    s.ystar.setZero();
  }
  const auto empty = g.variance_conditional(1, 0);
  EXPECT_DOUBLE_EQ(empty.shape, 2.0);
  EXPECT_DOUBLE_EQ(empty.scale, 1.0);
  const auto full = g.variance_conditional(0, 1);
  EXPECT_DOUBLE_EQ(full.shape, 2.0 + 12.0 / 2.0);
  EXPECT_DOUBLE_EQ(full.scale, 1.0);
}

TEST(Variances, PosteriorMeanOverDraws) {
  auto fx = conjugacy_fixture(19);
  const auto n = fx->g->counts();
  const int h = static_cast<int>(std::max_element(n.begin(), n.end()) - n.begin());
  const auto prm = fx->g->variance_conditional(h, 0);
  ASSERT_GT(prm.shape, 3.0);
  const double m = prm.scale / (prm.shape - 1.0);
  const double sd = m / std::sqrt(prm.shape - 2.0);
  Rng rng(20);
  std::vector<double> d;
  for (int r = 0; r < 100000; ++r) {
    GibbsSampler c = *fx->g;
    c.update_variances(rng);
    d.push_back(c.state().components[static_cast<std::size_t>(h)].sigma2[0]);
  }
  EXPECT_NEAR(mean(d), m, 3.0 * sd / std::sqrt(d.size()));
}

// ---------------------------------------------------------------------------
// Step 5

TEST(LoadingRows, ScalarHandConjugacy) {
  PanelDataset ds;
  ds.schema = two_continuous();
  SubjectRecord s{"a", 1.0, {}, {Observation{1.0, 0, {2.0, 0.0}, {0, 0}}}};
  ds.subjects.push_back(s);
  ds.finalize();
  auto o = sampler_for(ds, scalar_config(1), 9);
  auto& g = *o->g;
  zero_out(g.state());
  g.state().components[0].sigma2.setOnes();
  g.state().shrinkage.delta2.setOnes();
  const auto c = g.loading_row_conditional(0, 0);
  // z = (1, 0, 0): only the intercept coefficient learns
  EXPECT_NEAR(c.mean[0], 1.0, 1e-12);
  EXPECT_NEAR(c.covariance()(0, 0), 0.5, 1e-12);
  EXPECT_NEAR(c.covariance()(1, 1), 1.0, 1e-12);
  EXPECT_NEAR(c.mean[1], 0.0, 1e-12);
}

TEST(LoadingRows, EmptyComponentIsPriorAndPrecisionReplicates) {
  auto fx = conjugacy_fixture(21);
  auto& g = *fx->g;
  int empty = -1;
  const auto n = g.counts();
  for (int h = 0; h < g.context().H; ++h) {
    if (n[static_cast<std::size_t>(h)] == 0) empty = h;
  }
  if (empty < 0) {
    for (auto& s : g.state().subjects) s.component = 0;
    empty = 2;
  }
  const auto c = g.loading_row_conditional(empty, 1);
  EXPECT_LT(c.mean.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(max_abs_diff(c.covariance(), MatrixXd(g.state().shrinkage.delta2.row(1).transpose().asDiagonal())), 1e-10);

  // duplicating every subject doubles the data part of the precision
  PanelDataset twice = fx->ds;
  for (auto s : fx->ds.subjects) {
    s.id += "_copy";
    twice.subjects.push_back(s);
  }
  twice.finalize();
  ChainState st = g.state();
  const auto copy = st.subjects;
  st.subjects.insert(st.subjects.end(), copy.begin(), copy.end());
  GibbsSampler g2(make_context(twice, g.context().config), st);
  for (int h = 0; h < g.context().H; ++h) {
    const MatrixXd prior = MatrixXd(g.state().shrinkage.delta2.row(0).transpose().cwiseInverse().asDiagonal());
    const MatrixXd p1 = g.loading_row_conditional(h, 0).covariance().inverse() - prior;
    const MatrixXd p2 = g2.loading_row_conditional(h, 0).covariance().inverse() - prior;
    EXPECT_LT(scaled_error(p2, 2.0 * p1), 1e-8);
  }
}

// ---------------------------------------------------------------------------
// Steps 6-7

TEST(SubjectFactors, NoLoadingsGivesPrior) {
  auto fx = conjugacy_fixture(22);
  auto& g = *fx->g;
  for (auto& c : g.state().components) c.Lambda.setZero();
  const auto e = g.eta_star_conditional(0);
  EXPECT_NEAR(e.mean[0], 0.0, 1e-14);
  EXPECT_NEAR(e.covariance()(0, 0), 1.0, 1e-14);
  const auto t = g.eta_tilde_conditional(1);
  EXPECT_LT(max_abs_diff(t.covariance(), MatrixXd::Identity(t.mean.size(), t.mean.size())), 1e-14);
}

TEST(SubjectFactors, BruteForceVarianceFormula) {
  auto fx = conjugacy_fixture(23);
  const auto& g = *fx->g;
  const auto& s = g.state().subjects[2];
  const auto& c = g.state().components[static_cast<std::size_t>(s.component)];
  const VectorXd a = c.Lambda * (c.V * s.x);
  double q = 0.0;
  for (Eigen::Index k = 0; k < a.size(); ++k) q += a[k] * a[k] / c.sigma2[k];
  const double expected = 1.0 / (static_cast<double>(s.ystar.cols()) * q + 1.0);
  EXPECT_NEAR(g.eta_star_conditional(2).covariance()(0, 0), expected, 1e-10);
}

TEST(SubjectFactors, HugeNoiseApproachesPrior) {
  auto fx = conjugacy_fixture(24);
  auto& g = *fx->g;
  for (auto& c : g.state().components) c.sigma2.setConstant(1e12);
  const auto e = g.eta_star_conditional(0);
  EXPECT_NEAR(e.covariance()(0, 0), 1.0, 1e-6);
  EXPECT_NEAR(e.mean[0], 0.0, 1e-4);
}

// ---------------------------------------------------------------------------
// Steps 8-9

TEST(Kappa, SingleGridPoint) {
  auto fx = conjugacy_fixture(25);
  ModelConfig cfg = fx->g->context().config;
  cfg.kappa_grid = {0.5};
  ChainState st = fx->g->state();
  st.time.kappa_mu_index = st.time.kappa_xi_index = 0;
  GibbsSampler g(make_context(fx->ds, cfg), st);
  Rng rng(1);
  for (int r = 0; r < 10; ++r) {
    g.update_kappas(rng);
    EXPECT_EQ(g.state().time.kappa_mu_index, 0);
    EXPECT_EQ(g.state().time.kappa_xi_index, 0);
  }
}

TEST(Kappa, SingleTimePointGivesUniformMasses) {
  Rng rng(26);
  auto o = sampler_for(tiny_panel(two_continuous(), 3, {2.0}, rng), scalar_config(2), 27);
  const auto p = normalise_log(o->g->kappa_mu_log_masses());
  for (double v : p) EXPECT_NEAR(v, 1.0 / p.size(), 1e-12);
  const auto x = normalise_log(o->g->kappa_xi_log_masses());
  for (double v : x) EXPECT_NEAR(v, 1.0 / x.size(), 1e-12);
}

TEST(Kappa, MassesMatchDenseGpDensities) {
  auto fx = conjugacy_fixture(28);
  const auto& g = *fx->g;
  std::vector<double> lm;
  for (std::size_t k = 0; k < g.context().config.kappa_grid.size(); ++k) {
    const MatrixXd K = gp_prior(g, static_cast<int>(k));
    Eigen::LLT<MatrixXd> llt(K);
    const double logdet = 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    double v = 0.0;
    for (int q = 0; q < g.context().Qmu; ++q) {
      const VectorXd f = g.state().time.mu.col(q);
      v += -0.5 * (logdet + f.dot(llt.solve(f)));
    }
    lm.push_back(v);
  }
  const auto a = normalise_log(g.kappa_mu_log_masses()), b = normalise_log(lm);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-10);
}

TEST(Kappa, ConcentratesNearGeneratingValue) {
  std::vector<double> times;
  for (int t = 0; t < 40; ++t) times.push_back(0.5 * t);
  Rng rng(29);
  ModelConfig cfg = scalar_config(2);
  cfg.kappa_grid = default_kappa_grid(25);
  cfg.time_effect_dim = 1;
  auto o = sampler_for(tiny_panel(two_continuous(), 2, times, rng), cfg, 30);
  auto& g = *o->g;
  std::vector<int> hist(25, 0);
  for (int r = 0; r < 200; ++r) {
    g.state().time.mu.col(0) = draw_gp(g.context().gp, 9, rng);
    g.update_kappas(rng);
    ++hist[static_cast<std::size_t>(g.state().time.kappa_mu_index)];
  }
  const int mode = static_cast<int>(std::max_element(hist.begin(), hist.end()) - hist.begin());
  EXPECT_GE(mode, 7);
  EXPECT_LE(mode, 11);
}

// ---------------------------------------------------------------------------
// Step 10

TEST(VColumns, NoInformationGivesPrior) {
  auto fx = conjugacy_fixture(31);
  auto& g = *fx->g;
  const int l = 1;  // binary covariate x
  for (auto& s : g.state().subjects) {
    s.covariates[0] = 0;
    s.x = g.context().encoding.encode(s.covariates);
  }
  for (int h = 0; h < g.context().H; ++h) {
    const auto c = g.v_column_conditional(h, l);
    EXPECT_LT(c.mean.cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT(max_abs_diff(c.covariance(), MatrixXd(g.state().shrinkage.zeta2.col(l).asDiagonal())), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Steps 11-12

TEST(TimeEffects, NoInformationGivesGpPrior) {
  auto fx = conjugacy_fixture(32);
  auto& g = *fx->g;
  for (auto& c : g.state().components) c.Omega.col(0).setZero();
  const auto c = g.mu_column_conditional(0);
  EXPECT_LT(c.mean.cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT(max_abs_diff(c.covariance(), gp_prior(g, g.state().time.kappa_mu_index)), 1e-12);
}

TEST(TimeEffects, StrongDataAtSingleTime) {
  Rng rng(33);
  auto o = sampler_for(tiny_panel(two_continuous(), 4, {1.0}, rng), scalar_config(1), 34);
  auto& g = *o->g;
  auto& st = g.state();
  auto& c = st.components[0];
  c.sigma2.setConstant(1e-9);
  const auto post = g.mu_column_conditional(0);
  // b_1 / a_1 with residuals measured against mu = 0
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < st.subjects.size(); ++i) {
    const auto& s = st.subjects[i];
    const VectorXd w = c.Omega.col(0).cwiseQuotient(c.sigma2);
    const VectorXd m0 = c.B * s.x + c.Lambda * g.factor(i, 0, 0);
    a += w.dot(c.Omega.col(0));
    b += w.dot(s.ystar.col(0) - m0);
  }
  EXPECT_NEAR(post.mean[0], b / a, 1e-6 * (1.0 + std::abs(b / a)));
}

// ---------------------------------------------------------------------------
// Step 13

TEST(CovariateParams, CountsUpdateConcentration) {
  Schema s = two_continuous();
  s.covariates = {{"g", false, {"a", "b", "c"}}};
  Rng rng(35);
  auto o = sampler_for(tiny_panel(s, 4, {1}, rng), scalar_config(2), 36);
  auto& st = o->g->state();
  const std::vector<int> cats{0, 2, 0, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    st.subjects[i].covariates = {cats[i]};
    st.subjects[i].component = i < 3 ? 0 : 1;
  }
  EXPECT_EQ(o->g->covariate_conditional(0, 0), (std::vector<double>{3, 1, 2}));
  for (auto& sub : st.subjects) sub.component = 0;
  EXPECT_EQ(o->g->covariate_conditional(1, 0), (std::vector<double>{1, 1, 1}));
}

TEST(CovariateParams, PosteriorMeanOverDraws) {
  auto fx = conjugacy_fixture(37);
  const auto conc = fx->g->covariate_conditional(0, 1);
  double total = 0.0;
  for (double c : conc) total += c;
  Rng rng(38);
  std::vector<double> d;
  for (int r = 0; r < 20000; ++r) {
    GibbsSampler c = *fx->g;
    c.update_covariate_params(rng);
    d.push_back(c.state().components[0].theta_x[1][0]);
  }
  const double m = conc[0] / total;
  EXPECT_NEAR(mean(d), m, 3.0 * std::sqrt(m * (1 - m) / (total + 1) / d.size()));
}

// ---------------------------------------------------------------------------
// Steps 14-15

TEST(Imputation, FlatLikelihoodFollowsTheta) {
  Schema s = two_continuous();
  s.covariates = {{"g", false, {"a", "b", "c"}}};
  Rng rng(39);
  auto o = sampler_for(tiny_panel(s, 3, {1, 2}, rng, 0.0), scalar_config(1), 40);
  auto& g = *o->g;
  zero_out(g.state());
  g.state().components[0].theta_x[0] = Eigen::Vector3d(0.2, 0.5, 0.3);
  const auto p = normalise_log(g.covariate_imputation_log_probs(0, 0));
  EXPECT_NEAR(p[0], 0.2, 1e-12);
  EXPECT_NEAR(p[1], 0.5, 1e-12);
  EXPECT_NEAR(p[2], 0.3, 1e-12);
}

TEST(Imputation, SingleCategoryIsDeterministic) {
  Schema s = two_continuous();
  s.covariates = {{"k", false, {"only"}}};
  PanelDataset ds;
  ds.schema = s;
  ds.subjects.push_back({"a", 1.0, {-1}, {Observation{1.0, 0, {0.3, 0.1}, {0, 0}}}});
  ds.finalize();
  auto o = sampler_for(ds, scalar_config(1), 41);
  Rng rng(42);
  for (int r = 0; r < 10; ++r) {
    o->g->impute_missing(rng);
    EXPECT_EQ(o->g->state().subjects[0].covariates[0], 0);
  }
}

TEST(Imputation, CovariateProbabilitiesMatchOracle) {
  auto fx = conjugacy_fixture(43);
  auto& g = *fx->g;
  for (std::size_t i = 0; i < g.state().subjects.size(); ++i) {
    for (int l = 0; l < 2; ++l) {
      const auto a = normalise_log(g.covariate_imputation_log_probs(i, l));
      std::vector<double> lp;
      const auto& cov = g.context().covariates()[static_cast<std::size_t>(l)];
      for (int cat = 0; cat < cov.num_categories(); ++cat) {
        ChainState st = g.state();
        auto& s = st.subjects[i];
        s.covariates[static_cast<std::size_t>(l)] = cat;
        s.x = g.context().encoding.encode(s.covariates);
        const auto& c = st.components[static_cast<std::size_t>(s.component)];
        double v = std::log(c.theta_x[static_cast<std::size_t>(l)][cat]);
        for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
          const int t = g.time_index(i, j);
          const VectorXd m = naive_mean(c, s.x, st.time.mu.row(t).transpose(), st.time.xi[static_cast<std::size_t>(t)], s.eta_star, s.eta_tilde);
          v += latent_log_density(s.ystar.col(j), m, c.sigma2);
        }
        lp.push_back(v);
      }
      const auto b = normalise_log(lp);
      for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
    }
  }
}

TEST(Imputation, MissingBinaryFrequencyMatchesModel) {
  Schema s;
  s.responses = {continuous("y"), binary("b")};
  PanelDataset ds;
  ds.schema = s;
  ds.subjects.push_back({"a", 1.0, {}, {Observation{1.0, 0, {0.4, 0.0}, {0, 1}}}});
  ds.finalize();
  auto o = sampler_for(ds, scalar_config(1), 44);
  auto& g = *o->g;
  const VectorXd m = g.observation_mean(0, 0, 0);
  const double prob = 1.0 - normal_cdf(-m[1] / std::sqrt(g.state().components[0].sigma2[1]));
  Rng rng(45);
  const int N = 10000;
  int ones = 0;
  for (int r = 0; r < N; ++r) {
    g.impute_missing(rng);
    ones += static_cast<int>(g.state().subjects[0].responses(1, 0));
  }
  EXPECT_NEAR(ones / double(N), prob, 3.0 * std::sqrt(prob * (1 - prob) / N));
}

// ---------------------------------------------------------------------------
// Step 16

TEST(LatentResponses, ContinuousFixedAndAllCellsFeasible) {
  auto fx = conjugacy_fixture(46);
  auto& g = *fx->g;
  Rng rng(47);
  for (int r = 0; r < 2000; ++r) {
    g.update_latent_responses(rng);
    ASSERT_NO_THROW(g.check_invariants());
  }
  for (std::size_t i = 0; i < g.state().subjects.size(); ++i) {
    for (Eigen::Index j = 0; j < g.state().subjects[i].ystar.cols(); ++j) {
      const auto& o = fx->ds.subjects[i].observations[static_cast<std::size_t>(j)];
      if (!o.missing[0]) {
        EXPECT_EQ(g.state().subjects[i].ystar(0, j), o.values[0]);
      }
    }
  }
}

TEST(LatentResponses, NominalArgmaxPreserved) {
  Schema s;
  s.responses = {nominal("n", 4), continuous("y")};
  Rng rng(48);
  ModelConfig cfg = scalar_config(2);
  cfg.sigma2_scales.clear();
  auto o = sampler_for(tiny_panel(s, 20, {1, 2, 3, 4, 5}, rng), cfg, 49);
  auto& g = *o->g;
  std::size_t checked = 0;
  for (int r = 0; r < 1000; ++r) {
    g.update_latent_responses(rng);
    for (std::size_t i = 0; i < g.state().subjects.size(); ++i) {
      const auto& sub = g.state().subjects[i];
      for (Eigen::Index j = 0; j < sub.ystar.cols(); ++j) {
        const double y = o->ds.subjects[i].observations[static_cast<std::size_t>(j)].values[0];
        ASSERT_EQ(nominal_from_utilities(std::span<const double>(sub.ystar.col(j).data(), 3)), static_cast<int>(y));
        ++checked;
      }
    }
  }
  EXPECT_EQ(checked, 100000u);
}

// ---------------------------------------------------------------------------
// Steps 17-18

TEST(Shrinkage, ConditionalExamples) {
  Rng rng(50);
  auto o = sampler_for(tiny_panel(two_continuous(), 2, {1}, rng), scalar_config(60), 51);
  zero_out(o->g->state());
  const auto d = o->g->delta2_conditional(0, 0);
  EXPECT_DOUBLE_EQ(d.shape, 30.5);
  EXPECT_DOUBLE_EQ(d.scale, 0.5);
  auto one = sampler_for(tiny_panel(two_continuous(), 2, {1}, rng), scalar_config(1), 52);
  zero_out(one->g->state());
  one->g->state().components[0].B(0, 0) = 1.0;
  one->g->state().components[0].V(0, 0) = -1.0;
  EXPECT_DOUBLE_EQ(one->g->delta2_conditional(0, 0).shape, 1.0);
  EXPECT_DOUBLE_EQ(one->g->delta2_conditional(0, 0).scale, 1.0);
  EXPECT_DOUBLE_EQ(one->g->zeta2_conditional(0, 0).scale, 1.0);
}

TEST(Shrinkage, SampledMeanMatchesInverseGamma) {
  Rng rng(53);
  auto o = sampler_for(tiny_panel(two_continuous(), 2, {1}, rng), scalar_config(10), 54);
  const auto prm = o->g->delta2_conditional(1, 0);
  const double m = prm.scale / (prm.shape - 1.0), sd = m / std::sqrt(prm.shape - 2.0);
  std::vector<double> d;
  for (int r = 0; r < 50000; ++r) {
    o->g->update_shrinkage(rng);
    d.push_back(o->g->state().shrinkage.delta2(1, 0));
  }
  EXPECT_NEAR(mean(d), m, 3.0 * sd / std::sqrt(d.size()));
}

// ---------------------------------------------------------------------------
// Whole sweeps and chains

TEST(Sweep, InvariantsHoldOnMixedData) {
  Rng rng(55);
  Schema s = conjugacy_schema();
  auto o = sampler_for(tiny_panel(s, 25, {1, 2, 3, 5}, rng, 0.2), tiny_config(5, 5), 56);
  for (int r = 0; r < 300; ++r) {
    o->g->sweep(rng);
    ASSERT_NO_THROW(o->g->check_invariants()) << "sweep " << r;
  }
  EXPECT_EQ(o->g->state().iteration, 300);
}

TEST(Chain, DefaultScheduleKeepsOneThousandDraws) {
  Rng rng(57);
  PanelDataset ds = tiny_panel(two_continuous(), 2, {1}, rng);
  ModelConfig cfg = scalar_config(2);
  cfg.burn_in = 5000;
  cfg.iterations = 10000;
  cfg.thin = 10;
  EXPECT_EQ(cfg.saved_draws(), 1000);
  GibbsSampler g(ds, cfg, rng);
  std::size_t kept = 0;
  long last = 0;
  ChainOptions opt;
  opt.on_draw = [&](const DrawRecord& d) {
    ++kept;
    last = d.iteration;
  };
  run_chain(g, rng, opt);
  EXPECT_EQ(kept, 1000u);
  EXPECT_EQ(last, 15000);
}

TEST(Chain, SeedDeterminism) {
  Rng d(58);
  PanelDataset ds = tiny_panel(conjugacy_schema(), 10, {1, 2}, d, 0.1);
  auto run = [&](std::uint64_t seed) {
    Rng rng(seed);
    GibbsSampler g(ds, tiny_config(3, 5), rng);
    return run_chain(g, rng);
  };
  const auto a = run(5), b = run(5), c = run(6);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].alpha, b[k].alpha);
    EXPECT_EQ(a[k].pi_tilde, b[k].pi_tilde);
    EXPECT_EQ(a[k].components[1].Lambda, b[k].components[1].Lambda);
  }
  EXPECT_NE(a.back().alpha, c.back().alpha);
}

TEST(Chain, PriorOnlyRunReproducesPriorMoments) {
  // every response and covariate missing: the chain targets the prior
  Schema s = two_continuous();
  s.covariates = {{"x", true, {"0", "1"}}};
  PanelDataset ds;
  ds.schema = s;
  for (int i = 0; i < 3; ++i) ds.subjects.push_back({"s" + std::to_string(i), 1.0, {-1}, {Observation{1.0, 0, {0, 0}, {1, 1}}}});
  ds.finalize();
  ModelConfig cfg = scalar_config(2);
  Rng rng(59);
  GibbsSampler g(ds, cfg, rng);
  std::vector<double> alpha, ls2;
  for (int r = 0; r < 60000; ++r) {
    g.sweep(rng);
    alpha.push_back(g.state().sticks.alpha);
    ls2.push_back(std::log(g.state().components[1].sigma2[0]));
  }
  // alpha ~ Gamma(0.25, 0.25): mean 1; log sigma2 ~ log IG(2, 1): mean -psi(2)
  EXPECT_NEAR(mean(alpha), 1.0, 3.0 * batch_means_se(alpha));
  EXPECT_NEAR(mean(ls2), -boost::math::digamma(2.0), 3.0 * batch_means_se(ls2));
}

TEST(Chain, FailureWritesStateDump) {
  Rng rng(60);
  Schema s = two_continuous();
  s.covariates = {{"x", true, {"0", "1"}}};
  PanelDataset ds = tiny_panel(s, 3, {1}, rng);
  GibbsSampler g(ds, scalar_config(2), rng);
  for (auto& c : g.state().components) c.theta_x[0].setZero();
  const std::string dump = ::testing::TempDir() + "/dump.json";
  std::remove(dump.c_str());
  ChainOptions opt;
  opt.check_invariants = true;
  opt.dump_path = dump;
  EXPECT_THROW(run_chain(g, rng, opt), NumericalError);
  EXPECT_TRUE(std::ifstream(dump).good());
}
