#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msd/gibbs.hpp"

namespace msd::testing {

inline VariableSchema continuous(std::string name) { return {std::move(name), VariableKind::continuous, {}, CutpointStyle::integer}; }
inline VariableSchema binary(std::string name) { return {std::move(name), VariableKind::binary, {}, CutpointStyle::integer}; }
inline VariableSchema count(std::string name, CutpointStyle s = CutpointStyle::integer) { return {std::move(name), VariableKind::count, {}, s}; }
inline VariableSchema nominal(std::string name, int d) {
  std::vector<std::string> cats;
  for (int c = 1; c <= d; ++c) cats.push_back(std::to_string(c));
  return {std::move(name), VariableKind::nominal, cats, CutpointStyle::integer};
}

/// Random value of the right kind for a schema entry.
inline double random_value(const VariableSchema& v, Rng& rng) {
  switch (v.kind) {
    case VariableKind::continuous: return rng.normal();
    case VariableKind::binary: return rng.uniform() < 0.5 ? 0.0 : 1.0;
    case VariableKind::count: return std::floor(rng.uniform() * 4.0);
    case VariableKind::nominal: return std::floor(rng.uniform() * v.num_categories());
  }
  return 0.0;
}

/// n subjects, each observed at every time in `times`, random complete data.
inline PanelDataset tiny_panel(Schema schema, std::size_t n, std::vector<double> times, Rng& rng, double missing_rate = 0.0) {
  PanelDataset ds;
  ds.schema = std::move(schema);
  for (std::size_t i = 0; i < n; ++i) {
    SubjectRecord s;
    s.id = "u" + std::to_string(i + 1);
    s.weight = 1.0;
    for (const auto& c : ds.schema.covariates) {
      s.covariates.push_back(rng.uniform() < missing_rate ? -1 : std::min(c.num_categories() - 1, static_cast<int>(rng.uniform() * c.num_categories())));
    }
    for (double t : times) {
      Observation o;
      o.time = t;
      for (const auto& v : ds.schema.responses) {
        const bool miss = rng.uniform() < missing_rate;
        o.values.push_back(miss ? 0.0 : random_value(v, rng));
        o.missing.push_back(miss ? 1 : 0);
      }
      s.observations.push_back(o);
    }
    ds.subjects.push_back(std::move(s));
  }
  ds.finalize();
  return ds;
}

/// Small configuration for unit-scale chains.
inline ModelConfig tiny_config(int H, int p) {
  ModelConfig c;
  c.truncation = H;
  c.factor_dim = std::max(1, std::min(2, p - 1));
  c.time_effect_dim = std::max(1, std::min(2, p - 1));
  c.factor_time_dim = 2;
  c.kappa_grid = default_kappa_grid(5);
  c.burn_in = 0;
  c.iterations = 10;
  c.thin = 1;
  return c;
}

// ---------------------------------------------------------------------------
// Statistics

inline double mean(const std::vector<double>& x) { return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size()); }

inline double variance(const std::vector<double>& x) {
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

/// Standard error of the mean for independent draws.
inline double iid_se(const std::vector<double>& x) { return std::sqrt(variance(x) / static_cast<double>(x.size())); }

/// Batch-means standard error for an autocorrelated chain.
inline double batch_means_se(const std::vector<double>& x, std::size_t batches = 50) {
  const std::size_t b = x.size() / batches;
  std::vector<double> m;
  for (std::size_t k = 0; k < batches; ++k) {
    double s = 0.0;
    for (std::size_t i = k * b; i < (k + 1) * b; ++i) s += x[i];
    m.push_back(s / static_cast<double>(b));
  }
  return std::sqrt(variance(m) / static_cast<double>(batches));
}

/// Kolmogorov-Smirnov distance of a sample against a CDF.
inline double ks_distance(std::vector<double> x, const std::function<double(double)>& cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, std::abs(f - static_cast<double>(i) / n), std::abs(static_cast<double>(i + 1) / n - f)});
  }
  return d;
}

// ---------------------------------------------------------------------------
// Dense-algebra Gaussian oracle

/// Mean of y*_ij computed with explicit loops, independent of the Eigen
/// expressions used by the sampler.
inline VectorXd naive_mean(const ComponentParams& c, const VectorXd& x, const VectorXd& mu_t, const MatrixXd& xi_t, double eta_star,
                           const VectorXd& eta_tilde) {
  const auto p = c.B.rows();
  const auto Q = c.Lambda.cols();
  VectorXd eta = VectorXd::Zero(Q);
  for (Eigen::Index q = 0; q < Q; ++q) {
    for (Eigen::Index l = 0; l < x.size(); ++l) eta[q] += c.V(q, l) * x[l] * eta_star;
    for (Eigen::Index l = 0; l < eta_tilde.size(); ++l) eta[q] += xi_t(q, l) * eta_tilde[l];
  }
  VectorXd m = VectorXd::Zero(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    for (Eigen::Index l = 0; l < x.size(); ++l) m[k] += c.B(k, l) * x[l];
    for (Eigen::Index q = 0; q < mu_t.size(); ++q) m[k] += c.Omega(k, q) * mu_t[q];
    for (Eigen::Index q = 0; q < Q; ++q) m[k] += c.Lambda(k, q) * eta[q];
  }
  return m;
}

/// Stacked means of every y*_ij coordinate under the current allocations,
/// plus the matching stacked y* and noise variances.
struct Stacked {
  VectorXd mean, y, noise;
};

inline Stacked stack(const GibbsSampler& g) {
  const auto& st = g.state();
  const auto& ctx = g.context();
  std::vector<double> m, y, s2;
  for (std::size_t i = 0; i < st.subjects.size(); ++i) {
    const auto& s = st.subjects[i];
    const auto& c = st.components[static_cast<std::size_t>(s.component)];
    for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
      const int t = g.time_index(i, j);
      const VectorXd mm = naive_mean(c, s.x, st.time.mu.row(t).transpose(), st.time.xi[static_cast<std::size_t>(t)], s.eta_star, s.eta_tilde);
      for (int k = 0; k < ctx.p; ++k) {
        m.push_back(mm[k]);
        y.push_back(s.ystar(k, j));
        s2.push_back(c.sigma2[k]);
      }
    }
  }
  auto vec = [](const std::vector<double>& v) { return VectorXd(Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()))); };
  return {vec(m), vec(y), vec(s2)};
}

struct GaussianPosterior {
  VectorXd mean;
  MatrixXd cov;
};

/// Posterior of a parameter block beta with prior N(0, S0), when the
/// stacked latent means are affine in beta. The design is recovered by
/// finite differences of the forward means (exact for affine maps) and the
/// posterior is formed in covariance (Kalman) form:
///   mean = S0 A' (A S0 A' + D)^{-1} (y - m0),  cov = S0 - S0 A' (...)^{-1} A S0.
inline GaussianPosterior block_posterior(GibbsSampler g, const std::function<void(ChainState&, const VectorXd&)>& set, int dim,
                                         const MatrixXd& prior_cov) {
  set(g.state(), VectorXd::Zero(dim));
  const Stacked base = stack(g);
  MatrixXd A(base.mean.size(), dim);
  for (int d = 0; d < dim; ++d) {
    set(g.state(), VectorXd::Unit(dim, d));
    A.col(d) = stack(g).mean - base.mean;
  }
  const MatrixXd S = A * prior_cov * A.transpose() + MatrixXd(base.noise.asDiagonal());
  const MatrixXd K = prior_cov * A.transpose() * S.inverse();
  return {K * (base.y - base.mean), prior_cov - K * A * prior_cov};
}

inline double max_abs_diff(const MatrixXd& a, const MatrixXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace msd::testing
