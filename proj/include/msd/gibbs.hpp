#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "msd/links.hpp"
#include "msd/model_core.hpp"
#include "msd/rng.hpp"
#include "msd/survey.hpp"

namespace msd {

struct BetaParams {
  double a = 1.0, b = 1.0;
};
struct GammaParams {
  double shape = 1.0, rate = 1.0;
};
struct InvGammaParams {
  double shape = 1.0, scale = 1.0;
};

/// Multivariate normal conditional with covariance cov_factor * cov_factor'.
struct GaussianConditional {
  VectorXd mean;
  MatrixXd cov_factor;

  MatrixXd covariance() const { return cov_factor * cov_factor.transpose(); }

  VectorXd draw(Rng& rng) const {
    VectorXd z(mean.size());
    for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = rng.normal();
    return mean + cov_factor * z;
  }

  /// From precision P and linear term b (mean = P^{-1} b). Cholesky with one
  /// jitter escalation (1e-8, then 1e-6) before giving up.
  static GaussianConditional from_precision(const MatrixXd& precision, const VectorXd& b, const char* what) {
    const auto n = precision.rows();
    Eigen::LLT<MatrixXd> llt(precision);
    for (double jitter : {1e-8, 1e-6}) {
      if (llt.info() == Eigen::Success) break;
      llt.compute(precision + jitter * MatrixXd::Identity(n, n));
    }
    if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + ": precision matrix not positive definite");
    GaussianConditional g;
    g.mean = llt.solve(b);
    const MatrixXd Linv = llt.matrixL().solve(MatrixXd::Identity(n, n));
    g.cov_factor = Linv.transpose();
    return g;
  }
};

/// Blocked Gibbs sampler for the truncated Dirichlet-process mixture of
/// Gaussian factor models. Each `update_*` method performs one block of the
/// sweep in place; the matching `*_conditional` methods expose the full
/// conditional parameters for inspection and testing.
class GibbsSampler {
 public:
  GibbsSampler(ModelContext ctx, ChainState state) : ctx_(std::move(ctx)), st_(std::move(state)) { allocate_workspace(); }

  GibbsSampler(const PanelDataset& ds, const ModelConfig& config, Rng& rng) : ctx_(make_context(ds, config)) {
    st_ = init_state(ctx_, rng);
    allocate_workspace();
  }

  const ModelContext& context() const { return ctx_; }
  ChainState& state() { return st_; }
  const ChainState& state() const { return st_; }
  const PanelDataset& data() const { return *ctx_.data; }

  // -------------------------------------------------------------------------
  // Helpers

  std::vector<int> counts() const {
    std::vector<int> n(static_cast<std::size_t>(ctx_.H), 0);
    for (const auto& s : st_.subjects) ++n[static_cast<std::size_t>(s.component)];
    return n;
  }

  /// eta_ij under component h.
  VectorXd factor(std::size_t i, Eigen::Index j, int h) const {
    const auto& s = st_.subjects[i];
    const auto& c = st_.components[static_cast<std::size_t>(h)];
    return c.V * s.x * s.eta_star + xi_at(i, j) * s.eta_tilde;
  }

  /// Conditional mean of y*_ij under component h.
  VectorXd observation_mean(std::size_t i, Eigen::Index j, int h) const {
    const auto& s = st_.subjects[i];
    const auto& c = st_.components[static_cast<std::size_t>(h)];
    return c.B * s.x + c.Omega * st_.time.mu.row(time_index(i, j)).transpose() + c.Lambda * factor(i, j, h);
  }

  /// log f(y*_ij | x_i, eta_ij, theta_h).
  double latent_conditional_density(std::size_t i, Eigen::Index j, int h) const {
    return latent_log_density(st_.subjects[i].ystar.col(j), observation_mean(i, j, h), st_.components[static_cast<std::size_t>(h)].sigma2);
  }

  // -------------------------------------------------------------------------
  // Steps 1-2: sticks and DP precision

  BetaParams stick_conditional(int h) const {
    const auto n = counts();
    double above = 0.0;
    for (int b = h + 1; b < ctx_.H; ++b) above += n[static_cast<std::size_t>(b)];
    return {1.0 + n[static_cast<std::size_t>(h)], st_.sticks.alpha + above};
  }

  GammaParams alpha_conditional() const {
    double s = 0.0;
    for (Eigen::Index h = 0; h < st_.sticks.log1m_v.size(); ++h) s += st_.sticks.log1m_v[h];
    return {ctx_.config.alpha_shape + ctx_.H - 1, ctx_.config.alpha_rate - s};
  }

  void update_sticks_and_alpha(Rng& rng) {
    const auto n = counts();
    double above = 0.0;
    for (int h = ctx_.H - 1; h >= 0; --h) {
      if (h < ctx_.H - 1) {
        st_.sticks.set(h, rng.log_beta(1.0 + n[static_cast<std::size_t>(h)], st_.sticks.alpha + above));
      }
      above += n[static_cast<std::size_t>(h)];
    }
    const auto g = alpha_conditional();
    st_.sticks.alpha = rng.gamma(g.shape, g.rate);
    st_.sticks.pi = stick_to_weights(st_.sticks.v, st_.sticks.log1m_v);
  }

  // -------------------------------------------------------------------------
  // Step 3: allocations

  /// Unnormalised log P(s_i = h | ...) for every h.
  std::vector<double> allocation_log_probs(std::size_t i) const {
    std::vector<double> lp(static_cast<std::size_t>(ctx_.H));
    const auto& s = st_.subjects[i];
    const bool freeze = ctx_.config.allocation_factors == AllocationFactors::freeze;
    for (int h = 0; h < ctx_.H; ++h) {
      const auto& c = st_.components[static_cast<std::size_t>(h)];
      double v = std::log(st_.sticks.pi[h]);
      for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
        const VectorXd eta = factor(i, j, freeze ? s.component : h);
        const VectorXd m = c.B * s.x + c.Omega * st_.time.mu.row(time_index(i, j)).transpose() + c.Lambda * eta;
        v += latent_log_density(s.ystar.col(j), m, c.sigma2);
      }
      for (std::size_t l = 0; l < s.covariates.size(); ++l) v += std::log(c.theta_x[l][s.covariates[l]]);
      lp[static_cast<std::size_t>(h)] = v;
    }
    return lp;
  }

  void update_allocations(Rng& rng) {
    const int H = ctx_.H, p = ctx_.p, T = ctx_.T, Qeta = ctx_.Qeta;
    const bool freeze = ctx_.config.allocation_factors == AllocationFactors::freeze;
    // per-component caches: Lambda V, Omega mu_t, Lambda xi_t, log-normaliser
    for (int h = 0; h < H; ++h) {
      const auto& c = st_.components[static_cast<std::size_t>(h)];
      auto& cache = alloc_cache_[static_cast<std::size_t>(h)];
      cache.lambda_v.noalias() = c.Lambda * c.V;
      cache.omega_mu.resize(p, T);
      cache.lambda_xi.resize(static_cast<std::size_t>(T));
      for (int t = 0; t < T; ++t) {
        cache.omega_mu.col(t).noalias() = c.Omega * st_.time.mu.row(t).transpose();
        cache.lambda_xi[static_cast<std::size_t>(t)].noalias() = c.Lambda * st_.time.xi[static_cast<std::size_t>(t)];
      }
      cache.inv_sigma2 = c.sigma2.cwiseInverse();
      cache.log_norm = -0.5 * (p * std::log(2.0 * std::numbers::pi) + c.sigma2.array().log().sum());
      cache.log_pi = std::log(st_.sticks.pi[h]);
      cache.log_theta.resize(c.theta_x.size());
      for (std::size_t l = 0; l < c.theta_x.size(); ++l) cache.log_theta[l] = c.theta_x[l].array().log();
    }
    std::vector<double> lp(static_cast<std::size_t>(H));
    VectorXd base(p), m(p), eta_fixed;
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      auto& s = st_.subjects[i];
      const auto& obs = data().subjects[i].observations;
      const auto ni = s.ystar.cols();
      // frozen factor contribution Lambda_h eta_ij uses the current eta_ij
      std::vector<VectorXd> frozen;
      if (freeze) {
        for (Eigen::Index j = 0; j < ni; ++j) frozen.push_back(factor(i, j, s.component));
      }
      for (int h = 0; h < H; ++h) {
        const auto& c = st_.components[static_cast<std::size_t>(h)];
        const auto& cache = alloc_cache_[static_cast<std::size_t>(h)];
        double v = cache.log_pi + static_cast<double>(ni) * cache.log_norm;
        base.noalias() = c.B * s.x;
        if (!freeze) base.noalias() += (cache.lambda_v * s.x) * s.eta_star;
        for (Eigen::Index j = 0; j < ni; ++j) {
          const int t = obs[static_cast<std::size_t>(j)].time_index;
          m = base + cache.omega_mu.col(t);
          if (freeze) {
            m.noalias() += c.Lambda * frozen[static_cast<std::size_t>(j)];
          } else {
            m.noalias() += cache.lambda_xi[static_cast<std::size_t>(t)] * s.eta_tilde;
          }
          double q = 0.0;
          const double* y = s.ystar.col(j).data();
          for (int k = 0; k < p; ++k) {
            const double r = y[k] - m[k];
            q += r * r * cache.inv_sigma2[k];
          }
          v -= 0.5 * q;
        }
        for (std::size_t l = 0; l < s.covariates.size(); ++l) v += cache.log_theta[l][s.covariates[l]];
        lp[static_cast<std::size_t>(h)] = v;
      }
      (void)Qeta;
      try {
        s.component = static_cast<int>(rng.categorical_log(lp));
      } catch (const std::domain_error&) {
        throw NumericalError("update_allocations: all allocation probabilities vanish for subject '" + data().subjects[i].id + "'");
      }
    }
  }

  // -------------------------------------------------------------------------
  // Step 4: idiosyncratic variances

  InvGammaParams variance_conditional(int h, int k) const {
    double m = 0.0, ss = 0.0;
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const auto& s = st_.subjects[i];
      if (s.component != h) continue;
      for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
        const double r = s.ystar(k, j) - observation_mean(i, j, h)[k];
        ss += r * r;
        m += 1.0;
      }
    }
    return {ctx_.sigma2_shape[k] + 0.5 * m, ctx_.sigma2_scale[k] + 0.5 * ss};
  }

  void update_variances(Rng& rng) {
    compute_residuals();
    MatrixXd ss = MatrixXd::Zero(ctx_.p, ctx_.H);
    VectorXd m = VectorXd::Zero(ctx_.H);
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const int h = st_.subjects[i].component;
      ss.col(h) += resid_[i].rowwise().squaredNorm();
      m[h] += static_cast<double>(resid_[i].cols());
    }
    for (int h = 0; h < ctx_.H; ++h) {
      auto& c = st_.components[static_cast<std::size_t>(h)];
      for (int k = 0; k < ctx_.p; ++k) {
        c.sigma2[k] = rng.inv_gamma(ctx_.sigma2_shape[k] + 0.5 * m[h], ctx_.sigma2_scale[k] + 0.5 * ss(k, h));
      }
    }
  }

  // -------------------------------------------------------------------------
  // Step 5: loading rows U_hk = [B_hk Omega_hk Lambda_hk]

  GaussianConditional loading_row_conditional(int h, int k) const {
    MatrixXd ztz;
    MatrixXd zty;
    loading_statistics(h, ztz, zty);
    return loading_row_from_stats(h, k, ztz, zty);
  }

  void update_loading_rows(Rng& rng) {
    MatrixXd ztz, zty;
    for (int h = 0; h < ctx_.H; ++h) {
      loading_statistics(h, ztz, zty);
      auto& c = st_.components[static_cast<std::size_t>(h)];
      for (int k = 0; k < ctx_.p; ++k) {
        const VectorXd u = loading_row_from_stats(h, k, ztz, zty).draw(rng);
        c.B.row(k) = u.head(ctx_.L).transpose();
        c.Omega.row(k) = u.segment(ctx_.L, ctx_.Qmu).transpose();
        c.Lambda.row(k) = u.tail(ctx_.Q).transpose();
      }
    }
  }

  // -------------------------------------------------------------------------
  // Steps 6-7: subject factors

  GaussianConditional eta_star_conditional(std::size_t i) const {
    const auto& s = st_.subjects[i];
    const auto& c = st_.components[static_cast<std::size_t>(s.component)];
    const VectorXd a = c.Lambda * (c.V * s.x);
    const VectorXd w = a.cwiseQuotient(c.sigma2);
    double b = 0.0;
    for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
      const MatrixXd& xi_t = xi_at(i, j);
      const VectorXd yhat = s.ystar.col(j) - c.B * s.x - c.Omega * st_.time.mu.row(time_index(i, j)).transpose() -
                            c.Lambda * (xi_t * s.eta_tilde);
      b += w.dot(yhat);
    }
    MatrixXd prec(1, 1);
    prec(0, 0) = static_cast<double>(s.ystar.cols()) * a.dot(w) + 1.0;
    return GaussianConditional::from_precision(prec, VectorXd::Constant(1, b), "eta_star");
  }

  GaussianConditional eta_tilde_conditional(std::size_t i) const {
    const auto& s = st_.subjects[i];
    const auto& c = st_.components[static_cast<std::size_t>(s.component)];
    MatrixXd prec = MatrixXd::Identity(ctx_.Qeta, ctx_.Qeta);
    VectorXd b = VectorXd::Zero(ctx_.Qeta);
    const VectorXd lvx = c.Lambda * (c.V * s.x) * s.eta_star;
    for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
      const MatrixXd lxi = c.Lambda * xi_at(i, j);
      const MatrixXd w = c.sigma2.cwiseInverse().asDiagonal() * lxi;
      const VectorXd yhat = s.ystar.col(j) - c.B * s.x - c.Omega * st_.time.mu.row(time_index(i, j)).transpose() - lvx;
      prec.noalias() += lxi.transpose() * w;
      b.noalias() += w.transpose() * yhat;
    }
    return GaussianConditional::from_precision(prec, b, "eta_tilde");
  }

  void update_subject_factors(Rng& rng) {
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) st_.subjects[i].eta_star = eta_star_conditional(i).draw(rng)[0];
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) st_.subjects[i].eta_tilde = eta_tilde_conditional(i).draw(rng);
  }

  // -------------------------------------------------------------------------
  // Steps 8-9: GP length scales on the grid

  std::vector<double> kappa_mu_log_masses() const {
    std::vector<double> lm(ctx_.gp.size(), 0.0);
    if (ctx_.T == 0) return lm;
    for (std::size_t g = 0; g < ctx_.gp.size(); ++g) {
      for (int q = 0; q < ctx_.Qmu; ++q) lm[g] += ctx_.gp.log_density(g, st_.time.mu.col(q));
    }
    return lm;
  }

  std::vector<double> kappa_xi_log_masses() const {
    std::vector<double> lm(ctx_.gp.size(), 0.0);
    if (ctx_.T == 0) return lm;
    VectorXd f(ctx_.T);
    for (int q = 0; q < ctx_.Q; ++q) {
      for (int l = 0; l < ctx_.Qeta; ++l) {
        for (int t = 0; t < ctx_.T; ++t) f[t] = st_.time.xi[static_cast<std::size_t>(t)](q, l);
        for (std::size_t g = 0; g < ctx_.gp.size(); ++g) lm[g] += ctx_.gp.log_density(g, f);
      }
    }
    return lm;
  }

  void update_kappas(Rng& rng) {
    st_.time.kappa_mu_index = static_cast<int>(rng.categorical_log(kappa_mu_log_masses()));
    st_.time.kappa_xi_index = static_cast<int>(rng.categorical_log(kappa_xi_log_masses()));
  }

  // -------------------------------------------------------------------------
  // Step 10: columns of V_h

  GaussianConditional v_column_conditional(int h, int l) const {
    const auto& c = st_.components[static_cast<std::size_t>(h)];
    MatrixXd prec = MatrixXd::Zero(ctx_.Q, ctx_.Q);
    VectorXd acc = VectorXd::Zero(ctx_.p);
    double weight = 0.0;
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const auto& s = st_.subjects[i];
      if (s.component != h) continue;
      const double xe = s.x[l] * s.eta_star;
      if (xe == 0.0) continue;
      VectorXd x_minus = s.x;
      x_minus[l] = 0.0;
      for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
        const VectorXd yhat = s.ystar.col(j) - c.B * s.x - c.Omega * st_.time.mu.row(time_index(i, j)).transpose() -
                              c.Lambda * (xi_at(i, j) * s.eta_tilde) - c.Lambda * (c.V * x_minus) * s.eta_star;
        acc += xe * yhat;
        weight += xe * xe;
      }
    }
    return v_column_from_stats(h, l, weight, acc);
  }

  void update_V_columns(Rng& rng) {
    compute_residuals();
    for (int h = 0; h < ctx_.H; ++h) {
      auto& c = st_.components[static_cast<std::size_t>(h)];
      for (int l = 0; l < ctx_.L; ++l) {
        VectorXd acc = VectorXd::Zero(ctx_.p);
        double weight = 0.0;
        // yhat = resid + Lambda V_l x_l eta*
        const VectorXd lv = c.Lambda * c.V.col(l);
        for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
          const auto& s = st_.subjects[i];
          if (s.component != h) continue;
          const double xe = s.x[l] * s.eta_star;
          if (xe == 0.0) continue;
          for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
            acc += xe * (resid_[i].col(j) + lv * xe);
            weight += xe * xe;
          }
        }
        const VectorXd old = c.V.col(l);
        c.V.col(l) = v_column_from_stats(h, l, weight, acc).draw(rng);
        const VectorXd delta = c.Lambda * (c.V.col(l) - old);
        for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
          const auto& s = st_.subjects[i];
          if (s.component != h) continue;
          const double xe = s.x[l] * s.eta_star;
          if (xe == 0.0) continue;
          resid_[i].colwise() -= delta * xe;
        }
      }
    }
  }

  // -------------------------------------------------------------------------
  // Steps 11-12: GP time effects

  GaussianConditional mu_column_conditional(int q) {
    compute_residuals();
    return mu_column_from_residuals(q);
  }

  GaussianConditional xi_column_conditional(int q, int l) {
    compute_residuals();
    return xi_column_from_residuals(q, l);
  }

  void update_time_effects(Rng& rng) {
    if (ctx_.T == 0) return;
    compute_residuals();
    for (int q = 0; q < ctx_.Qmu; ++q) {
      const VectorXd old = st_.time.mu.col(q);
      st_.time.mu.col(q) = mu_column_from_residuals(q).draw(rng);
      const VectorXd delta = st_.time.mu.col(q) - old;
      for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
        const auto& c = st_.components[static_cast<std::size_t>(st_.subjects[i].component)];
        for (Eigen::Index j = 0; j < resid_[i].cols(); ++j) resid_[i].col(j) -= c.Omega.col(q) * delta[time_index(i, j)];
      }
    }
    for (int q = 0; q < ctx_.Q; ++q) {
      for (int l = 0; l < ctx_.Qeta; ++l) {
        VectorXd old(ctx_.T);
        for (int t = 0; t < ctx_.T; ++t) old[t] = st_.time.xi[static_cast<std::size_t>(t)](q, l);
        const VectorXd fresh = xi_column_from_residuals(q, l).draw(rng);
        for (int t = 0; t < ctx_.T; ++t) st_.time.xi[static_cast<std::size_t>(t)](q, l) = fresh[t];
        const VectorXd delta = fresh - old;
        for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
          const auto& s = st_.subjects[i];
          const auto& c = st_.components[static_cast<std::size_t>(s.component)];
          for (Eigen::Index j = 0; j < resid_[i].cols(); ++j) {
            resid_[i].col(j) -= c.Lambda.col(q) * (delta[time_index(i, j)] * s.eta_tilde[l]);
          }
        }
      }
    }
  }

  // -------------------------------------------------------------------------
  // Step 13: covariate multinomials

  std::vector<double> covariate_conditional(int h, int l) const {
    std::vector<double> conc(static_cast<std::size_t>(ctx_.covariates()[static_cast<std::size_t>(l)].num_categories()),
                             ctx_.config.covariate_concentration);
    for (const auto& s : st_.subjects) {
      if (s.component == h) conc[static_cast<std::size_t>(s.covariates[static_cast<std::size_t>(l)])] += 1.0;
    }
    return conc;
  }

  void update_covariate_params(Rng& rng) {
    for (int h = 0; h < ctx_.H; ++h) {
      for (std::size_t l = 0; l < ctx_.covariates().size(); ++l) {
        const auto th = rng.dirichlet(covariate_conditional(h, static_cast<int>(l)));
        st_.components[static_cast<std::size_t>(h)].theta_x[l] = Eigen::Map<const VectorXd>(th.data(), static_cast<Eigen::Index>(th.size()));
      }
    }
  }

  // -------------------------------------------------------------------------
  // Steps 14-15: imputation

  /// Unnormalised log-probabilities over the categories of a missing
  /// covariate, with eta recomputed for each candidate.
  std::vector<double> covariate_imputation_log_probs(std::size_t i, int l) {
    auto& s = st_.subjects[i];
    const auto& cov = ctx_.covariates()[static_cast<std::size_t>(l)];
    const auto& c = st_.components[static_cast<std::size_t>(s.component)];
    const int original = s.covariates[static_cast<std::size_t>(l)];
    std::vector<double> lp(static_cast<std::size_t>(cov.num_categories()));
    for (int cat = 0; cat < cov.num_categories(); ++cat) {
      s.covariates[static_cast<std::size_t>(l)] = cat;
      ctx_.encoding.set_block(s.x, static_cast<std::size_t>(l), cat);
      double v = std::log(c.theta_x[static_cast<std::size_t>(l)][cat]);
      for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) v += latent_conditional_density(i, j, s.component);
      lp[static_cast<std::size_t>(cat)] = v;
    }
    s.covariates[static_cast<std::size_t>(l)] = original;
    ctx_.encoding.set_block(s.x, static_cast<std::size_t>(l), original);
    return lp;
  }

  void impute_missing(Rng& rng) {
    const auto& resp = ctx_.responses();
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const auto& rec = data().subjects[i];
      auto& s = st_.subjects[i];
      for (std::size_t l = 0; l < rec.covariates.size(); ++l) {
        if (rec.covariates[l] >= 0) continue;
        const int cat = static_cast<int>(rng.categorical_log(covariate_imputation_log_probs(i, static_cast<int>(l))));
        s.covariates[l] = cat;
        ctx_.encoding.set_block(s.x, l, cat);
      }
    }
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const auto& rec = data().subjects[i];
      auto& s = st_.subjects[i];
      const auto& c = st_.components[static_cast<std::size_t>(s.component)];
      for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
        const auto& o = rec.observations[static_cast<std::size_t>(j)];
        bool any = false;
        for (auto m : o.missing) any = any || m;
        if (!any) continue;
        const VectorXd mean = observation_mean(i, j, s.component);
        for (std::size_t k = 0; k < resp.size(); ++k) {
          if (!o.missing[k]) continue;
          const auto& r = ctx_.layout.ranges[k];
          for (int d = 0; d < r.dim; ++d) {
            const int coord = r.offset + d;
            s.ystar(coord, j) = rng.normal(mean[coord], std::sqrt(c.sigma2[coord]));
          }
          s.responses(static_cast<Eigen::Index>(k), j) =
              observed_value(resp[k], std::span<const double>(s.ystar.col(j).data() + r.offset, static_cast<std::size_t>(r.dim)));
        }
      }
    }
  }

  // -------------------------------------------------------------------------
  // Step 16: latent responses

  void update_latent_responses(Rng& rng) {
    compute_residuals();
    const auto& resp = ctx_.responses();
    VectorXd mean(ctx_.p);
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      auto& s = st_.subjects[i];
      const auto& c = st_.components[static_cast<std::size_t>(s.component)];
      for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
        mean = s.ystar.col(j) - resid_[i].col(j);
        for (std::size_t k = 0; k < resp.size(); ++k) {
          const auto& r = ctx_.layout.ranges[k];
          const double y = s.responses(static_cast<Eigen::Index>(k), j);
          std::span<double> block(s.ystar.col(j).data() + r.offset, static_cast<std::size_t>(r.dim));
          if (resp[k].kind == VariableKind::continuous) {
            block[0] = y;
            continue;
          }
          sample_latent_block(resp[k], y, block, std::span<const double>(mean.data() + r.offset, block.size()),
                              std::span<const double>(c.sigma2.data() + r.offset, block.size()), rng);
        }
      }
    }
  }

  // -------------------------------------------------------------------------
  // Steps 17-18: shrinkage scales

  InvGammaParams delta2_conditional(int k, int l) const {
    double ss = 0.0;
    for (const auto& c : st_.components) {
      const double u = loading(c, k, l);
      ss += u * u;
    }
    return {0.5 * (ctx_.H + 1), 0.5 * (ss + 1.0)};
  }

  InvGammaParams zeta2_conditional(int q, int l) const {
    double ss = 0.0;
    for (const auto& c : st_.components) ss += c.V(q, l) * c.V(q, l);
    return {0.5 * (ctx_.H + 1), 0.5 * (ss + 1.0)};
  }

  void update_shrinkage(Rng& rng) {
    for (int k = 0; k < ctx_.p; ++k) {
      for (int l = 0; l < ctx_.Lstar(); ++l) {
        const auto g = delta2_conditional(k, l);
        st_.shrinkage.delta2(k, l) = rng.inv_gamma(g.shape, g.scale);
      }
    }
    for (int q = 0; q < ctx_.Q; ++q) {
      for (int l = 0; l < ctx_.L; ++l) {
        const auto g = zeta2_conditional(q, l);
        st_.shrinkage.zeta2(q, l) = rng.inv_gamma(g.shape, g.scale);
      }
    }
  }

  // -------------------------------------------------------------------------
  // Step 19: population-adjusted weights

  std::vector<int> allocations() const {
    std::vector<int> s;
    s.reserve(st_.subjects.size());
    for (const auto& sub : st_.subjects) s.push_back(sub.component);
    return s;
  }

  void update_adjusted_weights(Rng& rng) {
    const auto pt = adjusted_weights(allocations(), ctx_.subject_weights, ctx_.weights, rng);
    st_.pi_tilde = Eigen::Map<const VectorXd>(pt.data(), static_cast<Eigen::Index>(pt.size()));
  }

  /// One full sweep, steps 1 through 19 in order.
  void sweep(Rng& rng) {
    update_sticks_and_alpha(rng);
    update_allocations(rng);
    update_variances(rng);
    update_loading_rows(rng);
    update_subject_factors(rng);
    update_kappas(rng);
    update_V_columns(rng);
    update_time_effects(rng);
    update_covariate_params(rng);
    impute_missing(rng);
    update_latent_responses(rng);
    update_shrinkage(rng);
    update_adjusted_weights(rng);
    ++st_.iteration;
  }

  /// Throws if y* left its region or a simplex drifted.
  void check_invariants() const {
    const auto& resp = ctx_.responses();
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const auto& s = st_.subjects[i];
      const auto& rec = data().subjects[i];
      for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
        const auto& o = rec.observations[static_cast<std::size_t>(j)];
        for (std::size_t k = 0; k < resp.size(); ++k) {
          const auto& r = ctx_.layout.ranges[k];
          const double y = o.missing[k] ? s.responses(static_cast<Eigen::Index>(k), j) : o.values[k];
          const std::span<const double> block(s.ystar.col(j).data() + r.offset, static_cast<std::size_t>(r.dim));
          if (observed_value(resp[k], block) != y) {
            throw NumericalError("invariant: latent response outside its region (subject '" + rec.id + "', variable '" + resp[k].name + "')");
          }
        }
      }
    }
    if (std::abs(st_.sticks.pi.sum() - 1.0) > 1e-12) throw NumericalError("invariant: pi is not a simplex");
    if (std::abs(st_.pi_tilde.sum() - 1.0) > 1e-12) throw NumericalError("invariant: pi_tilde is not a simplex");
    for (const auto& c : st_.components) {
      for (const auto& th : c.theta_x) {
        if (std::abs(th.sum() - 1.0) > 1e-12) throw NumericalError("invariant: theta_x is not a simplex");
      }
      if ((c.sigma2.array() <= 0.0).any()) throw NumericalError("invariant: non-positive sigma2");
    }
  }

  /// Loading U_hkl in the concatenated [B Omega Lambda] indexing.
  double loading(const ComponentParams& c, int k, int l) const {
    if (l < ctx_.L) return c.B(k, l);
    if (l < ctx_.L + ctx_.Qmu) return c.Omega(k, l - ctx_.L);
    return c.Lambda(k, l - ctx_.L - ctx_.Qmu);
  }

  int time_index(std::size_t i, Eigen::Index j) const {
    return data().subjects[i].observations[static_cast<std::size_t>(j)].time_index;
  }
  const MatrixXd& xi_at(std::size_t i, Eigen::Index j) const { return st_.time.xi[static_cast<std::size_t>(time_index(i, j))]; }

 private:
  struct AllocationCache {
    MatrixXd lambda_v;
    MatrixXd omega_mu;
    std::vector<MatrixXd> lambda_xi;
    VectorXd inv_sigma2;
    double log_norm = 0.0;
    double log_pi = 0.0;
    std::vector<Eigen::ArrayXd> log_theta;
  };

  void allocate_workspace() {
    alloc_cache_.resize(static_cast<std::size_t>(ctx_.H));
    resid_.resize(st_.subjects.size());
  }

  /// resid_[i] = y*_i - mean_i under the current allocation.
  void compute_residuals() {
    VectorXd eta(ctx_.Q), m(ctx_.p), vx(ctx_.Q);
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const auto& s = st_.subjects[i];
      const auto& c = st_.components[static_cast<std::size_t>(s.component)];
      auto& r = resid_[i];
      r.resize(ctx_.p, s.ystar.cols());
      vx.noalias() = c.V * s.x;
      vx *= s.eta_star;
      const VectorXd bx = c.B * s.x;
      for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
        const int t = time_index(i, j);
        eta = vx;
        eta.noalias() += st_.time.xi[static_cast<std::size_t>(t)] * s.eta_tilde;
        m = bx;
        m.noalias() += c.Lambda * eta;
        for (int q = 0; q < ctx_.Qmu; ++q) m += c.Omega.col(q) * st_.time.mu(t, q);
        r.col(j) = s.ystar.col(j) - m;
      }
    }
  }

  void loading_statistics(int h, MatrixXd& ztz, MatrixXd& zty) const {
    const int Ls = ctx_.Lstar();
    ztz.setZero(Ls, Ls);
    zty.setZero(Ls, ctx_.p);
    VectorXd z(Ls);
    const auto& c = st_.components[static_cast<std::size_t>(h)];
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const auto& s = st_.subjects[i];
      if (s.component != h) continue;
      const VectorXd vx = c.V * s.x * s.eta_star;
      for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
        const int t = time_index(i, j);
        z.head(ctx_.L) = s.x;
        z.segment(ctx_.L, ctx_.Qmu) = st_.time.mu.row(t).transpose();
        z.tail(ctx_.Q) = vx + st_.time.xi[static_cast<std::size_t>(t)] * s.eta_tilde;
        ztz.selfadjointView<Eigen::Lower>().rankUpdate(z);
        zty.noalias() += z * s.ystar.col(j).transpose();
      }
    }
    ztz.triangularView<Eigen::StrictlyUpper>() = ztz.transpose();
  }

  GaussianConditional loading_row_from_stats(int h, int k, const MatrixXd& ztz, const MatrixXd& zty) const {
    const double inv_s2 = 1.0 / st_.components[static_cast<std::size_t>(h)].sigma2[k];
    MatrixXd prec = ztz * inv_s2;
    prec.diagonal() += st_.shrinkage.delta2.row(k).transpose().cwiseInverse();
    return GaussianConditional::from_precision(prec, zty.col(k) * inv_s2, "loading row");
  }

  GaussianConditional v_column_from_stats(int h, int l, double weight, const VectorXd& acc) const {
    const auto& c = st_.components[static_cast<std::size_t>(h)];
    const MatrixXd w = c.sigma2.cwiseInverse().asDiagonal() * c.Lambda;
    MatrixXd prec = weight * (c.Lambda.transpose() * w);
    prec.diagonal() += st_.shrinkage.zeta2.col(l).cwiseInverse();
    return GaussianConditional::from_precision(prec, w.transpose() * acc, "V column");
  }

  /// Posterior for a T-vector with GP prior Psi = L L' and diagonal data
  /// precision a, linear term b. Sampled in the whitened coordinates
  /// f = L u, whose precision I + L' diag(a) L stays well conditioned.
  GaussianConditional gp_conditional(std::size_t grid_index, const VectorXd& a, const VectorXd& b, const char* what) const {
    const MatrixXd& Lpsi = ctx_.gp.chol[grid_index];
    MatrixXd prec = Lpsi.transpose() * a.asDiagonal() * Lpsi;
    prec.diagonal().array() += 1.0;
    auto g = GaussianConditional::from_precision(prec, Lpsi.transpose() * b, what);
    g.mean = Lpsi * g.mean;
    g.cov_factor = Lpsi * g.cov_factor;
    return g;
  }

  GaussianConditional mu_column_from_residuals(int q) const {
    VectorXd a = VectorXd::Zero(ctx_.T), b = VectorXd::Zero(ctx_.T);
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const auto& c = st_.components[static_cast<std::size_t>(st_.subjects[i].component)];
      const VectorXd w = c.Omega.col(q).cwiseQuotient(c.sigma2);
      const double aw = w.dot(c.Omega.col(q));
      for (Eigen::Index j = 0; j < resid_[i].cols(); ++j) {
        const int t = time_index(i, j);
        a[t] += aw;
        b[t] += w.dot(resid_[i].col(j)) + aw * st_.time.mu(t, q);
      }
    }
    return gp_conditional(static_cast<std::size_t>(st_.time.kappa_mu_index), a, b, "mu column");
  }

  GaussianConditional xi_column_from_residuals(int q, int l) const {
    VectorXd a = VectorXd::Zero(ctx_.T), b = VectorXd::Zero(ctx_.T);
    for (std::size_t i = 0; i < st_.subjects.size(); ++i) {
      const auto& s = st_.subjects[i];
      const auto& c = st_.components[static_cast<std::size_t>(s.component)];
      const VectorXd w = c.Lambda.col(q).cwiseQuotient(c.sigma2);
      const double aw = w.dot(c.Lambda.col(q));
      const double e = s.eta_tilde[l];
      for (Eigen::Index j = 0; j < resid_[i].cols(); ++j) {
        const int t = time_index(i, j);
        const double xi_old = st_.time.xi[static_cast<std::size_t>(t)](q, l);
        a[t] += aw * e * e;
        b[t] += (w.dot(resid_[i].col(j)) + aw * xi_old * e) * e;
      }
    }
    return gp_conditional(static_cast<std::size_t>(st_.time.kappa_xi_index), a, b, "xi column");
  }

  ModelContext ctx_;
  ChainState st_;
  std::vector<AllocationCache> alloc_cache_;
  std::vector<MatrixXd> resid_;
};

}  // namespace msd
