#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "msd/data_model.hpp"
#include "msd/links.hpp"
#include "msd/rng.hpp"
#include "msd/survey.hpp"

namespace msd {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Raised when a sampler step hits a numerical failure (non-PD system,
/// all-zero allocation probabilities). Carries enough context to debug.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class AllocationFactors {
  recompute,  // eta_ij rebuilt with the candidate component's V_h
  freeze,     // eta_ij held at the current component's value
};

inline std::vector<double> default_kappa_grid(int points = 25) {
  std::vector<double> g;
  for (int k = 1; k <= points; ++k) g.push_back(static_cast<double>(k) / points);
  return g;
}

struct ModelConfig {
  int truncation = 60;      // H
  int factor_dim = 4;       // Q
  int time_effect_dim = 4;  // Q_mu
  int factor_time_dim = 4;  // Q_eta
  std::vector<double> kappa_grid = default_kappa_grid();
  double alpha_shape = 0.25;
  double alpha_rate = 0.25;
  /// sigma^2_hk ~ IG(sigma2_shape, s_k / sigma2_scale_divisor), s_k the sample
  /// variance of the (transformed) response; 1 for nominal utilities.
  double sigma2_shape = 2.0;
  double sigma2_scale_divisor = 200.0;
  std::vector<double> sigma2_scales;  // per latent coordinate; overrides the data-based default
  double prior_mass_fraction = 0.01;
  double covariate_concentration = 1.0;
  double gp_jitter = 1e-6;
  int burn_in = 5000;
  int iterations = 10000;  // kept sweeps after burn-in
  int thin = 10;
  std::uint64_t seed = 1;
  AllocationFactors allocation_factors = AllocationFactors::recompute;

  int saved_draws() const { return thin > 0 ? iterations / thin : 0; }

  void validate(int p) const {
    if (truncation < 1) throw std::invalid_argument("config: truncation H must be >= 1");
    if (factor_dim < 1 || time_effect_dim < 1 || factor_time_dim < 1) {
      throw std::invalid_argument("config: factor dimensions must be >= 1");
    }
    if (p > 0 && (factor_dim >= p || time_effect_dim >= p)) {
      throw std::invalid_argument("config: Q and Q_mu must be smaller than the latent dimension p = " + std::to_string(p));
    }
    if (kappa_grid.empty()) throw std::invalid_argument("config: empty kappa grid");
    for (std::size_t k = 0; k < kappa_grid.size(); ++k) {
      if (!(kappa_grid[k] > 0.0 && kappa_grid[k] <= 1.0)) throw std::invalid_argument("config: kappa grid must lie in (0, 1]");
      if (k > 0 && !(kappa_grid[k] > kappa_grid[k - 1])) throw std::invalid_argument("config: kappa grid must be increasing");
    }
    if (!(alpha_shape > 0.0 && alpha_rate > 0.0)) throw std::invalid_argument("config: alpha prior must be positive");
    if (!(sigma2_shape > 0.0 && sigma2_scale_divisor > 0.0)) throw std::invalid_argument("config: sigma2 prior must be positive");
    if (!sigma2_scales.empty() && static_cast<int>(sigma2_scales.size()) != p) {
      throw std::invalid_argument("config: sigma2_scales must have one entry per latent coordinate");
    }
    for (double s : sigma2_scales) {
      if (!(s > 0.0)) throw std::invalid_argument("config: sigma2_scales must be positive");
    }
    if (!(prior_mass_fraction > 0.0 && prior_mass_fraction <= 1.0)) {
      throw std::invalid_argument("config: prior_mass_fraction must lie in (0, 1]");
    }
    if (!(covariate_concentration > 0.0)) throw std::invalid_argument("config: covariate_concentration must be positive");
    if (!(gp_jitter > 0.0)) throw std::invalid_argument("config: gp_jitter must be positive");
    if (burn_in < 0 || iterations < 0 || thin < 1) throw std::invalid_argument("config: bad schedule");
  }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"truncation", c.truncation},
      {"factor_dim", c.factor_dim},
      {"time_effect_dim", c.time_effect_dim},
      {"factor_time_dim", c.factor_time_dim},
      {"kappa_grid", c.kappa_grid},
      {"alpha_shape", c.alpha_shape},
      {"alpha_rate", c.alpha_rate},
      {"sigma2_shape", c.sigma2_shape},
      {"sigma2_scale_divisor", c.sigma2_scale_divisor},
      {"sigma2_scales", c.sigma2_scales},
      {"prior_mass_fraction", c.prior_mass_fraction},
      {"covariate_concentration", c.covariate_concentration},
      {"gp_jitter", c.gp_jitter},
      {"burn_in", c.burn_in},
      {"iterations", c.iterations},
      {"thin", c.thin},
      {"seed", c.seed},
      {"allocation_factors", c.allocation_factors == AllocationFactors::recompute ? "recompute" : "freeze"},
  };
}

/// Missing keys keep their defaults.
inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("truncation", c.truncation);
    get("factor_dim", c.factor_dim);
    get("time_effect_dim", c.time_effect_dim);
    get("factor_time_dim", c.factor_time_dim);
    get("kappa_grid", c.kappa_grid);
    if (j.contains("kappa_grid_size")) c.kappa_grid = default_kappa_grid(j.at("kappa_grid_size").get<int>());
    get("alpha_shape", c.alpha_shape);
    get("alpha_rate", c.alpha_rate);
    get("sigma2_shape", c.sigma2_shape);
    get("sigma2_scale_divisor", c.sigma2_scale_divisor);
    get("sigma2_scales", c.sigma2_scales);
    get("prior_mass_fraction", c.prior_mass_fraction);
    get("covariate_concentration", c.covariate_concentration);
    get("gp_jitter", c.gp_jitter);
    get("burn_in", c.burn_in);
    get("iterations", c.iterations);
    get("thin", c.thin);
    get("seed", c.seed);
    if (j.contains("allocation_factors")) {
      const auto m = j.at("allocation_factors").get<std::string>();
      if (m == "recompute") {
        c.allocation_factors = AllocationFactors::recompute;
      } else if (m == "freeze") {
        c.allocation_factors = AllocationFactors::freeze;
      } else {
        throw std::invalid_argument("config: allocation_factors must be recompute or freeze");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

/// theta for one mixture component.
struct ComponentParams {
  MatrixXd B;       // p x L
  MatrixXd Omega;   // p x Q_mu
  MatrixXd Lambda;  // p x Q
  MatrixXd V;       // Q x L
  VectorXd sigma2;  // p
  std::vector<VectorXd> theta_x;  // per covariate category probabilities
};

struct GlobalTimeEffects {
  MatrixXd mu;                  // T x Q_mu
  std::vector<MatrixXd> xi;     // T entries of Q x Q_eta
  int kappa_mu_index = 0;
  int kappa_xi_index = 0;
};

struct StickBreaking {
  VectorXd v;        // H-1
  VectorXd log1m_v;  // log(1 - v), exact even where v rounds to 1
  VectorXd pi;       // H
  double alpha = 1.0;

  /// Sets stick h from its two logarithms.
  void set(Eigen::Index h, std::pair<double, double> logs) {
    v[h] = std::exp(logs.first);
    log1m_v[h] = logs.second;
  }
  void set_from_v() { log1m_v = v.unaryExpr([](double x) { return std::log1p(-x); }); }
};

struct ShrinkageScales {
  MatrixXd delta2;  // p x (L + Q_mu + Q)
  MatrixXd zeta2;   // Q x L
};

struct SubjectState {
  int component = 0;
  double eta_star = 0.0;
  VectorXd eta_tilde;          // Q_eta
  MatrixXd ystar;              // p x n_i
  MatrixXd responses;          // num variables x n_i, imputed where missing
  std::vector<int> covariates;  // imputed where missing
  VectorXd x;                  // design vector for the current covariates
};

struct ChainState {
  StickBreaking sticks;
  std::vector<ComponentParams> components;
  GlobalTimeEffects time;
  std::vector<SubjectState> subjects;
  ShrinkageScales shrinkage;
  VectorXd pi_tilde;
  long iteration = 0;
};

// ---------------------------------------------------------------------------
// Gaussian-process time kernels

/// Psi(kappa)_{tt'} = exp(-kappa (t - t')^2) + jitter 1(t = t').
inline MatrixXd gp_kernel_matrix(std::span<const double> times, double kappa, double jitter) {
  const auto T = static_cast<Eigen::Index>(times.size());
  MatrixXd K(T, T);
  for (Eigen::Index a = 0; a < T; ++a) {
    for (Eigen::Index b = 0; b < T; ++b) {
      const double d = times[static_cast<std::size_t>(a)] - times[static_cast<std::size_t>(b)];
      K(a, b) = std::exp(-kappa * d * d) + (a == b ? jitter : 0.0);
      if (!std::isfinite(K(a, b))) throw NumericalError("gp_kernel_matrix: non-finite entry");
    }
  }
  return K;
}

/// Cholesky factors of Psi(c_k) for every grid point.
struct GpGrid {
  std::vector<double> values;
  std::vector<MatrixXd> chol;  // lower triangular
  std::vector<double> log_det;

  GpGrid() = default;
  GpGrid(std::span<const double> times, std::span<const double> grid, double jitter) : values(grid.begin(), grid.end()) {
    for (double c : grid) {
      Eigen::LLT<MatrixXd> llt(gp_kernel_matrix(times, c, jitter));
      if (llt.info() != Eigen::Success) throw NumericalError("GP kernel not positive definite at kappa = " + format_double(c));
      MatrixXd L = llt.matrixL();
      log_det.push_back(2.0 * L.diagonal().array().log().sum());
      chol.push_back(std::move(L));
    }
  }

  std::size_t size() const { return values.size(); }

  /// log N(f | 0, Psi(c_k)).
  double log_density(std::size_t k, const VectorXd& f) const {
    const VectorXd z = chol[k].triangularView<Eigen::Lower>().solve(f);
    return -0.5 * (static_cast<double>(f.size()) * std::log(2.0 * std::numbers::pi) + log_det[k] + z.squaredNorm());
  }
};

// ---------------------------------------------------------------------------
// Stick breaking

/// pi_h = v_h prod_{l<h} (1 - v_l), the products accumulated in log space.
inline VectorXd stick_to_weights(const VectorXd& v, const VectorXd& log1m_v) {
  const Eigen::Index H = v.size() + 1;
  VectorXd pi(H);
  double log_remaining = 0.0;
  for (Eigen::Index h = 0; h + 1 < H; ++h) {
    pi[h] = v[h] * std::exp(log_remaining);
    log_remaining += log1m_v[h];
  }
  pi[H - 1] = std::exp(log_remaining);
  return pi;
}

inline VectorXd stick_to_weights(const VectorXd& v) {
  return stick_to_weights(v, v.unaryExpr([](double x) { return std::log1p(-x); }));
}

// ---------------------------------------------------------------------------
// Densities

/// log N(ystar | mean, diag(sigma2)).
inline double latent_log_density(const Eigen::Ref<const VectorXd>& ystar, const Eigen::Ref<const VectorXd>& mean,
                                 const Eigen::Ref<const VectorXd>& sigma2) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < ystar.size(); ++k) {
    if (!(sigma2[k] > 0.0)) throw std::domain_error("latent_log_density: sigma2 must be positive");
    const double r = ystar[k] - mean[k];
    s += std::log(2.0 * std::numbers::pi * sigma2[k]) + r * r / sigma2[k];
  }
  return -0.5 * s;
}

/// eta = V x eta* + xi_t eta~.
inline VectorXd factor_value(const ComponentParams& c, const VectorXd& x, double eta_star, const MatrixXd& xi_t,
                             const VectorXd& eta_tilde) {
  return c.V * x * eta_star + xi_t * eta_tilde;
}

/// B x + Omega mu_t + Lambda eta.
inline VectorXd latent_mean(const ComponentParams& c, const VectorXd& x, const Eigen::Ref<const VectorXd>& mu_t, const VectorXd& eta) {
  return c.B * x + c.Omega * mu_t + c.Lambda * eta;
}

/// Covariance of y* with the subject factors integrated out; diagnostic use.
inline MatrixXd marginal_covariance(const ComponentParams& c, const VectorXd& x, const MatrixXd& xi_t) {
  const VectorXd lvx = c.Lambda * (c.V * x);
  const MatrixXd lxi = c.Lambda * xi_t;
  MatrixXd m = lvx * lvx.transpose() + lxi * lxi.transpose();
  m.diagonal() += c.sigma2;
  return 0.5 * (m + m.transpose());
}

// ---------------------------------------------------------------------------
// Model context: everything fixed for the life of a chain

struct ModelContext {
  const PanelDataset* data = nullptr;
  ModelConfig config;
  LatentLayout layout;
  CovariateEncoding encoding{std::span<const CovariateSchema>{}};
  int p = 0, L = 1, Q = 1, Qmu = 1, Qeta = 1, T = 0, H = 1;
  std::vector<int> coord_variable;   // latent coordinate -> response index
  std::vector<int> coord_position;   // position inside the variable's block
  VectorXd sigma2_shape;             // per coordinate
  VectorXd sigma2_scale;
  WeightSummary weights;
  std::vector<double> subject_weights;
  GpGrid gp;

  int Lstar() const { return L + Qmu + Q; }
  const std::vector<VariableSchema>& responses() const { return data->schema.responses; }
  const std::vector<CovariateSchema>& covariates() const { return data->schema.covariates; }
  std::size_t n() const { return data->n(); }
};

/// Sample variance of each response on the latent scale: raw values for
/// continuous/binary/integer-count, log(y + 0.5) for log-cutpoint counts.
/// Falls back to 1 when fewer than two values are observed or the variance
/// is zero, and is 1 for nominal utilities.
inline VectorXd response_scale(const PanelDataset& ds, const LatentLayout& layout) {
  VectorXd s = VectorXd::Ones(layout.p);
  for (std::size_t k = 0; k < ds.schema.responses.size(); ++k) {
    const auto& v = ds.schema.responses[k];
    if (v.kind == VariableKind::nominal) continue;
    double sum = 0.0, sq = 0.0;
    std::size_t m = 0;
    for (const auto& sub : ds.subjects) {
      for (const auto& o : sub.observations) {
        if (o.missing[k]) continue;
        double y = o.values[k];
        if (v.kind == VariableKind::count && v.cutpoint_style == CutpointStyle::log) y = std::log(y + 0.5);
        sum += y;
        sq += y * y;
        ++m;
      }
    }
    if (m < 2) continue;
    const double mean = sum / static_cast<double>(m);
    const double var = (sq - static_cast<double>(m) * mean * mean) / static_cast<double>(m - 1);
    if (var > 0.0 && std::isfinite(var)) s[layout.ranges[k].offset] = var;
  }
  return s;
}

inline ModelContext make_context(const PanelDataset& ds, const ModelConfig& config) {
  ModelContext ctx;
  ctx.data = &ds;
  ctx.config = config;
  ctx.layout = latent_layout(ds.schema.responses);
  ctx.encoding = CovariateEncoding(ds.schema.covariates);
  config.validate(ctx.layout.p);
  ctx.p = ctx.layout.p;
  ctx.L = ctx.encoding.L;
  ctx.Q = config.factor_dim;
  ctx.Qmu = config.time_effect_dim;
  ctx.Qeta = config.factor_time_dim;
  ctx.T = static_cast<int>(ds.time_grid.size());
  ctx.H = config.truncation;
  for (std::size_t k = 0; k < ctx.layout.ranges.size(); ++k) {
    for (int c = 0; c < ctx.layout.ranges[k].dim; ++c) {
      ctx.coord_variable.push_back(static_cast<int>(k));
      ctx.coord_position.push_back(c);
    }
  }
  ctx.sigma2_shape = VectorXd::Constant(ctx.p, config.sigma2_shape);
  if (!config.sigma2_scales.empty()) {
    ctx.sigma2_scale = Eigen::Map<const VectorXd>(config.sigma2_scales.data(), ctx.p);
  } else {
    ctx.sigma2_scale = response_scale(ds, ctx.layout) / config.sigma2_scale_divisor;
  }
  for (const auto& s : ds.subjects) ctx.subject_weights.push_back(s.weight);
  ctx.weights = summarize_weights(ctx.subject_weights, ds.population_size, config.prior_mass_fraction,
                                  static_cast<std::size_t>(ctx.H));
  ctx.gp = GpGrid(ds.time_grid, config.kappa_grid, config.gp_jitter);
  return ctx;
}

/// Draw f ~ N(0, Psi(c_k)) using the cached factor.
inline VectorXd draw_gp(const GpGrid& gp, std::size_t k, Rng& rng) {
  const auto T = gp.chol[k].rows();
  VectorXd z(T);
  for (Eigen::Index t = 0; t < T; ++t) z[t] = rng.normal();
  return gp.chol[k] * z;
}

/// Draws a component from the base measure given the shrinkage scales.
inline ComponentParams draw_component_prior(const ModelContext& ctx, const ShrinkageScales& sh, Rng& rng) {
  ComponentParams c;
  c.B.resize(ctx.p, ctx.L);
  c.Omega.resize(ctx.p, ctx.Qmu);
  c.Lambda.resize(ctx.p, ctx.Q);
  for (int k = 0; k < ctx.p; ++k) {
    for (int l = 0; l < ctx.Lstar(); ++l) {
      const double u = rng.normal(0.0, std::sqrt(sh.delta2(k, l)));
      if (l < ctx.L) {
        c.B(k, l) = u;
      } else if (l < ctx.L + ctx.Qmu) {
        c.Omega(k, l - ctx.L) = u;
      } else {
        c.Lambda(k, l - ctx.L - ctx.Qmu) = u;
      }
    }
  }
  c.V.resize(ctx.Q, ctx.L);
  for (int q = 0; q < ctx.Q; ++q) {
    for (int l = 0; l < ctx.L; ++l) c.V(q, l) = rng.normal(0.0, std::sqrt(sh.zeta2(q, l)));
  }
  c.sigma2.resize(ctx.p);
  for (int k = 0; k < ctx.p; ++k) c.sigma2[k] = rng.inv_gamma(ctx.sigma2_shape[k], ctx.sigma2_scale[k]);
  for (const auto& cov : ctx.covariates()) {
    const std::vector<double> conc(static_cast<std::size_t>(cov.num_categories()), ctx.config.covariate_concentration);
    const auto th = rng.dirichlet(conc);
    c.theta_x.push_back(Eigen::Map<const VectorXd>(th.data(), static_cast<Eigen::Index>(th.size())));
  }
  return c;
}

/// Starting state: uniform allocations, standard-normal subject factors,
/// feasible latent responses around zero, GP time effects at the grid
/// median kappa and component parameters from the base measure with unit
/// shrinkage scales.
inline ChainState init_state(const ModelContext& ctx, Rng& rng) {
  const auto& ds = *ctx.data;
  ChainState st;
  st.sticks.alpha = 1.0;
  st.sticks.v.resize(ctx.H - 1);
  for (int h = 0; h + 1 < ctx.H; ++h) st.sticks.v[h] = std::clamp(rng.beta(1.0, st.sticks.alpha), 1e-12, 1.0 - 1e-12);
  st.sticks.set_from_v();
  st.sticks.pi = stick_to_weights(st.sticks.v, st.sticks.log1m_v);

  st.shrinkage.delta2 = MatrixXd::Ones(ctx.p, ctx.Lstar());
  st.shrinkage.zeta2 = MatrixXd::Ones(ctx.Q, ctx.L);
  for (int h = 0; h < ctx.H; ++h) st.components.push_back(draw_component_prior(ctx, st.shrinkage, rng));

  const std::size_t G = ctx.gp.size();
  const int median = static_cast<int>((G - 1) / 2);
  st.time.kappa_mu_index = median;
  st.time.kappa_xi_index = median;
  st.time.mu.resize(ctx.T, ctx.Qmu);
  st.time.xi.assign(static_cast<std::size_t>(ctx.T), MatrixXd::Zero(ctx.Q, ctx.Qeta));
  if (ctx.T > 0) {
    for (int q = 0; q < ctx.Qmu; ++q) st.time.mu.col(q) = draw_gp(ctx.gp, static_cast<std::size_t>(median), rng);
    for (int q = 0; q < ctx.Q; ++q) {
      for (int l = 0; l < ctx.Qeta; ++l) {
        const VectorXd f = draw_gp(ctx.gp, static_cast<std::size_t>(median), rng);
        for (int t = 0; t < ctx.T; ++t) st.time.xi[static_cast<std::size_t>(t)](q, l) = f[t];
      }
    }
  }

  const auto& resp = ds.schema.responses;
  for (const auto& sub : ds.subjects) {
    SubjectState s;
    s.component = static_cast<int>(rng.uniform() * ctx.H);
    if (s.component >= ctx.H) s.component = ctx.H - 1;
    s.eta_star = rng.normal();
    s.eta_tilde.resize(ctx.Qeta);
    for (int l = 0; l < ctx.Qeta; ++l) s.eta_tilde[l] = rng.normal();
    s.covariates = sub.covariates;
    for (std::size_t l = 0; l < s.covariates.size(); ++l) {
      if (s.covariates[l] < 0) {
        const int d = ctx.covariates()[l].num_categories();
        s.covariates[l] = std::min(d - 1, static_cast<int>(rng.uniform() * d));
      }
    }
    s.x = ctx.encoding.encode(s.covariates);
    const auto ni = static_cast<Eigen::Index>(sub.observations.size());
    s.ystar = MatrixXd::Zero(ctx.p, ni);
    s.responses = MatrixXd::Zero(static_cast<Eigen::Index>(resp.size()), ni);
    for (Eigen::Index j = 0; j < ni; ++j) {
      const auto& o = sub.observations[static_cast<std::size_t>(j)];
      for (std::size_t k = 0; k < resp.size(); ++k) {
        const auto& r = ctx.layout.ranges[k];
        std::span<double> block(s.ystar.col(j).data() + r.offset, static_cast<std::size_t>(r.dim));
        if (o.missing[k]) {
          for (auto& b : block) b = rng.normal();
          s.responses(static_cast<Eigen::Index>(k), j) = observed_value(resp[k], block);
          continue;
        }
        const double y = o.values[k];
        s.responses(static_cast<Eigen::Index>(k), j) = y;
        make_feasible(resp[k], y, block);
        const std::vector<double> zeros(block.size(), 0.0), ones(block.size(), 1.0);
        sample_latent_block(resp[k], y, block, zeros, ones, rng);
      }
    }
    st.subjects.push_back(std::move(s));
  }
  st.pi_tilde = st.sticks.pi;
  return st;
}

/// Redraws covariates from theta_x of each subject's component, then y*
/// from the model and responses = g(y*), keeping parameters and factors.
inline void simulate_observables(const ModelContext& ctx, ChainState& st, Rng& rng) {
  const auto& resp = ctx.responses();
  const auto& ds = *ctx.data;
  for (std::size_t i = 0; i < st.subjects.size(); ++i) {
    auto& s = st.subjects[i];
    const auto& c = st.components[static_cast<std::size_t>(s.component)];
    for (std::size_t l = 0; l < s.covariates.size(); ++l) {
      s.covariates[l] = static_cast<int>(rng.categorical(std::span<const double>(c.theta_x[l].data(), static_cast<std::size_t>(c.theta_x[l].size()))));
    }
    s.x = ctx.encoding.encode(s.covariates);
    for (Eigen::Index j = 0; j < s.ystar.cols(); ++j) {
      const int t = ds.subjects[i].observations[static_cast<std::size_t>(j)].time_index;
      const VectorXd eta = factor_value(c, s.x, s.eta_star, st.time.xi[static_cast<std::size_t>(t)], s.eta_tilde);
      const VectorXd m = latent_mean(c, s.x, st.time.mu.row(t).transpose(), eta);
      for (int k = 0; k < ctx.p; ++k) s.ystar(k, j) = rng.normal(m[k], std::sqrt(c.sigma2[k]));
      for (std::size_t k = 0; k < resp.size(); ++k) {
        const auto& r = ctx.layout.ranges[k];
        s.responses(static_cast<Eigen::Index>(k), j) =
            observed_value(resp[k], std::span<const double>(s.ystar.col(j).data() + r.offset, static_cast<std::size_t>(r.dim)));
      }
    }
  }
}

/// A full draw from the joint prior: hyperparameters, sticks, components,
/// time effects, allocations, factors and observables.
inline ChainState draw_prior_state(const ModelContext& ctx, Rng& rng) {
  ChainState st = init_state(ctx, rng);
  st.sticks.alpha = rng.gamma(ctx.config.alpha_shape, ctx.config.alpha_rate);
  for (int h = 0; h + 1 < ctx.H; ++h) st.sticks.set(h, rng.log_beta(1.0, st.sticks.alpha));
  st.sticks.pi = stick_to_weights(st.sticks.v, st.sticks.log1m_v);
  for (Eigen::Index k = 0; k < st.shrinkage.delta2.size(); ++k) st.shrinkage.delta2.data()[k] = rng.inv_gamma(0.5, 0.5);
  for (Eigen::Index k = 0; k < st.shrinkage.zeta2.size(); ++k) st.shrinkage.zeta2.data()[k] = rng.inv_gamma(0.5, 0.5);
  for (auto& c : st.components) c = draw_component_prior(ctx, st.shrinkage, rng);
  const auto G = static_cast<int>(ctx.gp.size());
  st.time.kappa_mu_index = std::min(G - 1, static_cast<int>(rng.uniform() * G));
  st.time.kappa_xi_index = std::min(G - 1, static_cast<int>(rng.uniform() * G));
  if (ctx.T > 0) {
    for (int q = 0; q < ctx.Qmu; ++q) st.time.mu.col(q) = draw_gp(ctx.gp, static_cast<std::size_t>(st.time.kappa_mu_index), rng);
    for (int q = 0; q < ctx.Q; ++q) {
      for (int l = 0; l < ctx.Qeta; ++l) {
        const VectorXd f = draw_gp(ctx.gp, static_cast<std::size_t>(st.time.kappa_xi_index), rng);
        for (int t = 0; t < ctx.T; ++t) st.time.xi[static_cast<std::size_t>(t)](q, l) = f[t];
      }
    }
  }
  std::vector<double> pi(st.sticks.pi.data(), st.sticks.pi.data() + st.sticks.pi.size());
  for (auto& s : st.subjects) {
    s.component = static_cast<int>(rng.categorical(pi));
    s.eta_star = rng.normal();
    for (int l = 0; l < ctx.Qeta; ++l) s.eta_tilde[l] = rng.normal();
  }
  simulate_observables(ctx, st, rng);
  st.pi_tilde = st.sticks.pi;
  return st;
}

}  // namespace msd
