#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "msd/association.hpp"
#include "msd/data_model.hpp"
#include "msd/links.hpp"
#include "msd/rng.hpp"

namespace msd {

/// Synthetic data-generating process. Latent responses (continuous, binary,
/// count, 3-category nominal; p = 5) follow
///   case 1: y* = D x~ + F_t x~ eta + e,            x~ = (1, x), sd(e) = 0.1
///   case 2: y* = D_s z + F_s z eta + e,            z = (1, x, t/T, (t/T)^2),
///           s ~ Bernoulli(0.5), sd(e) = 0.1 (s = 0) or 0.05 (s = 1)
///   case 3: as case 2 with stratum m in place of s, sd(e) = 0.1, sampled
///           n_m per stratum from strata of size N_m.
/// Each subject is seen at one random time in each of the wave triples
/// {1,2,3}, {4,5,6}, {7,8,9}.
struct DgpSpec {
  int case_id = 1;
  std::size_t n = 4000;
  std::uint64_t seed = 0;
  int T = 9;
  double entry_sd = 0.05;
  std::vector<double> noise_sd;
  std::vector<double> stratum_sizes;      // case 3
  std::vector<std::size_t> stratum_n;     // case 3
  std::vector<MatrixXd> D;                // case 1: one; else per group
  std::vector<MatrixXd> F;                // case 1: per time t = 1..T; else per group

  static constexpr int p = 5;

  std::size_t groups() const { return case_id == 1 ? 1 : D.size(); }
  double population_size() const {
    if (case_id != 3) return static_cast<double>(n);
    double s = 0.0;
    for (double v : stratum_sizes) s += v;
    return s;
  }
  std::size_t sample_size() const {
    if (case_id != 3) return n;
    std::size_t s = 0;
    for (auto v : stratum_n) s += v;
    return s;
  }
};

inline Schema simulation_schema() {
  Schema s;
  s.responses.push_back({"y_cont", VariableKind::continuous, {}, CutpointStyle::integer});
  s.responses.push_back({"y_bin", VariableKind::binary, {}, CutpointStyle::integer});
  s.responses.push_back({"y_count", VariableKind::count, {}, CutpointStyle::integer});
  s.responses.push_back({"y_nom", VariableKind::nominal, {"1", "2", "3"}, CutpointStyle::integer});
  s.covariates.push_back({"x", true, {"0", "1"}});
  return s;
}

/// Draws the coefficient matrices for a case. Matrices come from their own
/// stream, so they depend on the seed only.
inline DgpSpec make_dgp(int case_id, std::uint64_t seed, std::size_t n = 4000) {
  if (case_id < 1 || case_id > 3) throw std::invalid_argument("simulate: case must be 1, 2 or 3");
  DgpSpec d;
  d.case_id = case_id;
  d.seed = seed;
  d.n = n;
  Rng rng(derive_seed(seed, 0));
  auto draw = [&](int rows, int cols) {
    MatrixXd m(rows, cols);
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rng.normal(0.0, d.entry_sd);
    }
    return m;
  };
  const int p = DgpSpec::p;
  if (case_id == 1) {
    d.noise_sd = {0.1};
    d.D.push_back(draw(p, 2));
    MatrixXd f = draw(p, 2);  // F_0
    for (int t = 1; t <= d.T; ++t) {
      if (t == 4 || t == 7) f += draw(p, 2);
      d.F.push_back(f);
    }
  } else if (case_id == 2) {
    d.noise_sd = {0.1, 0.05};
    for (int s = 0; s < 2; ++s) {
      d.D.push_back(draw(p, 4));
      d.F.push_back(draw(p, 4));
    }
  } else {
    d.noise_sd = {0.1, 0.1, 0.1};
    d.stratum_sizes = {650000.0, 300000.0, 50000.0};
    d.stratum_n = {1500, 1500, 1500};
    for (int m = 0; m < 3; ++m) {
      d.D.push_back(draw(p, 4));
      d.F.push_back(draw(p, 4));
    }
  }
  return d;
}

namespace detail {

inline nlohmann::json matrix_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row;
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<Eigen::Index>(rows[r].size()) != m.cols()) throw DataError("dgp: ragged matrix");
    for (std::size_t c = 0; c < rows[r].size(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
  }
  return m;
}

}  // namespace detail

inline nlohmann::json dgp_to_json(const DgpSpec& d) {
  nlohmann::json j{{"case", d.case_id}, {"n", d.n},         {"seed", d.seed},
                   {"T", d.T},          {"entry_sd", d.entry_sd}, {"noise_sd", d.noise_sd}};
  if (d.case_id == 3) {
    j["stratum_sizes"] = d.stratum_sizes;
    j["stratum_n"] = d.stratum_n;
  }
  for (const auto& m : d.D) j["D"].push_back(detail::matrix_json(m));
  for (const auto& m : d.F) j["F"].push_back(detail::matrix_json(m));
  return j;
}

inline DgpSpec dgp_from_json(const nlohmann::json& j) {
  DgpSpec d;
  try {
    d.case_id = j.at("case");
    d.n = j.at("n");
    d.seed = j.at("seed");
    d.T = j.at("T");
    d.entry_sd = j.at("entry_sd");
    d.noise_sd = j.at("noise_sd").get<std::vector<double>>();
    if (d.case_id == 3) {
      d.stratum_sizes = j.at("stratum_sizes").get<std::vector<double>>();
      d.stratum_n = j.at("stratum_n").get<std::vector<std::size_t>>();
    }
    for (const auto& m : j.at("D")) d.D.push_back(detail::matrix_from_json(m));
    for (const auto& m : j.at("F")) d.F.push_back(detail::matrix_from_json(m));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dgp: ") + e.what());
  }
  return d;
}

/// Latent response for one subject-time given group g, covariate x, time t
/// (1-based) and subject factor eta.
inline VectorXd dgp_latent(const DgpSpec& d, std::size_t g, int x, int t, double eta, Rng& rng) {
  VectorXd y;
  double sd;
  if (d.case_id == 1) {
    const Eigen::Vector2d xt(1.0, x);
    y = d.D[0] * xt + d.F[static_cast<std::size_t>(t - 1)] * xt * eta;
    sd = d.noise_sd[0];
  } else {
    const double tt = static_cast<double>(t) / d.T;
    const Eigen::Vector4d z(1.0, x, tt, tt * tt);
    y = d.D[g] * z + d.F[g] * z * eta;
    sd = d.noise_sd[g];
  }
  for (Eigen::Index k = 0; k < y.size(); ++k) y[k] += sd * rng.normal();
  return y;
}

inline std::vector<double> dgp_observed(const Schema& schema, const LatentLayout& layout, const VectorXd& ystar) {
  return to_observed(std::span<const double>(ystar.data(), static_cast<std::size_t>(ystar.size())), layout, schema.responses);
}

/// Simulates the survey sample.
inline PanelDataset generate(const DgpSpec& d, Rng& rng) {
  PanelDataset ds;
  ds.schema = simulation_schema();
  const auto layout = latent_layout(ds.schema.responses);
  if (d.case_id == 3) ds.schema.population_size = d.population_size();
  std::vector<std::size_t> group;
  std::vector<double> weight;
  if (d.case_id == 3) {
    for (std::size_t m = 0; m < d.stratum_n.size(); ++m) {
      for (std::size_t r = 0; r < d.stratum_n[m]; ++r) {
        group.push_back(m);
        weight.push_back(d.stratum_sizes[m] / static_cast<double>(d.stratum_n[m]));
      }
    }
  } else {
    group.assign(d.n, 0);
    weight.assign(d.n, 1.0);
  }
  const int waves = d.T / 3;
  for (std::size_t i = 0; i < group.size(); ++i) {
    SubjectRecord s;
    char id[32];
    std::snprintf(id, sizeof id, "s%05zu", i + 1);
    s.id = id;
    s.weight = weight[i];
    const int x = rng.uniform() < 0.5 ? 1 : 0;
    std::size_t g = group[i];
    if (d.case_id == 2) g = rng.uniform() < 0.5 ? 1 : 0;
    s.covariates = {x};
    const double eta = rng.normal();
    for (int j = 1; j <= waves; ++j) {
      const int t = 3 * j - 2 + std::min(2, static_cast<int>(rng.uniform() * 3.0));
      Observation o;
      o.time = t;
      o.values = dgp_observed(ds.schema, layout, dgp_latent(d, g, x, t, eta, rng));
      o.missing.assign(o.values.size(), 0);
      s.observations.push_back(std::move(o));
    }
    ds.subjects.push_back(std::move(s));
  }
  ds.finalize();
  return ds;
}

/// "True" gamma per item pair and time from M forward draws of the
/// population (no sampling design; case-3 strata drawn proportionally to
/// N_m). Rows use the trajectory format with lo95 = hi95 = mean.
inline std::vector<GammaRow> oracle_gamma(const DgpSpec& d, std::size_t M, const SubpopulationQuery& q, Rng& rng) {
  if (M < 2) throw std::invalid_argument("oracle_gamma: M must be >= 2");
  const Schema schema = simulation_schema();
  const auto layout = latent_layout(schema.responses);
  std::vector<int> xs;
  for (int x = 0; x < 2; ++x) {
    if (q.admits(0, x)) xs.push_back(x);
  }
  if (xs.empty()) throw EmptySubpopulation("oracle_gamma: empty subpopulation");
  std::vector<double> stratum_p;
  if (d.case_id == 3) stratum_p = d.stratum_sizes;
  std::vector<MatrixXd> resp(static_cast<std::size_t>(d.T), MatrixXd(static_cast<Eigen::Index>(M), 4));
  for (std::size_t r = 0; r < M; ++r) {
    // x ~ Bernoulli(0.5) restricted to C
    const int x = xs.size() == 1 ? xs[0] : (rng.uniform() < 0.5 ? 1 : 0);
    std::size_t g = 0;
    if (d.case_id == 2) g = rng.uniform() < 0.5 ? 1 : 0;
    if (d.case_id == 3) g = rng.categorical(stratum_p);
    const double eta = rng.normal();
    for (int t = 1; t <= d.T; ++t) {
      const auto y = dgp_observed(schema, layout, dgp_latent(d, g, x, t, eta, rng));
      for (std::size_t k = 0; k < y.size(); ++k) resp[static_cast<std::size_t>(t - 1)](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = y[k];
    }
  }
  const auto items = gamma_items(schema);
  const auto pairs = gamma_pairs(items);
  const auto g = gamma_slice(resp, items, pairs);
  std::vector<GammaRow> rows;
  for (std::size_t a = 0; a < pairs.size(); ++a) {
    for (int t = 0; t < d.T; ++t) {
      GammaRow row{pair_name(items, pairs[a]), static_cast<double>(t + 1), q.label, {}, {}, {}, 0};
      if (const auto v = g[a][static_cast<std::size_t>(t)]) {
        row.mean = row.lo95 = row.hi95 = *v;
        row.n_defined = 1;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Scoring

struct MaeRow {
  std::string subpop;
  std::optional<double> time;  // nullopt for the average row
  double mae = 0.0;
  double log_mae = 0.0;
  std::size_t n_cells = 0;
};

/// Mean absolute error of estimated posterior means against the oracle,
/// per time point and averaged uniformly over all defined (pair, time)
/// cells, separately for each subpopulation.
inline std::vector<MaeRow> score_mae(const std::vector<GammaRow>& estimated, const std::vector<GammaRow>& oracle) {
  std::map<std::tuple<std::string, std::string, double>, double> truth;
  for (const auto& r : oracle) {
    if (r.mean) truth[{r.subpop, r.pair, r.time}] = *r.mean;
  }
  std::map<std::string, std::map<double, std::pair<double, std::size_t>>> acc;
  std::size_t matched = 0;
  for (const auto& r : estimated) {
    const auto it = truth.find({r.subpop, r.pair, r.time});
    if (it == truth.end() || !r.mean) continue;
    auto& cell = acc[r.subpop][r.time];
    cell.first += std::abs(*r.mean - it->second);
    ++cell.second;
    ++matched;
  }
  if (matched == 0) throw DataError("score: no (pair, time, subpop) keys shared by estimate and oracle");
  std::vector<MaeRow> rows;
  for (const auto& [subpop, times] : acc) {
    double total = 0.0;
    std::size_t cells = 0;
    for (const auto& [t, v] : times) {
      const double m = v.first / static_cast<double>(v.second);
      rows.push_back({subpop, t, m, std::log(m), v.second});
      total += v.first;
      cells += v.second;
    }
    const double m = total / static_cast<double>(cells);
    rows.push_back({subpop, std::nullopt, m, std::log(m), cells});
  }
  return rows;
}

/// Oracle rows with every mean replaced by zero: the null predictor.
inline std::vector<GammaRow> zero_estimate(std::vector<GammaRow> oracle) {
  for (auto& r : oracle) {
    if (r.mean) r.mean = r.lo95 = r.hi95 = 0.0;
  }
  return oracle;
}

inline std::optional<double> average_mae(const std::vector<MaeRow>& rows, const std::string& subpop) {
  for (const auto& r : rows) {
    if (r.subpop == subpop && !r.time) return r.mae;
  }
  return std::nullopt;
}

inline std::string mae_csv(const std::vector<MaeRow>& rows) {
  std::string out = "subpop,time,mae,log_mae,n_cells\n";
  for (const auto& r : rows) {
    out += r.subpop + "," + (r.time ? format_double(*r.time) : std::string("average")) + "," + format_double(r.mae) + "," +
           format_double(r.log_mae) + "," + std::to_string(r.n_cells) + "\n";
  }
  return out;
}

}  // namespace msd
