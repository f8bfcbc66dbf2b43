#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "msd/chain.hpp"
#include "msd/data_model.hpp"
#include "msd/links.hpp"
#include "msd/rng.hpp"
#include "msd/text.hpp"

namespace msd {

class EmptySubpopulation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Goodman-Kruskal gamma

/// Concordant and discordant pair counts; ties in either coordinate count
/// as neither.
struct PairCounts {
  std::int64_t concordant = 0;
  std::int64_t discordant = 0;

  std::optional<double> gamma() const {
    const std::int64_t d = concordant + discordant;
    if (d == 0) return std::nullopt;
    return static_cast<double>(concordant - discordant) / static_cast<double>(d);
  }
};

inline PairCounts pair_counts_exact(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("gamma: vectors differ in length");
  PairCounts c;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double s = (a[i] < a[j] ? 1 : a[i] > a[j] ? -1 : 0) * (b[i] < b[j] ? 1 : b[i] > b[j] ? -1 : 0);
      if (s > 0) ++c.concordant;
      if (s < 0) ++c.discordant;
    }
  }
  return c;
}

namespace detail {

inline std::int64_t tied_pairs(std::span<const double> sorted) {
  std::int64_t n = 0, run = 1;
  for (std::size_t i = 1; i <= sorted.size(); ++i) {
    if (i < sorted.size() && sorted[i] == sorted[i - 1]) {
      ++run;
    } else {
      n += run * (run - 1) / 2;
      run = 1;
    }
  }
  return n;
}

/// Strict inversions (i < j with v_i > v_j), sorting v in place.
inline std::int64_t merge_inversions(std::vector<double>& v, std::vector<double>& buf) {
  const std::size_t n = v.size();
  std::int64_t inv = 0;
  buf.resize(n);
  for (std::size_t width = 1; width < n; width *= 2) {
    for (std::size_t lo = 0; lo < n; lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, n), hi = std::min(lo + 2 * width, n);
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (v[j] < v[i]) {
          inv += static_cast<std::int64_t>(mid - i);
          buf[k++] = v[j++];
        } else {
          buf[k++] = v[i++];
        }
      }
      while (i < mid) buf[k++] = v[i++];
      while (j < hi) buf[k++] = v[j++];
    }
    std::swap(v, buf);
  }
  return inv;
}

}  // namespace detail

/// O(R log R) counting: sort by (a, b), count strict inversions of b, and
/// recover concordant pairs from the tie corrections.
inline PairCounts pair_counts_fast(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("gamma: vectors differ in length");
  const std::size_t n = a.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return a[i] < a[j] || (a[i] == a[j] && b[i] < b[j]); });
  std::vector<double> sa(n), sb(n);
  for (std::size_t k = 0; k < n; ++k) {
    sa[k] = a[idx[k]];
    sb[k] = b[idx[k]];
  }
  const std::int64_t n0 = static_cast<std::int64_t>(n) * (static_cast<std::int64_t>(n) - 1) / 2;
  const std::int64_t n1 = detail::tied_pairs(sa);
  std::int64_t n3 = 0, run = 1;
  for (std::size_t k = 1; k <= n; ++k) {
    if (k < n && sa[k] == sa[k - 1] && sb[k] == sb[k - 1]) {
      ++run;
    } else {
      n3 += run * (run - 1) / 2;
      run = 1;
    }
  }
  std::vector<double> buf;
  PairCounts c;
  c.discordant = detail::merge_inversions(sb, buf);
  const std::int64_t n2 = detail::tied_pairs(sb);  // sb is now sorted
  c.concordant = n0 - n1 - n2 + n3 - c.discordant;
  return c;
}

inline std::optional<double> gk_gamma_exact(std::span<const double> a, std::span<const double> b) {
  return pair_counts_exact(a, b).gamma();
}
inline std::optional<double> gk_gamma_fast(std::span<const double> a, std::span<const double> b) {
  return pair_counts_fast(a, b).gamma();
}

// ---------------------------------------------------------------------------
// Association items: ordered variables directly, nominal ones as indicators

struct GammaItem {
  std::string name;
  int variable = 0;
  int category = -1;  // >= 0 for a nominal indicator
};

inline std::vector<GammaItem> gamma_items(const Schema& schema) {
  std::vector<GammaItem> items;
  for (std::size_t k = 0; k < schema.responses.size(); ++k) {
    const auto& v = schema.responses[k];
    if (v.kind == VariableKind::nominal) {
      for (int c = 0; c < v.num_categories(); ++c) {
        items.push_back({v.name + "=" + v.categories[static_cast<std::size_t>(c)], static_cast<int>(k), c});
      }
    } else {
      items.push_back({v.name, static_cast<int>(k), -1});
    }
  }
  return items;
}

/// Item pairs, skipping indicator pairs of the same nominal variable (they
/// are mutually exclusive, so gamma is -1 by construction).
inline std::vector<std::pair<int, int>> gamma_pairs(const std::vector<GammaItem>& items) {
  std::vector<std::pair<int, int>> pairs;
  for (std::size_t a = 0; a < items.size(); ++a) {
    for (std::size_t b = a + 1; b < items.size(); ++b) {
      if (items[a].category >= 0 && items[a].variable == items[b].variable) continue;
      pairs.emplace_back(static_cast<int>(a), static_cast<int>(b));
    }
  }
  return pairs;
}

inline std::string pair_name(const std::vector<GammaItem>& items, std::pair<int, int> pr) {
  return items[static_cast<std::size_t>(pr.first)].name + "~" + items[static_cast<std::size_t>(pr.second)].name;
}

// ---------------------------------------------------------------------------
// Posterior predictive

struct PredictiveModel {
  Schema schema;
  LatentLayout layout;
  CovariateEncoding encoding{std::span<const CovariateSchema>{}};
  std::vector<double> time_grid;

  explicit PredictiveModel(const DrawHeader& h)
      : schema(h.schema), layout(latent_layout(h.schema.responses)), encoding(h.schema.covariates), time_grid(h.time_grid) {}
  PredictiveModel(Schema s, std::vector<double> times)
      : schema(std::move(s)), layout(latent_layout(schema.responses)), encoding(schema.covariates), time_grid(std::move(times)) {}

  int T() const { return static_cast<int>(time_grid.size()); }
};

/// R synthetic subjects observed at every grid time.
struct PredictiveDraw {
  std::vector<int> components;
  std::vector<std::vector<int>> covariates;  // R x num covariates
  std::vector<MatrixXd> responses;           // per time: R x num variables
};

enum class MixtureWeights { adjusted, unadjusted };

/// Component weights pi_h * P(x in C | theta_h), unnormalised.
inline std::vector<double> subpopulation_component_weights(const DrawRecord& d, const SubpopulationQuery& q, MixtureWeights mw) {
  const VectorXd& pi = mw == MixtureWeights::adjusted ? d.pi_tilde : d.pi;
  std::vector<double> w(d.components.size());
  for (std::size_t h = 0; h < d.components.size(); ++h) {
    double m = pi[static_cast<Eigen::Index>(h)];
    for (std::size_t l = 0; l < d.components[h].theta_x.size(); ++l) {
      const auto& th = d.components[h].theta_x[l];
      double s = 0.0;
      for (Eigen::Index c = 0; c < th.size(); ++c) {
        if (q.admits(l, static_cast<int>(c))) s += th[c];
      }
      m *= s;
    }
    w[h] = m;
  }
  return w;
}

inline PredictiveDraw predictive_subjects(const PredictiveModel& model, const DrawRecord& d, const SubpopulationQuery& q, std::size_t R,
                                          Rng& rng, MixtureWeights mw = MixtureWeights::adjusted) {
  const auto w = subpopulation_component_weights(d, q, mw);
  if (!(std::accumulate(w.begin(), w.end(), 0.0) > 0.0)) {
    throw EmptySubpopulation("subpopulation '" + q.label + "' has zero probability under every component");
  }
  const auto& resp = model.schema.responses;
  const int T = model.T(), p = model.layout.p;
  PredictiveDraw out;
  out.components.resize(R);
  out.covariates.assign(R, std::vector<int>(model.schema.covariates.size(), 0));
  out.responses.assign(static_cast<std::size_t>(T), MatrixXd(static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(resp.size())));
  VectorXd x(model.encoding.L), eta, ys(p), vx;
  std::vector<double> th;
  for (std::size_t r = 0; r < R; ++r) {
    const auto h = rng.categorical(w);
    const auto& c = d.components[h];
    out.components[r] = static_cast<int>(h);
    for (std::size_t l = 0; l < c.theta_x.size(); ++l) {
      th.assign(c.theta_x[l].data(), c.theta_x[l].data() + c.theta_x[l].size());
      for (std::size_t k = 0; k < th.size(); ++k) {
        if (!q.admits(l, static_cast<int>(k))) th[k] = 0.0;
      }
      out.covariates[r][l] = static_cast<int>(rng.categorical(th));
    }
    model.encoding.encode(out.covariates[r], x);
    const double eta_star = rng.normal();
    VectorXd eta_tilde(d.xi.empty() ? 0 : d.xi[0].cols());
    for (Eigen::Index l = 0; l < eta_tilde.size(); ++l) eta_tilde[l] = rng.normal();
    vx = c.V * x * eta_star;
    const VectorXd bx = c.B * x;
    for (int t = 0; t < T; ++t) {
      eta = vx + d.xi[static_cast<std::size_t>(t)] * eta_tilde;
      ys = bx + c.Omega * d.mu.row(t).transpose() + c.Lambda * eta;
      for (int k = 0; k < p; ++k) ys[k] += std::sqrt(c.sigma2[k]) * rng.normal();
      for (std::size_t k = 0; k < resp.size(); ++k) {
        const auto& rg = model.layout.ranges[k];
        out.responses[static_cast<std::size_t>(t)](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) =
            observed_value(resp[k], std::span<const double>(ys.data() + rg.offset, static_cast<std::size_t>(rg.dim)));
      }
    }
  }
  return out;
}

/// Item values for one time slice (R x num variables).
inline std::vector<std::vector<double>> item_columns(const MatrixXd& responses, const std::vector<GammaItem>& items) {
  std::vector<std::vector<double>> cols(items.size(), std::vector<double>(static_cast<std::size_t>(responses.rows())));
  for (std::size_t a = 0; a < items.size(); ++a) {
    for (Eigen::Index r = 0; r < responses.rows(); ++r) {
      const double y = responses(r, items[a].variable);
      cols[a][static_cast<std::size_t>(r)] = items[a].category >= 0 ? (y == items[a].category ? 1.0 : 0.0) : y;
    }
  }
  return cols;
}

/// gamma[pair][t] for one set of simulated subjects.
using GammaSlice = std::vector<std::vector<std::optional<double>>>;

inline GammaSlice gamma_slice(const std::vector<MatrixXd>& responses_by_time, const std::vector<GammaItem>& items,
                              const std::vector<std::pair<int, int>>& pairs) {
  GammaSlice g(pairs.size(), std::vector<std::optional<double>>(responses_by_time.size()));
  for (std::size_t t = 0; t < responses_by_time.size(); ++t) {
    const auto cols = item_columns(responses_by_time[t], items);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      g[k][t] = gk_gamma_fast(cols[static_cast<std::size_t>(pairs[k].first)], cols[static_cast<std::size_t>(pairs[k].second)]);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Trajectories

struct GammaRow {
  std::string pair;
  double time = 0.0;
  std::string subpop;
  std::optional<double> mean, lo95, hi95;
  std::size_t n_defined = 0;
};

/// Type-7 (linear interpolation) empirical quantile of sorted values.
inline double sorted_quantile(const std::vector<double>& v, double prob) {
  if (v.size() == 1) return v[0];
  const double h = prob * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline GammaRow summarize_cell(std::string pair, double time, std::string subpop, const std::vector<std::optional<double>>& values) {
  GammaRow row{std::move(pair), time, std::move(subpop), {}, {}, {}, 0};
  std::vector<double> v;
  for (const auto& x : values) {
    if (x) v.push_back(*x);
  }
  row.n_defined = v.size();
  if (v.empty()) return row;
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  row.mean = s / static_cast<double>(v.size());
  row.lo95 = sorted_quantile(v, 0.025);
  row.hi95 = sorted_quantile(v, 0.975);
  return row;
}

/// For every saved draw, simulate R subjects from the (sub)population and
/// compute gamma per item pair and time; summarise across draws. Draw k uses
/// the RNG stream derive_seed(seed, k).
inline std::vector<GammaRow> gamma_trajectories(const PredictiveModel& model, std::span<const DrawRecord> draws,
                                                const SubpopulationQuery& q, std::size_t R, std::uint64_t seed,
                                                MixtureWeights mw = MixtureWeights::adjusted) {
  if (draws.empty()) throw std::invalid_argument("gamma_trajectories: no draws");
  if (R < 2) throw std::invalid_argument("gamma_trajectories: R must be >= 2");
  const auto items = gamma_items(model.schema);
  const auto pairs = gamma_pairs(items);
  const auto T = static_cast<std::size_t>(model.T());
  std::vector<std::vector<std::vector<std::optional<double>>>> cells(pairs.size(),
                                                                      std::vector<std::vector<std::optional<double>>>(T));
  for (std::size_t k = 0; k < draws.size(); ++k) {
    Rng rng(derive_seed(seed, k));
    const auto pd = predictive_subjects(model, draws[k], q, R, rng, mw);
    const auto g = gamma_slice(pd.responses, items, pairs);
    for (std::size_t a = 0; a < pairs.size(); ++a) {
      for (std::size_t t = 0; t < T; ++t) cells[a][t].push_back(g[a][t]);
    }
  }
  std::vector<GammaRow> rows;
  for (std::size_t a = 0; a < pairs.size(); ++a) {
    for (std::size_t t = 0; t < T; ++t) rows.push_back(summarize_cell(pair_name(items, pairs[a]), model.time_grid[t], q.label, cells[a][t]));
  }
  return rows;
}

inline std::string gamma_csv(const std::vector<GammaRow>& rows) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  std::string out = "pair,time,subpop,mean,lo95,hi95,n_defined\n";
  for (const auto& r : rows) {
    out += r.pair + "," + format_double(r.time) + "," + r.subpop + "," + opt(r.mean) + "," + opt(r.lo95) + "," + opt(r.hi95) + "," +
           std::to_string(r.n_defined) + "\n";
  }
  return out;
}

inline std::vector<GammaRow> parse_gamma_csv(const std::string& text, const std::string& where = "gamma csv") {
  std::vector<GammaRow> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto opt = [&](const std::string& cell) -> std::optional<double> {
    if (trim(cell).empty()) return std::nullopt;
    const auto v = parse_double(cell);
    if (!v) throw DataError(where + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
    return v;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto c = split_csv_line(line);
    if (lineno == 1) {
      if (c.size() != 7 || c[0] != "pair") throw DataError(where + ":1: expected header pair,time,subpop,mean,lo95,hi95,n_defined");
      continue;
    }
    if (c.size() != 7) throw DataError(where + ":" + std::to_string(lineno) + ": expected 7 columns");
    const auto t = opt(c[1]);
    const auto n = opt(c[6]);
    if (!t || !n) throw DataError(where + ":" + std::to_string(lineno) + ": time and n_defined are required");
    rows.push_back({c[0], *t, c[2], opt(c[3]), opt(c[4]), opt(c[5]), static_cast<std::size_t>(*n)});
  }
  return rows;
}

}  // namespace msd
