#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <span>
#include <stdexcept>
#include <vector>

#include "msd/data_model.hpp"
#include "msd/rng.hpp"

namespace msd {

/// Survey-weight summary used by the mixture-weight adjustment.
///
/// c = sum(w) / N rescales each subject's contribution to w_i / c, which is
/// approximately the number of population members the subject represents.
/// Prior masses a_h split the total prior sample size fraction * N equally
/// across the H components.
struct WeightSummary {
  double c = 1.0;
  std::vector<double> normalized;  // w_i / sum(w)
  std::vector<double> prior_mass;  // a_1..a_H
  double population_size = 0.0;

  double adjusted_mass(double w) const { return w / c; }
};

inline WeightSummary summarize_weights(std::span<const double> weights, double population_size, double prior_mass_fraction,
                                       std::size_t components) {
  if (!(population_size > 0.0)) throw std::invalid_argument("summarize_weights: N must be positive");
  if (!(prior_mass_fraction > 0.0 && prior_mass_fraction <= 1.0)) {
    throw std::invalid_argument("summarize_weights: prior mass fraction must lie in (0, 1]");
  }
  if (components == 0) throw std::invalid_argument("summarize_weights: need at least one component");
  WeightSummary s;
  s.population_size = population_size;
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw std::invalid_argument("summarize_weights: weights must be positive");
    total += w;
  }
  s.c = weights.empty() ? 1.0 : total / population_size;
  s.normalized.reserve(weights.size());
  for (double w : weights) s.normalized.push_back(w / total);
  s.prior_mass.assign(components, prior_mass_fraction * population_size / static_cast<double>(components));
  return s;
}

/// Dirichlet concentration a_h + sum_{i: s_i = h} w_i / c.
inline std::vector<double> adjusted_concentration(std::span<const int> allocations, std::span<const double> weights,
                                                  const WeightSummary& summary) {
  std::vector<double> conc = summary.prior_mass;
  for (std::size_t i = 0; i < allocations.size(); ++i) {
    const auto h = static_cast<std::size_t>(allocations[i]);
    if (h >= conc.size()) throw std::out_of_range("adjusted_concentration: allocation out of range");
    conc[h] += summary.adjusted_mass(weights[i]);
  }
  return conc;
}

/// Draws population-adjusted mixture weights.
inline std::vector<double> adjusted_weights(std::span<const int> allocations, std::span<const double> weights,
                                            const WeightSummary& summary, Rng& rng) {
  const auto conc = adjusted_concentration(allocations, weights, summary);
  return rng.dirichlet(conc);
}

/// m draws with replacement, subject i chosen with probability w_i / sum(w).
/// Used for descriptive weighted summaries only.
inline std::vector<std::size_t> weighted_resample(std::span<const double> weights, std::size_t m, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(m);
  if (m == 0) return out;
  std::vector<double> cdf(weights.size());
  double total = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] > 0.0)) throw std::invalid_argument("weighted_resample: weights must be positive");
    total += weights[i];
    cdf[i] = total;
  }
  if (weights.empty()) throw std::invalid_argument("weighted_resample: no subjects");
  for (std::size_t r = 0; r < m; ++r) {
    const double u = rng.uniform() * total;
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    out.push_back(static_cast<std::size_t>(it - cdf.begin()));
  }
  return out;
}

/// Weighted resample of a dataset's subjects, returned as ids.
inline std::vector<std::string> weighted_resample(const PanelDataset& ds, std::size_t m, Rng& rng) {
  std::vector<double> w;
  w.reserve(ds.n());
  for (const auto& s : ds.subjects) w.push_back(s.weight);
  std::vector<std::string> ids;
  if (m == 0) return ids;
  for (auto i : weighted_resample(std::span<const double>(w), m, rng)) ids.push_back(ds.subjects[i].id);
  return ids;
}

}  // namespace msd
