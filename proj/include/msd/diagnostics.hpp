#pragma once

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "msd/chain.hpp"

namespace msd {

/// Sample autocorrelation at lags 1..max_lag (biased denominator, the
/// usual convention for correlograms). Constant series give zeros.
inline std::vector<double> autocorrelations(const std::vector<double>& x, std::size_t max_lag) {
  const std::size_t n = x.size();
  std::vector<double> acf;
  if (n == 0) return acf;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  double c0 = 0.0;
  for (double v : x) c0 += (v - mean) * (v - mean);
  for (std::size_t k = 1; k <= max_lag && k < n; ++k) {
    double ck = 0.0;
    for (std::size_t i = 0; i + k < n; ++i) ck += (x[i] - mean) * (x[i + k] - mean);
    acf.push_back(c0 > 0.0 ? ck / c0 : 0.0);
  }
  return acf;
}

inline std::vector<double> running_means(const std::vector<double>& x) {
  std::vector<double> out;
  out.reserve(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += x[i];
    out.push_back(s / static_cast<double>(i + 1));
  }
  return out;
}

/// Per-parameter correlogram, running means and draw counts. Running means
/// are reported at up to `checkpoints` evenly spaced positions.
inline nlohmann::json diagnose(const std::vector<TraceRow>& rows, std::size_t max_lag = 50, std::size_t checkpoints = 20) {
  if (rows.empty()) throw DataError("diagnose: empty trace");
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> series;
  std::map<std::string, std::vector<long>> iters;
  for (const auto& r : rows) {
    if (!series.count(r.param)) order.push_back(r.param);
    series[r.param].push_back(r.value);
    iters[r.param].push_back(r.iter);
  }
  nlohmann::json out;
  out["format"] = "msd-diagnostics";
  out["version"] = 1;
  out["max_lag"] = max_lag;
  nlohmann::json params = nlohmann::json::array();
  for (const auto& name : order) {
    const auto& x = series[name];
    const auto rm = running_means(x);
    nlohmann::json run = nlohmann::json::array();
    const std::size_t stride = std::max<std::size_t>(1, x.size() / checkpoints);
    for (std::size_t i = stride - 1; i < x.size(); i += stride) run.push_back({{"iter", iters[name][i]}, {"mean", rm[i]}});
    params.push_back({{"param", name},
                      {"draws", x.size()},
                      {"mean", rm.back()},
                      {"autocorrelation", autocorrelations(x, max_lag)},
                      {"running_mean", run}});
  }
  out["parameters"] = params;
  return out;
}

}  // namespace msd
