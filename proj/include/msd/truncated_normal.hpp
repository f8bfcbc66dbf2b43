#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include <boost/math/special_functions/erf.hpp>

#include "msd/rng.hpp"

namespace msd {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal_quantile: p outside (0,1)");
  return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * p);
}

inline double normal_log_pdf(double x, double mean, double var) {
  const double r = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + r * r / var);
}

/// CDF of N(mean, sd^2) truncated to (lo, hi].
inline double truncated_normal_cdf(double x, double mean, double sd, double lo, double hi) {
  if (x <= lo) return 0.0;
  if (x >= hi) return 1.0;
  const double a = (lo - mean) / sd, b = (hi - mean) / sd, z = (x - mean) / sd;
  if (a >= 0.0) {
    // upper tail: use survival functions to keep precision
    const double sa = normal_cdf(-a), sb = normal_cdf(-b), sz = normal_cdf(-z);
    return (sa - sz) / (sa - sb);
  }
  const double pa = normal_cdf(a), pb = normal_cdf(b);
  return (normal_cdf(z) - pa) / (pb - pa);
}

namespace detail {

// Standard normal restricted to [a, b] with a >= 0 and a large enough that
// inverse-CDF evaluation underflows. Exponential proposal (Robert 1995), or a
// uniform proposal when the interval is narrow.
inline double tail_rejection(double a, double b, Rng& rng) {
  if (b - a < 1.0 / a) {
    for (;;) {
      const double z = a + (b - a) * rng.uniform();
      if (std::log(rng.uniform()) <= -0.5 * (z * z - a * a)) return z;
    }
  }
  const double lambda = 0.5 * (a + std::sqrt(a * a + 4.0));
  for (;;) {
    const double z = a - std::log(rng.uniform()) / lambda;
    if (z > b) continue;
    const double d = z - lambda;
    if (std::log(rng.uniform()) <= -0.5 * d * d) return z;
  }
}

// Standard normal restricted to (a, b] where b <= 0 or a < 0 < b.
inline double lower_side(double a, double b, Rng& rng) {
  const double pb = normal_cdf(b);
  if (pb < 1e-300) return -tail_rejection(-b, -a, rng);
  const double pa = normal_cdf(a);
  const double p = pa + rng.uniform() * (pb - pa);
  return normal_quantile(std::clamp(p, std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0)));
}

}  // namespace detail

/// Draw from N(mean, sd^2) truncated to (lo, hi]. The result always lies in
/// the half-open interval, including for bounds deep in the tails.
inline double sample_truncated_normal(double mean, double sd, double lo, double hi, Rng& rng) {
  if (!(sd > 0.0) || !std::isfinite(mean)) throw std::domain_error("truncated normal: bad mean/sd");
  if (!(lo < hi)) throw std::domain_error("truncated normal: empty interval");
  if (lo == -kInf && hi == kInf) return rng.normal(mean, sd);
  const double a = (lo - mean) / sd;
  const double b = (hi - mean) / sd;
  double z;
  if (a >= 0.0) {
    z = -detail::lower_side(-b, -a, rng);
  } else {
    z = detail::lower_side(a, b, rng);
  }
  double x = mean + sd * z;
  if (x <= lo) x = std::nextafter(lo, kInf);
  if (x > hi) x = hi;
  if (x <= lo) throw std::domain_error("truncated normal: interval below floating resolution");
  return x;
}

}  // namespace msd
