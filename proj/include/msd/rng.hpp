#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace msd {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of an independent stream keyed by (seed, stream).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

/// Random source shared by every sampler in the library. All draws go through
/// here so that a seed fully determines a run.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::mt19937_64& engine() { return engine_; }

  /// Uniform on the open interval (0, 1).
  double uniform() {
    double u;
    do {
      u = std::generate_canonical<double, 53>(engine_);
    } while (u <= 0.0 || u >= 1.0);
    return u;
  }

  double normal() { return normal_(engine_); }
  double normal(double mean, double sd) { return mean + sd * normal_(engine_); }

  /// Gamma with shape/rate parameterisation.
  double gamma(double shape, double rate) {
    if (!(shape > 0.0) || !(rate > 0.0)) throw std::domain_error("gamma: non-positive parameter");
    return gamma_(engine_, std::gamma_distribution<double>::param_type(shape, 1.0)) / rate;
  }

  /// log of a Gamma(shape, 1) variate; stays finite for tiny shapes.
  double log_gamma_variate(double shape) {
    if (!(shape > 0.0)) throw std::domain_error("gamma: non-positive shape");
    if (shape >= 1.0) {
      return std::log(gamma_(engine_, std::gamma_distribution<double>::param_type(shape, 1.0)));
    }
    const double g = gamma_(engine_, std::gamma_distribution<double>::param_type(shape + 1.0, 1.0));
    return std::log(g) + std::log(uniform()) / shape;
  }

  /// Inverse gamma: 1/X with X ~ Gamma(shape, rate = scale).
  double inv_gamma(double shape, double scale) { return 1.0 / gamma(shape, scale); }

  double beta(double a, double b) { return std::exp(log_beta(a, b).first); }

  /// (log v, log(1 - v)) for v ~ Beta(a, b). Both stay accurate when v
  /// rounds to 0 or 1 in double precision.
  std::pair<double, double> log_beta(double a, double b) {
    const double la = log_gamma_variate(a);
    const double lb = log_gamma_variate(b);
    const double m = std::max(la, lb);
    const double total = m + std::log(std::exp(la - m) + std::exp(lb - m));
    return {la - total, lb - total};
  }

  std::vector<double> dirichlet(std::span<const double> concentration) {
    std::vector<double> out(concentration.size());
    if (out.empty()) return out;
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = log_gamma_variate(concentration[k]);
    const double m = *std::max_element(out.begin(), out.end());
    double total = 0.0;
    for (auto& v : out) {
      v = std::exp(v - m);
      total += v;
    }
    for (auto& v : out) v /= total;
    return out;
  }

  /// Index drawn with probability proportional to w (non-negative).
  std::size_t categorical(std::span<const double> w) {
    double total = 0.0;
    for (double v : w) total += v;
    if (!(total > 0.0) || !std::isfinite(total)) throw std::domain_error("categorical: zero total mass");
    double u = uniform() * total;
    for (std::size_t k = 0; k < w.size(); ++k) {
      u -= w[k];
      if (u < 0.0) return k;
    }
    for (std::size_t k = w.size(); k-- > 0;) {
      if (w[k] > 0.0) return k;
    }
    return w.size() - 1;
  }

  /// Index drawn with probability proportional to exp(log_w), normalised
  /// through log-sum-exp.
  std::size_t categorical_log(std::span<const double> log_w) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : log_w) m = std::max(m, v);
    if (!std::isfinite(m)) throw std::domain_error("categorical_log: all-zero probabilities");
    scratch_.resize(log_w.size());
    for (std::size_t k = 0; k < log_w.size(); ++k) scratch_[k] = std::exp(log_w[k] - m);
    return categorical(scratch_);
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::gamma_distribution<double> gamma_{1.0, 1.0};
  std::vector<double> scratch_;
};

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace msd
