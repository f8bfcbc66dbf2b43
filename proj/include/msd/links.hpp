#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "msd/data_model.hpp"
#include "msd/rng.hpp"
#include "msd/truncated_normal.hpp"

namespace msd {

/// Raised when a latent coordinate has no feasible value, which only happens
/// if the chain state has been corrupted.
class InfeasibleRegion : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Half-open interval (lo, hi].
struct Interval {
  double lo = -kInf;
  double hi = kInf;
  bool contains(double x) const { return x > lo && x <= hi; }
};

/// Count cut-point a_r, with a_0 = -inf. Integer style: a_{r+1} = r.
/// Log style: a_{r+1} = log(r + 0.5).
inline double count_cutpoint(double r, CutpointStyle style) {
  if (r <= 0.0) return -kInf;
  return style == CutpointStyle::integer ? r - 1.0 : std::log(r - 0.5);
}

inline Interval count_interval(double r, CutpointStyle style) {
  return {count_cutpoint(r, style), count_cutpoint(r + 1.0, style)};
}

inline double count_from_latent(double ystar, CutpointStyle style) {
  double r;
  if (style == CutpointStyle::integer) {
    r = std::max(0.0, std::ceil(ystar));
  } else {
    r = std::max(0.0, std::ceil(std::exp(std::min(ystar, 700.0)) - 0.5));
    // floating-point guard so the result agrees with the cut-points exactly
    while (r > 0.0 && !(ystar > count_cutpoint(r, style))) r -= 1.0;
    while (ystar > count_cutpoint(r + 1.0, style)) r += 1.0;
  }
  return r;
}

/// Category (0-based) selected by d-1 utilities; the last category carries
/// an implicit zero utility and wins iff every utility is <= 0. Ties among
/// the explicit utilities go to the lowest index.
inline int nominal_from_utilities(std::span<const double> u) {
  int best = static_cast<int>(u.size());
  double best_u = 0.0;
  for (std::size_t l = 0; l < u.size(); ++l) {
    if (u[l] > best_u) {
      best_u = u[l];
      best = static_cast<int>(l);
    }
  }
  return best;
}

/// g(y*) for a single variable's latent block.
inline double observed_value(const VariableSchema& v, std::span<const double> block) {
  switch (v.kind) {
    case VariableKind::continuous: return block[0];
    case VariableKind::binary: return block[0] > 0.0 ? 1.0 : 0.0;
    case VariableKind::count: return count_from_latent(block[0], v.cutpoint_style);
    case VariableKind::nominal: return static_cast<double>(nominal_from_utilities(block));
  }
  return 0.0;
}

inline std::vector<double> to_observed(std::span<const double> ystar, const LatentLayout& layout,
                                       std::span<const VariableSchema> schema) {
  std::vector<double> y(schema.size());
  for (std::size_t k = 0; k < schema.size(); ++k) {
    const auto& r = layout.ranges[k];
    y[k] = observed_value(schema[k], ystar.subspan(static_cast<std::size_t>(r.offset), static_cast<std::size_t>(r.dim)));
  }
  return y;
}

/// Inverse image R(y) of one observed value. Scalar kinds are an interval
/// (a point for continuous); nominal is the set where the observed category's
/// utility dominates the others and the zero reference.
struct Region {
  VariableKind kind = VariableKind::continuous;
  Interval interval;
  double point = 0.0;
  int category = 0;
  int num_categories = 0;

  bool contains(std::span<const double> block) const {
    switch (kind) {
      case VariableKind::continuous: return block[0] == point;
      case VariableKind::binary:
      case VariableKind::count: return interval.contains(block[0]);
      case VariableKind::nominal: return nominal_from_utilities(block) == category;
    }
    return false;
  }
};

inline Region latent_region(const VariableSchema& v, double y) {
  Region r;
  r.kind = v.kind;
  switch (v.kind) {
    case VariableKind::continuous:
      r.point = y;
      r.interval = {std::nextafter(y, -kInf), y};
      break;
    case VariableKind::binary:
      if (y == 1.0) {
        r.interval = {0.0, kInf};
      } else if (y == 0.0) {
        r.interval = {-kInf, 0.0};
      } else {
        throw DataError("latent_region: binary value must be 0 or 1");
      }
      break;
    case VariableKind::count:
      if (!(y >= 0.0) || y != std::floor(y)) throw DataError("latent_region: count must be a non-negative integer");
      r.interval = count_interval(y, v.cutpoint_style);
      break;
    case VariableKind::nominal:
      if (y < 0.0 || y >= v.num_categories() || y != std::floor(y)) throw DataError("latent_region: invalid category");
      r.category = static_cast<int>(y);
      r.num_categories = v.num_categories();
      break;
  }
  return r;
}

inline std::vector<Region> latent_region(std::span<const double> y, std::span<const VariableSchema> schema) {
  std::vector<Region> out;
  out.reserve(schema.size());
  for (std::size_t k = 0; k < schema.size(); ++k) out.push_back(latent_region(schema[k], y[k]));
  return out;
}

/// Feasible interval for coordinate `coord` of a variable's latent block,
/// holding the other coordinates of the block at their current values.
inline Interval conditional_interval(const VariableSchema& v, double y, std::span<const double> block, int coord) {
  switch (v.kind) {
    case VariableKind::continuous: return {std::nextafter(y, -kInf), y};
    case VariableKind::binary: return y == 1.0 ? Interval{0.0, kInf} : Interval{-kInf, 0.0};
    case VariableKind::count: return count_interval(y, v.cutpoint_style);
    case VariableKind::nominal: {
      const int observed = static_cast<int>(y);
      const int reference = static_cast<int>(block.size());
      if (observed == reference) return {-kInf, 0.0};
      if (coord == observed) {
        double lo = 0.0;
        for (int l = 0; l < reference; ++l) {
          if (l != coord) lo = std::max(lo, block[static_cast<std::size_t>(l)]);
        }
        return {lo, kInf};
      }
      const double winner = block[static_cast<std::size_t>(observed)];
      // lower-index losers must stay strictly below the winner (tie rule)
      return {-kInf, coord < observed ? std::nextafter(winner, -kInf) : winner};
    }
  }
  return {};
}

/// Draws one latent coordinate from N(mean, var) restricted to the region
/// consistent with the observed value y. Continuous variables return y.
inline double sample_latent_coordinate(const VariableSchema& v, int coord, double y, std::span<const double> block,
                                       double mean, double var, Rng& rng) {
  if (v.kind == VariableKind::continuous) return y;
  if (!(var > 0.0)) throw std::domain_error("sample_latent_coordinate: variance must be positive");
  const Interval iv = conditional_interval(v, y, block, coord);
  if (!(iv.lo < iv.hi)) throw InfeasibleRegion("infeasible latent interval for '" + v.name + "'");
  return sample_truncated_normal(mean, std::sqrt(var), iv.lo, iv.hi, rng);
}

/// Redraws every coordinate of a variable block in turn so that the block
/// maps back to y. The block must already be feasible for nominal variables.
inline void sample_latent_block(const VariableSchema& v, double y, std::span<double> block, std::span<const double> mean,
                                std::span<const double> var, Rng& rng) {
  for (std::size_t c = 0; c < block.size(); ++c) {
    block[c] = sample_latent_coordinate(v, static_cast<int>(c), y, block, mean[c], var[c], rng);
  }
}

/// Puts an arbitrary block into R(y) without reference to any mean. Used to
/// repair the starting point of a nominal block before coordinate updates.
inline void make_feasible(const VariableSchema& v, double y, std::span<double> block) {
  if (latent_region(v, y).contains(block)) return;
  switch (v.kind) {
    case VariableKind::continuous: block[0] = y; break;
    case VariableKind::binary: block[0] = y == 1.0 ? 0.5 : -0.5; break;
    case VariableKind::count: {
      const auto iv = count_interval(y, v.cutpoint_style);
      if (std::isinf(iv.lo)) {
        block[0] = iv.hi - 0.5;
      } else {
        block[0] = 0.5 * (iv.lo + iv.hi);
      }
      break;
    }
    case VariableKind::nominal: {
      const int observed = static_cast<int>(y);
      for (std::size_t l = 0; l < block.size(); ++l) block[l] = -0.5;
      if (observed < static_cast<int>(block.size())) block[static_cast<std::size_t>(observed)] = 0.5;
      break;
    }
  }
}

}  // namespace msd
