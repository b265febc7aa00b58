#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "hpt/gridsim.hpp"
#include "hpt/truncation.hpp"

namespace hpt::trunc {

inline std::vector<double> uniform_axis(double lo, double hi, int g) {
  if (g < 1 || !(hi > lo)) throw std::invalid_argument("axis needs g >= 1 and hi > lo");
  if (g == 1) return {0.5 * (lo + hi)};
  std::vector<double> t(g);
  for (int i = 0; i < g; ++i) t[i] = lo + (hi - lo) * i / (g - 1);
  return t;
}

// Builds Phi(i, k-1) as cumulative sums of per-component curves comp(j, theta).
template <class Comp>
LossCurveGrid cumulative_profile(const std::vector<double>& theta, int n, Comp comp) {
  LossCurveGrid P{theta, Mat(theta.size(), n)};
  for (size_t i = 0; i < theta.size(); ++i) {
    double run = 0;
    for (int j = 1; j <= n; ++j) {
      run += comp(j, theta[i]);
      P.phi(i, j - 1) = run;
    }
  }
  return P;
}

// Planted head/tail split: components 1..k0 are width-invariant convex bowls
// with staggered centres; the n - k0 tail components share a width-dependent
// affine piece of total size tail_scale * n^-1/2 that vanishes as n grows.
struct PlantedSpec {
  int k0 = 8;
  double tail_scale = 0.5;
  double tail_slope = 0;
  int g = 9;
};

inline LossCurveGrid planted_profile(const PlantedSpec& s, int n) {
  if (s.k0 < 1 || s.k0 >= n) throw std::invalid_argument("planted head must be smaller than the width");
  const auto theta = uniform_axis(0, 1, s.g);
  const double shrink = s.tail_scale / std::sqrt(static_cast<double>(n));
  return cumulative_profile(theta, n, [&](int j, double t) {
    if (j <= s.k0) {
      // Unequal weights and centres rule out accidental cancellations between
      // partial head sums at different grid points.
      const double w = 2.0 * (s.k0 + 1 - j) / (s.k0 * (s.k0 + 1));
      const double c = 0.5 + 0.15 * std::sin(1.7 * j);
      return w * (2 * (t - c) * (t - c) - 1);
    }
    return shrink * (1 + s.tail_slope * t) / (n - s.k0);
  });
}

// The one-dimensional synthetic loss family split into components:
// head (first `head` components) = phi_inf + A n^-alpha + tau/2 (theta - theta*_inf)^2,
// tail (the rest) = -tau B n^-beta (theta - theta*_inf) + tau/2 B^2 n^-2beta.
// Their sum is the family's phi_n exactly; the tail vanishes at infinite width.
inline LossCurveGrid gridsim_profile(const gridsim::SyntheticLossFamily& f, const std::vector<double>& theta,
                                     int components, int head, double n) {
  if (f.h != 1) throw std::invalid_argument("per-k embedding needs a one-dimensional family");
  if (head < 1 || head > components) throw std::invalid_argument("head size outside [1, components]");
  const double ts = f.theta_star_inf[0];
  const double a = std::isinf(n) ? 0.0 : f.loss_gap(n);
  const double b = std::isinf(n) ? 0.0 : f.hp_gap(n) * f.direction[0];
  const int tail = components - head;
  return cumulative_profile(theta, components, [&](int j, double t) {
    if (j <= head) return (f.phi_inf_star + a + 0.5 * f.tau_sc * (t - ts) * (t - ts)) / head;
    return (-f.tau_sc * b * (t - ts) + 0.5 * f.tau_sc * b * b) / tail;
  });
}

}  // namespace hpt::trunc
