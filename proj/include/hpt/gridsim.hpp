#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpt/core/rng.hpp"
#include "hpt/hpcore.hpp"

namespace hpt::gridsim {

// phi_n(theta) = phi_inf + A n^-alpha + (tau/2) |theta - theta*(n)|^2 with
// theta*(n) = theta*_inf + B n^-beta * direction, on the box [0,1]^h.
struct SyntheticLossFamily {
  double alpha = 1, beta = 1;
  double A = 0.1, B = 1;
  double tau_sc = 2;
  int h = 1;
  std::vector<double> theta_star_inf;  // defaults to 0.3 in every coordinate
  std::vector<double> direction;       // defaults to the normalized all-ones vector
  double phi_inf_star = 0;

  void finalize() {
    if (!(alpha > 0 && beta > 0 && A > 0 && B > 0 && tau_sc > 0 && h >= 1))
      throw std::invalid_argument("invalid synthetic family");
    if (theta_star_inf.empty()) theta_star_inf.assign(h, 0.3);
    if (direction.empty()) direction.assign(h, 1.0);
    if (static_cast<int>(theta_star_inf.size()) != h || static_cast<int>(direction.size()) != h)
      throw std::invalid_argument("family vectors must have length h");
    double nrm = 0;
    for (double v : direction) nrm += v * v;
    nrm = std::sqrt(nrm);
    if (!(nrm > 0)) throw std::invalid_argument("zero drift direction");
    for (double& v : direction) v /= nrm;
  }

  std::vector<double> theta_star(double n) const {
    std::vector<double> t(h);
    const double shift = B * std::pow(n, -beta);
    for (int i = 0; i < h; ++i) t[i] = theta_star_inf[i] + shift * direction[i];
    return t;
  }
  double loss_gap(double n) const { return A * std::pow(n, -alpha); }
  double hp_gap(double n) const { return B * std::pow(n, -beta); }
  double subopt_gap(double n) const { return 0.5 * tau_sc * std::pow(hp_gap(n), 2); }
};

inline double dist2(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

inline double synthetic_phi(const SyntheticLossFamily& f, double n, const std::vector<double>& theta) {
  if (static_cast<int>(theta.size()) != f.h) throw std::invalid_argument("theta dimension");
  for (double v : theta)
    if (v < 0 || v > 1) throw std::invalid_argument("theta outside the search box");
  return f.phi_inf_star + f.loss_gap(n) + 0.5 * f.tau_sc * dist2(theta, f.theta_star(n));
}

// Infinite-width limit (n = inf).
inline double synthetic_phi_inf(const SyntheticLossFamily& f, const std::vector<double>& theta) {
  return f.phi_inf_star + 0.5 * f.tau_sc * dist2(theta, f.theta_star_inf);
}

// Product grid with spacing s and a random offset u in [0, s)^h: coordinates
// u + s k inside [0, 1]. Its resolution is s sqrt(h) / 2.
struct PlacedGrid {
  double spacing;
  std::vector<double> offset;

  long double size() const {
    long double c = 1;
    for (double u : offset) c *= std::floor((1 - u) / spacing) + 1;
    return c;
  }
  double resolution() const { return spacing * std::sqrt(static_cast<double>(offset.size())) / 2; }
  // The loss is an isotropic quadratic, so the grid argmin is the nearest grid
  // point, found coordinate by coordinate.
  std::vector<double> nearest(const std::vector<double>& target) const {
    std::vector<double> out(offset.size());
    for (size_t i = 0; i < offset.size(); ++i) {
      const double kmax = std::floor((1 - offset[i]) / spacing);
      const double k = std::clamp(std::round((target[i] - offset[i]) / spacing), 0.0, kmax);
      out[i] = offset[i] + k * spacing;
    }
    return out;
  }
};

struct Ladders {
  std::vector<double> widths;    // 2^3 .. 2^20
  std::vector<double> spacings;  // 2^{-j/2}
  static Ladders defaults() {
    Ladders l;
    for (int k = 3; k <= 20; ++k) l.widths.push_back(std::ldexp(1.0, k));
    for (int j = 0; j <= 80; ++j) l.spacings.push_back(std::pow(2.0, -0.5 * j));
    return l;
  }
};

struct Budget {
  double F = 0;
  double r = 2;
};

struct SimResult {
  std::string strategy;
  double F = 0;
  double suboptimality = std::numeric_limits<double>::infinity();  // mean over placements
  double n_star = 0, M_star = 0;
  double spacing = 0, resolution = 0;
  double max_cost = 0;  // largest realized cost over placements
};

struct SimOptions {
  int placements = 32;
  std::uint64_t seed = 0;
  Ladders ladders = Ladders::defaults();
};

namespace detail {
inline std::vector<std::vector<double>> offsets(int h, double s, const SimOptions& o) {
  std::vector<std::vector<double>> out;
  for (int p = 0; p < o.placements; ++p) {
    Rng rng = make_rng(o.seed, "grid-placement/" + std::to_string(p) + "/" + std::to_string(s));
    std::uniform_real_distribution<double> u(0.0, s);
    std::vector<double> off(h);
    for (double& v : off) v = u(rng);
    out.push_back(std::move(off));
  }
  return out;
}

// Worst-case grid size over offsets, used for feasibility before placement.
inline double worst_grid_size(int h, double s) { return std::pow(std::floor(1 / s) + 1, h); }
}  // namespace detail

// Tune directly at width n over a grid and keep the best grid point. The
// compute-optimal (n, spacing) pair minimizes the placement-averaged
// suboptimality subject to |G| n^r <= F for every placement.
inline SimResult run_direct(SyntheticLossFamily f, const Budget& b, const SimOptions& o = {}) {
  f.finalize();
  SimResult best;
  best.strategy = "direct";
  best.F = b.F;
  for (double s : o.ladders.spacings) {
    const double g = detail::worst_grid_size(f.h, s);
    const auto offs = detail::offsets(f.h, s, o);
    for (double n : o.ladders.widths) {
      if (g * std::pow(n, b.r) > b.F) break;
      const auto ts = f.theta_star(n);
      double acc = 0, cost = 0;
      for (const auto& off : offs) {
        PlacedGrid pg{s, off};
        acc += synthetic_phi(f, n, pg.nearest(ts)) - f.phi_inf_star;
        cost = std::max(cost, static_cast<double>(pg.size()) * std::pow(n, b.r));
      }
      acc /= offs.size();
      if (acc < best.suboptimality) {
        best.suboptimality = acc;
        best.n_star = n;
        best.spacing = s;
        best.resolution = PlacedGrid{s, offs.front()}.resolution();
        best.max_cost = cost;
      }
    }
  }
  if (!std::isfinite(best.suboptimality)) throw std::invalid_argument("budget too small for a single run");
  return best;
}

// Tune at width n, then train once at width M >= 2n with the tuned hp.
inline SimResult run_transfer(SyntheticLossFamily f, const Budget& b, const SimOptions& o = {}) {
  f.finalize();
  SimResult best;
  best.strategy = "transfer";
  best.F = b.F;
  const auto& W = o.ladders.widths;
  for (double s : o.ladders.spacings) {
    const double g = detail::worst_grid_size(f.h, s);
    const auto offs = detail::offsets(f.h, s, o);
    for (double n : W) {
      const double tune = g * std::pow(n, b.r);
      if (tune > b.F) break;
      std::vector<std::vector<double>> picks;
      for (const auto& off : offs) picks.push_back(PlacedGrid{s, off}.nearest(f.theta_star(n)));
      for (double M : W) {
        if (M < 2 * n) continue;
        if (tune + std::pow(M, b.r) > b.F) break;
        double acc = 0, cost = 0;
        for (size_t p = 0; p < offs.size(); ++p) {
          acc += synthetic_phi(f, M, picks[p]) - f.phi_inf_star;
          cost = std::max(cost, static_cast<double>(PlacedGrid{s, offs[p]}.size()) * std::pow(n, b.r) +
                                    std::pow(M, b.r));
        }
        acc /= offs.size();
        if (acc < best.suboptimality) {
          best.suboptimality = acc;
          best.n_star = n;
          best.M_star = M;
          best.spacing = s;
          best.resolution = PlacedGrid{s, offs.front()}.resolution();
          best.max_cost = cost;
        }
      }
    }
  }
  if (!std::isfinite(best.suboptimality)) throw std::invalid_argument("budget too small for tuning plus transfer");
  return best;
}

inline PowerLawFit fit_frontier(const std::vector<SimResult>& results) {
  if (results.size() < 6) throw std::invalid_argument("frontier fit needs >= 6 budgets");
  double lo = std::numeric_limits<double>::infinity(), hi = 0;
  std::vector<std::pair<double, double>> pts;
  for (const auto& r : results) {
    lo = std::min(lo, r.F);
    hi = std::max(hi, r.F);
    pts.emplace_back(r.F, r.suboptimality);
  }
  if (hi / lo < 1e3) throw std::invalid_argument("frontier budgets must span >= 3 decades");
  return fit_power_law(pts);
}

inline double direct_rate(double alpha, int h, double r) { return 2 * alpha / (h * alpha + 2 * r); }
inline double transfer_rate(double alpha, double beta, int h, double r) {
  return std::min(alpha / r, 2 * beta / (h * beta + r));
}

inline std::vector<double> budget_ladder(double lo, double hi, int per_decade = 2) {
  std::vector<double> out;
  const int n = static_cast<int>(std::round(std::log10(hi / lo) * per_decade));
  for (int i = 0; i <= n; ++i) out.push_back(lo * std::pow(10.0, static_cast<double>(i) / per_decade));
  return out;
}

}  // namespace hpt::gridsim
