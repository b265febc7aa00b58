#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hpt {

struct ScaledHyperparams {
  std::vector<double> theta;
  std::vector<double> tau;
  std::vector<std::string> names;
};

// theta_i * n^{-tau_i}
inline std::vector<double> scale_hps(const ScaledHyperparams& sh, double n) {
  if (sh.theta.size() != sh.tau.size() || sh.theta.empty())
    throw std::invalid_argument("theta and tau must have equal nonzero length");
  if (n < 1) throw std::invalid_argument("width must be >= 1");
  std::vector<double> out(sh.theta.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (sh.theta[i] < 0) throw std::invalid_argument("negative hp constant");
    out[i] = sh.theta[i] * std::pow(n, -sh.tau[i]);
  }
  return out;
}

struct HpGrid {
  std::vector<std::vector<double>> axes;
  double resolution = 0;

  // The search space is the bounding box of the axes. The farthest point of a
  // product grid cell from its corners is the cell centre.
  static HpGrid make(std::vector<std::vector<double>> axes) {
    HpGrid g{std::move(axes), 0};
    double acc = 0;
    for (const auto& ax : g.axes) {
      if (ax.size() < 2) throw std::invalid_argument("grid axis needs >= 2 points");
      double gap = 0;
      for (size_t i = 1; i < ax.size(); ++i) {
        if (!(ax[i] > ax[i - 1])) throw std::invalid_argument("grid axis must be strictly increasing");
        gap = std::max(gap, ax[i] - ax[i - 1]);
      }
      acc += 0.25 * gap * gap;
    }
    g.resolution = std::sqrt(acc);
    return g;
  }
};

using Curve = std::vector<std::pair<double, double>>;  // (hp value, metric)

// Smallest value wins; ties go to the smaller hp value.
inline std::pair<double, double> argmin_on_grid(const Curve& curve) {
  if (curve.empty()) throw std::invalid_argument("empty curve");
  const std::pair<double, double>* best = nullptr;
  for (const auto& p : curve) {
    if (!std::isfinite(p.second) || !std::isfinite(p.first))
      throw std::invalid_argument("non-finite value on curve");
    if (!best || p.second < best->second || (p.second == best->second && p.first < best->first))
      best = &p;
  }
  return *best;
}

struct PowerLawFit {
  double exponent = 0;
  double log_prefactor = 0;
  double r_squared = 0;
  int n_points = 0;
  double offset = 0;  // nonzero only for the offset fit
};

inline PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& pts) {
  if (pts.size() < 3) throw std::invalid_argument("power-law fit needs >= 3 points");
  const double m = static_cast<double>(pts.size());
  double sx = 0, sy = 0;
  for (auto [n, y] : pts) {
    if (!(y > 0) || !(n > 0)) throw std::invalid_argument("power-law fit needs positive values");
    sx += std::log(n);
    sy += std::log(y);
  }
  const double mx = sx / m, my = sy / m;
  double sxx = 0, sxy = 0, syy = 0;
  for (auto [n, y] : pts) {
    const double dx = std::log(n) - mx, dy = std::log(y) - my;
    sxx += dx * dx;
    sxy += dx * dy;
    syy += dy * dy;
  }
  if (sxx == 0) throw std::invalid_argument("power-law fit needs distinct n");
  PowerLawFit f;
  f.exponent = sxy / sxx;
  f.log_prefactor = my - f.exponent * mx;
  double sse = 0;
  for (auto [n, y] : pts) {
    const double r = std::log(y) - f.log_prefactor - f.exponent * std::log(n);
    sse += r * r;
  }
  f.r_squared = syy > 0 ? std::clamp(1.0 - sse / syy, 0.0, 1.0) : 1.0;
  f.n_points = static_cast<int>(pts.size());
  return f;
}

namespace detail {
// Unexplained fraction 1 - r^2 of the log-log fit after subtracting off.
// Raw SSE would be useless here: it shrinks as the offset runs away.
inline double log_sse(const std::vector<std::pair<double, double>>& pts, double off) {
  std::vector<std::pair<double, double>> shifted;
  for (auto [n, y] : pts) shifted.emplace_back(n, y - off);
  return 1 - fit_power_law(shifted).r_squared;
}
}  // namespace detail

// y = C n^{-alpha} + y_inf. The offset is found by a coarse log-spaced scan of
// the distance below min(y), refined with golden section; the inner problem is
// the ordinary log-log fit.
inline PowerLawFit fit_power_law_offset(const std::vector<std::pair<double, double>>& pts) {
  if (pts.size() < 4) throw std::invalid_argument("offset fit needs >= 4 points");
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  for (auto [n, y] : pts) {
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  const double span = ymax - ymin;
  if (!(span > 0)) throw std::invalid_argument("offset fit needs varying values");
  auto sse_at = [&](double logd) { return detail::log_sse(pts, ymin - std::exp(logd)); };
  const double lo = std::log(span * 1e-6), hi = std::log(span * 1e3);
  const int scan = 240;
  int bi = 0;
  double bv = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= scan; ++i) {
    const double v = sse_at(lo + (hi - lo) * i / scan);
    if (v < bv) {
      bv = v;
      bi = i;
    }
  }
  double a = lo + (hi - lo) * std::max(0, bi - 1) / scan;
  double b = lo + (hi - lo) * std::min(scan, bi + 1) / scan;
  const double gr = 0.5 * (std::sqrt(5.0) - 1);
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = sse_at(c), fd = sse_at(d);
  for (int it = 0; it < 100 && b - a > 1e-12; ++it) {
    if (fc < fd) {
      b = d; d = c; fd = fc;
      c = b - gr * (b - a); fc = sse_at(c);
    } else {
      a = c; c = d; fc = fd;
      d = a + gr * (b - a); fd = sse_at(d);
    }
  }
  const double off = ymin - std::exp(0.5 * (a + b));
  std::vector<std::pair<double, double>> shifted;
  for (auto [n, y] : pts) shifted.emplace_back(n, y - off);
  auto f = fit_power_law(shifted);
  f.offset = off;
  return f;
}

struct GapEstimates {
  std::vector<int> widths;
  std::vector<double> a, b, c;
  std::vector<double> phi_star, theta_star;
  int proxy_width = 0;
};

struct GapOptions {
  // Replace the grid argmin by the vertex of the parabola through it and its
  // two neighbours. Off by default: gaps are then grid-resolution limited.
  bool refine = false;
};

namespace detail {
struct Located {
  double hp, value;
  size_t index;
};

inline Located locate_min(const Curve& curve, bool refine) {
  Curve finite;
  for (const auto& p : curve)
    if (std::isfinite(p.second)) finite.push_back(p);
  const auto best = argmin_on_grid(finite);
  size_t i = 0;
  while (curve[i] != best) ++i;
  Located out{best.first, best.second, i};
  if (!refine || i == 0 || i + 1 >= curve.size()) return out;
  const auto& [x0, y0] = curve[i - 1];
  const auto& [x1, y1] = curve[i];
  const auto& [x2, y2] = curve[i + 1];
  if (!std::isfinite(y0) || !std::isfinite(y2)) return out;
  const double d01 = (y1 - y0) / (x1 - x0), d12 = (y2 - y1) / (x2 - x1);
  const double a2 = (d12 - d01) / (x2 - x0);
  if (!(a2 > 0)) return out;
  const double xv = 0.5 * (x0 + x1) - d01 / (2 * a2);
  out.hp = std::clamp(xv, x0, x2);
  out.value = y0 + d01 * (out.hp - x0) + a2 * (out.hp - x0) * (out.hp - x1);
  return out;
}

// Value of the curve at hp, by the parabola through the three nearest grid points.
inline double eval_near(const Curve& curve, double hp) {
  size_t i = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (size_t j = 0; j < curve.size(); ++j) {
    const double dist = std::abs(curve[j].first - hp);
    if (dist < bd) { bd = dist; i = j; }
  }
  if (bd == 0 || curve.size() < 3) return curve[i].second;
  i = std::clamp<size_t>(i, 1, curve.size() - 2);
  const auto& [x0, y0] = curve[i - 1];
  const auto& [x1, y1] = curve[i];
  const auto& [x2, y2] = curve[i + 1];
  const double d01 = (y1 - y0) / (x1 - x0), d12 = (y2 - y1) / (x2 - x1);
  const double a2 = (d12 - d01) / (x2 - x0);
  return y0 + d01 * (hp - x0) + a2 * (hp - x0) * (hp - x1);
}
}  // namespace detail

// Gaps of each width's curve against the proxy width's curve, all curves on
// one shared hp grid. Diverged cells (+inf) are skipped when locating minima.
inline GapEstimates estimate_gaps(const std::map<int, Curve>& surfaces, int proxy_width,
                                  GapOptions opt = {}) {
  auto it = surfaces.find(proxy_width);
  if (it == surfaces.end()) throw std::invalid_argument("proxy width missing");
  const Curve& proxy = it->second;
  for (const auto& [n, c] : surfaces) {
    if (c.size() != proxy.size()) throw std::invalid_argument("hp grids differ across widths");
    for (size_t i = 0; i < c.size(); ++i)
      if (c[i].first != proxy[i].first) throw std::invalid_argument("hp grids differ across widths");
  }
  const auto pm = detail::locate_min(proxy, opt.refine);
  GapEstimates g;
  g.proxy_width = proxy_width;
  for (const auto& [n, c] : surfaces) {
    g.widths.push_back(n);
    if (n == proxy_width) {
      g.a.push_back(0);
      g.b.push_back(0);
      g.c.push_back(0);
      g.phi_star.push_back(pm.value);
      g.theta_star.push_back(pm.hp);
      continue;
    }
    const auto m = detail::locate_min(c, opt.refine);
    g.phi_star.push_back(m.value);
    g.theta_star.push_back(m.hp);
    g.a.push_back(std::abs(m.value - pm.value));
    g.b.push_back(std::abs(m.hp - pm.hp));
    const double at = opt.refine ? detail::eval_near(proxy, m.hp) : proxy[m.index].second;
    g.c.push_back(m.hp == pm.hp ? 0.0 : std::abs(at - pm.value));
  }
  return g;
}

enum class TransferVerdict { fast_useful, not_fast };

inline const char* to_string(TransferVerdict v) {
  return v == TransferVerdict::fast_useful ? "fast_useful" : "not_fast";
}

inline TransferVerdict classify_transfer(double alpha, double beta) {
  if (!(alpha > 0)) throw std::invalid_argument("alpha must be positive");
  if (beta < 0) throw std::invalid_argument("beta must be nonnegative");
  return beta > alpha / 2 ? TransferVerdict::fast_useful : TransferVerdict::not_fast;
}

}  // namespace hpt
