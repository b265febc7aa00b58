#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hpt::trunc {

using Mat = Eigen::MatrixXd;

// Phi(i, k-1) = phi_n^k(theta_i); column n-1 is the total loss phi_n.
struct LossCurveGrid {
  std::vector<double> theta;
  Mat phi;

  int width() const { return static_cast<int>(phi.cols()); }
  int g() const { return static_cast<int>(theta.size()); }
  double at(int i, int k) const { return phi(i, k - 1); }
  double total(int i) const { return phi(i, phi.cols() - 1); }

  void validate() const {
    if (theta.empty() || static_cast<Eigen::Index>(theta.size()) != phi.rows())
      throw std::invalid_argument("hp axis and array rows disagree");
    if (phi.cols() < 1) throw std::invalid_argument("empty k axis");
    for (size_t i = 1; i < theta.size(); ++i)
      if (!(theta[i] > theta[i - 1])) throw std::invalid_argument("hp axis must be strictly increasing");
  }
};

using TruncationVector = std::vector<int>;

struct ToleranceConfig {
  double eps_cvx = 0.15;
  int eps_amin = 1;  // grid cells
  // Multiples of (hp range); see tau_scale.
  std::vector<double> tau_grid{0, 1e-4, 1e-3, 1e-2, 1e-1, 1};
};

inline double second_difference(const std::vector<double>& x, const std::vector<double>& y, size_t i) {
  const double a = x[i - 1], b = x[i], c = x[i + 1];
  return 2 * (y[i - 1] / ((a - b) * (a - c)) + y[i] / ((b - a) * (b - c)) + y[i + 1] / ((c - a) * (c - b)));
}

inline double conv_err(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() < 3 || x.size() != y.size()) throw std::invalid_argument("conv_err needs >= 3 points");
  int neg = 0;
  for (size_t i = 1; i + 1 < x.size(); ++i)
    if (second_difference(x, y, i) < 0) ++neg;
  return static_cast<double>(neg) / static_cast<double>(x.size() - 2);
}

inline double lipschitz(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() < 2 || x.size() != y.size()) throw std::invalid_argument("lipschitz needs >= 2 points");
  double m = 0;
  for (size_t i = 0; i + 1 < x.size(); ++i) {
    const double dx = x[i + 1] - x[i];
    if (dx == 0) throw std::invalid_argument("duplicate hp value");
    m = std::max(m, std::abs((y[i + 1] - y[i]) / dx));
  }
  return m;
}

// Minimum three-point curvature estimate over interior points.
inline double curvature(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() < 3) throw std::invalid_argument("curvature needs >= 3 points");
  double m = std::numeric_limits<double>::infinity();
  for (size_t i = 1; i + 1 < x.size(); ++i) m = std::min(m, second_difference(x, y, i));
  return m;
}

inline size_t argmin_index(const std::vector<double>& y) {
  return static_cast<size_t>(std::min_element(y.begin(), y.end()) - y.begin());
}

inline std::vector<double> topk_curve(const LossCurveGrid& P, const TruncationVector& k) {
  std::vector<double> y(P.g());
  for (int i = 0; i < P.g(); ++i) y[i] = P.at(i, k[i]);
  return y;
}

inline std::vector<double> residual_curve(const LossCurveGrid& P, const TruncationVector& k) {
  std::vector<double> y(P.g());
  for (int i = 0; i < P.g(); ++i) y[i] = P.total(i) - P.at(i, k[i]);
  return y;
}

inline std::vector<double> total_curve(const LossCurveGrid& P) {
  std::vector<double> y(P.g());
  for (int i = 0; i < P.g(); ++i) y[i] = P.total(i);
  return y;
}

inline void check_kappa(const TruncationVector& k, int g, int n) {
  if (static_cast<int>(k.size()) != g) throw std::invalid_argument("kappa length must match the hp grid");
  for (int v : k)
    if (v < 1 || v > n) throw std::out_of_range("kappa entry outside [1, n]");
}

// Mean absolute head gap plus weighted Lipschitz constants of both residual
// curves. Linear interpolation makes the continuous Lipschitz constant equal
// to the largest adjacent slope.
inline double proxy_objective(const TruncationVector& k, double tau1, double tau2, const LossCurveGrid& Pn,
                              const LossCurveGrid& Pmax) {
  check_kappa(k, Pn.g(), Pn.width());
  if (Pmax.g() != Pn.g() || Pmax.width() < Pn.width()) throw std::invalid_argument("reference grid mismatch");
  double head = 0;
  for (int i = 0; i < Pn.g(); ++i) head += std::abs(Pn.at(i, k[i]) - Pmax.at(i, k[i]));
  head /= Pn.g();
  double val = head;
  if (Pn.g() >= 2) {
    if (tau1 != 0) val += tau1 * lipschitz(Pn.theta, residual_curve(Pn, k));
    if (tau2 != 0) val += tau2 * lipschitz(Pmax.theta, residual_curve(Pmax, k));
  }
  return val;
}

struct ProxyResult {
  TruncationVector kappa;
  double objective = 0;
  int sweeps = 0;
  bool cap_hit = false;
  std::vector<double> objective_per_sweep;
};

constexpr int kSweepCap = 50;

// Coordinate descent from kappa = max(1, n/2). A coordinate moves only on a
// strict improvement; among equal-scoring alternatives the largest k wins.
inline ProxyResult minimize_proxy(const LossCurveGrid& Pn, const LossCurveGrid& Pmax, double tau1, double tau2,
                                  int sweep_cap = kSweepCap) {
  Pn.validate();
  Pmax.validate();
  const int n = Pn.width(), g = Pn.g();
  ProxyResult r;
  r.kappa.assign(g, std::max(1, n / 2));
  double cur = proxy_objective(r.kappa, tau1, tau2, Pn, Pmax);
  r.objective_per_sweep.push_back(cur);
  bool changed = true;
  while (changed) {
    if (r.sweeps == sweep_cap) {
      r.cap_hit = true;
      break;
    }
    changed = false;
    ++r.sweeps;
    for (int i = 0; i < g; ++i) {
      TruncationVector trial = r.kappa;
      int best_k = r.kappa[i];
      double best = cur;
      for (int k = n; k >= 1; --k) {
        if (k == r.kappa[i]) continue;
        trial[i] = k;
        const double s = proxy_objective(trial, tau1, tau2, Pn, Pmax);
        if (s < best) {
          best = s;
          best_k = k;
        }
      }
      if (best_k != r.kappa[i]) {
        r.kappa[i] = best_k;
        cur = best;
        changed = true;
      }
    }
    r.objective_per_sweep.push_back(cur);
  }
  r.objective = cur;
  return r;
}

// Exhaustive oracle over [n]^g; ties resolve to the lexicographically first vector.
inline ProxyResult brute_force_proxy(const LossCurveGrid& Pn, const LossCurveGrid& Pmax, double tau1, double tau2) {
  const int n = Pn.width(), g = Pn.g();
  if (std::pow(static_cast<double>(n), g) > 1e7) throw std::invalid_argument("instance too large for brute force");
  TruncationVector k(g, 1);
  ProxyResult best;
  best.objective = std::numeric_limits<double>::infinity();
  while (true) {
    const double v = proxy_objective(k, tau1, tau2, Pn, Pmax);
    if (v < best.objective) {
      best.objective = v;
      best.kappa = k;
    }
    int i = g - 1;
    while (i >= 0 && k[i] == n) k[i--] = 1;
    if (i < 0) break;
    ++k[i];
  }
  return best;
}

// The tau grid is dimensionless: a raw penalty is tau times the hp range, so
// tau * Lip is measured against a loss difference across the whole axis.
inline double tau_scale(const LossCurveGrid& P) { return P.theta.back() - P.theta.front(); }

struct TauTrial {
  double tau1, tau2;
  TruncationVector kappa;
  double objective = 0, e_cvx = 0;
  int delta = 0;
  bool cap_hit = false, accepted = false;
};

struct KhatResult {
  int width = 0;
  bool fail = true;
  TruncationVector kappa;
  std::optional<TauTrial> accepted;
  std::vector<TauTrial> trials;
};

inline std::vector<std::pair<double, double>> tau_pairs(const std::vector<double>& grid) {
  std::vector<std::pair<double, double>> out;
  for (double a : grid)
    for (double b : grid) {
      if (a < 0 || b < 0) throw std::invalid_argument("tau values must be nonnegative");
      out.emplace_back(a, b);
    }
  std::stable_sort(out.begin(), out.end(), [](const auto& x, const auto& y) {
    if (x.first + x.second != y.first + y.second) return x.first + x.second < y.first + y.second;
    return x.first < y.first;
  });
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// For each width below the largest, the first tau pair in (tau1 + tau2, tau1)
// order whose minimizer gives nearly convex top-kappa curves at both widths
// and argmins within eps_amin grid cells of the total-loss argmins.
inline std::map<int, KhatResult> compute_khat(const std::map<int, LossCurveGrid>& profiles,
                                              const ToleranceConfig& tol = {}) {
  if (profiles.size() < 2) throw std::invalid_argument("compute_khat needs at least two widths");
  const auto& Pmax = profiles.rbegin()->second;
  const auto pairs = tau_pairs(tol.tau_grid);
  std::map<int, KhatResult> out;
  for (const auto& [n, Pn] : profiles) {
    if (n == profiles.rbegin()->first) continue;
    if (Pn.width() != n) throw std::invalid_argument("profile width does not match its key");
    KhatResult kr;
    kr.width = n;
    const double scale = tau_scale(Pn);
    const auto tot_n = argmin_index(total_curve(Pn)), tot_max = argmin_index(total_curve(Pmax));
    for (const auto& [t1, t2] : pairs) {
      const auto pr = minimize_proxy(Pn, Pmax, t1 * scale, t2 * scale);
      TauTrial tr{t1, t2, pr.kappa, pr.objective, 0, 0, pr.cap_hit, false};
      const auto yn = topk_curve(Pn, pr.kappa), ym = topk_curve(Pmax, pr.kappa);
      tr.e_cvx = Pn.g() >= 3 ? std::max(conv_err(Pn.theta, yn), conv_err(Pmax.theta, ym)) : 0.0;
      const auto dn = static_cast<int>(argmin_index(yn)) - static_cast<int>(tot_n);
      const auto dm = static_cast<int>(argmin_index(ym)) - static_cast<int>(tot_max);
      tr.delta = std::max(std::abs(dn), std::abs(dm));
      tr.accepted = tr.e_cvx <= tol.eps_cvx && tr.delta <= tol.eps_amin;
      kr.trials.push_back(tr);
      if (tr.accepted) {
        kr.fail = false;
        kr.kappa = tr.kappa;
        kr.accepted = tr;
        break;
      }
    }
    out[n] = std::move(kr);
  }
  return out;
}

struct DecompositionGaps {
  double eps_inv = 0, eps_flat = 0, J = 0;
  double mu_head_n = 0, mu_head_ref = 0, mu_total_n = 0, mu_total_ref = 0;
  bool feasible = false;
};

// Grid analogues of the invariance and flatness gaps of a truncation against
// a reference (infinite-width or largest-width) profile.
inline DecompositionGaps decomposition_gaps(const LossCurveGrid& Pn, const LossCurveGrid& Pref,
                                            const TruncationVector& k) {
  if (Pn.g() < 3) throw std::invalid_argument("decomposition gaps need >= 3 grid points");
  check_kappa(k, Pn.g(), std::min(Pn.width(), Pref.width()));
  DecompositionGaps d;
  const auto hn = topk_curve(Pn, k), hr = topk_curve(Pref, k);
  d.mu_head_n = curvature(Pn.theta, hn);
  d.mu_head_ref = curvature(Pref.theta, hr);
  d.mu_total_n = curvature(Pn.theta, total_curve(Pn));
  d.mu_total_ref = curvature(Pref.theta, total_curve(Pref));
  d.feasible = std::min(d.mu_head_n, d.mu_head_ref) > 0;
  double sup = 0;
  for (size_t i = 0; i < hn.size(); ++i) sup = std::max(sup, std::abs(hn[i] - hr[i]));
  const double inf = std::numeric_limits<double>::infinity();
  const double mu_head = std::max(d.mu_head_n, d.mu_head_ref);
  d.eps_inv = mu_head > 0 ? sup / mu_head : inf;
  auto ratio = [&](double lip, double mu) { return mu > 0 ? lip / mu : inf; };
  d.eps_flat = ratio(lipschitz(Pn.theta, residual_curve(Pn, k)), d.mu_total_n) +
               ratio(lipschitz(Pref.theta, residual_curve(Pref, k)), d.mu_total_ref);
  d.J = 2 * std::sqrt(d.eps_inv) + d.eps_flat;
  return d;
}

struct TnResult {
  double t_n = std::numeric_limits<double>::infinity();
  std::optional<TruncationVector> best;
  int infeasible = 0;
};

inline TnResult t_n(const LossCurveGrid& Pn, const LossCurveGrid& Pref, const std::vector<TruncationVector>& cands) {
  TnResult r;
  for (const auto& k : cands) {
    const auto d = decomposition_gaps(Pn, Pref, k);
    if (!d.feasible) {
      ++r.infeasible;
      continue;
    }
    if (d.J < r.t_n) {
      r.t_n = d.J;
      r.best = k;
    }
  }
  return r;
}

// Constant truncations kappa = (k, ..., k) for k = 1..n.
inline std::vector<TruncationVector> constant_candidates(int g, int n) {
  std::vector<TruncationVector> c;
  for (int k = 1; k <= n; ++k) c.emplace_back(g, k);
  return c;
}

}  // namespace hpt::trunc
