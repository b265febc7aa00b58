#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpt/hpcore.hpp"

namespace hpt::rf {

using ld = long double;

struct ActivationMoments {
  double mu1 = 1, mu2_sq = 0;
  double mu1_star = 1, mu2_star_sq = 0;
  // Raw mean and standard deviation used to normalize student and teacher.
  double shift = 0, scale = 1, shift_star = 0, scale_star = 1;
};

struct RfSetting {
  double psi1 = 4;
  double psi2 = 1;
  double sigma_eps_sq = 1.0 / 16;
};

enum class Activation { linear, tanh, relu };

inline Activation parse_activation(const std::string& s) {
  if (s == "linear") return Activation::linear;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation " + s);
}

struct GaussHermite {
  std::vector<double> x, w;  // probabilists' nodes, weights summing to 1
};

// Golub-Welsch on the Jacobi matrix of the probabilists' Hermite polynomials.
inline const GaussHermite& gauss_hermite(int nodes = 201) {
  static thread_local std::vector<std::pair<int, GaussHermite>> cache;
  for (const auto& [k, g] : cache)
    if (k == nodes) return g;
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(nodes, nodes);
  for (int i = 1; i < nodes; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
  GaussHermite g;
  for (int i = 0; i < nodes; ++i) {
    g.x.push_back(es.eigenvalues()(i));
    g.w.push_back(es.eigenvectors()(0, i) * es.eigenvectors()(0, i));
  }
  cache.emplace_back(nodes, std::move(g));
  return cache.back().second;
}

struct RawMoments {
  double mean, var, first;  // E[f], Var[f], E[z f]
};

inline RawMoments quadrature_moments(const std::function<double(double)>& f, int nodes = 201) {
  const auto& g = gauss_hermite(nodes);
  double m = 0, m2 = 0, zf = 0;
  for (size_t i = 0; i < g.x.size(); ++i) {
    const double v = f(g.x[i]);
    m += g.w[i] * v;
    m2 += g.w[i] * v * v;
    zf += g.w[i] * g.x[i] * v;
  }
  return {m, m2 - m * m, zf};
}

// relu has a kink at 0, which ruins polynomial quadrature accuracy. Each half
// line has closed-form Gaussian moments, so the split integral is exact.
inline RawMoments relu_moments() {
  const double m = 1.0 / std::sqrt(2 * std::numbers::pi);
  return {m, 0.5 - m * m, 0.5};
}

inline RawMoments raw_moments(Activation a) {
  switch (a) {
    case Activation::linear: return {0, 1, 1};
    case Activation::relu: return relu_moments();
    case Activation::tanh: return quadrature_moments([](double z) { return std::tanh(z); });
  }
  throw std::logic_error("activation");
}

// mu1 = E[sigma'(z)] = E[z sigma(z)] by Gaussian integration by parts.
inline void normalize_into(const RawMoments& r, double& mu1, double& mu2_sq, double& shift,
                           double& scale) {
  if (!(r.var > 1e-300)) throw std::invalid_argument("degenerate activation (zero variance)");
  shift = r.mean;
  scale = std::sqrt(r.var);
  mu1 = r.first / scale;
  mu2_sq = 1 - mu1 * mu1;
  if (mu1 == 0) throw std::invalid_argument("activation has zero first Hermite coefficient");
}

inline ActivationMoments hermite_moments(const RawMoments& student, const RawMoments& teacher) {
  ActivationMoments m;
  normalize_into(student, m.mu1, m.mu2_sq, m.shift, m.scale);
  normalize_into(teacher, m.mu1_star, m.mu2_star_sq, m.shift_star, m.scale_star);
  return m;
}

inline ActivationMoments hermite_moments(Activation student, Activation teacher) {
  return hermite_moments(raw_moments(student), raw_moments(teacher));
}

struct StieltjesSolution {
  double m1 = 0, m2 = 0, lambda = 0;
  double residual1 = 0, residual2 = 0;
  bool converged = false;
  int continuation_steps = 0;
  ld m1l = 0, m2l = 0;
};

namespace detail {
struct Eqs {
  ld m1sq, m2sq, p1, p2;
  void eval(ld a, ld b, ld lam, ld& e1, ld& e2) const {
    const ld t3 = m1sq * a * b * (lam * a - 1);
    e1 = (a - b) * (m2sq * a + m1sq * b) / p1 + t3;
    e2 = (p2 / p1) * (m1sq * a * b + (b - a) / p1) + t3;
  }
  void jac(ld a, ld b, ld lam, ld J[2][2]) const {
    const ld t3a = m1sq * b * (lam * a - 1) + m1sq * a * b * lam;
    const ld t3b = m1sq * a * (lam * a - 1);
    J[0][0] = ((m2sq * a + m1sq * b) + (a - b) * m2sq) / p1 + t3a;
    J[0][1] = (-(m2sq * a + m1sq * b) + (a - b) * m1sq) / p1 + t3b;
    J[1][0] = (p2 / p1) * (m1sq * b - 1 / p1) + t3a;
    J[1][1] = (p2 / p1) * (m1sq * a + 1 / p1) + t3b;
  }
};

inline Eqs make_eqs(const RfSetting& s, const ActivationMoments& m) {
  return {static_cast<ld>(m.mu1) * m.mu1, static_cast<ld>(m.mu2_sq), static_cast<ld>(s.psi1),
          static_cast<ld>(s.psi2)};
}

inline bool solve2(const ld J[2][2], ld r0, ld r1, ld& x0, ld& x1) {
  const ld det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
  if (det == 0 || !std::isfinite(static_cast<double>(det))) return false;
  x0 = (r0 * J[1][1] - r1 * J[0][1]) / det;
  x1 = (J[0][0] * r1 - J[1][0] * r0) / det;
  return true;
}

// Newton with step halving whenever the residual grows. The residual is
// measured in the affine-invariant norm |J(x_k)^{-1} E(.)|, since the second
// equation carries a psi2/psi1 factor and its raw size swamps the first.
inline bool newton(const Eqs& q, ld lam, ld& a, ld& b) {
  for (int it = 0; it < 200; ++it) {
    ld e1, e2, J[2][2], d0, d1;
    q.eval(a, b, lam, e1, e2);
    q.jac(a, b, lam, J);
    if (!solve2(J, -e1, -e2, d0, d1)) return false;
    const ld r = std::fabs(d0) / a + std::fabs(d1) / b;
    ld step = 1, na = a + d0, nb = b + d1;
    for (int h = 0; h < 60; ++h) {
      if (na > 0 && nb > 0) {
        ld f1, f2, c0, c1;
        q.eval(na, nb, lam, f1, f2);
        if (solve2(J, -f1, -f2, c0, c1) && std::fabs(c0) / a + std::fabs(c1) / b <= r) break;
      }
      step *= 0.5L;
      na = a + step * d0;
      nb = b + step * d1;
    }
    if (!(na > 0 && nb > 0)) return false;
    a = na;
    b = nb;
    if (r * step <= 1e-18L) return true;
  }
  ld e1, e2;
  q.eval(a, b, lam, e1, e2);
  return std::fabs(e1) + std::fabs(e2) < 1e-14L;
}
}  // namespace detail

// Continuation from lambda_big = 1e6, where m1 ~ m2 ~ 1/lambda, down a
// geometric ladder with ratio 0.8 to the requested lambda.
inline StieltjesSolution solve_stieltjes(double lambda, const RfSetting& s, const ActivationMoments& mom) {
  if (!(lambda > 0)) throw std::invalid_argument("lambda must be positive");
  if (!(s.psi1 > 0 && s.psi2 > 0)) throw std::invalid_argument("psi1, psi2 must be positive");
  const auto q = detail::make_eqs(s, mom);
  const ld big = 1e6L, target = lambda;
  std::vector<ld> ladder;
  if (target >= big) {
    ladder.push_back(target);
  } else {
    for (ld l = big; l > target; l *= 0.8L) ladder.push_back(l);
    ladder.push_back(target);
  }
  ld a = 1 / ladder.front(), b = 1 / ladder.front();
  StieltjesSolution out;
  out.lambda = lambda;
  for (ld l : ladder) {
    if (!detail::newton(q, l, a, b))
      throw std::runtime_error("Stieltjes Newton failed at lambda=" + std::to_string(static_cast<double>(l)) +
                               " while continuing to " + std::to_string(lambda));
    ++out.continuation_steps;
  }
  ld e1, e2;
  q.eval(a, b, target, e1, e2);
  out.m1l = a;
  out.m2l = b;
  out.m1 = static_cast<double>(a);
  out.m2 = static_cast<double>(b);
  out.residual1 = static_cast<double>(e1);
  out.residual2 = static_cast<double>(e2);
  out.converged = std::fabs(e1) < 1e-12L && std::fabs(e2) < 1e-12L;
  return out;
}

struct RiskEval {
  double risk = 0;
  double dm1 = 0, dm2 = 0;  // implicit derivatives in lambda
  StieltjesSolution sol;
  ld risk_l = 0;
};

inline RiskEval risk_detail(double lambda, const RfSetting& s, const ActivationMoments& mom) {
  RiskEval r;
  r.sol = solve_stieltjes(lambda, s, mom);
  const auto q = detail::make_eqs(s, mom);
  const ld a = r.sol.m1l, b = r.sol.m2l;
  ld J[2][2], d0, d1;
  q.jac(a, b, lambda, J);
  const ld dl = q.m1sq * a * a * b;  // d/dlambda of both equations
  if (!detail::solve2(J, -dl, -dl, d0, d1)) throw std::runtime_error("singular Jacobian in risk");
  const ld A = static_cast<ld>(mom.mu2_star_sq) + s.sigma_eps_sq;
  const ld s1 = static_cast<ld>(mom.mu1_star) * mom.mu1_star;
  r.risk_l = -A * d0 / (a * a) - s1 * d1 / (a * a);
  r.risk = static_cast<double>(r.risk_l);
  r.dm1 = static_cast<double>(d0);
  r.dm2 = static_cast<double>(d1);
  return r;
}

inline double risk(double lambda, const RfSetting& s, const ActivationMoments& mom) {
  return risk_detail(lambda, s, mom).risk;
}

// Infinite-width (psi2 -> inf) quantities, parameterized by t = 1 + mu1^2 psi1 m1.
struct InfWidth {
  const RfSetting& s;
  const ActivationMoments& m;
  ld A() const { return static_cast<ld>(m.mu2_star_sq) + s.sigma_eps_sq; }
  ld S(ld t) const { return s.psi1 * t * t - (t - 1) * (t - 1); }
  ld risk_t(ld t) const {
    return s.psi1 * (A() * t * t + static_cast<ld>(m.mu1_star) * m.mu1_star) / S(t);
  }
  ld lambda_t(ld t) const {
    const ld m1sq = static_cast<ld>(m.mu1) * m.mu1;
    return m1sq * s.psi1 / (t - 1) - m1sq / t - m.mu2_sq;
  }
  // Reduced system: m2 = m1 / t and lambda m1 + mu2^2 m1 + mu1^2 m2 = 1. The
  // left side is increasing in m1, so bisection-safeguarded Newton converges.
  ld m1_of_lambda(ld lam) const {
    const ld m1sq = static_cast<ld>(m.mu1) * m.mu1, c = m1sq * s.psi1;
    auto f = [&](ld x) { return lam * x + m.mu2_sq * x + m1sq * x / (1 + c * x) - 1; };
    auto df = [&](ld x) { return lam + m.mu2_sq + m1sq / ((1 + c * x) * (1 + c * x)); };
    ld lo = 0, hi = 1;
    while (f(hi) < 0) hi *= 2;
    ld x = 0.5L * hi;
    for (int it = 0; it < 200; ++it) {
      const ld fx = f(x);
      if (fx > 0) hi = x; else lo = x;
      ld nx = x - fx / df(x);
      if (!(nx > lo && nx < hi)) nx = 0.5L * (lo + hi);
      if (std::fabs(nx - x) <= 1e-19L * std::fabs(x)) return nx;
      x = nx;
    }
    return x;
  }
  ld t_of_lambda(ld lam) const {
    return 1 + static_cast<ld>(m.mu1) * m.mu1 * s.psi1 * m1_of_lambda(lam);
  }
  ld risk_lambda(ld lam) const { return risk_t(t_of_lambda(lam)); }
};

inline double risk_inf(double lambda, const RfSetting& s, const ActivationMoments& m) {
  return static_cast<double>(InfWidth{s, m}.risk_lambda(lambda));
}

struct ClosedFormInf {
  double t_star = 0, lambda_star_inf = 0, risk_inf_at_opt = 0;
  double curvature = 0, C_eta = 0, C_lambda = 0;
};

inline ClosedFormInf closed_forms_inf(const RfSetting& s, const ActivationMoments& m) {
  const InfWidth iw{s, m};
  const ld A = iw.A(), m1sq = static_cast<ld>(m.mu1) * m.mu1;
  const ld s1 = static_cast<ld>(m.mu1_star) * m.mu1_star, p1 = s.psi1;
  ClosedFormInf c;
  const ld lam = m1sq * A / s1 - m.mu2_sq;
  c.lambda_star_inf = static_cast<double>(lam);
  if (!(lam > 0))
    throw std::domain_error("optimal ridge penalty at infinite width is not positive (regime violation)");
  // mu1*^2 (psi1 t - t + 1) = A t (t - 1)  <=>  A t^2 - (A + mu1*^2 (psi1 - 1)) t - mu1*^2 = 0
  const ld qb = -(A + s1 * (p1 - 1)), qc = -s1;
  const ld disc = std::sqrt(qb * qb - 4 * A * qc);
  ld t = (-qb + disc) / (2 * A);
  if (!(t > 1 && p1 * t - t + 1 > 0)) throw std::domain_error("no admissible t* root");
  c.t_star = static_cast<double>(t);
  const ld S = iw.S(t);
  c.risk_inf_at_opt = static_cast<double>(iw.risk_t(t));
  const ld lp = -m1sq * S / (t * t * (t - 1) * (t - 1));
  const ld g = p1 * t - t + 1;
  c.curvature = static_cast<double>(2 * A * p1 / (S * lp * lp * g));
  c.C_eta = static_cast<double>(2 * A * (m1sq + m.mu2_sq * t) * std::pow(t - 1, 3) / (m1sq * S * g));
  c.C_lambda = static_cast<double>(((3 * p1 - 4 * m1sq * p1 + 1) * t * t + 2 * (2 * m1sq * p1 - 1) * t + 1) /
                                   (2 * p1 * t * t));
  return c;
}

// First-order width corrections measured directly on the solver, in
// eta = psi1 / psi2: dR/deta at fixed lambda, and d lambda*/d eta.
struct NumericCoefficients {
  double dR_deta = 0;
  double dlambda_deta = 0;
};

inline NumericCoefficients numeric_coefficients(const RfSetting& s, const ActivationMoments& m,
                                                double eta = 1e-7) {
  const auto cf = closed_forms_inf(s, m);
  RfSetting w = s;
  w.psi2 = s.psi1 / eta;
  const InfWidth iw{s, m};
  auto slope = [&](double lam) {
    return (risk_detail(lam, w, m).risk_l - iw.risk_lambda(lam)) / static_cast<ld>(eta);
  };
  const double lam = cf.lambda_star_inf, h = 1e-3 * lam;
  NumericCoefficients out;
  out.dR_deta = static_cast<double>(slope(lam));
  const ld cross = (slope(lam + h) - slope(lam - h)) / (2 * h);
  out.dlambda_deta = static_cast<double>(-cross / cf.curvature);
  return out;
}

struct OptimalLambda {
  double lambda = 0, risk = 0;
};

// Coarse log scan to bracket, then golden section in lambda.
inline OptimalLambda optimal_lambda(const RfSetting& s, const ActivationMoments& m, double lo = 1e-4,
                                    double hi = 1e2, double tol = 1e-8) {
  auto f = [&](double l) { return risk_detail(l, s, m).risk_l; };
  const int n = 80;
  std::vector<double> xs(n + 1);
  std::vector<ld> ys(n + 1);
  int bi = 0;
  for (int i = 0; i <= n; ++i) {
    xs[i] = lo * std::pow(hi / lo, static_cast<double>(i) / n);
    ys[i] = f(xs[i]);
    if (ys[i] < ys[bi]) bi = i;
  }
  if (bi == 0 || bi == n) throw std::runtime_error("no interior risk minimum in the search interval");
  double a = xs[bi - 1], b = xs[bi + 1];
  const double gr = 0.5 * (std::sqrt(5.0) - 1);
  double c = b - gr * (b - a), d = a + gr * (b - a);
  ld fc = f(c), fd = f(d);
  while (b - a > tol) {
    if (fc < fd) {
      b = d; d = c; fd = fc;
      c = b - gr * (b - a); fc = f(c);
    } else {
      a = c; c = d; fc = fd;
      d = a + gr * (b - a); fd = f(d);
    }
  }
  const double x = 0.5 * (a + b);
  return {x, static_cast<double>(f(x))};
}

struct RateRow {
  double psi2, lambda_opt, risk_opt, loss_gap, hp_gap, subopt_gap;
};

struct RfRates {
  std::vector<RateRow> rows;
  PowerLawFit loss_gap, hp_gap, subopt_gap;
  ClosedFormInf inf;
};

inline RfRates rf_rates(const RfSetting& s, const ActivationMoments& m, const std::vector<double>& psi2s) {
  if (psi2s.size() < 3) throw std::invalid_argument("need >= 3 psi2 values");
  const auto [mn, mx] = std::minmax_element(psi2s.begin(), psi2s.end());
  if (*mx / *mn < 100) throw std::invalid_argument("psi2 list must span >= 2 decades");
  RfRates out;
  out.inf = closed_forms_inf(s, m);
  const InfWidth iw{s, m};
  std::vector<std::pair<double, double>> la, lb, lc;
  for (double p2 : psi2s) {
    RfSetting w = s;
    w.psi2 = p2;
    const auto opt = optimal_lambda(w, m);
    RateRow r{p2, opt.lambda, opt.risk, 0, 0, 0};
    r.loss_gap = std::abs(opt.risk - out.inf.risk_inf_at_opt);
    r.hp_gap = std::abs(opt.lambda - out.inf.lambda_star_inf);
    r.subopt_gap = std::abs(static_cast<double>(iw.risk_lambda(opt.lambda)) - out.inf.risk_inf_at_opt);
    out.rows.push_back(r);
    la.emplace_back(p2, r.loss_gap);
    lb.emplace_back(p2, r.hp_gap);
    lc.emplace_back(p2, r.subopt_gap);
  }
  out.loss_gap = fit_power_law(la);
  out.hp_gap = fit_power_law(lb);
  out.subopt_gap = fit_power_law(lc);
  return out;
}

// The setting of the tanh-student / relu-teacher figure.
inline RfSetting figure_setting(double psi2 = 1) { return {4.0, psi2, 1.0 / 16}; }

}  // namespace hpt::rf
