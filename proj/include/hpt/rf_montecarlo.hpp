#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "hpt/core/rng.hpp"
#include "hpt/rf.hpp"

namespace hpt::rf {

inline double apply_raw(Activation a, double z) {
  switch (a) {
    case Activation::linear: return z;
    case Activation::tanh: return std::tanh(z);
    case Activation::relu: return z > 0 ? z : 0;
  }
  return z;
}

struct McSpec {
  int d = 300;
  Activation student = Activation::tanh;
  Activation teacher = Activation::relu;
  int trials = 20;
  int test_factor = 10;  // test points = test_factor * d
};

struct McResult {
  std::vector<double> lambdas;
  std::vector<double> mean, stderr_;
  std::vector<std::vector<double>> per_trial;  // [lambda][trial]
  int failed_trials = 0;
};

namespace detail {
inline Eigen::MatrixXd gaussian(int r, int c, double sd, Rng& rng) {
  std::normal_distribution<double> nd(0.0, sd);
  Eigen::MatrixXd m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = nd(rng);
  return m;
}
}  // namespace detail

// Finite-size ridge: a = argmin |y - Z a|^2 + n * c * lambda |a|^2, with
// Z = sigma(X W), W entries N(0, 1/d). One eigendecomposition of the Gram
// matrix per trial serves every lambda. The multiplier c is the convention
// constant between the asymptotic and finite-size penalties.
inline McResult monte_carlo_rf(const McSpec& spec, const RfSetting& s, const ActivationMoments& mom,
                               const std::vector<double>& lambdas, std::uint64_t seed,
                               double lambda_scale = 1.0, const std::string& stream = "rf-mc") {
  const int d = spec.d;
  const int N = static_cast<int>(std::lround(s.psi1 * d));
  const int n = static_cast<int>(std::lround(s.psi2 * d));
  const int P = spec.test_factor * d;
  McResult out;
  out.lambdas = lambdas;
  out.per_trial.assign(lambdas.size(), {});
  const double sig_eps = std::sqrt(s.sigma_eps_sq);
  auto student = [&](double z) { return (apply_raw(spec.student, z) - mom.shift) / mom.scale; };
  auto teacher = [&](double z) { return (apply_raw(spec.teacher, z) - mom.shift_star) / mom.scale_star; };

  for (int tr = 0; tr < spec.trials; ++tr) {
    Rng rng = make_rng(seed, stream + "/trial" + std::to_string(tr));
    std::normal_distribution<double> nd;
    Eigen::MatrixXd W = detail::gaussian(d, n, 1.0 / std::sqrt(d), rng);
    Eigen::VectorXd beta = detail::gaussian(d, 1, 1.0, rng);
    beta /= beta.norm();
    Eigen::MatrixXd X = detail::gaussian(N, d, 1.0, rng);
    Eigen::VectorXd y = (X * beta).unaryExpr(teacher);
    for (int i = 0; i < N; ++i) y(i) += sig_eps * nd(rng);
    Eigen::MatrixXd Z = (X * W).unaryExpr(student);
    Eigen::MatrixXd Xt = detail::gaussian(P, d, 1.0, rng);
    Eigen::VectorXd yt = (Xt * beta).unaryExpr(teacher);
    for (int i = 0; i < P; ++i) yt(i) += sig_eps * nd(rng);
    Eigen::MatrixXd Zt = (Xt * W).unaryExpr(student);

    // Dual form when features outnumber samples.
    const bool dual = n > N;
    Eigen::MatrixXd K = dual ? Eigen::MatrixXd(Z * Z.transpose()) : Eigen::MatrixXd(Z.transpose() * Z);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(K);
    if (es.info() != Eigen::Success) {
      ++out.failed_trials;
      continue;
    }
    const Eigen::MatrixXd& V = es.eigenvectors();
    const Eigen::VectorXd& ev = es.eigenvalues();
    Eigen::VectorXd proj;
    Eigen::MatrixXd test_basis;  // test predictions are test_basis * coef
    if (dual) {
      proj = V.transpose() * y;
      test_basis = (Zt * Z.transpose()) * V;
    } else {
      proj = V.transpose() * (Z.transpose() * y);
      test_basis = Zt * V;
    }
    for (size_t li = 0; li < lambdas.size(); ++li) {
      const double pen = n * lambda_scale * lambdas[li];
      Eigen::VectorXd coef = proj.array() / (ev.array() + pen);
      const Eigen::VectorXd pred = test_basis * coef;
      out.per_trial[li].push_back((yt - pred).squaredNorm() / P);
    }
  }
  for (const auto& v : out.per_trial) {
    double m = 0;
    for (double x : v) m += x;
    m /= std::max<size_t>(1, v.size());
    double ss = 0;
    for (double x : v) ss += (x - m) * (x - m);
    const double sd = v.size() > 1 ? std::sqrt(ss / (v.size() - 1)) : 0;
    out.mean.push_back(m);
    out.stderr_.push_back(v.empty() ? 0 : sd / std::sqrt(static_cast<double>(v.size())));
  }
  return out;
}

// One-dimensional calibration of the penalty convention constant at a single
// (psi2, lambda) anchor. The same trials are reused for every candidate (common
// random numbers). Pick an anchor where the risk is not flat in lambda, or
// the constant is poorly identified.
inline double calibrate_lambda_scale(const McSpec& spec, const RfSetting& s, const ActivationMoments& mom,
                                     double lambda, std::uint64_t seed, double lo = 0.25, double hi = 4.0) {
  const double target = risk(lambda, s, mom);
  const int K = 41;
  std::vector<double> cands(K);
  for (int i = 0; i < K; ++i) cands[i] = lambda * lo * std::pow(hi / lo, static_cast<double>(i) / (K - 1));
  const auto r = monte_carlo_rf(spec, s, mom, cands, seed, 1.0, "rf-calibration");
  int bi = 0;
  for (int i = 1; i < K; ++i)
    if (std::abs(r.mean[i] - target) < std::abs(r.mean[bi] - target)) bi = i;
  // Linear interpolation in log lambda between the bracketing candidates.
  int j = bi;
  if (bi + 1 < K && (r.mean[bi] - target) * (r.mean[bi + 1] - target) <= 0) j = bi + 1;
  else if (bi > 0 && (r.mean[bi] - target) * (r.mean[bi - 1] - target) <= 0) j = bi - 1;
  double best = cands[bi];
  if (j != bi && r.mean[j] != r.mean[bi]) {
    const double w = (target - r.mean[bi]) / (r.mean[j] - r.mean[bi]);
    best = std::exp(std::log(cands[bi]) + w * (std::log(cands[j]) - std::log(cands[bi])));
  }
  return best / lambda;
}

}  // namespace hpt::rf
