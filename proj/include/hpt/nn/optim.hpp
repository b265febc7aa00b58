#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "hpt/nn/network.hpp"

namespace hpt::nn {

// Linear warmup from 0, flat at peak, linear decay to 0 over the last
// cooldown_frac of training.
inline double wsd_lr(long t, long T, double peak, double warmup_frac, double cooldown_frac) {
  if (t < 0 || t >= T) throw std::out_of_range("wsd step outside [0, T)");
  const double warm = warmup_frac * T, cool = cooldown_frac * T;
  const double tt = static_cast<double>(t);
  if (tt < warm) return peak * tt / warm;
  if (cool > 0 && tt >= T - cool) return peak * (T - tt) / cool;
  return peak;
}

struct NsCoeffs {
  double a, b, c;
  // Classical quintic (15x - 10x^3 + 3x^5)/8: converges to exactly 1 on (0, 1].
  static NsCoeffs classic() { return {15.0 / 8, -10.0 / 8, 3.0 / 8}; }
  // Tuned quintic: steeper near 0 but leaves singular values oscillating in
  // roughly [0.68, 1.13] instead of converging.
  static NsCoeffs jordan() { return {3.4445, -4.7750, 2.0315}; }
};

// Approximate msgn(M) = U V^T. The input is pre-normalized by its Frobenius
// norm, an upper bound on the spectral norm, so every singular value starts in (0, 1].
inline Mat newton_schulz(const Mat& M, int iters, NsCoeffs k = NsCoeffs::classic(), double delta = 1e-7,
                         bool normalize = true) {
  const bool tall = M.rows() > M.cols();
  Mat X = tall ? Mat(M.transpose()) : M;
  if (normalize) X /= (X.norm() + delta);
  for (int i = 0; i < iters; ++i) {
    const Mat A = X * X.transpose();
    const Mat Bm = k.b * A + k.c * (A * A);
    X = k.a * X + Bm * X;
  }
  return tall ? Mat(X.transpose()) : X;
}

// Exact matrix sign via the thin SVD.
inline Mat msgn(const Mat& M) {
  Eigen::JacobiSVD<Mat> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU() * svd.matrixV().transpose();
}

struct OptimizerConfig {
  OptKind kind = OptKind::adam;
  double peak_lr = 1e-3;
  double momentum = 0.9;  // sgd heavy ball; muon uses muon_momentum
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double muon_momentum = 0.95;
  int ns_iters = 5;
  bool ns_tuned = false;  // use the tuned quintic instead of the classical one
  double warmup_frac = 0.04, cooldown_frac = 0.2;
  long steps = 1000;
  int batch_size = 128;
  std::vector<double> per_layer_lr_multipliers;

  void validate() const {
    auto in01 = [](double v) { return v >= 0 && v < 1; };
    if (!(peak_lr >= 0)) throw std::invalid_argument("peak_lr must be >= 0");
    if (!in01(momentum) || !in01(beta1) || !in01(beta2) || !in01(muon_momentum))
      throw std::invalid_argument("momentum coefficients must lie in [0, 1)");
    if (!(eps > 0)) throw std::invalid_argument("eps must be positive");
    if (ns_iters < 1) throw std::invalid_argument("ns_iters must be >= 1");
    if (warmup_frac < 0 || cooldown_frac < 0 || warmup_frac + cooldown_frac > 1)
      throw std::invalid_argument("invalid WSD fractions");
    if (steps < 1 || batch_size < 1) throw std::invalid_argument("steps and batch_size must be >= 1");
  }
};

inline void sgd_step(Mat& w, const Mat& g, Mat& v, double lr, double beta) {
  v = beta * v + g;
  w -= lr * v;
}

inline void adam_step(Mat& w, const Mat& g, Mat& m, Mat& v, long t, double lr, double b1, double b2, double eps) {
  m = b1 * m + (1 - b1) * g;
  v = b2 * v + (1 - b2) * g.cwiseProduct(g);
  const double c1 = 1 - std::pow(b1, static_cast<double>(t)), c2 = 1 - std::pow(b2, static_cast<double>(t));
  w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

inline void muon_step(Mat& w, const Mat& g, Mat& mom, double lr, double beta, int iters, NsCoeffs k) {
  mom = beta * mom + (1 - beta) * g;
  const double scale = std::sqrt(static_cast<double>(w.rows()) / static_cast<double>(w.cols()));
  w -= lr * scale * newton_schulz(mom, iters, k);
}

// Holds per-parameter optimizer state. Muon handles the input and hidden
// weight matrices; the output layer and every bias fall back to Adam.
class Optimizer {
 public:
  Optimizer(const NetworkSpec& s, OptimizerConfig cfg) : spec_(s), cfg_(std::move(cfg)) {
    cfg_.validate();
    layout_ = param_layout(s);
    if (!cfg_.per_layer_lr_multipliers.empty() &&
        static_cast<int>(cfg_.per_layer_lr_multipliers.size()) != s.layers())
      throw std::invalid_argument("per_layer_lr_multipliers must have L+1 entries");
  }

  void init(const Params& p) {
    s1_ = zeros_like(p);
    s2_ = zeros_like(p);
    t_ = 0;
  }

  bool uses_muon(size_t i) const {
    return cfg_.kind == OptKind::muon && layout_[i].is_matrix && layout_[i].layer < spec_.L;
  }

  // Matrices follow eta_l n^-c_l. Biases take eta_l without the width
  // exponent: they have fan-in 1, so their muP learning rate is width-free.
  double lr_for(size_t i, double base) const {
    const auto& info = layout_[i];
    double lr = base * (info.is_matrix ? spec_.lr_scale(info.layer) : spec_.abc[info.layer].eta);
    if (!cfg_.per_layer_lr_multipliers.empty()) lr *= cfg_.per_layer_lr_multipliers[info.layer];
    return lr;
  }

  void step(Params& p, const Params& g) {
    if (s1_.empty()) init(p);
    const double base = wsd_lr(t_, cfg_.steps, cfg_.peak_lr, cfg_.warmup_frac, cfg_.cooldown_frac);
    ++t_;
    const NsCoeffs k = cfg_.ns_tuned ? NsCoeffs::jordan() : NsCoeffs::classic();
    for (size_t i = 0; i < p.size(); ++i) {
      const double lr = lr_for(i, base);
      if (cfg_.kind == OptKind::sgd) {
        sgd_step(p[i], g[i], s1_[i], lr, cfg_.momentum);
      } else if (uses_muon(i)) {
        muon_step(p[i], g[i], s1_[i], lr, cfg_.muon_momentum, cfg_.ns_iters, k);
      } else {
        adam_step(p[i], g[i], s1_[i], s2_[i], t_, lr, cfg_.beta1, cfg_.beta2, cfg_.eps);
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  NetworkSpec spec_;
  OptimizerConfig cfg_;
  std::vector<ParamInfo> layout_;
  Params s1_, s2_;
  long t_ = 0;
};

}  // namespace hpt::nn
