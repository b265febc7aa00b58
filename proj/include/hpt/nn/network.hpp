#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpt/core/rng.hpp"

namespace hpt::nn {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class Act { relu, tanh, linear };
enum class LossKind { bce, squared, softmax_ce };
enum class OptKind { sgd, adam, muon };

inline Act parse_act(const std::string& s) {
  if (s == "relu") return Act::relu;
  if (s == "tanh") return Act::tanh;
  if (s == "linear") return Act::linear;
  throw std::invalid_argument("unknown activation " + s);
}

inline LossKind parse_loss(const std::string& s) {
  if (s == "bce") return LossKind::bce;
  if (s == "squared") return LossKind::squared;
  if (s == "softmax_ce") return LossKind::softmax_ce;
  throw std::invalid_argument("unknown loss " + s);
}

inline OptKind parse_opt(const std::string& s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "adam") return OptKind::adam;
  if (s == "muon") return OptKind::muon;
  throw std::invalid_argument("unknown optimizer " + s);
}

// Multiplier alpha n^-a, init N(0, sigma^2 n^-2b), learning rate eta n^-c.
struct LayerAbc {
  double a = 0, b = 0, c = 0;
  double alpha = 1, sigma = 1, eta = 1;
};

struct NetworkSpec {
  int d = 1;
  int n = 1;
  int L = 1;  // hidden layers
  Act act = Act::relu;
  bool use_bias = true;
  int output_dim = 1;
  LossKind loss = LossKind::squared;
  std::vector<LayerAbc> abc;  // L + 1 entries

  int layers() const { return L + 1; }
  int rows(int l) const { return l == L ? output_dim : n; }
  int cols(int l) const { return l == 0 ? d : n; }
  double multiplier(int l) const { return abc[l].alpha * std::pow(n, -abc[l].a); }
  double init_sd(int l) const { return abc[l].sigma * std::pow(n, -abc[l].b); }
  double lr_scale(int l) const { return abc[l].eta * std::pow(n, -abc[l].c); }

  void validate() const {
    if (d < 1 || n < 1 || L < 1 || output_dim < 1) throw std::invalid_argument("network dimensions must be positive");
    if (static_cast<int>(abc.size()) != L + 1) throw std::invalid_argument("abc table must have L+1 layers");
    if (loss == LossKind::softmax_ce && output_dim < 2) throw std::invalid_argument("softmax needs >= 2 outputs");
  }
};

// The default muP table. Input layer: a=0, b=0, sigma=1/sqrt(d). Hidden: a=0,
// b=1/2. Output: a=1, b=1/2. Learning-rate exponents depend on the optimizer:
// Adam (0, 1, 0), SGD (-1, 0, -1), Muon (0, 0, 0) because its sqrt(m/n)
// update scaling already carries the width dependence.
inline std::vector<LayerAbc> mup_table(int d, int L, OptKind opt) {
  std::vector<LayerAbc> t(L + 1);
  t[0] = {0, 0, 0, 1, 1.0 / std::sqrt(static_cast<double>(d)), 1};
  for (int l = 1; l < L; ++l) t[l] = {0, 0.5, 0, 1, 1, 1};
  t[L] = {1, 0.5, 0, 1, 1, 1};
  switch (opt) {
    case OptKind::adam:
      for (int l = 1; l < L; ++l) t[l].c = 1;
      break;
    case OptKind::sgd:
      t[0].c = -1;
      t[L].c = -1;
      break;
    case OptKind::muon:
      break;
  }
  return t;
}

// Flat parameter list: for each layer its weight matrix, then its bias as an
// (rows x 1) matrix when biases are on.
struct ParamInfo {
  std::string name;
  int layer;
  bool is_matrix;
  int rows, cols;
};

inline std::vector<ParamInfo> param_layout(const NetworkSpec& s) {
  std::vector<ParamInfo> out;
  for (int l = 0; l < s.layers(); ++l) {
    out.push_back({"W" + std::to_string(l), l, true, s.rows(l), s.cols(l)});
    if (s.use_bias) out.push_back({"b" + std::to_string(l), l, false, s.rows(l), 1});
  }
  return out;
}

using Params = std::vector<Mat>;

inline Params zeros_like(const Params& p) {
  Params z;
  z.reserve(p.size());
  for (const auto& m : p) z.push_back(Mat::Zero(m.rows(), m.cols()));
  return z;
}

inline double dot(const Params& a, const Params& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) s += (a[i].array() * b[i].array()).sum();
  return s;
}

inline Params sub(const Params& a, const Params& b) {
  Params out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline int weight_index(const NetworkSpec& s, int layer) { return s.use_bias ? 2 * layer : layer; }
// Only meaningful when biases are on.
inline int bias_index(const NetworkSpec&, int layer) { return 2 * layer + 1; }

inline Params init_network(const NetworkSpec& s, std::uint64_t seed) {
  s.validate();
  Params p;
  for (const auto& info : param_layout(s)) {
    Mat m = Mat::Zero(info.rows, info.cols);
    if (info.is_matrix) {
      const double sd = s.init_sd(info.layer);
      if (sd > 0) {
        Rng rng = make_rng(seed, "init/" + info.name);
        std::normal_distribution<double> nd(0.0, sd);
        for (Eigen::Index j = 0; j < m.cols(); ++j)
          for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = nd(rng);
      }
    }
    p.push_back(std::move(m));
  }
  return p;
}

inline double act_f(Act a, double x) {
  switch (a) {
    case Act::relu: return x > 0 ? x : 0;
    case Act::tanh: return std::tanh(x);
    case Act::linear: return x;
  }
  return x;
}

inline double act_df(Act a, double x) {
  switch (a) {
    case Act::relu: return x > 0 ? 1 : 0;
    case Act::tanh: {
      const double t = std::tanh(x);
      return 1 - t * t;
    }
    case Act::linear: return 1;
  }
  return 1;
}

// Samples are columns: X is d x B, Y is output_dim x B (class index in row 0
// for softmax).
struct Batch {
  Mat X, Y;
  Eigen::Index size() const { return X.cols(); }
};

struct ForwardCache {
  std::vector<Mat> pre;   // h^l, l = 0..L
  std::vector<Mat> post;  // z^{l-1}: inputs to each layer, post[0] = X
  Mat out;
};

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Per-sample loss and its derivative with respect to the outputs.
inline void loss_and_dout(LossKind k, const Mat& out, const Mat& Y, Vec& per_sample, Mat* dout) {
  const Eigen::Index B = out.cols();
  per_sample.resize(B);
  if (dout) dout->resize(out.rows(), B);
  switch (k) {
    case LossKind::squared:
      for (Eigen::Index i = 0; i < B; ++i) {
        const Vec r = out.col(i) - Y.col(i);
        per_sample(i) = r.squaredNorm();
        if (dout) dout->col(i) = 2 * r;
      }
      break;
    case LossKind::bce:
      for (Eigen::Index i = 0; i < B; ++i) {
        const double f = out(0, i), y = Y(0, i);
        per_sample(i) = softplus(f) - y * f;
        if (dout) (*dout)(0, i) = 1 / (1 + std::exp(-f)) - y;
      }
      break;
    case LossKind::softmax_ce:
      for (Eigen::Index i = 0; i < B; ++i) {
        const Vec z = out.col(i);
        const double m = z.maxCoeff();
        const Vec e = (z.array() - m).exp();
        const double se = e.sum();
        const int y = static_cast<int>(Y(0, i));
        per_sample(i) = std::log(se) + m - z(y);
        if (dout) {
          dout->col(i) = e / se;
          (*dout)(y, i) -= 1;
        }
      }
      break;
  }
}

inline Mat forward(const Params& p, const NetworkSpec& s, const Mat& X, ForwardCache* cache = nullptr) {
  if (X.rows() != s.d) throw std::invalid_argument("batch dimension does not match input_dim");
  Mat z = X;
  if (cache) {
    cache->pre.clear();
    cache->post.clear();
  }
  for (int l = 0; l < s.layers(); ++l) {
    Mat h = s.multiplier(l) * (p[weight_index(s, l)] * z);
    if (s.use_bias) h.colwise() += p[bias_index(s, l)].col(0);
    if (cache) {
      cache->post.push_back(z);
      cache->pre.push_back(h);
    }
    if (l == s.L) {
      if (cache) cache->out = h;
      return h;
    }
    z = h.unaryExpr([a = s.act](double v) { return act_f(a, v); });
  }
  return z;
}

struct LossEval {
  double loss = 0;
  Vec per_sample;
  bool finite = true;
};

inline LossEval evaluate(const Params& p, const NetworkSpec& s, const Batch& b) {
  LossEval e;
  const Mat out = forward(p, s, b.X);
  loss_and_dout(s.loss, out, b.Y, e.per_sample, nullptr);
  e.loss = e.per_sample.mean();
  e.finite = std::isfinite(e.loss);
  return e;
}

// Per-sample gradient of a weight matrix is an outer product,
// G_i = left.col(i) * right.col(i)^T, with mean_i G_i the batch gradient.
struct SampleFactors {
  Mat left, right;
};

struct GradResult {
  double loss = 0;
  Params grads;
  std::vector<SampleFactors> factors;  // one per layer, when requested
  bool finite = true;
};

// Exact backprop of the batch-mean loss.
inline GradResult grad(const Params& p, const NetworkSpec& s, const Batch& b, bool per_sample = false) {
  ForwardCache c;
  forward(p, s, b.X, &c);
  GradResult r;
  Vec ps;
  Mat delta;
  loss_and_dout(s.loss, c.out, b.Y, ps, &delta);
  r.loss = ps.mean();
  r.finite = std::isfinite(r.loss);
  const double B = static_cast<double>(b.size());
  r.grads = zeros_like(p);
  if (per_sample) r.factors.resize(s.layers());
  // delta holds d(per-sample loss)/d h^l, unscaled by 1/B.
  for (int l = s.L; l >= 0; --l) {
    const double mult = s.multiplier(l);
    r.grads[weight_index(s, l)] = (mult / B) * (delta * c.post[l].transpose());
    if (s.use_bias) r.grads[bias_index(s, l)] = delta.rowwise().sum() / B;
    if (per_sample) r.factors[l] = {mult * delta, c.post[l]};
    if (l == 0) break;
    Mat dz = mult * (p[weight_index(s, l)].transpose() * delta);
    const Mat& h = c.pre[l - 1];
    delta = dz.array() * h.unaryExpr([a = s.act](double v) { return act_df(a, v); }).array();
  }
  return r;
}

}  // namespace hpt::nn
