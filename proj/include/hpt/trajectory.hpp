#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpt/core/io.hpp"
#include "hpt/nn/network.hpp"
#include "hpt/nn/train.hpp"

namespace hpt {

using nn::Mat;
using nn::Params;

// The effective window (1 - alpha)^-1 and the checkpoint stride both ramp
// linearly over warmup_steps, then hold.
struct EmaSchedule {
  double alpha_start = 0.98, alpha_end = 0.9995;
  long warmup_steps = 2000;
  int tau_start = 2, tau_end = 10;

  static EmaSchedule disabled() { return {0, 0, 1, 1, 1}; }

  void validate() const {
    if (!(alpha_start >= 0 && alpha_start < 1 && alpha_end >= 0 && alpha_end < 1))
      throw std::invalid_argument("EMA alpha must lie in [0, 1)");
    if (warmup_steps < 1 || tau_start < 1 || tau_end < 1) throw std::invalid_argument("invalid EMA schedule");
  }
  double progress(long t) const { return std::min(1.0, static_cast<double>(t) / warmup_steps); }
  double window(long t) const {
    const double ws = 1 / (1 - alpha_start), we = 1 / (1 - alpha_end);
    return ws + (we - ws) * progress(t);
  }
  double alpha(long t) const { return 1 - 1 / window(t); }
  int stride(long t) const {
    return static_cast<int>(std::lround(tau_start + (tau_end - tau_start) * progress(t)));
  }
};

inline void ema_step(Params& ema, const Params& w, double alpha) {
  for (size_t i = 0; i < ema.size(); ++i) ema[i] = alpha * ema[i] + (1 - alpha) * w[i];
}

struct Checkpoint {
  std::uint64_t step = 0;
  double metric = 0;
  Params ema, grad, delta;
  std::vector<nn::SampleFactors> factors;  // per layer, only when requested
};

struct LayerShape {
  std::string name;
  int rows, cols;
  bool is_matrix;
  int layer;
};

struct TrajectoryManifest {
  std::vector<LayerShape> layers;
  int width = 0;
  double hp = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct TrajectoryRecord {
  TrajectoryManifest manifest;
  std::vector<Checkpoint> checkpoints;
  bool diverged = false;
};

inline TrajectoryManifest manifest_for(const nn::NetworkSpec& s) {
  TrajectoryManifest m;
  for (const auto& p : nn::param_layout(s)) m.layers.push_back({p.name, p.rows, p.cols, p.is_matrix, p.layer});
  m.width = s.n;
  return m;
}

// Metric value and gradient on a fixed evaluation set.
struct MetricEvaluator {
  nn::NetworkSpec spec;
  nn::Batch eval;
  bool per_sample = false;

  nn::GradResult operator()(const Params& p) const { return nn::grad(p, spec, eval, per_sample); }
};

// Turns the raw iterate stream into EMA checkpoints. A checkpoint is handed
// to the sink only once its delta to the next checkpoint is known; the last
// checkpoint closes with a zero delta.
class Recorder {
 public:
  using Sink = std::function<void(Checkpoint&&)>;
  using Evaluator = std::function<nn::GradResult(const Params&)>;

  Recorder(EmaSchedule sched, Evaluator eval, Sink sink)
      : sched_(sched), eval_(std::move(eval)), sink_(std::move(sink)) {
    sched_.validate();
  }

  bool operator()(long t, const Params& w, double /*loss*/) {
    if (t == 0) {
      ema_ = w;
      next_ = 0;
    } else {
      ema_step(ema_, w, sched_.alpha(t));
    }
    last_t_ = t;
    if (t == next_) {
      capture(t);
      next_ = t + sched_.stride(t);
    }
    return !flagged_;
  }

  // Closes the stream: the final iterate becomes a checkpoint if it is not one already.
  void finish() {
    if (!pending_) return;
    if (pending_->step != static_cast<std::uint64_t>(last_t_)) capture(last_t_);
    pending_->delta = nn::zeros_like(pending_->ema);
    sink_(std::move(*pending_));
    pending_.reset();
  }

  bool flagged() const { return flagged_; }

 private:
  void capture(long t) {
    auto g = eval_(ema_);
    if (!g.finite) flagged_ = true;
    Checkpoint c;
    c.step = static_cast<std::uint64_t>(t);
    c.metric = g.loss;
    c.ema = ema_;
    c.grad = std::move(g.grads);
    c.factors = std::move(g.factors);
    if (pending_) {
      pending_->delta = nn::sub(c.ema, pending_->ema);
      sink_(std::move(*pending_));
    }
    pending_ = std::make_unique<Checkpoint>(std::move(c));
  }

  EmaSchedule sched_;
  Evaluator eval_;
  Sink sink_;
  Params ema_;
  long next_ = 0, last_t_ = 0;
  bool flagged_ = false;
  std::unique_ptr<Checkpoint> pending_;
};

// Trains and records in one pass, keeping every checkpoint in memory.
inline TrajectoryRecord record(const nn::NetworkSpec& spec, const nn::OptimizerConfig& opt, const nn::Task& task,
                               std::uint64_t seed, const EmaSchedule& sched, const MetricEvaluator& eval,
                               bool keep_factors = false) {
  TrajectoryRecord rec;
  rec.manifest = manifest_for(spec);
  rec.manifest.seed = seed;
  rec.manifest.hp = opt.peak_lr;
  Recorder r(sched, eval, [&](Checkpoint&& c) {
    if (!keep_factors) c.factors.clear();
    rec.checkpoints.push_back(std::move(c));
  });
  const auto res = nn::train(spec, opt, task, seed, std::ref(r));
  r.finish();
  rec.diverged = res.status != nn::RunStatus::done || r.flagged();
  return rec;
}

// <g, dw> over every parameter, matrices and vectors alike.
inline double linearized_step(const Params& g, const Params& dw) {
  if (g.size() != dw.size()) throw std::invalid_argument("parameter lists differ");
  for (size_t i = 0; i < g.size(); ++i)
    if (g[i].rows() != dw[i].rows() || g[i].cols() != dw[i].cols())
      throw std::invalid_argument("parameter shapes differ");
  return nn::dot(g, dw);
}

struct LinearizedSeries {
  std::vector<double> dphi, cumulative;
  double total = 0;
};

inline LinearizedSeries linearized_total(const TrajectoryRecord& rec) {
  LinearizedSeries s;
  for (const auto& c : rec.checkpoints) {
    s.dphi.push_back(linearized_step(c.grad, c.delta));
    s.total += s.dphi.back();
    s.cumulative.push_back(s.total);
  }
  return s;
}

inline double loss_delta(const TrajectoryRecord& rec) {
  if (rec.checkpoints.empty()) return 0;
  return rec.checkpoints.back().metric - rec.checkpoints.front().metric;
}

// --- persistence ---

static_assert(std::endian::native == std::endian::little, "trajectory files are little-endian");

inline constexpr char kTrajMagic[8] = {'H', 'P', 'T', 'R', 'A', 'J', '0', '1'};

namespace detail {
inline void write_rowmajor(std::ofstream& out, const Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = m(i, j);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
}
inline Mat read_rowmajor(std::ifstream& in, int r, int c) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      double v;
      in.read(reinterpret_cast<char*>(&v), sizeof v);
      m(i, j) = v;
    }
  if (!in) throw std::runtime_error("truncated trajectory file");
  return m;
}
}  // namespace detail

inline nlohmann::json manifest_json(const TrajectoryRecord& rec) {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : rec.manifest.layers)
    j["layers"].push_back({{"name", l.name}, {"rows", l.rows}, {"cols", l.cols}, {"is_matrix", l.is_matrix},
                           {"layer", l.layer}});
  j["checkpoints"] = rec.checkpoints.size();
  j["config_hash"] = rec.manifest.config_hash;
  j["width"] = rec.manifest.width;
  j["hp"] = rec.manifest.hp;
  j["seed"] = rec.manifest.seed;
  j["diverged"] = rec.diverged;
  std::vector<double> metrics;
  for (const auto& c : rec.checkpoints) metrics.push_back(c.metric);
  j["metrics"] = metrics;
  return j;
}

// Binary layout: magic, then per checkpoint a u64 step followed by, for each
// layer in manifest order, the row-major f64 ema weights, gradient and delta.
// A JSON sidecar (path + ".json") carries the manifest.
inline void write_trajectory(const std::filesystem::path& path, const TrajectoryRecord& rec) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kTrajMagic, 8);
  for (const auto& c : rec.checkpoints) {
    const std::uint64_t step = c.step;
    out.write(reinterpret_cast<const char*>(&step), sizeof step);
    for (size_t l = 0; l < rec.manifest.layers.size(); ++l) {
      detail::write_rowmajor(out, c.ema[l]);
      detail::write_rowmajor(out, c.grad[l]);
      detail::write_rowmajor(out, c.delta[l]);
    }
  }
  std::ofstream side(path.string() + ".json");
  side << manifest_json(rec).dump(1) << '\n';
}

inline TrajectoryRecord read_trajectory(const std::filesystem::path& path) {
  std::ifstream side(path.string() + ".json");
  if (!side) throw std::runtime_error("missing sidecar for " + path.string());
  const auto j = nlohmann::json::parse(side);
  TrajectoryRecord rec;
  for (const auto& l : j["layers"])
    rec.manifest.layers.push_back({l["name"], l["rows"], l["cols"], l["is_matrix"], l["layer"]});
  rec.manifest.config_hash = j["config_hash"];
  rec.manifest.width = j["width"];
  rec.manifest.hp = j["hp"];
  rec.manifest.seed = j["seed"];
  rec.diverged = j["diverged"];
  const auto metrics = j["metrics"].get<std::vector<double>>();
  const size_t count = j["checkpoints"];
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kTrajMagic, 8) != 0) throw std::runtime_error("bad trajectory magic");
  for (size_t k = 0; k < count; ++k) {
    Checkpoint c;
    in.read(reinterpret_cast<char*>(&c.step), sizeof c.step);
    for (const auto& l : rec.manifest.layers) {
      c.ema.push_back(detail::read_rowmajor(in, l.rows, l.cols));
      c.grad.push_back(detail::read_rowmajor(in, l.rows, l.cols));
      c.delta.push_back(detail::read_rowmajor(in, l.rows, l.cols));
    }
    c.metric = metrics.at(k);
    rec.checkpoints.push_back(std::move(c));
  }
  return rec;
}

inline void write_linearization_csv(const std::filesystem::path& path, const TrajectoryRecord& rec) {
  const auto s = linearized_total(rec);
  CsvWriter w(path, {"step", "metric", "dphi", "cumulative_phi"}, rec.manifest.config_hash);
  for (size_t i = 0; i < rec.checkpoints.size(); ++i)
    w.row(rec.checkpoints[i].step, rec.checkpoints[i].metric, s.dphi[i], s.cumulative[i]);
}

}  // namespace hpt
