#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hpt/core/rng.hpp"
#include "hpt/nn/network.hpp"
#include "hpt/nn/optim.hpp"
#include "hpt/nn/tasks.hpp"

namespace hpt::nn {

enum class RunStatus { done, diverged, failed };

inline const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::done: return "done";
    case RunStatus::diverged: return "diverged";
    case RunStatus::failed: return "failed";
  }
  return "failed";
}

constexpr double kDivergenceThreshold = 1e6;

inline bool diverged(double loss) { return !std::isfinite(loss) || std::abs(loss) > kDivergenceThreshold; }

// Called with (t, w_t, train loss at w_t's batch). t runs 0..T; t = 0 is the
// initialization and carries NaN loss. Returning false stops the run.
using IterateObserver = std::function<bool(long, const Params&, double)>;

struct TrainResult {
  RunStatus status = RunStatus::done;
  long steps = 0;
  std::vector<double> train_loss;
  Params final_params;
};

// A fixed dataset of train_size samples is drawn once when train_size > 0;
// otherwise each step sees a fresh batch.
inline TrainResult train(const NetworkSpec& spec, const OptimizerConfig& opt, const Task& task, std::uint64_t seed,
                         const IterateObserver& observe = {}) {
  spec.validate();
  TrainResult r;
  Params p = init_network(spec, seed);
  Optimizer o(spec, opt);
  o.init(p);
  Rng data_rng = make_rng(seed, "train/batches");
  Batch fixed;
  const int ts = task.spec().train_size;
  if (ts > 0) {
    Rng frng = make_rng(seed, "train/dataset");
    fixed = task.sample(ts, frng);
  }
  if (observe && !observe(0, p, std::nan(""))) {
    r.final_params = std::move(p);
    return r;
  }
  for (long t = 0; t < opt.steps; ++t) {
    Batch b;
    if (ts > 0) {
      std::uniform_int_distribution<Eigen::Index> u(0, ts - 1);
      b.X.resize(fixed.X.rows(), opt.batch_size);
      b.Y.resize(fixed.Y.rows(), opt.batch_size);
      for (int i = 0; i < opt.batch_size; ++i) {
        const auto k = u(data_rng);
        b.X.col(i) = fixed.X.col(k);
        b.Y.col(i) = fixed.Y.col(k);
      }
    } else {
      b = task.sample(opt.batch_size, data_rng);
    }
    const auto g = grad(p, spec, b);
    r.train_loss.push_back(g.loss);
    if (diverged(g.loss)) {
      r.status = RunStatus::diverged;
      break;
    }
    o.step(p, g.grads);
    r.steps = t + 1;
    bool finite = true;
    for (const auto& m : p) finite = finite && m.allFinite();
    if (!finite) {
      r.status = RunStatus::diverged;
      break;
    }
    if (observe && !observe(t + 1, p, g.loss)) break;
  }
  r.final_params = std::move(p);
  return r;
}

}  // namespace hpt::nn
