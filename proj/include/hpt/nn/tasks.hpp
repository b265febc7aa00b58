#pragma once

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

#include "hpt/core/rng.hpp"
#include "hpt/nn/network.hpp"

namespace hpt::nn {

enum class TaskKind { ball_indicator, k_index, single_index, external_csv };

inline TaskKind parse_task(const std::string& s) {
  if (s == "ball_indicator") return TaskKind::ball_indicator;
  if (s == "k_index") return TaskKind::k_index;
  if (s == "single_index") return TaskKind::single_index;
  if (s == "external_csv") return TaskKind::external_csv;
  throw std::invalid_argument("unknown task " + s);
}

struct TaskSpec {
  TaskKind kind = TaskKind::ball_indicator;
  int d = 16;
  int k = 1;
  double noise = 0;  // sigma_eps
  LossKind loss = LossKind::bce;
  int train_size = 0;  // 0: fresh batches every step
  int val_size = 4096;
  std::string csv_path;
  bool standardize = true;

  static TaskSpec ball(int d) {
    TaskSpec t;
    t.d = d;
    return t;
  }
};

inline double chi2_median(int d) {
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(d), 0.5);
}

// A sampler for one task instance. Any fixed structure (the single-index
// direction, a loaded dataset) is drawn from the task seed at construction.
class Task {
 public:
  Task(TaskSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    if (spec_.d < 1) throw std::invalid_argument("task dimension must be positive");
    switch (spec_.kind) {
      case TaskKind::ball_indicator:
        threshold_ = chi2_median(spec_.d);
        break;
      case TaskKind::k_index:
        if (spec_.k < 1 || spec_.k > spec_.d) throw std::invalid_argument("k_index needs 1 <= k <= d");
        break;
      case TaskKind::single_index: {
        Rng rng = make_rng(seed, "task/direction");
        std::normal_distribution<double> nd;
        direction_ = Vec(spec_.d);
        for (int i = 0; i < spec_.d; ++i) direction_(i) = nd(rng);
        direction_ /= direction_.norm();
        break;
      }
      case TaskKind::external_csv:
        load_csv();
        break;
    }
  }

  const TaskSpec& spec() const { return spec_; }
  int output_dim() const { return spec_.loss == LossKind::softmax_ce ? classes_ : 1; }
  double threshold() const { return threshold_; }

  Batch sample(int B, Rng& rng) const {
    Batch b{Mat(spec_.d, B), Mat(1, B)};
    std::normal_distribution<double> nd;
    switch (spec_.kind) {
      case TaskKind::ball_indicator:
        for (int i = 0; i < B; ++i) {
          for (int j = 0; j < spec_.d; ++j) b.X(j, i) = nd(rng);
          b.Y(0, i) = b.X.col(i).squaredNorm() <= threshold_ ? 1.0 : 0.0;
        }
        break;
      case TaskKind::k_index: {
        const double sd = 2.0 / std::sqrt(static_cast<double>(spec_.d));
        const double scale = static_cast<double>(spec_.d) / (4.0 * spec_.k);
        for (int i = 0; i < B; ++i) {
          for (int j = 0; j < spec_.d; ++j) b.X(j, i) = sd * nd(rng);
          b.Y(0, i) = std::sqrt(scale * b.X.col(i).head(spec_.k).squaredNorm()) + spec_.noise * nd(rng);
        }
        break;
      }
      case TaskKind::single_index: {
        // Normalized relu teacher: zero mean, unit variance under N(0,1).
        const double m = 1 / std::sqrt(2 * std::numbers::pi), sd = std::sqrt(0.5 - m * m);
        for (int i = 0; i < B; ++i) {
          for (int j = 0; j < spec_.d; ++j) b.X(j, i) = nd(rng);
          const double z = direction_.dot(b.X.col(i));
          b.Y(0, i) = ((z > 0 ? z : 0) - m) / sd + spec_.noise * nd(rng);
        }
        break;
      }
      case TaskKind::external_csv: {
        std::uniform_int_distribution<Eigen::Index> u(0, data_.X.cols() - 1);
        for (int i = 0; i < B; ++i) {
          const auto r = u(rng);
          b.X.col(i) = data_.X.col(r);
          b.Y(0, i) = data_.Y(0, r);
        }
        break;
      }
    }
    return b;
  }

 private:
  void load_csv() {
    std::ifstream in(spec_.csv_path);
    if (!in) throw std::invalid_argument("cannot open task csv " + spec_.csv_path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::vector<double> r;
      std::stringstream ss(line);
      std::string cell;
      bool numeric = true;
      while (std::getline(ss, cell, ',')) {
        try {
          size_t used = 0;
          r.push_back(std::stod(cell, &used));
        } catch (const std::exception&) {
          numeric = false;
          break;
        }
      }
      if (!numeric) {
        if (rows.empty()) continue;  // header line
        throw std::invalid_argument("non-numeric row in task csv");
      }
      if (static_cast<int>(r.size()) != spec_.d + 1) throw std::invalid_argument("task csv row width != d + 1");
      rows.push_back(std::move(r));
    }
    if (rows.empty()) throw std::invalid_argument("empty task csv");
    const auto P = static_cast<Eigen::Index>(rows.size());
    data_.X.resize(spec_.d, P);
    data_.Y.resize(1, P);
    int maxc = 0;
    for (Eigen::Index i = 0; i < P; ++i) {
      for (int j = 0; j < spec_.d; ++j) data_.X(j, i) = rows[i][j];
      data_.Y(0, i) = rows[i][spec_.d];
      maxc = std::max(maxc, static_cast<int>(rows[i][spec_.d]));
    }
    classes_ = maxc + 1;
    if (spec_.standardize) {
      for (int j = 0; j < spec_.d; ++j) {
        auto r = data_.X.row(j);
        const double m = r.mean();
        const double sd = std::sqrt((r.array() - m).square().mean());
        r = (r.array() - m) / (sd > 0 ? sd : 1.0);
      }
    }
  }

  TaskSpec spec_;
  double threshold_ = 0;
  Vec direction_;
  Batch data_;
  int classes_ = 2;
};

}  // namespace hpt::nn
