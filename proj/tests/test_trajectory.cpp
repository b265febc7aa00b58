#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "hpt/trajectory.hpp"

using namespace hpt;
using nn::GradResult;

namespace {

// Quadratic metric L(w) = 1/2 w^T A w - b^T w on a single 1 x k parameter.
struct Quadratic {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;

  explicit Quadratic(int k) : A(k, k), b(k) {
    Rng rng(17);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd M(k, k);
    for (int i = 0; i < k * k; ++i) M(i) = nd(rng);
    A = M * M.transpose() / k + Eigen::MatrixXd::Identity(k, k);
    for (int i = 0; i < k; ++i) b(i) = nd(rng);
  }
  double loss(const Params& p) const {
    const Eigen::VectorXd w = p[0].row(0).transpose();
    return 0.5 * w.dot(A * w) - b.dot(w);
  }
  GradResult operator()(const Params& p) const {
    GradResult g;
    g.loss = loss(p);
    const Eigen::VectorXd w = p[0].row(0).transpose();
    g.grads = {Mat((A * w - b).transpose())};
    return g;
  }
};

// Gradient descent iterates on the quadratic, optionally with +-noise
// added to every iterate to mimic stochastic oscillation.
std::vector<Params> gd_path(const Quadratic& q, int T, double lr, double noise = 0) {
  Rng rng(3);
  std::normal_distribution<double> nd(0, noise);
  std::vector<Params> out;
  Params w{Mat::Constant(1, q.b.size(), 2.0)};
  Params clean = w;
  out.push_back(w);
  for (int t = 0; t < T; ++t) {
    clean[0] -= lr * q(clean).grads[0];
    w = clean;
    if (noise > 0)
      for (Eigen::Index i = 0; i < w[0].size(); ++i) w[0](i) += nd(rng);
    out.push_back(w);
  }
  return out;
}

TrajectoryRecord run_recorder(const Quadratic& q, const std::vector<Params>& path, EmaSchedule sched) {
  TrajectoryRecord rec;
  rec.manifest.layers = {{"W0", 1, static_cast<int>(q.b.size()), true, 0}};
  rec.manifest.width = 1;
  Recorder r(sched, q, [&](Checkpoint&& c) { rec.checkpoints.push_back(std::move(c)); });
  for (size_t t = 0; t < path.size(); ++t) r(static_cast<long>(t), path[t], 0);
  r.finish();
  return rec;
}

EmaSchedule fixed(int tau, double alpha = 0) { return {alpha, alpha, 1, tau, tau}; }

}  // namespace

TEST(EmaSchedule, WindowMidpoint) {
  const EmaSchedule s;
  EXPECT_NEAR(s.window(1000), 1025, 1e-9);
  EXPECT_NEAR(s.window(0), 50, 1e-9);
  EXPECT_NEAR(s.window(5000), 2000, 1e-9);
  EXPECT_EQ(s.stride(0), 2);
  EXPECT_EQ(s.stride(1000), 6);
  EXPECT_EQ(s.stride(4000), 10);
}

TEST(EmaStep, ConstantIteratesAreFixed) {
  Params ema{Mat::Constant(2, 2, 3.0)};
  const Params w = ema;
  for (int t = 0; t < 50; ++t) ema_step(ema, w, 0.9);
  EXPECT_LT((ema[0] - w[0]).norm(), 1e-14);
}

TEST(EmaStep, AlphaZeroTracks) {
  Params ema{Mat::Zero(2, 2)};
  const Params w{Mat::Random(2, 2)};
  ema_step(ema, w, 0);
  EXPECT_TRUE(ema[0] == w[0]);
}

TEST(Record, StrideOneAlphaZeroIsRawTrajectory) {
  Quadratic q(4);
  const auto path = gd_path(q, 30, 0.05);
  const auto rec = run_recorder(q, path, EmaSchedule::disabled());
  ASSERT_EQ(rec.checkpoints.size(), path.size());
  for (size_t t = 0; t < path.size(); ++t) {
    EXPECT_EQ(rec.checkpoints[t].step, t);
    EXPECT_TRUE(rec.checkpoints[t].ema[0] == path[t][0]);
  }
}

TEST(Record, LengthMatchesSubsampling) {
  Quadratic q(3);
  const auto path = gd_path(q, 100, 0.01);
  const auto rec = run_recorder(q, path, fixed(7));
  // Steps 0, 7, ..., 98 plus the final step 100.
  EXPECT_EQ(rec.checkpoints.size(), 16u);
  EXPECT_EQ(rec.checkpoints.back().step, 100u);
  for (size_t i = 1; i < rec.checkpoints.size(); ++i)
    EXPECT_GT(rec.checkpoints[i].step, rec.checkpoints[i - 1].step);
}

TEST(Record, StrideWarmsUp) {
  Quadratic q(2);
  EmaSchedule s{0.98, 0.9995, 200, 2, 10};
  const auto rec = run_recorder(q, gd_path(q, 400, 0.001), s);
  EXPECT_EQ(rec.checkpoints[1].step - rec.checkpoints[0].step, 2u);
  const auto n = rec.checkpoints.size();
  EXPECT_EQ(rec.checkpoints[n - 2].step - rec.checkpoints[n - 3].step, 10u);
}

TEST(Record, DeltaIsExactDifference) {
  Quadratic q(3);
  const auto rec = run_recorder(q, gd_path(q, 50, 0.02, 0.01), EmaSchedule{0.9, 0.95, 20, 2, 4});
  for (size_t i = 0; i + 1 < rec.checkpoints.size(); ++i)
    EXPECT_TRUE(rec.checkpoints[i].delta[0] == rec.checkpoints[i + 1].ema[0] - rec.checkpoints[i].ema[0]);
  EXPECT_EQ(rec.checkpoints.back().delta[0].norm(), 0);
}

TEST(Linearization, StepExamples) {
  const Params z{Mat::Zero(2, 2)}, g{Mat::Random(2, 2)}, ones{Mat::Ones(2, 2)};
  EXPECT_EQ(linearized_step(g, z), 0);
  EXPECT_EQ(linearized_step(ones, ones), 4);
  Mat a(2, 2), b(2, 2);
  a << 1, 0, 0, 0;
  b << 0, 1, 0, 0;
  EXPECT_EQ(linearized_step({a}, {b}), 0);
  EXPECT_THROW(linearized_step({a}, {Mat::Zero(3, 2)}), std::invalid_argument);
}

TEST(Linearization, SingleCheckpointIsZero) {
  Quadratic q(2);
  const auto rec = run_recorder(q, gd_path(q, 0, 0.1), EmaSchedule::disabled());
  ASSERT_EQ(rec.checkpoints.size(), 1u);
  EXPECT_EQ(linearized_total(rec).total, 0);
  EXPECT_EQ(loss_delta(rec), 0);
}

TEST(Linearization, QuadraticTinySteps) {
  Quadratic q(5);
  const auto rec = run_recorder(q, gd_path(q, 4000, 1e-4), EmaSchedule::disabled());
  const double phi = linearized_total(rec).total, dl = loss_delta(rec);
  EXPECT_LT(dl, 0);
  EXPECT_LT(std::abs(phi - dl) / std::abs(dl), 1e-3);
}

TEST(Linearization, TelescopingIsExact) {
  Quadratic q(4);
  const auto rec = run_recorder(q, gd_path(q, 200, 0.01, 0.05), EmaSchedule{0.9, 0.99, 100, 2, 5});
  double sum = 0;
  for (size_t i = 0; i + 1 < rec.checkpoints.size(); ++i)
    sum += rec.checkpoints[i + 1].metric - rec.checkpoints[i].metric;
  EXPECT_NEAR(sum, loss_delta(rec), 1e-10 * std::abs(loss_delta(rec)));
}

TEST(Linearization, ErrorShrinksWithStride) {
  Quadratic q(6);
  const auto path = gd_path(q, 800, 0.02);
  double prev = std::numeric_limits<double>::infinity();
  for (int tau : {8, 4, 2, 1}) {
    const auto rec = run_recorder(q, path, fixed(tau));
    const double err = std::abs(linearized_total(rec).total - loss_delta(rec));
    EXPECT_LT(err, prev) << "tau " << tau;
    prev = err;
  }
}

TEST(Linearization, EmaDampsOscillation) {
  Quadratic q(4);
  const auto path = gd_path(q, 600, 0.01, 0.05);
  auto mean_sq = [](const TrajectoryRecord& r) {
    double s = 0;
    for (const auto& c : r.checkpoints) s += c.delta[0].squaredNorm();
    return s / r.checkpoints.size();
  };
  const auto ema = run_recorder(q, path, fixed(3, 0.95));
  const auto raw = run_recorder(q, path, fixed(3, 0.0));
  EXPECT_LE(mean_sq(ema), mean_sq(raw));
}

TEST(Persistence, RoundTrip) {
  Quadratic q(3);
  auto rec = run_recorder(q, gd_path(q, 40, 0.05), fixed(4));
  rec.manifest.config_hash = "abc123";
  rec.manifest.hp = 0.05;
  rec.manifest.seed = 9;
  const auto dir = std::filesystem::temp_directory_path() / "hpt_traj_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "run.traj";
  write_trajectory(path, rec);
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "HPTRAJ01");
  const auto back = read_trajectory(path);
  ASSERT_EQ(back.checkpoints.size(), rec.checkpoints.size());
  EXPECT_EQ(back.manifest.config_hash, "abc123");
  for (size_t i = 0; i < rec.checkpoints.size(); ++i) {
    EXPECT_EQ(back.checkpoints[i].step, rec.checkpoints[i].step);
    EXPECT_EQ(back.checkpoints[i].metric, rec.checkpoints[i].metric);
    EXPECT_TRUE(back.checkpoints[i].ema[0] == rec.checkpoints[i].ema[0]);
    EXPECT_TRUE(back.checkpoints[i].grad[0] == rec.checkpoints[i].grad[0]);
    EXPECT_TRUE(back.checkpoints[i].delta[0] == rec.checkpoints[i].delta[0]);
  }
  // Row-major layout: the first stored ema value after the step is W(0, 0), then W(0, 1).
  std::ifstream raw(path, std::ios::binary);
  raw.seekg(16);
  double v0, v1;
  raw.read(reinterpret_cast<char*>(&v0), 8);
  raw.read(reinterpret_cast<char*>(&v1), 8);
  EXPECT_EQ(v0, rec.checkpoints[0].ema[0](0, 0));
  EXPECT_EQ(v1, rec.checkpoints[0].ema[0](0, 1));
  std::filesystem::remove_all(dir);
}

TEST(Record, MlpRunLinearizationWithEma) {
  nn::NetworkSpec s;
  s.d = 8;
  s.n = 64;
  s.L = 1;
  s.loss = nn::LossKind::bce;
  s.abc = nn::mup_table(8, 1, nn::OptKind::adam);
  nn::OptimizerConfig o;
  o.peak_lr = 0.01;
  o.steps = 300;
  o.batch_size = 64;
  nn::Task task(nn::TaskSpec::ball(8), 0);
  Rng vr = make_rng(1, "val");
  MetricEvaluator ev{s, task.sample(1024, vr), false};
  const auto rec = record(s, o, task, 1, EmaSchedule{0.9, 0.99, 300, 1, 3}, ev);
  ASSERT_FALSE(rec.diverged);
  const double phi = linearized_total(rec).total, dl = loss_delta(rec);
  EXPECT_LT(dl, 0);
  EXPECT_LT(std::abs(phi - dl), 0.05 * std::abs(dl));
}
