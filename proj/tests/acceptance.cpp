// End-to-end acceptance run. Prints one PASS/FAIL line per criterion on
// stdout; progress goes to stderr. Sweeps are cached under the output
// directory, so a rerun only re-evaluates.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "hpt/pipeline.hpp"
#include "hpt/synthetic_profiles.hpp"

#ifndef HPT_CONFIG_DIR
#define HPT_CONFIG_DIR "configs"
#endif
#ifndef HPT_ACCEPTANCE_DIR
#define HPT_ACCEPTANCE_DIR "acceptance_runs"
#endif

namespace fs = std::filesystem;
using namespace hpt;
using pipeline::Context;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Env {
  fs::path configs, out;
  int workers = 1;
};

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

Context context(const Env& env, const std::string& config) {
  Context ctx(build_config(ConfigFile::load(env.configs / config), std::nullopt), env.out, false, env.workers);
  ctx.log = &std::cerr;
  return ctx;
}

// Rows of a pipeline CSV keyed by header name; '#' lines are metadata.
std::vector<std::map<std::string, std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (header.empty()) {
      header = split(line);
      continue;
    }
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

double d(const std::map<std::string, std::string>& row, const std::string& key) { return std::stod(row.at(key)); }

// Trains (cached), decomposes and optionally runs MCI on a desk sweep.
struct SweepRun {
  double seconds = 0;
  bool cached = true;
};

SweepRun run_sweep(Context& ctx, bool with_mci) {
  const auto t0 = Clock::now();
  SweepRun r;
  auto note = [&](const pipeline::Outcome& o) {
    if (o.produced > 0) r.cached = false;
    if (o.missing > 0) throw std::runtime_error(std::to_string(o.missing) + " artifacts missing in " + ctx.root.string());
  };
  note(pipeline::cmd_train(ctx));
  note(pipeline::cmd_decompose(ctx));
  if (with_mci) note(pipeline::cmd_mci(ctx));
  r.seconds = since(t0);
  return r;
}

std::string runtime_note(const SweepRun& r) {
  return r.cached ? "sweep reused from cache" : "sweep " + fmt(r.seconds, 3) + " s";
}

// --- 1 ---
Verdict rf_solver(const Env& env) {
  const auto t0 = Clock::now();
  const auto cfg = context(env, "rf.ini").cfg;
  const auto mom = pipeline::rf_moments(cfg);
  const auto lambdas = pipeline::log_grid(cfg.rf.lambda_min, cfg.rf.lambda_max, 50);
  double worst_res = 0, worst_der = 0;
  for (double p2 : {1.0, 2.0, 4.0, 8.0, 1e6})
    for (double l : lambdas) {
      const auto s = pipeline::rf_at(cfg, p2);
      const auto r = rf::risk_detail(l, s, mom);
      worst_res = std::max({worst_res, std::abs(r.sol.residual1), std::abs(r.sol.residual2)});
      const double h = 1e-5 * l;
      const auto up = rf::solve_stieltjes(l + h, s, mom), dn = rf::solve_stieltjes(l - h, s, mom);
      const long double fd1 = (up.m1l - dn.m1l) / (2.0L * h), fd2 = (up.m2l - dn.m2l) / (2.0L * h);
      worst_der = std::max({worst_der, static_cast<double>(std::fabs(fd1 - r.dm1) / std::fabs(fd1)),
                            static_cast<double>(std::fabs(fd2 - r.dm2) / std::fabs(fd2))});
    }
  const double secs = since(t0);
  return {worst_res < 1e-12 && worst_der < 1e-6 && secs < 30,
          "max residual " + fmt(worst_res) + ", max derivative rel err " + fmt(worst_der) + ", " + fmt(secs, 3) + " s"};
}

// --- 2 ---
Verdict rf_rates(const Env& env) {
  const auto t0 = Clock::now();
  const auto cfg = context(env, "rf.ini").cfg;
  const auto r = rf::rf_rates(cfg.rf.setting, pipeline::rf_moments(cfg), cfg.rf.rate_psi2);
  const double a = r.loss_gap.exponent, b = r.hp_gap.exponent, c = r.subopt_gap.exponent;
  const double secs = since(t0);
  const bool ok_a = std::abs(a + 1) <= 0.1, ok_b = b <= -0.85, ok_c = c <= -1.8;
  return {ok_a && ok_b && ok_c && secs < 60,
          "loss-gap exponent " + fmt(a) + (ok_a ? "" : " (out of -1 +/- 0.1)") + ", hp-gap exponent " + fmt(b) +
              (ok_b ? "" : " (above -0.85)") + ", subopt exponent " + fmt(c) + (ok_c ? "" : " (above -1.8)") + ", " +
              fmt(secs, 3) + " s"};
}

// --- 3 ---
Verdict rf_monte_carlo(const Env& env) {
  const auto t0 = Clock::now();
  auto ctx = context(env, "rf.ini");
  const bool cached = pipeline::cmd_rf(ctx, "mc").skipped > 0;
  const auto rows = read_csv(ctx.root / "rf" / "mc.csv");
  bool ok = !rows.empty();
  std::string detail;
  for (const auto& row : rows) {
    const double z = std::abs(d(row, "z")), rel = d(row, "rel_err");
    ok = ok && z <= 3 && rel <= 0.05 && d(row, "failed_trials") == 0;
    detail += "psi2 " + row.at("psi2") + ": |z| " + fmt(z, 3) + ", rel " + fmt(rel, 3) + "; ";
  }
  const double secs = since(t0);
  return {ok && (cached || secs < 600), detail + (cached ? std::string("reused from cache") : fmt(secs, 3) + " s")};
}

// --- 4 ---
Verdict frontiers(const Env& env) {
  const auto t0 = Clock::now();
  bool cached = false;
  auto run = [&](const std::string& config) {
    auto ctx = context(env, config);
    cached = pipeline::cmd_gridsim(ctx, "frontier").skipped > 0 || cached;
    return pipeline::read_json(ctx.root / "gridsim" / "frontier.json");
  };
  const auto fast = run("gridsim_fast.ini"), slow = run("gridsim_slow.ini");
  const double fd = fast["direct_exponent"], ft = fast["transfer_exponent"];
  const double sd = slow["direct_exponent"], st = slow["transfer_exponent"];
  const bool fast_ok = std::abs(fd - 0.40) <= 0.05 && std::abs(ft - 0.50) <= 0.05 && ft > fd &&
                       fast["verdict"] == "fast_useful";
  const bool slow_ok = std::abs(st - 0.33) <= 0.05 && st < sd && slow["verdict"] != "fast_useful";
  const double secs = since(t0);
  return {fast_ok && slow_ok && (cached || secs < 300),
          "beta 1: direct " + fmt(fd) + ", transfer " + fmt(ft) + " (" + fast["verdict"].get<std::string>() +
              "); beta 0.4: direct " + fmt(sd) + ", transfer " + fmt(st) + " (" +
              slow["verdict"].get<std::string>() + "); " + (cached ? std::string("reused from cache") : fmt(secs, 3) + " s")};
}

// --- 5 ---
Verdict identities(const Env& env) {
  auto ctx = context(env, "desk.ini");
  const auto sweep = run_sweep(ctx, true);
  const auto rows = read_csv(ctx.root / "decompose" / "identities.csv");
  const auto mci = read_csv(ctx.root / "mci" / "identity.csv");
  double trace = 0, topn = 0, mci_err = 0;
  size_t checkpoints = 0;
  for (const auto& r : rows) {
    trace = std::max(trace, d(r, "max_trace_rel_err"));
    topn = std::max(topn, d(r, "topn_rel_err"));
    checkpoints += static_cast<size_t>(d(r, "checkpoints"));
  }
  for (const auto& r : mci) mci_err = std::max(mci_err, d(r, "rel_err"));
  const size_t cells = pipeline::sweep_cells(ctx.cfg).size();
  const bool timely = sweep.cached || sweep.seconds < 1200;
  return {rows.size() == cells && !mci.empty() && trace <= 1e-8 && topn <= 1e-8 && mci_err <= 1e-6 && timely,
          std::to_string(rows.size()) + "/" + std::to_string(cells) + " cells, " + std::to_string(checkpoints) +
              " checkpoints: trace " + fmt(trace) + ", top-n " + fmt(topn) + ", MCI " + fmt(mci_err) + " over " +
              std::to_string(mci.size()) + " cells; " + runtime_note(sweep)};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Linearization error of one cell with the EMA switched off, accumulated on
// the fly so no trajectory is kept.
double raw_linearization_error(const ExperimentConfig& cfg, const pipeline::Cell& cell, const nn::Task& task,
                               const nn::Batch& val) {
  const auto spec = cfg.net_at(cell.width);
  auto opt = cfg.opt;
  opt.peak_lr = cell.lr;
  double phi = 0, first = NAN, last = NAN;
  Recorder r(EmaSchedule::disabled(), MetricEvaluator{spec, val, false}, [&](Checkpoint&& c) {
    phi += linearized_step(c.grad, c.delta);
    if (std::isnan(first)) first = c.metric;
    last = c.metric;
  });
  nn::train(spec, opt, task, pipeline::init_seed(cfg, cell.seed), std::ref(r));
  r.finish();
  return std::abs(phi - (last - first)) / std::abs(last - first);
}

// --- 6 ---
Verdict linearization(const Env& env) {
  auto ctx = context(env, "desk.ini");
  run_sweep(ctx, false);
  const auto rows = read_csv(ctx.root / "decompose" / "identities.csv");
  std::vector<double> ema;
  std::map<double, double> worst_by_lr;
  int over = 0;
  for (const auto& r : rows) {
    const double e = d(r, "linearization_rel_err");
    ema.push_back(e);
    worst_by_lr[d(r, "lr")] = std::max(worst_by_lr[d(r, "lr")], e);
    if (!(e <= 0.05)) ++over;
  }
  if (ema.empty()) return {false, "no decomposed cells"};

  const auto cache = ctx.root / "acceptance_raw_linearization.json";
  std::vector<double> raw;
  if (fs::exists(cache)) {
    raw = pipeline::read_json(cache).get<std::vector<double>>();
  } else {
    const auto cells = pipeline::sweep_cells(ctx.cfg);
    const auto task = pipeline::make_task(ctx.cfg);
    const auto val = pipeline::validation_batch(ctx.cfg, task);
    raw.assign(cells.size(), NAN);
    pipeline::parallel_for(cells.size(), ctx.workers, [&](size_t i) {
      try {
        raw[i] = raw_linearization_error(ctx.cfg, cells[i], task, val);
      } catch (const std::exception&) {
      }
    });
    std::erase_if(raw, [](double v) { return !std::isfinite(v); });
    pipeline::write_json(cache, raw);
  }
  const double med_ema = median(ema), med_raw = raw.empty() ? NAN : median(raw);
  std::string per_lr;
  for (const auto& [lr, e] : worst_by_lr) per_lr += " lr " + fmt(lr, 3) + ": " + fmt(e, 3) + ";";
  return {over == 0 && med_raw > med_ema,
          std::to_string(over) + "/" + std::to_string(ema.size()) + " cells above 5%; worst by lr:" + per_lr +
              " median EMA " + fmt(med_ema, 3) + " vs EMA off " + fmt(med_raw, 3)};
}

trunc::LossCurveGrid random_grid(int g, int n, Rng& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  trunc::LossCurveGrid P;
  P.theta = trunc::uniform_axis(0, 1, g);
  P.phi.resize(g, n);
  for (int i = 0; i < g; ++i) {
    double acc = 0;
    for (int k = 0; k < n; ++k) P.phi(i, k) = acc += u(rng);
  }
  return P;
}

// --- 7 ---
Verdict truncation(const Env&) {
  const auto t0 = Clock::now();
  int worst_dev = 0;
  bool khat_ok = true;
  for (int k0 : {8, 32}) {
    trunc::PlantedSpec s;
    s.k0 = k0;
    s.tail_slope = 0.4;
    std::map<int, trunc::LossCurveGrid> prof;
    for (int n : {80, 128, 256, 512}) prof[n] = trunc::planted_profile(s, n);
    for (const auto& [n, kr] : trunc::compute_khat(prof)) {
      if (kr.fail) khat_ok = false;
      for (int v : kr.kappa) worst_dev = std::max(worst_dev, std::abs(v - k0));
    }
  }
  khat_ok = khat_ok && worst_dev <= 2;

  // Exact agreement is required. Also counted: coordinate descent at or below
  // every single-coordinate move away from the brute-force optimum.
  int total = 0, exact = 0, within_move = 0;
  Rng rng = make_rng(7, "acceptance/truncation");
  for (int g = 1; g <= 3; ++g)
    for (int n = 1; n <= 8; ++n)
      for (int rep = 0; rep < 8; ++rep)
        for (double tau : {0.0, 0.05, 1.0}) {
          const auto A = random_grid(g, n, rng), B = random_grid(g, n, rng);
          const double cd = trunc::minimize_proxy(A, B, tau, tau).objective;
          const auto bf = trunc::brute_force_proxy(A, B, tau, tau);
          const double tol = 1e-12 * std::max(1.0, std::abs(bf.objective));
          ++total;
          if (std::abs(cd - bf.objective) <= tol) ++exact;
          double move = INFINITY;
          for (int i = 0; i < g; ++i)
            for (int k = 1; k <= n; ++k) {
              if (k == bf.kappa[i]) continue;
              auto t = bf.kappa;
              t[i] = k;
              move = std::min(move, trunc::proxy_objective(t, tau, tau, A, B));
            }
          if (cd <= move + tol || std::abs(cd - bf.objective) <= tol) ++within_move;
        }
  const double secs = since(t0);
  return {khat_ok && exact == total && secs < 60,
          "khat max deviation " + std::to_string(worst_dev) + (khat_ok ? "" : " (failed)") +
              "; coordinate descent equals brute force on " + std::to_string(exact) + "/" + std::to_string(total) +
              " instances, within one coordinate move on " + std::to_string(within_move) + "/" +
              std::to_string(total) + "; " + fmt(secs, 3) + " s"};
}

// --- 8 ---
Verdict tn_bound(const Env& env) {
  bool ok = true;
  std::string detail;
  for (const char* config : {"gridsim_fast.ini", "gridsim_slow.ini"}) {
    auto ctx = context(env, config);
    pipeline::cmd_report(ctx);
    const auto rep = pipeline::read_json(ctx.root / "report" / "report.json");
    int holds = 0, total = 0;
    double slack = INFINITY;
    for (const auto& r : rep["tn_vs_bn"]) {
      ++total;
      const double t = pipeline::num(r["t_n"]), b = r["b_n"];
      if (t >= b) ++holds;
      slack = std::min(slack, t - b);
    }
    ok = ok && total > 0 && holds == total;
    detail += std::string(config) + ": " + std::to_string(holds) + "/" + std::to_string(total) +
              " widths, min t_n - b_n " + fmt(slack) + "; ";
  }
  return {ok, detail};
}

// --- 9 ---
Verdict slow_transfer(const Env& env) {
  auto ball = context(env, "ball_slow.ini");
  const auto t0 = Clock::now();
  const auto o = pipeline::cmd_train(ball);
  const double secs = since(t0);
  if (o.missing > 0) return {false, std::to_string(o.missing) + " ball cells failed"};
  const auto fb = pipeline::run_fit(ball);
  auto rf = context(env, "rf.ini");
  const auto fr = pipeline::run_fit(rf);
  const bool ball_ok = !fb.degenerate && fb.beta <= fb.alpha / 2 + 0.1;
  const bool rf_ok = !fr.degenerate && fr.beta > fr.alpha / 2 + 0.1;
  const bool timely = o.produced == 0 || secs < 7200;
  return {ball_ok && rf_ok && timely,
          "ball: alpha " + fmt(fb.alpha) + ", beta " + fmt(fb.beta) + " (" + fb.verdict + "); rf: alpha " +
              fmt(fr.alpha) + ", beta " + fmt(fr.beta) + " (" + fr.verdict + "); " +
              (o.produced == 0 ? std::string("sweep reused from cache") : "sweep " + fmt(secs, 3) + " s")};
}

// Top-10 share of |phi| at the largest width and the seed-averaged best lr.
struct HeadShare {
  double share = NAN, lr = NAN;
};

HeadShare head_share(const Context& ctx) {
  const auto profile = pipeline::read_profile_bin(ctx.root / "decompose" / "profile.bin");
  const auto surfaces = pipeline::train_surfaces(ctx);
  const int n = ctx.cfg.sweep.widths.back();
  const auto& curve = surfaces.at(n);
  size_t best = 0;
  for (size_t i = 1; i < curve.size(); ++i)
    if (curve[i].second < curve[best].second) best = i;
  if (!profile.present(n, best)) throw std::runtime_error("best cell missing from the profile");
  const double head = profile.phi_k(n, best, 10), tail = profile.residual(n, best, 10);
  return {std::abs(head) / (std::abs(head) + std::abs(tail)), ctx.cfg.sweep.lrs[best]};
}

// --- 10 ---
Verdict muon(const Env& env) {
  Rng rng = make_rng(10, "acceptance/newton-schulz");
  std::uniform_int_distribution<int> dim(4, 64);
  std::uniform_real_distribution<double> sv(0.3, 1.0);
  std::normal_distribution<double> z;
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int r = dim(rng), c = dim(rng), m = std::min(r, c);
    auto gauss = [&](int a, int b) {
      nn::Mat M(a, b);
      for (Eigen::Index i = 0; i < M.size(); ++i) M.data()[i] = z(rng);
      return M;
    };

    const nn::Mat U = Eigen::HouseholderQR<nn::Mat>(gauss(r, m)).householderQ() * nn::Mat::Identity(r, m);
    const nn::Mat V = Eigen::HouseholderQR<nn::Mat>(gauss(c, m)).householderQ() * nn::Mat::Identity(c, m);
    nn::Vec s(m);
    for (int i = 0; i < m; ++i) s(i) = sv(rng);
    s(0) = 1.0;
    const nn::Mat M = U * s.asDiagonal() * V.transpose();
    const nn::Mat ns = nn::newton_schulz(M, nn::OptimizerConfig{}.ns_iters, nn::NsCoeffs::classic(), 1e-7, false);
    worst = std::max(worst, (ns - nn::msgn(M)).cwiseAbs().maxCoeff());
  }

  auto adam = context(env, "desk.ini");
  run_sweep(adam, false);
  auto mu = context(env, "desk_muon.ini");
  const auto sweep = run_sweep(mu, false);
  const auto a = head_share(adam), m = head_share(mu);
  return {worst <= 0.05 && m.share < a.share,
          "Newton-Schulz max entry error " + fmt(worst) + "; top-10 share at width " +
              std::to_string(adam.cfg.sweep.widths.back()) + ": Muon " + fmt(m.share) + " (lr " + fmt(m.lr, 3) +
              ") vs Adam " + fmt(a.share) + " (lr " + fmt(a.lr, 3) + "); Muon " + runtime_note(sweep)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  Env env{HPT_CONFIG_DIR, HPT_ACCEPTANCE_DIR, static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))};
  std::string configs = env.configs.string(), out = env.out.string();
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 10));
  app.add_option("--configs", configs, "config directory");
  app.add_option("--out", out, "output root for sweeps");
  app.add_option("--workers", env.workers, "parallel cells")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  env.configs = configs;
  env.out = out;

  const std::vector<std::pair<std::string, std::function<Verdict(const Env&)>>> criteria = {
      {"rf solver fidelity", rf_solver},
      {"rf gap rates", rf_rates},
      {"rf Monte Carlo oracle", rf_monte_carlo},
      {"grid-search frontiers", frontiers},
      {"decomposition identities", identities},
      {"linearization faithfulness", linearization},
      {"truncation algorithms", truncation},
      {"t_n >= b_n", tn_bound},
      {"slow transfer on the ball task", slow_transfer},
      {"Muon orthogonalization and head share", muon},
  };
  int errors = 0, passed = 0, ran = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    ++ran;
    Verdict v;
    try {
      v = criteria[i].second(env);
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
      ++errors;
    }
    passed += v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << v.detail << std::endl;
  }
  std::cout << passed << "/" << ran << " criteria passed" << std::endl;
  // A failed criterion is a finding; only a criterion that could not be evaluated fails the run.
  return errors == 0 ? 0 : 1;
}
