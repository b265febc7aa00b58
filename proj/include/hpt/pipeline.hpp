#pragma once

#include <atomic>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "hpt/config.hpp"
#include "hpt/decomposition.hpp"
#include "hpt/gridsim.hpp"
#include "hpt/hpcore.hpp"
#include "hpt/rf.hpp"
#include "hpt/rf_montecarlo.hpp"
#include "hpt/synthetic_profiles.hpp"
#include "hpt/trajectory.hpp"
#include "hpt/truncation.hpp"

namespace hpt::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// Append-only JSON-lines log of every cell outcome. One writer at a time.
class Ledger {
 public:
  explicit Ledger(fs::path path) : path_(std::move(path)) {}

  void append(json entry) {
    std::lock_guard<std::mutex> lock(mu_);
    std::ofstream out(path_, std::ios::app);
    out << entry.dump() << '\n';
  }

 private:
  fs::path path_;
  std::mutex mu_;
};

struct Context {
  ExperimentConfig cfg;
  fs::path root;  // <out>/<config hash>
  bool force = false;
  int workers = 1;
  std::ostream* log = &std::cout;
  std::unique_ptr<Ledger> ledger;

  Context(ExperimentConfig c, const fs::path& out, bool force_, int workers_)
      : cfg(std::move(c)), root(out / cfg.hash), force(force_), workers(std::max(1, workers_)) {
    fs::create_directories(root);
    ledger = std::make_unique<Ledger>(root / "ledger.jsonl");
  }
  fs::path dir(const std::string& sub) const {
    fs::create_directories(root / sub);
    return root / sub;
  }
};

// Artifacts the command was asked for but could not produce.
struct Outcome {
  int produced = 0, skipped = 0, missing = 0;
  Outcome& operator+=(const Outcome& o) {
    produced += o.produced;
    skipped += o.skipped;
    missing += o.missing;
    return *this;
  }
};

// Runs fn(0..n-1) on a pool pulling indices from a shared counter. fn must not throw.
inline void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
  std::atomic<size_t> next{0};
  auto body = [&] {
    for (size_t i; (i = next.fetch_add(1)) < n;) fn(i);
  };
  std::vector<std::jthread> pool;
  const size_t extra = std::min<size_t>(n, static_cast<size_t>(workers)) - (n ? 1 : 0);
  for (size_t w = 0; w < extra; ++w) pool.emplace_back(body);
  body();
}

inline void write_json(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(1) << '\n';
  }
  fs::rename(tmp, path);
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

inline double num(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

// Non-finite values become null in JSON.
inline json jnum(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- train ---

struct Cell {
  int width;
  size_t lr_index;
  double lr;
  std::uint64_t seed;

  std::string name() const {
    return "w" + std::to_string(width) + "_lr" + std::to_string(lr_index) + "_s" + std::to_string(seed);
  }
};

inline std::vector<Cell> sweep_cells(const ExperimentConfig& c) {
  std::vector<Cell> cells;
  for (int n : c.sweep.widths)
    for (size_t i = 0; i < c.sweep.lrs.size(); ++i)
      for (auto s : c.sweep.seeds) cells.push_back({n, i, c.sweep.lrs[i], s});
  return cells;
}

inline std::uint64_t init_seed(const ExperimentConfig& c, std::uint64_t s) {
  return derive_seed(c.seed, "init/s" + std::to_string(s));
}

inline nn::Task make_task(const ExperimentConfig& c) { return nn::Task(c.task, derive_seed(c.seed, "task")); }

// One validation set per experiment, shared by every cell.
inline nn::Batch validation_batch(const ExperimentConfig& c, const nn::Task& task) {
  Rng rng = make_rng(c.seed, "val");
  return task.sample(c.task.val_size, rng);
}

inline fs::path cell_summary_path(const Context& ctx, const Cell& c) { return ctx.root / "train" / (c.name() + ".json"); }
inline fs::path cell_traj_path(const Context& ctx, const Cell& c) { return ctx.root / "train" / (c.name() + ".traj"); }

inline bool cell_complete(const Context& ctx, const Cell& c) {
  const auto p = cell_summary_path(ctx, c);
  if (!fs::exists(p)) return false;
  const auto j = read_json(p);
  if (j.value("status", "") == "failed") return false;
  return !ctx.cfg.sweep.save_trajectories || fs::exists(cell_traj_path(ctx, c));
}

// Trains one cell and returns its summary; the trajectory (if kept) is written alongside.
inline json run_cell(const Context& ctx, const Cell& cell, const nn::Task& task, const nn::Batch& val) {
  const auto& cfg = ctx.cfg;
  const auto spec = cfg.net_at(cell.width);
  auto opt = cfg.opt;
  opt.peak_lr = cell.lr;
  const auto seed = init_seed(cfg, cell.seed);
  json j{{"cell", cell.name()}, {"width", cell.width}, {"lr_index", cell.lr_index}, {"lr", cell.lr},
         {"seed", cell.seed}, {"config_hash", cfg.hash}};
  nn::TrainResult res;
  if (cfg.sweep.save_trajectories) {
    TrajectoryRecord rec;
    rec.manifest = manifest_for(spec);
    rec.manifest.seed = cell.seed;
    rec.manifest.hp = cell.lr;
    rec.manifest.config_hash = cfg.hash;
    Recorder r(cfg.schedule(), MetricEvaluator{spec, val, false},
               [&](Checkpoint&& c) { rec.checkpoints.push_back(std::move(c)); });
    res = nn::train(spec, opt, task, seed, std::ref(r));
    r.finish();
    rec.diverged = res.status != nn::RunStatus::done || r.flagged();
    write_trajectory(cell_traj_path(ctx, cell), rec);
    j["trajectory"] = cell.name() + ".traj";
    j["checkpoints"] = rec.checkpoints.size();
    j["loss_delta"] = jnum(loss_delta(rec));
    j["phi"] = jnum(linearized_total(rec).total);
    if (rec.diverged) res.status = nn::RunStatus::diverged;
  } else {
    res = nn::train(spec, opt, task, seed);
  }
  const double final_loss = nn::evaluate(res.final_params, spec, val).loss;
  if (nn::diverged(final_loss)) res.status = nn::RunStatus::diverged;
  j["status"] = nn::to_string(res.status);
  j["steps"] = res.steps;
  j["final_val_loss"] = jnum(final_loss);
  return j;
}

inline void write_surface_csv(const Context& ctx) {
  CsvWriter w(ctx.root / "train" / "surface.csv",
              {"width", "lr_index", "lr", "seed", "status", "final_val_loss", "loss_delta", "phi"}, ctx.cfg.hash);
  for (const auto& c : sweep_cells(ctx.cfg)) {
    const auto p = cell_summary_path(ctx, c);
    if (!fs::exists(p)) continue;
    const auto j = read_json(p);
    auto opt = [&](const char* k) { return j.contains(k) ? num(j[k]) : std::numeric_limits<double>::quiet_NaN(); };
    w.row(c.width, c.lr_index, c.lr, c.seed, j["status"].get<std::string>(), opt("final_val_loss"),
          opt("loss_delta"), opt("phi"));
  }
}

inline Outcome cmd_train(Context& ctx) {
  const auto& cfg = ctx.cfg;
  require_sweep(cfg);
  const auto cells = sweep_cells(cfg);
  const auto task = make_task(cfg);
  const auto val = validation_batch(cfg, task);
  ctx.dir("train");
  std::atomic<int> produced{0}, skipped{0}, missing{0};
  parallel_for(cells.size(), ctx.workers, [&](size_t i) {
    const auto& cell = cells[i];
    if (!ctx.force && cell_complete(ctx, cell)) {
      ++skipped;
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    json entry{{"command", "train"}, {"cell", cell.name()}};
    try {
      const auto j = run_cell(ctx, cell, task, val);
      write_json(cell_summary_path(ctx, cell), j);
      entry["status"] = j["status"];
      entry["artifacts"] = {cell.name() + ".json"};
      if (j.contains("trajectory")) entry["artifacts"].push_back(j["trajectory"]);
      ++produced;
    } catch (const std::exception& e) {
      entry["status"] = "failed";
      entry["error"] = e.what();
      ++missing;
    }
    entry["seconds"] = seconds_since(t0);
    ctx.ledger->append(entry);
  });
  write_surface_csv(ctx);
  return {produced.load(), skipped.load(), missing.load()};
}

// Mean final validation loss per (width, lr) over finished seeds; diverged cells count as +inf.
inline std::map<int, Curve> train_surfaces(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  std::map<int, Curve> out;
  for (int n : cfg.sweep.widths) {
    Curve curve;
    for (size_t i = 0; i < cfg.sweep.lrs.size(); ++i) {
      double sum = 0;
      int count = 0;
      bool blown = false;
      for (auto s : cfg.sweep.seeds) {
        const Cell c{n, i, cfg.sweep.lrs[i], s};
        const auto p = cell_summary_path(ctx, c);
        if (!fs::exists(p)) continue;
        const auto j = read_json(p);
        const double v = num(j["final_val_loss"]);
        if (j["status"] != "done" || !std::isfinite(v)) {
          blown = true;
          continue;
        }
        sum += v;
        ++count;
      }
      const double v = count ? sum / count : (blown ? std::numeric_limits<double>::infinity()
                                                    : std::numeric_limits<double>::quiet_NaN());
      if (std::isnan(v)) {
        curve.clear();
        break;
      }
      curve.emplace_back(std::log2(cfg.sweep.lrs[i]), v);
    }
    if (!curve.empty()) out[n] = curve;
  }
  return out;
}

// --- decompose ---

inline constexpr char kProfileMagic[8] = {'H', 'P', 'T', 'P', 'R', 'O', 'F', '1'};

// Binary cache of the full profile: magic, u32 width count, u32 hp count,
// f64 hps, then per width an i32 width and per hp a u8 presence flag, the
// f64 total and the width f64 top-k values.
inline void write_profile_bin(const fs::path& path, const TopKProfile& p) {
  std::ofstream out(path, std::ios::binary);
  auto put = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  out.write(kProfileMagic, 8);
  put(static_cast<std::uint32_t>(p.widths.size()));
  put(static_cast<std::uint32_t>(p.hps.size()));
  for (double h : p.hps) put(h);
  for (int n : p.widths) {
    put(static_cast<std::int32_t>(n));
    for (size_t i = 0; i < p.hps.size(); ++i) {
      const std::uint8_t present = p.present(n, i) ? 1 : 0;
      put(present);
      if (!present) continue;
      put(p.totals.at(n)[i]);
      for (double v : p.values.at(n)[i]) put(v);
    }
  }
}

inline TopKProfile read_profile_bin(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing profile cache " + path.string());
  auto get = [&](auto& v) { in.read(reinterpret_cast<char*>(&v), sizeof v); };
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kProfileMagic, 8) != 0) throw std::runtime_error("bad profile cache");
  std::uint32_t W, H;
  get(W);
  get(H);
  TopKProfile p;
  p.hps.resize(H);
  for (auto& h : p.hps) get(h);
  for (std::uint32_t w = 0; w < W; ++w) {
    std::int32_t n;
    get(n);
    p.widths.push_back(n);
    auto& vals = p.values[n];
    auto& tots = p.totals[n];
    for (std::uint32_t i = 0; i < H; ++i) {
      std::uint8_t present;
      get(present);
      if (!present) {
        vals.emplace_back();
        tots.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      double t;
      get(t);
      tots.push_back(t);
      std::vector<double> v(n);
      for (auto& x : v) get(x);
      vals.push_back(std::move(v));
    }
  }
  if (!in) throw std::runtime_error("truncated profile cache");
  return p;
}

struct CellDecomposition {
  TopKCurve curve;
  double loss_delta = 0;
  size_t checkpoints = 0;
};

inline Outcome cmd_decompose(Context& ctx) {
  const auto& cfg = ctx.cfg;
  require_sweep(cfg);
  const auto dir = ctx.dir("decompose");
  const auto profile_csv = dir / "profile.csv";
  if (!ctx.force && fs::exists(profile_csv) && fs::exists(dir / "profile.bin")) return {0, 1, 0};
  const auto cells = sweep_cells(cfg);
  std::vector<std::optional<CellDecomposition>> out(cells.size());
  parallel_for(cells.size(), ctx.workers, [&](size_t i) {
    const auto& cell = cells[i];
    json entry{{"command", "decompose"}, {"cell", cell.name()}};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto p = cell_summary_path(ctx, cell);
      if (!fs::exists(cell_traj_path(ctx, cell)) || !fs::exists(p)) {
        entry["status"] = "absent";
      } else if (read_json(p)["status"] != "done") {
        entry["status"] = "diverged";
      } else {
        const auto rec = read_trajectory(cell_traj_path(ctx, cell));
        out[i] = CellDecomposition{topk_curve(rec, cfg.track_k), loss_delta(rec), rec.checkpoints.size()};
        entry["status"] = "done";
      }
    } catch (const std::exception& e) {
      entry["status"] = "failed";
      entry["error"] = e.what();
    }
    entry["seconds"] = seconds_since(t0);
    ctx.ledger->append(entry);
  });

  // Seed-averaged profile: a (width, lr) cell is present when any seed finished.
  std::map<int, std::vector<std::optional<TopKCurve>>> curves;
  size_t idx = 0;
  for (int n : cfg.sweep.widths) {
    auto& row = curves[n];
    for (size_t l = 0; l < cfg.sweep.lrs.size(); ++l) {
      std::optional<TopKCurve> mean;
      int count = 0;
      for (size_t s = 0; s < cfg.sweep.seeds.size(); ++s, ++idx) {
        if (!out[idx]) continue;
        const auto& c = out[idx]->curve;
        if (!mean) {
          mean = TopKCurve{};
          mean->phi_k.assign(c.phi_k.size(), 0.0);
        }
        for (size_t k = 0; k < c.phi_k.size(); ++k) mean->phi_k[k] += c.phi_k[k];
        mean->phi += c.phi;
        ++count;
      }
      if (mean) {
        for (double& v : mean->phi_k) v /= count;
        mean->phi /= count;
      }
      row.push_back(std::move(mean));
    }
  }
  const auto profile = build_profile(curves, cfg.sweep.lrs);
  write_profile_csv(profile_csv, profile, cfg.hash, cfg.k_values);
  write_profile_bin(dir / "profile.bin", profile);

  CsvWriter over_time(dir / "topk_time.csv", {"width", "lr", "seed", "k", "step", "phi", "phi_k"}, cfg.hash);
  CsvWriter ident(dir / "identities.csv",
                  {"width", "lr", "seed", "checkpoints", "max_trace_rel_err", "topn_rel_err", "phi", "loss_delta",
                   "linearization_rel_err", "flagged_checkpoints"},
                  cfg.hash);
  for (size_t i = 0; i < cells.size(); ++i) {
    if (!out[i]) continue;
    const auto& c = out[i]->curve;
    const auto& cell = cells[i];
    const int k = std::min(cfg.track_k, cell.width);
    for (size_t t = 0; t < c.steps.size(); ++t)
      over_time.row(cell.width, cell.lr, cell.seed, k, c.steps[t], c.phi_time[t], c.phi_k_time[t]);
    const double scale = std::max(std::abs(c.phi), 1e-300);
    const double dl = out[i]->loss_delta;
    ident.row(cell.width, cell.lr, cell.seed, out[i]->checkpoints, c.max_trace_rel_err,
              std::abs(c.phi_k.back() - c.phi) / scale, c.phi, dl, std::abs(c.phi - dl) / std::abs(dl),
              c.flagged_checkpoints);
  }
  return {1, 0, 0};
}

// --- truncate ---

// One LossCurveGrid per width with every hp cell present; theta = log2(lr).
inline std::map<int, trunc::LossCurveGrid> truncation_grids(const TopKProfile& p) {
  std::map<int, trunc::LossCurveGrid> out;
  std::vector<double> theta;
  for (double h : p.hps) theta.push_back(std::log2(h));
  for (int n : p.widths) {
    bool complete = true;
    for (size_t i = 0; i < p.hps.size(); ++i) complete = complete && p.present(n, i);
    if (!complete) continue;
    trunc::LossCurveGrid g{theta, trunc::Mat(p.hps.size(), n)};
    for (size_t i = 0; i < p.hps.size(); ++i)
      for (int k = 1; k <= n; ++k) g.phi(i, k - 1) = p.phi_k(n, i, k);
    out[n] = std::move(g);
  }
  return out;
}

inline std::string kappa_str(const trunc::TruncationVector& k) {
  std::vector<std::string> parts;
  for (int v : k) parts.push_back(std::to_string(v));
  return join(parts, ' ');
}

inline Outcome cmd_truncate(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto dir = ctx.dir("truncate");
  if (!ctx.force && fs::exists(dir / "khat.csv") && fs::exists(dir / "khat.json")) return {0, 1, 0};
  const auto grids = truncation_grids(read_profile_bin(ctx.root / "decompose" / "profile.bin"));
  if (grids.size() < 2) {
    ctx.ledger->append({{"command", "truncate"}, {"status", "failed"}, {"error", "fewer than two complete widths"}});
    return {0, 0, 1};
  }
  const auto res = trunc::compute_khat(grids, cfg.tol);
  CsvWriter w(dir / "khat.csv", {"width", "fail", "tau1", "tau2", "e_cvx", "delta", "kappa"}, cfg.hash);
  json j{{"config_hash", cfg.hash}, {"reference_width", grids.rbegin()->first}, {"widths", json::array()}};
  for (const auto& [n, r] : res) {
    if (r.accepted)
      w.row(n, 0, r.accepted->tau1, r.accepted->tau2, r.accepted->e_cvx, r.accepted->delta, kappa_str(r.kappa));
    else
      w.row(n, 1, "", "", "", "", "");
    json trials = json::array();
    for (const auto& t : r.trials)
      trials.push_back({{"tau1", t.tau1}, {"tau2", t.tau2}, {"kappa", t.kappa}, {"objective", jnum(t.objective)},
                        {"e_cvx", jnum(t.e_cvx)}, {"delta", t.delta}, {"cap_hit", t.cap_hit},
                        {"accepted", t.accepted}});
    j["widths"].push_back({{"width", n}, {"fail", r.fail}, {"kappa", r.kappa}, {"trials", trials}});
  }
  write_json(dir / "khat.json", j);
  ctx.ledger->append({{"command", "truncate"}, {"status", "done"}, {"artifacts", {"khat.csv", "khat.json"}}});
  return {1, 0, 0};
}

// --- mci ---

inline Outcome cmd_mci(Context& ctx) {
  const auto& cfg = ctx.cfg;
  require_sweep(cfg);
  const auto dir = ctx.dir("mci");
  if (!ctx.force && fs::exists(dir / "identity.csv")) return {0, 1, 0};
  const auto task = make_task(cfg);
  const auto val = validation_batch(cfg, task);
  const int P = std::min<int>(cfg.mci_samples, static_cast<int>(val.size()));
  const nn::Batch batch{val.X.leftCols(P), val.Y.leftCols(P)};
  const auto surfaces = train_surfaces(ctx);

  struct Job {
    int width;
    size_t lr_index;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (int n : cfg.sweep.widths) {
    size_t li = 0;
    if (cfg.mci_lr > 0) {
      for (size_t i = 1; i < cfg.sweep.lrs.size(); ++i)
        if (std::abs(std::log(cfg.sweep.lrs[i] / cfg.mci_lr)) < std::abs(std::log(cfg.sweep.lrs[li] / cfg.mci_lr)))
          li = i;
    } else {
      auto it = surfaces.find(n);
      if (it == surfaces.end()) continue;
      for (size_t i = 1; i < it->second.size(); ++i)
        if (it->second[i].second < it->second[li].second) li = i;
    }
    for (auto s : cfg.sweep.seeds) jobs.push_back({n, li, s});
  }

  struct Result {
    std::vector<double> mci;
    double psi_total = 0, matrix_topk = 0;
    int k_max = 0;
  };
  std::vector<std::optional<Result>> results(jobs.size());
  std::atomic<int> missing{0};
  parallel_for(jobs.size(), ctx.workers, [&](size_t i) {
    const auto& job = jobs[i];
    const Cell cell{job.width, job.lr_index, cfg.sweep.lrs[job.lr_index], job.seed};
    json entry{{"command", "mci"}, {"cell", cell.name()}};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      auto rec = read_trajectory(cell_traj_path(ctx, cell));
      const auto spec = cfg.net_at(job.width);
      const int k_max = cfg.mci_k_max > 0 ? std::min(cfg.mci_k_max, job.width) : std::min(job.width, 256);
      SampleComponentAccumulator acc(rec.manifest, P, k_max);
      TopKAccumulator topk(rec.manifest);
      // Gradients and per-sample factors are recomputed on the MCI samples
      // from the stored EMA weights, so the split sums back to the same
      // linearized loss the spectra come from.
      for (auto& c : rec.checkpoints) {
        auto g = nn::grad(c.ema, spec, batch, true);
        c.grad = std::move(g.grads);
        c.factors = std::move(g.factors);
        acc(c);
        topk(c);
        c.factors.clear();
      }
      Result r;
      r.k_max = k_max;
      r.mci = mci_column(acc.table());
      r.psi_total = acc.table().psi.sum() / P;
      r.matrix_topk = topk.curve().phi_k[k_max - 1] - topk.curve().vector_part;
      write_mci_csv(dir / ("mci_" + cell.name() + ".csv"), acc.table(), cfg.hash);
      results[i] = std::move(r);
      entry["status"] = "done";
    } catch (const std::exception& e) {
      entry["status"] = "failed";
      entry["error"] = e.what();
      ++missing;
    }
    entry["seconds"] = seconds_since(t0);
    ctx.ledger->append(entry);
  });

  CsvWriter id(dir / "identity.csv", {"width", "lr", "seed", "k_max", "mean_psi_sum", "matrix_topk", "rel_err"},
               cfg.hash);
  std::map<std::pair<int, int>, std::vector<double>> tables;
  for (size_t i = 0; i < jobs.size(); ++i) {
    if (!results[i]) continue;
    const auto& r = *results[i];
    const double rel = std::abs(r.psi_total - r.matrix_topk) / std::max(std::abs(r.matrix_topk), 1e-300);
    id.row(jobs[i].width, cfg.sweep.lrs[jobs[i].lr_index], jobs[i].seed, r.k_max, r.psi_total, r.matrix_topk, rel);
    tables[{jobs[i].width, static_cast<int>(jobs[i].seed)}] = r.mci;
  }
  if (cfg.sweep.seeds.size() >= 2 && !tables.empty()) {
    CsvWriter ov(dir / "overlap.csv", {"side", "width_a", "width_b", "overlap"}, cfg.hash);
    for (auto side : {QuantileSide::top, QuantileSide::bottom}) {
      const auto m = overlap_consistency(tables, cfg.mci_q, side);
      for (size_t a = 0; a < m.widths.size(); ++a)
        for (size_t b = 0; b < m.widths.size(); ++b)
          ov.row(side == QuantileSide::top ? "top" : "bottom", m.widths[a], m.widths[b], m.overlap(a, b));
    }
  }
  return {static_cast<int>(jobs.size()) - missing.load(), 0, missing.load()};
}

// --- rf ---

inline std::vector<double> log_grid(double lo, double hi, int n) {
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i) out[i] = n == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
  return out;
}

inline rf::RfSetting rf_at(const ExperimentConfig& c, double psi2) {
  auto s = c.rf.setting;
  s.psi2 = psi2;
  return s;
}

inline rf::ActivationMoments rf_moments(const ExperimentConfig& c) {
  return rf::hermite_moments(c.rf.student, c.rf.teacher);
}

inline json rates_json(const ExperimentConfig& c, const rf::RfRates& r) {
  const double alpha = -r.loss_gap.exponent, beta = -r.hp_gap.exponent;
  return {{"config_hash", c.hash},
          {"loss_gap_exponent", r.loss_gap.exponent},
          {"hp_gap_exponent", r.hp_gap.exponent},
          {"subopt_gap_exponent", r.subopt_gap.exponent},
          {"r_squared", {r.loss_gap.r_squared, r.hp_gap.r_squared, r.subopt_gap.r_squared}},
          {"alpha", alpha},
          {"beta", beta},
          {"verdict", alpha > 0 ? to_string(classify_transfer(alpha, std::max(beta, 0.0))) : "degenerate"}};
}

inline Outcome cmd_rf(Context& ctx, const std::string& sub) {
  const auto& cfg = ctx.cfg;
  const auto dir = ctx.dir("rf");
  const auto mom = rf_moments(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> artifacts;
  if (sub == "curve") {
    artifacts = {"curve.csv"};
    if (!ctx.force && fs::exists(dir / "curve.csv")) return {0, 1, 0};
    const auto lambdas = log_grid(cfg.rf.lambda_min, cfg.rf.lambda_max, cfg.rf.lambda_points);
    CsvWriter w(dir / "curve.csv", {"psi2", "lambda", "risk", "m1", "m2", "residual1", "residual2", "converged"},
                cfg.hash);
    for (double p2 : cfg.rf.psi2)
      for (double l : lambdas) {
        const auto r = rf::risk_detail(l, rf_at(cfg, p2), mom);
        w.row(p2, l, r.risk, r.sol.m1, r.sol.m2, r.sol.residual1, r.sol.residual2, r.sol.converged ? 1 : 0);
      }
  } else if (sub == "rates") {
    artifacts = {"rates.csv", "rates.json"};
    if (!ctx.force && fs::exists(dir / "rates.json")) return {0, 1, 0};
    const auto r = rf::rf_rates(cfg.rf.setting, mom, cfg.rf.rate_psi2);
    CsvWriter w(dir / "rates.csv", {"psi2", "lambda_opt", "risk_opt", "loss_gap", "hp_gap", "subopt_gap"}, cfg.hash);
    for (const auto& row : r.rows) w.row(row.psi2, row.lambda_opt, row.risk_opt, row.loss_gap, row.hp_gap, row.subopt_gap);
    write_json(dir / "rates.json", rates_json(cfg, r));
  } else if (sub == "mc") {
    artifacts = {"mc.csv", "mc.json"};
    if (!ctx.force && fs::exists(dir / "mc.json")) return {0, 1, 0};
    rf::McSpec spec;
    spec.d = cfg.rf.mc.d;
    spec.trials = cfg.rf.mc.trials;
    spec.student = cfg.rf.student;
    spec.teacher = cfg.rf.teacher;
    const double scale = rf::calibrate_lambda_scale(spec, rf_at(cfg, cfg.rf.mc.anchor_psi2), mom,
                                                    cfg.rf.mc.anchor_lambda, derive_seed(cfg.seed, "rf-calibration"));
    CsvWriter w(dir / "mc.csv",
                {"psi2", "lambda", "analytic", "empirical", "stderr", "z", "rel_err", "failed_trials"}, cfg.hash);
    for (double p2 : cfg.rf.mc.psi2) {
      const auto s = rf_at(cfg, p2);
      auto lambdas = cfg.rf.mc.lambdas;
      if (lambdas.empty()) lambdas = {rf::optimal_lambda(s, mom).lambda};
      const auto res = rf::monte_carlo_rf(spec, s, mom, lambdas, derive_seed(cfg.seed, "rf-mc"), scale,
                                          "rf-mc/psi2=" + fmt17(p2));
      for (size_t i = 0; i < lambdas.size(); ++i) {
        const double a = rf::risk(lambdas[i], s, mom);
        w.row(p2, lambdas[i], a, res.mean[i], res.stderr_[i], (res.mean[i] - a) / res.stderr_[i],
              std::abs(res.mean[i] - a) / a, res.failed_trials);
      }
    }
    write_json(dir / "mc.json", {{"config_hash", cfg.hash}, {"lambda_scale", scale}, {"d", spec.d},
                                 {"trials", spec.trials}});
  } else if (sub == "closed-forms") {
    artifacts = {"closed_forms.json"};
    if (!ctx.force && fs::exists(dir / "closed_forms.json")) return {0, 1, 0};
    const auto cf = rf::closed_forms_inf(cfg.rf.setting, mom);
    const auto nc = rf::numeric_coefficients(cfg.rf.setting, mom);
    write_json(dir / "closed_forms.json",
               {{"config_hash", cfg.hash},
                {"t_star", cf.t_star},
                {"lambda_star_inf", cf.lambda_star_inf},
                {"risk_inf_at_opt", cf.risk_inf_at_opt},
                {"curvature", cf.curvature},
                {"C_eta", cf.C_eta},
                {"C_lambda", cf.C_lambda},
                {"numeric_dR_deta", nc.dR_deta},
                {"numeric_dlambda_deta", nc.dlambda_deta},
                {"moments", {{"mu1", mom.mu1}, {"mu2_sq", mom.mu2_sq}, {"mu1_star", mom.mu1_star},
                             {"mu2_star_sq", mom.mu2_star_sq}}}});
  } else {
    throw ConfigError("unknown rf subcommand " + sub);
  }
  ctx.ledger->append({{"command", "rf " + sub}, {"status", "done"}, {"artifacts", artifacts},
                      {"seconds", seconds_since(t0)}});
  return {1, 0, 0};
}

// --- gridsim ---

inline std::vector<gridsim::SimResult> gridsim_sweep(const ExperimentConfig& c, bool transfer) {
  gridsim::SimOptions o;
  o.placements = c.gridsim.placements;
  o.seed = derive_seed(c.seed, "gridsim");
  std::vector<gridsim::SimResult> out;
  for (double F : gridsim::budget_ladder(c.gridsim.F_min, c.gridsim.F_max, c.gridsim.per_decade)) {
    const gridsim::Budget b{F, c.gridsim.r};
    out.push_back(transfer ? gridsim::run_transfer(c.gridsim.family, b, o) : gridsim::run_direct(c.gridsim.family, b, o));
  }
  return out;
}

inline Outcome cmd_gridsim(Context& ctx, const std::string& sub) {
  const auto& cfg = ctx.cfg;
  const auto dir = ctx.dir("gridsim");
  const auto t0 = std::chrono::steady_clock::now();
  const auto& f = cfg.gridsim.family;
  if (sub == "run") {
    if (!ctx.force && fs::exists(dir / "run.csv")) return {0, 1, 0};
    CsvWriter w(dir / "run.csv",
                {"strategy", "F", "suboptimality", "n_star", "M_star", "spacing", "resolution", "max_cost"}, cfg.hash);
    for (bool transfer : {false, true})
      for (const auto& r : gridsim_sweep(cfg, transfer))
        w.row(r.strategy, r.F, r.suboptimality, r.n_star, r.M_star, r.spacing, r.resolution, r.max_cost);
    ctx.ledger->append({{"command", "gridsim run"}, {"status", "done"}, {"seconds", seconds_since(t0)}});
  } else if (sub == "frontier") {
    if (!ctx.force && fs::exists(dir / "frontier.json")) return {0, 1, 0};
    const auto d = gridsim::fit_frontier(gridsim_sweep(cfg, false));
    const auto t = gridsim::fit_frontier(gridsim_sweep(cfg, true));
    const double dr = gridsim::direct_rate(f.alpha, f.h, cfg.gridsim.r);
    const double tr = gridsim::transfer_rate(f.alpha, f.beta, f.h, cfg.gridsim.r);
    write_json(dir / "frontier.json",
               {{"config_hash", cfg.hash},
                {"direct_exponent", -d.exponent},
                {"transfer_exponent", -t.exponent},
                {"direct_theory", dr},
                {"transfer_theory", tr},
                {"r_squared", {d.r_squared, t.r_squared}},
                {"fitted_transfer_wins", -t.exponent > -d.exponent},
                {"verdict", to_string(classify_transfer(f.alpha, f.beta))}});
    ctx.ledger->append({{"command", "gridsim frontier"}, {"status", "done"}, {"seconds", seconds_since(t0)}});
  } else {
    throw ConfigError("unknown gridsim subcommand " + sub);
  }
  return {1, 0, 0};
}

// --- fit and report ---

// Stand-in for infinite width in the synthetic family: its drift is below any grid resolution.
inline constexpr int kGridsimReferenceWidth = 1 << 30;

inline std::map<int, Curve> gridsim_surfaces(const ExperimentConfig& c, bool with_reference) {
  const auto& f = c.gridsim.family;
  if (f.h != 1) throw ConfigError("gridsim surfaces need h = 1");
  const auto theta = trunc::uniform_axis(0, 1, c.gridsim.grid_points);
  std::map<int, Curve> out;
  auto widths = c.gridsim.widths;
  if (with_reference) widths.push_back(kGridsimReferenceWidth);
  for (int n : widths) {
    Curve curve;
    for (double t : theta) curve.emplace_back(t, gridsim::synthetic_phi(f, n, {t}));
    out[n] = curve;
  }
  return out;
}

struct FitReport {
  std::string source;
  int proxy_width = 0;
  std::vector<int> widths;
  std::vector<double> a, b, c;
  std::optional<PowerLawFit> fa, fb, fc;
  bool degenerate = false;
  std::string verdict = "degenerate";
  double alpha = std::numeric_limits<double>::quiet_NaN(), beta = std::numeric_limits<double>::quiet_NaN();
};

// Least squares in log-log space; with exactly two points, the line through them.
inline PowerLawFit fit_points(const std::vector<std::pair<double, double>>& pts) {
  if (pts.size() != 2) return fit_power_law(pts);
  PowerLawFit f;
  const auto [x0, y0] = pts[0];
  const auto [x1, y1] = pts[1];
  f.exponent = std::log(y1 / y0) / std::log(x1 / x0);
  f.log_prefactor = std::log(y0) - f.exponent * std::log(x0);
  f.r_squared = 1;
  f.n_points = 2;
  return f;
}

// Power-law exponents of the gaps, dropping the proxy and exact zeros.
inline FitReport fit_gaps(const std::map<int, Curve>& surfaces, int proxy, bool refine) {
  if (surfaces.size() < 3) throw ConfigError("fitting needs >= 3 widths, got " + std::to_string(surfaces.size()));
  const auto g = estimate_gaps(surfaces, proxy, GapOptions{refine});
  FitReport r;
  r.proxy_width = proxy;
  std::vector<std::pair<double, double>> pa, pb, pc;
  for (size_t i = 0; i < g.widths.size(); ++i) {
    if (g.widths[i] == proxy) continue;
    r.widths.push_back(g.widths[i]);
    r.a.push_back(g.a[i]);
    r.b.push_back(g.b[i]);
    r.c.push_back(g.c[i]);
    if (g.a[i] > 0) pa.emplace_back(g.widths[i], g.a[i]);
    if (g.b[i] > 0) pb.emplace_back(g.widths[i], g.b[i]);
    if (g.c[i] > 0) pc.emplace_back(g.widths[i], g.c[i]);
  }
  if (pa.size() >= 2) r.fa = fit_points(pa);
  if (pb.size() >= 2) r.fb = fit_points(pb);
  if (pc.size() >= 2) r.fc = fit_points(pc);
  if (r.fa) r.alpha = -r.fa->exponent;
  // All hp gaps zero: the optimum never moves, the fastest possible transfer.
  if (pb.empty()) r.beta = std::numeric_limits<double>::infinity();
  else if (r.fb) r.beta = -r.fb->exponent;
  r.degenerate = !(r.alpha > 0) || std::isnan(r.beta);
  if (!r.degenerate) r.verdict = to_string(classify_transfer(r.alpha, std::max(r.beta, 0.0)));
  return r;
}

inline FitReport run_fit(const Context& ctx) {
  const auto& cfg = ctx.cfg;
  FitReport r;
  if (cfg.fit_source == "train") {
    const auto s = train_surfaces(ctx);
    if (s.size() < 3) throw ConfigError("fitting needs >= 3 widths with complete surfaces, got " + std::to_string(s.size()));
    r = fit_gaps(s, s.rbegin()->first, true);
  } else if (cfg.fit_source == "gridsim") {
    if (cfg.gridsim.widths.size() < 3) throw ConfigError("fitting needs >= 3 widths");
    r = fit_gaps(gridsim_surfaces(cfg, true), kGridsimReferenceWidth, true);
  } else {
    if (cfg.rf.rate_psi2.size() < 3) throw ConfigError("fitting needs >= 3 widths");
    const auto rates = rf::rf_rates(cfg.rf.setting, rf_moments(cfg), cfg.rf.rate_psi2);
    for (const auto& row : rates.rows) {
      r.widths.push_back(static_cast<int>(std::lround(row.psi2)));
      r.a.push_back(row.loss_gap);
      r.b.push_back(row.hp_gap);
      r.c.push_back(row.subopt_gap);
    }
    r.fa = rates.loss_gap;
    r.fb = rates.hp_gap;
    r.fc = rates.subopt_gap;
    r.alpha = -rates.loss_gap.exponent;
    r.beta = -rates.hp_gap.exponent;
    r.degenerate = !(r.alpha > 0);
    if (!r.degenerate) r.verdict = to_string(classify_transfer(r.alpha, std::max(r.beta, 0.0)));
  }
  r.source = cfg.fit_source;
  return r;
}

inline json fit_json(const ExperimentConfig& cfg, const FitReport& r) {
  auto fit = [](const std::optional<PowerLawFit>& f) -> json {
    if (!f) return nullptr;
    return {{"exponent", f->exponent}, {"log_prefactor", f->log_prefactor}, {"r_squared", jnum(f->r_squared)},
            {"points", f->n_points}};
  };
  json rows = json::array();
  for (size_t i = 0; i < r.widths.size(); ++i)
    rows.push_back({{"width", r.widths[i]}, {"a", r.a[i]}, {"b", r.b[i]}, {"c", r.c[i]}});
  return {{"config_hash", cfg.hash},
          {"source", r.source},
          {"proxy_width", r.source == "train" ? json(r.proxy_width) : json("infinity")},
          {"gaps", rows},
          {"loss_gap_fit", fit(r.fa)},
          {"hp_gap_fit", fit(r.fb)},
          {"subopt_gap_fit", fit(r.fc)},
          {"alpha", jnum(r.alpha)},
          {"beta", std::isinf(r.beta) ? json("inf") : jnum(r.beta)},
          {"degenerate", r.degenerate},
          {"verdict", r.verdict}};
}

inline Outcome cmd_fit(Context& ctx) {
  const auto dir = ctx.dir("fit");
  if (!ctx.force && fs::exists(dir / "fit.json")) return {0, 1, 0};
  write_json(dir / "fit.json", fit_json(ctx.cfg, run_fit(ctx)));
  ctx.ledger->append({{"command", "fit"}, {"status", "done"}, {"artifacts", {"fit.json"}}});
  return {1, 0, 0};
}

// Components and head size of the per-k gridsim embedding used by the report.
inline constexpr int kEmbedComponents = 16, kEmbedHead = 4, kEmbedGrid = 41;

struct TnRow {
  int width;
  double t_n, b_n;
};

inline std::vector<TnRow> tn_vs_bn(const Context& ctx, const FitReport& fit) {
  const auto& cfg = ctx.cfg;
  std::vector<TnRow> rows;
  if (cfg.fit_source == "gridsim") {
    const auto& f = cfg.gridsim.family;
    const auto theta = trunc::uniform_axis(0, 1, kEmbedGrid);
    const auto ref = trunc::gridsim_profile(f, theta, kEmbedComponents, kEmbedHead, INFINITY);
    const auto cands = trunc::constant_candidates(kEmbedGrid, kEmbedComponents);
    for (size_t i = 0; i < fit.widths.size(); ++i) {
      const auto P = trunc::gridsim_profile(f, theta, kEmbedComponents, kEmbedHead, fit.widths[i]);
      rows.push_back({fit.widths[i], trunc::t_n(P, ref, cands).t_n, fit.b[i]});
    }
  } else if (cfg.fit_source == "train") {
    const auto bin = ctx.root / "decompose" / "profile.bin";
    if (!fs::exists(bin)) return rows;
    const auto grids = truncation_grids(read_profile_bin(bin));
    if (grids.size() < 2 || grids.rbegin()->first != fit.proxy_width) return rows;
    const auto& ref = grids.rbegin()->second;
    for (size_t i = 0; i < fit.widths.size(); ++i) {
      auto it = grids.find(fit.widths[i]);
      if (it == grids.end() || it->second.g() < 3) continue;
      const auto cands = trunc::constant_candidates(it->second.g(), fit.widths[i]);
      rows.push_back({fit.widths[i], trunc::t_n(it->second, ref, cands).t_n, fit.b[i]});
    }
  }
  return rows;
}

inline Outcome cmd_report(Context& ctx) {
  const auto dir = ctx.dir("report");
  if (!ctx.force && fs::exists(dir / "report.json")) return {0, 1, 0};
  const auto fit = run_fit(ctx);
  json j = fit_json(ctx.cfg, fit);
  j["tn_vs_bn"] = json::array();
  for (const auto& r : tn_vs_bn(ctx, fit))
    j["tn_vs_bn"].push_back({{"width", r.width}, {"t_n", jnum(r.t_n)}, {"b_n", r.b_n}, {"holds", r.t_n >= r.b_n}});
  write_json(dir / "report.json", j);
  ctx.ledger->append({{"command", "report"}, {"status", "done"}, {"artifacts", {"report.json"}}});
  return {1, 0, 0};
}

}  // namespace hpt::pipeline
