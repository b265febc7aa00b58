#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cstdint>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hpt/core/rng.hpp"
#include "hpt/gridsim.hpp"
#include "hpt/nn/network.hpp"
#include "hpt/nn/optim.hpp"
#include "hpt/nn/tasks.hpp"
#include "hpt/rf.hpp"
#include "hpt/rf_montecarlo.hpp"
#include "hpt/trajectory.hpp"
#include "hpt/truncation.hpp"

namespace hpt {

// Any problem with the configuration itself; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat "[section] key = value" text. Every key a section may hold is
// declared up front, so misspellings fail loudly instead of falling back to
// defaults.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text) {
    ConfigFile c;
    std::istringstream in(text);
    try {
      boost::property_tree::ini_parser::read_ini(in, c.tree_);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(std::string("config syntax: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    for (const auto& [section, body] : c.tree_) {
      if (body.empty() && !body.data().empty())
        throw ConfigError("key '" + section + "' must sit inside a [section]");
      for (const auto& [key, value] : body) c.entries_[section][key] = trim(value.data());
    }
    return c;
  }

  static ConfigFile load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    entries_[section][key] = value;
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = entries_.find(section);
    return s != entries_.end() && s->second.count(key);
  }

  bool has_section(const std::string& section) const { return entries_.count(section) > 0; }

  // Sections and keys sorted, values trimmed: the hashed form.
  std::string canonical() const {
    std::string out;
    for (const auto& [s, kv] : entries_) {
      out += "[" + s + "]\n";
      for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    }
    return out;
  }

  std::string hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical())));
    return buf;
  }

  void check_known(const std::map<std::string, std::set<std::string>>& schema) const {
    for (const auto& [s, kv] : entries_) {
      auto it = schema.find(s);
      if (it == schema.end()) throw ConfigError("unknown section [" + s + "]");
      for (const auto& [k, v] : kv)
        if (!it->second.count(k)) throw ConfigError("unknown key '" + k + "' in [" + s + "]");
    }
  }

  std::string str(const std::string& s, const std::string& k, const std::string& def) const {
    return has(s, k) ? entries_.at(s).at(k) : def;
  }

  double num(const std::string& s, const std::string& k, double def) const {
    return has(s, k) ? to_double(s, k, entries_.at(s).at(k)) : def;
  }

  long integer(const std::string& s, const std::string& k, long def) const {
    if (!has(s, k)) return def;
    const double v = num(s, k, 0);
    if (v != std::floor(v)) throw ConfigError(s + "." + k + " must be an integer");
    return static_cast<long>(v);
  }

  bool flag(const std::string& s, const std::string& k, bool def) const {
    if (!has(s, k)) return def;
    const auto& v = entries_.at(s).at(k);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(s + "." + k + " must be true or false");
  }

  // Comma- or whitespace-separated list.
  std::vector<double> list(const std::string& s, const std::string& k, std::vector<double> def) const {
    if (!has(s, k)) return def;
    std::vector<double> out;
    std::string item;
    std::istringstream in(entries_.at(s).at(k));
    while (in >> item) {
      std::istringstream parts(item);
      std::string p;
      while (std::getline(parts, p, ','))
        if (!p.empty()) out.push_back(to_double(s, k, p));
    }
    return out;
  }

 private:
  static std::string trim(const std::string& v) {
    const auto a = v.find_first_not_of(" \t\r\n"), b = v.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : v.substr(a, b - a + 1);
  }
  static double to_double(const std::string& s, const std::string& k, const std::string& v) {
    try {
      size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError(s + "." + k + ": '" + v + "' is not a number");
    }
  }

  boost::property_tree::ptree tree_;
  std::map<std::string, std::map<std::string, std::string>> entries_;
};

struct SweepConfig {
  std::vector<int> widths;
  std::vector<double> lrs;  // base learning rates; the abc table carries the width scaling
  std::vector<std::uint64_t> seeds;
  bool save_trajectories = true;
};

struct McConfig {
  int d = 300, trials = 20;
  std::vector<double> psi2{2, 8};
  std::vector<double> lambdas;  // empty: the analytic optimum at each psi2
  double anchor_psi2 = 8, anchor_lambda = 1.0;
};

struct RfConfig {
  rf::RfSetting setting = rf::figure_setting();
  rf::Activation student = rf::Activation::tanh, teacher = rf::Activation::relu;
  std::vector<double> psi2{1, 2, 4, 8, 1e6};
  double lambda_min = 1e-3, lambda_max = 10;
  int lambda_points = 50;
  std::vector<double> rate_psi2{4, 8, 16, 32, 64, 128, 256, 512, 1024};
  McConfig mc;
};

struct GridsimConfig {
  gridsim::SyntheticLossFamily family;
  double r = 2, F_min = 1e4, F_max = 1e12;
  int per_decade = 2, placements = 32;
  std::vector<int> widths{4, 16, 64, 256, 1024};  // surfaces exported for fit/report
  int grid_points = 401;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string hash;
  std::uint64_t seed = 0;
  nn::NetworkSpec net;
  nn::TaskSpec task;
  nn::OptimizerConfig opt;
  SweepConfig sweep;
  EmaSchedule ema;
  bool ema_enabled = true;
  std::vector<int> k_values;
  int track_k = 60;
  int mci_k_max = 0;  // 0: min(width, 256)
  int mci_samples = 256;
  double mci_q = 0.1;
  double mci_lr = 0;  // 0: the best learning rate at each width
  trunc::ToleranceConfig tol;
  RfConfig rf;
  GridsimConfig gridsim;
  std::string fit_source = "train";

  nn::NetworkSpec net_at(int width) const {
    nn::NetworkSpec s = net;
    s.n = width;
    return s;
  }
  EmaSchedule schedule() const { return ema_enabled ? ema : EmaSchedule::disabled(); }
};

inline const std::map<std::string, std::set<std::string>>& config_schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"experiment", {"name", "seed"}},
      {"model", {"d", "depth", "activation", "loss", "bias", "output_dim"}},
      {"task", {"kind", "k", "noise", "train_size", "val_size", "csv_path", "standardize"}},
      {"optimizer",
       {"kind", "steps", "batch_size", "warmup_frac", "cooldown_frac", "momentum", "beta1", "beta2", "eps",
        "muon_momentum", "ns_iters", "ns_tuned"}},
      {"sweep", {"widths", "lrs", "seeds", "save_trajectories"}},
      {"ema", {"enabled", "alpha_start", "alpha_end", "warmup_steps", "tau_start", "tau_end"}},
      {"decompose", {"k_values", "track_k"}},
      {"mci", {"k_max", "samples", "q", "lr"}},
      {"truncate", {"eps_cvx", "eps_amin", "tau_grid"}},
      {"rf",
       {"psi1", "sigma_eps_sq", "student", "teacher", "psi2", "lambda_min", "lambda_max", "lambda_points",
        "rate_psi2", "mc_d", "mc_trials", "mc_psi2", "mc_lambdas", "mc_anchor_psi2", "mc_anchor_lambda"}},
      {"gridsim",
       {"alpha", "beta", "A", "B", "tau", "h", "r", "F_min", "F_max", "per_decade", "placements", "widths",
        "grid_points"}},
      {"fit", {"source"}},
  };
  return s;
}

namespace detail {
template <class T>
std::vector<T> as_ints(const std::vector<double>& v, const std::string& what) {
  std::vector<T> out;
  for (double x : v) {
    if (x != std::floor(x) || x < 0) throw ConfigError(what + " must hold nonnegative integers");
    out.push_back(static_cast<T>(x));
  }
  return out;
}
}  // namespace detail

// Builds the typed configuration. The seed override, when given, is written
// into the file's entries first so it takes part in the hash.
inline ExperimentConfig build_config(ConfigFile f, std::optional<std::uint64_t> seed_override = std::nullopt) {
  if (seed_override) f.set("experiment", "seed", std::to_string(*seed_override));
  f.check_known(config_schema());
  ExperimentConfig c;
  c.hash = f.hash();
  c.name = f.str("experiment", "name", c.name);
  c.seed = static_cast<std::uint64_t>(f.integer("experiment", "seed", 0));
  try {
    auto& n = c.net;
    n.d = static_cast<int>(f.integer("model", "d", 16));
    n.L = static_cast<int>(f.integer("model", "depth", 1));
    n.act = nn::parse_act(f.str("model", "activation", "relu"));
    n.loss = nn::parse_loss(f.str("model", "loss", "bce"));
    n.use_bias = f.flag("model", "bias", true);
    n.output_dim = static_cast<int>(f.integer("model", "output_dim", 1));

    auto& t = c.task;
    t.kind = nn::parse_task(f.str("task", "kind", "ball_indicator"));
    t.d = n.d;
    t.k = static_cast<int>(f.integer("task", "k", 1));
    t.noise = f.num("task", "noise", 0);
    t.loss = n.loss;
    t.train_size = static_cast<int>(f.integer("task", "train_size", 0));
    t.val_size = static_cast<int>(f.integer("task", "val_size", 1024));
    t.csv_path = f.str("task", "csv_path", "");
    t.standardize = f.flag("task", "standardize", true);

    auto& o = c.opt;
    o.kind = nn::parse_opt(f.str("optimizer", "kind", "adam"));
    o.steps = f.integer("optimizer", "steps", 1000);
    o.batch_size = static_cast<int>(f.integer("optimizer", "batch_size", 128));
    o.warmup_frac = f.num("optimizer", "warmup_frac", o.warmup_frac);
    o.cooldown_frac = f.num("optimizer", "cooldown_frac", o.cooldown_frac);
    o.momentum = f.num("optimizer", "momentum", o.momentum);
    o.beta1 = f.num("optimizer", "beta1", o.beta1);
    o.beta2 = f.num("optimizer", "beta2", o.beta2);
    o.eps = f.num("optimizer", "eps", o.eps);
    o.muon_momentum = f.num("optimizer", "muon_momentum", o.muon_momentum);
    o.ns_iters = static_cast<int>(f.integer("optimizer", "ns_iters", o.ns_iters));
    o.ns_tuned = f.flag("optimizer", "ns_tuned", o.ns_tuned);
    o.validate();
    n.abc = nn::mup_table(n.d, n.L, o.kind);

    c.sweep.widths = detail::as_ints<int>(f.list("sweep", "widths", {}), "sweep.widths");
    c.sweep.lrs = f.list("sweep", "lrs", {});
    c.sweep.seeds = detail::as_ints<std::uint64_t>(f.list("sweep", "seeds", {0}), "sweep.seeds");
    c.sweep.save_trajectories = f.flag("sweep", "save_trajectories", true);

    c.ema_enabled = f.flag("ema", "enabled", true);
    c.ema.alpha_start = f.num("ema", "alpha_start", c.ema.alpha_start);
    c.ema.alpha_end = f.num("ema", "alpha_end", c.ema.alpha_end);
    c.ema.warmup_steps = f.integer("ema", "warmup_steps", c.ema.warmup_steps);
    c.ema.tau_start = static_cast<int>(f.integer("ema", "tau_start", c.ema.tau_start));
    c.ema.tau_end = static_cast<int>(f.integer("ema", "tau_end", c.ema.tau_end));
    c.ema.validate();

    c.k_values = detail::as_ints<int>(f.list("decompose", "k_values", {}), "decompose.k_values");
    c.track_k = static_cast<int>(f.integer("decompose", "track_k", 60));

    c.mci_k_max = static_cast<int>(f.integer("mci", "k_max", 0));
    c.mci_samples = static_cast<int>(f.integer("mci", "samples", 256));
    c.mci_q = f.num("mci", "q", 0.1);
    c.mci_lr = f.num("mci", "lr", 0);

    c.tol.eps_cvx = f.num("truncate", "eps_cvx", c.tol.eps_cvx);
    c.tol.eps_amin = static_cast<int>(f.integer("truncate", "eps_amin", c.tol.eps_amin));
    c.tol.tau_grid = f.list("truncate", "tau_grid", c.tol.tau_grid);

    auto& r = c.rf;
    r.setting.psi1 = f.num("rf", "psi1", r.setting.psi1);
    r.setting.sigma_eps_sq = f.num("rf", "sigma_eps_sq", r.setting.sigma_eps_sq);
    r.student = rf::parse_activation(f.str("rf", "student", "tanh"));
    r.teacher = rf::parse_activation(f.str("rf", "teacher", "relu"));
    r.psi2 = f.list("rf", "psi2", r.psi2);
    r.lambda_min = f.num("rf", "lambda_min", r.lambda_min);
    r.lambda_max = f.num("rf", "lambda_max", r.lambda_max);
    r.lambda_points = static_cast<int>(f.integer("rf", "lambda_points", r.lambda_points));
    r.rate_psi2 = f.list("rf", "rate_psi2", r.rate_psi2);
    r.mc.d = static_cast<int>(f.integer("rf", "mc_d", r.mc.d));
    r.mc.trials = static_cast<int>(f.integer("rf", "mc_trials", r.mc.trials));
    r.mc.psi2 = f.list("rf", "mc_psi2", r.mc.psi2);
    r.mc.lambdas = f.list("rf", "mc_lambdas", r.mc.lambdas);
    r.mc.anchor_psi2 = f.num("rf", "mc_anchor_psi2", r.mc.anchor_psi2);
    r.mc.anchor_lambda = f.num("rf", "mc_anchor_lambda", r.mc.anchor_lambda);

    auto& g = c.gridsim;
    g.family.alpha = f.num("gridsim", "alpha", g.family.alpha);
    g.family.beta = f.num("gridsim", "beta", g.family.beta);
    g.family.A = f.num("gridsim", "A", g.family.A);
    g.family.B = f.num("gridsim", "B", g.family.B);
    g.family.tau_sc = f.num("gridsim", "tau", g.family.tau_sc);
    g.family.h = static_cast<int>(f.integer("gridsim", "h", g.family.h));
    g.family.finalize();
    g.r = f.num("gridsim", "r", g.r);
    g.F_min = f.num("gridsim", "F_min", g.F_min);
    g.F_max = f.num("gridsim", "F_max", g.F_max);
    g.per_decade = static_cast<int>(f.integer("gridsim", "per_decade", g.per_decade));
    g.placements = static_cast<int>(f.integer("gridsim", "placements", g.placements));
    if (f.has("gridsim", "widths")) g.widths = detail::as_ints<int>(f.list("gridsim", "widths", {}), "gridsim.widths");
    g.grid_points = static_cast<int>(f.integer("gridsim", "grid_points", g.grid_points));

    c.fit_source = f.str("fit", "source", c.fit_source);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (c.fit_source != "train" && c.fit_source != "gridsim" && c.fit_source != "rf")
    throw ConfigError("fit.source must be train, gridsim or rf");
  return c;
}

// Checks the blocks a training sweep depends on.
inline void require_sweep(const ExperimentConfig& c) {
  if (c.sweep.widths.empty()) throw ConfigError("sweep.widths is empty");
  if (c.sweep.lrs.empty()) throw ConfigError("sweep.lrs is empty");
  if (c.sweep.seeds.empty()) throw ConfigError("sweep.seeds is empty");
  for (int n : c.sweep.widths)
    if (n < 1) throw ConfigError("widths must be positive");
  for (size_t i = 0; i < c.sweep.lrs.size(); ++i) {
    if (!(c.sweep.lrs[i] > 0)) throw ConfigError("learning rates must be positive");
    if (i && !(c.sweep.lrs[i] > c.sweep.lrs[i - 1])) throw ConfigError("sweep.lrs must be strictly increasing");
  }
  for (size_t i = 1; i < c.sweep.widths.size(); ++i)
    if (!(c.sweep.widths[i] > c.sweep.widths[i - 1])) throw ConfigError("sweep.widths must be strictly increasing");
}

}  // namespace hpt
