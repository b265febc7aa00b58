#pragma once

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>

#include "hpt/pipeline.hpp"

namespace hpt::cli {

enum ExitCode { kOk = 0, kConfigError = 2, kPartialFailure = 3 };

struct GlobalFlags {
  std::string config;
  std::string out = "runs";
  int workers = 1;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

// Parses argv, runs one subcommand and maps the outcome to an exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Width-scaling and hyperparameter-transfer toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalFlags g;
  app.add_option("--config", g.config, "experiment config (INI sections, key = value)");
  app.add_option("--out", g.out, "output root; results land in <out>/<config hash>");
  app.add_option("--workers", g.workers, "parallel cells")->check(CLI::PositiveNumber);
  app.add_option("--seed", g.seed, "master seed override (part of the config hash)");
  app.add_flag("--force", g.force, "recompute completed cells and artifacts");

  std::string sub;
  auto add = [&](const char* name, const char* help) { return app.add_subcommand(name, help); };
  auto* train = add("train", "train the (width, lr, seed) sweep and record trajectories");
  auto* decompose = add("decompose", "top-k profiles and over-time tables from trajectories");
  auto* truncate = add("truncate", "estimate truncation vectors per width");
  auto* mci = add("mci", "per-sample component split, MCI and overlap consistency");
  auto* rfc = add("rf", "random-features ridge analytics");
  rfc->require_subcommand(1);
  for (const char* s : {"curve", "rates", "mc", "closed-forms"})
    rfc->add_subcommand(s, std::string("rf ") + s)->fallthrough()->callback([&sub, s] { sub = s; });
  auto* grid = add("gridsim", "grid-search budget simulator");
  grid->require_subcommand(1);
  for (const char* s : {"run", "frontier"})
    grid->add_subcommand(s, std::string("gridsim ") + s)->fallthrough()->callback([&sub, s] { sub = s; });
  auto* fit = add("fit", "fit loss, hp and suboptimality gap exponents");
  auto* report = add("report", "JSON report: exponents, transfer verdict, t_n vs b_n");
  for (auto* s : {train, decompose, truncate, mci, rfc, grid, fit, report}) s->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (g.config.empty()) throw ConfigError("--config is required");
    auto cfg = build_config(ConfigFile::load(g.config), g.seed);
    pipeline::Context ctx(std::move(cfg), g.out, g.force, g.workers);
    ctx.log = &out;
    pipeline::Outcome o;
    std::string name;
    if (train->parsed()) o = pipeline::cmd_train(ctx), name = "train";
    else if (decompose->parsed()) o = pipeline::cmd_decompose(ctx), name = "decompose";
    else if (truncate->parsed()) o = pipeline::cmd_truncate(ctx), name = "truncate";
    else if (mci->parsed()) o = pipeline::cmd_mci(ctx), name = "mci";
    else if (rfc->parsed()) o = pipeline::cmd_rf(ctx, sub), name = "rf " + sub;
    else if (grid->parsed()) o = pipeline::cmd_gridsim(ctx, sub), name = "gridsim " + sub;
    else if (fit->parsed()) o = pipeline::cmd_fit(ctx), name = "fit";
    else o = pipeline::cmd_report(ctx), name = "report";
    out << name << ": produced " << o.produced << ", skipped " << o.skipped << ", missing " << o.missing << " -> "
        << ctx.root.string() << '\n';
    return o.missing > 0 ? kPartialFailure : kOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kPartialFailure;
  }
}

}  // namespace hpt::cli
