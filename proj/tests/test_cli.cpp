#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hpt/cli.hpp"

namespace fs = std::filesystem;
using namespace hpt;

namespace {

const char* kTiny = R"(
[experiment]
seed = 4

[model]
d = 4
depth = 1

[task]
val_size = 128

[optimizer]
steps = 40
batch_size = 32

[sweep]
widths = 8, 16
lrs = 0.005, 0.02
seeds = 0

[ema]
alpha_start = 0.8
alpha_end = 0.9
warmup_steps = 40
tau_start = 1
tau_end = 2
)";

struct Sandbox {
  fs::path dir;
  explicit Sandbox(const std::string& name) : dir(fs::temp_directory_path() / ("hpt_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Sandbox() { fs::remove_all(dir); }

  fs::path config(const std::string& text, const std::string& name = "c.ini") const {
    std::ofstream(dir / name) << text;
    return dir / name;
  }

  int run(std::vector<std::string> args, const fs::path& cfg, std::string* out_text = nullptr) const {
    args.insert(args.begin(), "hpt");
    for (const std::string& extra : {std::string("--config"), cfg.string(), std::string("--out"), (dir / "out").string()})
      args.push_back(extra);
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int rc = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    if (out_text) *out_text = out.str();
    return rc;
  }

  fs::path root(const fs::path& cfg) const { return dir / "out" / build_config(ConfigFile::load(cfg)).hash; }
};

size_t count_ext(const fs::path& d, const std::string& ext) {
  size_t n = 0;
  for (const auto& e : fs::directory_iterator(d))
    if (e.path().extension() == ext) ++n;
  return n;
}

size_t data_rows(const fs::path& csv) { return read_csv(csv).rows.size(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Config, UnknownKeyIsAnError) {
  EXPECT_THROW(build_config(ConfigFile::parse("[model]\nwidht = 3\n")), ConfigError);
  EXPECT_THROW(build_config(ConfigFile::parse("[nonsense]\na = 1\n")), ConfigError);
  EXPECT_THROW(build_config(ConfigFile::parse("[model]\nd = three\n")), ConfigError);
}

TEST(Config, HashIgnoresLayoutButNotValues) {
  const auto a = build_config(ConfigFile::parse("[model]\nd = 4\ndepth = 1\n[sweep]\nlrs = 0.1\n"));
  const auto b = build_config(ConfigFile::parse("; comment\n[sweep]\nlrs=0.1\n\n[model]\ndepth = 1\nd=4\n"));
  const auto c = build_config(ConfigFile::parse("[model]\nd = 5\ndepth = 1\n[sweep]\nlrs = 0.1\n"));
  EXPECT_EQ(a.hash, b.hash);
  EXPECT_NE(a.hash, c.hash);
  EXPECT_NE(a.hash, build_config(ConfigFile::parse("[model]\nd = 4\ndepth = 1\n[sweep]\nlrs = 0.1\n"), 9).hash);
}

TEST(Config, ListsAndDefaults) {
  const auto c = build_config(ConfigFile::parse(kTiny));
  EXPECT_EQ(c.sweep.widths, (std::vector<int>{8, 16}));
  EXPECT_EQ(c.sweep.lrs.size(), 2u);
  EXPECT_EQ(c.net.abc.size(), 2u);
  EXPECT_EQ(c.track_k, 60);
  EXPECT_TRUE(c.ema_enabled);
}

TEST(Pool, EveryIndexRunsOnce) {
  std::vector<std::atomic<int>> hits(257);
  pipeline::parallel_for(hits.size(), 4, [&](size_t i) { ++hits[i]; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  pipeline::parallel_for(0, 4, [&](size_t) { FAIL(); });
}

TEST(Cli, EmptyWidthListIsConfigError) {
  Sandbox sb("empty");
  std::string text = kTiny;
  text.replace(text.find("widths = 8, 16"), 14, "widths =");
  EXPECT_EQ(sb.run({"train"}, sb.config(text)), cli::kConfigError);
}

TEST(Cli, MissingConfigAndUnknownCommand) {
  Sandbox sb("usage");
  EXPECT_EQ(sb.run({"train"}, sb.dir / "absent.ini"), cli::kConfigError);
  EXPECT_EQ(sb.run({"bogus"}, sb.config(kTiny)), cli::kConfigError);
}

TEST(Cli, TwoByTwoSweepWritesFourTrajectoriesAndSkipsOnRerun) {
  Sandbox sb("sweep");
  const auto cfg = sb.config(kTiny);
  std::string out;
  ASSERT_EQ(sb.run({"train", "--workers", "2"}, cfg, &out), cli::kOk);
  const auto root = sb.root(cfg);
  EXPECT_EQ(count_ext(root / "train", ".traj"), 4u);
  EXPECT_NE(out.find("produced 4, skipped 0"), std::string::npos);
  const auto ledger_before = slurp(root / "ledger.jsonl");
  const auto t_before = fs::last_write_time(root / "train" / "w8_lr0_s0.traj");

  ASSERT_EQ(sb.run({"train"}, cfg, &out), cli::kOk);
  EXPECT_NE(out.find("produced 0, skipped 4"), std::string::npos);
  EXPECT_EQ(fs::last_write_time(root / "train" / "w8_lr0_s0.traj"), t_before);
  EXPECT_EQ(slurp(root / "ledger.jsonl"), ledger_before);

  ASSERT_EQ(sb.run({"train", "--force"}, cfg, &out), cli::kOk);
  EXPECT_NE(out.find("produced 4, skipped 0"), std::string::npos);
  // Append-only: the forced rerun adds four entries after the original four.
  const auto after = slurp(root / "ledger.jsonl");
  EXPECT_EQ(after.substr(0, ledger_before.size()), ledger_before);
  EXPECT_EQ(std::count(after.begin(), after.end(), '\n'), 8);
}

TEST(Cli, OutputsAreByteIdentical) {
  Sandbox a("det_a"), b("det_b");
  const auto ca = a.config(kTiny), cb = b.config(kTiny);
  for (const char* cmd : {"train", "decompose", "truncate"}) {
    ASSERT_EQ(a.run({cmd, "--workers", "3"}, ca), cli::kOk) << cmd;
    ASSERT_EQ(b.run({cmd}, cb), cli::kOk) << cmd;
  }
  const auto ra = a.root(ca), rb = b.root(cb);
  for (const char* f : {"train/surface.csv", "train/w16_lr1_s0.json", "decompose/profile.csv",
                        "decompose/topk_time.csv", "decompose/identities.csv", "truncate/khat.csv", "truncate/khat.json"})
    EXPECT_EQ(slurp(ra / f), slurp(rb / f)) << f;
  EXPECT_EQ(slurp(ra / "decompose/profile.bin"), slurp(rb / "decompose/profile.bin"));
}

TEST(Cli, DecomposeProfileShapeAndTopN) {
  Sandbox sb("decomp");
  std::string text = kTiny;
  text += "\n[decompose]\nk_values = 1, 4, 8\ntrack_k = 3\n";
  const auto cfg = sb.config(text);
  ASSERT_EQ(sb.run({"train"}, cfg), cli::kOk);
  ASSERT_EQ(sb.run({"decompose"}, cfg), cli::kOk);
  const auto root = sb.root(cfg);
  const auto t = read_csv(root / "decompose" / "profile.csv");
  // widths x grid x k values, every k at most the smallest width.
  EXPECT_EQ(t.rows.size(), 2u * 2u * 3u);
  EXPECT_EQ(slurp(root / "decompose" / "profile.csv").rfind("# config_hash=", 0), 0u);

  // k = n reproduces the total surface.
  const auto p = pipeline::read_profile_bin(root / "decompose" / "profile.bin");
  for (int n : p.widths)
    for (size_t i = 0; i < p.hps.size(); ++i) EXPECT_NEAR(p.residual(n, i, n), 0, 1e-12 * std::abs(p.totals.at(n)[i]));

  const auto time = read_csv(root / "decompose" / "topk_time.csv");
  ASSERT_FALSE(time.rows.empty());
  EXPECT_EQ(time.rows[0][time.col("k")], "3");
  for (const auto& row : read_csv(root / "decompose" / "identities.csv").rows)
    EXPECT_LT(std::stod(row[4]), 1e-8);
}

TEST(Cli, DecomposeMarksAbsentCells) {
  Sandbox sb("absent");
  const auto cfg = sb.config(kTiny);
  ASSERT_EQ(sb.run({"train"}, cfg), cli::kOk);
  const auto root = sb.root(cfg);
  fs::remove(root / "train" / "w16_lr1_s0.traj");
  ASSERT_EQ(sb.run({"decompose"}, cfg), cli::kOk);
  const auto p = pipeline::read_profile_bin(root / "decompose" / "profile.bin");
  EXPECT_FALSE(p.present(16, 1));
  EXPECT_TRUE(p.present(16, 0));
  EXPECT_NE(slurp(root / "ledger.jsonl").find("\"absent\""), std::string::npos);
}

TEST(Cli, MciWritesTablesAndOverlap) {
  Sandbox sb("mci");
  std::string text = kTiny;
  text.replace(text.find("seeds = 0"), 9, "seeds = 0, 1");
  text += "\n[mci]\nsamples = 40\nq = 0.25\n";
  const auto cfg = sb.config(text);
  ASSERT_EQ(sb.run({"train"}, cfg), cli::kOk);
  ASSERT_EQ(sb.run({"mci"}, cfg), cli::kOk);
  const auto root = sb.root(cfg);
  for (const auto& row : read_csv(root / "mci" / "identity.csv").rows) EXPECT_LT(std::stod(row.back()), 1e-6);
  const auto ov = read_csv(root / "mci" / "overlap.csv");
  EXPECT_EQ(ov.rows.size(), 2u * 2u * 2u);
  for (const auto& row : ov.rows) {
    const double v = std::stod(row[3]);
    EXPECT_GE(v, 0);
    EXPECT_LE(v, 1);
  }
}

TEST(Cli, ReportNeedsThreeWidths) {
  Sandbox sb("few");
  const auto cfg = sb.config(kTiny);
  ASSERT_EQ(sb.run({"train"}, cfg), cli::kOk);
  EXPECT_EQ(sb.run({"report"}, cfg), cli::kConfigError);
}

TEST(Fit, IdenticalSurfacesAreDegenerate) {
  Curve c{{0, 1.0}, {1, 0.5}, {2, 0.8}};
  const auto r = pipeline::fit_gaps({{8, c}, {16, c}, {32, c}}, 32, true);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.verdict, "degenerate");
  EXPECT_THROW(pipeline::fit_gaps({{8, c}, {16, c}}, 16, true), ConfigError);
}

TEST(Cli, GridsimReportRecoversPlantedExponents) {
  Sandbox sb("grid");
  for (double beta : {1.0, 0.4}) {
    const auto cfg = sb.config("[gridsim]\nalpha = 1\nbeta = " + fmt17(beta) + "\nwidths = 4, 16, 64, 256, 1024\n"
                               "[fit]\nsource = gridsim\n");
    ASSERT_EQ(sb.run({"report"}, cfg), cli::kOk);
    const auto j = pipeline::read_json(sb.root(cfg) / "report" / "report.json");
    EXPECT_NEAR(j["alpha"].get<double>(), 1, 0.02);
    EXPECT_NEAR(j["beta"].get<double>(), beta, 0.02);
    EXPECT_EQ(j["verdict"], beta > 0.5 ? "fast_useful" : "not_fast");
    ASSERT_EQ(j["tn_vs_bn"].size(), 5u);
    for (const auto& row : j["tn_vs_bn"]) EXPECT_TRUE(row["holds"].get<bool>());
  }
}

TEST(Cli, RfReportIsFast) {
  Sandbox sb("rf");
  const auto cfg = sb.config("[fit]\nsource = rf\n");
  ASSERT_EQ(sb.run({"report"}, cfg), cli::kOk);
  const auto j = pipeline::read_json(sb.root(cfg) / "report" / "report.json");
  EXPECT_EQ(j["verdict"], "fast_useful");
  EXPECT_NEAR(j["alpha"].get<double>(), 1, 0.1);
}

TEST(Cli, RfAndGridsimSubcommandsWriteTables) {
  Sandbox sb("rfsub");
  const auto cfg = sb.config("[rf]\npsi2 = 2, 8\nlambda_points = 5\n[gridsim]\nF_max = 1e8\n");
  for (auto sub : {"curve", "rates", "closed-forms"}) EXPECT_EQ(sb.run({"rf", sub}, cfg), cli::kOk) << sub;
  for (auto sub : {"run", "frontier"}) EXPECT_EQ(sb.run({"gridsim", sub}, cfg), cli::kOk) << sub;
  const auto root = sb.root(cfg);
  const auto curve = read_csv(root / "rf" / "curve.csv");
  EXPECT_EQ(curve.rows.size(), 10u);
  for (const auto& row : curve.rows) EXPECT_LT(std::abs(std::stod(row[curve.col("residual1")])), 1e-12);
  EXPECT_TRUE(fs::exists(root / "rf" / "closed_forms.json"));
  EXPECT_GT(data_rows(root / "gridsim" / "run.csv"), 10u);
  EXPECT_EQ(sb.run({"rf"}, cfg), cli::kConfigError);
}
