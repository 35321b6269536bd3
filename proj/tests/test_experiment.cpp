#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "safer/config.hpp"
#include "safer/experiment.hpp"

namespace fs = std::filesystem;
namespace ex = safer::experiment;
using ex::json;

namespace {

const fs::path kSource = SAFER_SOURCE_DIR;

// 3 phases, 2 algorithms, 3 repeats on a small blob set.
const char* kSmall = R"(schema: safer-lab/1
dataset:
  kind: blobs
  seed: 5
  classes: 5
  n_per_class: 40
  noise_sigma: 1.0
model:
  hidden: [16]
  latent_dim: 4
  encoder_hidden: [8]
  decoder_hidden: [8]
original:
  epochs: 5
schedule:
  phases: [[0], [1], [2]]
algorithms:
  - name: retrain
  - name: safer
    lr: 0.01
    epochs: 2
repeats: 3
seed: 11
output_dir: small
histograms:
  margin_bins: 10
  margin_range: [-5, 5]
  similarity_bins: 8
)";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("safer_lab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ex::ExperimentConfig parse_ok(const std::string& text) {
  const auto r = ex::parse_config(text);
  for (const auto& d : r.diagnostics) ADD_FAILURE() << d.str("<config>");
  return *r.config;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

std::vector<std::vector<std::string>> csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

int run_cli(const std::string& args) {
  const int rc = std::system((std::string(SAFER_LAB_BIN) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// One shared run of kSmall, reused by the output-format tests.
const ex::ExperimentResult& small_run() {
  static const ex::ExperimentResult r = [] {
    ex::RunOptions o;
    o.output_root = scratch("small_a");
    return ex::run_experiment(parse_ok(kSmall), o);
  }();
  return r;
}

}  // namespace

TEST(Validate, RepeatedClassNamesClassAndBothPhases) {
  const auto r = ex::parse_config("schema: safer-lab/1\ndataset:\n  kind: blobs\nschedule:\n  phases: [[0], [3], [3, 4]]\n"
                                  "algorithms:\n  - name: retrain\n");
  ASSERT_FALSE(r.ok());
  ASSERT_EQ(r.diagnostics.size(), 1u);
  const auto& d = r.diagnostics[0];
  EXPECT_EQ(d.line, 5);
  EXPECT_NE(d.message.find("class 3"), std::string::npos);
  EXPECT_NE(d.message.find("phases 2 and 3"), std::string::npos);
}

TEST(Validate, NegativeLearningRateIsRangeError) {
  const auto r = ex::parse_config("schema: safer-lab/1\ndataset:\n  kind: blobs\nschedule:\n  phases: [[0]]\nalgorithms:\n  - name: finetune\n"
                                  "    lr: -0.1\n");
  ASSERT_EQ(r.diagnostics.size(), 1u);
  EXPECT_EQ(r.diagnostics[0].line, 8);
  EXPECT_EQ(r.diagnostics[0].path, "algorithms[0].lr");
  EXPECT_NE(r.diagnostics[0].message.find("must be > 0"), std::string::npos);
}

TEST(Validate, ReportsEveryProblemWithLocation) {
  const auto r = ex::parse_config("schema: safer-lab/2\ndataset:\n  kind: blobs\n  classes: 2\n  colour: red\n"
                                  "schedule:\n  phases: [[9]]\nalgorithms:\n  - name: scrub\n");
  EXPECT_GE(r.diagnostics.size(), 4u);
  for (const auto& d : r.diagnostics) EXPECT_GT(d.line, 0) << d.str("x");
}

TEST(Validate, ShippedConfigsAreValid) {
  for (const char* name : {"desk.yaml", "minimal.yaml", "entities.yaml"}) {
    const auto r = ex::load_config(kSource / "configs" / name);
    EXPECT_TRUE(r.ok()) << name;
    EXPECT_TRUE(r.diagnostics.empty()) << name;
  }
}

TEST(Run, MinimalConfigWritesOneResultWithUndefinedContinualMetrics) {
  const auto root = scratch("minimal");
  const auto parsed = ex::load_config(kSource / "configs" / "minimal.yaml");
  ASSERT_TRUE(parsed.ok());
  ex::RunOptions o;
  o.output_root = root;
  const auto res = ex::run_experiment(*parsed.config, o);
  EXPECT_EQ(res.status, ex::exit_ok);
  std::vector<fs::path> results;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.path().filename() == "result.json") results.push_back(e.path());
  }
  ASSERT_EQ(results.size(), 1u);
  const json r = ex::load_log(results[0]);
  EXPECT_TRUE(r["metrics"]["m_ke"].is_null());
  EXPECT_TRUE(r["metrics"]["m_fr"].is_null());
  EXPECT_EQ(r["metrics"]["undefined"], json({"m_ke", "m_fr"}));
}

TEST(Run, CountsPhaseRecords) {
  const auto& res = small_run();
  ASSERT_EQ(res.status, ex::exit_ok);
  EXPECT_EQ(res.log["phase_records"].size(), 18u);
  EXPECT_EQ(res.log["runs"].size(), 6u);
}

TEST(Run, RerunIsByteIdenticalIncludingAcrossWorkerCounts) {
  const auto& a = small_run();
  auto cfg = parse_ok(kSmall);
  cfg.workers = 3;
  ex::RunOptions o;
  o.output_root = scratch("small_b");
  const auto b = ex::run_experiment(cfg, o);
  auto ta = tree(a.output_dir), tb = tree(b.output_dir);
  ta.erase("timing.json");
  tb.erase("timing.json");
  ASSERT_EQ(ta.size(), tb.size());
  for (const auto& [name, bytes] : ta) EXPECT_TRUE(tb.count(name) && tb[name] == bytes) << name;
}

TEST(Run, AggregateIsRecomputableFromRunFiles) {
  const auto& res = small_run();
  const json log = ex::load_log(res.output_dir / "aggregate.json");
  json runs = json::array();
  for (const auto& r : log["runs"]) {
    runs.push_back(ex::load_log(res.output_dir / "runs" /
                                (r["algorithm"].get<std::string>() + "_r" + std::to_string(r["repeat"].get<int>())) /
                                "result.json"));
  }
  const json again = ex::aggregate(runs, {"retrain", "safer"}, 3);
  for (const char* algo : {"retrain", "safer"}) {
    for (std::size_t t = 0; t < 3; ++t) {
      for (const char* metric : {"tow", "dbi", "mia"}) {
        const auto& x = log["aggregate"][algo]["phases"][t][metric];
        const auto& y = again[algo]["phases"][t][metric];
        EXPECT_NEAR(x["mean"].get<double>(), y["mean"].get<double>(), 1e-12);
        EXPECT_NEAR(x["std"].get<double>(), y["std"].get<double>(), 1e-12);
      }
      // Direct mean over the per-run files.
      double sum = 0.0;
      for (const auto& r : runs) {
        if (r["algorithm"] == algo) sum += r["phases"][t]["tow"].get<double>();
      }
      EXPECT_NEAR(log["aggregate"][algo]["phases"][t]["tow"]["mean"].get<double>(), sum / 3.0, 1e-12);
    }
  }
}

TEST(Run, RetrainTowIsOneAndMetricsDefined) {
  const auto& log = small_run().log;
  for (const auto& r : log["runs"]) {
    ASSERT_EQ(r["status"], "ok");
    ASSERT_EQ(r["phases"].size(), 3u);
    EXPECT_TRUE(r["metrics"]["m_ke"].is_number());
    EXPECT_TRUE(r["metrics"]["m_fr"].is_number());
    if (r["algorithm"] == "retrain") {
      for (const auto& ph : r["phases"]) EXPECT_EQ(ph["tow"].get<double>(), 1.0);
    }
  }
}

TEST(PlotData, TowFileHasOneRowPerPhasePerAlgorithm) {
  const auto rows = csv(small_run().output_dir / "plots" / "tow.csv");
  std::map<std::string, int> per_algo;
  for (const auto& r : rows) per_algo[r[0]]++;
  EXPECT_EQ(per_algo, (std::map<std::string, int>{{"retrain", 3}, {"safer", 3}}));
}

TEST(PlotData, HistogramCountsSumToSetSizes) {
  const auto& res = small_run();
  std::map<std::string, long> sums;
  for (const auto& r : csv(res.output_dir / "plots" / "margins.csv")) {
    sums[r[0] + "/" + r[1] + "/" + r[2] + "/" + r[3]] += std::stol(r[6]);
  }
  std::size_t checked = 0;
  for (const auto& run : res.log["runs"]) {
    for (const auto& ph : run["phases"]) {
      for (const auto& h : ph["margins"]) {
        const std::string key = run["algorithm"].get<std::string>() + "/" + std::to_string(run["repeat"].get<int>()) +
                                "/" + std::to_string(ph["phase"].get<int>()) + "/" + h["set"].get<std::string>();
        EXPECT_EQ(sums[key], h["rows"].get<long>()) << key;
        ++checked;
      }
    }
  }
  // forget at every phase, forgot from phase 2: 5 histograms per run.
  EXPECT_EQ(checked, 6u * 5u);
  // 32 train rows per class, two classes forgotten by phase 3.
  EXPECT_EQ(res.log["runs"][0]["phases"][2]["margins"][1]["rows"], 64);
}

TEST(PlotData, ReEmissionFromStoredLogIsByteIdentical) {
  const auto& res = small_run();
  const auto out = scratch("reemit");
  const auto written = ex::emit_plot_data(ex::load_log(res.output_dir / "aggregate.json"), out);
  ASSERT_EQ(written.size(), 6u);
  for (const auto& p : written) EXPECT_EQ(slurp(p), slurp(res.output_dir / "plots" / p.filename())) << p;
}

TEST(Output, RootFromEnvironmentVariable) {
  auto cfg = parse_ok(kSmall);
  const fs::path root = scratch("envroot");
  ::setenv(ex::kOutputRootEnv, root.c_str(), 1);
  EXPECT_EQ(ex::resolve_output_dir(cfg), root / "small");
  EXPECT_EQ(ex::resolve_output_dir(cfg, fs::path("/elsewhere")), fs::path("/elsewhere/small"));
  ::unsetenv(ex::kOutputRootEnv);
  EXPECT_EQ(ex::resolve_output_dir(cfg), fs::path("small"));
  cfg.output_dir = "/abs/out";
  EXPECT_EQ(ex::resolve_output_dir(cfg, root), fs::path("/abs/out"));
}

TEST(Run, DivergingRunIsMarkedFailedAndOthersKept) {
  auto cfg = parse_ok(kSmall);
  cfg.repeats = 1;
  auto& a = cfg.algorithms[1];
  a.name = "neggrad";
  a.kind = safer::unlearn::Algorithm::neggrad;
  a.lr = 1e308;
  a.optimizer = safer::unlearn::OptimizerKind::sgd;
  ex::RunOptions o;
  o.output_root = scratch("diverge");
  const auto res = ex::run_experiment(cfg, o);
  EXPECT_EQ(res.status, ex::exit_runtime_failure);
  EXPECT_EQ(res.failed_runs, 1u);
  const json failed = ex::load_log(res.output_dir / "runs" / "neggrad_r0" / "result.json");
  EXPECT_EQ(failed["status"], "failed");
  EXPECT_NE(failed["error"].get<std::string>().find("non-finite"), std::string::npos);
  const json kept = ex::load_log(res.output_dir / "runs" / "retrain_r0" / "result.json");
  EXPECT_EQ(kept["status"], "ok");
  EXPECT_TRUE(fs::exists(res.output_dir / "plots" / "tow.csv"));
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  std::ofstream(dir / "bad.yaml") << "schema: safer-lab/1\nschedule:\n  phases: [[0], [0]]\nalgorithms:\n  - name: retrain\n";
  EXPECT_EQ(run_cli("validate " + (kSource / "configs" / "desk.yaml").string()), 0);
  EXPECT_EQ(run_cli("validate " + (dir / "bad.yaml").string()), 1);
  EXPECT_EQ(run_cli("run " + (dir / "bad.yaml").string()), 1);
  EXPECT_EQ(run_cli("validate " + (dir / "missing.yaml").string()), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("run " + (kSource / "configs" / "minimal.yaml").string() + " -o " + (dir / "out").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "aggregate.json"));
  EXPECT_EQ(run_cli("emit-plots " + (dir / "out" / "aggregate.json").string() + " -o " + (dir / "plots").string()), 0);
  EXPECT_EQ(slurp(dir / "plots" / "tow.csv"), slurp(dir / "out" / "plots" / "tow.csv"));
}
