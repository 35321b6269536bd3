#pragma once

// Config-driven runner: executes every (algorithm, repeat) pair, writes one
// result file per run, an aggregate log, and plot-data tables.
//
// Output layout under the resolved output directory:
//   runs/<algorithm>_r<k>/result.json   per-run record
//   runs/<algorithm>_r<k>/steps.csv     per-step loss terms
//   aggregate.json                      config echo, references, all runs,
//                                       mean/std over repeats, phase records
//   summary.csv                         accuracies in percent, two decimals
//   timing.json                         wall-clock seconds (not deterministic)
//   plots/*.csv                         data behind the figures

#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "safer/config.hpp"
#include "safer/data.hpp"
#include "safer/metrics.hpp"
#include "safer/model.hpp"
#include "safer/unlearn.hpp"

namespace safer::experiment {

using json = nlohmann::json;

inline constexpr std::string_view kArtifactVersion = "1.0.0";
inline constexpr const char* kOutputRootEnv = "SAFER_LAB_OUTPUT_ROOT";

enum ExitCode : int { exit_ok = 0, exit_config_error = 1, exit_runtime_failure = 2 };

// ---------------------------------------------------------------------------
// Config echo (everything except the worker count, which cannot change results)

inline json to_json(const unlearn::AlgorithmConfig& a) {
  return {{"name", a.name},
          {"kind", std::string(unlearn::algorithm_name(a.kind))},
          {"epochs", a.epochs},
          {"lr", a.lr},
          {"batch_size", a.batch_size},
          {"lambda", a.lambda},
          {"beta", a.beta},
          {"switches", {{"um", a.switches.um}, {"ic", a.switches.ic}, {"cd", a.switches.cd}}},
          {"optimizer", a.optimizer == unlearn::OptimizerKind::sgd ? "sgd" : "momentum"},
          {"momentum", a.momentum},
          {"ema_mode", a.ema_mode == losses::EmaMode::global ? "global" : "per_class"},
          {"ema_decay", a.ema_decay}};
}

inline json to_json(const ExperimentConfig& c) {
  json ds;
  if (c.dataset.kind == DatasetKind::blobs) {
    const auto& b = c.dataset.blobs;
    ds = {{"kind", "blobs"},          {"seed", b.seed},
          {"classes", b.classes},     {"dim", b.dim},
          {"n_per_class", b.n_per_class}, {"center_spread", b.center_spread},
          {"noise_sigma", b.noise_sigma}, {"test_fraction", b.test_fraction}};
  } else {
    const auto& e = c.dataset.entities;
    ds = {{"kind", "entities"},
          {"seed", e.seed},
          {"n_entities", e.n_entities},
          {"samples_per_entity", e.samples_per_entity},
          {"attributes", e.attributes},
          {"dim", e.dim},
          {"prototype_scale", e.prototype_scale},
          {"noise_sigma", e.noise_sigma},
          {"test_fraction", e.test_fraction}};
  }
  json schedule;
  if (c.schedule.drawn) {
    schedule = {{"phases", c.schedule.drawn_phases}, {"units_per_phase", c.schedule.units_per_phase}};
  } else {
    schedule = {{"phases", c.schedule.phases}};
  }
  json algos = json::array();
  for (const auto& a : c.algorithms) algos.push_back(to_json(a));
  const auto& m = c.model;
  return {{"schema", c.schema},
          {"dataset", ds},
          {"model",
           {{"layer_sizes", m.layer_sizes},
            {"classes", m.classes},
            {"latent_dim", m.latent_dim},
            {"encoder_hidden", m.encoder_hidden},
            {"decoder_hidden", m.decoder_hidden},
            {"activation", m.activation == model::Activation::tanh ? "tanh" : "relu"},
            {"logvar_bound", m.logvar_bound}}},
          {"original",
           {{"epochs", c.original.epochs},
            {"lr", c.original.lr},
            {"batch_size", c.original.batch_size},
            {"optimizer", c.original.optimizer == unlearn::OptimizerKind::sgd ? "sgd" : "momentum"},
            {"momentum", c.original.momentum}}},
          {"schedule", schedule},
          {"algorithms", algos},
          {"repeats", c.repeats},
          {"seed", c.seed},
          {"output_dir", c.output_dir},
          {"metrics",
           {{"tow", c.metrics.tow},
            {"dbi", c.metrics.dbi},
            {"mia", c.metrics.mia},
            {"margins", c.metrics.margins},
            {"similarity", c.metrics.similarity}}},
          {"histograms",
           {{"margin_bins", c.histograms.margin_bins},
            {"margin_range", {c.histograms.margin_lo, c.histograms.margin_hi}},
            {"similarity_bins", c.histograms.similarity_bins}}}};
}

// ---------------------------------------------------------------------------
// Seeds

/// Repeat r uses root seed `seed + r` for every training stream and dataset
/// seed `dataset.seed + r`.
inline std::uint64_t run_seed(const ExperimentConfig& c, int repeat) { return c.seed + static_cast<std::uint64_t>(repeat); }

inline data::LabeledDataset make_dataset(const ExperimentConfig& c, int repeat) {
  if (c.dataset.kind == DatasetKind::blobs) {
    data::BlobSpec b = c.dataset.blobs;
    b.seed += static_cast<std::uint64_t>(repeat);
    return data::gaussian_blobs(b);
  }
  data::EntitySpec e = c.dataset.entities;
  e.seed += static_cast<std::uint64_t>(repeat);
  return data::misaligned_entities(e);
}

// ---------------------------------------------------------------------------
// Per-run records

namespace detail {

inline json accuracy_json(const metrics::AccuracyRow& row) {
  json j = json::object();
  for (const auto& [name, acc] : row) j[name] = acc;
  return j;
}

inline json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json histogram_json(const std::vector<double>& edges, const std::vector<long>& counts) {
  return {{"edges", edges}, {"counts", counts}};
}

}  // namespace detail

struct RepeatContext {
  int repeat = 0;
  std::uint64_t seed = 0;
  data::LabeledDataset dataset;
  data::PhasePlan plan;
  model::Model original;
  std::vector<metrics::AccuracyRow> original_accuracy;  // per phase
  std::vector<metrics::AccuracyRow> retrain_accuracy;   // per phase, ToW reference
  std::vector<unlearn::PhaseResult> retrain_phases;
};

/// Metrics of one finished phase.
inline json phase_json(const ExperimentConfig& c, const RepeatContext& ctx, const unlearn::PhaseResult& r) {
  const auto& ds = ctx.dataset;
  const auto& tr = ctx.plan.train[r.phase - 1];
  const auto& te = ctx.plan.test[r.phase - 1];
  json j;
  j["phase"] = r.phase;
  j["accuracies"] = detail::accuracy_json(r.accuracies);
  j["stabilized_retain_accuracy"] = detail::opt(r.stabilized_retain_accuracy);

  j["tow"] = c.metrics.tow ? json(metrics::tug_of_war(r.accuracies, ctx.retrain_accuracy[r.phase - 1])) : json(nullptr);

  if (c.metrics.dbi && !tr.retain.empty()) {
    const auto rows = unlearn::take_rows(ds, tr.retain);
    const auto d = metrics::dbi(model::forward_classify(r.model, rows.x).features, rows.y);
    j["dbi"] = {{"value", d.value}, {"per_class", d.per_class}, {"degenerate", d.degenerate}};
  } else {
    j["dbi"] = nullptr;
  }

  if (c.metrics.mia && !tr.retain.empty() && !te.retain.empty() && !tr.forget.empty()) {
    const auto mem = unlearn::take_rows(ds, tr.retain);
    const auto non = unlearn::take_rows(ds, te.retain);
    const auto fg = unlearn::take_rows(ds, tr.forget);
    const auto m = metrics::mia_score(r.model, {mem.x, mem.y}, {non.x, non.y}, {fg.x, fg.y});
    j["mia"] = {{"score", m.score},
                {"threshold", m.threshold},
                {"balanced_accuracy", m.balanced_accuracy},
                {"degenerate", m.degenerate}};
  } else {
    j["mia"] = nullptr;
  }

  j["margins"] = json::array();
  if (c.metrics.margins) {
    const auto edges = metrics::uniform_edges(c.histograms.margin_lo, c.histograms.margin_hi, c.histograms.margin_bins);
    for (const auto& [set, idx] : {std::pair{"forget", &tr.forget}, std::pair{"forgot", &tr.forgot}}) {
      if (idx->empty()) continue;
      const auto rows = unlearn::take_rows(ds, *idx);
      const auto um = metrics::margins(model::forward_classify(r.model, rows.x).logits, rows.y);
      long negative = 0;
      for (double v : um) negative += v < 0.0 ? 1 : 0;
      json h = detail::histogram_json(edges, metrics::histogram_counts(um, edges));
      h["set"] = set;
      h["rows"] = um.size();
      h["negative_fraction"] = static_cast<double>(negative) / static_cast<double>(um.size());
      j["margins"].push_back(std::move(h));
    }
  }

  j["similarity"] = json::array();
  if (c.metrics.similarity) {
    const auto edges = metrics::uniform_edges(-1.0, 1.0, c.histograms.similarity_bins);
    for (const auto& [set, idx] : {std::pair{"retain", &tr.retain}, std::pair{"forget", &tr.forget}}) {
      if (idx->empty()) continue;
      const auto rows = unlearn::take_rows(ds, *idx);
      const auto s = metrics::representation_similarity(ctx.original, r.model, rows.x);
      json h = detail::histogram_json(edges, metrics::histogram_counts(s.values, edges));
      h["set"] = set;
      h["excluded"] = s.excluded;
      j["similarity"].push_back(std::move(h));
    }
  }
  return j;
}

/// m(KE) over retain accuracies and m(FR) over forget/forgot accuracies, as
/// fractions; null when undefined (T < 2 or a set missing).
inline json continual_metrics(const json& phases, const data::LabeledDataset& ds) {
  const auto roles = unlearn::eval_roles(ds);
  std::vector<double> retain, forget, forgot;
  bool complete = true;
  for (std::size_t t = 0; t < phases.size(); ++t) {
    const auto& acc = phases[t]["accuracies"];
    if (acc.contains(roles.retain)) retain.push_back(acc[roles.retain].get<double>());
    else complete = false;
    if (t + 1 < phases.size()) {
      if (acc.contains(roles.forget)) forget.push_back(acc[roles.forget].get<double>());
      else complete = false;
    }
    if (t >= 1) {
      if (acc.contains(roles.forgot)) forgot.push_back(acc[roles.forgot].get<double>());
      else complete = false;
    }
  }
  json j;
  const auto ke = complete ? metrics::knowledge_erosion(retain) : std::nullopt;
  const auto fr = complete ? metrics::forgetting_reversal(forget, forgot) : std::nullopt;
  j["m_ke"] = detail::opt(ke);
  j["m_fr"] = detail::opt(fr);
  j["undefined"] = json::array();
  if (!ke) j["undefined"].push_back("m_ke");
  if (!fr) j["undefined"].push_back("m_fr");
  return j;
}

struct RunOutput {
  json record;  // result.json content
  std::vector<unlearn::StepLosses> steps;
  std::vector<double> seconds;
  bool failed = false;
};

inline RunOutput execute_run(const ExperimentConfig& c, const RepeatContext& ctx, const unlearn::AlgorithmConfig& a) {
  RunOutput out;
  json phases = json::array();
  std::string error;
  auto keep = [&](unlearn::PhaseResult&& r) {
    out.seconds.push_back(r.seconds);
    out.steps.insert(out.steps.end(), r.losses.begin(), r.losses.end());
    phases.push_back(phase_json(c, ctx, r));
  };
  try {
    if (a.kind == unlearn::Algorithm::retrain) {
      for (auto r : ctx.retrain_phases) keep(std::move(r));
    } else {
      unlearn::run_continual(ctx.dataset, ctx.plan, a, c.model, c.original, ctx.seed, ctx.original, keep);
    }
  } catch (const std::exception& e) {
    out.failed = true;
    error = e.what();
  }
  json& j = out.record;
  j["artifact_version"] = kArtifactVersion;
  j["algorithm"] = a.name;
  j["config"] = to_json(a);
  j["repeat"] = ctx.repeat;
  j["seed"] = ctx.seed;
  j["status"] = out.failed ? "failed" : "ok";
  j["error"] = out.failed ? json(error) : json(nullptr);
  j["phases_completed"] = phases.size();
  j["metrics"] = out.failed ? json{{"m_ke", nullptr}, {"m_fr", nullptr}, {"undefined", {"m_ke", "m_fr"}}}
                            : continual_metrics(phases, ctx.dataset);
  j["phases"] = std::move(phases);
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

struct Summary {
  std::optional<double> mean;
  std::optional<double> stddev;  // sample standard deviation, n >= 2
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  s.mean = m;
  if (v.size() >= 2) {
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline json to_json(const Summary& s) {
  return {{"mean", detail::opt(s.mean)}, {"std", detail::opt(s.stddev)}, {"n", s.n}};
}

namespace detail {

// Values of `get(run)` over the successful runs of one algorithm, skipping nulls.
template <class Get>
std::vector<double> collect(const json& runs, const std::string& algo, Get get) {
  std::vector<double> v;
  for (const auto& r : runs) {
    if (r["algorithm"] != algo || r["status"] != "ok") continue;
    const json x = get(r);
    if (x.is_number()) v.push_back(x.get<double>());
  }
  return v;
}

inline json phase_at(const json& run, std::size_t t) {
  return t < run["phases"].size() ? run["phases"][t] : json(nullptr);
}

inline json field(const json& j, std::initializer_list<const char*> path) {
  const json* cur = &j;
  for (const char* k : path) {
    if (!cur->is_object() || !cur->contains(k)) return nullptr;
    cur = &(*cur)[k];
  }
  return *cur;
}

}  // namespace detail

/// Mean and standard deviation over repeats of every scalar metric, per
/// algorithm, plus one flat record per (algorithm, repeat, phase).
inline json aggregate(const json& runs, const std::vector<std::string>& algorithms, std::size_t phases) {
  json agg = json::object();
  for (const auto& a : algorithms) {
    json& e = agg[a];
    e["m_ke"] = to_json(summarize(detail::collect(runs, a, [](const json& r) { return r["metrics"]["m_ke"]; })));
    e["m_fr"] = to_json(summarize(detail::collect(runs, a, [](const json& r) { return r["metrics"]["m_fr"]; })));
    e["phases"] = json::array();
    for (std::size_t t = 0; t < phases; ++t) {
      auto at = [t](std::initializer_list<const char*> path) {
        return [t, path](const json& r) { return detail::field(detail::phase_at(r, t), path); };
      };
      json p;
      p["phase"] = t + 1;
      p["tow"] = to_json(summarize(detail::collect(runs, a, at({"tow"}))));
      p["dbi"] = to_json(summarize(detail::collect(runs, a, at({"dbi", "value"}))));
      p["mia"] = to_json(summarize(detail::collect(runs, a, at({"mia", "score"}))));
      p["stabilized_retain_accuracy"] = to_json(summarize(detail::collect(runs, a, at({"stabilized_retain_accuracy"}))));
      std::set<std::string> sets;
      for (const auto& r : runs) {
        const json ph = detail::phase_at(r, t);
        if (r["algorithm"] == a && ph.is_object()) {
          for (const auto& [k, v] : ph["accuracies"].items()) sets.insert(k);
        }
      }
      p["accuracies"] = json::object();
      for (const auto& s : sets) {
        p["accuracies"][s] = to_json(summarize(detail::collect(runs, a, [t, &s](const json& r) {
          return detail::field(detail::phase_at(r, t), {"accuracies", s.c_str()});
        })));
      }
      e["phases"].push_back(std::move(p));
    }
  }
  return agg;
}

inline json phase_records(const json& runs) {
  json out = json::array();
  for (const auto& r : runs) {
    for (const auto& ph : r["phases"]) {
      out.push_back({{"algorithm", r["algorithm"]},
                     {"repeat", r["repeat"]},
                     {"phase", ph["phase"]},
                     {"accuracies", ph["accuracies"]},
                     {"tow", ph["tow"]},
                     {"dbi", detail::field(ph, {"dbi", "value"})},
                     {"mia", detail::field(ph, {"mia", "score"})}});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace detail {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string num(const json& v) { return v.is_number() ? num(v.get<double>()) : std::string(); }

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

inline void write_json(const std::filesystem::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline std::string steps_csv(const std::vector<unlearn::StepLosses>& steps) {
  std::string s = "step,ce,recon,kl,sep,forget_kl\n";
  for (const auto& x : steps) {
    s += std::to_string(x.step) + "," + num(x.ce) + "," + num(x.recon) + "," + num(x.kl) + "," + num(x.sep) + "," +
         num(x.forget_kl) + "\n";
  }
  return s;
}

inline std::string percent(const json& summary) {
  if (!summary["mean"].is_number()) return ",";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f,", 100.0 * summary["mean"].get<double>());
  std::string s = buf;
  if (summary["std"].is_number()) {
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * summary["std"].get<double>());
    s += buf;
  }
  return s;
}

inline std::string summary_csv(const json& agg, const std::vector<std::string>& algorithms) {
  std::string s = "algorithm,phase,set,mean_percent,std_percent\n";
  for (const auto& a : algorithms) {
    for (const auto& p : agg[a]["phases"]) {
      for (const auto& [set, summary] : p["accuracies"].items()) {
        s += a + "," + std::to_string(p["phase"].get<int>()) + "," + set + "," + percent(summary) + "\n";
      }
    }
    s += a + ",all,m_ke," + percent(agg[a]["m_ke"]) + "\n";
    s += a + ",all,m_fr," + percent(agg[a]["m_fr"]) + "\n";
  }
  return s;
}

inline std::string run_dir_name(const std::string& algo, int repeat) { return algo + "_r" + std::to_string(repeat); }

}  // namespace detail

/// Output directory for `c`: relative paths resolve against `root`, else
/// against $SAFER_LAB_OUTPUT_ROOT, else the working directory.
inline std::filesystem::path resolve_output_dir(const ExperimentConfig& c,
                                                const std::optional<std::filesystem::path>& root = std::nullopt) {
  std::filesystem::path out(c.output_dir);
  if (out.is_absolute()) return out;
  if (root) return *root / out;
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) return std::filesystem::path(env) / out;
  return out;
}

// ---------------------------------------------------------------------------
// Plot data

/// Writes one CSV per figure family into `dir` and returns the paths in
/// writing order. Output depends only on `log`.
inline std::vector<std::filesystem::path> emit_plot_data(const json& log, const std::filesystem::path& dir) {
  using detail::num;
  std::vector<std::string> algorithms;
  for (const auto& a : log["config"]["algorithms"]) algorithms.push_back(a["name"].get<std::string>());
  const json& agg = log["aggregate"];
  std::vector<std::filesystem::path> written;
  auto emit = [&](const char* name, const std::string& text) {
    detail::write_text(dir / name, text);
    written.push_back(dir / name);
  };

  auto per_phase = [&](const char* metric) {
    std::string s = "algorithm,phase,mean,std,n\n";
    for (const auto& a : algorithms) {
      for (const auto& p : agg[a]["phases"]) {
        const json& m = p[metric];
        s += a + "," + std::to_string(p["phase"].get<int>()) + "," + num(m["mean"]) + "," + num(m["std"]) + "," +
             std::to_string(m["n"].get<std::size_t>()) + "\n";
      }
    }
    return s;
  };
  emit("tow.csv", per_phase("tow"));

  std::string bars = "algorithm,m_ke_mean,m_ke_std,m_fr_mean,m_fr_std\n";
  for (const auto& a : algorithms) {
    bars += a + "," + num(agg[a]["m_ke"]["mean"]) + "," + num(agg[a]["m_ke"]["std"]) + "," +
            num(agg[a]["m_fr"]["mean"]) + "," + num(agg[a]["m_fr"]["std"]) + "\n";
  }
  emit("ke_fr.csv", bars);
  emit("mia.csv", per_phase("mia"));
  emit("dbi.csv", per_phase("dbi"));

  auto histograms = [&](const char* key) {
    std::string s = "algorithm,repeat,phase,set,bin_lo,bin_hi,count\n";
    for (const auto& r : log["runs"]) {
      for (const auto& ph : r["phases"]) {
        for (const auto& h : ph[key]) {
          const auto& edges = h["edges"];
          const auto& counts = h["counts"];
          for (std::size_t b = 0; b < counts.size(); ++b) {
            s += r["algorithm"].get<std::string>() + "," + std::to_string(r["repeat"].get<int>()) + "," +
                 std::to_string(ph["phase"].get<int>()) + "," + h["set"].get<std::string>() + "," + num(edges[b]) +
                 "," + num(edges[b + 1]) + "," + std::to_string(counts[b].get<long>()) + "\n";
          }
        }
      }
    }
    return s;
  };
  emit("margins.csv", histograms("margins"));
  emit("similarity.csv", histograms("similarity"));
  return written;
}

inline json load_log(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  return json::parse(in);
}

// ---------------------------------------------------------------------------
// Run

struct RunOptions {
  std::optional<std::filesystem::path> output_root;
  bool quiet = true;
};

struct ExperimentResult {
  ExitCode status = exit_ok;
  std::filesystem::path output_dir;
  json log;
  std::size_t failed_runs = 0;
};

namespace detail {

inline RepeatContext prepare_repeat(const ExperimentConfig& c, int repeat) {
  RepeatContext ctx;
  ctx.repeat = repeat;
  ctx.seed = run_seed(c, repeat);
  ctx.dataset = make_dataset(c, repeat);
  ctx.plan = data::plan_phases(ctx.dataset, schedule_for(c, ctx.seed));
  ctx.original = unlearn::train_original(ctx.dataset, c.model, c.original, ctx.seed);
  unlearn::AlgorithmConfig retrain;
  retrain.name = "retrain";
  retrain.kind = unlearn::Algorithm::retrain;
  ctx.retrain_phases = unlearn::run_continual(ctx.dataset, ctx.plan, retrain, c.model, c.original, ctx.seed, ctx.original);
  for (std::size_t t = 1; t <= ctx.plan.phases(); ++t) {
    ctx.original_accuracy.push_back(unlearn::evaluate(ctx.original, ctx.dataset, ctx.plan, t));
    ctx.retrain_accuracy.push_back(ctx.retrain_phases[t - 1].accuracies);
  }
  return ctx;
}

struct RepeatOutput {
  json reference;
  std::vector<RunOutput> runs;  // config order
};

inline RepeatOutput run_repeat(const ExperimentConfig& c, int repeat) {
  RepeatOutput out;
  out.reference["repeat"] = repeat;
  out.reference["seed"] = run_seed(c, repeat);
  try {
    const RepeatContext ctx = prepare_repeat(c, repeat);
    out.reference["schedule"] = ctx.plan.forget_units;
    json orig = json::array(), ret = json::array();
    for (std::size_t t = 0; t < ctx.plan.phases(); ++t) {
      orig.push_back(accuracy_json(ctx.original_accuracy[t]));
      ret.push_back(accuracy_json(ctx.retrain_accuracy[t]));
    }
    out.reference["original_accuracies"] = orig;
    out.reference["retrain_accuracies"] = ret;
    out.reference["status"] = "ok";
    for (const auto& a : c.algorithms) out.runs.push_back(execute_run(c, ctx, a));
  } catch (const std::exception& e) {
    out.reference["status"] = "failed";
    out.reference["error"] = e.what();
    for (const auto& a : c.algorithms) {
      RunOutput r;
      r.failed = true;
      r.record = {{"artifact_version", kArtifactVersion},
                  {"algorithm", a.name},
                  {"config", to_json(a)},
                  {"repeat", repeat},
                  {"seed", run_seed(c, repeat)},
                  {"status", "failed"},
                  {"error", std::string("repeat setup failed: ") + e.what()},
                  {"phases_completed", 0},
                  {"metrics", {{"m_ke", nullptr}, {"m_fr", nullptr}, {"undefined", {"m_ke", "m_fr"}}}},
                  {"phases", json::array()}};
      out.runs.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace detail

/// Executes every (algorithm, repeat) run of `c` and writes all artifacts.
/// Repeats are spread over `c.workers` threads; files are written afterwards
/// in a fixed order, so the outputs do not depend on scheduling.
inline ExperimentResult run_experiment(const ExperimentConfig& c, const RunOptions& opts = {}) {
  ExperimentResult res;
  res.output_dir = resolve_output_dir(c, opts.output_root);

  std::vector<detail::RepeatOutput> repeats(static_cast<std::size_t>(c.repeats));
  std::atomic<int> next{0};
  std::mutex log_mu;
  auto worker = [&] {
    for (int r = next++; r < c.repeats; r = next++) {
      repeats[static_cast<std::size_t>(r)] = detail::run_repeat(c, r);
      if (!opts.quiet) {
        std::lock_guard lock(log_mu);
        std::fprintf(stderr, "repeat %d done\n", r);
      }
    }
  };
  const int n_workers = std::max(1, std::min(c.workers, c.repeats));
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  json runs = json::array(), refs = json::array(), timing = json::array();
  for (auto& rep : repeats) {
    refs.push_back(rep.reference);
    for (auto& run : rep.runs) {
      const std::string dir = detail::run_dir_name(run.record["algorithm"].get<std::string>(), run.record["repeat"].get<int>());
      detail::write_json(res.output_dir / "runs" / dir / "result.json", run.record);
      detail::write_text(res.output_dir / "runs" / dir / "steps.csv", detail::steps_csv(run.steps));
      timing.push_back({{"run", dir}, {"phase_seconds", run.seconds}});
      if (run.failed) ++res.failed_runs;
      runs.push_back(std::move(run.record));
    }
  }

  std::vector<std::string> names;
  for (const auto& a : c.algorithms) names.push_back(a.name);
  json& log = res.log;
  log["artifact_version"] = kArtifactVersion;
  log["config"] = to_json(c);
  log["references"] = std::move(refs);
  log["runs"] = std::move(runs);
  log["aggregate"] = aggregate(log["runs"], names, c.schedule.count());
  log["phase_records"] = phase_records(log["runs"]);
  log["failed_runs"] = res.failed_runs;

  detail::write_json(res.output_dir / "aggregate.json", log);
  detail::write_text(res.output_dir / "summary.csv", detail::summary_csv(log["aggregate"], names));
  detail::write_json(res.output_dir / "timing.json", timing);
  emit_plot_data(log, res.output_dir / "plots");
  res.status = res.failed_runs > 0 ? exit_runtime_failure : exit_ok;
  return res;
}

}  // namespace safer::experiment
