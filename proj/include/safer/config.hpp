#pragma once

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "safer/data.hpp"
#include "safer/errors.hpp"
#include "safer/model.hpp"
#include "safer/unlearn.hpp"

namespace safer::experiment {

inline constexpr std::string_view kSchema = "safer-lab/1";

/// One validation finding, anchored at a 1-based line and column of the
/// config file (0 when no location applies).
struct Diagnostic {
  int line = 0;
  int column = 0;
  std::string path;  // dotted key path, e.g. algorithms[1].lr
  std::string message;

  std::string str(std::string_view source = "config") const {
    std::ostringstream os;
    os << source << ':' << line << ':' << column << ": " << path << ": " << message;
    return os.str();
  }
};

enum class DatasetKind { blobs, entities };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::blobs;
  data::BlobSpec blobs;
  data::EntitySpec entities;

  int units() const { return kind == DatasetKind::blobs ? blobs.classes : entities.n_entities; }
  int classes() const { return kind == DatasetKind::blobs ? blobs.classes : entities.attributes; }
  int dim() const { return kind == DatasetKind::blobs ? blobs.dim : entities.dim; }
  std::string_view unit_name() const { return kind == DatasetKind::blobs ? "class" : "entity"; }
};

/// Either explicit forget units per phase, or `phases` x `units_per_phase`
/// units drawn per repeat.
struct ScheduleConfig {
  std::vector<data::Units> phases;
  bool drawn = false;
  int drawn_phases = 0;
  int units_per_phase = 0;

  std::size_t count() const { return drawn ? static_cast<std::size_t>(drawn_phases) : phases.size(); }
};

struct MetricToggles {
  bool tow = true;
  bool dbi = true;
  bool mia = true;
  bool margins = true;
  bool similarity = true;
};

struct HistogramConfig {
  std::size_t margin_bins = 40;
  double margin_lo = -20.0;
  double margin_hi = 20.0;
  std::size_t similarity_bins = 20;
};

struct ExperimentConfig {
  std::string schema{kSchema};
  DatasetConfig dataset;
  model::ModelConfig model;
  unlearn::TrainConfig original;
  ScheduleConfig schedule;
  std::vector<unlearn::AlgorithmConfig> algorithms;
  int repeats = 3;
  std::uint64_t seed = 0;
  std::string output_dir = "results";
  MetricToggles metrics;
  HistogramConfig histograms;
  int workers = 1;
};

struct ParseResult {
  std::optional<ExperimentConfig> config;
  std::vector<Diagnostic> diagnostics;

  bool ok() const { return config.has_value() && diagnostics.empty(); }
};

namespace detail {

class Reader {
 public:
  std::vector<Diagnostic> diags;

  void error(const YAML::Node& at, const std::string& path, const std::string& message) {
    const auto mark = at.Mark();
    const bool known = mark.line >= 0;
    diags.push_back({known ? mark.line + 1 : 0, known ? mark.column + 1 : 0, path, message});
  }

  void error_at(int line, int column, const std::string& path, const std::string& message) {
    diags.push_back({line, column, path, message});
  }

  // Flags keys outside `allowed`.
  void keys(const YAML::Node& map, const std::string& path, std::initializer_list<std::string_view> allowed) {
    if (!map.IsMap()) return;
    for (const auto& kv : map) {
      const auto key = kv.first.as<std::string>();
      bool found = false;
      for (auto a : allowed) found = found || a == key;
      if (!found) error(kv.first, join(path, key), "unknown key");
    }
  }

  bool map(const YAML::Node& n, const std::string& path) {
    if (n.IsMap()) return true;
    error(n, path, "expected a mapping");
    return false;
  }

  template <class T>
  bool scalar(const YAML::Node& parent, std::string_view key, const std::string& path, T& out) {
    const YAML::Node n = parent[std::string(key)];
    if (!n) return false;
    const std::string p = join(path, key);
    if (!n.IsScalar()) {
      error(n, p, "expected a scalar");
      return false;
    }
    try {
      out = n.as<T>();
      return true;
    } catch (const YAML::Exception&) {
      error(n, p, "cannot read '" + n.Scalar() + "' as " + type_name<T>());
      return false;
    }
  }

  bool int_list(const YAML::Node& parent, std::string_view key, const std::string& path, std::vector<int>& out) {
    const YAML::Node n = parent[std::string(key)];
    if (!n) return false;
    const std::string p = join(path, key);
    if (!n.IsSequence()) {
      error(n, p, "expected a list of integers");
      return false;
    }
    std::vector<int> v;
    for (std::size_t i = 0; i < n.size(); ++i) {
      try {
        v.push_back(n[i].as<int>());
      } catch (const YAML::Exception&) {
        error(n[i], p + "[" + std::to_string(i) + "]", "expected an integer");
        return false;
      }
    }
    out = std::move(v);
    return true;
  }

  // Range check on an already-read value; the node supplies the location.
  void check(bool ok, const YAML::Node& parent, std::string_view key, const std::string& path, const std::string& msg) {
    if (ok) return;
    const YAML::Node n = parent[std::string(key)];
    error(n ? n : parent, join(path, key), msg);
  }

  static std::string join(const std::string& path, std::string_view key) {
    return path.empty() ? std::string(key) : path + "." + std::string(key);
  }

 private:
  template <class T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) return "a boolean";
    else if constexpr (std::is_floating_point_v<T>) return "a number";
    else if constexpr (std::is_integral_v<T>) return "an integer";
    else return "a string";
  }
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline void read_blobs(Reader& r, const YAML::Node& n, const std::string& p, data::BlobSpec& b) {
  r.scalar(n, "classes", p, b.classes);
  r.scalar(n, "dim", p, b.dim);
  r.scalar(n, "n_per_class", p, b.n_per_class);
  r.scalar(n, "center_spread", p, b.center_spread);
  r.scalar(n, "noise_sigma", p, b.noise_sigma);
  r.scalar(n, "test_fraction", p, b.test_fraction);
  r.check(b.classes >= 3, n, "classes", p, "must be >= 3, got " + std::to_string(b.classes));
  r.check(b.dim >= 1, n, "dim", p, "must be >= 1, got " + std::to_string(b.dim));
  r.check(b.n_per_class >= 20, n, "n_per_class", p, "must be >= 20, got " + std::to_string(b.n_per_class));
  r.check(b.center_spread >= 0.0, n, "center_spread", p, "must be >= 0, got " + fmt(b.center_spread));
  r.check(b.noise_sigma > 0.0, n, "noise_sigma", p, "must be > 0, got " + fmt(b.noise_sigma));
  r.check(b.test_fraction > 0.0 && b.test_fraction < 1.0, n, "test_fraction", p,
          "must lie in (0, 1), got " + fmt(b.test_fraction));
}

inline void read_entities(Reader& r, const YAML::Node& n, const std::string& p, data::EntitySpec& e) {
  r.scalar(n, "n_entities", p, e.n_entities);
  r.scalar(n, "samples_per_entity", p, e.samples_per_entity);
  r.scalar(n, "attributes", p, e.attributes);
  r.scalar(n, "dim", p, e.dim);
  r.scalar(n, "prototype_scale", p, e.prototype_scale);
  r.scalar(n, "noise_sigma", p, e.noise_sigma);
  r.scalar(n, "test_fraction", p, e.test_fraction);
  r.check(e.n_entities >= 40, n, "n_entities", p, "must be >= 40, got " + std::to_string(e.n_entities));
  r.check(e.samples_per_entity >= 1, n, "samples_per_entity", p, "must be >= 1");
  r.check(e.attributes >= 2, n, "attributes", p, "must be >= 2, got " + std::to_string(e.attributes));
  r.check(e.attributes <= e.n_entities, n, "attributes", p, "must not exceed n_entities");
  r.check(e.dim >= 1, n, "dim", p, "must be >= 1, got " + std::to_string(e.dim));
  r.check(e.prototype_scale > 0.0, n, "prototype_scale", p, "must be > 0, got " + fmt(e.prototype_scale));
  r.check(e.noise_sigma > 0.0, n, "noise_sigma", p, "must be > 0, got " + fmt(e.noise_sigma));
  r.check(e.test_fraction > 0.0 && e.test_fraction < 1.0, n, "test_fraction", p,
          "must lie in (0, 1), got " + fmt(e.test_fraction));
}

inline void read_dataset(Reader& r, const YAML::Node& n, DatasetConfig& d) {
  const std::string p = "dataset";
  if (!r.map(n, p)) return;
  std::string kind = "blobs";
  r.scalar(n, "kind", p, kind);
  std::uint64_t seed = 0;
  r.scalar(n, "seed", p, seed);
  if (kind == "blobs") {
    d.kind = DatasetKind::blobs;
    r.keys(n, p, {"kind", "seed", "classes", "dim", "n_per_class", "center_spread", "noise_sigma", "test_fraction"});
    read_blobs(r, n, p, d.blobs);
  } else if (kind == "entities") {
    d.kind = DatasetKind::entities;
    r.keys(n, p,
           {"kind", "seed", "n_entities", "samples_per_entity", "attributes", "dim", "prototype_scale", "noise_sigma",
            "test_fraction"});
    read_entities(r, n, p, d.entities);
  } else {
    r.error(n["kind"], "dataset.kind", "must be 'blobs' or 'entities', got '" + kind + "'");
  }
  d.blobs.seed = seed;
  d.entities.seed = seed;
}

inline void read_model(Reader& r, const YAML::Node& n, model::ModelConfig& m, const DatasetConfig& d) {
  const std::string p = "model";
  m.classes = d.classes();
  m.layer_sizes.front() = d.dim();
  if (!n) return;
  if (!r.map(n, p)) return;
  r.keys(n, p, {"hidden", "latent_dim", "encoder_hidden", "decoder_hidden", "activation", "logvar_bound"});
  std::vector<int> hidden(m.layer_sizes.begin() + 1, m.layer_sizes.end());
  r.int_list(n, "hidden", p, hidden);
  r.check(!hidden.empty(), n, "hidden", p, "needs at least one layer");
  for (int w : hidden) r.check(w > 0, n, "hidden", p, "widths must be positive");
  m.layer_sizes.assign(1, d.dim());
  m.layer_sizes.insert(m.layer_sizes.end(), hidden.begin(), hidden.end());
  r.scalar(n, "latent_dim", p, m.latent_dim);
  r.check(m.latent_dim >= 1, n, "latent_dim", p, "must be >= 1, got " + std::to_string(m.latent_dim));
  r.int_list(n, "encoder_hidden", p, m.encoder_hidden);
  for (int w : m.encoder_hidden) r.check(w > 0, n, "encoder_hidden", p, "widths must be positive");
  r.int_list(n, "decoder_hidden", p, m.decoder_hidden);
  for (int w : m.decoder_hidden) r.check(w > 0, n, "decoder_hidden", p, "widths must be positive");
  std::string act = m.activation == model::Activation::tanh ? "tanh" : "relu";
  r.scalar(n, "activation", p, act);
  if (act == "tanh") m.activation = model::Activation::tanh;
  else if (act == "relu") m.activation = model::Activation::relu;
  else r.error(n["activation"], "model.activation", "must be 'tanh' or 'relu', got '" + act + "'");
  r.scalar(n, "logvar_bound", p, m.logvar_bound);
  r.check(m.logvar_bound > 0.0, n, "logvar_bound", p, "must be > 0, got " + fmt(m.logvar_bound));
}

inline bool read_optimizer(Reader& r, const YAML::Node& n, const std::string& p, unlearn::OptimizerKind& kind) {
  std::string s = kind == unlearn::OptimizerKind::sgd ? "sgd" : "momentum";
  if (!r.scalar(n, "optimizer", p, s)) return true;
  if (s == "sgd") kind = unlearn::OptimizerKind::sgd;
  else if (s == "momentum") kind = unlearn::OptimizerKind::momentum;
  else {
    r.error(n["optimizer"], p + ".optimizer", "must be 'sgd' or 'momentum', got '" + s + "'");
    return false;
  }
  return true;
}

inline void read_train(Reader& r, const YAML::Node& n, unlearn::TrainConfig& t) {
  const std::string p = "original";
  if (!n) return;
  if (!r.map(n, p)) return;
  r.keys(n, p, {"epochs", "lr", "batch_size", "optimizer", "momentum"});
  r.scalar(n, "epochs", p, t.epochs);
  r.scalar(n, "lr", p, t.lr);
  long batch = static_cast<long>(t.batch_size);
  r.scalar(n, "batch_size", p, batch);
  read_optimizer(r, n, p, t.optimizer);
  r.scalar(n, "momentum", p, t.momentum);
  r.check(t.epochs >= 1, n, "epochs", p, "must be >= 1, got " + std::to_string(t.epochs));
  r.check(t.lr > 0.0, n, "lr", p, "learning rate must be > 0, got " + fmt(t.lr));
  r.check(batch >= 1, n, "batch_size", p, "must be >= 1, got " + std::to_string(batch));
  r.check(t.momentum >= 0.0 && t.momentum < 1.0, n, "momentum", p, "must lie in [0, 1), got " + fmt(t.momentum));
  t.batch_size = static_cast<std::size_t>(std::max(1L, batch));
}

inline void read_algorithm(Reader& r, const YAML::Node& n, const std::string& p, unlearn::AlgorithmConfig& a) {
  if (!r.map(n, p)) return;
  r.keys(n, p,
         {"name", "kind", "epochs", "lr", "batch_size", "lambda", "beta", "switches", "optimizer", "momentum",
          "ema_mode", "ema_decay"});
  if (!r.scalar(n, "name", p, a.name)) r.error(n, p + ".name", "missing");
  std::string kind = a.name;
  r.scalar(n, "kind", p, kind);
  if (auto k = unlearn::parse_algorithm(kind)) {
    a.kind = *k;
  } else {
    r.error(n["kind"] ? n["kind"] : n["name"], p + (n["kind"] ? ".kind" : ".name"),
            "unknown algorithm '" + kind + "' (expected retrain, finetune, neggrad or safer)");
  }
  r.scalar(n, "epochs", p, a.epochs);
  r.scalar(n, "lr", p, a.lr);
  long batch = static_cast<long>(a.batch_size);
  r.scalar(n, "batch_size", p, batch);
  r.scalar(n, "lambda", p, a.lambda);
  r.scalar(n, "beta", p, a.beta);
  if (const YAML::Node s = n["switches"]) {
    const std::string sp = p + ".switches";
    if (r.map(s, sp)) {
      r.keys(s, sp, {"um", "ic", "cd"});
      r.scalar(s, "um", sp, a.switches.um);
      r.scalar(s, "ic", sp, a.switches.ic);
      r.scalar(s, "cd", sp, a.switches.cd);
    }
  }
  read_optimizer(r, n, p, a.optimizer);
  r.scalar(n, "momentum", p, a.momentum);
  std::string mode = a.ema_mode == losses::EmaMode::global ? "global" : "per_class";
  r.scalar(n, "ema_mode", p, mode);
  if (mode == "global") a.ema_mode = losses::EmaMode::global;
  else if (mode == "per_class") a.ema_mode = losses::EmaMode::per_class;
  else r.error(n["ema_mode"], p + ".ema_mode", "must be 'global' or 'per_class', got '" + mode + "'");
  r.scalar(n, "ema_decay", p, a.ema_decay);

  r.check(a.epochs >= 1, n, "epochs", p, "must be >= 1, got " + std::to_string(a.epochs));
  r.check(a.lr > 0.0, n, "lr", p, "learning rate must be > 0, got " + fmt(a.lr));
  r.check(batch >= 1, n, "batch_size", p, "must be >= 1, got " + std::to_string(batch));
  r.check(a.lambda >= 0.0, n, "lambda", p, "must be >= 0, got " + fmt(a.lambda));
  r.check(a.beta >= 0.0, n, "beta", p, "must be >= 0, got " + fmt(a.beta));
  r.check(a.momentum >= 0.0 && a.momentum < 1.0, n, "momentum", p, "must lie in [0, 1), got " + fmt(a.momentum));
  r.check(a.ema_decay > 0.0 && a.ema_decay < 1.0, n, "ema_decay", p, "must lie in (0, 1), got " + fmt(a.ema_decay));
  a.batch_size = static_cast<std::size_t>(std::max(1L, batch));
}

inline void read_schedule(Reader& r, const YAML::Node& n, ScheduleConfig& s, const DatasetConfig& d) {
  const std::string p = "schedule";
  if (!n) {
    r.error_at(1, 1, p, "missing");
    return;
  }
  if (!r.map(n, p)) return;
  r.keys(n, p, {"phases", "units_per_phase"});
  const YAML::Node phases = n["phases"];
  if (!phases) {
    r.error(n, p + ".phases", "missing");
    return;
  }
  const int units = d.units();
  const std::string unit = std::string(d.unit_name());

  if (phases.IsScalar()) {
    s.drawn = true;
    r.scalar(n, "phases", p, s.drawn_phases);
    if (!r.scalar(n, "units_per_phase", p, s.units_per_phase)) s.units_per_phase = 1;
    r.check(s.drawn_phases >= 1, n, "phases", p, "must be >= 1, got " + std::to_string(s.drawn_phases));
    r.check(s.units_per_phase >= 1, n, "units_per_phase", p, "must be >= 1");
    r.check(static_cast<long>(s.drawn_phases) * s.units_per_phase < units, n, "phases", p,
            "phases x units_per_phase must leave at least one " + unit + " to retain");
    return;
  }
  if (!phases.IsSequence()) {
    r.error(phases, p + ".phases", "expected a list of phases or a phase count");
    return;
  }
  if (n["units_per_phase"]) r.error(n["units_per_phase"], p + ".units_per_phase", "only valid with a phase count");
  std::map<int, std::size_t> seen;
  for (std::size_t t = 0; t < phases.size(); ++t) {
    const YAML::Node ph = phases[t];
    const std::string pp = p + ".phases[" + std::to_string(t) + "]";
    if (!ph.IsSequence()) {
      r.error(ph, pp, "expected a list of " + unit + " ids");
      continue;
    }
    data::Units us;
    for (std::size_t i = 0; i < ph.size(); ++i) {
      int u = 0;
      try {
        u = ph[i].as<int>();
      } catch (const YAML::Exception&) {
        r.error(ph[i], pp + "[" + std::to_string(i) + "]", "expected an integer");
        continue;
      }
      const std::string ip = pp + "[" + std::to_string(i) + "]";
      if (u < 0 || u >= units) {
        r.error(ph[i], ip, "unknown " + unit + " " + std::to_string(u) + " (dataset has " + std::to_string(units) + ")");
        continue;
      }
      auto [it, fresh] = seen.emplace(u, t);
      if (!fresh) {
        r.error(ph[i], ip,
                unit + " " + std::to_string(u) + " repeated in phases " + std::to_string(it->second + 1) + " and " +
                    std::to_string(t + 1));
        continue;
      }
      us.push_back(u);
    }
    s.phases.push_back(std::move(us));
  }
  if (s.phases.empty()) r.error(phases, p + ".phases", "needs at least one phase");
  if (static_cast<int>(seen.size()) >= units) r.error(phases, p + ".phases", "schedule leaves no " + unit + " to retain");
}

inline void read_histograms(Reader& r, const YAML::Node& n, HistogramConfig& h) {
  const std::string p = "histograms";
  if (!n) return;
  if (!r.map(n, p)) return;
  r.keys(n, p, {"margin_bins", "margin_range", "similarity_bins"});
  long mb = static_cast<long>(h.margin_bins), sb = static_cast<long>(h.similarity_bins);
  r.scalar(n, "margin_bins", p, mb);
  r.scalar(n, "similarity_bins", p, sb);
  r.check(mb >= 1, n, "margin_bins", p, "must be >= 1");
  r.check(sb >= 1, n, "similarity_bins", p, "must be >= 1");
  if (const YAML::Node range = n["margin_range"]) {
    if (!range.IsSequence() || range.size() != 2) {
      r.error(range, p + ".margin_range", "expected [lo, hi]");
    } else {
      try {
        h.margin_lo = range[0].as<double>();
        h.margin_hi = range[1].as<double>();
      } catch (const YAML::Exception&) {
        r.error(range, p + ".margin_range", "expected two numbers");
      }
      r.check(h.margin_hi > h.margin_lo, n, "margin_range", p, "needs lo < hi");
    }
  }
  h.margin_bins = static_cast<std::size_t>(std::max(1L, mb));
  h.similarity_bins = static_cast<std::size_t>(std::max(1L, sb));
}

}  // namespace detail

/// Parses and fully validates a config. Every problem found is reported;
/// `config` is set only when there are none.
inline ParseResult parse_config(const std::string& text) {
  ParseResult out;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    out.diagnostics.push_back({e.mark.line + 1, e.mark.column + 1, "", e.msg});
    return out;
  }
  detail::Reader r;
  if (!root.IsMap()) {
    r.error_at(1, 1, "", "config must be a mapping");
    out.diagnostics = std::move(r.diags);
    return out;
  }
  ExperimentConfig c;
  r.keys(root, "",
         {"schema", "dataset", "model", "original", "schedule", "algorithms", "repeats", "seed", "output_dir", "metrics",
          "histograms", "workers"});

  if (!r.scalar(root, "schema", "", c.schema)) {
    r.error_at(1, 1, "schema", "missing; expected '" + std::string(kSchema) + "'");
  } else if (c.schema != kSchema) {
    r.error(root["schema"], "schema", "unsupported schema '" + c.schema + "', expected '" + std::string(kSchema) + "'");
  }

  if (root["dataset"]) detail::read_dataset(r, root["dataset"], c.dataset);
  else r.error_at(1, 1, "dataset", "missing");
  detail::read_model(r, root["model"], c.model, c.dataset);
  detail::read_train(r, root["original"], c.original);
  detail::read_schedule(r, root["schedule"], c.schedule, c.dataset);

  const YAML::Node algos = root["algorithms"];
  if (!algos) {
    r.error_at(1, 1, "algorithms", "missing");
  } else if (!algos.IsSequence() || algos.size() == 0) {
    r.error(algos, "algorithms", "expected a non-empty list");
  } else {
    std::map<std::string, std::size_t> names;
    for (std::size_t i = 0; i < algos.size(); ++i) {
      const std::string p = "algorithms[" + std::to_string(i) + "]";
      unlearn::AlgorithmConfig a;
      detail::read_algorithm(r, algos[i], p, a);
      if (auto [it, fresh] = names.emplace(a.name, i); !fresh) {
        r.error(algos[i]["name"], p + ".name",
                "duplicate algorithm name '" + a.name + "' (first at algorithms[" + std::to_string(it->second) + "])");
      }
      c.algorithms.push_back(std::move(a));
    }
  }

  r.scalar(root, "repeats", "", c.repeats);
  r.check(c.repeats >= 1, root, "repeats", "", "must be >= 1, got " + std::to_string(c.repeats));
  r.scalar(root, "seed", "", c.seed);
  r.scalar(root, "output_dir", "", c.output_dir);
  r.check(!c.output_dir.empty(), root, "output_dir", "", "must not be empty");
  r.scalar(root, "workers", "", c.workers);
  r.check(c.workers >= 1, root, "workers", "", "must be >= 1, got " + std::to_string(c.workers));

  if (const YAML::Node m = root["metrics"]) {
    if (r.map(m, "metrics")) {
      r.keys(m, "metrics", {"tow", "dbi", "mia", "margins", "similarity"});
      r.scalar(m, "tow", "metrics", c.metrics.tow);
      r.scalar(m, "dbi", "metrics", c.metrics.dbi);
      r.scalar(m, "mia", "metrics", c.metrics.mia);
      r.scalar(m, "margins", "metrics", c.metrics.margins);
      r.scalar(m, "similarity", "metrics", c.metrics.similarity);
    }
  }
  detail::read_histograms(r, root["histograms"], c.histograms);

  out.diagnostics = std::move(r.diags);
  if (out.diagnostics.empty()) out.config = std::move(c);
  return out;
}

inline ParseResult load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    ParseResult out;
    out.diagnostics.push_back({0, 0, "", "cannot open " + path.string()});
    return out;
  }
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

/// Forget schedule of one repeat. Drawn schedules use the repeat's own
/// "schedule" stream; explicit ones are returned unchanged.
inline std::vector<data::Units> schedule_for(const ExperimentConfig& c, std::uint64_t run_seed) {
  if (!c.schedule.drawn) return c.schedule.phases;
  std::vector<int> units(static_cast<std::size_t>(c.dataset.units()));
  for (std::size_t i = 0; i < units.size(); ++i) units[i] = static_cast<int>(i);
  Rng rng(run_seed, "schedule");
  rng.shuffle(std::span(units));
  std::vector<data::Units> out;
  std::size_t k = 0;
  for (int t = 0; t < c.schedule.drawn_phases; ++t) {
    data::Units us(units.begin() + static_cast<long>(k), units.begin() + static_cast<long>(k + c.schedule.units_per_phase));
    std::sort(us.begin(), us.end());
    k += static_cast<std::size_t>(c.schedule.units_per_phase);
    out.push_back(std::move(us));
  }
  return out;
}

}  // namespace safer::experiment
