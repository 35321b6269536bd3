#pragma once

// Unlearning algorithms and the continual-unlearning orchestrator.
//
// Algorithms only ever see a PhaseAccess: the current forget rows and the
// current retain rows. Rows forgotten in earlier phases are reachable by the
// evaluation code alone.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "safer/data.hpp"
#include "safer/diff.hpp"
#include "safer/errors.hpp"
#include "safer/losses.hpp"
#include "safer/metrics.hpp"
#include "safer/model.hpp"
#include "safer/rng.hpp"
#include "safer/tensor.hpp"

namespace safer::unlearn {

using diff::Graph;
using diff::NodeId;
using model::Model;

// ---------------------------------------------------------------------------
// Configuration

enum class Algorithm { retrain, finetune, neggrad, safer };

inline std::string_view algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::retrain: return "retrain";
    case Algorithm::finetune: return "finetune";
    case Algorithm::neggrad: return "neggrad";
    case Algorithm::safer: return "safer";
  }
  return "?";
}

inline std::optional<Algorithm> parse_algorithm(std::string_view s) {
  for (auto a : {Algorithm::retrain, Algorithm::finetune, Algorithm::neggrad, Algorithm::safer}) {
    if (algorithm_name(a) == s) return a;
  }
  return std::nullopt;
}

enum class OptimizerKind { sgd, momentum };

/// SAFER ablation switches: UM = forget margin objective, IC = compactness
/// (classification, reconstruction and latent KL terms), CD = separation term.
struct Switches {
  bool um = true;
  bool ic = true;
  bool cd = true;
};

struct AlgorithmConfig {
  std::string name = "safer";
  Algorithm kind = Algorithm::safer;
  int epochs = 10;
  double lr = 0.05;
  std::size_t batch_size = 64;
  double lambda = 0.1;
  double beta = 1.0;
  Switches switches;
  OptimizerKind optimizer = OptimizerKind::momentum;
  double momentum = 0.9;
  losses::EmaMode ema_mode = losses::EmaMode::global;
  double ema_decay = 0.99;
};

/// Settings for training from scratch (original model and Retrain).
struct TrainConfig {
  int epochs = 20;
  double lr = 0.05;
  std::size_t batch_size = 64;
  OptimizerKind optimizer = OptimizerKind::momentum;
  double momentum = 0.9;
};

inline void validate(const AlgorithmConfig& c) {
  if (c.epochs < 1) throw ConfigError(c.name + ": epochs must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError(c.name + ": learning rate must be > 0");
  if (c.batch_size < 1) throw ConfigError(c.name + ": batch_size must be >= 1");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError(c.name + ": momentum must lie in [0, 1)");
  if (!(c.lambda >= 0.0)) throw ConfigError(c.name + ": lambda must be >= 0");
  if (!(c.beta >= 0.0)) throw ConfigError(c.name + ": beta must be >= 0");
  if (!(c.ema_decay > 0.0 && c.ema_decay < 1.0)) throw ConfigError(c.name + ": ema_decay must lie in (0, 1)");
}

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("training: epochs must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError("training: learning rate must be > 0");
  if (c.batch_size < 1) throw ConfigError("training: batch_size must be >= 1");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ConfigError("training: momentum must lie in [0, 1)");
}

// ---------------------------------------------------------------------------
// Optimizer

/// Gradient descent with optional heavy-ball momentum:
///   v <- m v + g;  p <- p - lr v
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double momentum) : kind_(kind), lr_(lr), momentum_(momentum) {}

  /// `direction` = -1 ascends instead of descending.
  void step(Model& m, const diff::Gradients& grads, const model::ModelIds& ids, double direction = 1.0) {
    auto params = m.parameters();
    if (velocity_.empty()) {
      for (const Tensor* p : params) velocity_.emplace_back(p->shape(), 0.0);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (!grads.has(ids.all[k])) continue;
      const Tensor& g = grads.at(ids.all[k]);
      Tensor& p = *params[k];
      Tensor& v = velocity_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = direction * g[i];
        if (kind_ == OptimizerKind::momentum) {
          v[i] = momentum_ * v[i] + gi;
          p[i] -= lr_ * v[i];
        } else {
          p[i] -= lr_ * gi;
        }
      }
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  double momentum_;
  std::vector<Tensor> velocity_;
};

// ---------------------------------------------------------------------------
// Data access

struct Rows {
  Tensor x;
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
  bool empty() const { return y.empty(); }
};

inline Rows take_rows(const data::LabeledDataset& ds, std::span<const std::size_t> idx) {
  return Rows{gather_rows(ds.features, idx), ds.labels_at(idx)};
}

inline Rows subset(const Rows& r, std::span<const std::size_t> idx) {
  Rows out{gather_rows(r.x, idx), {}};
  out.y.reserve(idx.size());
  for (std::size_t i : idx) out.y.push_back(r.y[i]);
  return out;
}

/// Everything an unlearning algorithm may read in one phase.
struct PhaseAccess {
  Rows forget;
  Rows retain;
  std::vector<int> retain_classes;  // labels present in the retain rows
  std::size_t classes = 0;
};

inline PhaseAccess phase_access(const data::LabeledDataset& ds, const data::PhasePlan& plan, std::size_t phase) {
  if (phase < 1 || phase > plan.phases()) throw ContractError("phase index out of range");
  const auto& sets = plan.train[phase - 1];
  PhaseAccess a;
  a.forget = take_rows(ds, sets.forget);
  a.retain = take_rows(ds, sets.retain);
  std::set<int> present(a.retain.y.begin(), a.retain.y.end());
  a.retain_classes.assign(present.begin(), present.end());
  a.classes = static_cast<std::size_t>(ds.num_classes);
  return a;
}

/// Shuffled mini-batches; reshuffles whenever the rows are exhausted.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(batch), rng_(std::move(rng)) {}

  std::size_t batches_per_epoch() const { return n_ == 0 ? 0 : (n_ + batch_ - 1) / batch_; }

  std::vector<std::size_t> next() {
    if (n_ == 0) return {};
    if (pos_ >= order_.size()) {
      order_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
      rng_.shuffle(std::span(order_));
      pos_ = 0;
    }
    const std::size_t end = std::min(pos_ + batch_, order_.size());
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return out;
  }

 private:
  std::size_t n_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Single steps

/// Losses of one optimisation step, as written to the step log.
struct StepLosses {
  long step = 0;
  double ce = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double sep = 0.0;
  double forget_kl = 0.0;
};

inline Tensor normal_noise(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor t({rows, cols});
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

namespace detail {

inline double classification_step(Model& m, const Rows& batch, Optimizer& opt, double direction) {
  Graph g;
  const auto ids = model::bind(m, g);
  const NodeId logits = model::classify(g, ids, model::extract(g, m, ids, g.constant(batch.x)));
  const NodeId loss = diff::softmax_cross_entropy(g, logits, batch.y);
  const double value = g.scalar(loss);
  opt.step(m, g.backward(loss), ids, direction);
  return value;
}

inline void check_finite(double v, const char* what, long step) {
  if (!std::isfinite(v)) throw DivergenceError(std::string(what) + " became non-finite", step);
}

}  // namespace detail

/// One descent step on cross-entropy over a retain batch.
inline StepLosses finetune_step(Model& m, const Rows& retain_batch, Optimizer& opt) {
  StepLosses s;
  if (retain_batch.empty()) return s;
  s.ce = detail::classification_step(m, retain_batch, opt, 1.0);
  return s;
}

/// One ascent step on cross-entropy over a forget batch (reported in `ce`).
inline StepLosses neggrad_step(Model& m, const Rows& forget_batch, Optimizer& opt) {
  StepLosses s;
  if (forget_batch.empty()) return s;
  s.ce = detail::classification_step(m, forget_batch, opt, -1.0);
  return s;
}

/// Retain objective (subject to IC/CD) plus beta times the forget objective
/// (subject to UM), one optimiser step, then the latent average update.
/// `eps` is the reparameterisation noise for the retain batch and
/// `forget_q` the target rows for the forget batch.
inline StepLosses safer_step(Model& m, const Rows& retain_batch, const Rows& forget_batch, losses::EmaState& ema,
                             const AlgorithmConfig& cfg, const Tensor& eps, const Tensor& forget_q, Optimizer& opt) {
  if (retain_batch.empty()) throw ContractError("safer_step: empty retain batch");
  const bool use_forget = cfg.switches.um && cfg.beta != 0.0 && !forget_batch.empty();
  const bool any = cfg.switches.ic || cfg.switches.cd || use_forget;

  Graph g;
  const auto ids = model::bind(m, g);
  const NodeId features = model::extract(g, m, ids, g.constant(retain_batch.x));
  losses::RetainTerms terms;
  const double ic = cfg.switches.ic ? 1.0 : 0.0;
  terms.ce_weight = terms.recon_weight = terms.kl_weight = ic;
  terms.lambda = cfg.switches.cd ? cfg.lambda : 0.0;
  const auto retain = losses::retain_loss(g, m, ids, features, retain_batch.y, eps, ema, terms);

  StepLosses s;
  s.ce = retain.breakdown.ce;
  s.recon = retain.breakdown.recon;
  s.kl = retain.breakdown.kl;
  s.sep = retain.breakdown.sep;

  NodeId total = retain.total;
  if (use_forget) {
    const NodeId logits = model::classify(g, ids, model::extract(g, m, ids, g.constant(forget_batch.x)));
    const NodeId fl = losses::forget_loss(g, logits, forget_q);
    s.forget_kl = g.scalar(fl);
    total = diff::add(g, total, cfg.beta == 1.0 ? fl : diff::scale(g, fl, cfg.beta));
  }
  if (any) opt.step(m, g.backward(total), ids);
  ema = losses::ema_update(std::move(ema), g.value(retain.stability.mu), retain_batch.y);
  return s;
}

// ---------------------------------------------------------------------------
// Training from scratch

/// Mini-batch cross-entropy training for a fixed number of epochs.
inline Model train_classifier(Model m, const Rows& rows, const TrainConfig& cfg, Rng batch_rng,
                              std::vector<StepLosses>* log = nullptr) {
  validate(cfg);
  if (rows.empty()) return m;
  Optimizer opt(cfg.optimizer, cfg.lr, cfg.momentum);
  BatchStream stream(rows.size(), cfg.batch_size, std::move(batch_rng));
  long step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    for (std::size_t b = 0; b < stream.batches_per_epoch(); ++b, ++step) {
      const auto idx = stream.next();
      StepLosses s = finetune_step(m, subset(rows, idx), opt);
      detail::check_finite(s.ce, "training loss", step);
      s.step = step;
      if (log) log->push_back(s);
    }
  }
  return m;
}

/// f_theta0: trained on every training row.
inline Model train_original(const data::LabeledDataset& ds, const model::ModelConfig& mc, const TrainConfig& cfg,
                            std::uint64_t seed) {
  Model m = model::init_model(mc, derive_seed(seed, "original.init"));
  return train_classifier(std::move(m), take_rows(ds, ds.rows(data::Split::train)), cfg, Rng(seed, "original.batches"));
}

/// Fresh model trained on the phase-t retain rows only. The seed stream
/// depends on t alone, so earlier phases have no influence.
inline Model retrain(const data::LabeledDataset& ds, const data::PhasePlan& plan, std::size_t phase,
                     const model::ModelConfig& mc, const TrainConfig& cfg, std::uint64_t seed) {
  if (phase < 1 || phase > plan.phases()) throw ContractError("retrain: phase index out of range");
  Model m = model::init_model(mc, derive_seed(seed, "retrain.init", phase));
  return train_classifier(std::move(m), take_rows(ds, plan.train[phase - 1].retain), cfg,
                          Rng(seed, "retrain.batches", phase));
}

// ---------------------------------------------------------------------------
// One unlearning phase

/// State carried between phases besides the model itself.
struct CarryState {
  std::optional<losses::EmaState> ema;
};

/// Runs one non-retrain algorithm for cfg.epochs over `access`, starting
/// from `m`. Step numbers continue from `first_step`.
inline Model unlearn_phase(Model m, const PhaseAccess& access, const AlgorithmConfig& cfg, std::uint64_t seed,
                           std::size_t phase, CarryState& carry, std::vector<StepLosses>* log = nullptr,
                           long first_step = 0) {
  validate(cfg);
  Optimizer opt(cfg.optimizer, cfg.lr, cfg.momentum);
  long step = first_step;
  auto record = [&](StepLosses s) {
    detail::check_finite(s.ce + s.recon + s.kl + s.sep + s.forget_kl, "unlearning loss", step);
    s.step = step++;
    if (log) log->push_back(s);
  };

  switch (cfg.kind) {
    case Algorithm::retrain:
      throw ContractError("unlearn_phase: retrain has no incremental phase");
    case Algorithm::finetune: {
      BatchStream retain(access.retain.size(), cfg.batch_size, Rng(seed, "finetune.batches", phase));
      for (int e = 0; e < cfg.epochs; ++e) {
        for (std::size_t b = 0; b < retain.batches_per_epoch(); ++b) {
          record(finetune_step(m, subset(access.retain, retain.next()), opt));
        }
      }
      return m;
    }
    case Algorithm::neggrad: {
      BatchStream forget(access.forget.size(), cfg.batch_size, Rng(seed, "neggrad.batches", phase));
      for (int e = 0; e < cfg.epochs; ++e) {
        for (std::size_t b = 0; b < forget.batches_per_epoch(); ++b) {
          record(neggrad_step(m, subset(access.forget, forget.next()), opt));
        }
      }
      return m;
    }
    case Algorithm::safer: {
      if (!carry.ema) carry.ema = losses::make_ema(m.latent_dim(), cfg.ema_decay, cfg.ema_mode);
      BatchStream retain(access.retain.size(), cfg.batch_size, Rng(seed, "safer.retain_batches", phase));
      BatchStream forget(access.forget.size(), cfg.batch_size, Rng(seed, "safer.forget_batches", phase));
      Rng eps_rng(seed, "safer.eps", phase);
      Rng target_rng(seed, "safer.targets", phase);
      for (int e = 0; e < cfg.epochs; ++e) {
        for (std::size_t b = 0; b < retain.batches_per_epoch(); ++b) {
          const Rows rb = subset(access.retain, retain.next());
          const Rows fb = subset(access.forget, forget.next());
          const Tensor eps = normal_noise(eps_rng, rb.size(), m.latent_dim());
          const Tensor q = fb.empty() ? Tensor({0, access.classes})
                                      : losses::forget_targets(access.classes, access.retain_classes, fb.y, target_rng);
          record(safer_step(m, rb, fb, *carry.ema, cfg, eps, q, opt));
        }
      }
      return m;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Continual orchestration

/// Evaluation sets of phase t with their rows. Class-aligned: retain, forget
/// and forgotten test rows. Misaligned: retain and forget training rows, the
/// retain test rows, and forgotten training rows. Forgotten sets appear from
/// phase 2 on.
struct EvalSet {
  std::string name;
  std::vector<std::size_t> rows;
};

struct EvalRoles {
  std::string retain;
  std::string forget;
  std::string forgot;
};

inline EvalRoles eval_roles(const data::LabeledDataset& ds) {
  if (ds.class_aligned()) return {"retain_test", "forget_test", "forgot_test"};
  return {"retain_train", "forget_train", "forgot_train"};
}

inline std::vector<EvalSet> evaluation_sets(const data::LabeledDataset& ds, const data::PhasePlan& plan,
                                            std::size_t phase) {
  const auto& tr = plan.train[phase - 1];
  const auto& te = plan.test[phase - 1];
  std::vector<EvalSet> sets;
  if (ds.class_aligned()) {
    sets.push_back({"retain_test", te.retain});
    sets.push_back({"forget_test", te.forget});
    if (phase >= 2) sets.push_back({"forgot_test", te.forgot});
  } else {
    sets.push_back({"retain_train", tr.retain});
    sets.push_back({"forget_train", tr.forget});
    sets.push_back({"test", te.retain});
    if (phase >= 2) sets.push_back({"forgot_train", tr.forgot});
  }
  return sets;
}

/// Accuracy on every non-empty evaluation set.
inline metrics::AccuracyRow evaluate(const Model& m, const data::LabeledDataset& ds, const data::PhasePlan& plan,
                                     std::size_t phase) {
  metrics::AccuracyRow row;
  for (const auto& s : evaluation_sets(ds, plan, phase)) {
    if (s.rows.empty()) continue;
    const Rows r = take_rows(ds, s.rows);
    row.emplace_back(s.name, *metrics::accuracy(m, r.x, r.y));
  }
  return row;
}

struct PhaseResult {
  std::size_t phase = 0;
  Model model;
  metrics::AccuracyRow accuracies;
  std::optional<double> stabilized_retain_accuracy;  // x' path, eps = 0
  double seconds = 0.0;
  std::vector<StepLosses> losses;
};

/// Accuracy of the head applied to x' = (x + x_hat)/2 with eps = 0 and the
/// true label as condition.
inline std::optional<double> stabilized_accuracy(const Model& m, const Rows& rows) {
  if (rows.empty()) return std::nullopt;
  const auto v = model::stability_values(m, rows.x, rows.y, Tensor({rows.size(), m.latent_dim()}, 0.0));
  return metrics::accuracy_from_logits(v.logits, rows.y);
}

using PhaseSink = std::function<void(PhaseResult&&)>;

/// Runs every phase of `plan`, handing each finished phase to `sink`.
/// Non-retrain algorithms start from `original` and chain phase to phase;
/// retrain trains afresh each phase with `train`.
inline void run_continual(const data::LabeledDataset& ds, const data::PhasePlan& plan, const AlgorithmConfig& cfg,
                          const model::ModelConfig& mc, const TrainConfig& train, std::uint64_t seed,
                          const Model& original, const PhaseSink& sink) {
  if (plan.train.size() != plan.phases() || plan.test.size() != plan.phases()) {
    throw ContractError("run_continual: plan does not match dataset");
  }
  std::size_t planned_rows = 0;
  if (plan.phases() > 0) {
    const auto& s = plan.train[0];
    const auto& t = plan.test[0];
    planned_rows = s.forget.size() + s.retain.size() + s.forgot.size() + t.forget.size() + t.retain.size() + t.forgot.size();
  }
  if (plan.phases() > 0 && planned_rows != ds.size()) throw ContractError("run_continual: plan does not match dataset");

  Model current = original;
  CarryState carry;
  long step = 0;
  const auto retain_role = eval_roles(ds).retain;
  for (std::size_t t = 1; t <= plan.phases(); ++t) {
    const auto start = std::chrono::steady_clock::now();
    PhaseResult r;
    r.phase = t;
    if (cfg.kind == Algorithm::retrain) {
      current = retrain(ds, plan, t, mc, train, seed);
    } else {
      const PhaseAccess access = phase_access(ds, plan, t);
      current = unlearn_phase(std::move(current), access, cfg, seed, t, carry, &r.losses, step);
      step += static_cast<long>(r.losses.size());
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.model = current;
    r.accuracies = evaluate(current, ds, plan, t);
    for (const auto& s : evaluation_sets(ds, plan, t)) {
      if (s.name == retain_role) r.stabilized_retain_accuracy = stabilized_accuracy(current, take_rows(ds, s.rows));
    }
    sink(std::move(r));
  }
}

inline std::vector<PhaseResult> run_continual(const data::LabeledDataset& ds, const data::PhasePlan& plan,
                                              const AlgorithmConfig& cfg, const model::ModelConfig& mc,
                                              const TrainConfig& train, std::uint64_t seed, const Model& original) {
  std::vector<PhaseResult> results;
  run_continual(ds, plan, cfg, mc, train, seed, original, [&](PhaseResult&& r) { results.push_back(std::move(r)); });
  return results;
}

}  // namespace safer::unlearn
