#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "safer/diff.hpp"
#include "safer/errors.hpp"
#include "safer/model.hpp"
#include "safer/rng.hpp"
#include "safer/tensor.hpp"

namespace safer::losses {

using diff::Graph;
using diff::NodeId;

// ---------------------------------------------------------------------------
// Latent mean tracker

enum class EmaMode { global, per_class };

struct EmaState {
  std::vector<double> mu_ema;
  double decay = 0.99;
  long steps = 0;
  bool initialized = false;
  EmaMode mode = EmaMode::global;
  std::map<int, std::vector<double>> class_mu;  // per_class mode only
};

inline EmaState make_ema(std::size_t latent_dim, double decay = 0.99, EmaMode mode = EmaMode::global) {
  if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("ema decay must lie in (0, 1)");
  EmaState s;
  s.mu_ema.assign(latent_dim, 0.0);
  s.decay = decay;
  s.mode = mode;
  return s;
}

namespace detail {

inline void blend(std::vector<double>& ema, std::span<const double> m, double decay, bool first) {
  for (std::size_t j = 0; j < ema.size(); ++j) ema[j] = first ? m[j] : decay * ema[j] + (1.0 - decay) * m[j];
}

inline std::vector<double> column_mean(const Tensor& t, std::span<const std::size_t> rows) {
  std::vector<double> m(t.cols(), 0.0);
  for (std::size_t r : rows) {
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += t(r, j);
  }
  for (auto& v : m) v /= static_cast<double>(rows.size());
  return m;
}

}  // namespace detail

/// Folds the batch mean of `mu` into the running average. The first update
/// copies the batch mean. In per-class mode `labels` selects the class
/// averages to update as well.
inline EmaState ema_update(EmaState state, const Tensor& mu, std::span<const int> labels = {}) {
  if (mu.rows() == 0 || mu.size() == 0) throw ContractError("ema_update: empty batch");
  if (mu.cols() != state.mu_ema.size()) throw ShapeError("ema_update: latent width mismatch");
  std::vector<std::size_t> all(mu.rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  detail::blend(state.mu_ema, detail::column_mean(mu, all), state.decay, !state.initialized);

  if (state.mode == EmaMode::per_class) {
    if (labels.size() != mu.rows()) throw ContractError("ema_update: per-class mode needs one label per row");
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    for (const auto& [c, rows] : by_class) {
      auto [it, fresh] = state.class_mu.try_emplace(c, std::vector<double>(mu.cols(), 0.0));
      detail::blend(it->second, detail::column_mean(mu, rows), state.decay, fresh);
    }
  }
  state.initialized = true;
  ++state.steps;
  return state;
}

// ---------------------------------------------------------------------------
// Retain objective

/// Batch mean of 1/2 sum_j (mu_j^2 + sigma_j^2 - 1 - log sigma_j^2).
inline NodeId gaussian_kl(Graph& g, NodeId mu, NodeId logvar) {
  if (g.value(mu).shape() != g.value(logvar).shape()) {
    throw ShapeError("gaussian_kl: mu " + shape_string(g.value(mu).shape()) + " vs logvar " +
                     shape_string(g.value(logvar).shape()));
  }
  const double rows = static_cast<double>(g.value(mu).rows());
  NodeId terms = diff::sub(g, diff::add(g, diff::square(g, mu), diff::exp(g, logvar)), logvar);
  terms = diff::add_scalar(g, terms, -1.0);
  return diff::scale(g, diff::sum(g, terms), 0.5 / rows);
}

inline constexpr double kSeparationStabilizer = 1e-6;

/// Term weights of the retain objective. The ablation switch IC scales the
/// first three, CD turns `lambda` off.
struct RetainTerms {
  double ce_weight = 1.0;
  double recon_weight = 1.0;
  double kl_weight = 1.0;
  double lambda = 0.1;
};

struct RetainLossBreakdown {
  double ce = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double sep = 0.0;  // already multiplied by lambda
  double total = 0.0;
  double lambda = 0.0;
};

struct RetainLossNodes {
  model::StabilityNodes stability;
  NodeId ce;
  NodeId recon;
  NodeId kl;
  std::optional<NodeId> sep;
  NodeId total;
  RetainLossBreakdown breakdown;
};

/// Retain objective on a batch of extractor features:
///   CE(head(x'), y) + mean ||x - x_hat||^2 + KL(q(z|x,c) || N(0, I))
///   + lambda / (mean ||mu_b - mu_ema|| + 1e-6)
/// mu_ema enters as a constant. The separation term is absent until the
/// tracker has been initialised.
inline RetainLossNodes retain_loss(Graph& g, const model::Model& m, const model::ModelIds& ids, NodeId features,
                                   std::span<const int> labels, const Tensor& eps, const EmaState& ema,
                                   const RetainTerms& terms) {
  const std::size_t batch = g.value(features).rows();
  if (batch == 0 || labels.empty()) throw ContractError("retain_loss: empty batch");

  RetainLossNodes out{};
  out.stability = model::stability_forward(g, m, ids, features, labels, eps);
  const auto& s = out.stability;

  out.ce = diff::softmax_cross_entropy(g, model::classify(g, ids, s.stabilized), labels);
  out.recon = diff::scale(g, diff::sum(g, diff::square(g, diff::sub(g, features, s.reconstruction))),
                          1.0 / static_cast<double>(batch));
  out.kl = gaussian_kl(g, s.mu, s.logvar);

  std::vector<NodeId> parts;
  auto weighted = [&](NodeId n, double w) {
    if (w == 0.0) return;
    parts.push_back(w == 1.0 ? n : diff::scale(g, n, w));
  };
  weighted(out.ce, terms.ce_weight);
  weighted(out.recon, terms.recon_weight);
  weighted(out.kl, terms.kl_weight);

  if (ema.initialized && terms.lambda != 0.0) {
    Tensor anchors({batch, m.latent_dim()});
    std::vector<double> mask(batch, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::vector<double>* anchor = &ema.mu_ema;
      if (ema.mode == EmaMode::per_class) {
        auto it = ema.class_mu.find(labels[b]);
        anchor = it == ema.class_mu.end() ? nullptr : &it->second;
      }
      if (!anchor) continue;
      std::copy(anchor->begin(), anchor->end(), anchors.row(b).begin());
      mask[b] = 1.0;
    }
    const double used = std::count(mask.begin(), mask.end(), 1.0);
    if (used > 0) {
      NodeId dist = diff::l2_norm(g, diff::sub(g, s.mu, g.constant(std::move(anchors))));
      dist = diff::mul(g, dist, g.constant(Tensor::vector(std::move(mask))));
      const NodeId mean_dist = diff::scale(g, diff::sum(g, dist), 1.0 / used);
      out.sep = diff::scale(g, diff::reciprocal(g, diff::add_scalar(g, mean_dist, kSeparationStabilizer)), terms.lambda);
      parts.push_back(*out.sep);
    }
  }

  if (parts.empty()) {
    out.total = g.constant(Tensor::scalar(0.0));
  } else {
    out.total = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) out.total = diff::add(g, out.total, parts[i]);
  }

  auto& b = out.breakdown;
  b.ce = g.scalar(out.ce);
  b.recon = g.scalar(out.recon);
  b.kl = g.scalar(out.kl);
  b.sep = out.sep ? g.scalar(*out.sep) : 0.0;
  b.total = g.scalar(out.total);
  b.lambda = terms.lambda;
  return out;
}

// ---------------------------------------------------------------------------
// Forget objective

struct ForgetTarget {
  std::vector<double> q;
  std::vector<int> retain_classes;
};

/// q_i = r_i / sum(r) on the retain classes, zero elsewhere.
inline ForgetTarget forget_target_from_draws(std::size_t classes, std::span<const int> retain_classes,
                                             std::span<const double> draws) {
  if (retain_classes.empty()) throw ContractError("forget target: retain class set is empty");
  if (draws.size() != retain_classes.size()) throw ContractError("forget target: one draw per retain class");
  double total = 0.0;
  for (double r : draws) total += r;
  if (!(total > 0.0)) throw DomainError("forget target: draws sum to zero");
  ForgetTarget t;
  t.q.assign(classes, 0.0);
  t.retain_classes.assign(retain_classes.begin(), retain_classes.end());
  for (std::size_t k = 0; k < retain_classes.size(); ++k) {
    const int c = retain_classes[k];
    if (c < 0 || static_cast<std::size_t>(c) >= classes) throw ContractError("forget target: class out of range");
    t.q[static_cast<std::size_t>(c)] = draws[k] / total;
  }
  return t;
}

inline ForgetTarget build_forget_target(std::size_t classes, std::span<const int> retain_classes, Rng& rng) {
  std::vector<double> draws(retain_classes.size());
  for (;;) {
    double total = 0.0;
    for (auto& r : draws) total += (r = rng.uniform());
    if (total > 0.0) return forget_target_from_draws(classes, retain_classes, draws);
  }
}

/// One fresh target row per forget sample; each sample's own label is
/// removed from the retain class set.
inline Tensor forget_targets(std::size_t classes, std::span<const int> retain_classes, std::span<const int> labels,
                             Rng& rng) {
  Tensor q({labels.size(), classes});
  std::vector<int> allowed;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    allowed.clear();
    for (int c : retain_classes) {
      if (c != labels[b]) allowed.push_back(c);
    }
    const ForgetTarget t = build_forget_target(classes, allowed, rng);
    std::copy(t.q.begin(), t.q.end(), q.row(b).begin());
  }
  return q;
}

/// Batch mean of KL(q || softmax(logits)).
inline NodeId forget_loss(Graph& g, NodeId logits, Tensor targets) {
  return diff::softmax_cross_entropy(g, logits, std::move(targets));
}

inline double forget_loss_value(const Tensor& logits, const Tensor& targets) {
  Graph g;
  return g.scalar(forget_loss(g, g.constant(logits), targets));
}

/// l_y - max_{k != y} l_k.
inline double unlearning_margin(std::span<const double> logits, int y) {
  if (logits.size() < 2) throw ContractError("unlearning_margin: needs at least two classes");
  if (y < 0 || static_cast<std::size_t>(y) >= logits.size()) throw ContractError("unlearning_margin: label out of range");
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (static_cast<int>(k) != y) best = std::max(best, logits[k]);
  }
  return logits[static_cast<std::size_t>(y)] - best;
}

}  // namespace safer::losses
