#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "safer/diff.hpp"
#include "safer/errors.hpp"
#include "safer/losses.hpp"
#include "safer/model.hpp"
#include "safer/tensor.hpp"

namespace safer::metrics {

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

/// Fraction of rows whose argmax logit equals the label; nullopt for an
/// empty set.
inline std::optional<double> accuracy_from_logits(const Tensor& logits, std::span<const int> labels) {
  if (labels.empty()) return std::nullopt;
  if (logits.rows() != labels.size()) throw ShapeError("accuracy: logits rows do not match labels");
  std::size_t hit = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (static_cast<int>(argmax(logits.row(r))) == labels[r]) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline std::optional<double> accuracy(const model::Model& m, const Tensor& x, std::span<const int> labels) {
  if (labels.empty()) return std::nullopt;
  return accuracy_from_logits(model::forward_classify(m, x).logits, labels);
}

// ---------------------------------------------------------------------------
// Continual-unlearning summaries

/// Mean drop in retain accuracy between consecutive phases. Positive means
/// erosion. Undefined for fewer than two phases.
inline std::optional<double> knowledge_erosion(std::span<const double> retain_acc) {
  if (retain_acc.size() < 2) return std::nullopt;
  double s = 0.0;
  for (std::size_t t = 0; t + 1 < retain_acc.size(); ++t) s += retain_acc[t] - retain_acc[t + 1];
  return s / static_cast<double>(retain_acc.size() - 1);
}

/// forget_acc[k] is the accuracy on phase-(k+1) forget data after phase k+1;
/// forgot_acc[k] the accuracy on the forgotten data after phase k+2.
/// Positive values mean forgotten data became recognisable again.
inline std::optional<double> forgetting_reversal(std::span<const double> forget_acc, std::span<const double> forgot_acc) {
  if (forget_acc.size() != forgot_acc.size()) throw ContractError("forgetting_reversal: sequence lengths differ");
  if (forget_acc.empty()) return std::nullopt;
  double s = 0.0;
  for (std::size_t k = 0; k < forget_acc.size(); ++k) s += forget_acc[k] - forgot_acc[k];
  return -s / static_cast<double>(forget_acc.size());
}

/// Named per-set accuracies of one phase, in a fixed order.
using AccuracyRow = std::vector<std::pair<std::string, double>>;

/// Product over evaluation sets of (1 - |acc_unlearned - acc_retrain|).
inline double tug_of_war(const AccuracyRow& unlearned, const AccuracyRow& retrain) {
  if (unlearned.size() != retrain.size()) throw ContractError("tug_of_war: evaluation set lists differ");
  double tow = 1.0;
  for (std::size_t i = 0; i < unlearned.size(); ++i) {
    if (unlearned[i].first != retrain[i].first) {
      throw ContractError("tug_of_war: set '" + unlearned[i].first + "' vs '" + retrain[i].first + "'");
    }
    tow *= 1.0 - std::abs(unlearned[i].second - retrain[i].second);
  }
  return tow;
}

// ---------------------------------------------------------------------------
// Davies-Bouldin index (intra-class spread as mean squared distance)

struct DbiResult {
  double value = 0.0;
  std::vector<int> classes;
  std::vector<double> per_class;
  bool degenerate = false;  // some centroid pair coincided
};

inline constexpr double kDbiGuard = 1e-12;

inline DbiResult dbi(const Tensor& features, std::span<const int> labels) {
  if (features.rows() != labels.size()) throw ShapeError("dbi: feature rows do not match labels");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  if (by_class.size() < 2) throw ContractError("dbi: needs at least two classes");

  const std::size_t d = features.cols();
  std::vector<std::vector<double>> centroids;
  std::vector<double> spread;
  DbiResult r;
  for (const auto& [c, rows] : by_class) {
    std::vector<double> mu(d, 0.0);
    for (std::size_t i : rows) {
      for (std::size_t j = 0; j < d; ++j) mu[j] += features(i, j);
    }
    for (auto& v : mu) v /= static_cast<double>(rows.size());
    double s = 0.0;
    for (std::size_t i : rows) {
      for (std::size_t j = 0; j < d; ++j) s += (features(i, j) - mu[j]) * (features(i, j) - mu[j]);
    }
    r.classes.push_back(c);
    spread.push_back(s / static_cast<double>(rows.size()));
    centroids.push_back(std::move(mu));
  }

  const std::size_t k = centroids.size();
  for (std::size_t i = 0; i < k; ++i) {
    double worst = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) dist += (centroids[i][c] - centroids[j][c]) * (centroids[i][c] - centroids[j][c]);
      dist = std::sqrt(dist);
      if (dist < kDbiGuard) {
        dist = kDbiGuard;
        r.degenerate = true;
      }
      worst = std::max(worst, (spread[i] + spread[j]) / dist);
    }
    r.per_class.push_back(worst);
  }
  double s = 0.0;
  for (double v : r.per_class) s += v;
  r.value = s / static_cast<double>(k);
  return r;
}

// ---------------------------------------------------------------------------
// Margin histograms

struct MarginHistogram {
  std::vector<double> edges;  // bins [edges[i], edges[i+1])
  std::vector<long> counts;
  std::string set;
  int phase = 0;

  long total() const {
    long n = 0;
    for (long c : counts) n += c;
    return n;
  }
};

inline std::vector<double> uniform_edges(double lo, double hi, std::size_t bins) {
  if (bins == 0 || !(hi > lo)) throw ConfigError("histogram: need bins > 0 and hi > lo");
  std::vector<double> e(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) e[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  return e;
}

/// Values below the first edge land in the first bin and values at or above
/// the last edge in the last bin, so counts always sum to values.size().
inline std::vector<long> histogram_counts(std::span<const double> values, std::span<const double> edges) {
  if (edges.size() < 2) throw ConfigError("histogram: need at least two edges");
  std::vector<long> counts(edges.size() - 1, 0);
  for (double v : values) {
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    std::size_t bin = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
    bin = std::min(bin, counts.size() - 1);
    ++counts[bin];
  }
  return counts;
}

inline std::vector<double> margins(const Tensor& logits, std::span<const int> labels) {
  std::vector<double> out;
  out.reserve(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) out.push_back(losses::unlearning_margin(logits.row(r), labels[r]));
  return out;
}

inline MarginHistogram margin_histogram(const model::Model& m, const Tensor& x, std::span<const int> labels,
                                        std::vector<double> edges, std::string set = {}, int phase = 0) {
  MarginHistogram h;
  h.set = std::move(set);
  h.phase = phase;
  h.counts.assign(edges.size() - 1, 0);
  if (!labels.empty()) h.counts = histogram_counts(margins(model::forward_classify(m, x).logits, labels), edges);
  h.edges = std::move(edges);
  return h;
}

// ---------------------------------------------------------------------------
// Loss-threshold membership inference

struct MiaResult {
  double score = 0.0;  // percent of forget rows judged non-members
  double threshold = 0.0;
  double balanced_accuracy = 0.5;
  bool degenerate = false;
};

/// Picks the threshold tau (loss >= tau means non-member) maximising the
/// balanced accuracy between members and non-members, ties to the smallest
/// tau, then scores the forget rows.
inline MiaResult mia_from_losses(std::span<const double> member, std::span<const double> nonmember,
                                 std::span<const double> forget) {
  if (member.empty() || nonmember.empty() || forget.empty()) throw ContractError("mia: all sets must be non-empty");
  std::vector<double> m(member.begin(), member.end()), n(nonmember.begin(), nonmember.end());
  std::sort(m.begin(), m.end());
  std::sort(n.begin(), n.end());

  MiaResult r;
  if (m.front() == m.back() && n.front() == n.back() && m.front() == n.front()) {
    r.score = 50.0;
    r.threshold = m.front();
    r.degenerate = true;
    return r;
  }

  std::vector<double> candidates;
  candidates.reserve(m.size() + n.size());
  candidates.insert(candidates.end(), m.begin(), m.end());
  candidates.insert(candidates.end(), n.begin(), n.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  const double nm = static_cast<double>(m.size()), nn = static_cast<double>(n.size());
  double best = -1.0, tau = std::numeric_limits<double>::infinity();
  for (double c : candidates) {
    const double members_below = static_cast<double>(std::lower_bound(m.begin(), m.end(), c) - m.begin());
    const double nonmembers_above = static_cast<double>(n.end() - std::lower_bound(n.begin(), n.end(), c));
    const double ba = 0.5 * (members_below / nm + nonmembers_above / nn);
    if (ba > best) {
      best = ba;
      tau = c;
    }
  }
  std::size_t flagged = 0;
  for (double v : forget) {
    if (v >= tau) ++flagged;
  }
  r.score = 100.0 * static_cast<double>(flagged) / static_cast<double>(forget.size());
  r.threshold = tau;
  r.balanced_accuracy = best;
  return r;
}

inline std::vector<double> per_sample_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  std::vector<double> out;
  out.reserve(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto row = logits.row(r);
    out.push_back(diff::detail::log_sum_exp(row) - row[static_cast<std::size_t>(labels[r])]);
  }
  return out;
}

struct LabeledRows {
  const Tensor& x;
  std::span<const int> y;
};

inline MiaResult mia_score(const model::Model& m, LabeledRows retain_train, LabeledRows test, LabeledRows forget) {
  auto losses = [&](LabeledRows rows) {
    return per_sample_cross_entropy(model::forward_classify(m, rows.x).logits, rows.y);
  };
  return mia_from_losses(losses(retain_train), losses(test), losses(forget));
}

// ---------------------------------------------------------------------------
// Representation similarity

struct Similarity {
  std::vector<double> values;  // one per row with non-zero features
  std::size_t excluded = 0;
};

inline Similarity cosine_rows(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("representation_similarity: feature shapes differ");
  Similarity s;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    const auto ra = a.row(r), rb = b.row(r);
    for (std::size_t j = 0; j < ra.size(); ++j) {
      dot += ra[j] * rb[j];
      na += ra[j] * ra[j];
      nb += rb[j] * rb[j];
    }
    if (na == 0.0 || nb == 0.0) {
      ++s.excluded;
      continue;
    }
    s.values.push_back(std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0));
  }
  return s;
}

inline Similarity representation_similarity(const model::Model& before, const model::Model& after, const Tensor& x) {
  if (before.feature_dim() != after.feature_dim()) throw ShapeError("representation_similarity: feature widths differ");
  return cosine_rows(model::forward_classify(before, x).features, model::forward_classify(after, x).features);
}

}  // namespace safer::metrics
