#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "safer/errors.hpp"
#include "safer/rng.hpp"
#include "safer/tensor.hpp"

namespace safer::data {

enum class Split : std::uint8_t { train, test };

/// Rows of (features, label, entity) with a fixed train/test assignment.
/// Forgetting units are entity ids; in the class-aligned case an entity is
/// a class.
struct LabeledDataset {
  Tensor features;  // [N, d]
  std::vector<int> labels;
  std::vector<int> entity_ids;
  std::vector<Split> split;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  bool class_aligned() const { return entity_ids == labels; }

  std::vector<std::size_t> rows(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i) {
      if (split[i] == s) out.push_back(i);
    }
    return out;
  }

  std::vector<int> labels_at(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
  }
};

struct BlobSpec {
  int classes = 8;
  int dim = 8;
  int n_per_class = 250;
  double center_spread = 6.0;
  double noise_sigma = 0.5;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct EntitySpec {
  int n_entities = 100;
  int samples_per_entity = 10;
  int attributes = 4;
  int dim = 8;
  double prototype_scale = 1.0;
  double noise_sigma = 0.3;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::vector<double> random_direction(Rng& rng, int dim) {
  std::vector<double> v(static_cast<std::size_t>(dim));
  double norm = 0.0;
  while (norm == 0.0) {
    norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

// Per-class stratified test assignment: round(test_fraction * n_c) rows of
// each class go to the test split.
inline std::vector<Split> stratified_split(std::span<const int> labels, int classes, double test_fraction, Rng& rng) {
  std::vector<Split> split(labels.size(), Split::train);
  for (int c = 0; c < classes; ++c) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == c) rows.push_back(i);
    }
    rng.shuffle(std::span(rows));
    const auto n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(rows.size())));
    for (std::size_t k = 0; k < n_test && k < rows.size(); ++k) split[rows[k]] = Split::test;
  }
  return split;
}

}  // namespace detail

/// K isotropic Gaussian clusters, centers uniform in a hypercube of side
/// `center_spread` centred at the origin.
inline LabeledDataset gaussian_blobs(const BlobSpec& spec) {
  if (spec.classes < 3) throw ConfigError("gaussian_blobs: classes must be >= 3");
  if (spec.dim < 1) throw ConfigError("gaussian_blobs: dim must be >= 1");
  if (spec.n_per_class < 20) throw ConfigError("gaussian_blobs: n_per_class must be >= 20");
  if (!(spec.noise_sigma > 0.0)) throw ConfigError("gaussian_blobs: noise_sigma must be > 0");
  if (!(spec.center_spread >= 0.0)) throw ConfigError("gaussian_blobs: center_spread must be >= 0");
  if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0)) {
    throw ConfigError("gaussian_blobs: test_fraction must lie in (0, 1)");
  }

  Rng centers_rng(spec.seed, "blobs.centers");
  Rng noise_rng(spec.seed, "blobs.noise");
  Rng split_rng(spec.seed, "blobs.split");

  const auto d = static_cast<std::size_t>(spec.dim);
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(spec.classes), std::vector<double>(d));
  for (auto& c : centers) {
    for (auto& v : c) v = centers_rng.uniform(-0.5 * spec.center_spread, 0.5 * spec.center_spread);
  }

  LabeledDataset ds;
  ds.num_classes = spec.classes;
  const std::size_t n = static_cast<std::size_t>(spec.classes) * static_cast<std::size_t>(spec.n_per_class);
  std::vector<double> x;
  x.reserve(n * d);
  for (int c = 0; c < spec.classes; ++c) {
    for (int i = 0; i < spec.n_per_class; ++i) {
      for (std::size_t j = 0; j < d; ++j) x.push_back(centers[static_cast<std::size_t>(c)][j] + spec.noise_sigma * noise_rng.normal());
      ds.labels.push_back(c);
    }
  }
  ds.features = Tensor({n, d}, std::move(x));
  ds.entity_ids = ds.labels;
  ds.split = detail::stratified_split(ds.labels, spec.classes, spec.test_fraction, split_rng);
  return ds;
}

/// Entities with attribute labels: feature = attribute offset + entity
/// prototype + noise, with the attribute offset three times the prototype
/// magnitude. Entity e carries attribute e mod K.
inline LabeledDataset misaligned_entities(const EntitySpec& spec) {
  if (spec.n_entities < 40) throw ConfigError("misaligned_entities: n_entities must be >= 40");
  if (spec.attributes < 2) throw ConfigError("misaligned_entities: attributes must be >= 2");
  if (spec.attributes > spec.n_entities) throw ConfigError("misaligned_entities: attributes exceed n_entities");
  if (spec.samples_per_entity < 1) throw ConfigError("misaligned_entities: samples_per_entity must be >= 1");
  if (spec.dim < 1) throw ConfigError("misaligned_entities: dim must be >= 1");
  if (!(spec.noise_sigma > 0.0)) throw ConfigError("misaligned_entities: noise_sigma must be > 0");
  if (!(spec.prototype_scale > 0.0)) throw ConfigError("misaligned_entities: prototype_scale must be > 0");
  if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0)) {
    throw ConfigError("misaligned_entities: test_fraction must lie in (0, 1)");
  }

  Rng attr_rng(spec.seed, "entities.attributes");
  Rng proto_rng(spec.seed, "entities.prototypes");
  Rng noise_rng(spec.seed, "entities.noise");
  Rng split_rng(spec.seed, "entities.split");

  const auto d = static_cast<std::size_t>(spec.dim);
  std::vector<std::vector<double>> offsets;
  for (int k = 0; k < spec.attributes; ++k) {
    auto dir = detail::random_direction(attr_rng, spec.dim);
    for (auto& v : dir) v *= 3.0 * spec.prototype_scale;
    offsets.push_back(std::move(dir));
  }

  LabeledDataset ds;
  ds.num_classes = spec.attributes;
  std::vector<double> x;
  for (int e = 0; e < spec.n_entities; ++e) {
    const int attr = e % spec.attributes;
    auto proto = detail::random_direction(proto_rng, spec.dim);
    for (int s = 0; s < spec.samples_per_entity; ++s) {
      for (std::size_t j = 0; j < d; ++j) {
        x.push_back(offsets[static_cast<std::size_t>(attr)][j] + spec.prototype_scale * proto[j] +
                    spec.noise_sigma * noise_rng.normal());
      }
      ds.labels.push_back(attr);
      ds.entity_ids.push_back(e);
    }
  }
  const std::size_t n = ds.labels.size();
  ds.features = Tensor({n, d}, std::move(x));
  ds.split = detail::stratified_split(ds.labels, spec.attributes, spec.test_fraction, split_rng);
  return ds;
}

using Units = std::vector<int>;

/// Row indices (ascending) of one phase, for one split.
struct PhaseSets {
  std::vector<std::size_t> forget;
  std::vector<std::size_t> retain;
  std::vector<std::size_t> forgot;
};

/// Forget requests per phase and the induced forget/retain/forgot
/// partitions. Phase t is stored at index t - 1.
struct PhasePlan {
  std::vector<Units> forget_units;
  std::vector<PhaseSets> train;
  std::vector<PhaseSets> test;

  std::size_t phases() const { return forget_units.size(); }
};

inline PhasePlan plan_phases(const LabeledDataset& ds, const std::vector<Units>& schedule) {
  std::set<int> known(ds.entity_ids.begin(), ds.entity_ids.end());
  std::map<int, std::size_t> first_phase;
  for (std::size_t t = 0; t < schedule.size(); ++t) {
    for (int u : schedule[t]) {
      if (!known.contains(u)) {
        throw ScheduleError("unknown forget unit " + std::to_string(u) + " in phase " + std::to_string(t + 1));
      }
      auto [it, inserted] = first_phase.emplace(u, t);
      if (!inserted) {
        throw ScheduleError("forget unit " + std::to_string(u) + " repeated in phases " +
                            std::to_string(it->second + 1) + " and " + std::to_string(t + 1));
      }
    }
  }

  PhasePlan plan;
  plan.forget_units = schedule;
  for (std::size_t t = 0; t < schedule.size(); ++t) {
    PhaseSets tr, te;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto it = first_phase.find(ds.entity_ids[i]);
      PhaseSets& sets = ds.split[i] == Split::train ? tr : te;
      if (it == first_phase.end() || it->second > t) {
        sets.retain.push_back(i);
      } else if (it->second == t) {
        sets.forget.push_back(i);
      } else {
        sets.forgot.push_back(i);
      }
    }
    plan.train.push_back(std::move(tr));
    plan.test.push_back(std::move(te));
  }
  return plan;
}

}  // namespace safer::data
