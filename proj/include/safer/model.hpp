#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "safer/diff.hpp"
#include "safer/errors.hpp"
#include "safer/rng.hpp"
#include "safer/tensor.hpp"

namespace safer::model {

using diff::Graph;
using diff::NodeId;

enum class Activation { tanh, relu };

/// y = x W + b with W stored [in, out].
struct Affine {
  Tensor weight;
  Tensor bias;

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }
};

struct ModelConfig {
  std::vector<int> layer_sizes{8, 32, 32};  // input width, then extractor widths
  int classes = 8;
  int latent_dim = 8;
  std::vector<int> encoder_hidden{32};
  std::vector<int> decoder_hidden{32};
  Activation activation = Activation::tanh;
  double logvar_bound = 10.0;
};

/// Class-conditioned latent module between extractor and head. The encoder
/// sees concat(feature, onehot(class)); the decoder sees only z.
struct StabilityModule {
  std::vector<Affine> encoder;  // tanh trunk
  Affine mu;
  Affine logvar;
  std::vector<Affine> decoder;  // tanh hidden layers
  Affine decoder_out;           // linear, back to feature width
};

struct Model {
  ModelConfig config;
  std::vector<Affine> extractor;
  Affine head;
  StabilityModule stability;
  std::uint64_t seed = 0;

  std::size_t input_dim() const { return static_cast<std::size_t>(config.layer_sizes.front()); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(config.layer_sizes.back()); }
  std::size_t classes() const { return static_cast<std::size_t>(config.classes); }
  std::size_t latent_dim() const { return static_cast<std::size_t>(config.latent_dim); }

  /// Every affine map in canonical order: extractor, head, encoder trunk,
  /// mu, logvar, decoder hidden, decoder output.
  template <class Self, class Fn>
  static void visit(Self& self, Fn&& fn) {
    for (auto& a : self.extractor) fn(a);
    fn(self.head);
    for (auto& a : self.stability.encoder) fn(a);
    fn(self.stability.mu);
    fn(self.stability.logvar);
    for (auto& a : self.stability.decoder) fn(a);
    fn(self.stability.decoder_out);
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    visit(*this, [&](Affine& a) {
      out.push_back(&a.weight);
      out.push_back(&a.bias);
    });
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    visit(*this, [&](const Affine& a) {
      out.push_back(&a.weight);
      out.push_back(&a.bias);
    });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
  }

  friend bool operator==(const Model& a, const Model& b) {
    auto pa = a.parameters();
    auto pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
      if (!(*pa[i] == *pb[i])) return false;
    }
    return true;
  }
};

inline void validate(const ModelConfig& c) {
  if (c.layer_sizes.size() < 2) throw ConfigError("model: layer_sizes needs an input width and at least one layer");
  for (int w : c.layer_sizes) {
    if (w <= 0) throw ConfigError("model: layer widths must be positive");
  }
  for (int w : c.encoder_hidden) {
    if (w <= 0) throw ConfigError("model: encoder widths must be positive");
  }
  for (int w : c.decoder_hidden) {
    if (w <= 0) throw ConfigError("model: decoder widths must be positive");
  }
  if (c.classes < 1) throw ConfigError("model: classes must be positive");
  if (c.latent_dim < 1) throw ConfigError("model: latent_dim must be positive");
  if (!(c.logvar_bound > 0.0)) throw ConfigError("model: logvar_bound must be positive");
}

namespace detail {

inline Affine glorot(Rng& rng, std::size_t in, std::size_t out) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w({in, out});
  for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  return Affine{std::move(w), Tensor({out}, 0.0)};
}

inline std::vector<Affine> stack(Rng& rng, std::size_t in, std::span<const int> widths) {
  std::vector<Affine> layers;
  for (int w : widths) {
    layers.push_back(glorot(rng, in, static_cast<std::size_t>(w)));
    in = static_cast<std::size_t>(w);
  }
  return layers;
}

inline void activate(Tensor& t, Activation act) {
  for (auto& v : t.values()) v = act == Activation::tanh ? std::tanh(v) : (v > 0.0 ? v : 0.0);
}

inline Tensor affine_values(const Tensor& x, const Affine& a) {
  if (x.cols() != a.in()) {
    throw ShapeError("affine: input " + shape_string(x.shape()) + " vs weight " + shape_string(a.weight.shape()));
  }
  Tensor out = diff::detail::matmul_values(x.rank() == 2 ? x : Tensor({1, x.size()}, x.data()), a.weight);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += a.bias[i % a.out()];
  return out;
}

}  // namespace detail

/// Glorot-uniform weights and zero biases, deterministic in `seed`.
inline Model init_model(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  Rng rng(seed, "model.init");
  Model m;
  m.config = config;
  m.seed = seed;
  const auto sizes = std::span(config.layer_sizes);
  m.extractor = detail::stack(rng, static_cast<std::size_t>(sizes.front()), sizes.subspan(1));
  const std::size_t df = m.feature_dim();
  const std::size_t dz = m.latent_dim();
  m.head = detail::glorot(rng, df, m.classes());

  std::size_t enc_in = df + m.classes();
  m.stability.encoder = detail::stack(rng, enc_in, config.encoder_hidden);
  if (!config.encoder_hidden.empty()) enc_in = static_cast<std::size_t>(config.encoder_hidden.back());
  m.stability.mu = detail::glorot(rng, enc_in, dz);
  m.stability.logvar = detail::glorot(rng, enc_in, dz);

  m.stability.decoder = detail::stack(rng, dz, config.decoder_hidden);
  const std::size_t dec_in = config.decoder_hidden.empty() ? dz : static_cast<std::size_t>(config.decoder_hidden.back());
  m.stability.decoder_out = detail::glorot(rng, dec_in, df);
  return m;
}

/// Parameters flattened by module, layer, row-major weight, then bias.
inline std::vector<double> flatten_parameters(const Model& m) {
  std::vector<double> out;
  out.reserve(m.parameter_count());
  for (const Tensor* t : m.parameters()) out.insert(out.end(), t->values().begin(), t->values().end());
  return out;
}

inline void load_parameters(Model& m, std::span<const double> flat) {
  if (flat.size() != m.parameter_count()) {
    throw ShapeError("load_parameters: expected " + std::to_string(m.parameter_count()) + " values, got " +
                     std::to_string(flat.size()));
  }
  std::size_t k = 0;
  for (Tensor* t : m.parameters()) {
    for (auto& v : t->values()) v = flat[k++];
  }
}

// ---------------------------------------------------------------------------
// Evaluation path (no graph, no randomness)

struct Classification {
  Tensor features;
  Tensor logits;
};

inline Classification forward_classify(const Model& m, const Tensor& x) {
  if (x.cols() != m.input_dim()) {
    throw ShapeError("forward_classify: input " + shape_string(x.shape()) + " but model expects width " +
                     std::to_string(m.input_dim()));
  }
  Tensor h = x.rank() == 2 ? x : Tensor({1, x.size()}, x.data());
  for (const auto& layer : m.extractor) {
    h = detail::affine_values(h, layer);
    detail::activate(h, m.config.activation);
  }
  Tensor logits = detail::affine_values(h, m.head);
  return {std::move(h), std::move(logits)};
}

// ---------------------------------------------------------------------------
// Graph path

struct AffineIds {
  NodeId weight;
  NodeId bias;
};

/// Graph leaves for every model parameter, mirroring Model's structure.
struct ModelIds {
  std::vector<AffineIds> extractor;
  AffineIds head;
  std::vector<AffineIds> encoder;
  AffineIds mu;
  AffineIds logvar;
  std::vector<AffineIds> decoder;
  AffineIds decoder_out;
  std::vector<NodeId> all;  // canonical parameter order
};

/// Structures pre-existing leaves (in canonical order) as ModelIds.
inline ModelIds bind(const Model& m, std::span<const NodeId> leaves) {
  if (leaves.size() != m.parameters().size()) throw ContractError("bind: leaf count does not match model");
  ModelIds ids;
  ids.all.assign(leaves.begin(), leaves.end());
  std::size_t k = 0;
  auto next = [&] {
    AffineIds a{leaves[k], leaves[k + 1]};
    k += 2;
    return a;
  };
  for (std::size_t i = 0; i < m.extractor.size(); ++i) ids.extractor.push_back(next());
  ids.head = next();
  for (std::size_t i = 0; i < m.stability.encoder.size(); ++i) ids.encoder.push_back(next());
  ids.mu = next();
  ids.logvar = next();
  for (std::size_t i = 0; i < m.stability.decoder.size(); ++i) ids.decoder.push_back(next());
  ids.decoder_out = next();
  return ids;
}

/// Adds every model parameter to `g` as a leaf.
inline ModelIds bind(const Model& m, Graph& g, bool requires_grad = true) {
  std::vector<NodeId> leaves;
  for (const Tensor* t : m.parameters()) leaves.push_back(g.leaf(*t, requires_grad));
  return bind(m, std::span<const NodeId>(leaves));
}

inline NodeId affine(Graph& g, NodeId x, const AffineIds& a) {
  return diff::add(g, diff::matmul(g, x, a.weight), a.bias);
}

inline NodeId activate(Graph& g, NodeId x, Activation act) {
  return act == Activation::tanh ? diff::tanh(g, x) : diff::relu(g, x);
}

inline NodeId extract(Graph& g, const Model& m, const ModelIds& ids, NodeId x) {
  if (g.value(x).cols() != m.input_dim()) {
    throw ShapeError("extract: input " + shape_string(g.value(x).shape()) + " but model expects width " +
                     std::to_string(m.input_dim()));
  }
  NodeId h = x;
  for (const auto& layer : ids.extractor) h = activate(g, affine(g, h, layer), m.config.activation);
  return h;
}

inline NodeId classify(Graph& g, const ModelIds& ids, NodeId features) { return affine(g, features, ids.head); }

struct StabilityNodes {
  NodeId mu;
  NodeId logvar;
  NodeId sigma;
  NodeId z;
  NodeId reconstruction;  // decoder output
  NodeId stabilized;      // (features + reconstruction) / 2
};

/// Encoder, reparameterised draw z = mu + sigma * eps with `eps` supplied by
/// the caller, decoder, and feature averaging. logvar is soft-bounded to
/// (-bound, bound) as bound * tanh(raw / bound).
inline StabilityNodes stability_forward(Graph& g, const Model& m, const ModelIds& ids, NodeId features,
                                        std::span<const int> labels, const Tensor& eps) {
  const Tensor& f = g.value(features);
  if (f.rank() != 2 || f.cols() != m.feature_dim()) {
    throw ShapeError("stability_forward: features " + shape_string(f.shape()) + " but feature width is " +
                     std::to_string(m.feature_dim()));
  }
  if (labels.size() != f.rows()) throw ShapeError("stability_forward: label count does not match batch");
  if (eps.rows() != f.rows() || eps.cols() != m.latent_dim() || eps.rank() != 2) {
    throw ShapeError("stability_forward: eps " + shape_string(eps.shape()) + " expected [" +
                     std::to_string(f.rows()) + "x" + std::to_string(m.latent_dim()) + "]");
  }
  const NodeId onehot = g.constant(diff::one_hot(labels, m.classes()));

  NodeId h = diff::concat(g, features, onehot);
  for (const auto& layer : ids.encoder) h = diff::tanh(g, affine(g, h, layer));
  StabilityNodes s{};
  s.mu = affine(g, h, ids.mu);
  const double bound = m.config.logvar_bound;
  s.logvar = diff::scale(g, diff::tanh(g, diff::scale(g, affine(g, h, ids.logvar), 1.0 / bound)), bound);
  s.sigma = diff::exp(g, diff::scale(g, s.logvar, 0.5));
  s.z = diff::add(g, s.mu, diff::mul(g, s.sigma, g.constant(eps)));

  NodeId r = s.z;
  for (const auto& layer : ids.decoder) r = diff::tanh(g, affine(g, r, layer));
  s.reconstruction = affine(g, r, ids.decoder_out);
  s.stabilized = diff::scale(g, diff::add(g, features, s.reconstruction), 0.5);
  return s;
}

/// Value-only stability pass on a batch of inputs (used for reporting the
/// stabilised-path accuracy).
struct StabilityValues {
  Tensor mu, sigma, z, reconstruction, stabilized, logits;
};

inline StabilityValues stability_values(const Model& m, const Tensor& x, std::span<const int> labels, const Tensor& eps) {
  Graph g;
  const ModelIds ids = bind(m, g, false);
  const NodeId f = extract(g, m, ids, g.constant(x));
  const StabilityNodes s = stability_forward(g, m, ids, f, labels, eps);
  const NodeId logits = classify(g, ids, s.stabilized);
  return {g.value(s.mu), g.value(s.sigma), g.value(s.z), g.value(s.reconstruction), g.value(s.stabilized),
          g.value(logits)};
}

}  // namespace safer::model
