#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "safer/diff.hpp"
#include "safer/metrics.hpp"
#include "safer/model.hpp"

using namespace safer;
using namespace safer::model;

namespace {

Tensor random_inputs(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  Tensor x({rows, cols});
  for (auto& v : x.values()) v = rng.uniform(lo, hi);
  return x;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.layer_sizes = {4, 5};
  c.classes = 3;
  c.latent_dim = 2;
  c.encoder_hidden = {4};
  c.decoder_hidden = {3};
  return c;
}

std::vector<Tensor> parameter_copies(const Model& m) {
  std::vector<Tensor> out;
  for (const Tensor* t : m.parameters()) out.push_back(*t);
  return out;
}

}  // namespace

TEST(InitModel, SameSeedIdenticalDifferentSeedDiffers) {
  const ModelConfig c;
  EXPECT_EQ(init_model(c, 11), init_model(c, 11));
  EXPECT_FALSE(init_model(c, 11) == init_model(c, 12));
}

TEST(InitModel, ZeroBiasesAndBoundedWeights) {
  const Model m = init_model(ModelConfig{}, 3);
  Model::visit(m, [](const Affine& a) {
    for (double b : a.bias.values()) EXPECT_EQ(b, 0.0);
    const double bound = std::sqrt(6.0 / static_cast<double>(a.in() + a.out()));
    for (double w : a.weight.values()) EXPECT_LE(std::abs(w), bound);
  });
  EXPECT_EQ(m.head.out(), 8u);
  EXPECT_EQ(m.stability.decoder_out.out(), m.feature_dim());
  EXPECT_EQ(m.stability.encoder.front().in(), m.feature_dim() + m.classes());
}

TEST(InitModel, InitialLogitsStaySmall) {
  const Model m = init_model(ModelConfig{}, 5);
  Rng rng(5, "test.inputs");
  const Tensor x = random_inputs(rng, 1000, 8, -3.0, 3.0);
  for (double v : forward_classify(m, x).logits.values()) EXPECT_LT(std::abs(v), 5.0);
}

TEST(InitModel, RejectsBadConfig) {
  ModelConfig c;
  c.layer_sizes = {8};
  EXPECT_THROW(init_model(c, 0), ConfigError);
  c = ModelConfig{};
  c.latent_dim = 0;
  EXPECT_THROW(init_model(c, 0), ConfigError);
  c = ModelConfig{};
  c.encoder_hidden = {-1};
  EXPECT_THROW(init_model(c, 0), ConfigError);
}

TEST(ForwardClassify, ZeroHeadTiesGoToLowestClass) {
  Model m = init_model(ModelConfig{}, 1);
  for (auto& v : m.head.weight.values()) v = 0.0;
  Rng rng(1, "test.inputs");
  const Tensor x = random_inputs(rng, 20, 8, -1.0, 1.0);
  const auto out = forward_classify(m, x);
  for (double v : out.logits.values()) EXPECT_EQ(v, 0.0);
  for (std::size_t r = 0; r < out.logits.rows(); ++r) EXPECT_EQ(metrics::argmax(out.logits.row(r)), 0u);
}

TEST(ForwardClassify, BatchRowsMatchSingleRows) {
  const Model m = init_model(ModelConfig{}, 2);
  Rng rng(2, "test.inputs");
  const Tensor x = random_inputs(rng, 7, 8, -2.0, 2.0);
  const auto batch = forward_classify(m, x);
  for (std::size_t r = 0; r < 7; ++r) {
    const auto single = forward_classify(m, Tensor({1, 8}, std::vector<double>(x.row(r).begin(), x.row(r).end())));
    for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(single.logits(0, k), batch.logits(r, k));
  }
}

TEST(ForwardClassify, RepeatedEvaluationIsIdentical) {
  const Model m = init_model(ModelConfig{}, 4);
  Rng rng(4, "test.inputs");
  const Tensor x = random_inputs(rng, 50, 8, -2.0, 2.0);
  EXPECT_EQ(forward_classify(m, x).logits, forward_classify(m, x).logits);
}

TEST(ForwardClassify, GraphPathMatchesValuePath) {
  const Model m = init_model(ModelConfig{}, 6);
  Rng rng(6, "test.inputs");
  const Tensor x = random_inputs(rng, 9, 8, -2.0, 2.0);
  Graph g;
  const auto ids = bind(m, g);
  const auto logits = classify(g, ids, extract(g, m, ids, g.constant(x)));
  const auto direct = forward_classify(m, x).logits;
  for (std::size_t i = 0; i < direct.size(); ++i) EXPECT_NEAR(g.value(logits)[i], direct[i], 1e-12);
}

TEST(ForwardClassify, WrongInputWidthIsShapeError) {
  const Model m = init_model(ModelConfig{}, 0);
  EXPECT_THROW(forward_classify(m, Tensor({3, 7})), ShapeError);
}

TEST(Stability, ZeroNoiseGivesZEqualMu) {
  const Model m = init_model(ModelConfig{}, 8);
  Rng rng(8, "test.inputs");
  const Tensor x = random_inputs(rng, 10, 8, -2.0, 2.0);
  const std::vector<int> y{0, 1, 2, 3, 4, 5, 6, 7, 0, 1};
  const auto v = stability_values(m, x, y, Tensor({10, 8}, 0.0));
  EXPECT_EQ(v.z, v.mu);
}

TEST(Stability, CopyingDecoderReturnsFeatures) {
  ModelConfig c;
  c.latent_dim = 32;
  c.encoder_hidden = {};
  c.decoder_hidden = {};
  Model m = init_model(c, 9);
  // mu = features, decoder output = z.
  for (auto& v : m.stability.mu.weight.values()) v = 0.0;
  for (auto& v : m.stability.decoder_out.weight.values()) v = 0.0;
  for (std::size_t i = 0; i < 32; ++i) {
    m.stability.mu.weight(i, i) = 1.0;
    m.stability.decoder_out.weight(i, i) = 1.0;
  }
  Rng rng(9, "test.inputs");
  const Tensor x = random_inputs(rng, 6, 8, -2.0, 2.0);
  const std::vector<int> y{0, 1, 2, 3, 4, 5};
  const auto v = stability_values(m, x, y, Tensor({6, 32}, 0.0));
  const Tensor features = forward_classify(m, x).features;
  EXPECT_EQ(v.reconstruction, features);
  EXPECT_EQ(v.stabilized, features);
}

TEST(Stability, StabilizedIsMeanOfFeaturesAndReconstruction) {
  const Model m = init_model(ModelConfig{}, 10);
  Rng rng(10, "test.inputs");
  const Tensor x = random_inputs(rng, 16, 8, -3.0, 3.0);
  std::vector<int> y(16);
  for (int i = 0; i < 16; ++i) y[i] = i % 8;
  Tensor eps({16, 8});
  for (auto& v : eps.values()) v = rng.normal();
  const auto v = stability_values(m, x, y, eps);
  const Tensor features = forward_classify(m, x).features;
  for (std::size_t i = 0; i < features.size(); ++i) {
    EXPECT_NEAR(v.stabilized[i], 0.5 * (features[i] + v.reconstruction[i]), 1e-12);
  }
}

TEST(Stability, SigmaPositiveEvenForExtremeParameters) {
  Model m = init_model(ModelConfig{}, 12);
  for (auto& v : m.stability.logvar.weight.values()) v *= 1e4;
  Rng rng(12, "test.inputs");
  const Tensor x = random_inputs(rng, 32, 8, -3.0, 3.0);
  std::vector<int> y(32, 3);
  const auto v = stability_values(m, x, y, Tensor({32, 8}, 0.0));
  for (double s : v.sigma.values()) {
    EXPECT_GT(s, 0.0);
    EXPECT_TRUE(std::isfinite(s));
  }
}

TEST(Stability, ShapeAndLabelErrors) {
  const Model m = init_model(ModelConfig{}, 13);
  const Tensor x({2, 8}, 0.5);
  EXPECT_THROW(stability_values(m, x, std::vector<int>{0, 8}, Tensor({2, 8})), ContractError);
  EXPECT_THROW(stability_values(m, x, std::vector<int>{0}, Tensor({2, 8})), ShapeError);
  EXPECT_THROW(stability_values(m, x, std::vector<int>{0, 1}, Tensor({2, 7})), ShapeError);
}

TEST(Stability, ReconstructionGradientMatchesFiniteDifferences) {
  const Model base = init_model(toy_config(), 14);
  Rng rng(14, "test.inputs");
  const Tensor x = random_inputs(rng, 5, 4, -1.5, 1.5);
  const std::vector<int> y{0, 2, 1, 1, 0};
  Tensor eps({5, 2});
  for (auto& v : eps.values()) v = rng.normal();
  auto fn = [&](Graph& g, std::span<const NodeId> leaves) {
    const auto ids = bind(base, leaves);
    const NodeId f = extract(g, base, ids, g.constant(x));
    const auto s = stability_forward(g, base, ids, f, y, eps);
    return diff::mean(g, diff::square(g, diff::sub(g, f, s.reconstruction)));
  };
  EXPECT_LT(diff::finite_difference_check(fn, parameter_copies(base), 1e-5).max_rel_error, 1e-5);
}

TEST(Parameters, FlattenOrderAndRoundTrip) {
  Model m = init_model(toy_config(), 15);
  const auto flat = flatten_parameters(m);
  ASSERT_EQ(flat.size(), m.parameter_count());
  EXPECT_EQ(flat[0], m.extractor[0].weight(0, 0));
  EXPECT_EQ(flat[1], m.extractor[0].weight(0, 1));
  EXPECT_EQ(flat[m.extractor[0].weight.size()], m.extractor[0].bias[0]);
  EXPECT_EQ(flat.back(), m.stability.decoder_out.bias[m.stability.decoder_out.bias.size() - 1]);

  Model other = init_model(toy_config(), 16);
  load_parameters(other, flat);
  EXPECT_EQ(other, m);
  EXPECT_THROW(load_parameters(other, std::vector<double>(flat.size() - 1)), ShapeError);
}
