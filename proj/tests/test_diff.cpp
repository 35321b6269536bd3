#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "safer/diff.hpp"
#include "safer/rng.hpp"

using namespace safer;
using namespace safer::diff;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Reduces any node to a scalar with fixed random weights, so every output
// coordinate contributes a distinct amount.
NodeId weighted_sum(Graph& g, NodeId x, Rng& rng) {
  const Tensor w = random_tensor(rng, g.value(x).shape(), 0.5, 1.5);
  return sum(g, mul(g, x, g.constant(w)));
}

}  // namespace

TEST(Apply, MatmulIdentity) {
  Graph g;
  const auto a = g.leaf(Tensor::matrix({{1, 2, 3}, {4, 5, 6}}));
  const auto i3 = g.constant(Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  EXPECT_EQ(g.value(matmul(g, a, i3)), g.value(a));

  const auto pad = g.constant(Tensor::matrix({{1, 0}, {0, 1}, {0, 0}}));
  EXPECT_EQ(g.value(matmul(g, a, pad)), Tensor::matrix({{1, 2}, {4, 5}}));
}

TEST(Apply, Relu) {
  Graph g;
  const auto x = g.leaf(Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(g.value(relu(g, x)), Tensor::vector({0, 0, 2}));
}

TEST(Apply, UniformLogitsCrossEntropyIsLogK) {
  Graph g;
  const auto logits = g.leaf(Tensor({1, 4}, 0.0));
  const std::vector<int> y{2};
  EXPECT_NEAR(g.scalar(softmax_cross_entropy(g, logits, y)), std::log(4.0), 1e-15);
  EXPECT_NEAR(std::log(4.0), 1.386294, 1e-6);
}

TEST(Apply, ShapeMismatchNamesOpAndShapes) {
  Graph g;
  const auto a = g.leaf(Tensor({2, 3}));
  const auto b = g.leaf(Tensor({2, 2}));
  try {
    matmul(g, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
  }
  EXPECT_THROW(add(g, a, b), ShapeError);
  EXPECT_THROW(concat(g, a, g.leaf(Tensor({3, 1}))), ShapeError);
}

TEST(Apply, LogOfNonPositiveIsDomainError) {
  Graph g;
  EXPECT_THROW(log(g, g.leaf(Tensor::vector({1.0, 0.0}))), DomainError);
  EXPECT_THROW(log(g, g.leaf(Tensor::vector({-1.0}))), DomainError);
}

TEST(Apply, InputsPrecedeNode) {
  Graph g;
  Rng rng(3);
  const auto x = g.leaf(random_tensor(rng, {3, 4}));
  const auto w = g.leaf(random_tensor(rng, {4, 2}));
  const auto h = tanh(g, matmul(g, x, w));
  const auto out = mean(g, square(g, add(g, h, g.constant(Tensor::vector({1, 2})))));
  for (std::size_t k = 0; k <= out.index; ++k) {
    for (NodeId in : g.inputs(NodeId{k})) EXPECT_LT(in.index, k);
  }
  EXPECT_THROW(g.apply(Op::relu, {NodeId{999}}), ContractError);
}

TEST(Apply, ForwardValuesStayFinite) {
  Graph g;
  const auto x = g.leaf(Tensor::vector({-700, 0, 700}));
  const auto logits = g.leaf(Tensor::matrix({{1000, -1000, 0}}));
  EXPECT_TRUE(g.value(tanh(g, x)).all_finite());
  const std::vector<int> y{1};
  EXPECT_TRUE(std::isfinite(g.scalar(softmax_cross_entropy(g, logits, y))));
}

TEST(Backward, SumOfSquares) {
  Graph g;
  const auto x = g.leaf(Tensor::vector({3}));
  const auto grads = g.backward(sum(g, square(g, x)));
  EXPECT_EQ(grads.at(x), Tensor::vector({6}));
}

TEST(Backward, Mean) {
  Graph g;
  const auto x = g.leaf(Tensor::vector({1, -2, 5, 7}));
  EXPECT_EQ(g.backward(mean(g, x)).at(x), Tensor::vector({0.25, 0.25, 0.25, 0.25}));
}

TEST(Backward, CrossEntropyGradientIsSoftmaxMinusOneHot) {
  // Hand oracle: e^1, e^2, e^3 normalised.
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  const std::vector<double> p{std::exp(1.0) / z, std::exp(2.0) / z, std::exp(3.0) / z};
  EXPECT_NEAR(p[0], 0.09003057317038046, 1e-15);
  EXPECT_NEAR(p[2], 0.6652409557748219, 1e-15);

  Graph g;
  const auto logits = g.leaf(Tensor::matrix({{1, 2, 3}}));
  const std::vector<int> y{0};
  const auto grad = g.backward(softmax_cross_entropy(g, logits, y)).at(logits);
  EXPECT_NEAR(grad[0], p[0] - 1.0, 1e-15);
  EXPECT_NEAR(grad[1], p[1], 1e-15);
  EXPECT_NEAR(grad[2], p[2], 1e-15);
}

TEST(Backward, NonScalarOutputIsContractError) {
  Graph g;
  const auto x = g.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(g.backward(square(g, x)), ContractError);
}

TEST(Backward, RepeatedCallsGiveSameGradient) {
  Graph g;
  const auto x = g.leaf(Tensor::vector({1.5, -0.5}));
  const auto out = sum(g, mul(g, tanh(g, x), x));
  const auto first = g.backward(out).at(x);
  const auto second = g.backward(out).at(x);
  EXPECT_EQ(first, second);
}

TEST(Backward, SharedNodeAccumulates) {
  Graph g;
  const auto x = g.leaf(Tensor::vector({-1.5, 0.25, 2.0}));
  const auto via_mul = g.backward(sum(g, mul(g, x, x))).at(x);
  const auto via_square = g.backward(sum(g, square(g, x))).at(x);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(via_mul[i], via_square[i]);
    EXPECT_DOUBLE_EQ(via_mul[i], 2.0 * g.value(x)[i]);
  }
}

TEST(Backward, ConstantsGetNoGradientAndUnreachedLeavesGetZeros) {
  Graph g;
  const auto x = g.leaf(Tensor::vector({1, 2}));
  const auto unused = g.leaf(Tensor::vector({5, 5, 5}));
  const auto c = g.constant(Tensor::vector({3, 4}));
  const auto grads = g.backward(sum(g, mul(g, x, c)));
  EXPECT_EQ(grads.at(x), Tensor::vector({3, 4}));
  EXPECT_EQ(grads.at(unused), Tensor::vector({0, 0, 0}));
  EXPECT_FALSE(grads.has(c));
  EXPECT_THROW(grads.at(c), ContractError);
}

TEST(Backward, L2NormAtZeroHasZeroGradient) {
  Graph g;
  const auto x = g.leaf(Tensor::matrix({{0, 0}, {3, 4}}));
  const auto n = l2_norm(g, x);
  EXPECT_EQ(g.value(n), Tensor::vector({0, 5}));
  const auto grad = g.backward(sum(g, n)).at(x);
  EXPECT_EQ(grad, Tensor::matrix({{0, 0}, {0.6, 0.8}}));
}

TEST(CrossEntropy, ShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor logits = random_tensor(rng, {3, 5});
    const std::vector<int> y{0, 3, 4};
    const double c = rng.uniform(-50.0, 50.0);
    Tensor shifted = logits;
    for (auto& v : shifted.values()) v += c;
    Graph g;
    const double a = g.scalar(softmax_cross_entropy(g, g.constant(logits), y));
    const double b = g.scalar(softmax_cross_entropy(g, g.constant(shifted), y));
    EXPECT_NEAR(a, b, 1e-12);
  }
}

TEST(CrossEntropy, SoftTargetRejectsNegativeMass) {
  Graph g;
  const auto logits = g.leaf(Tensor({1, 3}, 0.0));
  EXPECT_THROW(softmax_cross_entropy(g, logits, Tensor::matrix({{0.5, 0.7, -0.2}})), DomainError);
  EXPECT_THROW(softmax_cross_entropy(g, logits, Tensor::matrix({{0.5, 0.5}})), ShapeError);
}

TEST(FiniteDifference, SquareAtThree) {
  const auto r = finite_difference_check([](Graph& g, std::span<const NodeId> x) { return sum(g, square(g, x[0])); },
                                         {Tensor::vector({3.0})}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(FiniteDifference, RejectsBadEpsAndNonFiniteValues) {
  auto f = [](Graph& g, std::span<const NodeId> x) { return sum(g, x[0]); };
  EXPECT_THROW(finite_difference_check(f, {Tensor::vector({1.0})}, 0.0), ContractError);
  EXPECT_THROW(finite_difference_check(f, {Tensor::vector({1.0})}, -1e-5), ContractError);
  auto blow = [](Graph& g, std::span<const NodeId> x) { return sum(g, exp(g, x[0])); };
  EXPECT_THROW(finite_difference_check(blow, {Tensor::vector({800.0})}, 1e-5), DomainError);
}

TEST(FiniteDifference, DetectsAWrongGradient) {
  // A constant copy hides half of d(x^2)/dx from the tape.
  auto f = [](Graph& g, std::span<const NodeId> x) {
    const auto detached = g.constant(g.value(x[0]));
    return sum(g, mul(g, x[0], detached));
  };
  const auto r = finite_difference_check(f, {Tensor::vector({2.0})}, 1e-5);
  EXPECT_GT(r.max_rel_error, 0.1);
}

// Every op against central differences on 100 random instances each.
class OpGradient : public ::testing::TestWithParam<Op> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const Op op = GetParam();
  Rng rng(derive_seed(2024, op_name(op)));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.below(3), n = 1 + rng.below(4), k = 1 + rng.below(3);
    const std::uint64_t wseed = rng.below(1u << 30);
    std::vector<Tensor> point;
    GraphFunction fn;
    auto reduce = [wseed](Graph& g, NodeId out) {
      Rng wrng(wseed);
      return weighted_sum(g, out, wrng);
    };
    switch (op) {
      case Op::matmul:
        point = {random_tensor(rng, {m, k}), random_tensor(rng, {k, n})};
        fn = [reduce](Graph& g, std::span<const NodeId> x) { return reduce(g, matmul(g, x[0], x[1])); };
        break;
      case Op::add:
      case Op::sub: {
        const bool row = rng.below(2) == 1;
        point = {random_tensor(rng, {m, n}), row ? random_tensor(rng, {n}) : random_tensor(rng, {m, n})};
        fn = [reduce, op](Graph& g, std::span<const NodeId> x) {
          return reduce(g, op == Op::add ? add(g, x[0], x[1]) : sub(g, x[0], x[1]));
        };
        break;
      }
      case Op::mul_elementwise:
        point = {random_tensor(rng, {m, n}), random_tensor(rng, {m, n})};
        fn = [reduce](Graph& g, std::span<const NodeId> x) { return reduce(g, mul(g, x[0], x[1])); };
        break;
      case Op::scalar_mul: {
        const double s = rng.uniform(-2.0, 2.0);
        point = {random_tensor(rng, {m, n})};
        fn = [reduce, s](Graph& g, std::span<const NodeId> x) { return reduce(g, scale(g, x[0], s)); };
        break;
      }
      case Op::relu:
        point = {random_tensor(rng, {m, n})};
        fn = [reduce](Graph& g, std::span<const NodeId> x) { return reduce(g, relu(g, x[0])); };
        break;
      case Op::tanh:
        point = {random_tensor(rng, {m, n})};
        fn = [reduce](Graph& g, std::span<const NodeId> x) { return reduce(g, tanh(g, x[0])); };
        break;
      case Op::exp:
        point = {random_tensor(rng, {m, n})};
        fn = [reduce](Graph& g, std::span<const NodeId> x) { return reduce(g, exp(g, x[0])); };
        break;
      case Op::log:
        point = {random_tensor(rng, {m, n}, 0.2, 2.0)};
        fn = [reduce](Graph& g, std::span<const NodeId> x) { return reduce(g, log(g, x[0])); };
        break;
      case Op::square:
        point = {random_tensor(rng, {m, n})};
        fn = [reduce](Graph& g, std::span<const NodeId> x) { return reduce(g, square(g, x[0])); };
        break;
      case Op::mean:
        point = {random_tensor(rng, {m, n})};
        fn = [](Graph& g, std::span<const NodeId> x) { return mean(g, square(g, x[0])); };
        break;
      case Op::sum:
        point = {random_tensor(rng, {m, n})};
        fn = [](Graph& g, std::span<const NodeId> x) { return sum(g, tanh(g, x[0])); };
        break;
      case Op::l2_norm:
        point = {random_tensor(rng, {m, n})};
        fn = [reduce](Graph& g, std::span<const NodeId> x) { return reduce(g, l2_norm(g, x[0])); };
        break;
      case Op::concat:
        point = {random_tensor(rng, {m, n}), random_tensor(rng, {m, k})};
        fn = [reduce](Graph& g, std::span<const NodeId> x) { return reduce(g, concat(g, x[0], x[1])); };
        break;
      case Op::softmax_logsumexp_ce: {
        const std::size_t classes = 2 + rng.below(4);
        Tensor q = random_tensor(rng, {m, classes}, 0.0, 1.0);
        if (rng.below(2) == 1) q[0] = 0.0;  // exercises 0 log 0
        point = {random_tensor(rng, {m, classes})};
        fn = [q](Graph& g, std::span<const NodeId> x) { return softmax_cross_entropy(g, x[0], q); };
        break;
      }
      case Op::leaf:
        GTEST_SKIP();
    }
    worst = std::max(worst, finite_difference_check(fn, point, 1e-5).max_rel_error);
  }
  EXPECT_LT(worst, 1e-5) << op_name(op);
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient,
                         ::testing::Values(Op::matmul, Op::add, Op::sub, Op::mul_elementwise, Op::scalar_mul, Op::relu,
                                           Op::tanh, Op::exp, Op::log, Op::mean, Op::sum, Op::l2_norm, Op::concat,
                                           Op::softmax_logsumexp_ce, Op::square),
                         [](const auto& info) { return std::string(op_name(info.param)); });
