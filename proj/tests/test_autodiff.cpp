#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "dpalab/attention.hpp"
#include "dpalab/autodiff.hpp"
#include "dpalab/gradcheck.hpp"
#include "dpalab/rng.hpp"

using namespace dpalab;

namespace {

constexpr double kTol = 1e-4;

Tensor rand_matrix(std::size_t m, std::size_t n, SplitMix64& rng, double s = 1.0) {
  return Tensor::gaussian(m, n, s, rng);
}

// Random linear functional of the output, so every output entry carries weight.
Var probe(Var y, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor w = Tensor::gaussian(y.rows(), y.cols(), 1.0, rng);
  return sum_all(elementwise_mul(y, y.graph->constant(std::move(w))));
}

// Triple-loop reference product.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

}  // namespace

TEST(Matmul, MatchesTripleLoop) {
  SplitMix64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(9), n = 1 + rng.below(9);
    Tensor a = rand_matrix(m, k, rng), b = rand_matrix(k, n, rng);
    Tensor c = eval([&](Graph& g) { return matmul(g.constant(a), g.constant(b)); });
    EXPECT_LE(max_abs_diff(c, naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, NtMatchesExplicitTranspose) {
  SplitMix64 rng(2);
  Tensor a = rand_matrix(4, 6, rng), b = rand_matrix(5, 6, rng);
  Tensor bt({6, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 6; ++j) bt(j, i) = b(i, j);
  Tensor c = eval([&](Graph& g) { return matmul_nt(g.constant(a), g.constant(b)); });
  EXPECT_LE(max_abs_diff(c, naive_matmul(a, bt)), 1e-12);
}

TEST(Matmul, IdentityIsNeutral) {
  SplitMix64 rng(3);
  Tensor a = rand_matrix(3, 3, rng);
  Tensor c = eval([&](Graph& g) { return matmul(g.constant(a), g.constant(Tensor::identity(3))); });
  EXPECT_TRUE(values_equal(a, c));
}

TEST(Matmul, RejectsInnerMismatch) {
  Graph g;
  Var a = g.constant(Tensor::zeros(2, 3));
  Var b = g.constant(Tensor::zeros(4, 2));
  EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(Softmax, RowsSumToOneAndMatchExpSum) {
  SplitMix64 rng(4);
  Tensor x = rand_matrix(5, 7, rng, 3.0);
  Tensor y = eval([&](Graph& g) { return softmax_rows(g.constant(x)); });
  for (std::size_t i = 0; i < 5; ++i) {
    double z = 0, s = 0;
    for (std::size_t j = 0; j < 7; ++j) z += std::exp(x(i, j));
    for (std::size_t j = 0; j < 7; ++j) {
      EXPECT_NEAR(y(i, j), std::exp(x(i, j)) / z, 1e-14);
      s += y(i, j);
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Softmax, ShiftInvariantAndStableForLargeInputs) {
  Tensor x = Tensor::matrix({{1000.0, 1001.0, 1002.0}});
  Tensor y = eval([&](Graph& g) { return softmax_rows(g.constant(x)); });
  Tensor ref = eval([&](Graph& g) { return softmax_rows(g.constant(Tensor::matrix({{0.0, 1.0, 2.0}}))); });
  EXPECT_LE(max_abs_diff(y, ref), 1e-15);
}

TEST(Softmax, NanInputRaises) {
  Graph g;
  Var x = g.constant(Tensor::matrix({{0.0, std::nan("")}}));
  EXPECT_THROW(softmax_rows(x), NumericError);
}

TEST(Tanh, MatchesTaylorNearZero) {
  Tensor x = Tensor::matrix({{1e-3, -2e-3, 5e-4}});
  Tensor y = eval([&](Graph& g) { return tanh_elem(g.constant(x)); });
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x.data[i];
    EXPECT_NEAR(y.data[i], v - v * v * v / 3 + 2 * std::pow(v, 5) / 15, 1e-15);
  }
}

TEST(Bce, ZeroLogitsGiveLn2) {
  Tensor t({3, 4}, 0.0);
  t(1, 2) = 1.0;
  Tensor y = eval([&](Graph& g) { return bce_with_logits_mean(g.constant(Tensor({3, 4}, 0.0)), t); });
  EXPECT_NEAR(y.data[0], std::log(2.0), 1e-12);
}

TEST(Bce, PositiveWeightScalesOnlyPositiveEntries) {
  Tensor t({2, 3}, 0.0);
  t(0, 1) = 1.0;
  t(1, 0) = 1.0;
  // Zero logits: each entry costs ln 2, positives count 3 times.
  Tensor y = eval([&](Graph& g) { return bce_with_logits_mean(g.constant(Tensor({2, 3}, 0.0)), t, 3.0); });
  EXPECT_NEAR(y.data[0], (4.0 + 2.0 * 3.0) * std::log(2.0) / 6.0, 1e-12);
}

TEST(LayerNorm, RowsHaveZeroMeanUnitVariance) {
  SplitMix64 rng(7);
  Tensor x = rand_matrix(4, 9, rng);
  Tensor y = eval([&](Graph& g) { return layer_norm_rows(g.constant(x), 0.0); });
  for (std::size_t i = 0; i < 4; ++i) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 9; ++j) mu += y(i, j) / 9.0;
    for (std::size_t j = 0; j < 9; ++j) var += (y(i, j) - mu) * (y(i, j) - mu) / 9.0;
    EXPECT_NEAR(mu, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-12);
  }
}

TEST(LayerNorm, InvariantToRowShiftAndPositiveScale) {
  SplitMix64 rng(8);
  Tensor x = rand_matrix(3, 6, rng);
  Tensor x2 = x;
  for (std::size_t j = 0; j < 6; ++j) {
    x2(0, j) = 2.5 * x(0, j) + 4.0;
    x2(2, j) = 0.5 * x(2, j) - 1.0;
  }
  Tensor a = eval([&](Graph& g) { return layer_norm_rows(g.constant(x), 0.0); });
  Tensor b = eval([&](Graph& g) { return layer_norm_rows(g.constant(x2), 0.0); });
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-12);
}

TEST(Bce, SaturatedLogitsAreFinite) {
  Tensor z = Tensor::matrix({{800.0, -800.0}});
  Tensor t = Tensor::matrix({{1.0, 0.0}});
  Tensor y = eval([&](Graph& g) { return bce_with_logits_mean(g.constant(z), t); });
  EXPECT_NEAR(y.data[0], 0.0, 1e-300);
}

TEST(Graph, BackwardTwiceIsRejected) {
  Tensor w = Tensor::filled(1, 1, 2.0);
  w.requires_grad = true;
  Graph g;
  Var out = sum_all(g.leaf(w));
  g.backward(out);
  EXPECT_THROW(g.backward(out), GraphError);
}

TEST(Graph, MixingGraphsIsRejected) {
  Graph g1, g2;
  Var a = g1.constant(Tensor::zeros(1, 1));
  Var b = g2.constant(Tensor::zeros(1, 1));
  EXPECT_THROW(add(a, b), GraphError);
}

TEST(Graph, FrozenLeavesReceiveNoGradient) {
  Tensor w = Tensor::filled(2, 2, 1.0);
  Tensor frozen = Tensor::filled(2, 2, 3.0);
  w.requires_grad = true;
  Graph g;
  Var out = sum_all(matmul(g.leaf(w), g.leaf(frozen)));
  g.backward(out);
  EXPECT_TRUE(w.grad.has_value());
  EXPECT_FALSE(frozen.grad.has_value());
}

TEST(Graph, GradientsAccumulateAcrossUses) {
  Tensor w = Tensor::filled(1, 1, 3.0);
  w.requires_grad = true;
  Graph g;
  Var x = g.leaf(w);
  g.backward(sum_all(elementwise_mul(x, x)));  // d/dw w^2 = 2w
  EXPECT_DOUBLE_EQ((*w.grad)[0], 6.0);
}

// --- Gradcheck of every differentiable op at 10 random points -------------

struct UnaryCase {
  const char* name;
  std::function<Var(Var)> op;
  std::size_t m, n;
};

class UnaryGradcheck : public ::testing::TestWithParam<UnaryCase> {};

TEST_P(UnaryGradcheck, CentralDifferences) {
  const UnaryCase& c = GetParam();
  for (std::uint64_t point = 0; point < 10; ++point) {
    SplitMix64 rng(100 + point);
    Tensor x = rand_matrix(c.m, c.n, rng);
    const double err = gradcheck([&](Graph& g) { return probe(c.op(g.leaf(x)), point); }, {&x});
    EXPECT_LE(err, kTol) << c.name << " point " << point;
  }
}

INSTANTIATE_TEST_SUITE_P(
    Ops, UnaryGradcheck,
    ::testing::Values(
        UnaryCase{"softmax_rows", [](Var x) { return softmax_rows(x); }, 3, 5},
        UnaryCase{"tanh", [](Var x) { return tanh_elem(x); }, 3, 4},
        UnaryCase{"sigmoid", [](Var x) { return sigmoid_elem(x); }, 3, 4},
        UnaryCase{"abs", [](Var x) { return abs_elem(x); }, 3, 4},
        UnaryCase{"scale", [](Var x) { return scale(x, -1.7); }, 2, 3},
        UnaryCase{"add_scalar", [](Var x) { return add_scalar(x, 0.3); }, 2, 3},
        UnaryCase{"transpose", [](Var x) { return transpose(x); }, 2, 5},
        UnaryCase{"slice_rows", [](Var x) { return slice_rows(x, 1, 3); }, 4, 3},
        UnaryCase{"slice_cols", [](Var x) { return slice_cols(x, 1, 4); }, 3, 5},
        UnaryCase{"gather_rows", [](Var x) { return gather_rows(x, {2, 0, 2}); }, 3, 3},
        UnaryCase{"mean_rows", [](Var x) { return mean_rows(x); }, 4, 3},
        UnaryCase{"sum_all", [](Var x) { return sum_all(x); }, 3, 3},
        UnaryCase{"mean_all", [](Var x) { return mean_all(x); }, 3, 3},
        UnaryCase{"l2_normalize_rows", [](Var x) { return l2_normalize_rows(x); }, 3, 4},
        UnaryCase{"broadcast_row", [](Var x) { return broadcast_row_vector(slice_rows(x, 0, 1), 4); }, 2, 3},
        UnaryCase{"broadcast_col", [](Var x) { return broadcast_col_vector(slice_cols(x, 0, 1), 4); }, 3, 2},
        UnaryCase{"bce", [](Var x) {
                    Tensor t({x.rows(), x.cols()}, 0.0);
                    t(0, 1) = 1.0;
                    return bce_with_logits_mean(x, t);
                  }, 3, 4},
        UnaryCase{"bce_weighted", [](Var x) {
                    Tensor t({x.rows(), x.cols()}, 0.0);
                    t(1, 2) = 1.0;
                    return bce_with_logits_mean(x, t, 4.0);
                  }, 3, 4},
        UnaryCase{"layer_norm_rows", [](Var x) { return layer_norm_rows(x); }, 3, 5}),
    [](const ::testing::TestParamInfo<UnaryCase>& info) { return std::string(info.param.name); });

TEST(BinaryGradcheck, ArithmeticAndProducts) {
  using BinOp = std::function<Var(Var, Var)>;
  struct Case {
    const char* name;
    BinOp op;
    std::size_t am, an, bm, bn;
  };
  const std::vector<Case> cases = {
      {"matmul", [](Var a, Var b) { return matmul(a, b); }, 3, 4, 4, 2},
      {"matmul_nt", [](Var a, Var b) { return matmul_nt(a, b); }, 3, 4, 5, 4},
      {"add", [](Var a, Var b) { return add(a, b); }, 3, 2, 3, 2},
      {"sub", [](Var a, Var b) { return sub(a, b); }, 3, 2, 3, 2},
      {"mul", [](Var a, Var b) { return elementwise_mul(a, b); }, 3, 2, 3, 2},
      {"concat_rows", [](Var a, Var b) { return concat_rows({a, b}); }, 2, 3, 4, 3},
      {"concat_cols", [](Var a, Var b) { return concat_cols({a, b}); }, 3, 2, 3, 4},
      {"linear", [](Var a, Var b) { return linear(a, b, slice_rows(b, 0, 1)); }, 3, 4, 4, 4},
  };
  for (const Case& c : cases) {
    for (std::uint64_t point = 0; point < 10; ++point) {
      SplitMix64 rng(200 + point);
      Tensor a = rand_matrix(c.am, c.an, rng), b = rand_matrix(c.bm, c.bn, rng);
      const double err =
          gradcheck([&](Graph& g) { return probe(c.op(g.leaf(a), g.leaf(b)), point); }, {&a, &b});
      EXPECT_LE(err, kTol) << c.name << " point " << point;
    }
  }
}

TEST(BinaryGradcheck, SharedInputFeedsBothOperands) {
  SplitMix64 rng(5);
  Tensor a = rand_matrix(3, 3, rng);
  const double err = gradcheck([&](Graph& g) {
    Var x = g.leaf(a);
    return probe(matmul(x, softmax_rows(x)), 9);
  }, {&a});
  EXPECT_LE(err, kTol);
}

// --- Property: gradient of a sum of two graphs is the sum of gradients -----

TEST(Property, GradientIsLinearInTheObjective) {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    SplitMix64 rng(300 + seed);
    Tensor x = rand_matrix(2 + rng.below(3), 2 + rng.below(3), rng);
    x.requires_grad = true;
    const auto grad_of = [&](const std::function<Var(Var)>& f) {
      x.grad.reset();
      Graph g;
      g.backward(f(g.leaf(x)));
      return *x.grad;
    };
    const auto f1 = [](Var v) { return sum_all(tanh_elem(v)); };
    const auto f2 = [](Var v) { return sum_all(elementwise_mul(v, v)); };
    const auto g1 = grad_of(f1), g2 = grad_of(f2);
    const auto g12 = grad_of([&](Var v) { return add(f1(v), f2(v)); });
    for (std::size_t i = 0; i < g12.size(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-12);
  }
}

TEST(Counters, MatmulAndSoftmaxConventions) {
  Graph g;
  Var a = g.constant(Tensor::zeros(3, 4));
  Var b = g.constant(Tensor::zeros(4, 5));
  CountingScope scope;
  Var c = matmul(a, b);
  EXPECT_EQ(scope.flops(), 2u * 3 * 4 * 5);
  EXPECT_EQ(scope.retained_words(), 12u + 20u);
  softmax_rows(c);
  EXPECT_EQ(scope.flops(), 2u * 3 * 4 * 5 + 5u * 15);
  EXPECT_EQ(scope.retained_words(), 32u + 15u);
}

TEST(Counters, InactiveOutsideScope) {
  Graph g;
  matmul(g.constant(Tensor::zeros(2, 2)), g.constant(Tensor::zeros(2, 2)));
  EXPECT_FALSE(op_counter().enabled);
  EXPECT_EQ(op_counter().flops, 0u);
}
