#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dpalab/attention.hpp"
#include "dpalab/gradcheck.hpp"
#include "dpalab/verify.hpp"

using namespace dpalab;

namespace {

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t(i, j);
  return m;
}

Mat mul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Explicit softmax-weighted sum of value rows, one query at a time.
Mat attn_oracle(const Mat& q_src, const Mat& kv_src, const AttnParams& p) {
  const Mat q = mul(q_src, to_mat(p.wq)), k = mul(kv_src, to_mat(p.wk)), v = mul(kv_src, to_mat(p.wv));
  const double d = static_cast<double>(q[0].size());
  Mat out(q.size(), std::vector<double>(v[0].size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> s(k.size());
    double mx = -1e300;
    for (std::size_t j = 0; j < k.size(); ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < q[i].size(); ++c) dot += q[i][c] * k[j][c];
      s[j] = dot / std::sqrt(d);
      mx = std::max(mx, s[j]);
    }
    double z = 0;
    for (double& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < k.size(); ++j)
      for (std::size_t c = 0; c < v[j].size(); ++c) out[i][c] += s[j] / z * v[j][c];
  }
  return out;
}

Mat plus(const Mat& a, const Mat& b) {
  Mat c = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) c[i][j] += b[i][j];
  return c;
}

double max_diff(const Tensor& t, const Mat& m) {
  double e = 0;
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) e = std::max(e, std::abs(t(i, j) - m[i][j]));
  return e;
}

struct Instance {
  std::size_t lt, lv, l, d;
  Tensor f_t, f_v, p_t, p_v;
  BiAttnParams params;
};

Instance random_instance(std::uint64_t seed, std::size_t lt = 5, std::size_t lv = 7, std::size_t l = 3,
                         std::size_t d = 6) {
  SplitMix64 rng(seed);
  Instance in{lt, lv, l, d, Tensor::gaussian(lt, d, 1.0, rng), Tensor::gaussian(lv, d, 1.0, rng),
              Tensor::gaussian(l, d, 1.0, rng), Tensor::gaussian(l, d, 1.0, rng),
              BiAttnParams::random(d, rng, 1.0 / std::sqrt(static_cast<double>(d)))};
  return in;
}

}  // namespace

TEST(Attend, MatchesExplicitLoopOracle) {
  SplitMix64 rng(1);
  AttnParams p = AttnParams::random(8, rng, 0.4);
  const Tensor q = Tensor::gaussian(4, 8, 1.0, rng), kv = Tensor::gaussian(6, 8, 1.0, rng);
  Graph g;
  const Tensor out = attend(g.constant(q), g.constant(kv), bind(g, p)).value();
  EXPECT_LE(max_diff(out, attn_oracle(to_mat(q), to_mat(kv), p)), 1e-12);
}

TEST(Attend, SingleKeyReturnsItsValueRow) {
  SplitMix64 rng(2);
  AttnParams p = AttnParams::random(5, rng, 0.5);
  const Tensor q = Tensor::gaussian(3, 5, 1.0, rng), kv = Tensor::gaussian(1, 5, 1.0, rng);
  Graph g;
  const Tensor out = attend(g.constant(q), g.constant(kv), bind(g, p)).value();
  const Mat v = mul(to_mat(kv), to_mat(p.wv));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(out(i, c), v[0][c], 1e-12);
}

TEST(Attend, IdenticalKeyRowsGiveTheCommonValue) {
  SplitMix64 rng(3);
  AttnParams p = AttnParams::random(4, rng, 0.5);
  const Tensor row = Tensor::gaussian(1, 4, 1.0, rng);
  Tensor kv({5, 4});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) kv(i, c) = row(0, c);
  Graph g;
  const Tensor out = attend(g.constant(Tensor::gaussian(3, 4, 1.0, rng)), g.constant(kv), bind(g, p)).value();
  const Mat v = mul(to_mat(row), to_mat(p.wv));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out(i, c), v[0][c], 1e-12);
}

TEST(XAttn, ZeroValueProjectionLeavesFeaturesUnchanged) {
  Instance in = random_instance(4);
  in.params.vt.wv = Tensor::zeros(in.d, in.d);
  in.params.tv.wv = Tensor::zeros(in.d, in.d);
  Graph g;
  auto [t, v] = x_attn(g.constant(in.f_t), g.constant(in.f_v), bind(g, in.params));
  EXPECT_TRUE(values_equal(t.value(), in.f_t));
  EXPECT_TRUE(values_equal(v.value(), in.f_v));
}

TEST(XAttn, SymmetricInputsWithSharedParamsGiveEqualOutputs) {
  Instance in = random_instance(5, 4, 4);
  in.params.tv = in.params.vt;
  Graph g;
  auto [t, v] = x_attn(g.constant(in.f_t), g.constant(in.f_t), bind(g, in.params));
  EXPECT_TRUE(values_equal(t.value(), v.value()));
}

TEST(XAttn, EqualsTwoIndependentAttentionsPlusResiduals) {
  Instance in = random_instance(6);
  Graph g;
  auto [t, v] = x_attn(g.constant(in.f_t), g.constant(in.f_v), bind(g, in.params));
  EXPECT_LE(max_diff(t.value(), plus(to_mat(in.f_t), attn_oracle(to_mat(in.f_t), to_mat(in.f_v), in.params.vt))),
            1e-12);
  EXPECT_LE(max_diff(v.value(), plus(to_mat(in.f_v), attn_oracle(to_mat(in.f_v), to_mat(in.f_t), in.params.tv))),
            1e-12);
}

TEST(PromptAttn, EmptyPromptEqualsXAttn) {
  Instance in = random_instance(7);
  Graph g;
  const BiAttnWeights w = bind(g, in.params);
  Var empty = g.constant(Tensor({0, in.d}));
  auto [t0, v0] = x_attn(g.constant(in.f_t), g.constant(in.f_v), w);
  auto [t1, v1] = prompt_attn(g.constant(in.f_t), g.constant(in.f_v), empty, empty, w);
  EXPECT_TRUE(values_equal(t0.value(), t1.value()));
  EXPECT_TRUE(values_equal(v0.value(), v1.value()));
}

TEST(PromptAttn, DuplicatedVisualKeysLeaveTextFeatureRowsUnchanged) {
  Instance in = random_instance(8, 4, 5, 5);
  in.p_v = in.f_v;
  Graph g;
  const BiAttnWeights w = bind(g, in.params);
  auto [t0, v0] = x_attn(g.constant(in.f_t), g.constant(in.f_v), w);
  auto [t1, v1] = prompt_attn(g.constant(in.f_t), g.constant(in.f_v), g.constant(in.p_t), g.constant(in.p_v), w);
  EXPECT_LE(max_abs_diff(strip_prompt_rows(t1, in.l).value(), t0.value()), 1e-12);
  EXPECT_EQ(t1.rows(), in.l + in.lt);
  EXPECT_EQ(v1.rows(), in.l + in.lv);
}

TEST(PromptAttn, MismatchedPromptLengthsRaise) {
  Instance in = random_instance(9);
  Graph g;
  EXPECT_THROW(prompt_attn(g.constant(in.f_t), g.constant(in.f_v), g.constant(Tensor::zeros(2, in.d)),
                           g.constant(Tensor::zeros(3, in.d)), bind(g, in.params)),
               DimensionError);
}

TEST(LambdaMass, NoPromptGivesZeros) {
  Instance in = random_instance(10);
  Graph g;
  const Tensor m =
      lambda_mass(g.constant(in.f_t), g.constant(in.f_v), g.constant(Tensor({0, in.d})), bind(g, in.params.vt))
          .value();
  EXPECT_EQ(m.shape, (Shape{in.lt, 1}));
  for (double v : m.data) EXPECT_EQ(v, 0.0);
}

TEST(LambdaMass, DuplicatedKeysGiveOneHalf) {
  Instance in = random_instance(11, 3, 6, 6);
  Graph g;
  const Tensor m =
      lambda_mass(g.constant(in.f_t), g.constant(in.f_v), g.constant(in.f_v), bind(g, in.params.vt)).value();
  for (double v : m.data) EXPECT_NEAR(v, 0.5, 1e-12);
}

TEST(LambdaMass, MatchesTwoSumOracle) {
  Instance in = random_instance(12);
  Graph g;
  const Tensor m =
      lambda_mass(g.constant(in.f_t), g.constant(in.f_v), g.constant(in.p_v), bind(g, in.params.vt)).value();
  const Mat q = mul(to_mat(in.f_t), to_mat(in.params.vt.wq));
  const Mat kf = mul(to_mat(in.f_v), to_mat(in.params.vt.wk)), kp = mul(to_mat(in.p_v), to_mat(in.params.vt.wk));
  const auto score = [&](std::size_t i, const std::vector<double>& k) {
    double s = 0;
    for (std::size_t c = 0; c < in.d; ++c) s += q[i][c] * k[c];
    return std::exp(s / std::sqrt(static_cast<double>(in.d)));
  };
  for (std::size_t i = 0; i < in.lt; ++i) {
    double sp = 0, sf = 0;
    for (const auto& k : kp) sp += score(i, k);
    for (const auto& k : kf) sf += score(i, k);
    EXPECT_NEAR(m(i, 0), sp / (sp + sf), 1e-12);
  }
}

TEST(LambdaMass, BoundedAndMonotoneUnderDuplicatedPromptKeys) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Instance in = random_instance(100 + seed);
    Graph g;
    const AttnWeights w = bind(g, in.params.vt);
    const Tensor m0 = lambda_mass(g.constant(in.f_t), g.constant(in.f_v), g.constant(in.p_v), w).value();
    Var extended = concat_rows({g.constant(in.p_v), g.constant(in.p_v).graph->constant(Tensor(Shape{1, in.d},
        std::vector<double>(in.p_v.data.begin(), in.p_v.data.begin() + static_cast<long>(in.d))))});
    const Tensor m1 = lambda_mass(g.constant(in.f_t), g.constant(in.f_v), extended, w).value();
    for (std::size_t i = 0; i < in.lt; ++i) {
      EXPECT_GE(m0(i, 0), 0.0);
      EXPECT_LE(m0(i, 0), 1.0);
      EXPECT_GT(m1(i, 0), m0(i, 0));
    }
  }
}

TEST(DecomposePa, DuplicatedKeysEqualPlainAttention) {
  Instance in = random_instance(13, 4, 5, 5);
  Graph g;
  const Tensor r =
      decompose_pa(g.constant(in.f_t), g.constant(in.f_v), g.constant(in.f_v), bind(g, in.params.vt)).value();
  EXPECT_LE(max_diff(r, plus(to_mat(in.f_t), attn_oracle(to_mat(in.f_t), to_mat(in.f_v), in.params.vt))), 1e-12);
}

TEST(DecomposePa, FarPromptsApproachPlainAttention) {
  Instance in = random_instance(14);
  // Identity query/key projections, positive text rows and strongly negative
  // prompt rows: every prompt score is below -100.
  in.params.vt.wq = Tensor::identity(in.d);
  in.params.vt.wk = Tensor::identity(in.d);
  for (double& v : in.f_t.data) v = std::abs(v) + 0.5;
  const Tensor far = Tensor::filled(in.l, in.d, -100.0);
  Graph g;
  const AttnWeights w = bind(g, in.params.vt);
  const Tensor mass = lambda_mass(g.constant(in.f_t), g.constant(in.f_v), g.constant(far), w).value();
  for (double v : mass.data) EXPECT_LT(v, 1e-12);
  const Tensor r = decompose_pa(g.constant(in.f_t), g.constant(in.f_v), g.constant(far), w).value();
  EXPECT_LE(max_diff(r, plus(to_mat(in.f_t), attn_oracle(to_mat(in.f_t), to_mat(in.f_v), in.params.vt))), 1e-9);
}

TEST(DecomposePa, MatchesPromptAttnOnHundredRandomInstances) {
  const SuiteResult r = decomposition_suite(100, 0);
  EXPECT_TRUE(r.passed) << r.detail;
  EXPECT_LE(r.max_error, 1e-10);
}

TEST(LambdaRatio, PreDivisionForm) {
  const Tensor r = lambda_ratio(Tensor::matrix({{0.5}, {0.2}, {0.0}}));
  EXPECT_DOUBLE_EQ(r(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(r(1, 0), 0.25);
  EXPECT_DOUBLE_EQ(r(2, 0), 0.0);
}

TEST(Dpa, ZeroLambdaIsBitIdenticalToXAttn) {
  const SuiteResult r = zero_init_suite(100, 3);
  EXPECT_TRUE(r.passed) << r.detail;
  EXPECT_EQ(r.max_error, 0.0);
}

TEST(Dpa, NonzeroLambdaBreaksZeroInitEquivalence) {
  const SuiteResult r = zero_init_suite(10, 3, 0.1);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.name, "zero-init");
}

TEST(Dpa, UnitLambdaWithDuplicatedKeysDoublesTheUpdate) {
  Instance in = random_instance(15, 5, 5, 5);
  in.p_v = in.f_v;
  in.p_t = in.f_t;
  DpaParams lam = DpaParams::initial(in.d);
  for (double& v : lam.lambda_vt.data) v = 1.0;
  for (double& v : lam.lambda_tv.data) v = 1.0;
  Graph g;
  auto [t, v] = dpa(g.constant(in.f_t), g.constant(in.f_v), g.constant(in.p_t), g.constant(in.p_v),
                    bind(g, in.params), bind(g, lam));
  Mat a_t = attn_oracle(to_mat(in.f_t), to_mat(in.f_v), in.params.vt);
  Mat a_v = attn_oracle(to_mat(in.f_v), to_mat(in.f_t), in.params.tv);
  EXPECT_LE(max_diff(t.value(), plus(to_mat(in.f_t), plus(a_t, a_t))), 1e-12);
  EXPECT_LE(max_diff(v.value(), plus(to_mat(in.f_v), plus(a_v, a_v))), 1e-12);
}

TEST(Dpa, RandomLambdaMatchesThreeTermOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Instance in = random_instance(200 + seed);
    SplitMix64 rng(seed);
    DpaParams lam = DpaParams::initial(in.d);
    for (double& v : lam.lambda_vt.data) v = rng.normal();
    for (double& v : lam.lambda_tv.data) v = rng.normal();
    Graph g;
    auto [t, v] = dpa(g.constant(in.f_t), g.constant(in.f_v), g.constant(in.p_t), g.constant(in.p_v),
                      bind(g, in.params), bind(g, lam));
    const auto oracle = [&](const Tensor& q, const Tensor& kv, const Tensor& p, const Tensor& l,
                            const AttnParams& w) {
      Mat base = plus(to_mat(q), attn_oracle(to_mat(q), to_mat(kv), w));
      const Mat pr = attn_oracle(to_mat(q), to_mat(p), w);
      for (std::size_t i = 0; i < base.size(); ++i)
        for (std::size_t c = 0; c < in.d; ++c) base[i][c] += l.data[c] * pr[i][c];
      return base;
    };
    EXPECT_LE(max_diff(t.value(), oracle(in.f_t, in.f_v, in.p_v, lam.lambda_vt, in.params.vt)), 1e-12);
    EXPECT_LE(max_diff(v.value(), oracle(in.f_v, in.f_t, in.p_t, lam.lambda_tv, in.params.tv)), 1e-12);
  }
}

TEST(Dpa, TaskAndConstantKindsScaleEveryDimension) {
  Instance in = random_instance(16);
  for (LambdaKind kind : {LambdaKind::task, LambdaKind::constant}) {
    DpaParams lam = DpaParams::initial(in.d, kind);
    DpaParams dim = DpaParams::initial(in.d);
    const double s = kind == LambdaKind::constant ? 1.0 : 0.7;
    for (double& v : lam.lambda_vt.data) v = s;
    for (double& v : lam.lambda_tv.data) v = s;
    for (double& v : dim.lambda_vt.data) v = s;
    for (double& v : dim.lambda_tv.data) v = s;
    Graph g;
    const BiAttnWeights w = bind(g, in.params);
    auto [t0, v0] = dpa(g.constant(in.f_t), g.constant(in.f_v), g.constant(in.p_t), g.constant(in.p_v), w,
                        bind(g, lam));
    auto [t1, v1] = dpa(g.constant(in.f_t), g.constant(in.f_v), g.constant(in.p_t), g.constant(in.p_v), w,
                        bind(g, dim));
    EXPECT_LE(max_abs_diff(t0.value(), t1.value()), 1e-14) << to_string(kind);
    EXPECT_LE(max_abs_diff(v0.value(), v1.value()), 1e-14) << to_string(kind);
  }
}

TEST(Dpa, GradientsWrtLambdaAndPromptsPassGradcheck) {
  for (LambdaKind kind : {LambdaKind::dim, LambdaKind::task, LambdaKind::gate}) {
    Instance in = random_instance(17);
    SplitMix64 rng(4);
    DpaParams lam = DpaParams::initial(in.d, kind);
    for (double& v : lam.lambda_vt.data) v = rng.normal(0.0, 0.5);
    for (double& v : lam.lambda_tv.data) v = rng.normal(0.0, 0.5);
    const double err = gradcheck(
        [&](Graph& g) {
          auto [t, v] = dpa(g.constant(in.f_t), g.constant(in.f_v), g.leaf(in.p_t), g.leaf(in.p_v),
                            bind(g, in.params), bind(g, lam));
          return add(gradcheck_probe(t, 1), gradcheck_probe(v, 2));
        },
        {&lam.lambda_vt, &lam.lambda_tv, &in.p_t, &in.p_v});
    EXPECT_LE(err, 1e-4) << to_string(kind);
  }
}

TEST(Dpa, InitialLambdaIsZeroAndTrainable) {
  const DpaParams p = DpaParams::initial(8);
  EXPECT_EQ(p.lambda_vt.shape, (Shape{1, 8}));
  for (double v : p.lambda_vt.data) EXPECT_EQ(v, 0.0);
  for (double v : p.lambda_tv.data) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(p.lambda_vt.requires_grad);
}
