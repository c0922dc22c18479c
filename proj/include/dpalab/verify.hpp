#ifndef DPALAB_VERIFY_HPP
#define DPALAB_VERIFY_HPP

// Self-check suites shared by `dpalab verify`, `dpalab gradcheck` and the
// acceptance binary. Each suite reports the worst error it saw against its
// tolerance.

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dpalab/attention.hpp"
#include "dpalab/costing.hpp"
#include "dpalab/gradcheck.hpp"
#include "dpalab/harness.hpp"
#include "dpalab/ipg.hpp"
#include "dpalab/metrics.hpp"
#include "dpalab/model.hpp"

namespace dpalab {

struct SuiteResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;

  nlohmann::json to_json() const {
    return {{"suite", name},     {"max_error", max_error}, {"tolerance", tolerance},
            {"passed", passed},  {"detail", detail},       {"seconds", seconds}};
  }
};

namespace detail {

template <class F>
SuiteResult timed(const std::string& name, double tol, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{name, 0.0, tol, false, "", 0.0};
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!(r.max_error <= tol)) r.passed = false;
  return r;
}

inline std::size_t pick(SplitMix64& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

inline bool same_detections(const Detections& a, const Detections& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Detection &x = a[i], &y = b[i];
    if (x.category != y.category || x.token != y.token || x.score != y.score || x.box.cx != y.box.cx ||
        x.box.cy != y.box.cy || x.box.w != y.box.w || x.box.h != y.box.h)
      return false;
  }
  return true;
}

}  // namespace detail

// prompt_attn feature rows against the lambda-mass reconstruction.
inline SuiteResult decomposition_suite(int instances = 100, std::uint64_t seed = 0) {
  return detail::timed("decomposition", 1e-10, [&](SuiteResult& r) {
    SplitMix64 rng(seed ^ 0xDEC0ULL);
    for (int k = 0; k < instances; ++k) {
      const std::size_t lv = detail::pick(rng, 1, 64), lt = detail::pick(rng, 1, 16);
      const std::size_t l = detail::pick(rng, 1, 10), d = detail::pick(rng, 2, 32);
      BiAttnParams p = BiAttnParams::random(d, rng, 1.0 / std::sqrt(static_cast<double>(d)));
      Graph g;
      Var f_t = g.constant(Tensor::gaussian(lt, d, 1.0, rng));
      Var f_v = g.constant(Tensor::gaussian(lv, d, 1.0, rng));
      Var p_t = g.constant(Tensor::gaussian(l, d, 1.0, rng));
      Var p_v = g.constant(Tensor::gaussian(l, d, 1.0, rng));
      const BiAttnWeights w = bind(g, p);
      Var rows = strip_prompt_rows(prompt_attn(f_t, f_v, p_t, p_v, w).first, l);
      Var rebuilt = decompose_pa(f_t, f_v, p_v, w.vt);
      r.max_error = std::max(r.max_error, detail::max_abs_diff(rows.value(), rebuilt.value()));
    }
    r.passed = true;
    r.detail = std::to_string(instances) + " instances";
  });
}

// dpa with lambda = `lambda_init` against x_attn; must match bit for bit when
// lambda_init is 0. With a model, also checks that a fresh idpa task (no
// optimisation) reproduces the base's detections on `images`.
inline SuiteResult zero_init_suite(int instances = 100, std::uint64_t seed = 0, double lambda_init = 0.0,
                                   const ToyVlodModel* base = nullptr, const TaskDataset* task = nullptr,
                                   std::size_t images = 32) {
  return detail::timed("zero-init", 0.0, [&](SuiteResult& r) {
    SplitMix64 rng(seed ^ 0x2E50ULL);
    for (int k = 0; k < instances; ++k) {
      const std::size_t lv = detail::pick(rng, 1, 64), lt = detail::pick(rng, 1, 16);
      const std::size_t l = detail::pick(rng, 1, 10), d = detail::pick(rng, 2, 32);
      BiAttnParams p = BiAttnParams::random(d, rng, 1.0 / std::sqrt(static_cast<double>(d)));
      DpaParams lam = DpaParams::initial(d);
      for (double& v : lam.lambda_vt.data) v = lambda_init;
      for (double& v : lam.lambda_tv.data) v = lambda_init;
      Graph g;
      Var f_t = g.constant(Tensor::gaussian(lt, d, 1.0, rng));
      Var f_v = g.constant(Tensor::gaussian(lv, d, 1.0, rng));
      Var p_t = g.constant(Tensor::gaussian(l, d, 1.0, rng));
      Var p_v = g.constant(Tensor::gaussian(l, d, 1.0, rng));
      const BiAttnWeights w = bind(g, p);
      auto [t0, v0] = x_attn(f_t, f_v, w);
      auto [t1, v1] = dpa(f_t, f_v, p_t, p_v, w, bind(g, lam));
      r.max_error = std::max({r.max_error, detail::max_abs_diff(t0.value(), t1.value()),
                              detail::max_abs_diff(v0.value(), v1.value())});
    }
    r.detail = std::to_string(instances) + " random layers";
    if (base && task) {
      TrainHyper h;
      ContinualLearner learner(*base, Method::idpa, h, seed);
      learner.train_task(*task, task->class_names, 0, 0);
      ToyVlodModel frozen = *base;
      std::size_t mismatched = 0, n = 0;
      for (std::size_t i = 0; i < task->test.size() && n < images; ++i, ++n) {
        Graph g;
        auto fwd = frozen.forward(g, task->test[i].pixels, task->class_names);
        const Detections ref = frozen.predict(fwd.head);
        const Detections got = learner.detect(task->test[i].pixels, task->class_names, 0).detections;
        if (!detail::same_detections(ref, got)) ++mismatched;
      }
      if (mismatched > 0) r.max_error = std::max(r.max_error, static_cast<double>(mismatched));
      r.detail += ", " + std::to_string(n) + " images end to end, " + std::to_string(mismatched) + " differ";
    }
    r.passed = r.max_error == 0.0;
  });
}

// Named differentiable operation on one or two random matrices.
struct OpCase {
  std::string name;
  std::function<Var(Graph&, std::vector<Tensor>&)> build;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
};

inline std::vector<OpCase> differentiable_ops() {
  using V = std::vector<Tensor>;
  const auto one = [](const char* n, std::function<Var(Var)> f, std::size_t m, std::size_t k) {
    return OpCase{n, [f](Graph& g, V& x) { return f(g.leaf(x[0])); }, {{m, k}}};
  };
  const auto two = [](const char* n, std::function<Var(Var, Var)> f, std::size_t am, std::size_t an,
                      std::size_t bm, std::size_t bn) {
    return OpCase{n, [f](Graph& g, V& x) { return f(g.leaf(x[0]), g.leaf(x[1])); }, {{am, an}, {bm, bn}}};
  };
  Tensor target({3, 4}, 0.0);
  target(0, 1) = 1.0;
  target(2, 3) = 1.0;
  return {
      one("softmax_rows", [](Var x) { return softmax_rows(x); }, 3, 5),
      one("tanh", [](Var x) { return tanh_elem(x); }, 3, 4),
      one("sigmoid", [](Var x) { return sigmoid_elem(x); }, 3, 4),
      one("abs", [](Var x) { return abs_elem(x); }, 3, 4),
      one("scale", [](Var x) { return scale(x, -1.7); }, 2, 3),
      one("add_scalar", [](Var x) { return add_scalar(x, 0.3); }, 2, 3),
      one("transpose", [](Var x) { return transpose(x); }, 2, 5),
      one("slice_rows", [](Var x) { return slice_rows(x, 1, 3); }, 4, 3),
      one("slice_cols", [](Var x) { return slice_cols(x, 1, 4); }, 3, 5),
      one("gather_rows", [](Var x) { return gather_rows(x, {2, 0, 2}); }, 3, 3),
      one("mean_rows", [](Var x) { return mean_rows(x); }, 4, 3),
      one("sum_all", [](Var x) { return sum_all(x); }, 3, 3),
      one("mean_all", [](Var x) { return mean_all(x); }, 3, 3),
      one("l2_normalize_rows", [](Var x) { return l2_normalize_rows(x); }, 3, 4),
      one("layer_norm_rows", [](Var x) { return layer_norm_rows(x); }, 3, 5),
      one("broadcast_row", [](Var x) { return broadcast_row_vector(x, 4); }, 1, 3),
      one("broadcast_col", [](Var x) { return broadcast_col_vector(x, 4); }, 3, 1),
      one("bce_with_logits", [target](Var x) { return bce_with_logits_mean(x, target, 4.0); }, 3, 4),
      two("matmul", [](Var a, Var b) { return matmul(a, b); }, 3, 4, 4, 2),
      two("matmul_nt", [](Var a, Var b) { return matmul_nt(a, b); }, 3, 4, 5, 4),
      two("add", [](Var a, Var b) { return add(a, b); }, 3, 2, 3, 2),
      two("sub", [](Var a, Var b) { return sub(a, b); }, 3, 2, 3, 2),
      two("elementwise_mul", [](Var a, Var b) { return elementwise_mul(a, b); }, 3, 2, 3, 2),
      two("concat_rows", [](Var a, Var b) { return concat_rows({a, b}); }, 2, 3, 4, 3),
      two("concat_cols", [](Var a, Var b) { return concat_cols({a, b}); }, 3, 2, 3, 4),
      OpCase{"linear",
             [](Graph& g, V& x) { return linear(g.leaf(x[0]), g.leaf(x[1]), g.leaf(x[2])); },
             {{3, 4}, {4, 5}, {1, 5}}},
      OpCase{"attend",
             [](Graph& g, V& x) {
               return attend(g.leaf(x[0]), g.leaf(x[1]), AttnWeights{g.leaf(x[2]), g.leaf(x[3]), g.leaf(x[4])});
             },
             {{3, 4}, {5, 4}, {4, 4}, {4, 4}, {4, 4}}},
      OpCase{"dpa_direction",
             [](Graph& g, V& x) {
               return detail::dpa_direction(g.leaf(x[0]), g.leaf(x[1]), g.leaf(x[2]), g.leaf(x[3]),
                                            LambdaKind::dim,
                                            AttnWeights{g.leaf(x[4]), g.leaf(x[5]), g.leaf(x[6])});
             },
             {{3, 4}, {5, 4}, {2, 4}, {1, 4}, {4, 4}, {4, 4}, {4, 4}}},
      OpCase{"dpa_gate",
             [](Graph& g, V& x) {
               return detail::dpa_direction(g.leaf(x[0]), g.leaf(x[1]), g.leaf(x[2]), g.leaf(x[3]),
                                            LambdaKind::gate,
                                            AttnWeights{g.leaf(x[4]), g.leaf(x[5]), g.leaf(x[6])});
             },
             {{3, 4}, {5, 4}, {2, 4}, {4, 1}, {4, 4}, {4, 4}, {4, 4}}},
      OpCase{"ccpki_generate",
             [](Graph& g, V& x) {
               return ccpki_generate(g.leaf(x[0]), g.leaf(x[1]),
                                     CcpkiWeights{g.leaf(x[2]), g.leaf(x[3]), g.leaf(x[4]), g.leaf(x[5])});
             },
             {{3, 4}, {6, 4}, {4, 4}, {4, 4}, {3, 1}, {1, 4}}},
  };
}

// Scalar probe: sum of the output weighted by fixed pseudo-random
// coefficients, so every output coordinate contributes a distinct gradient.
inline Var gradcheck_probe(Var out, std::uint64_t seed) {
  SplitMix64 rng(seed ^ 0x9A0BEULL);
  Graph& g = *out.graph;
  const Tensor& v = out.value();
  Tensor w(v.shape);
  for (double& x : w.data) x = rng.uniform(-1.0, 1.0);
  return sum_all(elementwise_mul(out, g.constant(std::move(w))));
}

struct OpGradcheck {
  std::string name;
  double max_rel_error = 0.0;
};

// Every differentiable op at `points` random points, plus the end-to-end
// loss of a small DPA-prompted model through prompts, lambda, CCPKI and
// base weights.
inline std::vector<OpGradcheck> gradcheck_ops(int points = 10, std::uint64_t seed = 0) {
  std::vector<OpGradcheck> out;
  for (const OpCase& c : differentiable_ops()) {
    OpGradcheck og{c.name, 0.0};
    for (int pt = 0; pt < points; ++pt) {
      SplitMix64 rng(seed * 1000 + static_cast<std::uint64_t>(pt) * 17 + std::hash<std::string>{}(c.name) % 997);
      std::vector<Tensor> xs;
      for (auto [m, n] : c.shapes) xs.push_back(Tensor::uniform(m, n, -1.5, 1.5, rng));
      std::vector<Tensor*> ptrs;
      for (Tensor& t : xs) ptrs.push_back(&t);
      const std::uint64_t probe_seed = seed + static_cast<std::uint64_t>(pt);
      const double err = gradcheck(
          [&](Graph& g) {
            Var y = c.build(g, xs);
            return y.value().numel() == 1 ? y : gradcheck_probe(y, probe_seed);
          },
          ptrs);
      og.max_rel_error = std::max(og.max_rel_error, err);
    }
    out.push_back(og);
  }

  // End-to-end DPA detection loss on a small model.
  OpGradcheck e2e{"dpa_model_loss", 0.0};
  BenchmarkSpec spec;
  spec.image_size = 16;
  spec.patch_size = 4;
  ToyVlodConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.d = 8;
  cfg.n_vis_layers = 1;
  cfg.n_text_layers = 1;
  cfg.n_fusion_layers = 2;
  cfg.prompt_length = 3;
  for (int pt = 0; pt < points; ++pt) {
    cfg.seed = seed + static_cast<std::uint64_t>(pt);
    ToyVlodModel m(cfg);
    spec.seed = cfg.seed;
    const TaskDataset pre = generate_pretask(spec, 1);
    const Image& im = pre.train.at(0);
    SplitMix64 rng(cfg.seed ^ 0xE2EULL);
    const std::size_t d = static_cast<std::size_t>(cfg.d), l = static_cast<std::size_t>(cfg.prompt_length);
    std::vector<Tensor> p_t, p_v, bank;
    std::vector<DpaParams> lam;
    for (int i = 0; i < cfg.n_fusion_layers; ++i) {
      p_t.push_back(Tensor::gaussian(l, d, 0.5, rng));
      p_v.push_back(Tensor::gaussian(l, d, 0.5, rng));
      bank.push_back(Tensor::gaussian(4, d, 1.0, rng));
      DpaParams dp = DpaParams::initial(d);
      for (double& v : dp.lambda_vt.data) v = rng.normal(0.0, 0.5);
      for (double& v : dp.lambda_tv.data) v = rng.normal(0.0, 0.5);
      lam.push_back(std::move(dp));
    }
    CcpkiParams cc = CcpkiParams::initial(l, d, rng);
    for (double& v : cc.alpha.data) v = rng.normal(0.0, 0.5);
    std::vector<Tensor*> params;
    for (int i = 0; i < cfg.n_fusion_layers; ++i) {
      params.push_back(&p_t[static_cast<std::size_t>(i)]);
      params.push_back(&p_v[static_cast<std::size_t>(i)]);
      params.push_back(&lam[static_cast<std::size_t>(i)].lambda_vt);
      params.push_back(&lam[static_cast<std::size_t>(i)].lambda_tv);
    }
    for (auto& [name, t] : cc.parameters()) params.push_back(t);
    for (auto& [name, t] : m.parameters())
      if (name.rfind("fusion.L1", 0) == 0 || name.rfind("head.", 0) == 0) params.push_back(t);
    const auto loss = [&](Graph& g) {
      PromptVars pv;
      pv.mechanism = Mechanism::dpa;
      const CcpkiWeights cw = bind(g, cc);
      for (std::size_t i = 0; i < p_t.size(); ++i) {
        Var b = g.constant(bank[i]);
        pv.fusion.push_back(LayerPromptVars{ccpki_generate(g.leaf(p_t[i]), b, cw),
                                            ccpki_generate(g.leaf(p_v[i]), b, cw), bind(g, lam[i])});
      }
      auto fwd = m.forward(g, im.pixels, pre.class_names, &pv);
      return m.loss(g, fwd.head, im.objects, pre.class_names);
    };
    e2e.max_rel_error = std::max(e2e.max_rel_error, gradcheck(loss, params));
  }
  out.push_back(e2e);
  return out;
}

inline SuiteResult gradient_suite(int points = 10, std::uint64_t seed = 0, double tol = 1e-4) {
  return detail::timed("gradcheck", tol, [&](SuiteResult& r) {
    std::string worst;
    for (const OpGradcheck& og : gradcheck_ops(points, seed)) {
      if (og.max_rel_error >= r.max_error) {
        r.max_error = og.max_rel_error;
        worst = og.name;
      }
    }
    r.passed = true;
    r.detail = "worst op " + worst;
  });
}

// fap/cap/ffp against hand-evaluated matrices.
inline SuiteResult metrics_suite() {
  return detail::timed("metrics", 1e-9, [&](SuiteResult& r) {
    const ApMatrix two{{{50.0}, {40.0, 60.0}}};
    const ApMatrix three{{{60.0}, {50.0, 70.0}, {45.0, 65.0, 80.0}}};
    const double errs[] = {
        std::abs(fap(two) - 50.0),          std::abs(cap(two) - 50.0),
        std::abs(ffp(two) - 10.0),          std::abs(fap(three) - 190.0 / 3.0),
        std::abs(cap(three) - (60.0 + 60.0 + 190.0 / 3.0) / 3.0), std::abs(ffp(three) - 10.0)};
    for (double e : errs) r.max_error = std::max(r.max_error, e);
    r.passed = true;
    r.detail = "2x2 and 3x3 hand matrices";
  });
}

// Cost dominance over the grid and static == instrumented counts.
inline SuiteResult cost_suite() {
  return detail::timed("cost", 0.0, [&](SuiteResult& r) {
    std::size_t cells = 0, dominance_failures = 0, count_mismatches = 0;
    for (std::uint64_t lt : {8, 16, 32})
      for (std::uint64_t lv : {64, 256, 1024})
        for (std::uint64_t l : {1, 5, 10})
          for (std::uint64_t d : {32, 64}) {
            ++cells;
            CostModel c;
            c.lt = lt;
            c.lv = lv;
            c.l = l;
            c.d = d;
            const FlopReport pa = count_flops(c.with(Mechanism::pa));
            const FlopReport dp = count_flops(c.with(Mechanism::dpa));
            if (!(dp.total() < pa.total() && dp.memory_words < pa.memory_words)) ++dominance_failures;
            CostModel one = c;
            one.fusion_layers = 1;
            one.vis_layers = 1;
            one.text_layers = 1;
            for (Mechanism m : {Mechanism::pa, Mechanism::dpa}) {
              const FlopReport s = count_flops(one.with(m));
              const Measured x = instrument(one.with(m));
              if (s.total() != x.flops || s.memory_words != x.words) ++count_mismatches;
            }
          }
    r.max_error = static_cast<double>(dominance_failures + count_mismatches);
    r.passed = r.max_error == 0.0;
    r.detail = std::to_string(cells) + " cells, " + std::to_string(dominance_failures) + " dominance failures, " +
               std::to_string(count_mismatches) + " static/instrumented mismatches";
  });
}

// alpha = 0 makes CCPKI the identity on p_init.
inline SuiteResult ipg_gate_suite(int banks = 50, std::uint64_t seed = 0) {
  return detail::timed("ipg-gate", 0.0, [&](SuiteResult& r) {
    SplitMix64 rng(seed ^ 0x1A7EULL);
    for (int k = 0; k < banks; ++k) {
      const std::size_t l = detail::pick(rng, 1, 10), d = detail::pick(rng, 2, 32), kk = detail::pick(rng, 1, 64);
      CcpkiParams p = CcpkiParams::initial(l, d, rng);
      for (double& v : p.tau.data) v = rng.normal(1.0, 1.0);
      const Tensor p_init = Tensor::gaussian(l, d, 1.0, rng);
      const Tensor bank = Tensor::gaussian(kk, d, 1.0, rng);
      const Tensor out = ccpki_generate(p_init, bank, p);
      r.max_error = std::max(r.max_error, detail::max_abs_diff(out, p_init));
    }
    r.passed = r.max_error == 0.0;
    r.detail = std::to_string(banks) + " random banks";
  });
}

// route_task against a brute-force cosine scan on noisy queries.
inline SuiteResult routing_oracle_suite(int queries = 200, std::uint64_t seed = 0) {
  return detail::timed("routing", 0.0, [&](SuiteResult& r) {
    SplitMix64 rng(seed ^ 0x5007EULL);
    std::size_t mismatches = 0;
    for (int q = 0; q < queries; ++q) {
      const std::size_t n = detail::pick(rng, 1, 8), d = detail::pick(rng, 2, 32);
      std::vector<Tensor> keys;
      for (std::size_t i = 0; i < n; ++i) keys.push_back(Tensor(Shape{d}, 0.0));
      for (auto& k : keys)
        for (double& v : k.data) v = rng.normal();
      const std::size_t truth = static_cast<std::size_t>(rng.below(n));
      Tensor query = keys[truth];
      for (double& v : query.data) v += rng.normal(0.0, 0.5);
      std::size_t best = 0;
      double best_sim = -2.0;
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t j = 0; j < d; ++j) {
          dot += query.data[j] * keys[i].data[j];
          na += query.data[j] * query.data[j];
          nb += keys[i].data[j] * keys[i].data[j];
        }
        const double s = dot / std::sqrt(na * nb);
        if (s > best_sim) {
          best_sim = s;
          best = i;
        }
      }
      if (route_task(query, keys) != best) ++mismatches;
    }
    r.max_error = static_cast<double>(mismatches);
    r.passed = mismatches == 0;
    r.detail = std::to_string(queries) + " queries";
  });
}

inline std::vector<SuiteResult> run_all_suites(std::uint64_t seed = 0, double lambda_init = 0.0,
                                               const ToyVlodModel* base = nullptr,
                                               const TaskDataset* task = nullptr) {
  return {decomposition_suite(100, seed), zero_init_suite(100, seed, lambda_init, base, task),
          gradient_suite(10, seed),        metrics_suite(),
          cost_suite(),                    ipg_gate_suite(50, seed),
          routing_oracle_suite(200, seed)};
}

}  // namespace dpalab

#endif  // DPALAB_VERIFY_HPP
