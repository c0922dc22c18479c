#ifndef DPALAB_COSTING_HPP
#define DPALAB_COSTING_HPP

// Static FLOP, activation-memory and parameter accounting for the prompted
// attention blocks, plus an instrumented counterpart that runs the real
// forward code under the operation counters.
//
// Conventions (shared with the counters in autodiff.hpp):
//   matmul [m x k][k x n]      2mkn flops, retains the words of both inputs
//   softmax over an m x n map  5mn flops, retains its m x n input
//   elementwise op / scale     1 flop per output element, retains nothing
//   concat, slice, broadcast   free
// Memory is the total retained words of one forward pass, which is also the
// peak before backward starts.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpalab/attention.hpp"
#include "dpalab/autodiff.hpp"
#include "dpalab/errors.hpp"
#include "dpalab/model.hpp"
#include "dpalab/rng.hpp"

namespace dpalab {

struct CostTerms {
  std::uint64_t projection = 0;  // Q, K, V projections
  std::uint64_t scores = 0;      // Q K^T and the 1/sqrt(d) scale
  std::uint64_t softmax = 0;
  std::uint64_t aggregate = 0;   // attention-weighted values
  std::uint64_t residual = 0;
  std::uint64_t lambda = 0;      // DPA scale (and gate) application

  std::uint64_t total() const { return projection + scores + softmax + aggregate + residual + lambda; }

  CostTerms& operator+=(const CostTerms& o) {
    projection += o.projection;
    scores += o.scores;
    softmax += o.softmax;
    aggregate += o.aggregate;
    residual += o.residual;
    lambda += o.lambda;
    return *this;
  }

  CostTerms scaled(std::uint64_t k) const {
    return {projection * k, scores * k, softmax * k, aggregate * k, residual * k, lambda * k};
  }

  nlohmann::json to_json() const {
    return {{"projection", projection}, {"scores", scores},     {"softmax", softmax},
            {"aggregate", aggregate},   {"residual", residual}, {"lambda", lambda}};
  }
};

// Residual attention of m queries over n key rows, with no prompts.
inline CostTerms attend_flops(std::uint64_t m, std::uint64_t n, std::uint64_t d) {
  return {2 * m * d * d + 4 * n * d * d, 2 * m * n * d + m * n, 5 * m * n, 2 * m * n * d, m * d, 0};
}

inline std::uint64_t attend_words(std::uint64_t m, std::uint64_t n, std::uint64_t d) {
  return 2 * m * d + 4 * n * d + 3 * d * d + 2 * m * n;
}

// One prompted direction: m queries, n feature keys, l prompt rows.
inline CostTerms direction_flops(Mechanism mech, std::uint64_t m, std::uint64_t n, std::uint64_t l,
                                 std::uint64_t d, LambdaKind kind = LambdaKind::dim) {
  if (mech == Mechanism::none || l == 0) return attend_flops(m, n, d);
  if (mech == Mechanism::pa) return attend_flops(m + l, n + l, d);
  const std::uint64_t k = n + l;
  CostTerms t{2 * m * d * d + 4 * k * d * d, 2 * m * k * d + m * k, 5 * m * k, 2 * m * k * d, m * d, 0};
  t.lambda = kind == LambdaKind::gate ? 2 * m * d + m + m * l : l * d;
  return t;
}

inline std::uint64_t direction_words(Mechanism mech, std::uint64_t m, std::uint64_t n, std::uint64_t l,
                                     std::uint64_t d, LambdaKind kind = LambdaKind::dim) {
  if (mech == Mechanism::none || l == 0) return attend_words(m, n, d);
  if (mech == Mechanism::pa) return attend_words(m + l, n + l, d);
  const std::uint64_t k = n + l;
  std::uint64_t w = 2 * m * d + 4 * k * d + 3 * d * d + 2 * m * k;
  if (kind == LambdaKind::gate) w += m * d + d;
  return w;
}

// Attention blocks of one configuration: the fusion stack plus, when
// injection reaches them, the encoders' self-attention layers.
struct CostModel {
  std::uint64_t lt = 8, lv = 64, l = 10, d = 64;
  std::uint64_t fusion_layers = 6, vis_layers = 2, text_layers = 2;
  Mechanism mechanism = Mechanism::dpa;
  LambdaKind lambda_kind = LambdaKind::dim;
  Injection injection;

  static CostModel from_config(const ToyVlodConfig& cfg, std::uint64_t lt) {
    CostModel c;
    c.lt = lt;
    c.lv = static_cast<std::uint64_t>(cfg.visual_tokens());
    c.l = static_cast<std::uint64_t>(cfg.prompt_length);
    c.d = static_cast<std::uint64_t>(cfg.d);
    c.fusion_layers = static_cast<std::uint64_t>(cfg.n_fusion_layers);
    c.vis_layers = static_cast<std::uint64_t>(cfg.n_vis_layers);
    c.text_layers = static_cast<std::uint64_t>(cfg.n_text_layers);
    c.mechanism = cfg.mechanism;
    c.lambda_kind = cfg.lambda_kind;
    c.injection = cfg.injection;
    return c;
  }

  CostModel with(Mechanism m) const {
    CostModel c = *this;
    c.mechanism = m;
    return c;
  }
};

struct FlopReport {
  Mechanism mechanism = Mechanism::none;
  std::uint64_t lt = 0, lv = 0, l = 0, d = 0;
  CostTerms per_term;
  std::uint64_t memory_words = 0;

  std::uint64_t total() const { return per_term.total(); }

  nlohmann::json to_json() const {
    return {{"mechanism", to_string(mechanism)}, {"Lt", lt},           {"Lv", lv},
            {"l", l},                            {"d", d},             {"total", total()},
            {"per_term", per_term.to_json()},    {"memory_words", memory_words}};
  }
};

inline CostTerms fusion_layer_flops(const CostModel& c) {
  CostTerms t = direction_flops(c.mechanism, c.lt, c.lv, c.l, c.d, c.lambda_kind);
  t += direction_flops(c.mechanism, c.lv, c.lt, c.l, c.d, c.lambda_kind);
  return t;
}

inline std::uint64_t fusion_layer_words(const CostModel& c) {
  return direction_words(c.mechanism, c.lt, c.lv, c.l, c.d, c.lambda_kind) +
         direction_words(c.mechanism, c.lv, c.lt, c.l, c.d, c.lambda_kind);
}

inline FlopReport count_flops(const CostModel& c) {
  FlopReport r{c.mechanism, c.lt, c.lv, c.l, c.d, {}, 0};
  if (c.injection.fusion) {
    r.per_term += fusion_layer_flops(c).scaled(c.fusion_layers);
    r.memory_words += fusion_layer_words(c) * c.fusion_layers;
  } else {
    CostModel plain = c.with(Mechanism::none);
    r.per_term += fusion_layer_flops(plain).scaled(c.fusion_layers);
    r.memory_words += fusion_layer_words(plain) * c.fusion_layers;
  }
  const Mechanism enc_v = c.injection.visual ? c.mechanism : Mechanism::none;
  const Mechanism enc_t = c.injection.text ? c.mechanism : Mechanism::none;
  r.per_term += direction_flops(enc_v, c.lv, c.lv, c.l, c.d, c.lambda_kind).scaled(c.vis_layers);
  r.memory_words += direction_words(enc_v, c.lv, c.lv, c.l, c.d, c.lambda_kind) * c.vis_layers;
  r.per_term += direction_flops(enc_t, c.lt, c.lt, c.l, c.d, c.lambda_kind).scaled(c.text_layers);
  r.memory_words += direction_words(enc_t, c.lt, c.lt, c.l, c.d, c.lambda_kind) * c.text_layers;
  return r;
}

inline std::uint64_t activation_memory(const CostModel& c) { return count_flops(c).memory_words; }

// PA minus DPA for one fusion layer, dim/task lambda:
//   flops: 2 l d^2 + l (l + Lk)(4d + 6) summed over both directions
//   words: 2 l d + 2 l (l + Lk) summed over both directions
// where Lk is the feature key count of the direction.
inline std::uint64_t pa_minus_dpa_flops(std::uint64_t lt, std::uint64_t lv, std::uint64_t l, std::uint64_t d) {
  return 2 * (2 * l * d * d) + l * (l + lv) * (4 * d + 6) + l * (l + lt) * (4 * d + 6);
}

inline std::uint64_t pa_minus_dpa_words(std::uint64_t lt, std::uint64_t lv, std::uint64_t l, std::uint64_t d) {
  return 2 * (2 * l * d) + 2 * l * (l + lv) + 2 * l * (l + lt);
}

struct Measured {
  std::uint64_t flops = 0;
  std::uint64_t words = 0;
};

// Runs the attention blocks described by `c` on random inputs under the
// operation counters.
inline Measured instrument(const CostModel& c, std::uint64_t seed = 7) {
  SplitMix64 rng(seed);
  const std::size_t d = c.d, l = c.l;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  Graph g;
  Var f_t = g.constant(Tensor::gaussian(c.lt, d, 1.0, rng));
  Var f_v = g.constant(Tensor::gaussian(c.lv, d, 1.0, rng));
  std::vector<BiAttnParams> fusion;
  for (std::uint64_t i = 0; i < c.fusion_layers; ++i) fusion.push_back(BiAttnParams::random(d, rng, s));
  std::vector<AttnParams> vis, text;
  for (std::uint64_t i = 0; i < c.vis_layers; ++i) vis.push_back(AttnParams::random(d, rng, s));
  for (std::uint64_t i = 0; i < c.text_layers; ++i) text.push_back(AttnParams::random(d, rng, s));
  DpaParams lam = DpaParams::initial(d, c.lambda_kind);
  for (double& v : lam.lambda_vt.data) v = rng.normal(0.0, 0.1);
  for (double& v : lam.lambda_tv.data) v = rng.normal(0.0, 0.1);
  LayerPromptVars lp{g.constant(Tensor::gaussian(l, d, 0.02, rng)), g.constant(Tensor::gaussian(l, d, 0.02, rng)),
                     DpaWeights{g.constant(lam.lambda_vt), g.constant(lam.lambda_tv), lam.kind}};

  CountingScope scope;
  const Mechanism enc_v = c.injection.visual ? c.mechanism : Mechanism::none;
  const Mechanism enc_t = c.injection.text ? c.mechanism : Mechanism::none;
  for (auto& p : vis) f_v = encoder_attention(f_v, bind(g, p), enc_v, lp.p_v, &*lp.lambda);
  for (auto& p : text) f_t = encoder_attention(f_t, bind(g, p), enc_t, lp.p_t, &*lp.lambda);
  const Mechanism fm = c.injection.fusion ? c.mechanism : Mechanism::none;
  for (auto& p : fusion) std::tie(f_v, f_t) = fusion_layer(f_v, f_t, bind(g, p), fm, &lp);
  return {scope.flops(), scope.retained_words()};
}

// Trainable scalars per task for each continual method.
struct ParamCounts {
  std::uint64_t prompts = 0;
  std::uint64_t lambda = 0;
  std::uint64_t ccpki = 0;
  std::uint64_t base = 0;

  std::uint64_t total() const { return prompts + lambda + ccpki + base; }

  nlohmann::json to_json() const {
    return {{"prompts", prompts}, {"lambda", lambda}, {"ccpki", ccpki}, {"base", base}, {"total", total()}};
  }
};

// Prompt-bearing positions: every fusion layer (two sides) and, when
// injected, every encoder layer (one side).
inline std::uint64_t prompt_slots(const ToyVlodConfig& cfg) {
  std::uint64_t n = 0;
  if (cfg.injection.fusion) n += 2 * static_cast<std::uint64_t>(cfg.n_fusion_layers);
  if (cfg.injection.visual) n += static_cast<std::uint64_t>(cfg.n_vis_layers);
  if (cfg.injection.text) n += static_cast<std::uint64_t>(cfg.n_text_layers);
  return n;
}

inline std::uint64_t lambda_numel(LambdaKind kind, std::uint64_t d) {
  if (kind == LambdaKind::constant) return 0;
  const Shape s = lambda_shape(kind, d);
  return s[0] * s[1];
}

// method: zero-shot | sequential-ft | joint | naive-pa | idpa | idpa-no-transfer | dpa
inline ParamCounts params_count(const ToyVlodConfig& cfg, const std::string& method,
                                std::uint64_t base_params) {
  ParamCounts p;
  const std::uint64_t d = cfg.d, l = cfg.prompt_length;
  if (method == "zero-shot") return p;
  if (method == "sequential-ft" || method == "joint") {
    p.base = base_params;
    return p;
  }
  const std::uint64_t slots = prompt_slots(cfg);
  p.prompts = slots * l * d;
  if (method == "naive-pa") return p;
  if (method == "idpa" || method == "idpa-no-transfer" || method == "dpa") {
    p.lambda = slots * lambda_numel(cfg.lambda_kind, d);
    if (method != "dpa") p.ccpki = 2 * d * d + l + d;
    return p;
  }
  throw ConfigError("unknown method '" + method + "'");
}

}  // namespace dpalab

#endif  // DPALAB_COSTING_HPP
