#ifndef DPALAB_ATTENTION_HPP
#define DPALAB_ATTENTION_HPP

// Cross-attention building blocks: plain single-head attention, the
// bidirectional X-Attn block, prepended Prompt Attention (PA), the prompt
// weight mass lambda(f_t), the PA decomposition and Decoupled Prompt
// Attention (DPA).
//
// Naming follows the direction of knowledge transfer: the "vt" weights serve
// text queries over visual keys (vision -> text), "tv" the reverse.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "dpalab/autodiff.hpp"
#include "dpalab/rng.hpp"
#include "dpalab/tensor.hpp"

namespace dpalab {

struct AttnParams {
  Tensor wq, wk, wv;

  static AttnParams random(std::size_t d, SplitMix64& rng, double stddev) {
    return {Tensor::gaussian(d, d, stddev, rng), Tensor::gaussian(d, d, stddev, rng),
            Tensor::gaussian(d, d, stddev, rng)};
  }

  std::size_t dim() const { return wq.rows(); }

  void set_trainable(bool on) {
    for (Tensor* t : {&wq, &wk, &wv}) t->requires_grad = on;
  }
};

struct AttnWeights {
  Var wq, wk, wv;
};

inline AttnWeights bind(Graph& g, AttnParams& p) {
  return {g.leaf(p.wq), g.leaf(p.wk), g.leaf(p.wv)};
}

struct BiAttnParams {
  AttnParams vt;  // text queries, visual keys/values
  AttnParams tv;  // visual queries, text keys/values

  static BiAttnParams random(std::size_t d, SplitMix64& rng, double stddev) {
    AttnParams a = AttnParams::random(d, rng, stddev);
    AttnParams b = AttnParams::random(d, rng, stddev);
    return {std::move(a), std::move(b)};
  }

  void set_trainable(bool on) {
    vt.set_trainable(on);
    tv.set_trainable(on);
  }
};

struct BiAttnWeights {
  AttnWeights vt, tv;
};

inline BiAttnWeights bind(Graph& g, BiAttnParams& p) { return {bind(g, p.vt), bind(g, p.tv)}; }

// Granularity of the learnable DPA scale.
enum class LambdaKind {
  dim,       // lambda in R^{1 x d}
  task,      // lambda in R^{1 x 1}
  gate,      // per query row: tanh(q . w_g), w_g in R^{d x 1}
  constant,  // fixed 1.0, not trained
};

inline std::string to_string(LambdaKind k) {
  switch (k) {
    case LambdaKind::dim: return "dim";
    case LambdaKind::task: return "task";
    case LambdaKind::gate: return "gate";
    case LambdaKind::constant: return "constant";
  }
  return "dim";
}

inline LambdaKind lambda_kind_from_string(const std::string& s) {
  if (s == "dim") return LambdaKind::dim;
  if (s == "task") return LambdaKind::task;
  if (s == "gate") return LambdaKind::gate;
  if (s == "constant") return LambdaKind::constant;
  throw ConfigError("unknown lambda kind '" + s + "' (expected dim|task|gate|constant)");
}

inline Shape lambda_shape(LambdaKind kind, std::size_t d) {
  switch (kind) {
    case LambdaKind::dim: return {1, d};
    case LambdaKind::gate: return {d, 1};
    case LambdaKind::task:
    case LambdaKind::constant: return {1, 1};
  }
  return {1, d};
}

// One pair of scales per fusion layer. Zero at task start, except the
// constant variant which is pinned at 1.
struct DpaParams {
  Tensor lambda_vt;
  Tensor lambda_tv;
  LambdaKind kind = LambdaKind::dim;

  static DpaParams initial(std::size_t d, LambdaKind kind = LambdaKind::dim) {
    const double v = kind == LambdaKind::constant ? 1.0 : 0.0;
    DpaParams p{Tensor(lambda_shape(kind, d), v), Tensor(lambda_shape(kind, d), v), kind};
    p.set_trainable(kind != LambdaKind::constant);
    return p;
  }

  void set_trainable(bool on) {
    lambda_vt.requires_grad = on && kind != LambdaKind::constant;
    lambda_tv.requires_grad = on && kind != LambdaKind::constant;
  }
};

struct DpaWeights {
  Var lambda_vt, lambda_tv;
  LambdaKind kind;
};

inline DpaWeights bind(Graph& g, DpaParams& p) {
  return {g.leaf(p.lambda_vt), g.leaf(p.lambda_tv), p.kind};
}

// softmax((q_src Wq)(kv_src Wk)^T / sqrt(d)) (kv_src Wv)
inline Var attend(Var q_src, Var kv_src, const AttnWeights& w) {
  if (kv_src.rows() == 0) throw DimensionError("attend: empty key set");
  const double d = static_cast<double>(w.wq.cols());
  Var q = matmul(q_src, w.wq);
  Var k = matmul(kv_src, w.wk);
  Var v = matmul(kv_src, w.wv);
  Var scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(d));
  return matmul(softmax_rows(scores), v);
}

// Self-attention residual block used by the single-modality encoders.
inline Var self_attend(Var x, const AttnWeights& w) { return add(x, attend(x, x, w)); }

// {f_t + Attn_{v->t}(f_v, f_t), f_v + Attn_{t->v}(f_t, f_v)}
inline std::pair<Var, Var> x_attn(Var f_t, Var f_v, const BiAttnWeights& w) {
  Var t = add(f_t, attend(f_t, f_v, w.vt));
  Var v = add(f_v, attend(f_v, f_t, w.tv));
  return {t, v};
}

// X-Attn over the prompt-prepended sequences [p_t; f_t] and [p_v; f_v].
// Rows [0, l) of each output are the prompt outputs, the rest are features.
inline std::pair<Var, Var> prompt_attn(Var f_t, Var f_v, Var p_t, Var p_v,
                                       const BiAttnWeights& w) {
  if (p_t.rows() != p_v.rows()) {
    throw DimensionError("prompt_attn: text prompt has " + std::to_string(p_t.rows()) +
                         " rows, visual prompt " + std::to_string(p_v.rows()));
  }
  if (p_t.rows() == 0) return x_attn(f_t, f_v, w);
  return x_attn(concat_rows({p_t, f_t}), concat_rows({p_v, f_v}), w);
}

inline Var strip_prompt_rows(Var out, std::size_t l) {
  return l == 0 ? out : slice_rows(out, l, out.rows());
}

namespace detail {

inline Var row_sums(Var x) {
  Var ones = x.graph->constant(Tensor(Shape{x.cols(), 1}, 1.0));
  return matmul(x, ones);
}

// Expands the bound lambda to a multiplier for the prompt value rows
// ([l x d]) or, for the gate variant, for the prompt attention rows.
inline Var lambda_value_scale(Var lambda, LambdaKind kind, std::size_t l, std::size_t d) {
  if (kind == LambdaKind::dim) return broadcast_row_vector(lambda, l);
  return broadcast_row_vector(broadcast_col_vector(lambda, d), l);
}

// One direction of DPA: q_src + Attn(kv_src, q_src) + lambda * Attn(prompt, q_src).
// The prompt branch shares the query projection and a single score matmul
// with the base branch; the two softmaxes stay separate and lambda scales the
// prompt values, so the sum is one matmul over [A_base, A_prompt].
inline Var dpa_direction(Var q_src, Var kv_src, Var prompt, Var lambda, LambdaKind kind,
                         const AttnWeights& w) {
  const std::size_t lk = kv_src.rows();
  const std::size_t l = prompt.rows();
  const std::size_t d = w.wq.cols();
  if (l == 0) return add(q_src, attend(q_src, kv_src, w));
  if (lk == 0) throw DimensionError("dpa: empty key set");
  Var q = matmul(q_src, w.wq);
  Var keys_in = concat_rows({kv_src, prompt});
  Var k = matmul(keys_in, w.wk);
  Var v = matmul(keys_in, w.wv);
  Var scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d)));
  Var a_base = softmax_rows(slice_cols(scores, 0, lk));
  Var a_prompt = softmax_rows(slice_cols(scores, lk, lk + l));
  Var v_base = slice_rows(v, 0, lk);
  Var v_prompt = slice_rows(v, lk, lk + l);
  if (kind == LambdaKind::gate) {
    Var gate = tanh_elem(matmul(q_src, lambda));
    a_prompt = elementwise_mul(a_prompt, broadcast_col_vector(gate, l));
  } else {
    v_prompt = elementwise_mul(v_prompt, lambda_value_scale(lambda, kind, l, d));
  }
  Var mixed = matmul(concat_cols({a_base, a_prompt}), concat_rows({v_base, v_prompt}));
  return add(q_src, mixed);
}

}  // namespace detail

// Share of each text query's attention mass that falls on prompt keys:
// sum_p exp(s_p) / (sum_p exp(s_p) + sum_f exp(s_f)), same scores as attend().
// Returns [Lt x 1]; all zeros when there are no prompt rows.
inline Var lambda_mass(Var f_t, Var f_v, Var p_v, const AttnWeights& w_vt) {
  Graph& g = *f_t.graph;
  const std::size_t lt = f_t.rows(), lv = f_v.rows(), l = p_v.rows();
  if (l == 0) return g.constant(Tensor(Shape{lt, 1}, 0.0));
  const double d = static_cast<double>(w_vt.wq.cols());
  Var q = matmul(f_t, w_vt.wq);
  Var k = matmul(concat_rows({f_v, p_v}), w_vt.wk);
  Var probs = softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(d)));
  return detail::row_sums(slice_cols(probs, lv, lv + l));
}

// Text-side feature rows of prompt_attn rebuilt as
// f_t + (1 - lambda(f_t)) Attn(f_v, f_t) + lambda(f_t) Attn(p_v, f_t).
inline Var decompose_pa(Var f_t, Var f_v, Var p_v, const AttnWeights& w_vt) {
  if (p_v.rows() == 0) throw DimensionError("decompose_pa: needs at least one prompt row");
  const std::size_t d = f_t.cols();
  Var lam = broadcast_col_vector(lambda_mass(f_t, f_v, p_v, w_vt), d);
  Var one_minus = add_scalar(scale(lam, -1.0), 1.0);
  Var base = elementwise_mul(one_minus, attend(f_t, f_v, w_vt));
  Var prompt = elementwise_mul(lam, attend(f_t, p_v, w_vt));
  return add(f_t, add(base, prompt));
}

// Pre-division ratio lambda / (1 - lambda) that the learnable scale replaces.
inline Tensor lambda_ratio(const Tensor& mass) {
  Tensor r(mass.shape);
  for (std::size_t i = 0; i < mass.numel(); ++i) r.data[i] = mass.data[i] / (1.0 - mass.data[i]);
  return r;
}

// Decoupled Prompt Attention:
//   f~_t = f_t + Attn_{v->t}(f_v, f_t) + lambda_vt * Attn_{v->t}(p_v, f_t)
//   f~_v = f_v + Attn_{t->v}(f_t, f_v) + lambda_tv * Attn_{t->v}(p_t, f_v)
// No prompt output rows are produced. With lambda = 0 the result equals
// x_attn bit for bit.
inline std::pair<Var, Var> dpa(Var f_t, Var f_v, Var p_t, Var p_v, const BiAttnWeights& w,
                               const DpaWeights& lam) {
  if (p_t.rows() != p_v.rows()) {
    throw DimensionError("dpa: text prompt has " + std::to_string(p_t.rows()) +
                         " rows, visual prompt " + std::to_string(p_v.rows()));
  }
  Var t = detail::dpa_direction(f_t, f_v, p_v, lam.lambda_vt, lam.kind, w.vt);
  Var v = detail::dpa_direction(f_v, f_t, p_t, lam.lambda_tv, lam.kind, w.tv);
  return {t, v};
}

}  // namespace dpalab

#endif  // DPALAB_ATTENTION_HPP
