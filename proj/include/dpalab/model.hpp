#ifndef DPALAB_MODEL_HPP
#define DPALAB_MODEL_HPP

// Miniature vision-language detector:
//   f_v = visual encoder(image), f_t = text encoder(class names)
//   f_v', f_t' = fusion stack of X-Attn layers (optionally prompted)
//   boxes = box head(f_v'), logits = s * cos(f_v', f_t') + b
//
// The visual encoder splits the image into patches, embeds them linearly,
// adds learned positions and applies self-attention + tanh MLP blocks. The
// text encoder is one embedding row per class name followed by the same
// block type (no positions, so it is permutation-equivariant). Every encoder
// block and fusion layer output is row-standardised (layer norm without an
// affine part).

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpalab/attention.hpp"
#include "dpalab/autodiff.hpp"
#include "dpalab/bench.hpp"
#include "dpalab/errors.hpp"
#include "dpalab/rng.hpp"
#include "dpalab/serialize.hpp"
#include "dpalab/tensor.hpp"

namespace dpalab {

enum class Mechanism { none, pa, dpa };

inline std::string to_string(Mechanism m) {
  switch (m) {
    case Mechanism::none: return "none";
    case Mechanism::pa: return "pa";
    case Mechanism::dpa: return "dpa";
  }
  return "none";
}

inline Mechanism mechanism_from_string(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "none") return Mechanism::none;
  if (s == "pa") return Mechanism::pa;
  if (s == "dpa") return Mechanism::dpa;
  throw ConfigError("unknown mechanism '" + s + "' (expected none|pa|dpa)");
}

struct Injection {
  bool visual = false;
  bool text = false;
  bool fusion = true;
};

struct ToyVlodConfig {
  int image_size = 32;
  int patch_size = 4;
  int d = 64;
  int n_vis_layers = 2;
  int n_text_layers = 2;
  int n_fusion_layers = 6;
  int mlp_ratio = 4;
  int prompt_length = 10;
  Mechanism mechanism = Mechanism::dpa;
  Injection injection;
  LambdaKind lambda_kind = LambdaKind::dim;
  double score_threshold = 0.5;
  double nms_iou = 0.5;
  double logit_scale = 20.0;
  double positive_weight = 4.0;
  double value_init_scale = 0.1;
  std::vector<std::string> vocabulary = standard_vocabulary();
  std::uint64_t seed = 0;

  int grid() const { return image_size / patch_size; }
  int visual_tokens() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    if (patch_size < 1 || image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " is not divisible by patch_size " + std::to_string(patch_size));
    if (d < 1 || n_vis_layers < 0 || n_text_layers < 0 || n_fusion_layers < 0)
      throw ConfigError("model sizes must be non-negative (d >= 1)");
    if (prompt_length < 0) throw ConfigError("prompt_length must be >= 0");
    if (vocabulary.empty()) throw ConfigError("empty vocabulary");
    if (!(logit_scale > 0.0)) throw ConfigError("logit_scale must be > 0");
    if (!(positive_weight > 0.0)) throw ConfigError("positive_weight must be > 0");
    if (!(value_init_scale > 0.0)) throw ConfigError("value_init_scale must be > 0");
    if (!(score_threshold > 0.0 && score_threshold < 1.0))
      throw ConfigError("score_threshold must lie in (0, 1)");
    if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) throw ConfigError("nms_iou must lie in [0, 1]");
  }
};

struct MlpParams {
  Tensor w1, b1, w2, b2;

  static MlpParams random(std::size_t in, std::size_t hidden, std::size_t out, SplitMix64& rng) {
    return {Tensor::gaussian(in, hidden, 1.0 / std::sqrt(static_cast<double>(in)), rng),
            Tensor::zeros(1, hidden),
            Tensor::gaussian(hidden, out, 1.0 / std::sqrt(static_cast<double>(hidden)), rng),
            Tensor::zeros(1, out)};
  }
};

struct EncoderLayer {
  AttnParams attn;
  MlpParams mlp;
};

// Prompt material bound to one forward graph.
struct LayerPromptVars {
  Var p_t;
  Var p_v;
  std::optional<DpaWeights> lambda;
};

struct PromptVars {
  Mechanism mechanism = Mechanism::none;
  std::vector<LayerPromptVars> fusion;  // one per fusion layer, or empty
  std::vector<LayerPromptVars> visual;  // p_v and lambda_vt are used
  std::vector<LayerPromptVars> text;    // p_t and lambda_vt are used
};

struct Detection {
  Box box;
  std::size_t category = 0;  // index into the class list given to predict()
  double score = 0.0;
  std::size_t token = 0;
};

using Detections = std::vector<Detection>;

// Box centres may sit up to this many cells from the predicting token's cell centre.
inline constexpr double kBoxReach = 2.0;

struct HeadOutput {
  Var logits;  // [Lv x Lt], scaled cosine of f_v' and f_t' rows plus a bias
  Var boxes;   // [Lv x 4] decoded (cx, cy, w, h)
};

namespace detail {

inline Var mlp_forward(Var x, Var w1, Var b1, Var w2, Var b2) {
  return linear(tanh_elem(linear(x, w1, b1)), w2, b2);
}

}  // namespace detail

// One fusion layer under the given mechanism. PA prepends the prompts and
// strips their output rows again; DPA never produces prompt outputs.
inline std::pair<Var, Var> fusion_layer(Var f_v, Var f_t, const BiAttnWeights& w, Mechanism mech,
                                        const LayerPromptVars* lp) {
  if (mech == Mechanism::none || lp == nullptr) {
    auto [t, v] = x_attn(f_t, f_v, w);
    return {v, t};
  }
  if (mech == Mechanism::pa) {
    const std::size_t l = lp->p_t.rows();
    auto [t, v] = prompt_attn(f_t, f_v, lp->p_t, lp->p_v, w);
    return {strip_prompt_rows(v, l), strip_prompt_rows(t, l)};
  }
  if (!lp->lambda) throw ConfigError("DPA fusion layer has no lambda");
  auto [t, v] = dpa(f_t, f_v, lp->p_t, lp->p_v, w, *lp->lambda);
  return {v, t};
}

// Residual self-attention of an encoder layer, optionally prompted.
inline Var encoder_attention(Var x, const AttnWeights& w, Mechanism mech, Var prompt,
                             const DpaWeights* lambda) {
  if (mech == Mechanism::none || prompt.graph == nullptr) return self_attend(x, w);
  if (mech == Mechanism::pa) {
    return strip_prompt_rows(self_attend(concat_rows({prompt, x}), w), prompt.rows());
  }
  if (lambda == nullptr) throw ConfigError("DPA encoder layer has no lambda");
  return detail::dpa_direction(x, x, prompt, lambda->lambda_vt, lambda->kind, w);
}

// Patchify [S x S x 3] into [(S/p)^2 x 3p^2], patches in row-major grid order,
// pixels in row-major order within a patch, channels innermost.
inline Tensor patchify(const Tensor& image, int patch) {
  if (image.rank() != 3 || image.shape[2] != 3 || image.shape[0] != image.shape[1]) {
    throw ConfigError("image must be [S x S x 3], got " + shape_str(image.shape));
  }
  const std::size_t s = image.shape[0];
  const std::size_t p = static_cast<std::size_t>(patch);
  const std::size_t g = s / p;
  Tensor out({g * g, p * p * 3});
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx) {
      double* row = out.row(gy * g + gx);
      std::size_t k = 0;
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x)
          for (std::size_t c = 0; c < 3; ++c)
            row[k++] = image.data[((gy * p + y) * s + gx * p + x) * 3 + c];
    }
  return out;
}

// Per-class non-maximum suppression. Candidates are ranked by
// (score desc, token asc, category asc); output keeps that order.
inline Detections non_max_suppression(Detections cands, double iou_threshold) {
  std::sort(cands.begin(), cands.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.token != b.token) return a.token < b.token;
    return a.category < b.category;
  });
  Detections kept;
  for (const Detection& c : cands) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.category == c.category && iou(k.box, c.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

class ToyVlodModel {
 public:
  explicit ToyVlodModel(ToyVlodConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    SplitMix64 rng(cfg_.seed ^ 0xB0A5E5EEDULL);
    const std::size_t d = cfg_.d;
    const std::size_t hidden = d * cfg_.mlp_ratio;
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
    patch_w_ = Tensor::gaussian(cfg_.patch_dim(), d, 1.0 / std::sqrt(cfg_.patch_dim()), rng);
    patch_b_ = Tensor::zeros(1, d);
    pos_ = Tensor::gaussian(cfg_.visual_tokens(), d, 0.1, rng);
    for (int i = 0; i < cfg_.n_vis_layers; ++i)
      vis_layers_.push_back({AttnParams::random(d, rng, attn_std), MlpParams::random(d, hidden, d, rng)});
    text_embed_ = Tensor::gaussian(cfg_.vocabulary.size(), d, 0.3, rng);
    for (int i = 0; i < cfg_.n_text_layers; ++i)
      text_layers_.push_back({AttnParams::random(d, rng, attn_std), MlpParams::random(d, hidden, d, rng)});
    for (int i = 0; i < cfg_.n_fusion_layers; ++i)
      fusion_.push_back(BiAttnParams::random(d, rng, attn_std));
    box_head_ = MlpParams::random(d, hidden, 4, rng);
    // Value projections start small so every residual block begins near identity.
    for (auto& l : vis_layers_) for (double& x : l.attn.wv.data) x *= cfg_.value_init_scale;
    for (auto& l : text_layers_) for (double& x : l.attn.wv.data) x *= cfg_.value_init_scale;
    for (auto& f : fusion_) {
      for (double& x : f.vt.wv.data) x *= cfg_.value_init_scale;
      for (double& x : f.tv.wv.data) x *= cfg_.value_init_scale;
    }
    logit_bias_ = Tensor::zeros(1, 1);
    for (std::size_t i = 0; i < cfg_.vocabulary.size(); ++i) vocab_index_[cfg_.vocabulary[i]] = i;
    set_trainable(false);
  }

  ToyVlodModel(const ToyVlodModel&) = default;
  ToyVlodModel& operator=(const ToyVlodModel&) = default;

  const ToyVlodConfig& config() const { return cfg_; }
  ToyVlodConfig& mutable_config() { return cfg_; }

  // Every base parameter in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("vis.patch.w", &patch_w_);
    out.emplace_back("vis.patch.b", &patch_b_);
    out.emplace_back("vis.pos", &pos_);
    add_encoder(out, "vis", vis_layers_);
    out.emplace_back("text.embed", &text_embed_);
    add_encoder(out, "text", text_layers_);
    for (std::size_t i = 0; i < fusion_.size(); ++i) {
      const std::string p = "fusion.L" + std::to_string(i);
      out.emplace_back(p + ".vt.wq", &fusion_[i].vt.wq);
      out.emplace_back(p + ".vt.wk", &fusion_[i].vt.wk);
      out.emplace_back(p + ".vt.wv", &fusion_[i].vt.wv);
      out.emplace_back(p + ".tv.wq", &fusion_[i].tv.wq);
      out.emplace_back(p + ".tv.wk", &fusion_[i].tv.wk);
      out.emplace_back(p + ".tv.wv", &fusion_[i].tv.wv);
    }
    add_mlp(out, "head.box", box_head_);
    out.emplace_back("head.logit_bias", &logit_bias_);
    return out;
  }

  std::vector<std::pair<std::string, const Tensor*>> parameters() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    for (auto& [n, t] : const_cast<ToyVlodModel*>(this)->parameters()) out.emplace_back(n, t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t->numel();
    return n;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : parameters()) {
      t->requires_grad = on;
      if (!on) t->grad.reset();
    }
  }

  std::uint64_t hash() const {
    TensorHasher h;
    for (const auto& [name, t] : parameters()) {
      h.add(name);
      h.add(*t);
    }
    return h.value();
  }

  void save(const std::filesystem::path& base) const {
    NamedTensors named;
    for (const auto& [n, t] : parameters()) named.emplace_back(n, t);
    save_checkpoint(base, named, config_json());
  }

  void load_parameters(const Checkpoint& ck) {
    for (auto& [name, t] : parameters()) {
      const auto it = ck.tensors.find(name);
      if (it == ck.tensors.end()) throw ConfigError("checkpoint lacks parameter " + name);
      if (it->second.shape != t->shape)
        throw ConfigError("checkpoint shape mismatch for " + name);
      t->data = it->second.data;
    }
  }

  nlohmann::json config_json() const {
    return {{"image_size", cfg_.image_size},   {"patch_size", cfg_.patch_size},
            {"d", cfg_.d},                     {"n_vis_layers", cfg_.n_vis_layers},
            {"n_text_layers", cfg_.n_text_layers}, {"n_fusion_layers", cfg_.n_fusion_layers},
            {"mlp_ratio", cfg_.mlp_ratio},     {"logit_scale", cfg_.logit_scale},
            {"positive_weight", cfg_.positive_weight}, {"value_init_scale", cfg_.value_init_scale},
            {"vocabulary", cfg_.vocabulary},
            {"seed", cfg_.seed}};
  }

  std::size_t vocab_index(const std::string& name) const {
    const auto it = vocab_index_.find(name);
    if (it == vocab_index_.end()) throw ConfigError("class name '" + name + "' is not in the vocabulary");
    return it->second;
  }

  // ------------------------------------------------------------------------
  // Forward pieces

  Var encode_image(Graph& g, const Tensor& image, const PromptVars* prompts = nullptr) {
    if (image.rank() != 3 || image.shape[0] != static_cast<std::size_t>(cfg_.image_size) ||
        image.shape[1] != static_cast<std::size_t>(cfg_.image_size) || image.shape[2] != 3) {
      throw ConfigError("image shape " + shape_str(image.shape) + " does not match configured size " +
                        std::to_string(cfg_.image_size));
    }
    Var patches = g.constant(patchify(image, cfg_.patch_size));
    Var x = add(linear(patches, g.leaf(patch_w_), g.leaf(patch_b_)), g.leaf(pos_));
    const bool inject = prompts && cfg_.injection.visual && !prompts->visual.empty();
    for (std::size_t i = 0; i < vis_layers_.size(); ++i) {
      const LayerPromptVars* lp = inject ? &prompts->visual.at(i) : nullptr;
      x = encoder_block(g, x, vis_layers_[i], lp, lp ? lp->p_v : Var{}, prompts);
    }
    return x;
  }

  Var encode_text(Graph& g, const std::vector<std::string>& names,
                  const PromptVars* prompts = nullptr) {
    if (names.empty()) throw ConfigError("encode_text: empty class list");
    std::vector<std::size_t> idx;
    for (const auto& n : names) idx.push_back(vocab_index(n));
    Var x = gather_rows(g.leaf(text_embed_), idx);
    const bool inject = prompts && cfg_.injection.text && !prompts->text.empty();
    for (std::size_t i = 0; i < text_layers_.size(); ++i) {
      const LayerPromptVars* lp = inject ? &prompts->text.at(i) : nullptr;
      x = encoder_block(g, x, text_layers_[i], lp, lp ? lp->p_t : Var{}, prompts);
    }
    return x;
  }

  // Runs the fusion stack. When `layer_inputs` is given it receives the
  // visual features entering each fusion layer.
  std::pair<Var, Var> fuse(Graph& g, Var f_v, Var f_t, const PromptVars* prompts = nullptr,
                           std::vector<Var>* layer_inputs = nullptr) {
    const bool inject = prompts && prompts->mechanism != Mechanism::none && cfg_.injection.fusion &&
                        !prompts->fusion.empty();
    if (inject && prompts->fusion.size() != fusion_.size()) {
      throw ConfigError("prompt set has " + std::to_string(prompts->fusion.size()) +
                        " fusion layers, model has " + std::to_string(fusion_.size()));
    }
    for (std::size_t i = 0; i < fusion_.size(); ++i) {
      if (layer_inputs) layer_inputs->push_back(f_v);
      BiAttnWeights w = bind(g, fusion_[i]);
      if (!inject) {
        std::tie(f_v, f_t) = fusion_layer(f_v, f_t, w, Mechanism::none, nullptr);
      } else {
        const LayerPromptVars& lp = prompts->fusion[i];
        check_prompt(lp.p_t);
        check_prompt(lp.p_v);
        std::tie(f_v, f_t) = fusion_layer(f_v, f_t, w, prompts->mechanism, &lp);
      }
      f_v = layer_norm_rows(f_v);
      f_t = layer_norm_rows(f_t);
    }
    return {f_v, f_t};
  }

  HeadOutput heads(Graph& g, Var f_v, Var f_t) {
    Var raw = detail::mlp_forward(f_v, g.leaf(box_head_.w1), g.leaf(box_head_.b1),
                                  g.leaf(box_head_.w2), g.leaf(box_head_.b2));
    const std::size_t lv = f_v.rows();
    const std::size_t grid = static_cast<std::size_t>(cfg_.grid());
    Tensor mult({lv, 4}), offset({lv, 4});
    for (std::size_t tok = 0; tok < lv; ++tok) {
      const double gsz = static_cast<double>(grid);
      mult(tok, 0) = 2.0 * kBoxReach / gsz;
      mult(tok, 1) = 2.0 * kBoxReach / gsz;
      mult(tok, 2) = 1.0;
      mult(tok, 3) = 1.0;
      offset(tok, 0) = (static_cast<double>(tok % grid) + 0.5 - kBoxReach) / gsz;
      offset(tok, 1) = (static_cast<double>(tok / grid) + 0.5 - kBoxReach) / gsz;
    }
    Var boxes = add(elementwise_mul(sigmoid_elem(raw), g.constant(std::move(mult))),
                    g.constant(std::move(offset)));
    Var sim = matmul_nt(l2_normalize_rows(f_v), l2_normalize_rows(f_t));
    Var bias = broadcast_row_vector(broadcast_col_vector(g.leaf(logit_bias_), f_t.rows()), lv);
    return {add(scale(sim, cfg_.logit_scale), bias), boxes};
  }

  struct Forward {
    Var f_v, f_t;
    HeadOutput head;
  };

  // Full pass. `cached_visual` short-circuits the visual encoder when its
  // output is known to be constant (frozen encoder, no visual prompts).
  Forward forward(Graph& g, const Tensor& image, const std::vector<std::string>& names,
                  const PromptVars* prompts = nullptr, const Tensor* cached_visual = nullptr,
                  std::vector<Var>* layer_inputs = nullptr) {
    Var f_v = cached_visual ? g.constant(*cached_visual) : encode_image(g, image, prompts);
    Var f_t = encode_text(g, names, prompts);
    auto [v, t] = fuse(g, f_v, f_t, prompts, layer_inputs);
    return {v, t, heads(g, v, t)};
  }

  Detections predict(const HeadOutput& out) const {
    return predict(out.logits.value(), out.boxes.value());
  }

  // Thresholded per-token, per-class scores followed by per-class NMS.
  Detections predict(const Tensor& logits, const Tensor& boxes) const {
    Detections cands;
    for (std::size_t tok = 0; tok < logits.rows(); ++tok) {
      const Box b{std::clamp(boxes(tok, 0), 0.0, 1.0), std::clamp(boxes(tok, 1), 0.0, 1.0),
                  std::clamp(boxes(tok, 2), 0.0, 1.0), std::clamp(boxes(tok, 3), 0.0, 1.0)};
      for (std::size_t c = 0; c < logits.cols(); ++c) {
        const double s = sigmoid(logits(tok, c));
        if (s >= cfg_.score_threshold) cands.push_back({b, c, s, tok});
      }
    }
    return non_max_suppression(std::move(cands), cfg_.nms_iou);
  }

  // Index of the token whose cell holds the box centre.
  std::size_t centre_token(const Box& b) const {
    const int grid = cfg_.grid();
    if (!(b.cx >= 0.0 && b.cx < 1.0 && b.cy >= 0.0 && b.cy < 1.0)) {
      throw AssignmentError("box centre (" + std::to_string(b.cx) + ", " + std::to_string(b.cy) +
                            ") lies outside the token grid");
    }
    const int col = std::min(grid - 1, static_cast<int>(b.cx * grid));
    const int row = std::min(grid - 1, static_cast<int>(b.cy * grid));
    return static_cast<std::size_t>(row * grid + col);
  }

  // Tokens assigned to a box: every cell whose centre lies inside it, plus
  // the cell holding the box centre.
  std::vector<std::size_t> positive_tokens(const Box& b) const {
    const std::size_t centre = centre_token(b);
    const int grid = cfg_.grid();
    std::vector<std::size_t> out;
    for (int row = 0; row < grid; ++row)
      for (int col = 0; col < grid; ++col) {
        const std::size_t tok = static_cast<std::size_t>(row * grid + col);
        const double x = (col + 0.5) / grid, y = (row + 0.5) / grid;
        if (tok == centre || (std::abs(x - b.cx) < 0.5 * b.w && std::abs(y - b.cy) < 0.5 * b.h))
          out.push_back(tok);
      }
    return out;
  }

  // Mean BCE over all (token, class) logits, positives from positive_tokens(),
  // plus the mean over positive tokens of the L1 box error.
  Var loss(Graph& g, const HeadOutput& out, const std::vector<Annotation>& objects,
           const std::vector<std::string>& names) const {
    if (objects.empty()) throw AssignmentError("loss: image has no ground-truth boxes");
    const std::size_t lv = out.logits.rows();
    Tensor targets({lv, names.size()});
    std::vector<std::size_t> pos;
    std::vector<double> gt;
    for (const auto& o : objects) {
      const auto it = std::find(names.begin(), names.end(), o.category);
      if (it == names.end()) throw ConfigError("ground-truth class '" + o.category + "' not in class list");
      for (std::size_t tok : positive_tokens(o.box)) {
        targets(tok, static_cast<std::size_t>(it - names.begin())) = 1.0;
        pos.push_back(tok);
        gt.insert(gt.end(), {o.box.cx, o.box.cy, o.box.w, o.box.h});
      }
    }
    Var cls = bce_with_logits_mean(out.logits, targets, cfg_.positive_weight);
    Var diff = sub(gather_rows(out.boxes, pos), g.constant(Tensor({pos.size(), 4}, std::move(gt))));
    Var box = scale(sum_all(abs_elem(diff)), 1.0 / static_cast<double>(pos.size()));
    return add(cls, box);
  }

  std::vector<BiAttnParams>& fusion_layers() { return fusion_; }

 private:
  static void add_mlp(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& p,
                      MlpParams& m) {
    out.emplace_back(p + ".w1", &m.w1);
    out.emplace_back(p + ".b1", &m.b1);
    out.emplace_back(p + ".w2", &m.w2);
    out.emplace_back(p + ".b2", &m.b2);
  }

  static void add_encoder(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& p,
                          std::vector<EncoderLayer>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string q = p + ".L" + std::to_string(i);
      out.emplace_back(q + ".attn.wq", &layers[i].attn.wq);
      out.emplace_back(q + ".attn.wk", &layers[i].attn.wk);
      out.emplace_back(q + ".attn.wv", &layers[i].attn.wv);
      add_mlp(out, q + ".mlp", layers[i].mlp);
    }
  }

  void check_prompt(Var p) const {
    if (p.cols() != static_cast<std::size_t>(cfg_.d))
      throw ConfigError("prompt width " + std::to_string(p.cols()) + " does not match d = " +
                        std::to_string(cfg_.d));
  }

  Var encoder_block(Graph& g, Var x, EncoderLayer& layer, const LayerPromptVars* lp, Var prompt,
                    const PromptVars* prompts) {
    AttnWeights w = bind(g, layer.attn);
    if (lp == nullptr || prompts->mechanism == Mechanism::none) {
      x = self_attend(x, w);
    } else {
      check_prompt(prompt);
      x = encoder_attention(x, w, prompts->mechanism, prompt, lp->lambda ? &*lp->lambda : nullptr);
    }
    x = layer_norm_rows(x);
    return layer_norm_rows(add(x, detail::mlp_forward(x, g.leaf(layer.mlp.w1), g.leaf(layer.mlp.b1),
                                                      g.leaf(layer.mlp.w2), g.leaf(layer.mlp.b2))));
  }

  ToyVlodConfig cfg_;
  Tensor patch_w_, patch_b_, pos_;
  std::vector<EncoderLayer> vis_layers_;
  Tensor text_embed_;
  std::vector<EncoderLayer> text_layers_;
  std::vector<BiAttnParams> fusion_;
  MlpParams box_head_;
  Tensor logit_bias_;
  std::map<std::string, std::size_t> vocab_index_;
};

}  // namespace dpalab

#endif  // DPALAB_MODEL_HPP
