#ifndef DPALAB_IPG_HPP
#define DPALAB_IPG_HPP

// Instance-level prompt generation.
//
// Region features of ground-truth boxes are pooled from the visual tokens
// entering each fusion layer and stored as per-category instance banks. A
// learnable initial prompt then attends over the bank (CCPKI):
//   p_dot  = softmax(p (I Wk)^T / sqrt(d)) (I Wv)
//   p_ddot = p + alpha * tanh(tau * p_dot)
// Generated prompts and a routing centroid per task live in an append-only
// prompt pool; inference picks a task by cosine similarity.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dpalab/attention.hpp"
#include "dpalab/autodiff.hpp"
#include "dpalab/bench.hpp"
#include "dpalab/errors.hpp"
#include "dpalab/model.hpp"
#include "dpalab/rng.hpp"
#include "dpalab/serialize.hpp"
#include "dpalab/tensor.hpp"

namespace dpalab {

inline constexpr double kDefaultRoiGamma = 1.69;
inline constexpr double kPromptInitStd = 0.02;

// Mean of the cells of an [H x W x d] map (row-major, channels innermost)
// overlapped by `box` after scaling its width and height by gamma about the
// centre and clamping to the map. A box that covers no cell snaps to the cell
// nearest its centre.
inline Tensor roi_pool_cells(const double* map, std::size_t h, std::size_t w, std::size_t d,
                             const Box& box, double gamma) {
  if (!(gamma > 0.0)) throw ConfigError("roi_pool: gamma must be positive");
  if (h == 0 || w == 0) throw DimensionError("roi_pool: empty feature map");
  const double bw = box.w * gamma, bh = box.h * gamma;
  const double x0 = std::clamp(box.cx - bw / 2, 0.0, 1.0), x1 = std::clamp(box.cx + bw / 2, 0.0, 1.0);
  const double y0 = std::clamp(box.cy - bh / 2, 0.0, 1.0), y1 = std::clamp(box.cy + bh / 2, 0.0, 1.0);
  Tensor out(Shape{d}, 0.0);
  std::size_t n = 0;
  for (std::size_t r = 0; r < h; ++r) {
    const double cy0 = static_cast<double>(r) / h, cy1 = static_cast<double>(r + 1) / h;
    if (!(y1 > cy0 && y0 < cy1)) continue;
    for (std::size_t c = 0; c < w; ++c) {
      const double cx0 = static_cast<double>(c) / w, cx1 = static_cast<double>(c + 1) / w;
      if (!(x1 > cx0 && x0 < cx1)) continue;
      const double* cell = map + (r * w + c) * d;
      for (std::size_t k = 0; k < d; ++k) out.data[k] += cell[k];
      ++n;
    }
  }
  if (n == 0) {
    const auto nearest = [](double v, std::size_t cells) {
      const auto i = static_cast<long>(std::floor(std::clamp(v, 0.0, 1.0) * cells));
      return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(cells) - 1));
    };
    const double* cell = map + (nearest(box.cy, h) * w + nearest(box.cx, w)) * d;
    std::copy(cell, cell + d, out.data.begin());
    return out;
  }
  for (double& v : out.data) v /= static_cast<double>(n);
  return out;
}

inline Tensor roi_pool(const Tensor& feature_map, const Box& box, double gamma = kDefaultRoiGamma) {
  if (feature_map.rank() != 3) throw DimensionError("roi_pool: feature map must be [H x W x d]");
  return roi_pool_cells(feature_map.data.data(), feature_map.shape[0], feature_map.shape[1],
                        feature_map.shape[2], box, gamma);
}

// Token rows [grid*grid x d] viewed as a square map.
inline Tensor roi_pool_tokens(const Tensor& tokens, std::size_t grid, const Box& box,
                              double gamma = kDefaultRoiGamma) {
  if (tokens.rows() != grid * grid)
    throw DimensionError("roi_pool: " + std::to_string(tokens.rows()) + " tokens do not form a " +
                         std::to_string(grid) + "x" + std::to_string(grid) + " grid");
  return roi_pool_cells(tokens.data.data(), grid, grid, tokens.cols(), box, gamma);
}

struct InstanceBank {
  int task_id = 0;
  int layer_id = 0;
  std::vector<std::string> categories;
  std::vector<std::vector<Tensor>> vectors;  // [category][j] -> Tensor[d]

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& v : vectors) n += v.size();
    return n;
  }

  // Stacked keys I in R^{K x d}, categories in order.
  Tensor flattened() const {
    const std::size_t k = size();
    if (k == 0) throw ConfigError("instance bank for layer " + std::to_string(layer_id) + " is empty");
    const std::size_t d = vectors.front().front().numel();
    Tensor out({k, d});
    std::size_t r = 0;
    for (const auto& cat : vectors)
      for (const Tensor& v : cat) std::copy(v.data.begin(), v.data.end(), out.row(r++));
    return out;
  }
};

// Per-layer visual features of every training image, as seen by the frozen
// base on the way into the fusion stack.
inline std::vector<std::vector<Tensor>> fusion_layer_inputs(ToyVlodModel& base,
                                                            const std::vector<Image>& images,
                                                            const std::vector<std::string>& names) {
  std::vector<std::vector<Tensor>> out;
  for (const Image& im : images) {
    Graph g;
    std::vector<Var> inputs;
    Var f_v = base.encode_image(g, im.pixels);
    Var f_t = base.encode_text(g, names);
    base.fuse(g, f_v, f_t, nullptr, &inputs);
    std::vector<Tensor> per_layer;
    for (Var v : inputs) per_layer.push_back(v.value());
    out.push_back(std::move(per_layer));
  }
  return out;
}

// One bank per fusion layer with M vectors per category, sampled with
// replacement from the pooled ground-truth boxes in a seed-fixed order.
inline std::vector<InstanceBank> build_instance_banks(ToyVlodModel& base, const TaskDataset& ds,
                                                      int m, std::uint64_t seed,
                                                      double gamma = kDefaultRoiGamma) {
  if (m < 1) throw ConfigError("instance bank size M must be >= 1");
  const auto features = fusion_layer_inputs(base, ds.train, ds.class_names);
  const std::size_t grid = static_cast<std::size_t>(base.config().grid());
  const std::size_t layers = static_cast<std::size_t>(base.config().n_fusion_layers);
  std::vector<InstanceBank> banks(layers);
  SplitMix64 rng(seed ^ 0x1A57A4CEULL);
  for (const auto& name : ds.class_names) {
    std::vector<std::pair<std::size_t, Box>> boxes;
    for (std::size_t i = 0; i < ds.train.size(); ++i)
      for (const auto& o : ds.train[i].objects)
        if (o.category == name) boxes.emplace_back(i, o.box);
    if (boxes.empty()) throw ConfigError("category '" + name + "' has no training boxes");
    std::vector<std::size_t> picks;
    if (static_cast<std::size_t>(m) <= boxes.size()) {
      std::vector<std::size_t> idx(boxes.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
      picks.assign(idx.begin(), idx.begin() + m);
    } else {
      for (std::size_t i = 0; i < boxes.size(); ++i) picks.push_back(i);
      while (picks.size() < static_cast<std::size_t>(m)) picks.push_back(rng.below(boxes.size()));
    }
    for (std::size_t layer = 0; layer < layers; ++layer) {
      InstanceBank& bank = banks[layer];
      bank.task_id = ds.task_id;
      bank.layer_id = static_cast<int>(layer);
      bank.categories.push_back(name);
      std::vector<Tensor> vecs;
      for (std::size_t p : picks) {
        const auto& [img, box] = boxes[p];
        vecs.push_back(roi_pool_tokens(features[img][layer], grid, box, gamma));
      }
      bank.vectors.push_back(std::move(vecs));
    }
  }
  return banks;
}

struct CcpkiParams {
  Tensor wk, wv;  // [d x d]
  Tensor tau;     // [l x 1]
  Tensor alpha;   // [1 x d]

  // Wk, Wv ~ N(0, 1/d); tau = 1; alpha = 0.
  static CcpkiParams initial(std::size_t l, std::size_t d, SplitMix64& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d));
    CcpkiParams p{Tensor::gaussian(d, d, s, rng), Tensor::gaussian(d, d, s, rng),
                  Tensor::filled(l, 1, 1.0), Tensor::zeros(1, d)};
    p.set_trainable(true);
    return p;
  }

  void set_trainable(bool on) {
    for (Tensor* t : {&wk, &wv, &tau, &alpha}) {
      t->requires_grad = on;
      if (!on) t->grad.reset();
    }
  }

  std::vector<std::pair<std::string, Tensor*>> parameters() {
    return {{"ccpki.wk", &wk}, {"ccpki.wv", &wv}, {"ccpki.tau", &tau}, {"ccpki.alpha", &alpha}};
  }

  std::size_t parameter_count() const { return wk.numel() + wv.numel() + tau.numel() + alpha.numel(); }
};

struct CcpkiWeights {
  Var wk, wv, tau, alpha;
};

inline CcpkiWeights bind(Graph& g, CcpkiParams& p) {
  return {g.leaf(p.wk), g.leaf(p.wv), g.leaf(p.tau), g.leaf(p.alpha)};
}

inline Var ccpki_generate(Var p_init, Var bank, const CcpkiWeights& w) {
  if (bank.rows() == 0) throw ConfigError("ccpki_generate: empty instance bank");
  if (p_init.cols() != bank.cols())
    throw DimensionError("ccpki_generate: prompt width " + std::to_string(p_init.cols()) +
                         " vs bank width " + std::to_string(bank.cols()));
  const std::size_t l = p_init.rows(), d = p_init.cols();
  if (w.tau.rows() != l)
    throw DimensionError("ccpki_generate: tau has " + std::to_string(w.tau.rows()) + " rows, prompt " +
                         std::to_string(l));
  Var keys = matmul(bank, w.wk);
  Var values = matmul(bank, w.wv);
  Var attn = softmax_rows(scale(matmul_nt(p_init, keys), 1.0 / std::sqrt(static_cast<double>(d))));
  Var p_dot = matmul(attn, values);
  Var gated = tanh_elem(elementwise_mul(broadcast_col_vector(w.tau, d), p_dot));
  return add(p_init, elementwise_mul(broadcast_row_vector(w.alpha, l), gated));
}

// Plain-tensor convenience wrapper.
inline Tensor ccpki_generate(const Tensor& p_init, const Tensor& bank, CcpkiParams& params) {
  Graph g;
  CcpkiParams copy = params;
  copy.set_trainable(false);
  return ccpki_generate(g.constant(p_init), g.constant(bank), bind(g, copy)).value();
}

// Weight transfer between consecutive tasks: a deep copy, or a fresh draw
// from the initial distribution when transfer is disabled.
inline CcpkiParams transfer_weights(const CcpkiParams& prev, bool enabled, SplitMix64& rng) {
  if (enabled) {
    CcpkiParams p = prev;
    p.set_trainable(true);
    return p;
  }
  return CcpkiParams::initial(prev.tau.rows(), prev.wk.rows(), rng);
}

// ---------------------------------------------------------------------------
// Prompt pool and routing

struct LayerPrompts {
  Tensor p_t, p_v;  // [l x d]
};

struct PoolEntry {
  int task_id = 0;
  Mechanism mechanism = Mechanism::dpa;
  std::vector<std::string> class_names;
  std::vector<LayerPrompts> layers;
  std::vector<DpaParams> lambdas;  // empty unless mechanism == dpa
  // Encoder-layer prompts, present only when injection reaches the encoders.
  std::vector<Tensor> visual, text;
  std::vector<DpaParams> visual_lambdas, text_lambdas;
  Tensor key;  // routing centroid [d]

  std::uint64_t hash() const {
    TensorHasher h;
    h.add(std::to_string(task_id));
    for (const auto& lp : layers) {
      h.add(lp.p_t);
      h.add(lp.p_v);
    }
    for (const auto& lam : lambdas) {
      h.add(lam.lambda_vt);
      h.add(lam.lambda_tv);
    }
    for (const auto* group : {&visual, &text})
      for (const Tensor& t : *group) h.add(t);
    for (const auto* group : {&visual_lambdas, &text_lambdas})
      for (const auto& lam : *group) h.add(lam.lambda_vt);
    h.add(key);
    return h.value();
  }

  // Binds the frozen prompts as graph constants.
  PromptVars bind(Graph& g) const {
    PromptVars pv;
    pv.mechanism = layers.empty() ? Mechanism::none : mechanism;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      LayerPromptVars lp{g.constant(layers[i].p_t), g.constant(layers[i].p_v), std::nullopt};
      if (mechanism == Mechanism::dpa)
        lp.lambda = DpaWeights{g.constant(lambdas.at(i).lambda_vt), g.constant(lambdas.at(i).lambda_tv),
                               lambdas.at(i).kind};
      pv.fusion.push_back(std::move(lp));
    }
    const auto encoder = [&](const std::vector<Tensor>& prompts, const std::vector<DpaParams>& lams,
                             bool visual_side) {
      std::vector<LayerPromptVars> out;
      for (std::size_t i = 0; i < prompts.size(); ++i) {
        Var p = g.constant(prompts[i]);
        LayerPromptVars lp{visual_side ? Var{} : p, visual_side ? p : Var{}, std::nullopt};
        if (mechanism == Mechanism::dpa)
          lp.lambda = DpaWeights{g.constant(lams.at(i).lambda_vt), g.constant(lams.at(i).lambda_vt),
                                 lams.at(i).kind};
        out.push_back(std::move(lp));
      }
      return out;
    };
    pv.visual = encoder(visual, visual_lambdas, true);
    pv.text = encoder(text, text_lambdas, false);
    if (pv.mechanism == Mechanism::none && (!visual.empty() || !text.empty())) pv.mechanism = mechanism;
    return pv;
  }
};

class PromptPool {
 public:
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const PoolEntry& at(std::size_t i) const { return entries_.at(i); }
  const std::vector<PoolEntry>& entries() const { return entries_; }

  void append(PoolEntry e) { entries_.push_back(std::move(e)); }

  std::vector<std::uint64_t> hashes() const {
    std::vector<std::uint64_t> out;
    for (const auto& e : entries_) out.push_back(e.hash());
    return out;
  }

  void save(const std::filesystem::path& dir) const;
  static PromptPool load(const std::filesystem::path& dir);

 private:
  std::vector<PoolEntry> entries_;
};

inline double cosine(const Tensor& a, const Tensor& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    dot += a.data[i] * b.data[i];
    na += a.data[i] * a.data[i];
    nb += b.data[i] * b.data[i];
  }
  return dot / std::sqrt(na * nb);
}

// Index of the key with the highest cosine similarity; ties go to the lower index.
inline std::size_t route_task(const Tensor& query, const std::vector<Tensor>& keys) {
  if (keys.empty()) throw RoutingError("route_task: prompt pool is empty");
  double qn = 0;
  for (double v : query.data) qn += v * v;
  if (!(qn > 0.0)) throw RoutingError("route_task: query feature has zero norm");
  std::size_t best = 0;
  double best_sim = -2.0;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i].numel() != query.numel())
      throw DimensionError("route_task: key " + std::to_string(i) + " has wrong width");
    const double s = cosine(query, keys[i]);
    if (s > best_sim) {
      best_sim = s;
      best = i;
    }
  }
  return best;
}

inline std::size_t route_task(const Tensor& query, const PromptPool& pool) {
  std::vector<Tensor> keys;
  for (const auto& e : pool.entries()) keys.push_back(e.key);
  return route_task(query, keys);
}

// Mean over tokens of the frozen visual encoder's last layer.
inline Tensor routing_feature(ToyVlodModel& base, const Tensor& image) {
  Graph g;
  Var f = mean_rows(base.encode_image(g, image));
  Tensor out = f.value();
  out.shape = {out.numel()};
  return out;
}

inline Tensor normalized(const Tensor& v) {
  double n = 0;
  for (double x : v.data) n += x * x;
  n = std::sqrt(n);
  Tensor out = v;
  for (double& x : out.data) x /= n;
  return out;
}

struct Centroid {
  Tensor key;
  bool degenerate = false;  // pre-normalization norm below 1e-6
};

// Mean of l2-normalized query features, re-normalized.
inline Centroid centroid_of(const std::vector<Tensor>& features) {
  if (features.empty()) throw ConfigError("learn_centroid: empty dataset");
  Tensor sum(features.front().shape, 0.0);
  for (const Tensor& f : features) {
    const Tensor u = normalized(f);
    for (std::size_t i = 0; i < sum.numel(); ++i) sum.data[i] += u.data[i];
  }
  for (double& x : sum.data) x /= static_cast<double>(features.size());
  double n = 0;
  for (double x : sum.data) n += x * x;
  n = std::sqrt(n);
  if (n < 1e-6) return {sum, true};
  return {normalized(sum), false};
}

inline Centroid learn_centroid(ToyVlodModel& base, const TaskDataset& ds) {
  std::vector<Tensor> feats;
  for (const Image& im : ds.train) feats.push_back(routing_feature(base, im.pixels));
  return centroid_of(feats);
}

// Pool layout: manifest.json plus task_<k>_layer_<j>_{t,v}.bin and, for DPA,
// task_<k>_layer_<j>_lambda_{vt,tv}.bin. Encoder prompts, when present, go to
// task_<k>_{vis,text}_<j>.bin (+ _lambda.bin).
inline void PromptPool::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json m;
  m["entries"] = nlohmann::json::array();
  for (std::size_t k = 0; k < entries_.size(); ++k) {
    const PoolEntry& e = entries_[k];
    const std::string stem = "task_" + std::to_string(k);
    for (std::size_t j = 0; j < e.layers.size(); ++j) {
      const std::string s = stem + "_layer_" + std::to_string(j);
      save_tensor_file(dir / (s + "_t.bin"), e.layers[j].p_t);
      save_tensor_file(dir / (s + "_v.bin"), e.layers[j].p_v);
      if (e.mechanism == Mechanism::dpa) {
        save_tensor_file(dir / (s + "_lambda_vt.bin"), e.lambdas[j].lambda_vt);
        save_tensor_file(dir / (s + "_lambda_tv.bin"), e.lambdas[j].lambda_tv);
      }
    }
    const auto save_encoder = [&](const std::string& tag, const std::vector<Tensor>& prompts,
                                  const std::vector<DpaParams>& lams) {
      for (std::size_t j = 0; j < prompts.size(); ++j) {
        const std::string s = stem + "_" + tag + "_" + std::to_string(j);
        save_tensor_file(dir / (s + ".bin"), prompts[j]);
        if (e.mechanism == Mechanism::dpa) save_tensor_file(dir / (s + "_lambda.bin"), lams[j].lambda_vt);
      }
    };
    save_encoder("vis", e.visual, e.visual_lambdas);
    save_encoder("text", e.text, e.text_lambdas);
    m["entries"].push_back({{"task_id", e.task_id},
                            {"visual_layers", e.visual.size()},
                            {"text_layers", e.text.size()},
                            {"mechanism", to_string(e.mechanism)},
                            {"lambda_kind", e.lambdas.empty() ? "dim" : to_string(e.lambdas[0].kind)},
                            {"class_names", e.class_names},
                            {"layers", e.layers.size()},
                            {"key", e.key.data}});
  }
  std::ofstream(dir / "manifest.json") << m.dump(1) << '\n';
}

inline PromptPool PromptPool::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw ConfigError("missing prompt pool manifest in " + dir.string());
  const nlohmann::json m = nlohmann::json::parse(is);
  PromptPool pool;
  std::size_t k = 0;
  for (const auto& j : m.at("entries")) {
    PoolEntry e;
    e.task_id = j.at("task_id").get<int>();
    e.mechanism = mechanism_from_string(j.at("mechanism").get<std::string>());
    const LambdaKind kind = lambda_kind_from_string(j.at("lambda_kind").get<std::string>());
    e.class_names = j.at("class_names").get<std::vector<std::string>>();
    const auto key = j.at("key").get<std::vector<double>>();
    e.key = Tensor(Shape{key.size()}, key);
    const std::string stem = "task_" + std::to_string(k);
    for (std::size_t layer = 0; layer < j.at("layers").get<std::size_t>(); ++layer) {
      const std::string s = stem + "_layer_" + std::to_string(layer);
      e.layers.push_back({load_tensor_file(dir / (s + "_t.bin")), load_tensor_file(dir / (s + "_v.bin"))});
      if (e.mechanism == Mechanism::dpa) {
        DpaParams lam{load_tensor_file(dir / (s + "_lambda_vt.bin")),
                      load_tensor_file(dir / (s + "_lambda_tv.bin")), kind};
        e.lambdas.push_back(std::move(lam));
      }
    }
    const auto load_encoder = [&](const std::string& tag, std::size_t n, std::vector<Tensor>& prompts,
                                  std::vector<DpaParams>& lams) {
      for (std::size_t layer = 0; layer < n; ++layer) {
        const std::string s = stem + "_" + tag + "_" + std::to_string(layer);
        prompts.push_back(load_tensor_file(dir / (s + ".bin")));
        if (e.mechanism == Mechanism::dpa) {
          Tensor lam = load_tensor_file(dir / (s + "_lambda.bin"));
          lams.push_back(DpaParams{lam, lam, kind});
        }
      }
    };
    load_encoder("vis", j.value("visual_layers", std::size_t{0}), e.visual, e.visual_lambdas);
    load_encoder("text", j.value("text_layers", std::size_t{0}), e.text, e.text_lambdas);
    pool.append(std::move(e));
    ++k;
  }
  return pool;
}

}  // namespace dpalab

#endif  // DPALAB_IPG_HPP
