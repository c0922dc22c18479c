#ifndef DPALAB_HARNESS_HPP
#define DPALAB_HARNESS_HPP

// Continual-learning runs over the synthetic benchmark: base pretraining,
// per-method task training, prompt-pool growth, routed evaluation and the
// AP matrix bookkeeping.

#include <chrono>
#include <cmath>
#include <functional>
#include <mutex>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "dpalab/bench.hpp"
#include "dpalab/costing.hpp"
#include "dpalab/errors.hpp"
#include "dpalab/ipg.hpp"
#include "dpalab/metrics.hpp"
#include "dpalab/model.hpp"
#include "dpalab/optim.hpp"

namespace dpalab {

enum class Method { zero_shot, sequential_ft, joint, naive_pa, idpa, idpa_no_transfer };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::zero_shot: return "zero-shot";
    case Method::sequential_ft: return "sequential-ft";
    case Method::joint: return "joint";
    case Method::naive_pa: return "naive-pa";
    case Method::idpa: return "idpa";
    case Method::idpa_no_transfer: return "idpa-no-transfer";
  }
  return "idpa";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::zero_shot, Method::sequential_ft, Method::joint, Method::naive_pa, Method::idpa,
                   Method::idpa_no_transfer})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + s +
                    "' (expected zero-shot|sequential-ft|joint|naive-pa|idpa|idpa-no-transfer)");
}

inline bool is_prompt_method(Method m) {
  return m == Method::naive_pa || m == Method::idpa || m == Method::idpa_no_transfer;
}

inline bool is_finetune_method(Method m) { return m == Method::sequential_ft || m == Method::joint; }

struct TrainHyper {
  int steps = 30;       // optimizer steps per task
  int decay_step = 18;  // lr x0.1 from this step on
  int batch = 8;        // images per step
  double prompt_lr = 0.01;
  double ft_lr = 1e-4;
  double weight_decay = 1e-4;
  int bank_m = 16;
  double gamma = kDefaultRoiGamma;
  int shots = 0;  // 0 = full training split
  int threads = 1;

  // Same schedule with a scaled step budget (decay point scales along).
  TrainHyper with_budget(double factor) const {
    TrainHyper h = *this;
    h.steps = std::max(1, static_cast<int>(std::lround(steps * factor)));
    h.decay_step = static_cast<int>(std::lround(decay_step * factor));
    return h;
  }
};

struct PretrainConfig {
  int images = 512;
  int steps = 300;
  int batch = 8;
  double lr = 2e-3;
  double decay_at = 0.6;  // fraction of steps before the x0.1 decay
};

using ProgressFn = std::function<void(const std::string&)>;

// key=value progress record.
class Record {
 public:
  template <typename T>
  Record& kv(const std::string& k, const T& v) {
    if (!first_) os_ << ' ';
    first_ = false;
    os_ << k << '=' << v;
    return *this;
  }
  std::string str() const { return os_.str(); }

 private:
  std::ostringstream os_;
  bool first_ = true;
};

namespace detail {

inline void emit(const ProgressFn& fn, const Record& r) {
  if (fn) fn(r.str());
}

inline void check_finite_loss(double loss, std::uint64_t seed, int step, const std::string& what) {
  if (!std::isfinite(loss))
    throw TrainingError(what + ": non-finite loss at seed " + std::to_string(seed) + " step " + std::to_string(step));
}

// Seed-dependent cycling order over training images.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) { reshuffle(); }

  std::vector<std::size_t> next(std::size_t b) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(b, n_); ++i) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
  }

  std::size_t n_;
  SplitMix64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// Runs fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex mu;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!error) error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

// Trains every base parameter on the held-out pretask distribution.
inline ToyVlodModel pretrain_base(ToyVlodConfig cfg, const BenchmarkSpec& spec, const PretrainConfig& pc,
                                  const ProgressFn& progress = {}) {
  cfg.image_size = spec.image_size;
  cfg.patch_size = spec.patch_size;
  ToyVlodModel model(cfg);
  const TaskDataset pre = generate_pretask(spec, pc.images);
  model.set_trainable(true);
  std::vector<Tensor*> params;
  for (auto& [n, t] : model.parameters()) params.push_back(t);
  AdamW opt(params, {pc.lr, 0.9, 0.999, 1e-8, 1e-4});
  detail::BatchSampler sampler(pre.train.size(), cfg.seed ^ 0x9E37ULL);
  const int decay = static_cast<int>(std::lround(pc.steps * pc.decay_at));
  for (int step = 0; step < pc.steps; ++step) {
    opt.set_lr(step_decay_lr(pc.lr, step, decay));
    const auto batch = sampler.next(static_cast<std::size_t>(pc.batch));
    Graph g;
    std::vector<Var> losses;
    for (std::size_t i : batch) {
      auto fwd = model.forward(g, pre.train[i].pixels, pre.class_names);
      losses.push_back(model.loss(g, fwd.head, pre.train[i].objects, pre.class_names));
    }
    Var loss = scale(sum_all(concat_rows(losses)), 1.0 / static_cast<double>(losses.size()));
    detail::check_finite_loss(loss.value().data[0], cfg.seed, step, "pretrain");
    g.backward(loss);
    opt.step();
    opt.zero_grad();
    if (step % 25 == 0 || step + 1 == pc.steps)
      detail::emit(progress, Record().kv("event", "pretrain").kv("step", step).kv("loss", loss.value().data[0]));
  }
  model.set_trainable(false);
  return model;
}

struct TrainLog {
  std::vector<double> losses;
};

// Owns the frozen base, the method's trainable state and the prompt pool.
class ContinualLearner {
 public:
  ContinualLearner(const ToyVlodModel& base, Method method, TrainHyper hyper, std::uint64_t seed)
      : base_(base), tuned_(base), method_(method), hyper_(hyper), seed_(seed), rng_(seed ^ 0xC0117ULL) {
    base_.set_trainable(false);
    tuned_.set_trainable(false);
  }

  Method method() const { return method_; }
  const PromptPool& pool() const { return pool_; }
  const ToyVlodModel& base() const { return base_; }
  const ToyVlodModel& tuned() const { return tuned_; }
  const TrainHyper& hyper() const { return hyper_; }

  // Trainable scalars of one task for this method.
  std::uint64_t trainable_parameters() const {
    return params_count(base_.config(), to_string(method_), base_.parameter_count()).total();
  }

  TrainLog train_task(const TaskDataset& task, const std::vector<std::string>& names,
                      const ProgressFn& progress = {}) {
    return train_task(task, names, hyper_.steps, hyper_.decay_step, progress);
  }

  TrainLog train_task(const TaskDataset& task, const std::vector<std::string>& names, int steps,
                      int decay_step, const ProgressFn& progress = {}) {
    if (task.train.empty()) throw ConfigError("task " + std::to_string(task.task_id) + " has no training images");
    if (is_finetune_method(method_)) return train_finetune(task, names, steps, decay_step, progress);
    if (method_ == Method::zero_shot) {
      append_entry(task, PoolEntry{}, visual_features(task.train));
      return {};
    }
    return train_prompts(task, names, steps, decay_step, progress);
  }

  // Pool index chosen for an image (prompt and zero-shot methods).
  std::size_t route(const Tensor& image) {
    return route_task(routing_feature(base_, image), pool_);
  }

  struct Prediction {
    Detections detections;
    std::optional<std::size_t> routed;
  };

  Prediction detect(const Tensor& image, const std::vector<std::string>& names,
                    std::optional<std::size_t> forced_task = std::nullopt) {
    Graph g;
    if (is_finetune_method(method_)) {
      auto fwd = tuned_.forward(g, image, names);
      return {tuned_.predict(fwd.head), std::nullopt};
    }
    Var f_v = base_.encode_image(g, image);
    if (pool_.empty()) {
      auto fwd = base_.forward(g, image, names, nullptr, &f_v.value());
      return {base_.predict(fwd.head), std::nullopt};
    }
    std::size_t k = 0;
    if (forced_task) {
      k = *forced_task;
    } else {
      Tensor q = mean_rows(f_v).value();
      q.shape = {q.numel()};
      k = route_task(q, pool_);
    }
    if (method_ == Method::zero_shot) {
      auto fwd = base_.forward(g, image, names, nullptr, &f_v.value());
      return {base_.predict(fwd.head), k};
    }
    PromptVars pv = pool_.at(k).bind(g);
    const Tensor* cached = base_.config().injection.visual ? nullptr : &f_v.value();
    auto fwd = base_.forward(g, image, names, &pv, cached);
    return {base_.predict(fwd.head), k};
  }

 private:
  std::vector<Tensor> visual_features(const std::vector<Image>& images) {
    std::vector<Tensor> out(images.size());
    detail::parallel_for(images.size(), hyper_.threads, [&](std::size_t i) {
      Graph g;
      out[i] = base_.encode_image(g, images[i].pixels).value();
    });
    return out;
  }

  void append_entry(const TaskDataset& task, PoolEntry e, const std::vector<Tensor>& feats) {
    std::vector<Tensor> queries;
    for (const Tensor& f : feats) {
      Graph g;
      Tensor q = mean_rows(g.constant(f)).value();
      q.shape = {q.numel()};
      queries.push_back(std::move(q));
    }
    e.task_id = task.task_id;
    e.class_names = task.class_names;
    e.key = centroid_of(queries).key;
    pool_.append(std::move(e));
  }

  TrainLog train_finetune(const TaskDataset& task, const std::vector<std::string>& names, int steps,
                          int decay_step, const ProgressFn& progress) {
    tuned_.set_trainable(true);
    std::vector<Tensor*> params;
    for (auto& [n, t] : tuned_.parameters()) params.push_back(t);
    AdamW opt(params, {hyper_.ft_lr, 0.9, 0.999, 1e-8, hyper_.weight_decay});
    detail::BatchSampler sampler(task.train.size(), seed_ * 7919 + static_cast<std::uint64_t>(task.task_id));
    TrainLog log;
    for (int step = 0; step < steps; ++step) {
      opt.set_lr(step_decay_lr(hyper_.ft_lr, step, decay_step));
      Graph g;
      std::vector<Var> losses;
      for (std::size_t i : sampler.next(static_cast<std::size_t>(hyper_.batch))) {
        auto fwd = tuned_.forward(g, task.train[i].pixels, names);
        losses.push_back(tuned_.loss(g, fwd.head, task.train[i].objects, names));
      }
      Var loss = scale(sum_all(concat_rows(losses)), 1.0 / static_cast<double>(losses.size()));
      const double lv = loss.value().data[0];
      detail::check_finite_loss(lv, seed_, step, to_string(method_));
      g.backward(loss);
      opt.step();
      opt.zero_grad();
      log.losses.push_back(lv);
      detail::emit(progress, Record()
                                 .kv("event", "train_step")
                                 .kv("method", to_string(method_))
                                 .kv("seed", seed_)
                                 .kv("task", task.task_id)
                                 .kv("step", step)
                                 .kv("loss", lv));
    }
    tuned_.set_trainable(false);
    return log;
  }

  struct TaskPrompts {
    std::vector<Tensor> p_t, p_v;  // fusion layers
    std::vector<DpaParams> lambdas;
    std::vector<Tensor> enc_visual, enc_text;
    std::vector<DpaParams> enc_visual_lambdas, enc_text_lambdas;
    CcpkiParams ccpki;
    std::vector<Tensor> banks;  // flattened, one per fusion layer

    std::vector<Tensor*> trainable(bool use_ccpki) {
      std::vector<Tensor*> out;
      for (auto* group : {&p_t, &p_v, &enc_visual, &enc_text})
        for (Tensor& t : *group) out.push_back(&t);
      for (auto* group : {&lambdas, &enc_visual_lambdas, &enc_text_lambdas})
        for (DpaParams& l : *group) {
          if (!l.lambda_vt.requires_grad) continue;
          out.push_back(&l.lambda_vt);
          out.push_back(&l.lambda_tv);
        }
      if (use_ccpki)
        for (auto& [n, t] : ccpki.parameters()) out.push_back(t);
      return out;
    }
  };

  // Binds the task's trainable state; generated prompts go through CCPKI when
  // the method uses instance-level generation.
  PromptVars bind_prompts(Graph& g, TaskPrompts& tp, bool trainable) {
    const ToyVlodConfig& cfg = base_.config();
    const bool ipg = method_ != Method::naive_pa;
    const Mechanism mech = ipg ? Mechanism::dpa : Mechanism::pa;
    const auto as_var = [&](Tensor& t) { return trainable ? g.leaf(t) : g.constant(t); };
    PromptVars pv;
    pv.mechanism = mech;
    std::optional<CcpkiWeights> cw;
    if (ipg) cw = trainable ? bind(g, tp.ccpki)
                            : CcpkiWeights{g.constant(tp.ccpki.wk), g.constant(tp.ccpki.wv),
                                           g.constant(tp.ccpki.tau), g.constant(tp.ccpki.alpha)};
    const auto lambda_vars = [&](DpaParams& l) {
      return DpaWeights{as_var(l.lambda_vt), as_var(l.lambda_tv), l.kind};
    };
    if (cfg.injection.fusion) {
      for (std::size_t i = 0; i < tp.p_t.size(); ++i) {
        Var pt = as_var(tp.p_t[i]), pvv = as_var(tp.p_v[i]);
        if (ipg) {
          Var bank = g.constant(tp.banks[i]);
          pt = ccpki_generate(pt, bank, *cw);
          pvv = ccpki_generate(pvv, bank, *cw);
        }
        LayerPromptVars lp{pt, pvv, std::nullopt};
        if (ipg) lp.lambda = lambda_vars(tp.lambdas[i]);
        pv.fusion.push_back(std::move(lp));
      }
    }
    for (std::size_t i = 0; i < tp.enc_visual.size(); ++i) {
      LayerPromptVars lp{Var{}, as_var(tp.enc_visual[i]), std::nullopt};
      if (ipg) lp.lambda = lambda_vars(tp.enc_visual_lambdas[i]);
      pv.visual.push_back(std::move(lp));
    }
    for (std::size_t i = 0; i < tp.enc_text.size(); ++i) {
      LayerPromptVars lp{as_var(tp.enc_text[i]), Var{}, std::nullopt};
      if (ipg) lp.lambda = lambda_vars(tp.enc_text_lambdas[i]);
      pv.text.push_back(std::move(lp));
    }
    return pv;
  }

  TaskPrompts init_prompts(const TaskDataset& task) {
    const ToyVlodConfig& cfg = base_.config();
    const std::size_t l = static_cast<std::size_t>(cfg.prompt_length), d = static_cast<std::size_t>(cfg.d);
    const bool ipg = method_ != Method::naive_pa;
    TaskPrompts tp;
    const auto prompt = [&] {
      Tensor t = Tensor::gaussian(l, d, kPromptInitStd, rng_);
      t.requires_grad = true;
      return t;
    };
    const auto lambda = [&] { return DpaParams::initial(d, cfg.lambda_kind); };
    if (cfg.injection.fusion) {
      for (int i = 0; i < cfg.n_fusion_layers; ++i) {
        tp.p_t.push_back(prompt());
        tp.p_v.push_back(prompt());
        if (ipg) tp.lambdas.push_back(lambda());
      }
    }
    if (cfg.injection.visual)
      for (int i = 0; i < cfg.n_vis_layers; ++i) {
        tp.enc_visual.push_back(prompt());
        if (ipg) tp.enc_visual_lambdas.push_back(lambda());
      }
    if (cfg.injection.text)
      for (int i = 0; i < cfg.n_text_layers; ++i) {
        tp.enc_text.push_back(prompt());
        if (ipg) tp.enc_text_lambdas.push_back(lambda());
      }
    if (ipg) {
      const bool transfer = method_ == Method::idpa && prev_ccpki_.has_value();
      tp.ccpki = prev_ccpki_ ? transfer_weights(*prev_ccpki_, transfer, rng_) : CcpkiParams::initial(l, d, rng_);
      if (cfg.injection.fusion) {
        for (const InstanceBank& b : build_instance_banks(base_, task, hyper_.bank_m,
                                                          seed_ * 31 + static_cast<std::uint64_t>(task.task_id),
                                                          hyper_.gamma))
          tp.banks.push_back(b.flattened());
      }
    }
    return tp;
  }

  TrainLog train_prompts(const TaskDataset& task, const std::vector<std::string>& names, int steps,
                         int decay_step, const ProgressFn& progress) {
    const ToyVlodConfig& cfg = base_.config();
    const bool ipg = method_ != Method::naive_pa;
    TaskPrompts tp = init_prompts(task);
    const std::vector<Tensor> feats = visual_features(task.train);
    AdamW opt(tp.trainable(ipg), {hyper_.prompt_lr, 0.9, 0.999, 1e-8, hyper_.weight_decay});
    detail::BatchSampler sampler(task.train.size(), seed_ * 7919 + static_cast<std::uint64_t>(task.task_id));
    TrainLog log;
    for (int step = 0; step < steps; ++step) {
      opt.set_lr(step_decay_lr(hyper_.prompt_lr, step, decay_step));
      Graph g;
      PromptVars pv = bind_prompts(g, tp, true);
      std::vector<Var> losses;
      for (std::size_t i : sampler.next(static_cast<std::size_t>(hyper_.batch))) {
        const Tensor* cached = cfg.injection.visual ? nullptr : &feats[i];
        auto fwd = base_.forward(g, task.train[i].pixels, names, &pv, cached);
        losses.push_back(base_.loss(g, fwd.head, task.train[i].objects, names));
      }
      Var loss = scale(sum_all(concat_rows(losses)), 1.0 / static_cast<double>(losses.size()));
      const double lv = loss.value().data[0];
      detail::check_finite_loss(lv, seed_, step, to_string(method_));
      g.backward(loss);
      opt.step();
      opt.zero_grad();
      log.losses.push_back(lv);
      detail::emit(progress, Record()
                                 .kv("event", "train_step")
                                 .kv("method", to_string(method_))
                                 .kv("seed", seed_)
                                 .kv("task", task.task_id)
                                 .kv("step", step)
                                 .kv("loss", lv));
    }

    // Freeze: materialize the generated prompts into the pool.
    PoolEntry e;
    e.mechanism = ipg ? Mechanism::dpa : Mechanism::pa;
    {
      Graph g;
      PromptVars pv = bind_prompts(g, tp, false);
      for (const auto& lp : pv.fusion) e.layers.push_back({lp.p_t.value(), lp.p_v.value()});
      for (const auto& lp : pv.visual) e.visual.push_back(lp.p_v.value());
      for (const auto& lp : pv.text) e.text.push_back(lp.p_t.value());
    }
    const auto frozen = [](std::vector<DpaParams> v) {
      for (auto& l : v) l.set_trainable(false);
      return v;
    };
    e.lambdas = frozen(tp.lambdas);
    e.visual_lambdas = frozen(tp.enc_visual_lambdas);
    e.text_lambdas = frozen(tp.enc_text_lambdas);
    append_entry(task, std::move(e), feats);
    if (ipg) {
      tp.ccpki.set_trainable(false);
      prev_ccpki_ = tp.ccpki;
    }
    return log;
  }

  ToyVlodModel base_;
  ToyVlodModel tuned_;
  Method method_;
  TrainHyper hyper_;
  std::uint64_t seed_;
  SplitMix64 rng_;
  PromptPool pool_;
  std::optional<CcpkiParams> prev_ccpki_;
};

struct EvalOptions {
  bool forced_routing = false;  // use the pool entry of the task being evaluated
  bool fixed_union = false;     // present every task's classes from the start
};

struct RunRecord {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<int> order;        // canonical task ids in training order
  ApMatrix apm;                  // rows/cols follow the training order; empty for joint
  std::vector<double> final_ap;  // per canonical task id, after the last task
  double routing_accuracy = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t routed = 0, routed_correct = 0;
  std::uint64_t trainable_params = 0;
  std::vector<std::vector<double>> loss_curves;
  double wall_seconds = 0.0;

  bool joint() const { return apm.rows.empty(); }

  double fap_value() const {
    if (!joint()) return fap(apm);
    double s = 0.0;
    for (double v : final_ap) s += v;
    return s / static_cast<double>(final_ap.size());
  }
  double cap_value() const { return joint() ? std::numeric_limits<double>::quiet_NaN() : cap(apm); }
  double ffp_value() const {
    return joint() || apm.size() < 2 ? std::numeric_limits<double>::quiet_NaN() : ffp(apm);
  }

  nlohmann::json to_json() const {
    const auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"method", method},
            {"seed", seed},
            {"order", order},
            {"ap_matrix", apm.rows},
            {"final_ap", final_ap},
            {"fap", num(fap_value())},
            {"cap", num(cap_value())},
            {"ffp", num(ffp_value())},
            {"routing_accuracy", num(routing_accuracy)},
            {"trainable_params", trainable_params},
            {"loss_curves", loss_curves},
            {"wall_seconds", wall_seconds}};
  }

  static RunRecord from_json(const nlohmann::json& j) {
    const auto num = [&](const char* k) {
      return j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>();
    };
    RunRecord r;
    try {
      r.method = j.at("method").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.order = j.at("order").get<std::vector<int>>();
      r.apm.rows = j.at("ap_matrix").get<std::vector<std::vector<double>>>();
      r.final_ap = j.at("final_ap").get<std::vector<double>>();
      r.routing_accuracy = num("routing_accuracy");
      r.trainable_params = j.at("trainable_params").get<std::uint64_t>();
      r.loss_curves = j.at("loss_curves").get<std::vector<std::vector<double>>>();
      r.wall_seconds = j.at("wall_seconds").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed run record: ") + e.what());
    }
    method_from_string(r.method);
    if (!r.joint()) r.apm.validate();
    return r;
  }
};

// AP in percent of the learner on one task's test split.
inline double evaluate_task(ContinualLearner& learner, const TaskDataset& task,
                            const std::vector<std::string>& names, std::optional<std::size_t> forced,
                            std::optional<std::size_t> expected_route, RunRecord* rec, int threads) {
  std::vector<Detections> dets(task.test.size());
  std::vector<std::optional<std::size_t>> routes(task.test.size());
  detail::parallel_for(task.test.size(), threads, [&](std::size_t i) {
    auto p = learner.detect(task.test[i].pixels, names, forced);
    dets[i] = std::move(p.detections);
    routes[i] = p.routed;
  });
  std::vector<std::vector<Annotation>> gts;
  for (const Image& im : task.test) gts.push_back(im.objects);
  if (rec && expected_route) {
    for (const auto& r : routes) {
      if (!r) continue;
      ++rec->routed;
      if (*r == *expected_route) ++rec->routed_correct;
    }
  }
  return 100.0 * average_precision(dets, gts, names).mean;
}

inline std::vector<std::string> class_union(const std::vector<TaskDataset>& tasks, const std::vector<int>& order,
                                            std::size_t upto) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < upto; ++i)
    for (const auto& n : tasks.at(static_cast<std::size_t>(order[i])).class_names) names.push_back(n);
  return names;
}

// Sequential protocol: train tasks in the seed's order, evaluating every seen
// task after each one. Joint training sees the union once and fills only the
// final row.
inline RunRecord run_sequence(const ToyVlodModel& base, const std::vector<TaskDataset>& tasks, Method method,
                              const TrainHyper& hyper, std::uint64_t seed, const EvalOptions& opts = {},
                              const ProgressFn& progress = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.method = to_string(method);
  rec.seed = seed;
  rec.order = task_order(static_cast<int>(tasks.size()), seed);
  const std::size_t n = tasks.size();
  rec.final_ap.assign(n, 0.0);
  ContinualLearner learner(base, method, hyper, seed);
  rec.trainable_params = learner.trainable_parameters();
  const auto train_split = [&](const TaskDataset& t) {
    return hyper.shots > 0 ? kshot_subset(t, hyper.shots, seed) : t;
  };
  const std::vector<std::string> all_names = class_union(tasks, rec.order, n);

  if (method == Method::joint) {
    TaskDataset joint;
    joint.task_id = -2;
    joint.class_names = all_names;
    for (int t : rec.order)
      for (const Image& im : train_split(tasks[static_cast<std::size_t>(t)]).train) joint.train.push_back(im);
    const int steps = hyper.steps * static_cast<int>(n);
    const int decay = hyper.decay_step * static_cast<int>(n);
    rec.loss_curves.push_back(learner.train_task(joint, all_names, steps, decay, progress).losses);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t t = static_cast<std::size_t>(rec.order[j]);
      rec.final_ap[t] = evaluate_task(learner, tasks[t], all_names, std::nullopt, std::nullopt, nullptr, hyper.threads);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail::emit(progress, Record().kv("event", "run_done").kv("method", rec.method).kv("seed", seed).kv(
                               "fap", rec.fap_value()));
    return rec;
  }

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = static_cast<std::size_t>(rec.order[i]);
    const auto seen = class_union(tasks, rec.order, i + 1);
    rec.loss_curves.push_back(learner.train_task(train_split(tasks[t]), seen, progress).losses);
    const auto& names = opts.fixed_union ? all_names : seen;
    std::vector<double> row;
    for (std::size_t j = 0; j <= i; ++j) {
      const std::size_t tj = static_cast<std::size_t>(rec.order[j]);
      const bool routed = is_prompt_method(method) || method == Method::zero_shot;
      std::optional<std::size_t> forced;
      if (opts.forced_routing && routed) forced = j;
      RunRecord* track = routed && i + 1 == n ? &rec : nullptr;
      row.push_back(evaluate_task(learner, tasks[tj], names, forced, j, track, hyper.threads));
      detail::emit(progress, Record()
                                 .kv("event", "eval")
                                 .kv("method", rec.method)
                                 .kv("seed", seed)
                                 .kv("after", i)
                                 .kv("task", tj)
                                 .kv("ap", row.back()));
    }
    rec.apm.rows.push_back(row);
  }
  for (std::size_t j = 0; j < n; ++j) rec.final_ap[static_cast<std::size_t>(rec.order[j])] = rec.apm.rows.back()[j];
  if (rec.routed > 0) rec.routing_accuracy = static_cast<double>(rec.routed_correct) / static_cast<double>(rec.routed);
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail::emit(progress, Record()
                             .kv("event", "run_done")
                             .kv("method", rec.method)
                             .kv("seed", seed)
                             .kv("fap", rec.fap_value())
                             .kv("cap", rec.cap_value())
                             .kv("ffp", rec.ffp_value()));
  return rec;
}

// Mean and sample std over seeds, per method, in the record order given.
struct MethodSummary {
  std::string method;
  std::vector<std::uint64_t> seeds;
  std::vector<MeanStd> final_ap;  // per canonical task id
  MeanStd fap, cap, ffp, routing;
  std::uint64_t trainable_params = 0;
  FlopReport flops;
  double wall_seconds = 0.0;
};

// `lt` is the class count the cost columns are computed for.
inline MethodSummary summarize(const std::vector<RunRecord>& recs, const ToyVlodConfig& cfg, std::uint64_t lt) {
  if (recs.empty()) throw MetricError("summarize: no records");
  MethodSummary s;
  s.method = recs.front().method;
  const std::size_t n = recs.front().final_ap.size();
  std::vector<double> fa, ca, ff, ro;
  for (const auto& r : recs) {
    if (r.method != s.method) throw MetricError("summarize: mixed methods");
    s.seeds.push_back(r.seed);
    fa.push_back(r.fap_value());
    if (std::isfinite(r.cap_value())) ca.push_back(r.cap_value());
    if (std::isfinite(r.ffp_value())) ff.push_back(r.ffp_value());
    if (std::isfinite(r.routing_accuracy)) ro.push_back(r.routing_accuracy);
    s.wall_seconds += r.wall_seconds;
  }
  const MeanStd nan{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> v;
    for (const auto& r : recs) v.push_back(r.final_ap.at(t));
    s.final_ap.push_back(mean_std(v));
  }
  s.fap = mean_std(fa);
  s.cap = ca.empty() ? nan : mean_std(ca);
  s.ffp = ff.empty() ? nan : mean_std(ff);
  s.routing = ro.empty() ? nan : mean_std(ro);
  s.trainable_params = recs.front().trainable_params;
  ToyVlodConfig c = cfg;
  const Method m = method_from_string(s.method);
  c.mechanism = m == Method::naive_pa ? Mechanism::pa : is_prompt_method(m) ? Mechanism::dpa : Mechanism::none;
  s.flops = count_flops(CostModel::from_config(c, lt));
  return s;
}

inline std::string fmt_num(double v, int prec = 2) {
  if (!std::isfinite(v)) return "";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

// Report table: one row per method with per-task final AP, FAP/CAP/FFP and
// cost columns (trainable parameters, fusion FLOPs and activation words).
inline std::string report_csv(const std::vector<MethodSummary>& rows) {
  std::ostringstream os;
  const std::size_t n = rows.empty() ? 0 : rows.front().final_ap.size();
  os << "method,seeds";
  for (std::size_t t = 0; t < n; ++t) os << ",task" << t << "_ap,task" << t << "_ap_std";
  os << ",fap,fap_std,cap,cap_std,ffp,ffp_std,routing_acc,trainable_params,flops,memory_words,wall_seconds\n";
  for (const auto& r : rows) {
    os << r.method << ',';
    for (std::size_t i = 0; i < r.seeds.size(); ++i) os << (i ? ";" : "") << r.seeds[i];
    for (const auto& a : r.final_ap) os << ',' << fmt_num(a.mean) << ',' << fmt_num(a.std);
    os << ',' << fmt_num(r.fap.mean) << ',' << fmt_num(r.fap.std) << ',' << fmt_num(r.cap.mean) << ','
       << fmt_num(r.cap.std) << ',' << fmt_num(r.ffp.mean) << ',' << fmt_num(r.ffp.std) << ','
       << fmt_num(r.routing.mean, 4) << ',' << r.trainable_params << ',' << r.flops.total() << ','
       << r.flops.memory_words << ',' << fmt_num(r.wall_seconds, 1) << '\n';
  }
  return os.str();
}

inline nlohmann::json report_json(const std::vector<MethodSummary>& rows) {
  const auto ms = [](const MeanStd& m) {
    const auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return nlohmann::json{{"mean", num(m.mean)}, {"std", num(m.std)}};
  };
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json fa = nlohmann::json::array();
    for (const auto& a : r.final_ap) fa.push_back(ms(a));
    out.push_back({{"method", r.method},
                   {"seeds", r.seeds},
                   {"final_ap", fa},
                   {"fap", ms(r.fap)},
                   {"cap", ms(r.cap)},
                   {"ffp", ms(r.ffp)},
                   {"routing_accuracy", ms(r.routing)},
                   {"trainable_params", r.trainable_params},
                   {"flops", r.flops.to_json()},
                   {"wall_seconds", r.wall_seconds}});
  }
  return out;
}

}  // namespace dpalab

#endif  // DPALAB_HARNESS_HPP
