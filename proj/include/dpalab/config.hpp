#ifndef DPALAB_CONFIG_HPP
#define DPALAB_CONFIG_HPP

// JSON run configuration with four optional sections:
//
//   { "bench":    { n_tasks, classes_per_task, train_images, test_images,
//                   shots, seed, image_size, patch_size, noise },
//     "model":    { d, n_vis_layers, n_text_layers, n_fusion_layers, mlp_ratio,
//                   prompt_length, mechanism, injection, lambda_kind,
//                   score_threshold, nms_iou, logit_scale, positive_weight,
//                   value_init_scale, seed },
//     "train":    { steps, decay_step, batch, prompt_lr, ft_lr, weight_decay,
//                   bank_m, gamma, shots, threads },
//     "pretrain": { images, steps, batch, lr, decay_at } }
//
// Missing keys keep their defaults; unknown keys are a ConfigError. The
// model's image and patch size always follow the bench section.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dpalab/bench.hpp"
#include "dpalab/errors.hpp"
#include "dpalab/harness.hpp"
#include "dpalab/model.hpp"

namespace dpalab {

struct LabConfig {
  BenchmarkSpec bench;
  ToyVlodConfig model;
  TrainHyper train;
  PretrainConfig pretrain;

  // Model config with image geometry and vocabulary taken from the bench.
  ToyVlodConfig model_config() const {
    ToyVlodConfig m = model;
    m.image_size = bench.image_size;
    m.patch_size = bench.patch_size;
    m.vocabulary = standard_vocabulary(bench.classes_per_task);
    return m;
  }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown config key '" + section + "." + k + "'");
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + section + "." + key + "' has the wrong type");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const LabConfig& c) {
  const ToyVlodConfig& m = c.model;
  return {
      {"bench",
       {{"n_tasks", c.bench.n_tasks},
        {"classes_per_task", c.bench.classes_per_task},
        {"train_images", c.bench.train_images},
        {"test_images", c.bench.test_images},
        {"shots", c.bench.shots},
        {"seed", c.bench.seed},
        {"image_size", c.bench.image_size},
        {"patch_size", c.bench.patch_size},
        {"noise", c.bench.noise}}},
      {"model",
       {{"d", m.d},
        {"n_vis_layers", m.n_vis_layers},
        {"n_text_layers", m.n_text_layers},
        {"n_fusion_layers", m.n_fusion_layers},
        {"mlp_ratio", m.mlp_ratio},
        {"prompt_length", m.prompt_length},
        {"mechanism", to_string(m.mechanism)},
        {"injection", {{"visual", m.injection.visual}, {"text", m.injection.text}, {"fusion", m.injection.fusion}}},
        {"lambda_kind", to_string(m.lambda_kind)},
        {"score_threshold", m.score_threshold},
        {"nms_iou", m.nms_iou},
        {"logit_scale", m.logit_scale},
        {"positive_weight", m.positive_weight},
        {"value_init_scale", m.value_init_scale},
        {"seed", m.seed}}},
      {"train",
       {{"steps", c.train.steps},
        {"decay_step", c.train.decay_step},
        {"batch", c.train.batch},
        {"prompt_lr", c.train.prompt_lr},
        {"ft_lr", c.train.ft_lr},
        {"weight_decay", c.train.weight_decay},
        {"bank_m", c.train.bank_m},
        {"gamma", c.train.gamma},
        {"shots", c.train.shots},
        {"threads", c.train.threads}}},
      {"pretrain",
       {{"images", c.pretrain.images},
        {"steps", c.pretrain.steps},
        {"batch", c.pretrain.batch},
        {"lr", c.pretrain.lr},
        {"decay_at", c.pretrain.decay_at}}}};
}

inline LabConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  LabConfig c;
  detail::check_keys(j, "", {"bench", "model", "train", "pretrain"});
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    const std::string s = "bench";
    detail::check_keys(b, s, {"n_tasks", "classes_per_task", "train_images", "test_images", "shots", "seed",
                              "image_size", "patch_size", "noise"});
    read(b, "n_tasks", c.bench.n_tasks, s);
    read(b, "classes_per_task", c.bench.classes_per_task, s);
    read(b, "train_images", c.bench.train_images, s);
    read(b, "test_images", c.bench.test_images, s);
    read(b, "shots", c.bench.shots, s);
    read(b, "seed", c.bench.seed, s);
    read(b, "image_size", c.bench.image_size, s);
    read(b, "patch_size", c.bench.patch_size, s);
    read(b, "noise", c.bench.noise, s);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    const std::string s = "model";
    detail::check_keys(m, s, {"d", "n_vis_layers", "n_text_layers", "n_fusion_layers", "mlp_ratio",
                              "prompt_length", "mechanism", "injection", "lambda_kind", "score_threshold",
                              "nms_iou", "logit_scale", "positive_weight", "value_init_scale", "seed"});
    read(m, "d", c.model.d, s);
    read(m, "n_vis_layers", c.model.n_vis_layers, s);
    read(m, "n_text_layers", c.model.n_text_layers, s);
    read(m, "n_fusion_layers", c.model.n_fusion_layers, s);
    read(m, "mlp_ratio", c.model.mlp_ratio, s);
    read(m, "prompt_length", c.model.prompt_length, s);
    std::string text;
    if (m.contains("mechanism")) {
      read(m, "mechanism", text, s);
      c.model.mechanism = mechanism_from_string(text);
    }
    if (m.contains("lambda_kind")) {
      read(m, "lambda_kind", text, s);
      c.model.lambda_kind = lambda_kind_from_string(text);
    }
    if (m.contains("injection")) {
      const auto& inj = m.at("injection");
      detail::check_keys(inj, "model.injection", {"visual", "text", "fusion"});
      read(inj, "visual", c.model.injection.visual, "model.injection");
      read(inj, "text", c.model.injection.text, "model.injection");
      read(inj, "fusion", c.model.injection.fusion, "model.injection");
    }
    read(m, "score_threshold", c.model.score_threshold, s);
    read(m, "nms_iou", c.model.nms_iou, s);
    read(m, "logit_scale", c.model.logit_scale, s);
    read(m, "positive_weight", c.model.positive_weight, s);
    read(m, "value_init_scale", c.model.value_init_scale, s);
    read(m, "seed", c.model.seed, s);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    const std::string s = "train";
    detail::check_keys(t, s, {"steps", "decay_step", "batch", "prompt_lr", "ft_lr", "weight_decay", "bank_m",
                              "gamma", "shots", "threads"});
    read(t, "steps", c.train.steps, s);
    read(t, "decay_step", c.train.decay_step, s);
    read(t, "batch", c.train.batch, s);
    read(t, "prompt_lr", c.train.prompt_lr, s);
    read(t, "ft_lr", c.train.ft_lr, s);
    read(t, "weight_decay", c.train.weight_decay, s);
    read(t, "bank_m", c.train.bank_m, s);
    read(t, "gamma", c.train.gamma, s);
    read(t, "shots", c.train.shots, s);
    read(t, "threads", c.train.threads, s);
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    const std::string s = "pretrain";
    detail::check_keys(p, s, {"images", "steps", "batch", "lr", "decay_at"});
    read(p, "images", c.pretrain.images, s);
    read(p, "steps", c.pretrain.steps, s);
    read(p, "batch", c.pretrain.batch, s);
    read(p, "lr", c.pretrain.lr, s);
    read(p, "decay_at", c.pretrain.decay_at, s);
  }
  validate(c.bench);
  c.model_config().validate();
  if (c.train.steps < 1 || c.train.batch < 1 || c.train.bank_m < 1 || c.train.threads < 1)
    throw ConfigError("train.steps, train.batch, train.bank_m and train.threads must be >= 1");
  if (!(c.train.prompt_lr > 0) || !(c.train.ft_lr > 0) || !(c.train.gamma > 0))
    throw ConfigError("train learning rates and gamma must be positive");
  if (c.pretrain.steps < 0 || c.pretrain.batch < 1 || c.pretrain.images < 1)
    throw ConfigError("pretrain.steps must be >= 0, batch and images >= 1");
  return c;
}

inline LabConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// FNV-1a 64 over the canonical JSON dump.
inline std::string config_hash(const LabConfig& c) {
  const std::string text = to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace dpalab

#endif  // DPALAB_CONFIG_HPP
