#ifndef DPALAB_BENCH_HPP
#define DPALAB_BENCH_HPP

// Procedural incremental-detection benchmark.
//
// Every task owns a background tint (its signature) and a disjoint pair of
// object classes. A class is a saturated colour plus an aspect type; objects
// are axis-aligned, non-overlapping rectangles with distinct centre cells.
// Gaussian pixel noise (sigma 0.05) is added everywhere; boxes are exact.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpalab/errors.hpp"
#include "dpalab/rng.hpp"
#include "dpalab/serialize.hpp"
#include "dpalab/tensor.hpp"

namespace dpalab {

// Normalized centre/size box.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x0() const { return cx - w / 2; }
  double x1() const { return cx + w / 2; }
  double y0() const { return cy - h / 2; }
  double y1() const { return cy + h / 2; }
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct Annotation {
  Box box;
  std::string category;
};

struct Image {
  Tensor pixels;  // [S x S x 3]
  std::vector<Annotation> objects;
};

enum class Aspect { square, wide, tall };

struct ClassSpec {
  std::string name;
  std::array<double, 3> rgb;
  Aspect aspect;
};

struct TaskDataset {
  int task_id = 0;
  std::vector<std::string> class_names;
  std::vector<Image> train;
  std::vector<Image> test;
  // Background colour; generator secret used only by test oracles.
  std::array<double, 3> signature{};
};

struct BenchmarkSpec {
  int n_tasks = 4;
  int classes_per_task = 2;
  int train_images = 64;
  int test_images = 32;
  std::vector<int> shots{1, 10, 50, 0};  // 0 = full data
  std::uint64_t seed = 0;
  int image_size = 32;
  int patch_size = 4;
  double noise = 0.05;
};

inline constexpr int kMaxTasks = 13;
inline constexpr int kPretaskClasses = 8;

inline std::array<double, 3> hsv_to_rgb(double hue_deg, double s, double v) {
  const double h = std::fmod(std::fmod(hue_deg, 360.0) + 360.0, 360.0) / 60.0;
  const double c = v * s;
  const double x = c * (1 - std::abs(std::fmod(h, 2.0) - 1));
  const double m = v - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  return {r + m, g + m, b + m};
}

inline std::string aspect_name(Aspect a) {
  switch (a) {
    case Aspect::square: return "square";
    case Aspect::wide: return "wide";
    case Aspect::tall: return "tall";
  }
  return "square";
}

// Classes of benchmark task t (0-based, canonical order).
inline std::vector<ClassSpec> task_classes(int task, int classes_per_task) {
  std::vector<ClassSpec> out;
  const double base = task * (360.0 / kMaxTasks);
  for (int c = 0; c < classes_per_task; ++c) {
    // Second class sits opposite on the wheel, nudged off the other tasks' hues.
    const double hue = base + c * (360.0 / classes_per_task) + (c > 0 ? 180.0 / kMaxTasks : 0.0);
    const Aspect aspect = c % 2 == 0 ? Aspect::wide : Aspect::tall;
    std::ostringstream name;
    name << "t" << std::setw(2) << std::setfill('0') << task << "-" << static_cast<char>('a' + c)
         << "-" << aspect_name(aspect);
    out.push_back({name.str(), hsv_to_rgb(hue, 0.95, 0.95), aspect});
  }
  return out;
}

inline std::vector<ClassSpec> pretask_classes() {
  std::vector<ClassSpec> out;
  for (int c = 0; c < kPretaskClasses; ++c) {
    const double hue = c * (360.0 / kPretaskClasses) + 360.0 / (4.0 * kMaxTasks);
    const Aspect aspect = static_cast<Aspect>(c % 3);
    out.push_back({"pre" + std::to_string(c) + "-" + aspect_name(aspect), hsv_to_rgb(hue, 0.95, 0.95),
                   aspect});
  }
  return out;
}

// Every class name the text encoder may ever see: pretask classes first, then
// the classes of all kMaxTasks benchmark tasks.
inline std::vector<std::string> standard_vocabulary(int classes_per_task = 2) {
  std::vector<std::string> vocab;
  for (const auto& c : pretask_classes()) vocab.push_back(c.name);
  for (int t = 0; t < kMaxTasks; ++t)
    for (const auto& c : task_classes(t, classes_per_task)) vocab.push_back(c.name);
  return vocab;
}

inline std::array<double, 3> task_signature(int task) {
  // Golden-angle hue spacing keeps any prefix of tasks well spread.
  return hsv_to_rgb(task * 137.507764, 0.55, 0.5);
}

namespace detail {

inline void paint_rect(Tensor& img, int s, int x0, int y0, int w, int h,
                       const std::array<double, 3>& rgb) {
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x)
      for (int ch = 0; ch < 3; ++ch) img.data[(static_cast<std::size_t>(y) * s + x) * 3 + ch] = rgb[ch];
}

inline std::pair<int, int> draw_size(Aspect a, SplitMix64& rng) {
  const auto u = [&](int lo, int hi) { return lo + static_cast<int>(rng.below(hi - lo + 1)); };
  switch (a) {
    case Aspect::square: { const int s = u(6, 9); return {s, s}; }
    case Aspect::wide: return {u(10, 13), u(5, 6)};
    case Aspect::tall: return {u(5, 6), u(10, 13)};
  }
  return {6, 6};
}

// Renders one image with 1-3 objects drawn from `classes`.
inline Image render_image(const std::vector<ClassSpec>& classes,
                          const std::array<double, 3>& background, int s, int patch,
                          double noise, SplitMix64& rng) {
  Image im;
  im.pixels = Tensor({static_cast<std::size_t>(s), static_cast<std::size_t>(s), 3});
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int ch = 0; ch < 3; ++ch)
        im.pixels.data[(static_cast<std::size_t>(y) * s + x) * 3 + ch] = background[ch];

  const int n_obj = 1 + static_cast<int>(rng.below(3));
  struct Rect { int x0, y0, w, h; };
  std::vector<Rect> placed;
  std::set<int> centre_cells;
  const int grid = s / patch;
  for (int k = 0; k < n_obj; ++k) {
    const ClassSpec& cls = classes[rng.below(classes.size())];
    for (int attempt = 0; attempt < 50; ++attempt) {
      auto [w, h] = draw_size(cls.aspect, rng);
      const int x0 = static_cast<int>(rng.below(s - w + 1));
      const int y0 = static_cast<int>(rng.below(s - h + 1));
      bool clash = false;
      for (const Rect& r : placed) {
        if (x0 < r.x0 + r.w + 1 && r.x0 < x0 + w + 1 && y0 < r.y0 + r.h + 1 && r.y0 < y0 + h + 1) {
          clash = true;
          break;
        }
      }
      const double cx = (x0 + w / 2.0) / s;
      const double cy = (y0 + h / 2.0) / s;
      const int cell = std::min(grid - 1, static_cast<int>(cy * grid)) * grid +
                       std::min(grid - 1, static_cast<int>(cx * grid));
      if (clash || centre_cells.count(cell)) continue;
      placed.push_back({x0, y0, w, h});
      centre_cells.insert(cell);
      paint_rect(im.pixels, s, x0, y0, w, h, cls.rgb);
      im.objects.push_back({Box{cx, cy, static_cast<double>(w) / s, static_cast<double>(h) / s},
                            cls.name});
      break;
    }
  }
  for (double& v : im.pixels.data) v += rng.normal(0.0, noise);
  return im;
}

}  // namespace detail

inline void validate(const BenchmarkSpec& spec) {
  if (spec.n_tasks < 1 || spec.n_tasks > kMaxTasks)
    throw ConfigError("n_tasks must be in [1, " + std::to_string(kMaxTasks) + "]");
  if (spec.classes_per_task < 1 || spec.classes_per_task > 4)
    throw ConfigError("classes_per_task must be in [1, 4]");
  if (spec.train_images < 1 || spec.test_images < 1)
    throw ConfigError("image counts must be positive");
  if (spec.patch_size < 1 || spec.image_size % spec.patch_size != 0)
    throw ConfigError("image_size must be divisible by patch_size");
  if (spec.image_size < 16) throw ConfigError("image_size must be at least 16");
}

// Canonical-order task datasets; deterministic in (spec, seed).
inline std::vector<TaskDataset> generate(const BenchmarkSpec& spec) {
  validate(spec);
  std::vector<TaskDataset> tasks;
  SplitMix64 root(spec.seed);
  for (int t = 0; t < spec.n_tasks; ++t) {
    SplitMix64 rng = root.fork(static_cast<std::uint64_t>(t) + 1);
    TaskDataset ds;
    ds.task_id = t;
    const auto classes = task_classes(t, spec.classes_per_task);
    for (const auto& c : classes) ds.class_names.push_back(c.name);
    ds.signature = task_signature(t);
    for (int i = 0; i < spec.train_images; ++i)
      ds.train.push_back(detail::render_image(classes, ds.signature, spec.image_size,
                                              spec.patch_size, spec.noise, rng));
    for (int i = 0; i < spec.test_images; ++i)
      ds.test.push_back(detail::render_image(classes, ds.signature, spec.image_size,
                                             spec.patch_size, spec.noise, rng));
    tasks.push_back(std::move(ds));
  }
  return tasks;
}

// Held-out distribution used to pretrain the frozen base: its own classes
// and random background tints.
inline TaskDataset generate_pretask(const BenchmarkSpec& spec, int images) {
  validate(spec);
  SplitMix64 rng(spec.seed ^ 0x5EED0BA5E0000001ULL);
  TaskDataset ds;
  ds.task_id = -1;
  const auto classes = pretask_classes();
  for (const auto& c : classes) ds.class_names.push_back(c.name);
  for (int i = 0; i < images; ++i) {
    const auto bg = hsv_to_rgb(rng.uniform(0, 360), rng.uniform(0.2, 0.6), rng.uniform(0.3, 0.6));
    ds.train.push_back(
        detail::render_image(classes, bg, spec.image_size, spec.patch_size, spec.noise, rng));
  }
  return ds;
}

// Training order of the canonical tasks for a run seed (Fisher-Yates).
inline std::vector<int> task_order(int n_tasks, std::uint64_t run_seed) {
  std::vector<int> order(n_tasks);
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(run_seed * 0x9E3779B97F4A7C15ULL + 17);
  for (int i = n_tasks - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(order[i], order[j]);
  }
  return order;
}

// Training images such that every class has at least k instances (k = 0
// keeps the full split). Images are visited in a seed-dependent order.
inline TaskDataset kshot_subset(const TaskDataset& ds, int k, std::uint64_t seed) {
  if (k <= 0) return ds;
  TaskDataset out = ds;
  out.train.clear();
  std::vector<std::size_t> idx(ds.train.size());
  std::iota(idx.begin(), idx.end(), 0);
  SplitMix64 rng(seed ^ 0xC0FFEEULL);
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  std::map<std::string, int> count;
  for (const auto& n : ds.class_names) count[n] = 0;
  std::vector<std::size_t> chosen;
  for (std::size_t i : idx) {
    bool useful = false;
    for (const auto& o : ds.train[i].objects) useful = useful || count[o.category] < k;
    if (!useful) continue;
    chosen.push_back(i);
    for (const auto& o : ds.train[i].objects) ++count[o.category];
    bool done = true;
    for (const auto& [name, c] : count) done = done && c >= k;
    if (done) break;
  }
  std::sort(chosen.begin(), chosen.end());
  for (std::size_t i : chosen) out.train.push_back(ds.train[i]);
  for (const auto& [name, c] : count) {
    if (c < k) throw ConfigError("class '" + name + "' has fewer than " + std::to_string(k) + " instances");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/task_<id>/{train,test}.json + images/<split>_<nnnn>.bin

namespace detail {

inline nlohmann::json split_to_coco(const TaskDataset& ds, const std::vector<Image>& images,
                                    const std::string& split) {
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  j["annotations"] = nlohmann::json::array();
  j["categories"] = nlohmann::json::array();
  for (std::size_t c = 0; c < ds.class_names.size(); ++c)
    j["categories"].push_back({{"id", c}, {"name", ds.class_names[c]}});
  std::size_t ann_id = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    std::ostringstream fn;
    fn << "images/" << split << "_" << std::setw(4) << std::setfill('0') << i << ".bin";
    j["images"].push_back({{"id", i},
                           {"file_name", fn.str()},
                           {"width", images[i].pixels.shape[1]},
                           {"height", images[i].pixels.shape[0]}});
    for (const auto& o : images[i].objects) {
      const auto it = std::find(ds.class_names.begin(), ds.class_names.end(), o.category);
      j["annotations"].push_back(
          {{"id", ann_id++},
           {"image_id", i},
           {"bbox", {o.box.x0(), o.box.y0(), o.box.w, o.box.h}},
           {"category_id", std::distance(ds.class_names.begin(), it)}});
    }
  }
  return j;
}

}  // namespace detail

inline void save_task(const TaskDataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  for (const std::string split : {"train", "test"}) {
    const auto& images = split == "train" ? ds.train : ds.test;
    nlohmann::json j = detail::split_to_coco(ds, images, split);
    j["task_id"] = ds.task_id;
    std::ofstream(dir / (split + ".json")) << j.dump(1) << '\n';
    for (std::size_t i = 0; i < images.size(); ++i)
      save_tensor_file(dir / j["images"][i]["file_name"].get<std::string>(), images[i].pixels);
  }
}

inline TaskDataset load_task(const std::filesystem::path& dir) {
  TaskDataset ds;
  for (const std::string split : {"train", "test"}) {
    std::ifstream is(dir / (split + ".json"));
    if (!is) throw ConfigError("missing " + (dir / (split + ".json")).string());
    nlohmann::json j = nlohmann::json::parse(is);
    ds.task_id = j.at("task_id").get<int>();
    ds.class_names.clear();
    for (const auto& c : j.at("categories")) ds.class_names.push_back(c.at("name"));
    std::vector<Image> images;
    for (const auto& im : j.at("images"))
      images.push_back({load_tensor_file(dir / im.at("file_name").get<std::string>()), {}});
    for (const auto& a : j.at("annotations")) {
      const auto bb = a.at("bbox").get<std::vector<double>>();
      const Box box{bb[0] + bb[2] / 2, bb[1] + bb[3] / 2, bb[2], bb[3]};
      images.at(a.at("image_id").get<std::size_t>())
          .objects.push_back({box, ds.class_names.at(a.at("category_id").get<std::size_t>())});
    }
    (split == "train" ? ds.train : ds.test) = std::move(images);
  }
  return ds;
}

}  // namespace dpalab

#endif  // DPALAB_BENCH_HPP
