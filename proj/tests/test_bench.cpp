#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "dpalab/bench.hpp"
#include "dpalab/metrics.hpp"

using namespace dpalab;

namespace {

double colour_dist(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  double s = 0;
  for (int c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return s;
}

std::array<double, 3> mean_colour(const Tensor& px, int x0, int y0, int x1, int y1) {
  const int s = static_cast<int>(px.shape[0]);
  std::array<double, 3> m{};
  int n = 0;
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      for (int c = 0; c < 3; ++c) m[c] += px.data[(static_cast<std::size_t>(y) * s + x) * 3 + c];
      ++n;
    }
  for (double& v : m) v /= n;
  return m;
}

std::size_t count_instances(const TaskDataset& ds, const std::string& cls) {
  std::size_t n = 0;
  for (const auto& im : ds.train)
    for (const auto& o : im.objects) n += o.category == cls;
  return n;
}

bool same_images(const std::vector<Image>& a, const std::vector<Image>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!values_equal(a[i].pixels, b[i].pixels) || a[i].objects.size() != b[i].objects.size()) return false;
    for (std::size_t k = 0; k < a[i].objects.size(); ++k) {
      const auto& p = a[i].objects[k];
      const auto& q = b[i].objects[k];
      if (p.category != q.category || p.box.cx != q.box.cx || p.box.cy != q.box.cy || p.box.w != q.box.w ||
          p.box.h != q.box.h)
        return false;
    }
  }
  return true;
}

}  // namespace

TEST(Bench, GenerationIsDeterministicInTheSeed) {
  BenchmarkSpec spec;
  spec.train_images = 8;
  spec.test_images = 4;
  const auto a = generate(spec);
  const auto b = generate(spec);
  spec.seed = 1;
  const auto c = generate(spec);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_TRUE(same_images(a[t].train, b[t].train));
    EXPECT_TRUE(same_images(a[t].test, b[t].test));
    EXPECT_FALSE(same_images(a[t].train, c[t].train));
    EXPECT_EQ(a[t].class_names, c[t].class_names);
  }
}

TEST(Bench, DefaultShapeAndAnnotationInvariants) {
  const auto tasks = generate(BenchmarkSpec{});
  std::set<std::string> all;
  for (const auto& t : tasks) {
    EXPECT_EQ(t.class_names.size(), 2u);
    EXPECT_EQ(t.train.size(), 64u);
    EXPECT_EQ(t.test.size(), 32u);
    for (const auto& n : t.class_names) EXPECT_TRUE(all.insert(n).second) << "class reused: " << n;
    for (const auto& im : t.train) {
      EXPECT_EQ(im.pixels.shape, (Shape{32, 32, 3}));
      ASSERT_GE(im.objects.size(), 1u);
      EXPECT_LE(im.objects.size(), 3u);
      for (const auto& o : im.objects) {
        EXPECT_GE(o.box.x0(), 0.0);
        EXPECT_LE(o.box.x1(), 1.0);
        EXPECT_GE(o.box.y0(), 0.0);
        EXPECT_LE(o.box.y1(), 1.0);
      }
    }
  }
}

TEST(Bench, TasksAndClassesAreSeparableByColour) {
  // Background from the image corners identifies the task; box interior
  // identifies the class, both by nearest reference colour.
  const auto tasks = generate(BenchmarkSpec{});
  std::vector<std::pair<std::string, std::array<double, 3>>> class_rgb;
  for (int t = 0; t < 4; ++t)
    for (const auto& c : task_classes(t, 2)) class_rgb.emplace_back(c.name, c.rgb);
  std::size_t task_hits = 0, images = 0, class_hits = 0, objects = 0;
  for (const auto& t : tasks)
    for (const auto& im : t.test) {
      std::size_t best = 0;
      const auto bg = mean_colour(im.pixels, 0, 0, 32, 1);
      for (std::size_t k = 0; k < tasks.size(); ++k)
        if (colour_dist(bg, tasks[k].signature) < colour_dist(bg, tasks[best].signature)) best = k;
      task_hits += static_cast<int>(best) == t.task_id;
      ++images;
      for (const auto& o : im.objects) {
        const int cx = static_cast<int>(o.box.cx * 32), cy = static_cast<int>(o.box.cy * 32);
        const auto m = mean_colour(im.pixels, cx - 1, cy - 1, cx + 1, cy + 1);
        std::size_t bc = 0;
        for (std::size_t k = 0; k < class_rgb.size(); ++k)
          if (colour_dist(m, class_rgb[k].second) < colour_dist(m, class_rgb[bc].second)) bc = k;
        class_hits += class_rgb[bc].first == o.category;
        ++objects;
      }
    }
  EXPECT_GE(static_cast<double>(task_hits) / images, 0.95);
  EXPECT_GE(static_cast<double>(class_hits) / objects, 0.95);
}

TEST(Bench, TaskOrderIsAPermutationAndSeedZeroIsStable) {
  for (std::uint64_t s : {0u, 5u, 10u, 99u}) {
    auto o = task_order(6, s);
    EXPECT_EQ(o, task_order(6, s));
    std::sort(o.begin(), o.end());
    EXPECT_EQ(o, (std::vector<int>{0, 1, 2, 3, 4, 5}));
  }
  EXPECT_EQ(task_order(1, 3), (std::vector<int>{0}));
}

TEST(Bench, KShotSubsetCoversEveryClassFromTheOriginalSplit) {
  const auto tasks = generate(BenchmarkSpec{});
  for (int k : {1, 10}) {
    const TaskDataset sub = kshot_subset(tasks[0], k, 3);
    for (const auto& n : sub.class_names) EXPECT_GE(count_instances(sub, n), static_cast<std::size_t>(k));
    EXPECT_LT(sub.train.size(), tasks[0].train.size());
    for (const auto& im : sub.train) {
      const bool found = std::any_of(tasks[0].train.begin(), tasks[0].train.end(),
                                     [&](const Image& o) { return values_equal(o.pixels, im.pixels); });
      EXPECT_TRUE(found);
    }
    EXPECT_TRUE(same_images(sub.train, kshot_subset(tasks[0], k, 3).train));
    EXPECT_TRUE(same_images(sub.test, tasks[0].test));
  }
  EXPECT_TRUE(same_images(kshot_subset(tasks[0], 0, 3).train, tasks[0].train));
  EXPECT_THROW(kshot_subset(tasks[0], 1000, 3), ConfigError);
}

TEST(Bench, InvalidSpecsRaise) {
  BenchmarkSpec s;
  s.n_tasks = 0;
  EXPECT_THROW(generate(s), ConfigError);
  s = {};
  s.image_size = 30;
  EXPECT_THROW(generate(s), ConfigError);
  s = {};
  s.classes_per_task = 5;
  EXPECT_THROW(generate(s), ConfigError);
}

TEST(Bench, SaveLoadRoundTrip) {
  BenchmarkSpec spec;
  spec.train_images = 3;
  spec.test_images = 2;
  const TaskDataset t = generate(spec)[2];
  const auto dir = std::filesystem::temp_directory_path() / "dpalab_test_task";
  std::filesystem::remove_all(dir);
  save_task(t, dir);
  const TaskDataset back = load_task(dir);
  EXPECT_EQ(back.task_id, 2);
  EXPECT_EQ(back.class_names, t.class_names);
  EXPECT_TRUE(same_images(back.train, t.train));
  EXPECT_TRUE(same_images(back.test, t.test));
  std::filesystem::remove_all(dir);
}

TEST(Ap, PerfectDetectorScoresOne) {
  const std::vector<std::vector<Annotation>> gts{{{{0.5, 0.5, 0.2, 0.2}, "a"}}, {{{0.3, 0.3, 0.2, 0.1}, "a"}}};
  std::vector<Detections> dets(2);
  dets[0].push_back({gts[0][0].box, 0, 0.9, 0});
  dets[1].push_back({gts[1][0].box, 0, 0.8, 0});
  EXPECT_DOUBLE_EQ(average_precision(dets, gts, {"a"}).mean, 1.0);
}

TEST(Ap, NoMatchingDetectionsScoreZero) {
  const std::vector<std::vector<Annotation>> gts{{{{0.5, 0.5, 0.2, 0.2}, "a"}}};
  std::vector<Detections> dets(1);
  dets[0].push_back({{0.1, 0.1, 0.1, 0.1}, 0, 0.9, 0});
  dets[0].push_back({{0.5, 0.5, 0.2, 0.2}, 1, 0.9, 1});  // right box, wrong class
  const ApResult r = average_precision(dets, gts, {"a", "b"});
  EXPECT_DOUBLE_EQ(r.mean, 0.0);
  EXPECT_EQ(r.per_class.size(), 1u);  // "b" has no ground truth
}

TEST(Ap, HitMissHitGivesFiveSixths) {
  // Two ground truths, ranked hits (1, 0, 1): 0.5 * 1 + 0.5 * 2/3.
  EXPECT_NEAR(interpolated_ap({true, false, true}, 2), 5.0 / 6.0, 1e-15);
  const std::vector<std::vector<Annotation>> gts{{{{0.25, 0.25, 0.2, 0.2}, "a"}, {{0.75, 0.75, 0.2, 0.2}, "a"}}};
  std::vector<Detections> dets(1);
  dets[0].push_back({{0.25, 0.25, 0.2, 0.2}, 0, 0.9, 0});
  dets[0].push_back({{0.5, 0.1, 0.1, 0.1}, 0, 0.8, 1});
  dets[0].push_back({{0.75, 0.75, 0.2, 0.2}, 0, 0.7, 2});
  EXPECT_NEAR(average_precision(dets, gts, {"a"}).mean, 5.0 / 6.0, 1e-15);
}

TEST(Ap, DuplicateDetectionCountsAsFalsePositive) {
  const std::vector<std::vector<Annotation>> gts{{{{0.5, 0.5, 0.2, 0.2}, "a"}}};
  std::vector<Detections> dets(1);
  dets[0].push_back({{0.5, 0.5, 0.2, 0.2}, 0, 0.5, 0});
  dets[0].push_back({{0.5, 0.5, 0.2, 0.2}, 0, 0.9, 1});
  EXPECT_DOUBLE_EQ(average_precision(dets, gts, {"a"}).mean, 1.0);  // hit then miss
  EXPECT_THROW(average_precision(dets, {}, {"a"}), MetricError);
  EXPECT_THROW(interpolated_ap({true}, 0), MetricError);
}

TEST(Ap, IouExamples) {
  EXPECT_NEAR(iou({0.5, 0.5, 0.2, 0.2}, {0.5, 0.5, 0.2, 0.2}), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(iou({0.2, 0.2, 0.1, 0.1}, {0.8, 0.8, 0.1, 0.1}), 0.0);
  // Half-overlap of equal squares: 1/2 / (2 - 1/2) = 1/3.
  EXPECT_NEAR(iou({0.5, 0.5, 0.2, 0.2}, {0.6, 0.5, 0.2, 0.2}), 1.0 / 3.0, 1e-12);
}
