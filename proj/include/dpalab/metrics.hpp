#ifndef DPALAB_METRICS_HPP
#define DPALAB_METRICS_HPP

// Detection AP at a single IoU threshold and the continual-learning summary
// metrics computed from a lower-triangular AP matrix.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "dpalab/bench.hpp"
#include "dpalab/errors.hpp"
#include "dpalab/model.hpp"

namespace dpalab {

struct ApResult {
  std::map<std::string, double> per_class;  // classes with ground truth only, in [0, 1]
  double mean = 0.0;
};

// All-point interpolated AP of one class from ranked hits.
// `hits[k]` says whether the k-th ranked detection matched a ground truth.
inline double interpolated_ap(const std::vector<bool>& hits, std::size_t n_gt) {
  if (n_gt == 0) throw MetricError("interpolated_ap: no ground truth");
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (hits[k]) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t k = 0; k < recall.size(); ++k) {
    if (recall[k] > prev_r) {
      ap += (recall[k] - prev_r) * precision[k];
      prev_r = recall[k];
    }
  }
  return ap;
}

// `dets[i]` are detections on image i with categories indexing `class_names`.
// Detections are matched greedily in score order to the unmatched ground
// truth of the same class with the highest IoU >= iou_thresh.
inline ApResult average_precision(const std::vector<Detections>& dets,
                                  const std::vector<std::vector<Annotation>>& gts,
                                  const std::vector<std::string>& class_names,
                                  double iou_thresh = 0.5) {
  if (dets.size() != gts.size())
    throw MetricError("average_precision: " + std::to_string(dets.size()) + " detection lists for " +
                      std::to_string(gts.size()) + " images");
  ApResult res;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    const std::string& name = class_names[c];
    std::size_t n_gt = 0;
    std::vector<std::vector<Box>> gt_boxes(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i)
      for (const auto& a : gts[i])
        if (a.category == name) {
          gt_boxes[i].push_back(a.box);
          ++n_gt;
        }
    if (n_gt == 0) continue;

    struct Ranked {
      double score;
      std::size_t image, order;
      Box box;
    };
    std::vector<Ranked> ranked;
    for (std::size_t i = 0; i < dets.size(); ++i)
      for (std::size_t k = 0; k < dets[i].size(); ++k)
        if (dets[i][k].category == c) ranked.push_back({dets[i][k].score, i, k, dets[i][k].box});
    std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.image != b.image ? a.image < b.image : a.order < b.order;
    });

    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gt_boxes[i].size(), false);
    std::vector<bool> hits;
    for (const Ranked& r : ranked) {
      double best = iou_thresh;
      long match = -1;
      for (std::size_t g = 0; g < gt_boxes[r.image].size(); ++g) {
        if (used[r.image][g]) continue;
        const double o = iou(r.box, gt_boxes[r.image][g]);
        if (o >= best) {
          best = o;
          match = static_cast<long>(g);
        }
      }
      if (match >= 0) used[r.image][static_cast<std::size_t>(match)] = true;
      hits.push_back(match >= 0);
    }
    res.per_class[name] = interpolated_ap(hits, n_gt);
  }
  if (!res.per_class.empty()) {
    double s = 0.0;
    for (const auto& [n, ap] : res.per_class) s += ap;
    res.mean = s / static_cast<double>(res.per_class.size());
  }
  return res;
}

// Lower-triangular matrix in percent: rows[i][j] = AP on task j after task i.
struct ApMatrix {
  std::vector<std::vector<double>> rows;

  std::size_t size() const { return rows.size(); }

  void validate() const {
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].size() != i + 1)
        throw MetricError("AP matrix row " + std::to_string(i) + " has " +
                          std::to_string(rows[i].size()) + " entries, expected " + std::to_string(i + 1));
    if (rows.empty()) throw MetricError("empty AP matrix");
  }
};

// AP_i = mean of row i.
inline double row_average(const ApMatrix& m, std::size_t i) {
  const auto& r = m.rows.at(i);
  return std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
}

inline double fap(const ApMatrix& m) {
  m.validate();
  return row_average(m, m.size() - 1);
}

inline double cap(const ApMatrix& m) {
  m.validate();
  double s = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i) s += row_average(m, i);
  return s / static_cast<double>(m.size());
}

inline double ffp(const ApMatrix& m) {
  m.validate();
  const std::size_t n = m.size();
  if (n < 2) throw MetricError("FFP is undefined for a single task");
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) s += m.rows[i][i] - m.rows[n - 1][i];
  return s / static_cast<double>(n - 1);
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1), 0 for one value
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) throw MetricError("mean_std of an empty sample");
  MeanStd r;
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

}  // namespace dpalab

#endif  // DPALAB_METRICS_HPP
