// Copyright 2026 The selfdistill Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// COCO-style single-class detection metrics with a configurable IoU
// threshold list. The default list is the looser 0.30:0.05:0.95 range used
// for face detection in cluttered scenes.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfdistill/core_types.hpp"
#include "selfdistill/errors.hpp"
#include "selfdistill/io_formats.hpp"

namespace selfdistill {

/// 0.30, 0.35, ..., 0.95. Each value is the correctly rounded k/100, so it
/// compares equal to the literal.
inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int k = 30; k <= 95; k += 5) t.push_back(static_cast<double>(k) / 100.0);
  return t;
}

struct MetricsConfig {
  std::vector<double> iou_thresholds = default_iou_thresholds();
  int recall_points = 101;
  int max_detections_per_image = 100;
  bool keep_pr_curves = false;

  void validate() const {
    if (iou_thresholds.empty()) throw ContractViolation("metrics: threshold list is empty");
    for (std::size_t i = 0; i < iou_thresholds.size(); ++i) {
      const double t = iou_thresholds[i];
      if (!(t > 0.0 && t <= 1.0)) throw ContractViolation("metrics: thresholds must lie in (0, 1]");
      if (i > 0 && !(t > iou_thresholds[i - 1])) {
        throw ContractViolation("metrics: thresholds must be strictly increasing");
      }
    }
    if (recall_points < 2) throw ContractViolation("metrics: recall_points must be >= 2");
    if (max_detections_per_image < 1) {
      throw ContractViolation("metrics: max_detections_per_image must be >= 1");
    }
  }
};

struct MatchResult {
  /// (detection index, annotation_id)
  std::vector<std::pair<std::size_t, std::int64_t>> pairs;
  std::vector<std::size_t> unmatched_detections;
  std::vector<std::int64_t> unmatched_ground_truth;
};

struct PrecisionRecallCurve {
  std::vector<double> recall;
  std::vector<double> precision;  // interpolated, one value per recall point
};

struct MetricsReport {
  std::vector<double> iou_thresholds;
  double ap_averaged = 0.0;
  std::map<double, double> ap_at;
  double ar_averaged = 0.0;
  std::map<double, double> ar_at;
  std::optional<std::map<double, PrecisionRecallCurve>> per_threshold_pr;

  double ap(double threshold) const {
    auto it = ap_at.find(threshold);
    if (it == ap_at.end()) throw ContractViolation("metrics: no AP recorded at requested threshold");
    return it->second;
  }

  friend bool operator==(const MetricsReport& a, const MetricsReport& b) {
    return a.iou_thresholds == b.iou_thresholds && a.ap_averaged == b.ap_averaged &&
           a.ap_at == b.ap_at && a.ar_averaged == b.ar_averaged && a.ar_at == b.ar_at;
  }
};

namespace detail {

inline std::vector<std::size_t> score_order(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });
  return order;
}

/// Greedy one-to-one assignment. `order` lists detection indices in
/// processing order; `ious[d][g]` is the IoU of detection d with box g.
/// Returns, per detection, the matched box index or -1.
inline std::vector<int> greedy_match(const std::vector<std::size_t>& order,
                                     const std::vector<std::vector<double>>& ious,
                                     std::size_t n_gt, double threshold) {
  std::vector<int> match(ious.size(), -1);
  std::vector<char> taken(n_gt, 0);
  for (std::size_t d : order) {
    int best = -1;
    double best_iou = threshold;
    for (std::size_t g = 0; g < n_gt; ++g) {
      if (taken[g]) continue;
      const double v = ious[d][g];
      // First box wins among equal IoUs.
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[best] = 1;
      match[d] = best;
    }
  }
  return match;
}

// Per-image detections (score-sorted, capped) with their IoU matrix, computed
// once and reused for every threshold.
struct PreparedImage {
  std::vector<std::size_t> det_global;  // global detection indices, processing order
  std::vector<std::vector<double>> ious;
  std::size_t n_gt = 0;
};

struct PreparedEval {
  std::vector<PreparedImage> images;
  std::vector<std::size_t> global_order;  // indices into the detection set
  std::size_t n_gt = 0;
  std::size_t n_kept = 0;
};

inline PreparedEval prepare(const DetectionSet& dets, const AnnotationSet& gt, int max_dets) {
  PreparedEval prep;
  std::map<ImageId, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_image;
  for (std::size_t i = 0; i < dets.detections.size(); ++i) {
    by_image[dets.detections[i].image_id].first.push_back(i);
  }
  for (std::size_t i = 0; i < gt.boxes.size(); ++i) by_image[gt.boxes[i].image_id].second.push_back(i);
  prep.n_gt = gt.boxes.size();

  std::vector<std::size_t> kept;
  for (auto& [image_id, lists] : by_image) {
    auto& [det_idx, gt_idx] = lists;
    std::stable_sort(det_idx.begin(), det_idx.end(), [&](std::size_t a, std::size_t b) {
      return dets.detections[a].score > dets.detections[b].score;
    });
    if (det_idx.size() > static_cast<std::size_t>(max_dets)) det_idx.resize(max_dets);
    PreparedImage img;
    img.n_gt = gt_idx.size();
    img.det_global = det_idx;
    img.ious.assign(det_idx.size(), std::vector<double>(gt_idx.size(), 0.0));
    for (std::size_t r = 0; r < det_idx.size(); ++r) {
      for (std::size_t c = 0; c < gt_idx.size(); ++c) {
        img.ious[r][c] = iou(dets.detections[det_idx[r]].box, gt.boxes[gt_idx[c]].box);
      }
      kept.push_back(det_idx[r]);
    }
    prep.images.push_back(std::move(img));
  }
  // Global order: score desc, then image_id asc, then input order.
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
    const auto& da = dets.detections[a];
    const auto& db = dets.detections[b];
    if (da.image_id != db.image_id) return da.image_id < db.image_id;
    return a < b;
  });
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) {
    return dets.detections[a].score > dets.detections[b].score;
  });
  prep.global_order = std::move(kept);
  prep.n_kept = prep.global_order.size();
  return prep;
}

// True-positive flag per detection index (global indexing) at one threshold.
inline std::unordered_map<std::size_t, bool> label_detections(const PreparedEval& prep, double threshold) {
  std::unordered_map<std::size_t, bool> tp;
  tp.reserve(prep.n_kept);
  for (const auto& img : prep.images) {
    std::vector<std::size_t> rows(img.det_global.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    const auto match = greedy_match(rows, img.ious, img.n_gt, threshold);
    for (std::size_t r = 0; r < rows.size(); ++r) tp[img.det_global[r]] = match[r] >= 0;
  }
  return tp;
}

struct ThresholdResult {
  double ap = 0.0;
  double recall = 0.0;
  PrecisionRecallCurve curve;
};

inline ThresholdResult evaluate_threshold(const PreparedEval& prep, double threshold, int recall_points) {
  ThresholdResult out;
  out.curve.recall.resize(recall_points);
  out.curve.precision.assign(recall_points, 0.0);
  for (int i = 0; i < recall_points; ++i) {
    out.curve.recall[i] = static_cast<double>(i) / static_cast<double>(recall_points - 1);
  }
  if (prep.n_gt == 0) {
    const double v = prep.n_kept == 0 ? 1.0 : 0.0;
    out.ap = v;
    out.recall = v;
    std::fill(out.curve.precision.begin(), out.curve.precision.end(), v);
    return out;
  }

  const auto tp = label_detections(prep, threshold);
  const std::size_t n = prep.global_order.size();
  std::vector<double> rc(n), pr(n);
  std::size_t tp_sum = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (tp.at(prep.global_order[k])) ++tp_sum;
    rc[k] = static_cast<double>(tp_sum) / static_cast<double>(prep.n_gt);
    pr[k] = static_cast<double>(tp_sum) / static_cast<double>(k + 1);
  }
  // Precision envelope, non-increasing from left to right.
  for (std::size_t k = n; k-- > 1;) pr[k - 1] = std::max(pr[k - 1], pr[k]);

  double sum = 0.0;
  for (int i = 0; i < recall_points; ++i) {
    auto it = std::lower_bound(rc.begin(), rc.end(), out.curve.recall[i]);
    if (it == rc.end()) break;
    const double p = pr[static_cast<std::size_t>(it - rc.begin())];
    out.curve.precision[i] = p;
    sum += p;
  }
  out.ap = sum / static_cast<double>(recall_points);
  out.recall = n == 0 ? 0.0 : rc.back();
  return out;
}

inline void check_same_dataset(const DetectionSet& dets, const AnnotationSet& gt) {
  if (dets.manifest_ref != gt.manifest_ref) {
    throw ContractViolation("metrics: detections reference '" + dets.manifest_ref +
                            "' but ground truth references '" + gt.manifest_ref + "'");
  }
}

}  // namespace detail

/// Matches one image's detections to its ground truth at `threshold`.
/// Detections are visited by descending score (input order on ties) and each
/// takes the still-unmatched box of highest IoU, if that IoU >= threshold.
inline MatchResult match_at_threshold(std::span<const Detection> detections,
                                      std::span<const GroundTruthBox> ground_truth, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw ContractViolation("match_at_threshold: threshold must lie in (0, 1]");
  }
  const ImageId* image = nullptr;
  auto check_image = [&](const ImageId& id) {
    if (image == nullptr) {
      image = &id;
    } else if (*image != id) {
      throw ContractViolation("match_at_threshold: records span images '" + *image + "' and '" + id + "'");
    }
  };
  for (const auto& d : detections) check_image(d.image_id);
  for (const auto& g : ground_truth) check_image(g.image_id);

  std::vector<std::vector<double>> ious(detections.size(), std::vector<double>(ground_truth.size()));
  for (std::size_t d = 0; d < detections.size(); ++d) {
    for (std::size_t g = 0; g < ground_truth.size(); ++g) {
      ious[d][g] = iou(detections[d].box, ground_truth[g].box);
    }
  }
  const auto order = detail::score_order(detections);
  const auto match = detail::greedy_match(order, ious, ground_truth.size(), threshold);

  MatchResult result;
  std::vector<char> gt_used(ground_truth.size(), 0);
  for (std::size_t d : order) {
    if (match[d] >= 0) {
      result.pairs.emplace_back(d, ground_truth[match[d]].annotation_id);
      gt_used[match[d]] = 1;
    } else {
      result.unmatched_detections.push_back(d);
    }
  }
  for (std::size_t g = 0; g < ground_truth.size(); ++g) {
    if (!gt_used[g]) result.unmatched_ground_truth.push_back(ground_truth[g].annotation_id);
  }
  return result;
}

/// Interpolated AP at one IoU threshold. With no ground truth the result is 1
/// when there are also no detections and 0 otherwise.
inline double average_precision(const DetectionSet& detections, const AnnotationSet& ground_truth,
                                double threshold, const MetricsConfig& config = {}) {
  config.validate();
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw ContractViolation("average_precision: threshold must lie in (0, 1]");
  }
  detail::check_same_dataset(detections, ground_truth);
  const auto prep = detail::prepare(detections, ground_truth, config.max_detections_per_image);
  return detail::evaluate_threshold(prep, threshold, config.recall_points).ap;
}

/// Mean over thresholds of the recall reached with at most
/// `max_detections_per_image` detections per image.
inline double average_recall(const DetectionSet& detections, const AnnotationSet& ground_truth,
                             const MetricsConfig& config = {}) {
  config.validate();
  detail::check_same_dataset(detections, ground_truth);
  const auto prep = detail::prepare(detections, ground_truth, config.max_detections_per_image);
  double sum = 0.0;
  for (double t : config.iou_thresholds) sum += detail::evaluate_threshold(prep, t, config.recall_points).recall;
  return sum / static_cast<double>(config.iou_thresholds.size());
}

inline MetricsReport evaluate(const DetectionSet& detections, const AnnotationSet& ground_truth,
                              const MetricsConfig& config = {}) {
  config.validate();
  detail::check_same_dataset(detections, ground_truth);
  const auto prep = detail::prepare(detections, ground_truth, config.max_detections_per_image);

  MetricsReport report;
  report.iou_thresholds = config.iou_thresholds;
  if (config.keep_pr_curves) report.per_threshold_pr.emplace();
  double ap_sum = 0.0, ar_sum = 0.0;
  for (double t : config.iou_thresholds) {
    auto r = detail::evaluate_threshold(prep, t, config.recall_points);
    ap_sum += r.ap;
    ar_sum += r.recall;
    report.ap_at[t] = r.ap;
    report.ar_at[t] = r.recall;
    if (report.per_threshold_pr) report.per_threshold_pr->emplace(t, std::move(r.curve));
  }
  for (double t : {0.3, 0.5}) {
    if (!report.ap_at.contains(t)) report.ap_at[t] = detail::evaluate_threshold(prep, t, config.recall_points).ap;
  }
  report.ap_averaged = ap_sum / static_cast<double>(config.iou_thresholds.size());
  report.ar_averaged = ar_sum / static_cast<double>(config.iou_thresholds.size());
  return report;
}

// ---------------------------------------------------------------------------
// Report rendering

/// "0.3", "0.35", "0.95".
inline std::string threshold_label(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", t);
  std::string s(buf);
  while (s.size() > 1 && s.back() == '0') s.pop_back();
  if (s.back() == '.') s.pop_back();
  return s;
}

inline std::string range_label(const std::vector<double>& thresholds) {
  if (thresholds.size() == 1) return threshold_label(thresholds.front());
  return threshold_label(thresholds.front()) + ":" + threshold_label(thresholds.back());
}

/// Column names of the summary table, e.g. "AP(0.3:0.95)".
struct ReportColumns {
  std::string ap_range, ap_03, ap_05, ar_range;
};

inline ReportColumns report_columns(const MetricsReport& r) {
  const std::string range = range_label(r.iou_thresholds);
  return {"AP(" + range + ")", "AP(0.3)", "AP(0.5)", "AR(" + range + ")"};
}

inline std::string format_report_table(const MetricsReport& r) {
  const auto cols = report_columns(r);
  const std::string names[] = {cols.ap_range, cols.ap_03, cols.ap_05, cols.ar_range};
  const double values[] = {r.ap_averaged, r.ap(0.3), r.ap(0.5), r.ar_averaged};
  std::string header, row;
  char buf[64];
  for (int i = 0; i < 4; ++i) {
    const int width = static_cast<int>(std::max<std::size_t>(names[i].size(), 6));
    std::snprintf(buf, sizeof buf, "%s%*s", i ? "  " : "", width, names[i].c_str());
    header += buf;
    std::snprintf(buf, sizeof buf, "%s%*.3f", i ? "  " : "", width, values[i]);
    row += buf;
  }
  return header + "\n" + row + "\n";
}

inline Json to_json(const MetricsReport& r) {
  const auto cols = report_columns(r);
  Json ap_at = Json::object(), ar_at = Json::object();
  for (const auto& [t, v] : r.ap_at) ap_at[threshold_label(t)] = v;
  for (const auto& [t, v] : r.ar_at) ar_at[threshold_label(t)] = v;
  Json j = {{cols.ap_range, r.ap_averaged},
            {cols.ap_03, r.ap(0.3)},
            {cols.ap_05, r.ap(0.5)},
            {cols.ar_range, r.ar_averaged},
            {"iou_thresholds", r.iou_thresholds},
            {"ap_at", ap_at},
            {"ar_at", ar_at}};
  if (r.per_threshold_pr) {
    Json curves = Json::object();
    for (const auto& [t, c] : *r.per_threshold_pr) {
      curves[threshold_label(t)] = {{"recall", c.recall}, {"precision", c.precision}};
    }
    j["per_threshold_pr"] = curves;
  }
  return j;
}

/// Inverse of to_json for the summary fields; curves are not restored.
inline MetricsReport report_from_json(const Json& j) {
  MetricsReport r;
  r.iou_thresholds = j.at("iou_thresholds").get<std::vector<double>>();
  const auto cols = report_columns(r);
  r.ap_averaged = j.at(cols.ap_range).get<double>();
  r.ar_averaged = j.at(cols.ar_range).get<double>();
  auto label_to_threshold = [&](const std::string& label) {
    for (double t : r.iou_thresholds) {
      if (threshold_label(t) == label) return t;
    }
    return std::stod(label);
  };
  for (const auto& [k, v] : j.at("ap_at").items()) r.ap_at[label_to_threshold(k)] = v.get<double>();
  for (const auto& [k, v] : j.at("ar_at").items()) r.ar_at[label_to_threshold(k)] = v.get<double>();
  return r;
}

}  // namespace selfdistill
