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
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <unordered_set>
#include <vector>

#include "selfdistill/core_types.hpp"
#include "selfdistill/io_formats.hpp"

namespace selfdistill {

struct FilterConfig {
  /// Keep floor(multiplier * N) detections for a dataset of N images.
  double multiplier = 2.0;
  /// Applied after the count cut.
  std::optional<double> minimum_score;
  /// When false, images left without pseudo-labels are dropped from the
  /// training manifest instead of serving as background-only images.
  bool keep_empty_images = true;

  void validate() const {
    if (!(multiplier > 0.0) || !std::isfinite(multiplier)) {
      throw ContractViolation("filter: multiplier must be a positive finite number");
    }
    if (minimum_score && !in_unit_interval(*minimum_score)) {
      throw ContractViolation("filter: minimum_score must be in [0, 1]");
    }
  }

  friend bool operator==(const FilterConfig&, const FilterConfig&) = default;
};

struct PseudoLabelStats {
  std::size_t n_images = 0;
  std::size_t n_input_detections = 0;
  std::size_t n_selected = 0;
  /// Score of the last selected detection; empty when nothing was selected.
  std::optional<double> score_cutoff;

  friend bool operator==(const PseudoLabelStats&, const PseudoLabelStats&) = default;
};

struct PseudoLabelResult {
  AnnotationSet labels;
  PseudoLabelStats stats;
  /// The manifest to train on: the input manifest, or its subset of images
  /// that received labels when keep_empty_images is false.
  DatasetManifest training_manifest;
};

inline std::size_t selection_budget(double multiplier, std::size_t n_images) {
  return static_cast<std::size_t>(std::floor(multiplier * static_cast<double>(n_images)));
}

/// Keeps the globally best floor(multiplier * N) detections as pseudo ground
/// truth. Order is (score desc, image_id asc, input index asc). Annotation ids
/// are assigned 1..k in selection order. `iteration` is stamped on the set.
inline PseudoLabelResult filter_top_detections(const DetectionSet& detections, const DatasetManifest& manifest,
                                               const FilterConfig& config = {}, int iteration = 0) {
  config.validate();
  if (manifest.empty()) throw ContractViolation("filter: manifest has no images");
  check_references(detections, manifest);

  const auto& dets = detections.detections;
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (dets[a].image_id != dets[b].image_id) return dets[a].image_id < dets[b].image_id;
    return a < b;
  });
  order.resize(std::min(order.size(), selection_budget(config.multiplier, manifest.size())));
  if (config.minimum_score) {
    std::erase_if(order, [&](std::size_t i) { return dets[i].score < *config.minimum_score; });
  }

  PseudoLabelResult result;
  result.labels.manifest_ref = manifest.dataset_id;
  result.labels.provenance = Provenance::kPseudo;
  result.labels.iteration = iteration;
  result.labels.boxes.reserve(order.size());
  std::int64_t next_id = 1;
  std::unordered_set<ImageId> labelled;
  for (std::size_t i : order) {
    result.labels.boxes.push_back({dets[i].image_id, dets[i].box, next_id++});
    labelled.insert(dets[i].image_id);
  }
  sort_canonical(result.labels);

  result.stats.n_images = manifest.size();
  result.stats.n_input_detections = dets.size();
  result.stats.n_selected = order.size();
  if (!order.empty()) result.stats.score_cutoff = dets[order.back()].score;

  if (config.keep_empty_images) {
    result.training_manifest = manifest;
  } else {
    result.training_manifest.dataset_id = manifest.dataset_id;
    for (const auto& e : manifest.images) {
      if (labelled.contains(e.image_id)) result.training_manifest.images.push_back(e);
    }
  }
  return result;
}

inline Json to_json(const PseudoLabelStats& s) {
  return {{"n_images", s.n_images},
          {"n_input_detections", s.n_input_detections},
          {"n_selected", s.n_selected},
          {"score_cutoff", s.score_cutoff ? Json(*s.score_cutoff) : Json(nullptr)}};
}

inline Json to_json(const FilterConfig& c) {
  return {{"multiplier", c.multiplier},
          {"minimum_score", c.minimum_score ? Json(*c.minimum_score) : Json(nullptr)},
          {"keep_empty_images", c.keep_empty_images}};
}

}  // namespace selfdistill
