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

#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "selfdistill/core_types.hpp"
#include "selfdistill/io_formats.hpp"

namespace selfdistill {

struct FaceBoxParams {
  double box_size = 30.0;
  /// Face keypoints must be strictly above this confidence to count.
  /// With the default 0.0, undetected keypoints (confidence 0) are skipped.
  double min_confidence = 0.0;
  /// (width, height) of the image; when set, boxes are shifted into frame.
  std::optional<std::pair<double, double>> image_bounds;
};

namespace detail {

// Shift [pos, pos + size) inside [0, limit) when it fits.
inline double shift_into(double pos, double size, double limit) {
  if (size > limit) return pos;
  if (pos < 0.0) return 0.0;
  if (pos + size > limit) return limit - size;
  return pos;
}

}  // namespace detail

/// Fixed-size face box centred on the mean of the qualifying face keypoints,
/// or nullopt when none qualify.
inline std::optional<Detection> face_box_from_skeleton(const Skeleton& s, const FaceBoxParams& params = {}) {
  if (!(params.box_size > 0.0)) throw ContractViolation("face box size must be > 0");
  double sx = 0.0, sy = 0.0;
  int n = 0;
  for (const auto& k : s.keypoints) {
    if (is_face(k.kind) && k.confidence > params.min_confidence) {
      sx += k.x;
      sy += k.y;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  const double half = params.box_size / 2.0;
  BBox box{sx / n - half, sy / n - half, params.box_size, params.box_size};
  if (params.image_bounds) {
    box.x = detail::shift_into(box.x, box.w, params.image_bounds->first);
    box.y = detail::shift_into(box.y, box.h, params.image_bounds->second);
  }
  return Detection{s.image_id, box, s.score};
}

inline std::string face_box_producer(const FaceBoxParams& params) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "facesfrompose(box_size=%g,min_confidence=%g,bounds=%s)", params.box_size,
                params.min_confidence, params.image_bounds ? "image" : "none");
  return buf;
}

/// Converts every skeleton; skeletons without qualifying face keypoints are
/// dropped. `bounds_of` may supply per-image bounds (overriding
/// params.image_bounds).
template <typename BoundsFn>
DetectionSet face_boxes_from_skeleton_set(std::span<const Skeleton> skeletons, const FaceBoxParams& params,
                                          std::string manifest_ref, BoundsFn&& bounds_of) {
  DetectionSet out;
  out.manifest_ref = std::move(manifest_ref);
  out.producer = face_box_producer(params);
  for (const auto& s : skeletons) {
    FaceBoxParams p = params;
    if (auto b = bounds_of(s.image_id)) p.image_bounds = b;
    if (auto d = face_box_from_skeleton(s, p)) out.detections.push_back(std::move(*d));
  }
  return out;
}

inline DetectionSet face_boxes_from_skeleton_set(std::span<const Skeleton> skeletons,
                                                 const FaceBoxParams& params = {},
                                                 std::string manifest_ref = {}) {
  return face_boxes_from_skeleton_set(
      skeletons, params, std::move(manifest_ref),
      [](const ImageId&) -> std::optional<std::pair<double, double>> { return std::nullopt; });
}

/// Bounds and manifest_ref taken from `manifest`; skeletons must reference it.
inline DetectionSet face_boxes_from_skeleton_set(std::span<const Skeleton> skeletons,
                                                 const FaceBoxParams& params,
                                                 const DatasetManifest& manifest) {
  const auto index = index_images(manifest);
  for (const auto& s : skeletons) {
    if (!index.contains(s.image_id)) {
      throw ReferentialError("skeleton image_id '" + s.image_id + "' not in manifest '" + manifest.dataset_id + "'");
    }
  }
  FaceBoxParams p = params;
  p.image_bounds.reset();
  auto out = face_boxes_from_skeleton_set(
      skeletons, p, manifest.dataset_id,
      [&](const ImageId& id) -> std::optional<std::pair<double, double>> {
        const ImageEntry* e = index.at(id);
        return std::make_pair(static_cast<double>(e->width), static_cast<double>(e->height));
      });
  p.image_bounds = std::make_pair(0.0, 0.0);
  out.producer = face_box_producer(p);
  return out;
}

}  // namespace selfdistill
