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
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "selfdistill/errors.hpp"

namespace selfdistill {

using ImageId = std::string;

/// Axis-aligned box in pixel space covering [x, x + w) x [y, y + h).
struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double right() const { return x + w; }
  double bottom() const { return y + h; }

  bool valid() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) &&
           std::isfinite(h) && w > 0.0 && h > 0.0;
  }

  BBox translated(double dx, double dy) const { return {x + dx, y + dy, w, h}; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Returns `box` unchanged or throws ContractViolation naming `what`.
inline const BBox& checked(const BBox& box, std::string_view what = "box") {
  if (!box.valid()) {
    throw ContractViolation(std::string(what) +
                            ": box must have finite fields and w, h > 0");
  }
  return box;
}

inline double area(const BBox& a) { return a.w * a.h; }

/// Intersection over union with exact real-valued overlap. Boxes that only
/// share an edge have IoU 0.
inline double iou(const BBox& a, const BBox& b) {
  // Areas are taken from the corner form so that iou(a, a) is exactly 1.
  const double ax2 = a.right(), ay2 = a.bottom();
  const double bx2 = b.right(), by2 = b.bottom();
  const double iw = std::min(ax2, bx2) - std::max(a.x, b.x);
  const double ih = std::min(ay2, by2) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = (ax2 - a.x) * (ay2 - a.y) + (bx2 - b.x) * (by2 - b.y) - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

struct Detection {
  ImageId image_id;
  BBox box;
  double score = 0.0;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct GroundTruthBox {
  ImageId image_id;
  BBox box;
  std::int64_t annotation_id = 0;

  friend bool operator==(const GroundTruthBox&, const GroundTruthBox&) = default;
};

enum class KeypointKind { kNose, kLeftEye, kRightEye, kLeftEar, kRightEar, kOther };

inline bool is_face(KeypointKind kind) { return kind != KeypointKind::kOther; }

/// COCO body-keypoint order: indices 0-4 are the face landmarks.
inline KeypointKind keypoint_kind_from_coco_index(std::size_t index) {
  switch (index) {
    case 0: return KeypointKind::kNose;
    case 1: return KeypointKind::kLeftEye;
    case 2: return KeypointKind::kRightEye;
    case 3: return KeypointKind::kLeftEar;
    case 4: return KeypointKind::kRightEar;
    default: return KeypointKind::kOther;
  }
}

struct Keypoint {
  KeypointKind kind = KeypointKind::kOther;
  double x = 0.0;
  double y = 0.0;
  double confidence = 0.0;

  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

struct Skeleton {
  ImageId image_id;
  std::vector<Keypoint> keypoints;
  double score = 0.0;

  friend bool operator==(const Skeleton&, const Skeleton&) = default;
};

inline bool in_unit_interval(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace selfdistill
