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
#include <gtest/gtest.h>

#include <random>

#include "selfdistill/keypoints.hpp"
#include "test_support.hpp"

namespace selfdistill {
namespace {

Skeleton face_skeleton(std::vector<std::pair<double, double>> pts, double score = 0.9) {
  Skeleton s{"a", {}, score};
  for (std::size_t i = 0; i < pts.size(); ++i) {
    s.keypoints.push_back({keypoint_kind_from_coco_index(i), pts[i].first, pts[i].second, 1.0});
  }
  return s;
}

TEST(FaceBoxTest, CenteredOnSinglePoint) {
  const auto d = face_box_from_skeleton(face_skeleton({{100, 100}, {100, 100}, {100, 100}, {100, 100}, {100, 100}}));
  ASSERT_TRUE(d);
  EXPECT_EQ(d->box, (BBox{85, 85, 30, 30}));
  EXPECT_EQ(d->score, 0.9);
}

TEST(FaceBoxTest, MeanOfFiveLandmarks) {
  // Mean y: (10 + 8 + 8 + 9 + 9) / 5 = 8.8.
  const auto d = face_box_from_skeleton(face_skeleton({{10, 10}, {8, 8}, {12, 8}, {6, 9}, {14, 9}}));
  ASSERT_TRUE(d);
  EXPECT_NEAR(d->box.x, -5.0, 1e-12);
  EXPECT_NEAR(d->box.y, -6.2, 1e-12);
  EXPECT_EQ(d->box.w, 30.0);
  EXPECT_EQ(d->box.h, 30.0);
}

TEST(FaceBoxTest, BodyOnlySkeletonGivesNothing) {
  Skeleton s{"a", {{KeypointKind::kOther, 5, 5, 1.0}, {KeypointKind::kOther, 6, 6, 1.0}}, 0.5};
  EXPECT_FALSE(face_box_from_skeleton(s));
}

TEST(FaceBoxTest, ConfidenceThresholdIsStrict) {
  Skeleton s = face_skeleton({{0, 0}, {100, 100}});
  s.keypoints[0].confidence = 0.0;
  auto d = face_box_from_skeleton(s);
  ASSERT_TRUE(d);
  EXPECT_EQ(d->box, (BBox{85, 85, 30, 30}));
  FaceBoxParams p;
  p.min_confidence = 1.0;
  EXPECT_FALSE(face_box_from_skeleton(s, p));
}

TEST(FaceBoxTest, ImageBoundsShiftIntoFrame) {
  FaceBoxParams p;
  p.image_bounds = std::pair{100.0, 80.0};
  const auto d = face_box_from_skeleton(face_skeleton({{10, 10}, {8, 8}, {12, 8}, {6, 9}, {14, 9}}), p);
  EXPECT_EQ(d->box, (BBox{0, 0, 30, 30}));
  const auto e = face_box_from_skeleton(face_skeleton({{99, 79}}), p);
  EXPECT_EQ(e->box, (BBox{70, 50, 30, 30}));
}

TEST(FaceBoxTest, SetConversion) {
  std::vector<Skeleton> none;
  EXPECT_TRUE(face_boxes_from_skeleton_set(none).detections.empty());
  std::vector<Skeleton> three = {face_skeleton({{1, 1}}), Skeleton{"a", {{KeypointKind::kOther, 1, 1, 1}}, 0.4},
                                 face_skeleton({{50, 50}})};
  EXPECT_EQ(face_boxes_from_skeleton_set(three).detections.size(), 2u);

  const DatasetManifest m = testing::make_manifest("ds", 1);
  three[0].image_id = three[1].image_id = three[2].image_id = "img0";
  const DetectionSet out = face_boxes_from_skeleton_set(three, {}, m);
  EXPECT_EQ(out.manifest_ref, "ds");
  three[1].image_id = "zzz";
  EXPECT_THROW(face_boxes_from_skeleton_set(three, {}, m), ReferentialError);
}

TEST(FaceBoxTest, RandomSkeletonsSizeCenterAndTranslation) {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> pos(-500, 500), conf(0, 1), shift(-1000, 1000);
  for (int trial = 0; trial < 2000; ++trial) {
    Skeleton s{"a", {}, conf(rng)};
    for (std::size_t k = 0; k < 17; ++k) s.keypoints.push_back({keypoint_kind_from_coco_index(k), pos(rng), pos(rng), conf(rng)});
    const auto d = face_box_from_skeleton(s);
    double sx = 0, sy = 0;
    int n = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      if (s.keypoints[k].confidence > 0.0) {
        sx += s.keypoints[k].x;
        sy += s.keypoints[k].y;
        ++n;
      }
    }
    ASSERT_EQ(d.has_value(), n > 0);
    if (!d) continue;
    ASSERT_EQ(d->box.w, 30.0);
    ASSERT_EQ(d->box.h, 30.0);
    ASSERT_NEAR(d->box.x + 15.0, sx / n, 1e-9);
    ASSERT_NEAR(d->box.y + 15.0, sy / n, 1e-9);

    const double dx = shift(rng), dy = shift(rng);
    Skeleton moved = s;
    for (auto& k : moved.keypoints) {
      k.x += dx;
      k.y += dy;
    }
    const auto m = face_box_from_skeleton(moved);
    ASSERT_TRUE(m);
    ASSERT_NEAR(m->box.x, d->box.x + dx, 1e-9);
    ASSERT_NEAR(m->box.y, d->box.y + dy, 1e-9);
  }
}

}  // namespace
}  // namespace selfdistill
