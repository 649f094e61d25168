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

#include "selfdistill/io_formats.hpp"
#include "test_support.hpp"

namespace selfdistill {
namespace {

using testing::ScratchDir;

Json annotation_doc(Json annotations) {
  return {{"format_version", 1}, {"manifest_ref", "ds"}, {"provenance", "manual"}, {"iteration", 0},
          {"annotations", std::move(annotations)}};
}

TEST(AnnotationsTest, EmptyFileGivesEmptySet) {
  const AnnotationSet set = annotations_from_json(annotation_doc(Json::array()), "t");
  EXPECT_TRUE(set.boxes.empty());
  EXPECT_EQ(set.manifest_ref, "ds");
}

TEST(AnnotationsTest, SingleBox) {
  const AnnotationSet set = annotations_from_json(
      annotation_doc({{{"annotation_id", 1}, {"image_id", "a"}, {"bbox", {0, 0, 30, 30}}}}), "t");
  ASSERT_EQ(set.boxes.size(), 1u);
  EXPECT_EQ(set.boxes[0].image_id, "a");
  EXPECT_EQ(set.boxes[0].box, (BBox{0, 0, 30, 30}));
}

TEST(AnnotationsTest, NegativeWidthNamesField) {
  try {
    annotations_from_json(annotation_doc({{{"annotation_id", 1}, {"image_id", "a"}, {"bbox", {0, 0, -5, 30}}}}), "t");
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("width"), std::string::npos) << e.what();
  }
}

TEST(AnnotationsTest, DuplicateIdRejected) {
  EXPECT_THROW(annotations_from_json(annotation_doc({{{"annotation_id", 1}, {"image_id", "a"}, {"bbox", {0, 0, 5, 5}}},
                                                     {{"annotation_id", 1}, {"image_id", "b"}, {"bbox", {0, 0, 5, 5}}}}),
                                     "t"),
               SchemaError);
}

TEST(AnnotationsTest, MissingFieldAndBadVersion) {
  Json doc = annotation_doc(Json::array());
  doc.erase("manifest_ref");
  EXPECT_THROW(annotations_from_json(doc, "t"), SchemaError);
  doc = annotation_doc(Json::array());
  doc["format_version"] = 2;
  EXPECT_THROW(annotations_from_json(doc, "t"), SchemaError);
}

TEST(AnnotationsTest, RoundTripAndByteIdenticalSaves) {
  ScratchDir dir("io");
  AnnotationSet set;
  set.manifest_ref = "ds";
  set.boxes = {{"a", {1, 2, 3, 4}, 1}, {"b", {5.5, 6.25, 7, 8}, 2}};
  save_annotations(set, dir / "a.json");
  save_annotations(set, dir / "b.json");
  EXPECT_EQ(load_annotations(dir / "a.json"), set);
  EXPECT_EQ(read_text_file(dir / "a.json"), read_text_file(dir / "b.json"));

  AnnotationSet empty;
  empty.manifest_ref = "ds";
  save_annotations(empty, dir / "e.json");
  EXPECT_EQ(load_annotations(dir / "e.json"), empty);
}

TEST(AnnotationsTest, RandomRoundTripProperty) {
  ScratchDir dir("io");
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> pos(-100, 700), size(0.01, 90);
  for (int trial = 0; trial < 50; ++trial) {
    AnnotationSet set;
    set.manifest_ref = "ds" + std::to_string(trial);
    set.provenance = trial % 2 ? Provenance::kPseudo : Provenance::kManual;
    set.iteration = trial % 5;
    const int n = static_cast<int>(rng() % 20);
    for (int i = 0; i < n; ++i) {
      set.boxes.push_back({"img" + std::to_string(rng() % 4), {pos(rng), pos(rng), size(rng), size(rng)}, i + 1});
    }
    sort_canonical(set);
    save_annotations(set, dir / "r.json");
    ASSERT_EQ(load_annotations(dir / "r.json"), set);
  }
}

TEST(AnnotationsTest, ReferentialCheck) {
  ScratchDir dir("io");
  const DatasetManifest m = testing::make_manifest("ds", 2);
  AnnotationSet set;
  set.manifest_ref = "ds";
  set.boxes = {{"img9", {0, 0, 1, 1}, 1}};
  save_annotations(set, dir / "a.json");
  EXPECT_THROW(load_annotations(dir / "a.json", m), ReferentialError);
  set.boxes[0].image_id = "img1";
  set.manifest_ref = "other";
  save_annotations(set, dir / "a.json");
  EXPECT_THROW(load_annotations(dir / "a.json", m), ReferentialError);
}

TEST(FilesTest, MissingFileAndBadJson) {
  ScratchDir dir("io");
  EXPECT_THROW(load_annotations(dir / "nope.json"), IoError);
  write_text_file(dir / "bad.json", "{not json");
  EXPECT_THROW(load_annotations(dir / "bad.json"), ParseError);
}

Json detection_doc(Json detections) {
  return {{"format_version", 1}, {"manifest_ref", "ds"}, {"producer", "t"}, {"detections", std::move(detections)}};
}

TEST(DetectionsTest, ScoreOutOfRangeRejected) {
  EXPECT_THROW(detections_from_json(detection_doc({{{"image_id", "a"}, {"bbox", {0, 0, 1, 1}}, {"score", 1.3}}}), "t"),
               SchemaError);
}

TEST(DetectionsTest, EmptyAndRoundTripPreservesOrder) {
  EXPECT_TRUE(detections_from_json(detection_doc(Json::array()), "t").detections.empty());
  ScratchDir dir("io");
  DetectionSet set;
  set.manifest_ref = "ds";
  set.producer = "p";
  set.detections = {{"b", {0, 0, 3, 3}, 0.2}, {"a", {1, 1, 3, 3}, 0.9}, {"b", {2, 2, 3, 3}, 0.5}};
  save_detections(set, dir / "d.json");
  EXPECT_EQ(load_detections(dir / "d.json"), set);
}

TEST(ManifestTest, RoundTripAndValidation) {
  ScratchDir dir("io");
  const DatasetManifest m = testing::make_manifest("ds", 3);
  save_manifest(m, dir / "m.json");
  EXPECT_EQ(load_manifest(dir / "m.json"), m);

  Json j = to_json(m);
  j["images"][1]["image_id"] = "img0";
  EXPECT_THROW(manifest_from_json(j, "t"), SchemaError);
  j = to_json(m);
  j["images"][0]["width"] = 0;
  EXPECT_THROW(manifest_from_json(j, "t"), SchemaError);
}

Json skeleton_doc(Json skeletons) {
  return {{"format_version", 1}, {"images", {{{"image_id", "a"}, {"skeletons", std::move(skeletons)}}}}};
}

TEST(SkeletonsTest, FiveFaceKeypoints) {
  const auto s = skeletons_from_json(
      skeleton_doc({{{"score", 0.8}, {"keypoints", {{1, 1, 1}, {2, 2, 1}, {3, 3, 1}, {4, 4, 1}, {5, 5, 1}}}}}), "t");
  ASSERT_EQ(s.size(), 1u);
  ASSERT_EQ(s[0].keypoints.size(), 5u);
  for (const auto& k : s[0].keypoints) EXPECT_TRUE(is_face(k.kind));
}

TEST(SkeletonsTest, SeventeenCocoKeypointsFlat) {
  Json flat = Json::array();
  for (int k = 0; k < 17; ++k) {
    flat.push_back(k);
    flat.push_back(k);
    flat.push_back(0.5);
  }
  const auto s = skeletons_from_json(skeleton_doc({{{"score", 0.5}, {"keypoints", flat}}}), "t");
  ASSERT_EQ(s[0].keypoints.size(), 17u);
  int faces = 0;
  for (const auto& k : s[0].keypoints) faces += is_face(k.kind) ? 1 : 0;
  EXPECT_EQ(faces, 5);
}

TEST(SkeletonsTest, MissingScoreRejected) {
  EXPECT_THROW(skeletons_from_json(skeleton_doc({{{"keypoints", Json::array()}}}), "t"), SchemaError);
}

TEST(SkeletonsTest, RoundTripByteIdentical) {
  ScratchDir dir("io");
  std::vector<Skeleton> in = {{"a", {{KeypointKind::kNose, 1.5, 2, 0.9}, {KeypointKind::kLeftEye, 3, 4, 0}}, 0.7},
                              {"b", {}, 0.1}};
  save_skeletons(in, dir / "s1.json");
  const auto out = load_skeletons(dir / "s1.json");
  EXPECT_EQ(out, in);
  save_skeletons(out, dir / "s2.json");
  EXPECT_EQ(read_text_file(dir / "s1.json"), read_text_file(dir / "s2.json"));
}

}  // namespace
}  // namespace selfdistill
