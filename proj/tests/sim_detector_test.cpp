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

#include <cmath>
#include <sstream>

#include "selfdistill/metrics.hpp"
#include "selfdistill/pseudolabel.hpp"
#include "selfdistill/sim_detector.hpp"
#include "test_support.hpp"

namespace selfdistill::sim {
namespace {

/// Faces matched at IoU 0.5, image by image.
std::size_t match_count(const DetectionSet& d, const AnnotationSet& truth) {
  std::map<ImageId, std::pair<std::vector<Detection>, std::vector<GroundTruthBox>>> by_image;
  for (const auto& x : d.detections) by_image[x.image_id].first.push_back(x);
  for (const auto& x : truth.boxes) by_image[x.image_id].second.push_back(x);
  std::size_t n = 0;
  for (const auto& [id, pair] : by_image) n += match_at_threshold(pair.first, pair.second, 0.5).pairs.size();
  return n;
}

TEST(WorldTest, SingleFaceInsideBounds) {
  SimWorld w;
  w.n_images = 1;
  w.faces_min = w.faces_max = 1;
  const auto g = generate_world(w);
  ASSERT_EQ(g.manifest.images.size(), 1u);
  ASSERT_EQ(g.truth.boxes.size(), 1u);
  const BBox& b = g.truth.boxes[0].box;
  EXPECT_GE(b.x, 0.0);
  EXPECT_GE(b.y, 0.0);
  EXPECT_LE(b.right(), 640.0);
  EXPECT_LE(b.bottom(), 480.0);
  EXPECT_NO_THROW(check_references(g.truth, g.manifest));
}

TEST(WorldTest, SameSeedSameWorld) {
  SimWorld w;
  w.seed = 42;
  const auto a = generate_world(w);
  const auto b = generate_world(w);
  EXPECT_EQ(a.manifest, b.manifest);
  EXPECT_EQ(a.truth, b.truth);
  w.seed = 43;
  EXPECT_NE(generate_world(w).truth, a.truth);
}

TEST(WorldTest, InfeasibleConfigRejected) {
  SimWorld w;
  w.image_width = 30;
  w.face_size_min = 20;
  w.face_size_max = 40;
  EXPECT_THROW(generate_world(w), ContractViolation);
}

GeneratedWorld world(int n, std::uint64_t seed = 1, const std::string& id = "sim") {
  SimWorld w;
  w.n_images = n;
  w.seed = seed;
  w.dataset_id = id;
  return generate_world(w);
}

TEST(SimInferTest, PerfectSkillReproducesTruth) {
  const auto g = world(50);
  SimSkill s;
  s.recall_base = 1.0;
  s.localization_noise = 0.0;
  s.false_positive_rate = 0.0;
  const auto d = sim_infer(g.manifest, g.truth, s, 7);
  ASSERT_EQ(d.detections.size(), g.truth.boxes.size());
  EXPECT_EQ(average_precision(d, g.truth, 0.95), 1.0);
  EXPECT_EQ(evaluate(d, g.truth).ap_averaged, 1.0);
}

TEST(SimInferTest, ZeroSkillEmitsNothing) {
  const auto g = world(50);
  SimSkill s;
  s.recall_base = 0.0;
  s.false_positive_rate = 0.0;
  EXPECT_TRUE(sim_infer(g.manifest, g.truth, s, 7).detections.empty());
}

TEST(SimInferTest, RecallHalfWithinThreeSigma) {
  SimWorld w;
  w.n_images = 1000;
  w.faces_min = w.faces_max = 1;
  const auto g = generate_world(w);
  SimSkill s;
  s.recall_base = 0.5;
  s.false_positive_rate = 0.0;
  const double n = static_cast<double>(sim_infer(g.manifest, g.truth, s, 3).detections.size());
  const double sigma = std::sqrt(1000 * 0.5 * 0.5);
  EXPECT_LE(std::abs(n - 500.0), 3.0 * sigma) << n;
}

TEST(SimInferTest, DeterministicAndScoresInRange) {
  const auto g = world(30);
  const SimSkill s;
  const auto a = sim_infer(g.manifest, g.truth, s, 9);
  EXPECT_EQ(a, sim_infer(g.manifest, g.truth, s, 9));
  for (const auto& d : a.detections) {
    EXPECT_TRUE(in_unit_interval(d.score));
    EXPECT_TRUE(d.box.valid());
  }
  EXPECT_NE(a, sim_infer(g.manifest, g.truth, s, 10));
}

TEST(SimInferTest, HigherRecallOnlyAddsDetectionsOfFaces) {
  // Common random numbers: raising recall never loses a face detection.
  const auto g = world(80);
  SimSkill lo, hi;
  lo.recall_base = 0.4;
  hi.recall_base = 0.8;
  lo.false_positive_rate = hi.false_positive_rate = 0.0;
  const auto a = sim_infer(g.manifest, g.truth, lo, 5);
  const auto b = sim_infer(g.manifest, g.truth, hi, 5);
  EXPECT_LE(a.detections.size(), b.detections.size());
  for (const auto& d : a.detections) {
    EXPECT_NE(std::find(b.detections.begin(), b.detections.end(), d), b.detections.end());
  }
}

TEST(SimTrainTest, FixedPointWhenQualityEqualsRecall) {
  const auto g = world(10);
  AnnotationSet labels = g.truth;
  labels.provenance = Provenance::kPseudo;
  // Half the labels good, half far away from every face.
  const std::size_t n = labels.boxes.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (i % 2 == 1) labels.boxes[i].box = {-500, -500, 10, 10};
  }
  const double q = label_quality(labels, g.truth);
  SimSkill s;
  s.recall_base = q;
  const SimSkill next = sim_train(s, labels, g.truth, 2000);
  EXPECT_DOUBLE_EQ(next.recall_base, q);
}

TEST(SimTrainTest, PerfectLabelsDriveRecallUpMonotonically) {
  const auto g = world(10);
  SimSkill s;
  s.recall_base = 0.3;
  double prev = s.recall_base;
  for (int i = 0; i < 30; ++i) {
    s = sim_train(s, g.truth, g.truth, 200);
    ASSERT_GE(s.recall_base, prev);
    prev = s.recall_base;
  }
  // Each step closes a tenth of the gap: residual = initial * 0.9^30.
  const double residual = std::pow(0.9, 30);
  EXPECT_NEAR(s.recall_base, 1.0 - 0.7 * residual, 1e-12);
  EXPECT_NEAR(s.localization_noise, 3.0 * residual, 1e-12);
  EXPECT_NEAR(s.false_positive_rate, 0.3 * residual, 1e-12);
}

TEST(SimTrainTest, UselessLabelsDriveRecallDown) {
  const auto g = world(10);
  AnnotationSet junk = g.truth;
  for (auto& b : junk.boxes) b.box = {-500, -500, 10, 10};
  EXPECT_EQ(label_quality(junk, g.truth), 0.0);
  SimSkill s;
  double prev = s.recall_base;
  for (int i = 0; i < 10; ++i) {
    s = sim_train(s, junk, g.truth, 500);
    ASSERT_LT(s.recall_base, prev);
    prev = s.recall_base;
  }
  EXPECT_NEAR(s.recall_base, 0.7 * std::pow(0.75, 10), 1e-12);
  EXPECT_NEAR(s.localization_noise, 20.0 + (3.0 - 20.0) * std::pow(0.75, 10), 1e-9);
}

TEST(SimTrainTest, PreconditionsAndDeterminism) {
  const auto g = world(5);
  SimSkill s;
  EXPECT_THROW(sim_train(s, g.truth, g.truth, 0), ContractViolation);
  AnnotationSet other = g.truth;
  other.manifest_ref = "else";
  EXPECT_THROW(sim_train(s, other, g.truth, 10), ReferentialError);
  EXPECT_EQ(sim_train(s, g.truth, g.truth, 10), sim_train(s, g.truth, g.truth, 10));
}

TEST(SimTrainTest, PoorStartDegradesUnderSelfTraining) {
  // Low recall and many spurious boxes: the top-2N labels are mostly wrong
  // and the detector gets worse.
  const auto g = world(200, 4);
  SimSkill s;
  s.recall_base = 0.2;
  s.false_positive_rate = 4.0;
  s.score_model.fp_high = 0.95;
  s.score_model.fp_low = 0.6;
  const double before = average_precision(sim_infer(g.manifest, g.truth, s, 1), g.truth, 0.5);
  const auto labels = filter_top_detections(sim_infer(g.manifest, g.truth, s, 1), g.manifest).labels;
  const SimSkill next = sim_train(s, labels, g.truth, 2000);
  EXPECT_LT(next.recall_base, s.recall_base);
  EXPECT_LT(average_precision(sim_infer(g.manifest, g.truth, next, 1), g.truth, 0.5), before + 1e-12);
}

TEST(SkillJsonTest, RoundTrip) {
  SimSkill s;
  s.recall_base = 0.123;
  s.score_model.tp_slope = 0.4;
  EXPECT_EQ(skill_from_json(to_json(s)), s);
}

// In-process plugin driven through the protocol loop.
class SimPluginTest : public ::testing::Test {
 protected:
  void SetUp() override {
    g_ = world(40, 2, "unl");
    save_manifest(g_.manifest, dir_ / "m.json");
    save_annotations(g_.truth, dir_ / "t.json");
  }

  std::vector<PluginResponse> run(const std::vector<PluginRequest>& reqs, SimPluginOptions opts = {}) {
    opts.truth_paths = {dir_ / "t.json"};
    std::stringstream in, out;
    for (const auto& r : reqs) in << encode_request(r);
    EXPECT_EQ(run_sim_plugin(opts, in, out), 0);
    std::vector<PluginResponse> resp;
    std::string line;
    while (std::getline(out, line)) resp.push_back(decode_response(line));
    return resp;
  }

  testing::ScratchDir dir_{"sim"};
  GeneratedWorld g_;
};

TEST_F(SimPluginTest, HelloAdvertisesVersionAndCapabilities) {
  const auto r = run({{1, Command::kHello, {{"protocol_version", 1}}}, {2, Command::kShutdown, {}}});
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].status, ResponseStatus::kOk);
  EXPECT_EQ(r[0].payload["protocol_version"], 1);
  EXPECT_EQ(r[0].payload["capabilities"], Json({"infer", "train"}));
  EXPECT_EQ(r[1].status, ResponseStatus::kOk);
}

TEST_F(SimPluginTest, TrainingOnCleanLabelsImprovesMatches) {
  const std::string det1 = (dir_ / "d1.json").string(), det2 = (dir_ / "d2.json").string();
  const std::string labels = (dir_ / "l.json").string();
  auto r = run({{1, Command::kHello, {}},
                {2, Command::kInfer, {{"manifest_path", (dir_ / "m.json").string()}, {"output_path", det1}}}});
  ASSERT_EQ(r[1].status, ResponseStatus::kOk) << r[1].error_message;
  const auto first = load_detections(det1);
  save_annotations(filter_top_detections(first, g_.manifest).labels, labels);

  // A fresh plugin replays infer, then trains and infers again.
  r = run({{1, Command::kHello, {}},
           {2, Command::kTrain,
            {{"annotations_path", labels}, {"manifest_path", (dir_ / "m.json").string()}, {"num_batches", 2000}}},
           {3, Command::kInfer, {{"manifest_path", (dir_ / "m.json").string()}, {"output_path", det2}}},
           {4, Command::kShutdown, {}}});
  ASSERT_EQ(r[1].status, ResponseStatus::kOk) << r[1].error_message;
  EXPECT_NE(r[1].payload["checkpoint_id"], r[0].payload["checkpoint_id"]);
  const auto second = load_detections(det2);
  const auto m1 = match_count(first, g_.truth), m2 = match_count(second, g_.truth);
  EXPECT_GE(m2, m1);
}

TEST_F(SimPluginTest, MalformedFrameGetsErrorAndSessionContinues) {
  std::stringstream in, out;
  in << "this is not json\n" << encode_request({5, Command::kHello, {}}) << encode_request({4, Command::kHello, {}})
     << encode_request({6, Command::kShutdown, {}});
  SimPluginOptions opts;
  EXPECT_EQ(run_sim_plugin(opts, in, out), 0);
  std::vector<PluginResponse> r;
  std::string line;
  while (std::getline(out, line)) r.push_back(decode_response(line));
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[0].status, ResponseStatus::kError);
  EXPECT_FALSE(r[0].id.has_value());
  EXPECT_EQ(r[1].status, ResponseStatus::kOk);
  EXPECT_EQ(r[2].status, ResponseStatus::kError);
  EXPECT_EQ(r[3].status, ResponseStatus::kOk);
}

TEST_F(SimPluginTest, CheckpointRoundTrip) {
  const std::string ck = (dir_ / "ck.json").string();
  const std::string labels = (dir_ / "t.json").string();
  auto r = run({{1, Command::kHello, {}},
                {2, Command::kTrain,
                 {{"annotations_path", labels}, {"manifest_path", (dir_ / "m.json").string()}, {"num_batches", 100}}},
                {3, Command::kSaveCheckpoint, {{"path", ck}}}});
  const Json trained_id = r[1].payload["checkpoint_id"];
  r = run({{1, Command::kHello, {}}, {2, Command::kLoadCheckpoint, {{"path", ck}}}});
  EXPECT_EQ(r[1].payload["checkpoint_id"], trained_id);
}

}  // namespace
}  // namespace selfdistill::sim
