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

#include "protocol_vectors.hpp"
#include "selfdistill/plugin_protocol.hpp"
#include "selfdistill/sim_detector.hpp"
#include "test_support.hpp"

namespace selfdistill {
namespace {

using namespace std::chrono_literals;

TEST(CodecTest, RequestRoundTrip) {
  const PluginRequest r{7, Command::kTrain, {{"num_batches", 3}}};
  const std::string frame = encode_request(r);
  ASSERT_EQ(frame.back(), '\n');
  EXPECT_EQ(frame.find('\n'), frame.size() - 1);
  const PluginRequest back = decode_request(std::string_view(frame).substr(0, frame.size() - 1));
  EXPECT_EQ(back.id, 7);
  EXPECT_EQ(back.command, Command::kTrain);
  EXPECT_EQ(back.payload, r.payload);
}

TEST(CodecTest, EmbeddedNewlinesAreEscaped) {
  const std::string frame = encode_response({3, ResponseStatus::kError, Json::object(), "line one\nline two"});
  EXPECT_EQ(frame.find('\n'), frame.size() - 1);
  EXPECT_EQ(decode_response(frame.substr(0, frame.size() - 1)).error_message, "line one\nline two");
}

TEST(CodecTest, OversizeEncodingRefused) {
  EXPECT_THROW(encode_request({1, Command::kHello, {{"pad", std::string(kMaxFrameBytes, 'x')}}}), ProtocolError);
}

TEST(CodecTest, CommandNames) {
  for (Command c : {Command::kHello, Command::kInfer, Command::kTrain, Command::kSaveCheckpoint,
                    Command::kLoadCheckpoint, Command::kShutdown}) {
    EXPECT_EQ(command_from_string(to_string(c)), c);
  }
  EXPECT_FALSE(command_from_string("dance"));
}

TEST(CodecTest, NonJsonErrorQuotesLine) {
  try {
    decode_response("Loading model weights");
    FAIL();
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("Loading model weights"), std::string::npos);
  }
}

class VectorsTest : public ::testing::Test {
 protected:
  Json vectors_ = testing::load_protocol_vectors(TEST_DATA_DIR);
  testing::ScratchDir dir_{"protocol"};
};

TEST_F(VectorsTest, HostSideDecoding) {
  for (const auto& o : testing::run_host_side(vectors_)) EXPECT_TRUE(o.passed) << o.name << ": " << o.detail;
}

TEST_F(VectorsTest, SimPluginFollowsPluginSideSequence) {
  const auto outcomes = testing::run_plugin_side(vectors_, {SELFDISTILL_BIN, "simplugin"});
  EXPECT_EQ(outcomes.size(), vectors_["plugin_side"].size());
  for (const auto& o : outcomes) EXPECT_TRUE(o.passed) << o.name << ": " << o.detail;
}

TEST_F(VectorsTest, FaultyPluginsSurfaceTypedErrors) {
  for (const auto& c : vectors_["session"]) {
    const auto o = testing::run_session_case(c, FAKE_PLUGIN_BIN, dir_.path());
    EXPECT_TRUE(o.passed) << o.name << ": " << o.detail;
  }
}

TEST(SessionTest, MissingExecutable) {
  EXPECT_THROW(PluginSession({"/nonexistent/plugin"}), PluginCrashed);
}

class SimSessionTest : public ::testing::Test {
 protected:
  void SetUp() override {
    sim::SimWorld w;
    w.n_images = 20;
    w.dataset_id = "unl";
    world_ = sim::generate_world(w);
    save_manifest(world_.manifest, dir_ / "m.json");
    save_annotations(world_.truth, dir_ / "t.json");
    save_annotations(filter_labels(), dir_ / "labels.json");
  }

  AnnotationSet filter_labels() {
    AnnotationSet l = world_.truth;
    l.provenance = Provenance::kPseudo;
    return l;
  }

  PluginSession open() {
    return PluginSession({SELFDISTILL_BIN, "simplugin", "--truth", (dir_ / "t.json").string()}, {});
  }

  testing::ScratchDir dir_{"simsession"};
  sim::GeneratedWorld world_;
};

TEST_F(SimSessionTest, HandshakeAndShutdown) {
  auto s = open();
  EXPECT_EQ(s.protocol_version(), 1);
  EXPECT_TRUE(s.has_capability("infer"));
  EXPECT_TRUE(s.has_capability("train"));
  EXPECT_EQ(s.shutdown(), 0);
}

TEST_F(SimSessionTest, InferOnEmptyManifest) {
  auto s = open();
  save_manifest(DatasetManifest{"empty", {}}, dir_ / "empty.json");
  const auto r = s.infer(dir_ / "empty.json", dir_ / "d.json");
  EXPECT_TRUE(r.detections.detections.empty());
  EXPECT_EQ(r.detections.manifest_ref, "empty");
}

TEST_F(SimSessionTest, InferMatchesInProcessSimulation) {
  auto s = open();
  const auto r = s.infer(dir_ / "m.json", dir_ / "d.json");
  const auto direct = sim::sim_infer(world_.manifest, world_.truth, sim::SimSkill{}, 0);
  EXPECT_EQ(r.detections.detections, direct.detections);
}

TEST_F(SimSessionTest, ScoreFloorAppliedHostSide) {
  auto s = open();
  const auto r = s.infer(dir_ / "m.json", dir_ / "d.json", 0.6);
  for (const auto& d : r.detections.detections) EXPECT_GE(d.score, 0.6);
}

TEST_F(SimSessionTest, TrainPreconditionsAndCheckpointChange) {
  auto s = open();
  TrainPayload p{dir_ / "labels.json", dir_ / "m.json", 0, Json::object()};
  EXPECT_THROW(s.train(p), ContractViolation);
  EXPECT_FALSE(s.broken());
  const std::string before = s.checkpoint_id();
  p.num_batches = 100;
  EXPECT_NE(s.train(p), before);
}

TEST_F(SimSessionTest, SameCheckpointSameTrainingResult) {
  auto s = open();
  s.save_checkpoint(dir_ / "ck0.json");
  const TrainPayload p{dir_ / "labels.json", dir_ / "m.json", 300, Json::object()};
  const std::string a = s.train(p);
  s.load_checkpoint(dir_ / "ck0.json");
  const std::string b = s.train(p);
  EXPECT_EQ(a, b);
  auto t = open();
  EXPECT_EQ(t.train(p), a);
}

TEST_F(SimSessionTest, PluginErrorKeepsSessionAlive) {
  auto s = open();
  AnnotationSet other = filter_labels();
  other.manifest_ref = "unknown";
  save_annotations(other, dir_ / "other.json");
  EXPECT_THROW(s.train({dir_ / "other.json", dir_ / "m.json", 10, Json::object()}), PluginReportedError);
  EXPECT_FALSE(s.broken());
  EXPECT_NO_THROW(s.infer(dir_ / "m.json", dir_ / "d.json"));
}

TEST(ServeRequestsTest, EndOfInputEndsLoop) {
  std::stringstream in, out;
  in << encode_request({1, Command::kHello, Json::object()});
  int calls = 0;
  serve_requests(in, out, [&](const PluginRequest&) {
    ++calls;
    return Json{{"protocol_version", 1}};
  });
  EXPECT_EQ(calls, 1);
}

}  // namespace
}  // namespace selfdistill
