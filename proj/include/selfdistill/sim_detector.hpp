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
// Synthetic scenes plus a detector whose skill tracks the quality of the
// pseudo-labels it is trained on. This is a test double for a CNN detector:
// it lets the whole self-training loop run hermetically and deterministically.
//
// Randomness is drawn from per-image streams keyed by (seed, image_id), and
// every face consumes the same number of draws whether or not it is detected.
// Two skills therefore see common random numbers: raising recall_base only
// adds detections, it never reshuffles the others.
#pragma once

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfdistill/core_types.hpp"
#include "selfdistill/errors.hpp"
#include "selfdistill/io_formats.hpp"
#include "selfdistill/plugin_protocol.hpp"

namespace selfdistill::sim {

// ---------------------------------------------------------------------------
// Deterministic randomness

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Portable generator: mt19937_64 with explicit conversions, so streams do
/// not depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::string_view key, std::uint64_t stream = 0)
      : engine_(splitmix64(seed ^ splitmix64(fnv1a(key) + stream))) {}

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(engine_() % span);
  }

 private:
  std::mt19937_64 engine_;
};

/// Poisson(mean) by CDF inversion of a single uniform; monotone in `mean`.
inline int poisson_from_uniform(double mean, double u) {
  if (mean <= 0.0) return 0;
  double p = std::exp(-mean);
  double cdf = p;
  int k = 0;
  while (u >= cdf && k < 10000) {
    ++k;
    p *= mean / k;
    cdf += p;
    if (p == 0.0) break;
  }
  return k;
}

// ---------------------------------------------------------------------------
// World

struct SimWorld {
  std::uint64_t seed = 0;
  std::string dataset_id = "sim";
  int n_images = 100;
  int faces_min = 1;
  int faces_max = 4;
  int image_width = 640;
  int image_height = 480;
  double face_size_min = 20.0;
  double face_size_max = 40.0;

  void validate() const {
    if (n_images < 0) throw ContractViolation("sim world: n_images must be >= 0");
    if (faces_min < 0 || faces_max < faces_min) throw ContractViolation("sim world: empty faces-per-image range");
    if (image_width <= 0 || image_height <= 0) throw ContractViolation("sim world: image size must be positive");
    if (!(face_size_min > 0.0) || face_size_max < face_size_min) {
      throw ContractViolation("sim world: face size range must be positive and nonempty");
    }
    if (face_size_max > image_width || face_size_max > image_height) {
      throw ContractViolation("sim world: infeasible config, faces larger than the image");
    }
    if (dataset_id.empty()) throw ContractViolation("sim world: dataset_id must be nonempty");
  }
};

struct GeneratedWorld {
  DatasetManifest manifest;
  AnnotationSet truth;
};

inline std::string sim_image_id(const std::string& dataset_id, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", index);
  return dataset_id + "/" + buf;
}

/// Square faces placed uniformly inside the image (overlap allowed).
inline GeneratedWorld generate_world(const SimWorld& config) {
  config.validate();
  GeneratedWorld out;
  out.manifest.dataset_id = config.dataset_id;
  out.truth.manifest_ref = config.dataset_id;
  out.truth.provenance = Provenance::kManual;
  Rng rng(config.seed);
  std::int64_t next_id = 1;
  for (int i = 0; i < config.n_images; ++i) {
    const std::string id = sim_image_id(config.dataset_id, i);
    out.manifest.images.push_back({id, "sim://" + id, config.image_width, config.image_height});
    const auto n_faces = rng.uniform_int(config.faces_min, config.faces_max);
    for (std::int64_t f = 0; f < n_faces; ++f) {
      const double size = rng.uniform(config.face_size_min, config.face_size_max);
      const double x = rng.uniform(0.0, config.image_width - size);
      const double y = rng.uniform(0.0, config.image_height - size);
      out.truth.boxes.push_back({id, {x, y, size, size}, next_id++});
    }
  }
  sort_canonical(out.truth);
  return out;
}

// ---------------------------------------------------------------------------
// Skill

/// Maps a true detection's IoU with its face to a score, and draws spurious
/// detections' scores from a low band.
struct ScoreModel {
  double tp_offset = 0.3;
  double tp_slope = 0.6;
  double tp_jitter = 0.05;
  double fp_low = 0.05;
  double fp_high = 0.5;

  friend bool operator==(const ScoreModel&, const ScoreModel&) = default;
};

struct SimSkill {
  double recall_base = 0.7;
  double localization_noise = 3.0;
  double false_positive_rate = 0.3;
  ScoreModel score_model;
  double spurious_size_min = 20.0;
  double spurious_size_max = 40.0;

  void validate() const {
    if (!in_unit_interval(recall_base)) throw ContractViolation("sim skill: recall_base must be in [0, 1]");
    if (!(localization_noise >= 0.0)) throw ContractViolation("sim skill: localization_noise must be >= 0");
    if (!(false_positive_rate >= 0.0)) throw ContractViolation("sim skill: false_positive_rate must be >= 0");
    if (!(spurious_size_min > 0.0) || spurious_size_max < spurious_size_min) {
      throw ContractViolation("sim skill: spurious size range must be positive and nonempty");
    }
  }

  friend bool operator==(const SimSkill&, const SimSkill&) = default;
};

inline Json to_json(const SimSkill& s) {
  return {{"recall_base", s.recall_base},
          {"localization_noise", s.localization_noise},
          {"false_positive_rate", s.false_positive_rate},
          {"spurious_size", {s.spurious_size_min, s.spurious_size_max}},
          {"score_model",
           {{"tp_offset", s.score_model.tp_offset},
            {"tp_slope", s.score_model.tp_slope},
            {"tp_jitter", s.score_model.tp_jitter},
            {"fp_low", s.score_model.fp_low},
            {"fp_high", s.score_model.fp_high}}}};
}

inline SimSkill skill_from_json(const Json& j) {
  SimSkill s;
  try {
    s.recall_base = j.at("recall_base").get<double>();
    s.localization_noise = j.at("localization_noise").get<double>();
    s.false_positive_rate = j.at("false_positive_rate").get<double>();
    if (j.contains("spurious_size")) {
      s.spurious_size_min = j["spurious_size"].at(0).get<double>();
      s.spurious_size_max = j["spurious_size"].at(1).get<double>();
    }
    if (j.contains("score_model")) {
      const Json& m = j["score_model"];
      s.score_model.tp_offset = m.value("tp_offset", s.score_model.tp_offset);
      s.score_model.tp_slope = m.value("tp_slope", s.score_model.tp_slope);
      s.score_model.tp_jitter = m.value("tp_jitter", s.score_model.tp_jitter);
      s.score_model.fp_low = m.value("fp_low", s.score_model.fp_low);
      s.score_model.fp_high = m.value("fp_high", s.score_model.fp_high);
    }
  } catch (const Json::exception& e) {
    throw SchemaError(std::string("sim skill: ") + e.what());
  }
  s.validate();
  return s;
}

namespace detail {

inline std::unordered_map<ImageId, std::vector<const GroundTruthBox*>> boxes_by_image(const AnnotationSet& set) {
  std::unordered_map<ImageId, std::vector<const GroundTruthBox*>> out;
  for (const auto& b : set.boxes) out[b.image_id].push_back(&b);
  return out;
}

}  // namespace detail

/// Emulated detector output over `manifest`. Each true face is found with
/// probability recall_base, with every corner jittered by up to
/// localization_noise pixels; each image also gets Poisson(false_positive_rate)
/// spurious boxes with low scores.
inline DetectionSet sim_infer(const DatasetManifest& manifest, const AnnotationSet& truth, const SimSkill& skill,
                              std::uint64_t seed, std::string producer = "sim") {
  skill.validate();
  const auto faces = detail::boxes_by_image(truth);
  const ScoreModel& sm = skill.score_model;
  DetectionSet out;
  out.manifest_ref = manifest.dataset_id;
  out.producer = std::move(producer);
  for (const auto& image : manifest.images) {
    const double W = static_cast<double>(image.width), H = static_cast<double>(image.height);
    Rng rng(seed, image.image_id, 0);
    if (auto it = faces.find(image.image_id); it != faces.end()) {
      for (const GroundTruthBox* face : it->second) {
        const double hit = rng.uniform();
        const double n = skill.localization_noise;
        double x1 = face->box.x + rng.uniform(-n, n);
        double y1 = face->box.y + rng.uniform(-n, n);
        double x2 = face->box.right() + rng.uniform(-n, n);
        double y2 = face->box.bottom() + rng.uniform(-n, n);
        const double score_noise = rng.uniform(-sm.tp_jitter, sm.tp_jitter);
        if (!(hit < skill.recall_base)) continue;
        if (x2 - x1 < 1.0) x2 = x1 + 1.0;
        if (y2 - y1 < 1.0) y2 = y1 + 1.0;
        const BBox box{x1, y1, x2 - x1, y2 - y1};
        const double score = std::clamp(sm.tp_offset + sm.tp_slope * iou(box, face->box) + score_noise, 0.0, 1.0);
        out.detections.push_back({image.image_id, box, score});
      }
    }
    Rng fp_rng(seed, image.image_id, 1);
    const int n_fp = poisson_from_uniform(skill.false_positive_rate, fp_rng.uniform());
    for (int k = 0; k < n_fp; ++k) {
      const double size = std::min({fp_rng.uniform(skill.spurious_size_min, skill.spurious_size_max), W, H});
      const double x = fp_rng.uniform(0.0, W - size);
      const double y = fp_rng.uniform(0.0, H - size);
      const double score = fp_rng.uniform(sm.fp_low, sm.fp_high);
      out.detections.push_back({image.image_id, {x, y, size, size}, std::clamp(score, 0.0, 1.0)});
    }
  }
  return out;
}

/// Learning rate per batch; 2000 batches move the skill all the way to its
/// target, matching the quick saturation of fine-tuning on frozen labels.
inline constexpr double kSkillLearningRate = 5e-4;
/// Targets for noise and false positives at label quality q are
/// scale * (1 - q): perfect labels drive both to zero.
inline constexpr double kNoiseTargetScale = 20.0;
inline constexpr double kFalsePositiveTargetScale = 2.0;
inline constexpr double kQualityIou = 0.5;

/// Fraction of pseudo-labels overlapping some true face with IoU >= 0.5.
/// Zero for an empty label set.
inline double label_quality(const AnnotationSet& pseudo_labels, const AnnotationSet& truth) {
  if (pseudo_labels.boxes.empty()) return 0.0;
  const auto faces = detail::boxes_by_image(truth);
  std::size_t good = 0;
  for (const auto& label : pseudo_labels.boxes) {
    auto it = faces.find(label.image_id);
    if (it == faces.end()) continue;
    for (const GroundTruthBox* f : it->second) {
      if (iou(label.box, f->box) >= kQualityIou) {
        ++good;
        break;
      }
    }
  }
  return static_cast<double>(good) / static_cast<double>(pseudo_labels.boxes.size());
}

/// Contracts the skill toward what the labels can teach:
///   gain   = min(1, kSkillLearningRate * num_batches)
///   recall += gain * (q - recall)
///   noise  += gain * (kNoiseTargetScale * (1 - q) - noise)
///   fp     += gain * (kFalsePositiveTargetScale * (1 - q) - fp)
inline SimSkill sim_train(const SimSkill& skill, const AnnotationSet& pseudo_labels, const AnnotationSet& truth,
                          std::int64_t num_batches) {
  skill.validate();
  if (num_batches < 1) throw ContractViolation("sim_train: num_batches must be >= 1");
  if (pseudo_labels.manifest_ref != truth.manifest_ref) {
    throw ReferentialError("sim_train: labels reference '" + pseudo_labels.manifest_ref + "' but truth references '" +
                           truth.manifest_ref + "'");
  }
  const double q = label_quality(pseudo_labels, truth);
  const double gain = std::min(1.0, kSkillLearningRate * static_cast<double>(num_batches));
  SimSkill next = skill;
  next.recall_base = std::clamp(skill.recall_base + gain * (q - skill.recall_base), 0.0, 1.0);
  next.localization_noise =
      std::max(0.0, skill.localization_noise + gain * (kNoiseTargetScale * (1.0 - q) - skill.localization_noise));
  next.false_positive_rate = std::max(
      0.0, skill.false_positive_rate + gain * (kFalsePositiveTargetScale * (1.0 - q) - skill.false_positive_rate));
  return next;
}

// ---------------------------------------------------------------------------
// Plugin process

struct SimPluginOptions {
  std::vector<std::filesystem::path> truth_paths;
  SimSkill initial_skill;
  std::uint64_t seed = 0;
  /// Test hook: terminate abruptly on the k-th train request (1-based).
  std::optional<int> fail_on_train;
  /// Test hook: block on the k-th train request until the host process goes
  /// away (or two minutes pass), then exit.
  std::optional<int> stall_on_train;
};

class SimPlugin {
 public:
  explicit SimPlugin(SimPluginOptions options) : options_(std::move(options)), skill_(options_.initial_skill) {
    skill_.validate();
    for (const auto& p : options_.truth_paths) {
      AnnotationSet t = load_annotations(p);
      const std::string ref = t.manifest_ref;
      truth_.insert_or_assign(ref, std::move(t));
    }
    refresh_checkpoint_id();
    log_level_ = parse_log_level(std::getenv(kPluginLogEnv));
  }

  const SimSkill& skill() const { return skill_; }
  const std::string& checkpoint_id() const { return checkpoint_id_; }

  Json handle(const PluginRequest& req) {
    switch (req.command) {
      case Command::kHello:
        log(2, "hello");
        return {{"protocol_version", kProtocolVersion},
                {"capabilities", Json::array({"infer", "train"})},
                {"checkpoint_id", checkpoint_id_},
                {"name", "simplugin"}};
      case Command::kInfer: return infer(req.payload);
      case Command::kTrain: return train(req.payload);
      case Command::kSaveCheckpoint: {
        const std::string path = req.payload.at("path").get<std::string>();
        write_json_file(path, {{"format_version", kFormatVersion},
                               {"checkpoint_id", checkpoint_id_},
                               {"generation", generation_},
                               {"skill", to_json(skill_)}});
        return {{"checkpoint_id", checkpoint_id_}};
      }
      case Command::kLoadCheckpoint: {
        const Json ck = read_json_file(req.payload.at("path").get<std::string>());
        skill_ = skill_from_json(ck.at("skill"));
        generation_ = ck.at("generation").get<int>();
        checkpoint_id_ = ck.at("checkpoint_id").get<std::string>();
        return {{"checkpoint_id", checkpoint_id_}};
      }
      case Command::kShutdown: log(2, "shutdown"); return Json::object();
    }
    throw ProtocolError("unhandled command");
  }

 private:
  Json infer(const Json& payload) {
    const DatasetManifest manifest = load_manifest(payload.at("manifest_path").get<std::string>());
    const std::string output = payload.at("output_path").get<std::string>();
    const double floor = payload.value("score_floor", 0.0);
    static const AnnotationSet kNoFaces;
    auto it = truth_.find(manifest.dataset_id);
    const AnnotationSet& truth = it == truth_.end() ? kNoFaces : it->second;
    DetectionSet dets = sim_infer(manifest, truth, skill_, options_.seed, "simplugin:" + checkpoint_id_);
    std::erase_if(dets.detections, [&](const Detection& d) { return d.score < floor; });
    save_detections(dets, output);
    log(2, "infer " + manifest.dataset_id + ": " + std::to_string(dets.detections.size()) + " detections");
    return {{"detections_path", output}, {"count", dets.detections.size()}};
  }

  Json train(const Json& payload) {
    ++train_calls_;
    if (options_.fail_on_train && train_calls_ == *options_.fail_on_train) {
      log(1, "injected failure on train call " + std::to_string(train_calls_));
      std::_Exit(86);
    }
    if (options_.stall_on_train && train_calls_ == *options_.stall_on_train) {
      log(1, "stalling on train call " + std::to_string(train_calls_));
      const pid_t host = ::getppid();
      const auto give_up = std::chrono::steady_clock::now() + std::chrono::minutes(2);
      while (::getppid() == host && std::chrono::steady_clock::now() < give_up) {
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      std::_Exit(87);
    }
    const AnnotationSet labels = load_annotations(payload.at("annotations_path").get<std::string>());
    const std::int64_t batches = payload.at("num_batches").get<std::int64_t>();
    auto it = truth_.find(labels.manifest_ref);
    if (it == truth_.end()) {
      throw ReferentialError("no ground truth loaded for dataset '" + labels.manifest_ref + "'");
    }
    skill_ = sim_train(skill_, labels, it->second, batches);
    ++generation_;
    refresh_checkpoint_id();
    log(2, "train: q=" + std::to_string(label_quality(labels, it->second)) +
               " recall=" + std::to_string(skill_.recall_base));
    return {{"checkpoint_id", checkpoint_id_}};
  }

  void refresh_checkpoint_id() {
    char buf[64];
    std::snprintf(buf, sizeof buf, "sim-g%d-%016llx", generation_,
                  static_cast<unsigned long long>(fnv1a(to_json(skill_).dump())));
    checkpoint_id_ = buf;
  }

  static int parse_log_level(const char* v) {
    if (v == nullptr) return 1;
    const std::string s(v);
    if (s == "off") return 0;
    if (s == "info") return 2;
    if (s == "debug") return 3;
    return 1;
  }

  void log(int level, const std::string& msg) const {
    if (level <= log_level_) std::cerr << "[simplugin] " << msg << "\n";
  }

  SimPluginOptions options_;
  SimSkill skill_;
  std::map<std::string, AnnotationSet> truth_;
  int generation_ = 0;
  int train_calls_ = 0;
  int log_level_ = 1;
  std::string checkpoint_id_;
};

/// Plugin process entry point; returns the exit code.
inline int run_sim_plugin(const SimPluginOptions& options, std::istream& in = std::cin, std::ostream& out = std::cout) {
  SimPlugin plugin(options);
  serve_requests(in, out, [&](const PluginRequest& r) { return plugin.handle(r); });
  return 0;
}

}  // namespace selfdistill::sim
