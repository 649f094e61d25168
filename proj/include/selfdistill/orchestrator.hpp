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
// Iterative self-training driver. One iteration is
//   1. infer on the unlabeled manifest with the current checkpoint,
//   2. keep the best floor(multiplier * N) detections as pseudo-labels,
//   3. fine-tune for batches_before_relabel batches,
// optionally followed by evaluation on a held-out annotated set. With
// relabel = false, steps 1-2 run once and every iteration retrains on the
// first iteration's labels.
//
// Workdir layout:
//   state.json                     pipeline state, rewritten after every step
//   inputs/                        copies of the unlabeled and eval inputs
//   baseline/checkpoint.json       initial checkpoint (+ eval files)
//   iter_<k>/detections.json       raw detections (relabel iterations only)
//   iter_<k>/pseudo_labels.json    filtered labels
//   iter_<k>/filter_stats.json
//   iter_<k>/train_manifest.json
//   iter_<k>/checkpoint.json
//   iter_<k>/eval_detections.json, metrics.json   when evaluating
//   iter_<k>/record.json
#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfdistill/errors.hpp"
#include "selfdistill/io_formats.hpp"
#include "selfdistill/metrics.hpp"
#include "selfdistill/plugin_protocol.hpp"
#include "selfdistill/pseudolabel.hpp"

namespace selfdistill {

/// Resume refused because the supplied configuration differs from the one
/// the workdir was started with.
class ConfigMismatch : public DataError {
 public:
  using DataError::DataError;
};

struct PipelineConfig {
  int iterations = 4;
  std::int64_t batches_before_relabel = 2000;
  FilterConfig filter;
  bool relabel = true;
  bool eval_every_iteration = false;
  std::int64_t seed = 0;
  double score_floor = 0.0;
  /// Forwarded to the plugin's train command untouched.
  Json hyperparameters = Json::object();
  MetricsConfig metrics;
  std::filesystem::path workdir = "selftrain";

  void validate() const {
    if (iterations < 0) throw ContractViolation("pipeline: iterations must be >= 0");
    if (batches_before_relabel < 1) throw ContractViolation("pipeline: batches_before_relabel must be >= 1");
    if (!in_unit_interval(score_floor)) throw ContractViolation("pipeline: score_floor must be in [0, 1]");
    if (!hyperparameters.is_object()) throw ContractViolation("pipeline: hyperparameters must be an object");
    filter.validate();
    metrics.validate();
  }
};

/// The workdir is deliberately absent: it locates the run, it does not
/// define it.
inline Json to_json(const PipelineConfig& c) {
  return {{"iterations", c.iterations},
          {"batches_before_relabel", c.batches_before_relabel},
          {"filter", to_json(c.filter)},
          {"relabel", c.relabel},
          {"eval_every_iteration", c.eval_every_iteration},
          {"seed", c.seed},
          {"score_floor", c.score_floor},
          {"hyperparameters", c.hyperparameters},
          {"metrics",
           {{"iou_thresholds", c.metrics.iou_thresholds},
            {"recall_points", c.metrics.recall_points},
            {"max_detections_per_image", c.metrics.max_detections_per_image}}}};
}

/// Overlays the fields present in `j` onto `base`. Unknown keys are errors so
/// that typos in config files do not pass silently.
inline PipelineConfig apply_config_json(PipelineConfig base, const Json& j) {
  if (!j.is_object()) throw SchemaError("pipeline config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "iterations") {
        base.iterations = v.get<int>();
      } else if (key == "batches_before_relabel") {
        base.batches_before_relabel = v.get<std::int64_t>();
      } else if (key == "relabel") {
        base.relabel = v.get<bool>();
      } else if (key == "eval_every_iteration") {
        base.eval_every_iteration = v.get<bool>();
      } else if (key == "seed") {
        base.seed = v.get<std::int64_t>();
      } else if (key == "score_floor") {
        base.score_floor = v.get<double>();
      } else if (key == "hyperparameters") {
        base.hyperparameters = v;
      } else if (key == "workdir") {
        base.workdir = v.get<std::string>();
      } else if (key == "filter") {
        for (const auto& [fk, fv] : v.items()) {
          if (fk == "multiplier") {
            base.filter.multiplier = fv.get<double>();
          } else if (fk == "minimum_score") {
            base.filter.minimum_score = fv.is_null() ? std::nullopt : std::optional<double>(fv.get<double>());
          } else if (fk == "keep_empty_images") {
            base.filter.keep_empty_images = fv.get<bool>();
          } else {
            throw SchemaError("pipeline config: unknown filter field '" + fk + "'");
          }
        }
      } else if (key == "metrics") {
        for (const auto& [mk, mv] : v.items()) {
          if (mk == "iou_thresholds") {
            base.metrics.iou_thresholds = mv.get<std::vector<double>>();
          } else if (mk == "recall_points") {
            base.metrics.recall_points = mv.get<int>();
          } else if (mk == "max_detections_per_image") {
            base.metrics.max_detections_per_image = mv.get<int>();
          } else {
            throw SchemaError("pipeline config: unknown metrics field '" + mk + "'");
          }
        }
      } else {
        throw SchemaError("pipeline config: unknown field '" + key + "'");
      }
    }
  } catch (const Json::exception& e) {
    throw SchemaError(std::string("pipeline config: ") + e.what());
  }
  return base;
}

inline std::string config_digest(const PipelineConfig& c) {
  // FNV-1a over the canonical (key-sorted, compact) JSON rendering.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct IterationRecord {
  int index = 0;
  std::string checkpoint_id;
  /// False for iterations that reused frozen labels.
  bool inferred = false;
  std::size_t n_detections = 0;
  std::size_t n_pseudo_labels = 0;
  std::optional<double> score_cutoff;
  std::optional<MetricsReport> metrics;
  /// Not part of equality.
  double wall_time = 0.0;

  friend bool operator==(const IterationRecord& a, const IterationRecord& b) {
    return a.index == b.index && a.checkpoint_id == b.checkpoint_id && a.inferred == b.inferred &&
           a.n_detections == b.n_detections && a.n_pseudo_labels == b.n_pseudo_labels &&
           a.score_cutoff == b.score_cutoff && a.metrics == b.metrics;
  }
};

inline Json to_json(const IterationRecord& r) {
  return {{"index", r.index},
          {"checkpoint_id", r.checkpoint_id},
          {"inferred", r.inferred},
          {"n_detections", r.n_detections},
          {"n_pseudo_labels", r.n_pseudo_labels},
          {"score_cutoff", r.score_cutoff ? Json(*r.score_cutoff) : Json(nullptr)},
          {"metrics", r.metrics ? to_json(*r.metrics) : Json(nullptr)},
          {"wall_time", r.wall_time}};
}

inline IterationRecord record_from_json(const Json& j) {
  IterationRecord r;
  r.index = j.at("index").get<int>();
  r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
  r.inferred = j.at("inferred").get<bool>();
  r.n_detections = j.at("n_detections").get<std::size_t>();
  r.n_pseudo_labels = j.at("n_pseudo_labels").get<std::size_t>();
  if (!j.at("score_cutoff").is_null()) r.score_cutoff = j["score_cutoff"].get<double>();
  if (!j.at("metrics").is_null()) r.metrics = report_from_json(j["metrics"]);
  r.wall_time = j.at("wall_time").get<double>();
  return r;
}

enum class PipelineStatus { kRunning, kCompleted, kFailed };

inline const char* to_string(PipelineStatus s) {
  switch (s) {
    case PipelineStatus::kRunning: return "running";
    case PipelineStatus::kCompleted: return "completed";
    case PipelineStatus::kFailed: return "failed";
  }
  return "?";
}

struct PipelineState {
  PipelineConfig config;
  std::string digest;
  PipelineStatus status = PipelineStatus::kRunning;
  std::string baseline_checkpoint_id;
  std::string current_checkpoint_id;
  std::optional<MetricsReport> baseline_metrics;
  bool has_eval_set = false;
  std::vector<IterationRecord> completed;
  /// Iteration and step in flight, for diagnostics; empty between iterations.
  std::optional<std::pair<int, std::string>> in_progress;
  std::string last_error;
};

inline std::filesystem::path state_path(const std::filesystem::path& workdir) { return workdir / "state.json"; }

inline std::filesystem::path iteration_dir(const std::filesystem::path& workdir, int k) {
  return workdir / ("iter_" + std::to_string(k));
}

inline Json to_json(const PipelineState& s) {
  Json completed = Json::array();
  for (const auto& r : s.completed) completed.push_back(to_json(r));
  return {{"format_version", kFormatVersion},
          {"config", to_json(s.config)},
          {"config_digest", s.digest},
          {"status", to_string(s.status)},
          {"baseline_checkpoint_id", s.baseline_checkpoint_id},
          {"current_checkpoint_id", s.current_checkpoint_id},
          {"baseline_metrics", s.baseline_metrics ? to_json(*s.baseline_metrics) : Json(nullptr)},
          {"has_eval_set", s.has_eval_set},
          {"completed", completed},
          {"in_progress",
           s.in_progress ? Json{{"iteration", s.in_progress->first}, {"step", s.in_progress->second}} : Json(nullptr)},
          {"last_error", s.last_error}};
}

inline PipelineState load_pipeline_state(const std::filesystem::path& workdir) {
  const auto path = state_path(workdir);
  if (!std::filesystem::exists(path)) throw IoError("no pipeline state at " + path.string());
  const Json j = read_json_file(path);
  PipelineState s;
  try {
    if (j.at("format_version").get<int>() != kFormatVersion) throw SchemaError("unsupported format_version");
    s.config = apply_config_json(PipelineConfig{}, j.at("config"));
    s.config.workdir = workdir;
    s.digest = j.at("config_digest").get<std::string>();
    const std::string status = j.at("status").get<std::string>();
    if (status == "running") {
      s.status = PipelineStatus::kRunning;
    } else if (status == "completed") {
      s.status = PipelineStatus::kCompleted;
    } else if (status == "failed") {
      s.status = PipelineStatus::kFailed;
    } else {
      throw SchemaError("unknown status '" + status + "'");
    }
    s.baseline_checkpoint_id = j.at("baseline_checkpoint_id").get<std::string>();
    s.current_checkpoint_id = j.at("current_checkpoint_id").get<std::string>();
    if (!j.at("baseline_metrics").is_null()) s.baseline_metrics = report_from_json(j["baseline_metrics"]);
    s.has_eval_set = j.at("has_eval_set").get<bool>();
    for (const auto& r : j.at("completed")) s.completed.push_back(record_from_json(r));
    if (j.contains("in_progress") && !j["in_progress"].is_null()) {
      const Json& ip = j["in_progress"];
      s.in_progress = std::make_pair(ip.at("iteration").get<int>(), ip.at("step").get<std::string>());
    }
    s.last_error = j.value("last_error", "");
  } catch (const Json::exception& e) {
    throw SchemaError(path.string() + ": corrupt pipeline state: " + e.what());
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": corrupt pipeline state: " + e.what());
  }
  if (s.digest != config_digest(s.config)) {
    throw SchemaError(path.string() + ": corrupt pipeline state: config does not match its digest");
  }
  for (std::size_t i = 0; i < s.completed.size(); ++i) {
    if (s.completed[i].index != static_cast<int>(i) + 1) {
      throw SchemaError(path.string() + ": corrupt pipeline state: iteration records are not contiguous");
    }
  }
  return s;
}

/// Called after each finished iteration (and once for the baseline with
/// index 0 when evaluating).
using ProgressFn = std::function<void(const IterationRecord&)>;

namespace detail {

class PipelineRunner {
 public:
  PipelineRunner(PipelineState& state, PluginSession& session, ProgressFn progress)
      : state_(state), session_(session), progress_(std::move(progress)), workdir_(state.config.workdir) {}

  void run_remaining() {
    const PipelineConfig& cfg = state_.config;
    try {
      if (cfg.eval_every_iteration && !state_.baseline_metrics) evaluate_baseline();
      for (int k = static_cast<int>(state_.completed.size()) + 1; k <= cfg.iterations; ++k) run_iteration(k);
      state_.status = PipelineStatus::kCompleted;
      state_.in_progress.reset();
      save();
    } catch (const std::exception& e) {
      state_.status = PipelineStatus::kFailed;
      state_.last_error = e.what();
      try {
        save();
      } catch (...) {
      }
      throw;
    }
  }

  void save() { write_json_file(state_path(workdir_), to_json(state_)); }

 private:
  using Clock = std::chrono::steady_clock;

  std::filesystem::path inputs(const char* name) const { return std::filesystem::absolute(workdir_ / "inputs" / name); }

  void step(int k, const char* name) {
    state_.in_progress = std::make_pair(k, std::string(name));
    save();
  }

  MetricsReport evaluate_on(const std::filesystem::path& dir) {
    const auto det_path = std::filesystem::absolute(dir / "eval_detections.json");
    const auto result = session_.infer(inputs("eval_manifest.json"), det_path, 0.0);
    const AnnotationSet truth = load_annotations(inputs("eval_annotations.json"));
    const MetricsReport report = evaluate(result.detections, truth, state_.config.metrics);
    write_json_file(dir / "metrics.json", to_json(report));
    return report;
  }

  void evaluate_baseline() {
    if (!state_.has_eval_set) throw ContractViolation("pipeline: eval_every_iteration requires an eval set");
    step(0, "evaluate");
    state_.baseline_metrics = evaluate_on(workdir_ / "baseline");
    state_.in_progress.reset();
    save();
    if (progress_) {
      IterationRecord r;
      r.checkpoint_id = state_.baseline_checkpoint_id;
      r.metrics = state_.baseline_metrics;
      progress_(r);
    }
  }

  void run_iteration(int k) {
    const PipelineConfig& cfg = state_.config;
    const auto start = Clock::now();
    const auto dir = std::filesystem::absolute(iteration_dir(workdir_, k));
    std::filesystem::create_directories(dir);
    IterationRecord rec;
    rec.index = k;

    const auto labels_path = dir / "pseudo_labels.json";
    const auto train_manifest_path = dir / "train_manifest.json";
    if (cfg.relabel || k == 1) {
      step(k, "infer");
      const auto inferred = session_.infer(inputs("unlabeled_manifest.json"), dir / "detections.json", cfg.score_floor);
      rec.inferred = true;
      rec.n_detections = inferred.detections.detections.size();

      step(k, "filter");
      const DatasetManifest unlabeled = load_manifest(inputs("unlabeled_manifest.json"));
      const auto filtered = filter_top_detections(inferred.detections, unlabeled, cfg.filter, k);
      save_annotations(filtered.labels, labels_path);
      save_manifest(filtered.training_manifest, train_manifest_path);
      write_json_file(dir / "filter_stats.json", to_json(filtered.stats));
      rec.n_pseudo_labels = filtered.stats.n_selected;
      rec.score_cutoff = filtered.stats.score_cutoff;
    } else {
      step(k, "reuse_labels");
      const auto first = std::filesystem::absolute(iteration_dir(workdir_, 1));
      for (const char* name : {"pseudo_labels.json", "train_manifest.json", "filter_stats.json"}) {
        std::filesystem::copy_file(first / name, dir / name, std::filesystem::copy_options::overwrite_existing);
      }
      rec.n_pseudo_labels = state_.completed.front().n_pseudo_labels;
      rec.score_cutoff = state_.completed.front().score_cutoff;
    }

    step(k, "train");
    Json hp = cfg.hyperparameters;
    hp["seed"] = cfg.seed;
    hp["iteration"] = k;
    session_.train({labels_path, train_manifest_path, cfg.batches_before_relabel, hp});
    rec.checkpoint_id = session_.save_checkpoint(dir / "checkpoint.json");
    state_.current_checkpoint_id = rec.checkpoint_id;

    if (cfg.eval_every_iteration) {
      step(k, "evaluate");
      rec.metrics = evaluate_on(dir);
    }
    rec.wall_time = std::chrono::duration<double>(Clock::now() - start).count();
    write_json_file(dir / "record.json", to_json(rec));
    state_.completed.push_back(rec);
    state_.in_progress.reset();
    save();
    if (progress_) progress_(rec);
  }

  PipelineState& state_;
  PluginSession& session_;
  ProgressFn progress_;
  std::filesystem::path workdir_;
};

}  // namespace detail

/// Starts a fresh run in `config.workdir`, which must not already hold one.
inline std::vector<IterationRecord> run_pipeline(const PipelineConfig& config, PluginSession& session,
                                                 const DatasetManifest& unlabeled,
                                                 const std::optional<std::pair<DatasetManifest, AnnotationSet>>& eval_set,
                                                 ProgressFn progress = {}) {
  config.validate();
  if (unlabeled.empty()) throw ContractViolation("pipeline: unlabeled manifest has no images");
  if (config.eval_every_iteration && !eval_set) {
    throw ContractViolation("pipeline: eval_every_iteration requires an eval set");
  }
  if (eval_set) check_references(eval_set->second, eval_set->first);
  const auto& workdir = config.workdir;
  if (std::filesystem::exists(state_path(workdir))) {
    throw ContractViolation("pipeline: " + workdir.string() + " already holds a run; resume it or pick a new workdir");
  }
  std::filesystem::create_directories(workdir / "inputs");
  std::filesystem::create_directories(workdir / "baseline");
  save_manifest(unlabeled, workdir / "inputs" / "unlabeled_manifest.json");
  if (eval_set) {
    save_manifest(eval_set->first, workdir / "inputs" / "eval_manifest.json");
    save_annotations(eval_set->second, workdir / "inputs" / "eval_annotations.json");
  }

  PipelineState state;
  state.config = config;
  state.digest = config_digest(config);
  state.has_eval_set = eval_set.has_value();
  state.baseline_checkpoint_id = session.save_checkpoint(std::filesystem::absolute(workdir / "baseline" / "checkpoint.json"));
  state.current_checkpoint_id = state.baseline_checkpoint_id;

  detail::PipelineRunner runner(state, session, std::move(progress));
  runner.save();
  runner.run_remaining();
  return state.completed;
}

/// Continues a running or failed run from its first incomplete iteration.
/// A completed run is returned as is without touching `session` (which may
/// then be null). When `expected` is given, its digest must match the one
/// recorded at start.
inline std::vector<IterationRecord> resume_pipeline(const std::filesystem::path& workdir, PluginSession* session,
                                                    const std::optional<PipelineConfig>& expected = std::nullopt,
                                                    ProgressFn progress = {}) {
  PipelineState state = load_pipeline_state(workdir);
  if (expected && config_digest(*expected) != state.digest) {
    throw ConfigMismatch("pipeline: configuration differs from the one " + workdir.string() +
                         " was started with (digest " + config_digest(*expected) + " vs " + state.digest + ")");
  }
  if (state.status == PipelineStatus::kCompleted) return state.completed;
  if (session == nullptr) throw ContractViolation("pipeline: resuming an unfinished run needs a plugin session");

  const auto checkpoint = state.completed.empty()
                              ? workdir / "baseline" / "checkpoint.json"
                              : iteration_dir(workdir, state.completed.back().index) / "checkpoint.json";
  state.current_checkpoint_id = session->load_checkpoint(std::filesystem::absolute(checkpoint));
  state.status = PipelineStatus::kRunning;
  state.last_error.clear();

  detail::PipelineRunner runner(state, *session, std::move(progress));
  runner.save();
  runner.run_remaining();
  return state.completed;
}

/// Table with one row per iteration plus the baseline, in the four-metric
/// column layout.
inline std::string format_iteration_table(const PipelineState& state) {
  std::string out;
  char buf[256];
  const std::string range = range_label(state.config.metrics.iou_thresholds);
  std::snprintf(buf, sizeof buf, "%-9s  %8s  %14s  %8s  %8s  %14s  %s\n", "iteration", "batches",
                ("AP(" + range + ")").c_str(), "AP(0.3)", "AP(0.5)", ("AR(" + range + ")").c_str(), "checkpoint");
  out += buf;
  auto row = [&](const std::string& label, const std::string& batches, const std::optional<MetricsReport>& m,
                 const std::string& ck) {
    if (m) {
      std::snprintf(buf, sizeof buf, "%-9s  %8s  %14.3f  %8.3f  %8.3f  %14.3f  %s\n", label.c_str(), batches.c_str(),
                    m->ap_averaged, m->ap(0.3), m->ap(0.5), m->ar_averaged, ck.c_str());
    } else {
      std::snprintf(buf, sizeof buf, "%-9s  %8s  %14s  %8s  %8s  %14s  %s\n", label.c_str(), batches.c_str(), "-", "-",
                    "-", "-", ck.c_str());
    }
    out += buf;
  };
  row("baseline", "-", state.baseline_metrics, state.baseline_checkpoint_id);
  for (const auto& r : state.completed) {
    row(std::to_string(r.index), std::to_string(state.config.batches_before_relabel), r.metrics, r.checkpoint_id);
  }
  return out;
}

}  // namespace selfdistill
