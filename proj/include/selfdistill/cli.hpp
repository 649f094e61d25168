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
// `selfdistill` command line. Each subcommand parses flags, calls one library
// operation and writes its result.
//
// Exit codes: 0 success, 1 usage error, 2 data or validation error,
// 3 plugin or protocol error.
#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "CLI11.hpp"
#include "selfdistill/curation.hpp"
#include "selfdistill/errors.hpp"
#include "selfdistill/io_formats.hpp"
#include "selfdistill/keypoints.hpp"
#include "selfdistill/metrics.hpp"
#include "selfdistill/orchestrator.hpp"
#include "selfdistill/plugin_protocol.hpp"
#include "selfdistill/pseudolabel.hpp"
#include "selfdistill/sim_detector.hpp"

namespace selfdistill::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitPlugin = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

/// "a:b" -> (a, b); a single value means a:a.
template <typename T>
std::pair<T, T> parse_range(const std::string& text, const char* flag) {
  const auto colon = text.find(':');
  try {
    if (colon == std::string::npos) {
      const T v = static_cast<T>(std::stod(text));
      return {v, v};
    }
    return {static_cast<T>(std::stod(text.substr(0, colon))), static_cast<T>(std::stod(text.substr(colon + 1)))};
  } catch (const std::exception&) {
    throw UsageError(std::string(flag) + ": expected MIN:MAX, got '" + text + "'");
  }
}

inline std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw UsageError("--thresholds: not a number: '" + item + "'");
    }
  }
  return out;
}

/// One id per line, or a JSON array of strings.
inline std::unordered_set<ImageId> read_id_list(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  std::unordered_set<ImageId> ids;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    const Json j = parse_json_text(text, path.string());
    for (const auto& v : j) {
      if (!v.is_string()) throw SchemaError(path.string() + ": id list must contain strings");
      ids.insert(v.get<std::string>());
    }
    return ids;
  }
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) ids.insert(line);
  }
  return ids;
}

inline void emit_json(std::ostream& out, const Json& j) { out << j.dump(2) << "\n"; }

}  // namespace detail

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

inline int main(int argc, const char* const* argv, Streams io = {}) {
  CLI::App app{"Self-training toolkit for face detection: metrics, pseudo-labels and the retraining loop.",
               "selfdistill"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for all subcommands");

  // eval -------------------------------------------------------------------
  struct {
    std::string det, gt, manifest, report, thresholds;
    int max_dets = 100;
    bool json = false, curves = false;
  } ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score detections against ground truth (AP/AR table)");
  eval_cmd->add_option("--det", ev.det, "DetectionSet JSON")->required();
  eval_cmd->add_option("--gt", ev.gt, "AnnotationSet JSON")->required();
  eval_cmd->add_option("--manifest", ev.manifest, "Manifest to check image references against");
  eval_cmd->add_option("--thresholds", ev.thresholds, "Comma-separated IoU thresholds (default 0.30:0.05:0.95)");
  eval_cmd->add_option("--max-dets", ev.max_dets, "Detections kept per image")->capture_default_str();
  eval_cmd->add_option("--report", ev.report, "Also write the JSON report to this file");
  eval_cmd->add_flag("--pr-curves", ev.curves, "Include interpolated precision curves in JSON output");
  eval_cmd->add_flag("--json", ev.json, "Print the JSON report instead of the table");

  // facesfrompose ----------------------------------------------------------
  struct {
    std::string skeletons, out, manifest, dataset_id;
    double box_size = 30.0, min_conf = 0.0;
    bool json = false;
  } fp;
  auto* faces_cmd = app.add_subcommand("facesfrompose", "Convert pose skeletons into fixed-size face detections");
  faces_cmd->add_option("--skeletons", fp.skeletons, "Skeleton JSON")->required();
  faces_cmd->add_option("--out", fp.out, "Output DetectionSet JSON")->required();
  faces_cmd->add_option("--manifest", fp.manifest, "Manifest supplying image bounds and dataset id");
  faces_cmd->add_option("--dataset-id", fp.dataset_id, "Dataset id when no manifest is given");
  faces_cmd->add_option("--box-size", fp.box_size, "Face box side in pixels")->capture_default_str();
  faces_cmd->add_option("--min-confidence", fp.min_conf, "Face keypoints must exceed this confidence")
      ->capture_default_str();
  faces_cmd->add_flag("--json", fp.json, "Print a JSON summary");

  // curate -----------------------------------------------------------------
  struct {
    std::string manifest, skeletons, out, exclude;
    int quota = 5000;
    bool json = false;
  } cu;
  auto* curate_cmd = app.add_subcommand("curate", "Select frames per person-count bucket by skeleton score");
  curate_cmd->add_option("--manifest", cu.manifest, "Frame manifest")->required();
  curate_cmd->add_option("--skeletons", cu.skeletons, "Skeleton JSON for the frames")->required();
  curate_cmd->add_option("--out", cu.out, "Curated manifest output")->required();
  curate_cmd->add_option("--quota", cu.quota, "Images kept per bucket")->capture_default_str();
  curate_cmd->add_option("--exclude-ids", cu.exclude, "File of image ids never to select");
  curate_cmd->add_flag("--json", cu.json, "Print a JSON summary");

  // filter -----------------------------------------------------------------
  struct {
    std::string detections, manifest, out, stats, train_manifest;
    double multiplier = 2.0;
    std::optional<double> min_score;
    int iteration = 0;
    bool drop_empty = false, json = false;
  } fi;
  auto* filter_cmd = app.add_subcommand("filter", "Keep the best floor(multiplier*N) detections as pseudo-labels");
  filter_cmd->add_option("--detections", fi.detections, "DetectionSet JSON")->required();
  filter_cmd->add_option("--manifest", fi.manifest, "Manifest of the N unlabeled images")->required();
  filter_cmd->add_option("--out", fi.out, "Output AnnotationSet JSON")->required();
  filter_cmd->add_option("--stats", fi.stats, "Write selection statistics JSON here");
  filter_cmd->add_option("--multiplier", fi.multiplier, "Labels kept per image on average")->capture_default_str();
  filter_cmd->add_option("--min-score", fi.min_score, "Drop selected labels scoring below this");
  filter_cmd->add_option("--iteration", fi.iteration, "Iteration number stamped on the labels")->capture_default_str();
  filter_cmd->add_flag("--drop-empty-images", fi.drop_empty, "Exclude label-free images from the training manifest");
  filter_cmd->add_option("--train-manifest", fi.train_manifest, "Write the training manifest here");
  filter_cmd->add_flag("--json", fi.json, "Print statistics as JSON");

  // selftrain --------------------------------------------------------------
  struct {
    std::string config, plugin, unlabeled, eval_manifest, eval_annotations, workdir;
    bool resume = false, json = false;
    int iterations = 0;
    std::int64_t batches = 0, seed = 0;
    double multiplier = 0.0, plugin_timeout = 600.0, train_timeout = 86400.0;
    bool relabel = true, eval_every = false;
  } st;
  auto* selftrain_cmd = app.add_subcommand("selftrain", "Run or resume the iterative self-training loop");
  selftrain_cmd->add_option("--config", st.config, "Pipeline config JSON (flags override it)");
  selftrain_cmd->add_option("--plugin", st.plugin, "Detector plugin command line");
  selftrain_cmd->add_option("--unlabeled", st.unlabeled, "Unlabeled manifest");
  selftrain_cmd->add_option("--eval-manifest", st.eval_manifest, "Held-out manifest");
  selftrain_cmd->add_option("--eval-annotations", st.eval_annotations, "Held-out annotations");
  selftrain_cmd->add_option("--workdir", st.workdir, "Run directory");
  selftrain_cmd->add_flag("--resume", st.resume, "Continue the run in --workdir");
  auto* o_iter = selftrain_cmd->add_option("--iterations", st.iterations, "Relabel iterations");
  auto* o_batches = selftrain_cmd->add_option("--batches", st.batches, "Training batches before relabelling");
  auto* o_relabel = selftrain_cmd->add_flag("--relabel,!--no-relabel", st.relabel,
                                            "Regenerate labels every iteration (default) or freeze the first ones");
  auto* o_eval = selftrain_cmd->add_flag("--eval-every-iteration", st.eval_every, "Evaluate after every iteration");
  auto* o_mult = selftrain_cmd->add_option("--multiplier", st.multiplier, "Filter multiplier");
  auto* o_seed = selftrain_cmd->add_option("--seed", st.seed, "Seed forwarded to the plugin");
  selftrain_cmd->add_option("--plugin-timeout", st.plugin_timeout, "Seconds allowed per non-train request")
      ->capture_default_str();
  selftrain_cmd->add_option("--train-timeout", st.train_timeout, "Seconds allowed per train request")
      ->capture_default_str();
  selftrain_cmd->add_flag("--json", st.json, "Print the final result as JSON");

  // simgen -----------------------------------------------------------------
  struct {
    std::uint64_t seed = 0;
    int images = 100;
    std::string faces = "1:4", image_size = "640x480", face_size = "20:40", dataset_id = "sim";
    std::string manifest_out, annotations_out;
    bool json = false;
  } sg;
  auto* simgen_cmd = app.add_subcommand("simgen", "Generate a synthetic manifest and its ground truth");
  simgen_cmd->add_option("--seed", sg.seed)->capture_default_str();
  simgen_cmd->add_option("--images", sg.images)->capture_default_str();
  simgen_cmd->add_option("--faces", sg.faces, "Faces per image, MIN:MAX")->capture_default_str();
  simgen_cmd->add_option("--image-size", sg.image_size, "WIDTHxHEIGHT")->capture_default_str();
  simgen_cmd->add_option("--face-size", sg.face_size, "Face side in pixels, MIN:MAX")->capture_default_str();
  simgen_cmd->add_option("--dataset-id", sg.dataset_id)->capture_default_str();
  simgen_cmd->add_option("--manifest-out", sg.manifest_out)->required();
  simgen_cmd->add_option("--annotations-out", sg.annotations_out)->required();
  simgen_cmd->add_flag("--json", sg.json, "Print a JSON summary");

  // simplugin --------------------------------------------------------------
  struct {
    std::vector<std::string> truth;
    std::string skill;
    double recall = 0.7, noise = 3.0, fp_rate = 0.3;
    std::uint64_t seed = 0;
    std::optional<int> fail_on_train, stall_on_train;
    bool json = false;
  } sp;
  auto* simplugin_cmd = app.add_subcommand("simplugin", "Serve the simulated detector over the plugin protocol");
  simplugin_cmd->add_option("--truth", sp.truth, "Ground-truth AnnotationSet(s) of the simulated worlds");
  simplugin_cmd->add_option("--skill", sp.skill, "Initial skill JSON (overrides --recall/--noise/--fp)");
  simplugin_cmd->add_option("--recall", sp.recall)->capture_default_str();
  simplugin_cmd->add_option("--noise", sp.noise, "Corner jitter in pixels")->capture_default_str();
  simplugin_cmd->add_option("--fp", sp.fp_rate, "Spurious boxes per image")->capture_default_str();
  simplugin_cmd->add_option("--seed", sp.seed)->capture_default_str();
  simplugin_cmd->add_option("--fail-on-train", sp.fail_on_train, "Exit abruptly on the k-th train request (testing)");
  simplugin_cmd->add_option("--stall-on-train", sp.stall_on_train,
                            "Block on the k-th train request until the host exits (testing)");
  simplugin_cmd->add_flag("--json", sp.json, "No effect; protocol output is always JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, io.out, io.err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (eval_cmd->parsed()) {
      MetricsConfig cfg;
      if (!ev.thresholds.empty()) cfg.iou_thresholds = detail::parse_thresholds(ev.thresholds);
      cfg.max_detections_per_image = ev.max_dets;
      cfg.keep_pr_curves = ev.curves;
      try {
        cfg.validate();
      } catch (const ContractViolation& e) {
        throw UsageError(e.what());
      }
      const DetectionSet dets = load_detections(ev.det);
      const AnnotationSet gt = load_annotations(ev.gt);
      if (!ev.manifest.empty()) {
        const DatasetManifest m = load_manifest(ev.manifest);
        check_references(dets, m);
        check_references(gt, m);
      }
      const MetricsReport report = evaluate(dets, gt, cfg);
      if (!ev.report.empty()) write_json_file(ev.report, to_json(report));
      if (ev.json) {
        detail::emit_json(io.out, to_json(report));
      } else {
        io.out << format_report_table(report);
      }
    } else if (faces_cmd->parsed()) {
      const auto skeletons = load_skeletons(fp.skeletons);
      FaceBoxParams params;
      params.box_size = fp.box_size;
      params.min_confidence = fp.min_conf;
      if (!(params.box_size > 0.0)) throw UsageError("--box-size must be > 0");
      DetectionSet out;
      if (!fp.manifest.empty()) {
        out = face_boxes_from_skeleton_set(skeletons, params, load_manifest(fp.manifest));
      } else {
        out = face_boxes_from_skeleton_set(skeletons, params, fp.dataset_id);
      }
      save_detections(out, fp.out);
      const Json summary = {{"skeletons", skeletons.size()}, {"detections", out.detections.size()},
                            {"output", fp.out}, {"producer", out.producer}};
      if (fp.json) {
        detail::emit_json(io.out, summary);
      } else {
        io.out << "wrote " << out.detections.size() << " face boxes from " << skeletons.size() << " skeletons to "
               << fp.out << "\n";
      }
    } else if (curate_cmd->parsed()) {
      CurationConfig cfg;
      cfg.per_bucket_quota = cu.quota;
      if (cu.quota < 1) throw UsageError("--quota must be >= 1");
      if (!cu.exclude.empty()) cfg.exclude_image_ids = detail::read_id_list(cu.exclude);
      const DatasetManifest manifest = load_manifest(cu.manifest);
      const auto skeletons = load_skeletons(cu.skeletons);
      const DatasetManifest curated = curate(manifest, skeletons, cfg);
      save_manifest(curated, cu.out);
      const Json summary = {{"input_images", manifest.size()}, {"selected_images", curated.size()},
                            {"quota", cu.quota}, {"output", cu.out}};
      if (cu.json) {
        detail::emit_json(io.out, summary);
      } else {
        io.out << "selected " << curated.size() << " of " << manifest.size() << " images into " << cu.out << "\n";
      }
    } else if (filter_cmd->parsed()) {
      FilterConfig cfg;
      cfg.multiplier = fi.multiplier;
      cfg.minimum_score = fi.min_score;
      cfg.keep_empty_images = !fi.drop_empty;
      try {
        cfg.validate();
      } catch (const ContractViolation& e) {
        throw UsageError(e.what());
      }
      const DatasetManifest manifest = load_manifest(fi.manifest);
      const DetectionSet dets = load_detections(fi.detections);
      const auto result = filter_top_detections(dets, manifest, cfg, fi.iteration);
      save_annotations(result.labels, fi.out);
      if (!fi.stats.empty()) write_json_file(fi.stats, to_json(result.stats));
      if (!fi.train_manifest.empty()) save_manifest(result.training_manifest, fi.train_manifest);
      if (fi.json) {
        detail::emit_json(io.out, to_json(result.stats));
      } else {
        io.out << "kept " << result.stats.n_selected << " of " << result.stats.n_input_detections
               << " detections over " << result.stats.n_images << " images";
        if (result.stats.score_cutoff) io.out << " (score cutoff " << *result.stats.score_cutoff << ")";
        io.out << "\n";
      }
    } else if (selftrain_cmd->parsed()) {
      PipelineConfig cfg;
      if (!st.config.empty()) cfg = apply_config_json(cfg, read_json_file(st.config));
      if (o_iter->count()) cfg.iterations = st.iterations;
      if (o_batches->count()) cfg.batches_before_relabel = st.batches;
      if (o_relabel->count()) cfg.relabel = st.relabel;
      if (o_eval->count()) cfg.eval_every_iteration = st.eval_every;
      if (o_mult->count()) cfg.filter.multiplier = st.multiplier;
      if (o_seed->count()) cfg.seed = st.seed;
      if (!st.workdir.empty()) cfg.workdir = st.workdir;
      if (!st.eval_manifest.empty() && !o_eval->count() && st.config.empty()) cfg.eval_every_iteration = true;
      try {
        cfg.validate();
      } catch (const ContractViolation& e) {
        throw UsageError(e.what());
      }

      SessionOptions options;
      options.request_timeout = std::chrono::milliseconds(static_cast<long long>(st.plugin_timeout * 1000));
      options.handshake_timeout = std::min(options.request_timeout, std::chrono::milliseconds(30'000));
      options.train_timeout = std::chrono::milliseconds(static_cast<long long>(st.train_timeout * 1000));

      auto progress = [&](const IterationRecord& r) {
        std::ostream& os = st.json ? io.err : io.out;
        char buf[512];
        if (r.index == 0) {
          std::snprintf(buf, sizeof buf, "baseline: checkpoint=%s AP(0.5)=%.4f\n", r.checkpoint_id.c_str(),
                        r.metrics ? r.metrics->ap(0.5) : 0.0);
        } else {
          std::snprintf(buf, sizeof buf, "iteration %d/%d: detections=%zu pseudo_labels=%zu cutoff=%s checkpoint=%s%s time=%.2fs\n",
                        r.index, cfg.iterations, r.n_detections, r.n_pseudo_labels,
                        r.score_cutoff ? std::to_string(*r.score_cutoff).c_str() : "none", r.checkpoint_id.c_str(),
                        r.metrics ? (" AP(0.5)=" + std::to_string(r.metrics->ap(0.5))).c_str() : "", r.wall_time);
        }
        os << buf << std::flush;
      };

      const std::filesystem::path workdir = cfg.workdir;
      if (st.resume) {
        const PipelineState before = load_pipeline_state(workdir);
        std::optional<PipelineConfig> expected;
        if (!st.config.empty()) expected = cfg;
        std::unique_ptr<PluginSession> session;
        if (before.status != PipelineStatus::kCompleted) {
          if (st.plugin.empty()) throw UsageError("--plugin is required to resume an unfinished run");
          session = std::make_unique<PluginSession>(shell_command(st.plugin), options);
        }
        resume_pipeline(workdir, session.get(), expected, progress);
        if (session) session->shutdown();
      } else {
        if (st.plugin.empty()) throw UsageError("--plugin is required");
        if (st.unlabeled.empty()) throw UsageError("--unlabeled is required");
        if (st.eval_manifest.empty() != st.eval_annotations.empty()) {
          throw UsageError("--eval-manifest and --eval-annotations go together");
        }
        const DatasetManifest unlabeled = load_manifest(st.unlabeled);
        std::optional<std::pair<DatasetManifest, AnnotationSet>> eval_set;
        if (!st.eval_manifest.empty()) {
          DatasetManifest em = load_manifest(st.eval_manifest);
          AnnotationSet ea = load_annotations(st.eval_annotations, em);
          eval_set.emplace(std::move(em), std::move(ea));
        }
        PluginSession session(shell_command(st.plugin), options);
        run_pipeline(cfg, session, unlabeled, eval_set, progress);
        session.shutdown();
      }
      const PipelineState final_state = load_pipeline_state(workdir);
      if (st.json) {
        detail::emit_json(io.out, to_json(final_state));
      } else {
        io.out << format_iteration_table(final_state);
      }
    } else if (simgen_cmd->parsed()) {
      sim::SimWorld world;
      world.seed = sg.seed;
      world.n_images = sg.images;
      world.dataset_id = sg.dataset_id;
      std::tie(world.faces_min, world.faces_max) = detail::parse_range<int>(sg.faces, "--faces");
      std::tie(world.face_size_min, world.face_size_max) = detail::parse_range<double>(sg.face_size, "--face-size");
      const auto x = sg.image_size.find('x');
      if (x == std::string::npos) throw UsageError("--image-size: expected WIDTHxHEIGHT");
      try {
        world.image_width = std::stoi(sg.image_size.substr(0, x));
        world.image_height = std::stoi(sg.image_size.substr(x + 1));
      } catch (const std::exception&) {
        throw UsageError("--image-size: expected WIDTHxHEIGHT");
      }
      const auto generated = sim::generate_world(world);
      save_manifest(generated.manifest, sg.manifest_out);
      save_annotations(generated.truth, sg.annotations_out);
      const Json summary = {{"images", generated.manifest.size()}, {"faces", generated.truth.boxes.size()},
                            {"dataset_id", world.dataset_id}};
      if (sg.json) {
        detail::emit_json(io.out, summary);
      } else {
        io.out << "generated " << generated.manifest.size() << " images with " << generated.truth.boxes.size()
               << " faces\n";
      }
    } else if (simplugin_cmd->parsed()) {
      sim::SimPluginOptions options;
      for (const auto& t : sp.truth) options.truth_paths.emplace_back(t);
      if (!sp.skill.empty()) {
        options.initial_skill = sim::skill_from_json(read_json_file(sp.skill));
      } else {
        options.initial_skill.recall_base = sp.recall;
        options.initial_skill.localization_noise = sp.noise;
        options.initial_skill.false_positive_rate = sp.fp_rate;
      }
      options.seed = sp.seed;
      options.fail_on_train = sp.fail_on_train;
      options.stall_on_train = sp.stall_on_train;
      return sim::run_sim_plugin(options);
    }
  } catch (const UsageError& e) {
    io.err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const PluginError& e) {
    io.err << "plugin error: " << e.what() << "\n";
    return kExitPlugin;
  } catch (const std::exception& e) {
    io.err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace selfdistill::cli
