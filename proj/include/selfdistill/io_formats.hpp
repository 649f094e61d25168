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
// COCO-style JSON dialect for manifests, annotation sets, detection sets and
// pose skeletons. Field-level documentation lives in docs/formats.md.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "selfdistill/core_types.hpp"
#include "selfdistill/errors.hpp"

namespace selfdistill {

using Json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

struct ImageEntry {
  ImageId image_id;
  std::string file_path;
  std::int64_t width = 0;
  std::int64_t height = 0;

  friend bool operator==(const ImageEntry&, const ImageEntry&) = default;
};

struct DatasetManifest {
  std::string dataset_id;
  std::vector<ImageEntry> images;

  std::size_t size() const { return images.size(); }
  bool empty() const { return images.empty(); }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

enum class Provenance { kManual, kPseudo };

struct AnnotationSet {
  std::string manifest_ref;
  std::vector<GroundTruthBox> boxes;
  Provenance provenance = Provenance::kManual;
  int iteration = 0;

  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

struct DetectionSet {
  std::string manifest_ref;
  std::vector<Detection> detections;
  std::string producer;

  friend bool operator==(const DetectionSet&, const DetectionSet&) = default;
};

// ---------------------------------------------------------------------------
// Files

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// Writes through a sibling temporary and renames, so readers never observe
/// a half-written file.
inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline Json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ParseError(origin + ": malformed JSON: " + e.what());
  }
}

inline Json read_json_file(const std::filesystem::path& path) {
  return parse_json_text(read_text_file(path), path.string());
}

/// Stable rendering: sorted keys, two-space indent, trailing newline.
inline std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  write_text_file(path, dump_json(j));
}

// ---------------------------------------------------------------------------
// Field access with errors that name the offending record and field.

namespace detail {

inline const Json& require(const Json& obj, const char* field, const std::string& where) {
  if (!obj.is_object()) throw SchemaError(where + ": expected an object");
  auto it = obj.find(field);
  if (it == obj.end()) {
    throw SchemaError(where + ": missing required field '" + field + "'");
  }
  return *it;
}

inline double require_number(const Json& obj, const char* field, const std::string& where) {
  const Json& v = require(obj, field, where);
  if (!v.is_number()) throw SchemaError(where + ": field '" + field + "' must be a number");
  return v.get<double>();
}

inline std::int64_t require_integer(const Json& obj, const char* field, const std::string& where) {
  const Json& v = require(obj, field, where);
  if (!v.is_number_integer()) {
    throw SchemaError(where + ": field '" + field + "' must be an integer");
  }
  return v.get<std::int64_t>();
}

inline std::string require_string(const Json& obj, const char* field, const std::string& where) {
  const Json& v = require(obj, field, where);
  if (!v.is_string()) throw SchemaError(where + ": field '" + field + "' must be a string");
  return v.get<std::string>();
}

inline const Json& require_array(const Json& obj, const char* field, const std::string& where) {
  const Json& v = require(obj, field, where);
  if (!v.is_array()) throw SchemaError(where + ": field '" + field + "' must be an array");
  return v;
}

inline void check_version(const Json& root, const std::string& where) {
  const std::int64_t version = require_integer(root, "format_version", where);
  if (version != kFormatVersion) {
    throw SchemaError(where + ": unsupported format_version " + std::to_string(version));
  }
}

inline BBox parse_bbox(const Json& obj, const std::string& where) {
  const Json& arr = require(obj, "bbox", where);
  if (!arr.is_array() || arr.size() != 4) {
    throw SchemaError(where + ": field 'bbox' must be an array [x, y, w, h]");
  }
  static constexpr const char* kNames[] = {"x", "y", "width", "height"};
  double v[4];
  for (std::size_t i = 0; i < 4; ++i) {
    if (!arr[i].is_number()) {
      throw SchemaError(where + ": bbox " + kNames[i] + " must be a number");
    }
    v[i] = arr[i].get<double>();
    if (!std::isfinite(v[i])) throw SchemaError(where + ": bbox " + kNames[i] + " must be finite");
  }
  if (!(v[2] > 0.0)) throw SchemaError(where + ": bbox width must be > 0");
  if (!(v[3] > 0.0)) throw SchemaError(where + ": bbox height must be > 0");
  return {v[0], v[1], v[2], v[3]};
}

inline Json bbox_json(const BBox& b) { return Json::array({b.x, b.y, b.w, b.h}); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Manifests

inline Json to_json(const DatasetManifest& m) {
  Json images = Json::array();
  for (const auto& im : m.images) {
    images.push_back({{"image_id", im.image_id},
                      {"file_path", im.file_path},
                      {"width", im.width},
                      {"height", im.height}});
  }
  return {{"format_version", kFormatVersion}, {"dataset_id", m.dataset_id}, {"images", images}};
}

inline DatasetManifest manifest_from_json(const Json& root, const std::string& origin) {
  detail::check_version(root, origin);
  DatasetManifest m;
  m.dataset_id = detail::require_string(root, "dataset_id", origin);
  const Json& images = detail::require_array(root, "images", origin);
  std::unordered_set<ImageId> seen;
  m.images.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string where = origin + ": images[" + std::to_string(i) + "]";
    ImageEntry e;
    e.image_id = detail::require_string(images[i], "image_id", where);
    e.file_path = detail::require_string(images[i], "file_path", where);
    e.width = detail::require_integer(images[i], "width", where);
    e.height = detail::require_integer(images[i], "height", where);
    if (e.width <= 0) throw SchemaError(where + ": width must be > 0");
    if (e.height <= 0) throw SchemaError(where + ": height must be > 0");
    if (!seen.insert(e.image_id).second) {
      throw SchemaError(where + ": duplicate image_id '" + e.image_id + "'");
    }
    m.images.push_back(std::move(e));
  }
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  return manifest_from_json(read_json_file(path), path.string());
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  write_json_file(path, to_json(m));
}

inline std::unordered_map<ImageId, const ImageEntry*> index_images(const DatasetManifest& m) {
  std::unordered_map<ImageId, const ImageEntry*> out;
  out.reserve(m.images.size());
  for (const auto& e : m.images) out.emplace(e.image_id, &e);
  return out;
}

// ---------------------------------------------------------------------------
// Annotation sets

inline const char* to_string(Provenance p) { return p == Provenance::kPseudo ? "pseudo" : "manual"; }

/// Orders boxes by (image_id, annotation_id), the on-disk order.
inline void sort_canonical(AnnotationSet& set) {
  std::stable_sort(set.boxes.begin(), set.boxes.end(),
                   [](const GroundTruthBox& a, const GroundTruthBox& b) {
                     if (a.image_id != b.image_id) return a.image_id < b.image_id;
                     return a.annotation_id < b.annotation_id;
                   });
}

inline Json to_json(const AnnotationSet& set) {
  AnnotationSet sorted = set;
  sort_canonical(sorted);
  Json boxes = Json::array();
  for (const auto& b : sorted.boxes) {
    boxes.push_back({{"annotation_id", b.annotation_id},
                     {"image_id", b.image_id},
                     {"bbox", detail::bbox_json(b.box)}});
  }
  return {{"format_version", kFormatVersion},
          {"manifest_ref", set.manifest_ref},
          {"provenance", to_string(set.provenance)},
          {"iteration", set.iteration},
          {"annotations", boxes}};
}

inline AnnotationSet annotations_from_json(const Json& root, const std::string& origin) {
  detail::check_version(root, origin);
  AnnotationSet set;
  set.manifest_ref = detail::require_string(root, "manifest_ref", origin);
  const std::string prov = detail::require_string(root, "provenance", origin);
  if (prov == "manual") {
    set.provenance = Provenance::kManual;
  } else if (prov == "pseudo") {
    set.provenance = Provenance::kPseudo;
  } else {
    throw SchemaError(origin + ": provenance must be 'manual' or 'pseudo'");
  }
  const std::int64_t iteration = detail::require_integer(root, "iteration", origin);
  if (iteration < 0) throw SchemaError(origin + ": iteration must be >= 0");
  set.iteration = static_cast<int>(iteration);

  const Json& anns = detail::require_array(root, "annotations", origin);
  std::unordered_set<std::int64_t> ids;
  set.boxes.reserve(anns.size());
  for (std::size_t i = 0; i < anns.size(); ++i) {
    const std::string where = origin + ": annotations[" + std::to_string(i) + "]";
    GroundTruthBox b;
    b.annotation_id = detail::require_integer(anns[i], "annotation_id", where);
    b.image_id = detail::require_string(anns[i], "image_id", where);
    b.box = detail::parse_bbox(anns[i], where);
    if (!ids.insert(b.annotation_id).second) {
      throw SchemaError(where + ": duplicate annotation_id " + std::to_string(b.annotation_id));
    }
    set.boxes.push_back(std::move(b));
  }
  sort_canonical(set);
  return set;
}

/// Throws ReferentialError if the set names another dataset or an image that
/// the manifest does not contain.
inline void check_references(const AnnotationSet& set, const DatasetManifest& manifest) {
  if (set.manifest_ref != manifest.dataset_id) {
    throw ReferentialError("annotation set references dataset '" + set.manifest_ref +
                           "' but manifest is '" + manifest.dataset_id + "'");
  }
  const auto index = index_images(manifest);
  for (const auto& b : set.boxes) {
    if (!index.contains(b.image_id)) {
      throw ReferentialError("annotation " + std::to_string(b.annotation_id) + ": image_id '" +
                             b.image_id + "' not in manifest '" + manifest.dataset_id + "'");
    }
  }
}

inline AnnotationSet load_annotations(const std::filesystem::path& path) {
  return annotations_from_json(read_json_file(path), path.string());
}

inline AnnotationSet load_annotations(const std::filesystem::path& path,
                                      const DatasetManifest& manifest) {
  AnnotationSet set = load_annotations(path);
  check_references(set, manifest);
  return set;
}

inline void save_annotations(const AnnotationSet& set, const std::filesystem::path& path) {
  write_json_file(path, to_json(set));
}

// ---------------------------------------------------------------------------
// Detection sets. Detection order is significant (score tie-break) and is
// preserved as written.

inline Json to_json(const DetectionSet& set) {
  Json dets = Json::array();
  for (const auto& d : set.detections) {
    dets.push_back({{"image_id", d.image_id}, {"bbox", detail::bbox_json(d.box)}, {"score", d.score}});
  }
  return {{"format_version", kFormatVersion},
          {"manifest_ref", set.manifest_ref},
          {"producer", set.producer},
          {"detections", dets}};
}

inline DetectionSet detections_from_json(const Json& root, const std::string& origin) {
  detail::check_version(root, origin);
  DetectionSet set;
  set.manifest_ref = detail::require_string(root, "manifest_ref", origin);
  set.producer = detail::require_string(root, "producer", origin);
  const Json& dets = detail::require_array(root, "detections", origin);
  set.detections.reserve(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const std::string where = origin + ": detections[" + std::to_string(i) + "]";
    Detection d;
    d.image_id = detail::require_string(dets[i], "image_id", where);
    d.box = detail::parse_bbox(dets[i], where);
    d.score = detail::require_number(dets[i], "score", where);
    if (!in_unit_interval(d.score)) throw SchemaError(where + ": score must be in [0, 1]");
    set.detections.push_back(std::move(d));
  }
  return set;
}

inline void check_references(const DetectionSet& set, const DatasetManifest& manifest) {
  if (set.manifest_ref != manifest.dataset_id) {
    throw ReferentialError("detection set references dataset '" + set.manifest_ref +
                           "' but manifest is '" + manifest.dataset_id + "'");
  }
  const auto index = index_images(manifest);
  for (std::size_t i = 0; i < set.detections.size(); ++i) {
    if (!index.contains(set.detections[i].image_id)) {
      throw ReferentialError("detection " + std::to_string(i) + ": image_id '" +
                             set.detections[i].image_id + "' not in manifest '" +
                             manifest.dataset_id + "'");
    }
  }
}

inline DetectionSet load_detections(const std::filesystem::path& path) {
  return detections_from_json(read_json_file(path), path.string());
}

inline DetectionSet load_detections(const std::filesystem::path& path,
                                    const DatasetManifest& manifest) {
  DetectionSet set = load_detections(path);
  check_references(set, manifest);
  return set;
}

inline void save_detections(const DetectionSet& set, const std::filesystem::path& path) {
  write_json_file(path, to_json(set));
}

// ---------------------------------------------------------------------------
// Skeletons. Keypoints are COCO-ordered [x, y, confidence] triples, either as
// a list of triples or as the flat array pose estimators usually emit.

inline Json to_json(const std::vector<Skeleton>& skeletons) {
  // Group by image, first-appearance order.
  std::vector<ImageId> order;
  std::unordered_map<ImageId, Json> per_image;
  for (const auto& s : skeletons) {
    auto [it, inserted] = per_image.try_emplace(s.image_id, Json::array());
    if (inserted) order.push_back(s.image_id);
    Json kps = Json::array();
    for (const auto& k : s.keypoints) kps.push_back(Json::array({k.x, k.y, k.confidence}));
    it->second.push_back({{"score", s.score}, {"keypoints", kps}});
  }
  Json images = Json::array();
  for (const auto& id : order) images.push_back({{"image_id", id}, {"skeletons", per_image[id]}});
  return {{"format_version", kFormatVersion}, {"images", images}};
}

inline std::vector<Skeleton> skeletons_from_json(const Json& root, const std::string& origin) {
  detail::check_version(root, origin);
  std::vector<Skeleton> out;
  const Json& images = detail::require_array(root, "images", origin);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::string where_img = origin + ": images[" + std::to_string(i) + "]";
    const ImageId image_id = detail::require_string(images[i], "image_id", where_img);
    const Json& skels = detail::require_array(images[i], "skeletons", where_img);
    for (std::size_t j = 0; j < skels.size(); ++j) {
      const std::string where = where_img + ".skeletons[" + std::to_string(j) + "]";
      Skeleton s;
      s.image_id = image_id;
      s.score = detail::require_number(skels[j], "score", where);
      if (!in_unit_interval(s.score)) throw SchemaError(where + ": score must be in [0, 1]");
      const Json& kps = detail::require_array(skels[j], "keypoints", where);

      std::vector<std::array<double, 3>> triples;
      const bool flat = !kps.empty() && kps[0].is_number();
      if (flat) {
        if (kps.size() % 3 != 0) {
          throw SchemaError(where + ": flat keypoint array length must be a multiple of 3");
        }
        for (std::size_t k = 0; k < kps.size(); k += 3) {
          for (std::size_t c = 0; c < 3; ++c) {
            if (!kps[k + c].is_number()) throw SchemaError(where + ": keypoints must be numbers");
          }
          triples.push_back({kps[k].get<double>(), kps[k + 1].get<double>(), kps[k + 2].get<double>()});
        }
      } else {
        for (std::size_t k = 0; k < kps.size(); ++k) {
          const Json& t = kps[k];
          if (!t.is_array() || t.size() != 3 || !t[0].is_number() || !t[1].is_number() ||
              !t[2].is_number()) {
            throw SchemaError(where + ": keypoints[" + std::to_string(k) +
                              "] must be [x, y, confidence]");
          }
          triples.push_back({t[0].get<double>(), t[1].get<double>(), t[2].get<double>()});
        }
      }
      for (std::size_t k = 0; k < triples.size(); ++k) {
        const auto& [x, y, c] = triples[k];
        if (!std::isfinite(x) || !std::isfinite(y)) {
          throw SchemaError(where + ": keypoint " + std::to_string(k) + " has non-finite position");
        }
        if (!in_unit_interval(c)) {
          throw SchemaError(where + ": keypoint " + std::to_string(k) + " confidence must be in [0, 1]");
        }
        s.keypoints.push_back({keypoint_kind_from_coco_index(k), x, y, c});
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

inline std::vector<Skeleton> load_skeletons(const std::filesystem::path& path) {
  return skeletons_from_json(read_json_file(path), path.string());
}

inline void save_skeletons(const std::vector<Skeleton>& skeletons, const std::filesystem::path& path) {
  write_json_file(path, to_json(skeletons));
}

}  // namespace selfdistill
