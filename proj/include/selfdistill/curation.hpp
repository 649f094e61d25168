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
// Unlabeled-set curation from pose-estimator output. Frames are bucketed by
// detected person count (1, 2, 3, 4+) and the best-scoring frames of each
// bucket are kept, so the training pool covers crowded and sparse scenes.
#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "selfdistill/core_types.hpp"
#include "selfdistill/io_formats.hpp"

namespace selfdistill {

inline constexpr int kPersonBuckets = 4;

struct CurationConfig {
  int per_bucket_quota = 5000;
  /// Image ids never selected, e.g. frames overlapping the test set.
  std::unordered_set<ImageId> exclude_image_ids;

  void validate() const {
    if (per_bucket_quota < 1) throw ContractViolation("curation: per_bucket_quota must be >= 1");
  }
};

struct ImageScore {
  int person_count = 0;
  double mean_score = 0.0;

  friend bool operator==(const ImageScore&, const ImageScore&) = default;
};

/// 0-based bucket for a person count >= 1; counts of four or more share the last.
inline int person_bucket(int person_count) { return std::min(person_count, kPersonBuckets) - 1; }

inline ImageScore image_score(std::span<const Skeleton> skeletons) {
  if (skeletons.empty()) throw ContractViolation("image_score: no skeletons for image");
  double sum = 0.0;
  for (const auto& s : skeletons) {
    if (s.image_id != skeletons.front().image_id) {
      throw ContractViolation("image_score: skeletons span images '" + skeletons.front().image_id + "' and '" +
                              s.image_id + "'");
    }
    sum += s.score;
  }
  return {static_cast<int>(skeletons.size()), sum / static_cast<double>(skeletons.size())};
}

/// Selects up to `per_bucket_quota` images per person-count bucket by mean
/// skeleton score (ties: image_id ascending). Output images are ordered by
/// image_id and keep their manifest entries; the dataset id is unchanged.
inline DatasetManifest curate(const DatasetManifest& manifest, std::span<const Skeleton> skeletons,
                              const CurationConfig& config = {}) {
  config.validate();
  const auto index = index_images(manifest);
  std::map<ImageId, std::vector<Skeleton>> by_image;
  for (const auto& s : skeletons) {
    if (!index.contains(s.image_id)) {
      throw ReferentialError("curate: skeleton image_id '" + s.image_id + "' not in manifest '" +
                             manifest.dataset_id + "'");
    }
    by_image[s.image_id].push_back(s);
  }

  struct Candidate {
    ImageId id;
    double score;
  };
  std::array<std::vector<Candidate>, kPersonBuckets> buckets;
  for (const auto& [id, group] : by_image) {
    if (config.exclude_image_ids.contains(id)) continue;
    const ImageScore sc = image_score(group);
    buckets[person_bucket(sc.person_count)].push_back({id, sc.mean_score});
  }

  std::vector<ImageId> selected;
  for (auto& bucket : buckets) {
    std::sort(bucket.begin(), bucket.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.id < b.id;
    });
    const std::size_t take = std::min(bucket.size(), static_cast<std::size_t>(config.per_bucket_quota));
    for (std::size_t i = 0; i < take; ++i) selected.push_back(bucket[i].id);
  }
  std::sort(selected.begin(), selected.end());

  DatasetManifest out;
  out.dataset_id = manifest.dataset_id;
  out.images.reserve(selected.size());
  for (const auto& id : selected) out.images.push_back(*index.at(id));
  return out;
}

}  // namespace selfdistill
