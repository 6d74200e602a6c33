#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pgl/data.hpp"
#include "pgl/networks.hpp"

namespace pgl {

/// Per-foreground-class overlap metrics on hard predictions:
/// Dice = 2|A^B| / (|A| + |B|), IoU = |A^B| / |AuB|. A class absent from
/// both prediction and ground truth scores 1.0 on both metrics.
struct ClassMetrics {
  std::int64_t cls = 0;
  double dice = 1.0;
  double iou = 1.0;
  std::int64_t gt_voxels = 0;
  std::int64_t pred_voxels = 0;
  std::int64_t intersection = 0;
};

struct EvalReport {
  std::vector<ClassMetrics> per_class;  // foreground classes 1..C-1
  double mean_dice = 0.0;
  double mean_iou = 0.0;
};

/// Dataset-level metrics over concatenated label maps.
EvalReport metrics_from_labels(std::span<const std::uint8_t> predicted,
                               std::span<const std::uint8_t> ground_truth,
                               std::int64_t num_classes);

/// Sliding-window inference at the training window size: logits from
/// edge-shifted windows are averaged per voxel and argmaxed. Eval-mode batch
/// norm throughout.
std::vector<std::uint8_t> predict_labels(ParamStore& seg, const NetworkConfig& net,
                                         const Volume& volume, Ivec3 window);

/// Full-volume evaluation of a labeled set.
EvalReport evaluate_volumes(ParamStore& seg, const NetworkConfig& net,
                            std::span<const Volume> volumes, Ivec3 window);

}  // namespace pgl
