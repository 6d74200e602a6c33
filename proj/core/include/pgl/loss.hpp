#pragma once

#include <cstdint>

#include "pgl/common.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

struct LossConfig {
  double l2_eps = 1e-12;       // zero-vector guard inside the channel normalization
  double dice_epsilon = 1e-5;  // Dice smoothing factor, inside the voxel sum
  std::int64_t num_classes = 4;
  bool normalize_channels = false;  // ablation: include C in the denominator
};

/// Local consistency: l2-normalize both feature maps along channels, sum the
/// squared differences over every element, and divide by N*D*H*W (channel
/// count deliberately excluded from the denominator). The caller wraps the
/// target features in stop_gradient. Per-position values lie in [0, 4].
template <class T>
Tensor<T> local_consistency(const Tensor<T>& online_pred, const Tensor<T>& target_feat,
                            const LossConfig& cfg = {});

/// Binary Dice + binary cross-entropy on probabilities:
///   [1 - 2*sum(p*y) / sum(p + y + eps)] - E[y log p + (1-y) log(1-p)]
/// with logs clamped at 1e-7. The smoothing term sits inside the voxel sum,
/// so an empty-foreground pair evaluates the Dice term to exactly 1.
template <class T>
Tensor<T> dice_ce_binary(const Tensor<T>& pred_prob, const Tensor<T>& gt, double epsilon);

/// Mean over classes of the per-class Dice term minus E[y^n log p^n], for a
/// softmax probability field and a one-hot ground truth.
template <class T>
Tensor<T> dice_ce_multiclass(const Tensor<T>& pred_prob, const Tensor<T>& gt_onehot,
                             double epsilon, std::int64_t num_classes);

}  // namespace pgl
