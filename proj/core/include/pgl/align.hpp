#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "pgl/augment.hpp"
#include "pgl/common.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

/// Shared region of two crops expressed in one view's crop space
/// (half-open, voxel units).
struct OverlapBox {
  Dvec3 start{0, 0, 0};
  Dvec3 end{0, 0, 0};
};

/// The overlap box mapped into feature-map cells (continuous, half-open).
struct FeatureRoI {
  Dvec3 start{0, 0, 0};
  Dvec3 end{0, 0, 0};
  Ivec3 feature_shape{0, 0, 0};
  bool degenerate = false;  // extent below one feature cell on some axis
};

struct AlignConfig {
  bool use_flipalign = true;
  bool use_csalign = true;
  std::int64_t samples_per_bin = 2;
};

/// Undo a view's flips on its feature map (coordinate bookkeeping; features
/// are not assumed exactly flip-equivariant).
template <class T>
Tensor<T> flip_align(const Tensor<T>& f, Bvec3 view_flip_mask) {
  return flip_spatial(f, view_flip_mask);
}

/// Overlap of the two crop boxes in each view's own crop frame:
/// o1 = [max(z1_0, z2_0), min(z1_1, z2_1)) - z1_0 per axis, and symmetrically
/// for view 2. Empty intersection yields nullopt. Exact on the crop grid.
std::optional<std::pair<OverlapBox, OverlapBox>> compute_overlap(const TransformRecord& rec1,
                                                                 const TransformRecord& rec2);

/// Maps a crop-space overlap box into feature cells: r = o * resize_scale /
/// output_stride per axis, kept continuous. The resize scale converts crop
/// space to view space before the stride division.
FeatureRoI to_feature_coords(const OverlapBox& box, const TransformRecord& rec, Ivec3 output_stride,
                             Ivec3 feature_shape);

/// RoIAlign-and-resize, fused: partitions the ROI into out_shape bins and
/// averages samples_per_bin^3 trilinear samples per bin. Differentiable with
/// respect to f.
template <class T>
Tensor<T> extract_aligned(const Tensor<T>& f, const FeatureRoI& roi, Ivec3 out_shape,
                          std::int64_t samples_per_bin);

template <class T>
struct AlignedPair {
  Tensor<T> online_aligned;
  Tensor<T> target_aligned;
};

/// Full aligner for one record pair: flip-align both feature maps, compute
/// the overlap, map it to feature coordinates, and extract both sides at the
/// feature map's own spatial shape. nullopt when the overlap is empty.
template <class T>
std::optional<AlignedPair<T>> align_pair(const Tensor<T>& f_online, const Tensor<T>& f_target,
                                         const TransformRecord& rec_online,
                                         const TransformRecord& rec_target, Ivec3 output_stride,
                                         const AlignConfig& cfg = {});

template <class T>
struct AlignedBatch {
  Tensor<T> online;
  Tensor<T> target;
  std::vector<std::int64_t> kept;  // batch indices that had a usable overlap
};

/// Batched aligner with per-sample records. Arms with CS alignment disabled
/// keep the dense feature maps; with flip alignment also disabled the
/// features collapse to global average pooling (the global-consistency
/// fallback).
template <class T>
AlignedBatch<T> align_batch(const Tensor<T>& f_online, const Tensor<T>& f_target,
                            std::span<const TransformRecord> recs_online,
                            std::span<const TransformRecord> recs_target, Ivec3 output_stride,
                            const AlignConfig& cfg = {});

}  // namespace pgl
