#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "pgl/common.hpp"
#include "pgl/rng.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

struct AugmentConfig {
  double min_scale = 1.1;
  double max_scale = 1.4;
  double min_overlap = 0.10;  // of each crop's own volume
  double flip_prob = 0.5;
  double noise_prob = 0.1;
  double noise_var_max = 0.1;
  double blur_prob = 0.2;
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 1.0;
  double brightness_prob = 0.5;
  double brightness_min = 0.75;
  double brightness_max = 1.25;
  double gamma_prob = 0.5;
  double gamma_min = 0.7;
  double gamma_max = 1.5;
  bool intensity = true;  // master switch for the intensity stages
  int rejection_budget = 100;
};

/// Crop coordinates are quantized to this grid so every box coordinate is an
/// exactly representable double and overlap arithmetic downstream is exact.
inline constexpr std::int64_t kCropGrid = 1024;

/// Complete record of the transform that produced one view: the prior that
/// the aligner consumes later.
struct TransformRecord {
  Dvec3 crop_start{0, 0, 0};  // source-patch voxel units, half-open box
  Dvec3 crop_end{0, 0, 0};
  Ivec3 view_shape{0, 0, 0};
  Bvec3 flip{false, false, false};
  std::optional<double> noise_variance;
  std::optional<double> blur_sigma;
  std::optional<double> brightness;
  std::optional<double> gamma;
  std::vector<double> rng_draws;  // raw uniform draws behind this record

  Dvec3 crop_shape() const {
    return {crop_end[0] - crop_start[0], crop_end[1] - crop_start[1], crop_end[2] - crop_start[2]};
  }
  Dvec3 resize_scale() const {  // view / crop per axis
    const Dvec3 c = crop_shape();
    return {static_cast<double>(view_shape[0]) / c[0], static_cast<double>(view_shape[1]) / c[1],
            static_cast<double>(view_shape[2]) / c[2]};
  }
};

struct ViewPair {
  Tensor32 view1, view2;  // DHW tensors of view_shape
  TransformRecord rec1, rec2;
};

/// Fraction of `a`'s crop volume covered by the intersection with `b`'s crop.
/// Exact on the coordinate grid.
double overlap_fraction(const TransformRecord& a, const TransformRecord& b);

/// Draws two crop boxes with per-axis extents scale ~ U[min_scale, max_scale]
/// relative to the view and per-axis flips ~ Bernoulli(flip_prob) per view.
/// Positions are rejection-sampled (scales stay fixed) until the mutual
/// overlap reaches min_overlap of both crops; after rejection_budget failed
/// attempts the boxes fall back to two concentric crops, whose overlap is
/// always sufficient for any scales in [1.1, 1.4].
std::pair<TransformRecord, TransformRecord> sample_crop_pair(Ivec3 source_shape, Ivec3 view_shape,
                                                             Rng& rng,
                                                             const AugmentConfig& cfg = {});

/// Extracts the record's crop box from a DHW patch and trilinearly resizes it
/// to the view shape. An integer-aligned box at scale exactly 1 reproduces
/// the voxels bit-exactly.
Tensor32 apply_crop_resize(const Tensor32& patch, const TransformRecord& rec);

/// Reverses axis i of a DHW view iff flip_mask[i].
Tensor32 apply_flip(const Tensor32& view, Bvec3 flip_mask);

/// Intensity stages in order: additive Gaussian noise, Gaussian blur,
/// brightness/contrast multiply (clipped to the pre-op range), and the gamma
/// transform through a per-view [0, 1] min-max reparameterization. Applied
/// parameters are written into `rec`.
Tensor32 intensity_pipeline(const Tensor32& view, Rng& rng, TransformRecord& rec,
                            const AugmentConfig& cfg = {});

/// Full per-view pipeline (crop+resize, flip, intensity) for both views of
/// one source patch.
ViewPair make_view_pair(const Tensor32& patch, Ivec3 view_shape, Rng& rng,
                        const AugmentConfig& cfg = {});

}  // namespace pgl
