#include "pgl/align.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pgl {

std::optional<std::pair<OverlapBox, OverlapBox>> compute_overlap(const TransformRecord& rec1,
                                                                 const TransformRecord& rec2) {
  OverlapBox o1, o2;
  for (int a = 0; a < 3; ++a) {
    const double lo = std::max(rec1.crop_start[a], rec2.crop_start[a]);
    const double hi = std::min(rec1.crop_end[a], rec2.crop_end[a]);
    if (!(lo < hi)) {
      return std::nullopt;
    }
    o1.start[a] = lo - rec1.crop_start[a];
    o1.end[a] = hi - rec1.crop_start[a];
    o2.start[a] = lo - rec2.crop_start[a];
    o2.end[a] = hi - rec2.crop_start[a];
  }
  return std::make_pair(o1, o2);
}

FeatureRoI to_feature_coords(const OverlapBox& box, const TransformRecord& rec, Ivec3 output_stride,
                             Ivec3 feature_shape) {
  FeatureRoI roi;
  roi.feature_shape = feature_shape;
  const Dvec3 scale = rec.resize_scale();
  for (int a = 0; a < 3; ++a) {
    if (output_stride[a] < 1) {
      throw ConfigError(std::string("to_feature_coords: invalid output stride on ") + kAxisNames[a] +
                        " axis");
    }
    const double stride = static_cast<double>(output_stride[a]);
    double start = box.start[a] * scale[a] / stride;
    double end = box.end[a] * scale[a] / stride;
    // Exact math keeps r inside [0, feature_shape]; clamp the last-ulp spill
    // from the scale division.
    start = std::clamp(start, 0.0, static_cast<double>(feature_shape[a]));
    end = std::clamp(end, 0.0, static_cast<double>(feature_shape[a]));
    roi.start[a] = start;
    roi.end[a] = end;
    if (end - start < 1.0) {
      roi.degenerate = true;  // thinner than one feature cell; still sampled
    }
  }
  return roi;
}

template <class T>
Tensor<T> extract_aligned(const Tensor<T>& f, const FeatureRoI& roi, Ivec3 out_shape,
                          std::int64_t samples_per_bin) {
  const std::vector<SampleRoi> rois(static_cast<std::size_t>(f.dim(0)),
                                    SampleRoi{roi.start, roi.end});
  return roi_align3d(f, rois, out_shape, samples_per_bin);
}

template <class T>
std::optional<AlignedPair<T>> align_pair(const Tensor<T>& f_online, const Tensor<T>& f_target,
                                         const TransformRecord& rec_online,
                                         const TransformRecord& rec_target, Ivec3 output_stride,
                                         const AlignConfig& cfg) {
  std::vector<TransformRecord> on{rec_online};
  std::vector<TransformRecord> tg{rec_target};
  AlignedBatch<T> batch = align_batch(f_online, f_target, on, tg, output_stride, cfg);
  if (batch.kept.empty()) {
    return std::nullopt;
  }
  return AlignedPair<T>{batch.online, batch.target};
}

template <class T>
AlignedBatch<T> align_batch(const Tensor<T>& f_online, const Tensor<T>& f_target,
                            std::span<const TransformRecord> recs_online,
                            std::span<const TransformRecord> recs_target, Ivec3 output_stride,
                            const AlignConfig& cfg) {
  if (f_online.rank() != 5 || f_target.rank() != 5) {
    throw ShapeError("align_batch: expected NCDHW feature maps");
  }
  const std::int64_t n = f_online.dim(0);
  if (static_cast<std::int64_t>(recs_online.size()) != n ||
      static_cast<std::int64_t>(recs_target.size()) != n) {
    throw ShapeError("align_batch: record count does not match batch size");
  }

  AlignedBatch<T> result;

  Tensor<T> on = f_online;
  Tensor<T> tg = f_target;
  if (cfg.use_flipalign) {
    std::vector<Bvec3> masks_on, masks_tg;
    for (std::int64_t i = 0; i < n; ++i) {
      masks_on.push_back(recs_online[static_cast<std::size_t>(i)].flip);
      masks_tg.push_back(recs_target[static_cast<std::size_t>(i)].flip);
    }
    on = flip_spatial_per_sample(on, masks_on);
    tg = flip_spatial_per_sample(tg, masks_tg);
  }

  if (!cfg.use_csalign) {
    result.kept.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      result.kept[static_cast<std::size_t>(i)] = i;
    }
    if (!cfg.use_flipalign) {
      // Neither prior in use: global consistency on pooled features.
      result.online = global_avg_pool(on);
      result.target = global_avg_pool(tg);
    } else {
      result.online = on;
      result.target = tg;
    }
    return result;
  }

  const Ivec3 feat_on{on.dim(2), on.dim(3), on.dim(4)};
  const Ivec3 feat_tg{tg.dim(2), tg.dim(3), tg.dim(4)};
  std::vector<SampleRoi> rois_on, rois_tg;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& rec_on = recs_online[static_cast<std::size_t>(i)];
    const auto& rec_tg = recs_target[static_cast<std::size_t>(i)];
    const auto overlap = compute_overlap(rec_on, rec_tg);
    if (!overlap) {
      continue;
    }
    const FeatureRoI roi_on = to_feature_coords(overlap->first, rec_on, output_stride, feat_on);
    const FeatureRoI roi_tg = to_feature_coords(overlap->second, rec_tg, output_stride, feat_tg);
    rois_on.push_back({roi_on.start, roi_on.end});
    rois_tg.push_back({roi_tg.start, roi_tg.end});
    result.kept.push_back(i);
  }
  if (result.kept.empty()) {
    return result;
  }
  if (static_cast<std::int64_t>(result.kept.size()) != n) {
    on = select_batch(on, result.kept);
    tg = select_batch(tg, result.kept);
  }
  result.online = roi_align3d(on, rois_on, feat_on, cfg.samples_per_bin);
  result.target = roi_align3d(tg, rois_tg, feat_tg, cfg.samples_per_bin);
  return result;
}

#define PGL_INSTANTIATE_ALIGN(T)                                                                 \
  template Tensor<T> extract_aligned<T>(const Tensor<T>&, const FeatureRoI&, Ivec3,             \
                                        std::int64_t);                                          \
  template std::optional<AlignedPair<T>> align_pair<T>(                                         \
      const Tensor<T>&, const Tensor<T>&, const TransformRecord&, const TransformRecord&,       \
      Ivec3, const AlignConfig&);                                                               \
  template AlignedBatch<T> align_batch<T>(const Tensor<T>&, const Tensor<T>&,                   \
                                          std::span<const TransformRecord>,                     \
                                          std::span<const TransformRecord>, Ivec3,              \
                                          const AlignConfig&);

PGL_INSTANTIATE_ALIGN(float)
PGL_INSTANTIATE_ALIGN(double)

#undef PGL_INSTANTIATE_ALIGN

}  // namespace pgl
