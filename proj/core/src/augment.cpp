#include "pgl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pgl {

namespace {

// Grid helpers: coordinates live on multiples of 1/kCropGrid, represented as
// exact doubles. All box arithmetic happens on the integer grid.
std::int64_t to_grid_round(double v) { return std::llround(v * static_cast<double>(kCropGrid)); }
std::int64_t to_grid_ceil(double v) {
  return static_cast<std::int64_t>(std::ceil(v * static_cast<double>(kCropGrid) - 1e-9));
}
std::int64_t to_grid_floor(double v) {
  return static_cast<std::int64_t>(std::floor(v * static_cast<double>(kCropGrid) + 1e-9));
}
double from_grid(std::int64_t g) {
  return static_cast<double>(g) / static_cast<double>(kCropGrid);
}

struct GridBox {
  Ivec3 start, end;  // grid units
};

GridBox record_box(const TransformRecord& rec) {
  GridBox box;
  for (int a = 0; a < 3; ++a) {
    box.start[a] = to_grid_round(rec.crop_start[a]);
    box.end[a] = to_grid_round(rec.crop_end[a]);
  }
  return box;
}

std::int64_t box_volume(const GridBox& box) {
  std::int64_t v = 1;
  for (int a = 0; a < 3; ++a) {
    v *= box.end[a] - box.start[a];
  }
  return v;
}

std::int64_t intersection_volume(const GridBox& a, const GridBox& b) {
  std::int64_t v = 1;
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t lo = std::max(a.start[axis], b.start[axis]);
    const std::int64_t hi = std::min(a.end[axis], b.end[axis]);
    if (hi <= lo) return 0;
    v *= hi - lo;
  }
  return v;
}

double logged_uniform(Rng& rng, double lo, double hi, TransformRecord& rec) {
  const double draw = rng.uniform();
  rec.rng_draws.push_back(draw);
  return lo + (hi - lo) * draw;
}

bool logged_bernoulli(Rng& rng, double p, TransformRecord& rec) {
  const double draw = rng.uniform();
  rec.rng_draws.push_back(draw);
  return draw < p;
}

}  // namespace

double overlap_fraction(const TransformRecord& a, const TransformRecord& b) {
  const GridBox ga = record_box(a);
  const GridBox gb = record_box(b);
  return static_cast<double>(intersection_volume(ga, gb)) / static_cast<double>(box_volume(ga));
}

std::pair<TransformRecord, TransformRecord> sample_crop_pair(Ivec3 source_shape, Ivec3 view_shape,
                                                             Rng& rng, const AugmentConfig& cfg) {
  TransformRecord rec1, rec2;
  rec1.view_shape = view_shape;
  rec2.view_shape = view_shape;

  Ivec3 extent1, extent2;  // grid units
  Ivec3 source_grid;
  for (int a = 0; a < 3; ++a) {
    const double view = static_cast<double>(view_shape[a]);
    const std::int64_t needed = to_grid_ceil(cfg.max_scale * view);
    source_grid[a] = source_shape[a] * kCropGrid;
    if (source_grid[a] < needed) {
      throw ShapeError(std::string("sample_crop_pair: source too small on ") + kAxisNames[a] +
                       " axis (" + std::to_string(source_shape[a]) + " < " +
                       std::to_string(cfg.max_scale) + " x " + std::to_string(view_shape[a]) + ")");
    }
    const std::int64_t lo = to_grid_ceil(cfg.min_scale * view);
    const std::int64_t hi = to_grid_floor(cfg.max_scale * view);
    extent1[a] = std::clamp(to_grid_round(logged_uniform(rng, cfg.min_scale, cfg.max_scale, rec1) * view), lo, hi);
    extent2[a] = std::clamp(to_grid_round(logged_uniform(rng, cfg.min_scale, cfg.max_scale, rec2) * view), lo, hi);
  }

  const auto place = [&](TransformRecord& rec, const Ivec3& extent) {
    for (int a = 0; a < 3; ++a) {
      const std::int64_t room = source_grid[a] - extent[a];
      const double draw = logged_uniform(rng, 0.0, from_grid(room), rec);
      const std::int64_t start = std::clamp<std::int64_t>(to_grid_round(draw), 0, room);
      rec.crop_start[a] = from_grid(start);
      rec.crop_end[a] = from_grid(start + extent[a]);
    }
  };

  bool accepted = false;
  for (int attempt = 0; attempt < cfg.rejection_budget; ++attempt) {
    place(rec1, extent1);
    place(rec2, extent2);
    if (overlap_fraction(rec1, rec2) >= cfg.min_overlap &&
        overlap_fraction(rec2, rec1) >= cfg.min_overlap) {
      accepted = true;
      break;
    }
  }
  if (!accepted) {
    // Concentric fallback: for scales within [1.1, 1.4] the smaller box
    // covers at least (1.1/1.4)^3 ~ 48% of the larger one.
    const auto place_centered = [&](TransformRecord& rec, const Ivec3& extent) {
      for (int a = 0; a < 3; ++a) {
        const std::int64_t start = std::clamp<std::int64_t>((source_grid[a] - extent[a]) / 2, 0,
                                                            source_grid[a] - extent[a]);
        rec.crop_start[a] = from_grid(start);
        rec.crop_end[a] = from_grid(start + extent[a]);
      }
    };
    place_centered(rec1, extent1);
    place_centered(rec2, extent2);
  }

  for (int a = 0; a < 3; ++a) {
    rec1.flip[a] = logged_bernoulli(rng, cfg.flip_prob, rec1);
  }
  for (int a = 0; a < 3; ++a) {
    rec2.flip[a] = logged_bernoulli(rng, cfg.flip_prob, rec2);
  }
  return {rec1, rec2};
}

Tensor32 apply_crop_resize(const Tensor32& patch, const TransformRecord& rec) {
  if (patch.rank() != 3) {
    throw ShapeError("apply_crop_resize: expected a DHW patch, got shape " + shape_str(patch.shape()));
  }
  for (int a = 0; a < 3; ++a) {
    if (rec.crop_start[a] < 0.0 || rec.crop_end[a] > static_cast<double>(patch.dim(a)) ||
        !(rec.crop_start[a] < rec.crop_end[a])) {
      throw ShapeError(std::string("apply_crop_resize: crop box outside patch on ") + kAxisNames[a] +
                       " axis: [" + std::to_string(rec.crop_start[a]) + "," +
                       std::to_string(rec.crop_end[a]) + ") in " + std::to_string(patch.dim(a)));
    }
  }
  const Dvec3 extent = rec.crop_shape();
  Dvec3 step;
  for (int a = 0; a < 3; ++a) {
    step[a] = extent[a] / static_cast<double>(rec.view_shape[a]);
  }
  std::vector<Dvec3> points;
  points.reserve(static_cast<std::size_t>(rec.view_shape[0] * rec.view_shape[1] * rec.view_shape[2]));
  for (std::int64_t d = 0; d < rec.view_shape[0]; ++d) {
    const double sd = rec.crop_start[0] + ((static_cast<double>(d) + 0.5) * step[0] - 0.5);
    for (std::int64_t h = 0; h < rec.view_shape[1]; ++h) {
      const double sh = rec.crop_start[1] + ((static_cast<double>(h) + 0.5) * step[1] - 0.5);
      for (std::int64_t w = 0; w < rec.view_shape[2]; ++w) {
        const double sw = rec.crop_start[2] + ((static_cast<double>(w) + 0.5) * step[2] - 0.5);
        points.push_back({sd, sh, sw});
      }
    }
  }
  Tensor32 wrapped = reshape(patch, {1, 1, patch.dim(0), patch.dim(1), patch.dim(2)});
  Tensor32 sampled = trilinear_sample(wrapped, points);
  return reshape(sampled, {rec.view_shape[0], rec.view_shape[1], rec.view_shape[2]});
}

Tensor32 apply_flip(const Tensor32& view, Bvec3 flip_mask) {
  if (view.rank() != 3) {
    throw ShapeError("apply_flip: expected a DHW view, got shape " + shape_str(view.shape()));
  }
  Tensor32 wrapped = reshape(view, {1, 1, view.dim(0), view.dim(1), view.dim(2)});
  return reshape(flip_spatial(wrapped, flip_mask), view.shape());
}

namespace {

void gaussian_blur_inplace(std::vector<float>& values, Ivec3 dims, double sigma) {
  const std::int64_t radius = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::int64_t i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (auto& w : kernel) {
    w /= sum;
  }

  std::vector<float> scratch(values.size());
  // Separable passes; borders renormalize over the in-range taps, so a
  // constant view stays constant.
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t n = dims[axis];
    const std::int64_t stride = axis == 0 ? dims[1] * dims[2] : (axis == 1 ? dims[2] : 1);
    const std::int64_t lines = dims[0] * dims[1] * dims[2] / n;
    for (std::int64_t line = 0; line < lines; ++line) {
      // Base offset of this line: enumerate all index tuples with axis fixed.
      std::int64_t base;
      if (axis == 0) {
        base = line;  // (h, w) pairs are contiguous in the trailing dims
      } else if (axis == 1) {
        const std::int64_t d = line / dims[2];
        const std::int64_t w = line % dims[2];
        base = d * dims[1] * dims[2] + w;
      } else {
        base = line * dims[2];
      }
      for (std::int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        double weight = 0.0;
        for (std::int64_t k = -radius; k <= radius; ++k) {
          const std::int64_t j = i + k;
          if (j < 0 || j >= n) continue;
          const double kw = kernel[static_cast<std::size_t>(k + radius)];
          acc += kw * static_cast<double>(values[static_cast<std::size_t>(base + j * stride)]);
          weight += kw;
        }
        scratch[static_cast<std::size_t>(base + i * stride)] = static_cast<float>(acc / weight);
      }
    }
    values.swap(scratch);
  }
}

}  // namespace

Tensor32 intensity_pipeline(const Tensor32& view, Rng& rng, TransformRecord& rec,
                            const AugmentConfig& cfg) {
  if (view.rank() != 3) {
    throw ShapeError("intensity_pipeline: expected a DHW view, got shape " + shape_str(view.shape()));
  }
  if (!cfg.intensity) {
    return view;
  }
  std::vector<float> values(view.data().begin(), view.data().end());
  const Ivec3 dims{view.dim(0), view.dim(1), view.dim(2)};

  if (logged_bernoulli(rng, cfg.noise_prob, rec)) {
    const double variance = logged_uniform(rng, 0.0, cfg.noise_var_max, rec);
    const double sigma = std::sqrt(variance);
    for (auto& v : values) {
      v = static_cast<float>(static_cast<double>(v) + rng.normal() * sigma);
    }
    rec.noise_variance = variance;
  }

  if (logged_bernoulli(rng, cfg.blur_prob, rec)) {
    const double sigma = logged_uniform(rng, cfg.blur_sigma_min, cfg.blur_sigma_max, rec);
    gaussian_blur_inplace(values, dims, sigma);
    rec.blur_sigma = sigma;
  }

  if (logged_bernoulli(rng, cfg.brightness_prob, rec)) {
    const double factor = logged_uniform(rng, cfg.brightness_min, cfg.brightness_max, rec);
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const float lo = *lo_it;
    const float hi = *hi_it;
    for (auto& v : values) {
      v = std::clamp(static_cast<float>(static_cast<double>(v) * factor), lo, hi);
    }
    rec.brightness = factor;
  }

  if (logged_bernoulli(rng, cfg.gamma_prob, rec)) {
    const double lambda = logged_uniform(rng, cfg.gamma_min, cfg.gamma_max, rec);
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it;
    const double range = static_cast<double>(*hi_it) - lo;
    if (range > 1e-12) {
      for (auto& v : values) {
        const double t = (static_cast<double>(v) - lo) / range;
        v = static_cast<float>(lo + std::pow(t, lambda) * range);
      }
    }
    rec.gamma = lambda;
  }

  return Tensor32::from(view.shape(), std::move(values));
}

ViewPair make_view_pair(const Tensor32& patch, Ivec3 view_shape, Rng& rng,
                        const AugmentConfig& cfg) {
  if (patch.rank() != 3) {
    throw ShapeError("make_view_pair: expected a DHW patch, got shape " + shape_str(patch.shape()));
  }
  const Ivec3 source{patch.dim(0), patch.dim(1), patch.dim(2)};
  auto [rec1, rec2] = sample_crop_pair(source, view_shape, rng, cfg);

  ViewPair pair;
  pair.view1 = intensity_pipeline(apply_flip(apply_crop_resize(patch, rec1), rec1.flip), rng, rec1, cfg);
  pair.view2 = intensity_pipeline(apply_flip(apply_crop_resize(patch, rec2), rec2.flip), rng, rec2, cfg);
  pair.rec1 = std::move(rec1);
  pair.rec2 = std::move(rec2);
  return pair;
}

}  // namespace pgl
