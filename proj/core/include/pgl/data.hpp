#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pgl/common.hpp"
#include "pgl/rng.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

/// Dense volumetric image with an optional per-voxel label map.
struct Volume {
  Ivec3 dims{0, 0, 0};
  std::vector<float> values;         // row-major D*H*W
  std::vector<std::uint8_t> labels;  // empty, or one label per voxel
  std::string provenance;

  bool has_labels() const { return !labels.empty(); }
  std::int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
};

/// RVF1 container: magic "RVF1", dtype code (u8, 0 = float32), three
/// little-endian u32 dims, a label flag (u8), raw float32 values, then raw
/// u8 labels when the flag is set.
Volume load_volume(const std::string& path);
void save_volume(const Volume& vol, const std::string& path);

/// Clamps values to [clip_lo, clip_hi], then z-scores over the whole volume
/// with the standard deviation guarded below by 1e-8. Labels pass through.
Volume preprocess(const Volume& vol, double clip_lo, double clip_hi);

/// Integer-aligned patch cut from a volume; labels are copied exactly.
struct Patch {
  Tensor32 values;  // DHW
  std::vector<std::uint8_t> labels;
  Ivec3 origin{0, 0, 0};
};

/// Uniformly positioned patch over the full valid origin range.
Patch sample_patch(const Volume& vol, Ivec3 patch_shape, Rng& rng);

/// Patch at a fixed origin (tiled inference, tests).
Patch extract_patch(const Volume& vol, Ivec3 origin, Ivec3 patch_shape);

/// Smallest source-patch shape from which crops of up to max_scale x view
/// always fit: ceil(max_scale * view) per axis.
Ivec3 ssl_source_shape(Ivec3 view_shape, double max_scale);

/// Synthetic HU-like volumes: Gaussian background plus randomly placed
/// ellipsoids and cuboids with class-specific intensity distributions.
/// Objects may overlap; the later-drawn object wins both label and value.
struct SynthSpec {
  Ivec3 dims{24, 48, 48};
  std::int64_t classes = 3;  // foreground classes, labels 1..classes
  std::int64_t objects_min = 2;
  std::int64_t objects_max = 5;
  double background_mean = -600.0;
  double background_std = 40.0;
  std::vector<double> class_means{-150.0, 80.0, 300.0};
  std::vector<double> class_stds{30.0, 30.0, 30.0};
  double radius_min_frac = 0.12;  // object radius per axis, fraction of dim
  double radius_max_frac = 0.25;
};

Volume synth_generate(const SynthSpec& spec, Rng& rng);

/// Plain-text dataset manifest: header line "# split=<tag> seed=<n>", then
/// one volume path per line.
struct Manifest {
  std::string split;  // pretrain | train | val | test
  std::uint64_t seed = 0;
  std::vector<std::string> paths;
};

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& manifest, const std::string& path);

}  // namespace pgl
