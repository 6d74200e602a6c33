#include "pgl/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pgl {

static_assert(std::endian::native == std::endian::little,
              "RVF1 and PGLCKPT1 store raw little-endian values");

namespace {

constexpr char kMagic[4] = {'R', 'V', 'F', '1'};
constexpr std::uint8_t kDtypeFloat32 = 0;
constexpr std::int64_t kMaxVoxels = std::int64_t(1) << 40;

void read_exact(std::ifstream& in, void* dst, std::size_t bytes, const std::string& path,
                std::size_t expected_total, std::size_t offset) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
  if (static_cast<std::size_t>(in.gcount()) != bytes) {
    throw IoError("load_volume: " + path + " truncated: expected " +
                  std::to_string(expected_total) + " bytes, got " +
                  std::to_string(offset + static_cast<std::size_t>(std::max<std::streamsize>(in.gcount(), 0))));
  }
}

}  // namespace

Volume load_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("load_volume: cannot open " + path);
  }
  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);

  char magic[4];
  read_exact(in, magic, 4, path, file_size, 0);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("load_volume: " + path + " has bad magic (not an RVF1 file)");
  }
  std::uint8_t dtype = 0;
  read_exact(in, &dtype, 1, path, file_size, 4);
  if (dtype != kDtypeFloat32) {
    throw IoError("load_volume: " + path + " has unsupported dtype code " + std::to_string(dtype));
  }
  std::uint32_t dims32[3];
  read_exact(in, dims32, sizeof(dims32), path, file_size, 5);
  std::uint8_t label_flag = 0;
  read_exact(in, &label_flag, 1, path, file_size, 17);

  Volume vol;
  std::int64_t voxels = 1;
  for (int a = 0; a < 3; ++a) {
    if (dims32[a] == 0) {
      throw IoError("load_volume: " + path + ": zero " + kAxisNames[a] + " dimension");
    }
    vol.dims[a] = static_cast<std::int64_t>(dims32[a]);
    voxels *= vol.dims[a];
    if (voxels > kMaxVoxels) {
      throw IoError("load_volume: " + path + ": dimensions overflow the voxel budget");
    }
  }

  const std::size_t value_bytes = static_cast<std::size_t>(voxels) * sizeof(float);
  const std::size_t label_bytes = label_flag ? static_cast<std::size_t>(voxels) : 0;
  const std::size_t expected = 18 + value_bytes + label_bytes;
  if (file_size != expected) {
    throw IoError("load_volume: " + path + " truncated: expected " + std::to_string(expected) +
                  " bytes, got " + std::to_string(file_size));
  }

  vol.values.resize(static_cast<std::size_t>(voxels));
  read_exact(in, vol.values.data(), value_bytes, path, expected, 18);
  if (label_flag) {
    vol.labels.resize(static_cast<std::size_t>(voxels));
    read_exact(in, vol.labels.data(), label_bytes, path, expected, 18 + value_bytes);
  }
  vol.provenance = path;
  return vol;
}

void save_volume(const Volume& vol, const std::string& path) {
  if (vol.voxels() != static_cast<std::int64_t>(vol.values.size())) {
    throw IoError("save_volume: value count does not match dims");
  }
  if (vol.has_labels() && vol.labels.size() != vol.values.size()) {
    throw IoError("save_volume: label count does not match dims");
  }
  for (int a = 0; a < 3; ++a) {
    if (vol.dims[a] <= 0 || vol.dims[a] > std::int64_t(std::uint32_t(-1))) {
      throw IoError(std::string("save_volume: invalid ") + kAxisNames[a] + " dimension " +
                    std::to_string(vol.dims[a]));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("save_volume: cannot open " + path + " for writing");
  }
  out.write(kMagic, 4);
  const std::uint8_t dtype = kDtypeFloat32;
  out.write(reinterpret_cast<const char*>(&dtype), 1);
  for (int a = 0; a < 3; ++a) {
    const auto d = static_cast<std::uint32_t>(vol.dims[a]);
    out.write(reinterpret_cast<const char*>(&d), 4);
  }
  const std::uint8_t label_flag = vol.has_labels() ? 1 : 0;
  out.write(reinterpret_cast<const char*>(&label_flag), 1);
  out.write(reinterpret_cast<const char*>(vol.values.data()),
            static_cast<std::streamsize>(vol.values.size() * sizeof(float)));
  if (label_flag) {
    out.write(reinterpret_cast<const char*>(vol.labels.data()),
              static_cast<std::streamsize>(vol.labels.size()));
  }
  if (!out) {
    throw IoError("save_volume: write to " + path + " failed");
  }
}

Volume preprocess(const Volume& vol, double clip_lo, double clip_hi) {
  if (clip_lo >= clip_hi) {
    throw ConfigError("preprocess: clip_lo must be below clip_hi");
  }
  Volume out = vol;
  double sum = 0.0;
  for (auto& v : out.values) {
    v = std::clamp(v, static_cast<float>(clip_lo), static_cast<float>(clip_hi));
    sum += static_cast<double>(v);
  }
  const double mean = sum / static_cast<double>(out.values.size());
  double sq = 0.0;
  for (float v : out.values) {
    const double d = static_cast<double>(v) - mean;
    sq += d * d;
  }
  const double std_dev = std::max(std::sqrt(sq / static_cast<double>(out.values.size())), 1e-8);
  for (auto& v : out.values) {
    v = static_cast<float>((static_cast<double>(v) - mean) / std_dev);
  }
  return out;
}

Patch extract_patch(const Volume& vol, Ivec3 origin, Ivec3 patch_shape) {
  for (int a = 0; a < 3; ++a) {
    if (origin[a] < 0 || origin[a] + patch_shape[a] > vol.dims[a]) {
      throw ShapeError(std::string("extract_patch: patch exceeds volume on ") + kAxisNames[a] +
                       " axis");
    }
  }
  Patch patch;
  patch.origin = origin;
  std::vector<float> values(static_cast<std::size_t>(patch_shape[0] * patch_shape[1] * patch_shape[2]));
  if (vol.has_labels()) {
    patch.labels.resize(values.size());
  }
  std::size_t dst = 0;
  for (std::int64_t d = 0; d < patch_shape[0]; ++d) {
    for (std::int64_t h = 0; h < patch_shape[1]; ++h) {
      const std::size_t src = static_cast<std::size_t>(
          ((origin[0] + d) * vol.dims[1] + (origin[1] + h)) * vol.dims[2] + origin[2]);
      std::copy_n(vol.values.data() + src, static_cast<std::size_t>(patch_shape[2]),
                  values.data() + dst);
      if (vol.has_labels()) {
        std::copy_n(vol.labels.data() + src, static_cast<std::size_t>(patch_shape[2]),
                    patch.labels.data() + dst);
      }
      dst += static_cast<std::size_t>(patch_shape[2]);
    }
  }
  patch.values = Tensor32::from({patch_shape[0], patch_shape[1], patch_shape[2]}, std::move(values));
  return patch;
}

Patch sample_patch(const Volume& vol, Ivec3 patch_shape, Rng& rng) {
  Ivec3 origin;
  for (int a = 0; a < 3; ++a) {
    const std::int64_t room = vol.dims[a] - patch_shape[a];
    if (room < 0) {
      throw ShapeError(std::string("sample_patch: volume too small on ") + kAxisNames[a] +
                       " axis (" + std::to_string(vol.dims[a]) + " < " +
                       std::to_string(patch_shape[a]) + ")");
    }
    origin[a] = rng.uniform_int(room + 1);
  }
  return extract_patch(vol, origin, patch_shape);
}

Ivec3 ssl_source_shape(Ivec3 view_shape, double max_scale) {
  Ivec3 out;
  for (int a = 0; a < 3; ++a) {
    // Crop extents are quantized at or below max_scale * view, so an
    // eps-guarded ceiling is always large enough.
    out[a] = static_cast<std::int64_t>(
        std::ceil(max_scale * static_cast<double>(view_shape[a]) - 1e-9));
  }
  return out;
}

Volume synth_generate(const SynthSpec& spec, Rng& rng) {
  if (spec.classes < 1) {
    throw ConfigError("synth_generate: class count must be at least 1");
  }
  if (spec.classes > 255) {
    throw ConfigError("synth_generate: at most 255 foreground classes fit u8 labels");
  }
  if (static_cast<std::int64_t>(spec.class_means.size()) < spec.classes ||
      static_cast<std::int64_t>(spec.class_stds.size()) < spec.classes) {
    throw ConfigError("synth_generate: class_means/class_stds shorter than class count");
  }
  if (spec.objects_min < 0 || spec.objects_max < spec.objects_min) {
    throw ConfigError("synth_generate: invalid object count range");
  }

  Volume vol;
  vol.dims = spec.dims;
  const std::int64_t voxels = vol.voxels();
  vol.values.resize(static_cast<std::size_t>(voxels));
  vol.labels.assign(static_cast<std::size_t>(voxels), 0);
  vol.provenance = "synthetic";
  for (auto& v : vol.values) {
    v = static_cast<float>(rng.normal(spec.background_mean, spec.background_std));
  }

  const std::int64_t count =
      spec.objects_min + rng.uniform_int(spec.objects_max - spec.objects_min + 1);
  for (std::int64_t obj = 0; obj < count; ++obj) {
    const auto cls = static_cast<std::uint8_t>(1 + rng.uniform_int(spec.classes));
    const bool ellipsoid = rng.bernoulli(0.5);
    Dvec3 center, radius;
    for (int a = 0; a < 3; ++a) {
      const double dim = static_cast<double>(spec.dims[a]);
      radius[a] = dim * rng.uniform(spec.radius_min_frac, spec.radius_max_frac);
      center[a] = rng.uniform(radius[a], dim - radius[a]);
    }
    const double mean = spec.class_means[static_cast<std::size_t>(cls - 1)];
    const double std_dev = spec.class_stds[static_cast<std::size_t>(cls - 1)];

    const std::int64_t d0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(center[0] - radius[0]));
    const std::int64_t d1 = std::min(spec.dims[0], static_cast<std::int64_t>(center[0] + radius[0]) + 1);
    const std::int64_t h0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(center[1] - radius[1]));
    const std::int64_t h1 = std::min(spec.dims[1], static_cast<std::int64_t>(center[1] + radius[1]) + 1);
    const std::int64_t w0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(center[2] - radius[2]));
    const std::int64_t w1 = std::min(spec.dims[2], static_cast<std::int64_t>(center[2] + radius[2]) + 1);
    for (std::int64_t d = d0; d < d1; ++d) {
      for (std::int64_t h = h0; h < h1; ++h) {
        for (std::int64_t w = w0; w < w1; ++w) {
          bool inside = true;
          if (ellipsoid) {
            const double dd = (static_cast<double>(d) - center[0]) / radius[0];
            const double dh = (static_cast<double>(h) - center[1]) / radius[1];
            const double dw = (static_cast<double>(w) - center[2]) / radius[2];
            inside = dd * dd + dh * dh + dw * dw <= 1.0;
          }
          if (!inside) continue;
          const std::size_t i =
              static_cast<std::size_t>((d * spec.dims[1] + h) * spec.dims[2] + w);
          vol.values[i] = static_cast<float>(rng.normal(mean, std_dev));
          vol.labels[i] = cls;
        }
      }
    }
  }
  return vol;
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("load_manifest: cannot open " + path);
  }
  std::string header;
  if (!std::getline(in, header)) {
    throw IoError("load_manifest: " + path + " is empty");
  }
  Manifest manifest;
  unsigned long long seed = 0;
  char split[64] = {0};
  if (std::sscanf(header.c_str(), "# split=%63s seed=%llu", split, &seed) != 2) {
    throw IoError("load_manifest: " + path + " has a malformed header: " + header);
  }
  manifest.split = split;
  manifest.seed = seed;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) {
      manifest.paths.push_back(line);
    }
  }
  return manifest;
}

void save_manifest(const Manifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("save_manifest: cannot open " + path + " for writing");
  }
  out << "# split=" << manifest.split << " seed=" << manifest.seed << "\n";
  for (const auto& p : manifest.paths) {
    out << p << "\n";
  }
  if (!out) {
    throw IoError("save_manifest: write to " + path + " failed");
  }
}

}  // namespace pgl
