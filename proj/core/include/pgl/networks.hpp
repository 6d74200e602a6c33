#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pgl/common.hpp"
#include "pgl/rng.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

enum class ParamRole { kWeight, kBias, kNormScale, kNormShift, kRunningStat };

/// Ordered map of named parameter tensors for one network path. Iteration
/// follows insertion order, which init functions keep deterministic, so the
/// optimizer, EMA update, and checkpoints all walk the same sequence.
class ParamStore {
 public:
  Tensor32& add(const std::string& name, Tensor32 tensor, ParamRole role);
  Tensor32& at(const std::string& name);
  const Tensor32& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  ParamRole role(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  /// Element count over trainable entries (running statistics excluded).
  std::int64_t total_parameters() const;

  ParamStore clone() const;
  void zero_grads();

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Tensor32> tensors_;
  std::vector<ParamRole> roles_;
};

struct StageSpec {
  std::int64_t blocks = 1;
  std::int64_t width = 8;
  Ivec3 stride{1, 1, 1};
};

struct EncoderConfig {
  std::int64_t in_channels = 1;
  std::int64_t stem_channels = 8;
  std::int64_t stem_kernel = 3;
  Ivec3 stem_stride{1, 2, 2};
  std::vector<StageSpec> stages;
  bool bottleneck = false;  // 1-3-1 blocks with 4x expansion when set

  Ivec3 output_stride() const;
  std::int64_t out_channels() const;
  std::int64_t stage_out_channels(std::size_t stage) const;
};

struct ProjectorConfig {
  std::int64_t hidden = 32;
  std::int64_t out = 16;
};

enum class PredictorMode { kBlock, kIdentity };

struct NetworkConfig {
  EncoderConfig encoder;
  ProjectorConfig projector;
  PredictorMode predictor_mode = PredictorMode::kBlock;
  std::int64_t predictor_hidden = 32;
  std::int64_t aspp_channels = 16;
  std::int64_t num_classes = 4;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  /// Tiny configuration used by the test and acceptance suites:
  /// stem 8ch, stages [1, 1] x widths [8, 16], output stride (4, 8, 8),
  /// projector 32 -> 16.
  static NetworkConfig desk();

  /// Full-scale configuration: bottleneck stages [3, 4, 6, 3], output stride
  /// (8, 16, 16), projector 4096 -> 256. Supported, not exercised by the
  /// acceptance tests.
  static NetworkConfig paper();
};

// --- parameter initialization ----------------------------------------------

/// Encoder + projector + predictor, truncated-normal conv weights (std 0.02).
ParamStore init_ssl_online(const NetworkConfig& cfg, Rng& rng);

/// Deep copy of the online encoder + projector (no predictor keys).
ParamStore init_ssl_target(const ParamStore& online);

/// Encoder (truncated-normal, overwritten when loading a pretrained
/// checkpoint) plus ASPP/decoder/head initialized Kaiming-uniform.
ParamStore init_segmentation(const NetworkConfig& cfg, Rng& rng);

// --- forward passes ---------------------------------------------------------

/// Feature map at 1/output_stride of the input resolution. Input spatial
/// dims must be divisible by the output stride.
Tensor32 encode(ParamStore& params, const Tensor32& x, const EncoderConfig& cfg, bool training,
                bool update_running = true, double bn_momentum = 0.1, double bn_eps = 1e-5);

/// Per-level features: stem output followed by each stage output.
std::vector<Tensor32> encode_stages(ParamStore& params, const Tensor32& x,
                                    const EncoderConfig& cfg, bool training,
                                    bool update_running = true, double bn_momentum = 0.1,
                                    double bn_eps = 1e-5);

/// 1x1 conv -> BN -> ReLU -> 1x1 conv, spatial shape preserved.
Tensor32 project(ParamStore& params, const Tensor32& f, const NetworkConfig& cfg, bool training,
                 bool update_running = true);

/// Same block as the projector, online path only. Identity mode passes f
/// through untouched.
Tensor32 predict(ParamStore& params, const Tensor32& f, const NetworkConfig& cfg, bool training,
                 bool update_running = true);

/// Encoder -> ASPP (rates 2/4/8) -> decoder with skip sums -> class logits at
/// the input resolution.
Tensor32 segment(ParamStore& params, const Tensor32& x, const NetworkConfig& cfg, bool training,
                 bool update_running = true);

}  // namespace pgl
