#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pgl/align.hpp"
#include "pgl/augment.hpp"
#include "pgl/common.hpp"
#include "pgl/data.hpp"
#include "pgl/loss.hpp"
#include "pgl/networks.hpp"
#include "pgl/trainer.hpp"

namespace pgl {

struct DataSection {
  std::string manifest;
  std::string val_manifest;
  std::string test_manifest;
  double clip_lo = -1024.0;
  double clip_hi = 325.0;
};

struct NetworkSection {
  std::string preset = "desk";  // desk | paper; applied before explicit keys
  std::int64_t stem_channels = 8;
  std::int64_t stem_kernel = 3;
  Ivec3 stem_stride{1, 2, 2};
  std::vector<std::int64_t> blocks{1, 1};
  std::vector<std::int64_t> widths{8, 16};
  std::vector<Ivec3> stage_strides{{2, 2, 2}, {2, 2, 2}};
  bool bottleneck = false;
  std::int64_t projector_hidden = 32;
  std::int64_t projector_out = 16;
  std::string predictor = "block";  // block | identity
  std::int64_t predictor_hidden = 32;
  std::int64_t aspp_channels = 16;
  std::int64_t num_classes = 4;
};

struct FinetuneSection {
  double lr = 0.01;
  std::int64_t steps = 300;
  std::int64_t batch = 4;
  std::int64_t warmup_steps = 0;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool freeze_encoder = false;
  std::int64_t eval_every = 50;
};

struct LossSection {
  double l2_eps = 1e-12;
  double dice_epsilon = 1e-5;
  bool normalize_channels = false;
};

struct OutputSection {
  std::string dir = "runs/out";
  bool log_wall_time = false;  // metrics stay bit-identical across reruns
};

/// Plain-text run configuration: `[section]` headers and `key = value`
/// lines, `#` comments. Unknown sections or keys are rejected. Every run
/// serializes its fully resolved configuration (all keys, all values) next
/// to its outputs; feeding that file back reproduces the run.
struct RunConfig {
  DataSection data;
  SynthSpec synth;
  AugmentConfig augment;
  NetworkSection network;
  AlignConfig align;
  LossSection loss;
  TrainerConfig trainer;
  FinetuneSection finetune;
  OutputSection output;

  static RunConfig defaults() { return RunConfig{}; }

  /// Overrides are (section.key, value) pairs from dotted command-line
  /// flags; they win over file values.
  static RunConfig from_text(const std::string& text,
                             std::span<const std::pair<std::string, std::string>> overrides = {});
  static RunConfig from_file(const std::string& path,
                             std::span<const std::pair<std::string, std::string>> overrides = {});

  std::string serialize() const;
  void validate() const;

  NetworkConfig network_config() const;
  LossConfig loss_config() const;
};

}  // namespace pgl
