#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pgl/align.hpp"
#include "pgl/augment.hpp"
#include "pgl/data.hpp"
#include "pgl/loss.hpp"
#include "pgl/networks.hpp"

namespace pgl {

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Linear warmup 0 -> base_lr over warmup_steps, then cosine decay to 0 at
/// total_steps with no restart.
double cosine_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                 double base_lr);

/// Target decay rate: omega_base at step 0, rising on a cosine to exactly 1
/// at total_steps.
double ema_omega(std::int64_t step, std::int64_t total_steps, double omega_base);

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

struct LarsConfig {
  double trust = 0.001;
  double weight_decay = 1.5e-6;
  double momentum = 0.9;
};

/// Layer-wise adaptive rate scaling with momentum. Weight tensors get the
/// adaptive local rate trust*|w| / (|g| + wd*|w| + 1e-12); biases and norm
/// parameters are exempt from both adaptation and decay and fall back to
/// plain momentum SGD. Running statistics are never touched.
class LarsState {
 public:
  LarsState(const ParamStore& params, LarsConfig cfg);

  /// Applies one update in parameter order. Throws NumericError when any
  /// gradient is non-finite; no parameter changes in that case.
  void step(ParamStore& params, double lr);

  const LarsConfig& config() const { return cfg_; }
  std::span<const float> buffer(const std::string& name) const;
  /// Momentum buffers keyed by parameter name, for checkpointing.
  const std::vector<std::string>& names() const { return names_; }
  std::vector<float>& mutable_buffer(const std::string& name);

 private:
  LarsConfig cfg_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::vector<float>> buffers_;
};

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// Momentum SGD for fine-tuning; an optional predicate freezes parameters by
/// name (their buffers and values stay untouched).
class SgdState {
 public:
  SgdState(const ParamStore& params, SgdConfig cfg);
  void step(ParamStore& params, double lr,
            const std::function<bool(const std::string&)>& frozen = nullptr);

 private:
  SgdConfig cfg_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::vector<float>> buffers_;
};

/// mu <- omega*mu + (1-omega)*theta over every target entry; running
/// statistics are copied from the online store instead of averaged. Every
/// target key must exist in the online store with the same shape.
void ema_update(ParamStore& target, const ParamStore& online, double omega);

// ---------------------------------------------------------------------------
// Training steps
// ---------------------------------------------------------------------------

struct TrainerConfig {
  std::uint64_t seed = 0;
  std::int64_t batch_size = 4;
  std::int64_t steps = 200;
  std::int64_t warmup_steps = 20;
  double base_lr = 0.05;
  double ema_base = 0.996;
  Ivec3 view_shape{8, 32, 32};
  LarsConfig lars;
  std::int64_t checkpoint_every = 100;
  std::int64_t prefetch = 2;
  bool sequential_symmetric = false;  // memory-lean two-tape mode
};

struct SslStepMetrics {
  double loss = 0.0;
  double lr = 0.0;
  double omega = 0.0;
  std::int64_t skipped_pairs = 0;
};

/// One dual-path step: online forwards on both views (with gradients), target
/// forwards under suspended recording, prior-guided alignment, the
/// symmetrized local-consistency loss, one LARS update, then the EMA target
/// update at the scheduled rate.
SslStepMetrics ssl_train_step(const std::vector<ViewPair>& batch, ParamStore& online,
                              ParamStore& target, LarsState& opt, const NetworkConfig& net,
                              const AlignConfig& align_cfg, const LossConfig& loss_cfg,
                              const TrainerConfig& cfg, std::int64_t step);

/// Stacks DHW views into an [N, 1, D, H, W] batch.
Tensor32 stack_views(std::span<const Tensor32> views);

/// One-hot encode labels (throws when a label is outside [0, num_classes)).
Tensor32 one_hot_labels(std::span<const std::uint8_t> labels, std::int64_t batch, Ivec3 dims,
                        std::int64_t num_classes);

struct FinetuneStepMetrics {
  double loss = 0.0;
  double lr = 0.0;
};

/// One supervised step: segment forward, softmax, Dice + cross-entropy,
/// SGD-with-momentum update. freeze_encoder skips every encoder.* parameter.
FinetuneStepMetrics finetune_step(const Tensor32& inputs, const Tensor32& gt_onehot,
                                  ParamStore& seg, SgdState& opt, const NetworkConfig& net,
                                  const LossConfig& loss_cfg, double lr, bool freeze_encoder);

// ---------------------------------------------------------------------------
// The pretraining loop
// ---------------------------------------------------------------------------

/// Deterministic batch builder: the batch for a step is a pure function of
/// (volumes, configs, seed, step), so prefetching cannot change results.
std::vector<ViewPair> make_ssl_batch(const std::vector<Volume>& volumes,
                                     const AugmentConfig& aug, Ivec3 view_shape,
                                     std::int64_t batch_size, std::uint64_t seed,
                                     std::int64_t step);

struct PretrainResult {
  std::int64_t steps_done = 0;
  double final_loss = 0.0;
  std::string final_checkpoint;
  std::vector<SslStepMetrics> history;
  ParamStore online;  // final parameter states
  ParamStore target;
};

/// Fresh online/target stores exactly as run_pretraining builds them for a
/// given seed (the target starts as a deep copy of the online store).
std::pair<ParamStore, ParamStore> init_ssl_stores(const NetworkConfig& net, std::uint64_t seed);

/// Runs the full SSL loop over preprocessed volumes. When out_dir is
/// non-empty, writes metrics.csv (step,loss,lr,omega,skipped_pairs,wall_ms),
/// periodic checkpoints, and ckpt-final.pgl there. wall_ms is recorded only
/// when log_wall_time is set; it stays 0 otherwise so reruns are bit-exact.
PretrainResult run_pretraining(const std::vector<Volume>& volumes, const NetworkConfig& net,
                               const AugmentConfig& aug, const AlignConfig& align_cfg,
                               const LossConfig& loss_cfg, const TrainerConfig& cfg,
                               const std::string& out_dir, bool log_wall_time = false);

/// Serializes online + target stores, optimizer state, step counter, and RNG
/// state into a PGLCKPT1 file.
void save_ssl_checkpoint(const std::string& path, const ParamStore& online,
                         const ParamStore& target, const LarsState& opt, std::int64_t step,
                         const std::string& rng_state);

// ---------------------------------------------------------------------------
// The fine-tuning loop
// ---------------------------------------------------------------------------

struct FinetuneRunConfig {
  std::uint64_t seed = 0;
  double lr = 0.01;
  std::int64_t steps = 300;
  std::int64_t batch = 4;
  std::int64_t warmup_steps = 0;
  SgdConfig sgd;
  bool freeze_encoder = false;
  std::int64_t eval_every = 50;
  Ivec3 patch_shape{8, 32, 32};
  bool augment_flips = true;      // label-exact axis flips
  bool augment_intensity = true;  // value-only stages (3)-(6)
  AugmentConfig augment;          // probabilities for the stages above
};

struct ValidationPoint {
  std::int64_t step = 0;
  double mean_dice = 0.0;
  std::vector<double> per_class_dice;
};

struct FinetuneResult {
  std::vector<FinetuneStepMetrics> history;
  std::vector<ValidationPoint> validations;
  double final_mean_dice = 0.0;
  ParamStore seg;
};

/// Supervised fine-tuning over labeled volumes with cosine-decayed SGD.
/// Validation Dice per class is computed by tiled inference at eval_every
/// cadence and at the final step. When out_dir is non-empty, appends
/// step,loss,lr,val_mean_dice,val_dice_<c>... rows to finetune_metrics.csv
/// (validation columns filled only on evaluation steps) and writes the final
/// parameters to seg-final.pgl.
FinetuneResult run_finetune(const std::vector<Volume>& train, const std::vector<Volume>& val,
                            ParamStore seg, const NetworkConfig& net, const LossConfig& loss_cfg,
                            const FinetuneRunConfig& cfg, const std::string& out_dir);

}  // namespace pgl
