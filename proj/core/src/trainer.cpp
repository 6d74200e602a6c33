#include "pgl/trainer.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <thread>

#include "pgl/checkpoint.hpp"
#include "pgl/eval.hpp"
#include "pgl/rng.hpp"

namespace pgl {

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

double cosine_lr(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                 double base_lr) {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const double span = static_cast<double>(total_steps - warmup_steps);
  const double t = span > 0 ? static_cast<double>(step - warmup_steps) / span : 1.0;
  return base_lr * (std::cos(std::numbers::pi * std::min(t, 1.0)) + 1.0) / 2.0;
}

double ema_omega(std::int64_t step, std::int64_t total_steps, double omega_base) {
  const double t = total_steps > 0
                       ? static_cast<double>(step) / static_cast<double>(total_steps)
                       : 1.0;
  return 1.0 - (1.0 - omega_base) * (std::cos(std::numbers::pi * std::min(t, 1.0)) + 1.0) / 2.0;
}

// ---------------------------------------------------------------------------
// LARS
// ---------------------------------------------------------------------------

LarsState::LarsState(const ParamStore& params, LarsConfig cfg) : cfg_(cfg) {
  for (const auto& name : params.names()) {
    if (params.role(name) == ParamRole::kRunningStat) {
      continue;
    }
    names_.push_back(name);
    buffers_.emplace(name, std::vector<float>(static_cast<std::size_t>(params.at(name).numel()), 0.0f));
  }
}

std::span<const float> LarsState::buffer(const std::string& name) const {
  const auto it = buffers_.find(name);
  if (it == buffers_.end()) {
    throw ConfigError("LarsState: no buffer for " + name);
  }
  return it->second;
}

std::vector<float>& LarsState::mutable_buffer(const std::string& name) {
  const auto it = buffers_.find(name);
  if (it == buffers_.end()) {
    throw ConfigError("LarsState: no buffer for " + name);
  }
  return it->second;
}

void LarsState::step(ParamStore& params, double lr) {
  // Validate first: a step either applies fully or not at all.
  for (const auto& name : names_) {
    for (const float g : params.at(name).grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("lars_step: non-finite gradient in " + name);
      }
    }
  }
  for (const auto& name : names_) {
    Tensor32& param = params.at(name);
    auto w = param.mutable_data();
    const auto g = param.grad();
    auto& buf = buffers_.at(name);
    const bool adaptive = params.role(name) == ParamRole::kWeight;

    if (adaptive) {
      double w_norm_sq = 0.0, g_norm_sq = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        w_norm_sq += static_cast<double>(w[i]) * w[i];
        const double gi = g.empty() ? 0.0 : g[i];
        g_norm_sq += gi * gi;
      }
      const double w_norm = std::sqrt(w_norm_sq);
      const double g_norm = std::sqrt(g_norm_sq);
      const double local =
          cfg_.trust * w_norm / (g_norm + cfg_.weight_decay * w_norm + 1e-12);
      const float step_scale = static_cast<float>(lr * local);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float gi = g.empty() ? 0.0f : g[i];
        buf[i] = static_cast<float>(cfg_.momentum) * buf[i] +
                 (gi + static_cast<float>(cfg_.weight_decay) * w[i]);
        w[i] -= step_scale * buf[i];
      }
    } else {
      const float step_scale = static_cast<float>(lr);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float gi = g.empty() ? 0.0f : g[i];
        buf[i] = static_cast<float>(cfg_.momentum) * buf[i] + gi;
        w[i] -= step_scale * buf[i];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

SgdState::SgdState(const ParamStore& params, SgdConfig cfg) : cfg_(cfg) {
  for (const auto& name : params.names()) {
    if (params.role(name) == ParamRole::kRunningStat) {
      continue;
    }
    names_.push_back(name);
    buffers_.emplace(name, std::vector<float>(static_cast<std::size_t>(params.at(name).numel()), 0.0f));
  }
}

void SgdState::step(ParamStore& params, double lr,
                    const std::function<bool(const std::string&)>& frozen) {
  for (const auto& name : names_) {
    if (frozen && frozen(name)) {
      continue;
    }
    for (const float g : params.at(name).grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("sgd_step: non-finite gradient in " + name);
      }
    }
  }
  for (const auto& name : names_) {
    if (frozen && frozen(name)) {
      continue;
    }
    Tensor32& param = params.at(name);
    auto w = param.mutable_data();
    const auto g = param.grad();
    auto& buf = buffers_.at(name);
    const bool decayed = params.role(name) == ParamRole::kWeight;
    const float wd = decayed ? static_cast<float>(cfg_.weight_decay) : 0.0f;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = g.empty() ? 0.0f : g[i];
      buf[i] = static_cast<float>(cfg_.momentum) * buf[i] + gi + wd * w[i];
      w[i] -= static_cast<float>(lr) * buf[i];
    }
  }
}

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

void ema_update(ParamStore& target, const ParamStore& online, double omega) {
  std::string problems;
  for (const auto& name : target.names()) {
    if (!online.contains(name)) {
      problems += "  missing in online store: " + name + "\n";
    } else if (online.at(name).shape() != target.at(name).shape()) {
      problems += "  shape mismatch: " + name + "\n";
    }
  }
  if (!problems.empty()) {
    throw ConfigError("ema_update: key mismatch between target and online stores:\n" + problems);
  }
  const float w = static_cast<float>(omega);
  for (const auto& name : target.names()) {
    auto mu = target.at(name).mutable_data();
    const auto theta = online.at(name).data();
    if (target.role(name) == ParamRole::kRunningStat) {
      // Statistics are copied, not averaged.
      std::copy(theta.begin(), theta.end(), mu.begin());
    } else {
      for (std::size_t i = 0; i < mu.size(); ++i) {
        mu[i] = w * mu[i] + (1.0f - w) * theta[i];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// SSL training step
// ---------------------------------------------------------------------------

Tensor32 stack_views(std::span<const Tensor32> views) {
  if (views.empty()) {
    throw ShapeError("stack_views: empty batch");
  }
  const Shape& vs = views[0].shape();
  if (vs.size() != 3) {
    throw ShapeError("stack_views: expected DHW views");
  }
  const std::int64_t voxels = shape_numel(vs);
  std::vector<float> data(static_cast<std::size_t>(voxels) * views.size());
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i].shape() != vs) {
      throw ShapeError("stack_views: inconsistent view shapes");
    }
    std::copy(views[i].data().begin(), views[i].data().end(),
              data.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(voxels)));
  }
  return Tensor32::from({static_cast<std::int64_t>(views.size()), 1, vs[0], vs[1], vs[2]},
                        std::move(data));
}

namespace {

struct SslForward {
  Tensor32 loss;
  std::int64_t skipped = 0;
  bool usable = false;
};

// One symmetrized-loss term: online features from x_a, target features from
// x_b, aligned by their records, predictor applied after alignment.
Tensor32 consistency_term(const Tensor32& f_online, const Tensor32& f_target,
                          std::span<const TransformRecord> recs_online,
                          std::span<const TransformRecord> recs_target, ParamStore& online,
                          const NetworkConfig& net, const AlignConfig& align_cfg,
                          const LossConfig& loss_cfg, Ivec3 stride, std::int64_t* skipped,
                          bool* usable) {
  AlignedBatch<float> aligned =
      align_batch(f_online, f_target, recs_online, recs_target, stride, align_cfg);
  *skipped += static_cast<std::int64_t>(recs_online.size()) -
              static_cast<std::int64_t>(aligned.kept.size());
  if (aligned.kept.empty()) {
    *usable = false;
    return Tensor32::scalar(0.0f);
  }
  *usable = true;
  Tensor32 pred = predict(online, aligned.online, net, /*training=*/true);
  return local_consistency(pred, stop_gradient(aligned.target), loss_cfg);
}

}  // namespace

SslStepMetrics ssl_train_step(const std::vector<ViewPair>& batch, ParamStore& online,
                              ParamStore& target, LarsState& opt, const NetworkConfig& net,
                              const AlignConfig& align_cfg, const LossConfig& loss_cfg,
                              const TrainerConfig& cfg, std::int64_t step) {
  if (batch.empty()) {
    throw ShapeError("ssl_train_step: empty batch");
  }
  SslStepMetrics metrics;
  metrics.lr = cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.base_lr);
  metrics.omega = ema_omega(step, cfg.steps, cfg.ema_base);

  std::vector<Tensor32> views1, views2;
  std::vector<TransformRecord> recs1, recs2;
  for (const auto& pair : batch) {
    views1.push_back(pair.view1);
    views2.push_back(pair.view2);
    recs1.push_back(pair.rec1);
    recs2.push_back(pair.rec2);
  }
  const Tensor32 x1 = stack_views(views1);
  const Tensor32 x2 = stack_views(views2);
  const Ivec3 stride = net.encoder.output_stride();

  const auto target_features = [&](const Tensor32& x) {
    Tape<float>::Scope off(nullptr);
    Tensor32 f = encode(target, x, net.encoder, /*training=*/true, /*update_running=*/false,
                        net.bn_momentum, net.bn_eps);
    return project(target, f, net, /*training=*/true, /*update_running=*/false);
  };
  const auto online_features = [&](const Tensor32& x) {
    Tensor32 f = encode(online, x, net.encoder, /*training=*/true, /*update_running=*/true,
                        net.bn_momentum, net.bn_eps);
    return project(online, f, net, /*training=*/true, /*update_running=*/true);
  };

  std::int64_t skipped = 0;
  double loss_value = 0.0;
  bool any_usable = false;

  if (!cfg.sequential_symmetric) {
    Tape<float> tape;
    Tape<float>::Scope scope(&tape);
    const Tensor32 f1 = online_features(x1);
    const Tensor32 f2 = online_features(x2);
    const Tensor32 t2 = target_features(x2);
    const Tensor32 t1 = target_features(x1);
    bool usable1 = false, usable2 = false;
    std::int64_t skipped_order1 = 0, skipped_order2 = 0;
    const Tensor32 term1 = consistency_term(f1, t2, recs1, recs2, online, net, align_cfg, loss_cfg,
                                            stride, &skipped_order1, &usable1);
    const Tensor32 term2 = consistency_term(f2, t1, recs2, recs1, online, net, align_cfg, loss_cfg,
                                            stride, &skipped_order2, &usable2);
    skipped = skipped_order1;  // both orders skip the same record pairs
    any_usable = usable1 || usable2;
    if (any_usable) {
      const Tensor32 total = usable1 && usable2 ? add(term1, term2) : (usable1 ? term1 : term2);
      loss_value = total.item();
      tape.backward(total);
    }
  } else {
    // Memory-lean mode: each term builds and backpropagates its own tape;
    // leaf gradients accumulate across the two passes.
    for (int order = 0; order < 2; ++order) {
      Tape<float> tape;
      Tape<float>::Scope scope(&tape);
      const Tensor32& xa = order == 0 ? x1 : x2;
      const Tensor32& xb = order == 0 ? x2 : x1;
      const auto& ra = order == 0 ? recs1 : recs2;
      const auto& rb = order == 0 ? recs2 : recs1;
      const Tensor32 fa = online_features(xa);
      const Tensor32 tb = target_features(xb);
      bool usable = false;
      std::int64_t order_skipped = 0;
      const Tensor32 term = consistency_term(fa, tb, ra, rb, online, net, align_cfg, loss_cfg,
                                             stride, &order_skipped, &usable);
      if (order == 0) {
        skipped = order_skipped;
      }
      if (usable) {
        any_usable = true;
        loss_value += term.item();
        tape.backward(term);
      }
    }
  }

  metrics.skipped_pairs = skipped;
  if (!any_usable) {
    // Cannot happen for batches from make_view_pair, which guarantees
    // overlapping crops; manual batches may hit it.
    std::fprintf(stderr, "ssl_train_step: step %lld skipped, no usable pairs\n",
                 static_cast<long long>(step));
    online.zero_grads();
    return metrics;
  }
  if (!std::isfinite(loss_value)) {
    throw NumericError("ssl_train_step: non-finite loss at step " + std::to_string(step));
  }
  metrics.loss = loss_value;

  opt.step(online, metrics.lr);
  ema_update(target, online, metrics.omega);
  online.zero_grads();
  return metrics;
}

// ---------------------------------------------------------------------------
// Fine-tuning step
// ---------------------------------------------------------------------------

Tensor32 one_hot_labels(std::span<const std::uint8_t> labels, std::int64_t batch, Ivec3 dims,
                        std::int64_t num_classes) {
  const std::int64_t voxels = dims[0] * dims[1] * dims[2];
  if (static_cast<std::int64_t>(labels.size()) != batch * voxels) {
    throw ShapeError("one_hot_labels: label count does not match batch dims");
  }
  std::vector<float> data(static_cast<std::size_t>(batch * num_classes * voxels), 0.0f);
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t v = 0; v < voxels; ++v) {
      const std::uint8_t cls = labels[static_cast<std::size_t>(n * voxels + v)];
      if (cls >= num_classes) {
        throw ConfigError("one_hot_labels: label value " + std::to_string(cls) +
                          " is outside [0, " + std::to_string(num_classes) + ")");
      }
      data[static_cast<std::size_t>((n * num_classes + cls) * voxels + v)] = 1.0f;
    }
  }
  return Tensor32::from({batch, num_classes, dims[0], dims[1], dims[2]}, std::move(data));
}

FinetuneStepMetrics finetune_step(const Tensor32& inputs, const Tensor32& gt_onehot,
                                  ParamStore& seg, SgdState& opt, const NetworkConfig& net,
                                  const LossConfig& loss_cfg, double lr, bool freeze_encoder) {
  FinetuneStepMetrics metrics;
  metrics.lr = lr;
  Tape<float> tape;
  {
    Tape<float>::Scope scope(&tape);
    const Tensor32 logits = segment(seg, inputs, net, /*training=*/true);
    const Tensor32 probs = softmax_channels(logits);
    const Tensor32 loss =
        dice_ce_multiclass(probs, gt_onehot, loss_cfg.dice_epsilon, net.num_classes);
    metrics.loss = loss.item();
    if (!std::isfinite(metrics.loss)) {
      throw NumericError("finetune_step: non-finite loss");
    }
    tape.backward(loss);
  }
  const auto frozen = [freeze_encoder](const std::string& name) {
    return freeze_encoder && name.starts_with("encoder.");
  };
  opt.step(seg, lr, frozen);
  seg.zero_grads();
  return metrics;
}

// ---------------------------------------------------------------------------
// Pretraining loop
// ---------------------------------------------------------------------------

std::vector<ViewPair> make_ssl_batch(const std::vector<Volume>& volumes,
                                     const AugmentConfig& aug, Ivec3 view_shape,
                                     std::int64_t batch_size, std::uint64_t seed,
                                     std::int64_t step) {
  if (volumes.empty()) {
    throw ConfigError("make_ssl_batch: no volumes");
  }
  const Ivec3 source_shape = ssl_source_shape(view_shape, aug.max_scale);
  std::vector<ViewPair> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (std::int64_t b = 0; b < batch_size; ++b) {
    Rng rng(Rng::split(seed, static_cast<std::uint64_t>(step) * 0x10001ULL +
                                 static_cast<std::uint64_t>(b)));
    const auto vol_index = static_cast<std::size_t>(rng.uniform_int(
        static_cast<std::int64_t>(volumes.size())));
    const Patch patch = sample_patch(volumes[vol_index], source_shape, rng);
    batch.push_back(make_view_pair(patch.values, view_shape, rng, aug));
  }
  return batch;
}

namespace {

/// Bounded single-producer queue feeding batches to the training loop in step
/// order. Batches are pure functions of the step index, so the handoff cannot
/// perturb results.
class BatchPrefetcher {
 public:
  BatchPrefetcher(std::function<std::vector<ViewPair>(std::int64_t)> make, std::int64_t total,
                  std::int64_t capacity)
      : make_(std::move(make)), total_(total), capacity_(capacity) {
    if (capacity_ > 0) {
      worker_ = std::thread([this] { produce(); });
    }
  }

  ~BatchPrefetcher() {
    {
      std::lock_guard lock(mutex_);
      cancelled_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) {
      worker_.join();
    }
  }

  std::vector<ViewPair> pop(std::int64_t step) {
    if (capacity_ <= 0) {
      return make_(step);
    }
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [this] { return !queue_.empty(); });
    std::vector<ViewPair> batch = std::move(queue_.front());
    queue_.pop_front();
    lock.unlock();
    cv_.notify_all();
    return batch;
  }

 private:
  void produce() {
    for (std::int64_t step = 0; step < total_; ++step) {
      std::vector<ViewPair> batch = make_(step);
      std::unique_lock lock(mutex_);
      cv_.wait(lock, [this] {
        return cancelled_ || static_cast<std::int64_t>(queue_.size()) < capacity_;
      });
      if (cancelled_) {
        return;
      }
      queue_.push_back(std::move(batch));
      lock.unlock();
      cv_.notify_all();
    }
  }

  std::function<std::vector<ViewPair>(std::int64_t)> make_;
  std::int64_t total_;
  std::int64_t capacity_;
  std::thread worker_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::vector<ViewPair>> queue_;
  bool cancelled_ = false;
};

std::string format_metrics_row(std::int64_t step, const SslStepMetrics& m, std::int64_t wall_ms) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.17g,%.17g,%lld,%lld",
                static_cast<long long>(step), m.loss, m.lr, m.omega,
                static_cast<long long>(m.skipped_pairs), static_cast<long long>(wall_ms));
  return buf;
}

}  // namespace

void save_ssl_checkpoint(const std::string& path, const ParamStore& online,
                         const ParamStore& target, const LarsState& opt, std::int64_t step,
                         const std::string& rng_state) {
  Checkpoint ckpt;
  add_param_store(ckpt, "online.", online);
  add_param_store(ckpt, "target.", target);
  for (const auto& name : opt.names()) {
    const auto buf = opt.buffer(name);
    ckpt.add_f32("opt.momentum." + name, {static_cast<std::int64_t>(buf.size())},
                 std::vector<float>(buf.begin(), buf.end()));
  }
  ckpt.add_u64("meta.step", {static_cast<std::uint64_t>(step)});
  ckpt.add_u8("meta.rng", std::vector<std::uint8_t>(rng_state.begin(), rng_state.end()));
  ckpt.save(path);
}

std::pair<ParamStore, ParamStore> init_ssl_stores(const NetworkConfig& net, std::uint64_t seed) {
  Rng init_rng(Rng::split(seed, 0xa11c));
  ParamStore online = init_ssl_online(net, init_rng);
  ParamStore target = init_ssl_target(online);
  return {std::move(online), std::move(target)};
}

PretrainResult run_pretraining(const std::vector<Volume>& volumes, const NetworkConfig& net,
                               const AugmentConfig& aug, const AlignConfig& align_cfg,
                               const LossConfig& loss_cfg, const TrainerConfig& cfg,
                               const std::string& out_dir, bool log_wall_time) {
  auto [online, target] = init_ssl_stores(net, cfg.seed);
  LarsState opt(online, cfg.lars);

  const bool persist = !out_dir.empty();
  std::ofstream metrics_csv;
  if (persist) {
    std::filesystem::create_directories(out_dir);
    metrics_csv.open(out_dir + "/metrics.csv", std::ios::trunc);
    if (!metrics_csv) {
      throw IoError("run_pretraining: cannot open " + out_dir + "/metrics.csv");
    }
    metrics_csv << "step,loss,lr,omega,skipped_pairs,wall_ms\n";
    metrics_csv.flush();
  }

  BatchPrefetcher prefetcher(
      [&](std::int64_t step) {
        return make_ssl_batch(volumes, aug, cfg.view_shape, cfg.batch_size, cfg.seed, step);
      },
      cfg.steps, cfg.prefetch);

  PretrainResult result;
  Rng loop_rng(cfg.seed);  // serialized into checkpoints
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<ViewPair> batch = prefetcher.pop(step);
    const SslStepMetrics metrics =
        ssl_train_step(batch, online, target, opt, net, align_cfg, loss_cfg, cfg, step);
    std::int64_t wall_ms = 0;
    if (log_wall_time) {
      wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - start)
                    .count();
    }
    if (persist) {
      metrics_csv << format_metrics_row(step, metrics, wall_ms) << "\n";
      metrics_csv.flush();
    }
    result.history.push_back(metrics);
    result.final_loss = metrics.loss;
    ++result.steps_done;
    if (persist && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < cfg.steps) {
      const std::string path = out_dir + "/ckpt-" + std::to_string(step + 1) + ".pgl";
      save_ssl_checkpoint(path, online, target, opt, step + 1, loop_rng.serialize());
    }
  }
  if (persist) {
    result.final_checkpoint = out_dir + "/ckpt-final.pgl";
    save_ssl_checkpoint(result.final_checkpoint, online, target, opt, cfg.steps,
                        loop_rng.serialize());
  }
  result.online = std::move(online);
  result.target = std::move(target);
  return result;
}

// ---------------------------------------------------------------------------
// Fine-tuning loop
// ---------------------------------------------------------------------------

namespace {

struct LabeledBatch {
  Tensor32 inputs;
  std::vector<std::uint8_t> labels;
};

// Pure per-step batch builder: random labeled patches with optional
// label-exact flips and value-only intensity stages.
LabeledBatch make_finetune_batch(const std::vector<Volume>& volumes, const FinetuneRunConfig& cfg,
                                 std::int64_t step) {
  LabeledBatch out;
  std::vector<Tensor32> patches;
  for (std::int64_t b = 0; b < cfg.batch; ++b) {
    Rng rng(Rng::split(cfg.seed ^ 0xf17eULL, static_cast<std::uint64_t>(step) * 0x20003ULL +
                                                 static_cast<std::uint64_t>(b)));
    const auto vol_index =
        static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(volumes.size())));
    Patch patch = sample_patch(volumes[vol_index], cfg.patch_shape, rng);

    Tensor32 values = patch.values;
    std::vector<std::uint8_t> labels = std::move(patch.labels);
    if (cfg.augment_flips) {
      Bvec3 mask;
      for (int a = 0; a < 3; ++a) {
        mask[a] = rng.bernoulli(cfg.augment.flip_prob);
      }
      values = apply_flip(values, mask);
      // Flip the label map identically (integer reversal, exact).
      std::vector<std::uint8_t> flipped(labels.size());
      const Ivec3 d = cfg.patch_shape;
      for (std::int64_t dd = 0; dd < d[0]; ++dd) {
        const std::int64_t sd = mask[0] ? d[0] - 1 - dd : dd;
        for (std::int64_t hh = 0; hh < d[1]; ++hh) {
          const std::int64_t sh = mask[1] ? d[1] - 1 - hh : hh;
          for (std::int64_t ww = 0; ww < d[2]; ++ww) {
            const std::int64_t sw = mask[2] ? d[2] - 1 - ww : ww;
            flipped[static_cast<std::size_t>((dd * d[1] + hh) * d[2] + ww)] =
                labels[static_cast<std::size_t>((sd * d[1] + sh) * d[2] + sw)];
          }
        }
      }
      labels = std::move(flipped);
    }
    if (cfg.augment_intensity) {
      TransformRecord scratch;
      values = intensity_pipeline(values, rng, scratch, cfg.augment);
    }
    patches.push_back(std::move(values));
    out.labels.insert(out.labels.end(), labels.begin(), labels.end());
  }
  out.inputs = stack_views(patches);
  return out;
}

}  // namespace

FinetuneResult run_finetune(const std::vector<Volume>& train, const std::vector<Volume>& val,
                            ParamStore seg, const NetworkConfig& net, const LossConfig& loss_cfg,
                            const FinetuneRunConfig& cfg, const std::string& out_dir) {
  if (train.empty()) {
    throw ConfigError("run_finetune: no training volumes");
  }
  for (const Volume& vol : train) {
    if (!vol.has_labels()) {
      throw ConfigError("run_finetune: training volume " + vol.provenance + " has no labels");
    }
  }
  SgdState opt(seg, cfg.sgd);

  const bool persist = !out_dir.empty();
  std::ofstream csv;
  if (persist) {
    std::filesystem::create_directories(out_dir);
    csv.open(out_dir + "/finetune_metrics.csv", std::ios::trunc);
    if (!csv) {
      throw IoError("run_finetune: cannot open " + out_dir + "/finetune_metrics.csv");
    }
    csv << "step,loss,lr,val_mean_dice";
    for (std::int64_t c = 1; c < net.num_classes; ++c) {
      csv << ",val_dice_" << c;
    }
    csv << "\n";
    csv.flush();
  }

  FinetuneResult result;
  const auto validate = [&](std::int64_t step) {
    if (val.empty()) {
      return;
    }
    const EvalReport report = evaluate_volumes(seg, net, val, cfg.patch_shape);
    ValidationPoint point;
    point.step = step;
    point.mean_dice = report.mean_dice;
    for (const auto& m : report.per_class) {
      point.per_class_dice.push_back(m.dice);
    }
    result.validations.push_back(point);
    result.final_mean_dice = report.mean_dice;
  };

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const LabeledBatch batch = make_finetune_batch(train, cfg, step);
    const Tensor32 onehot =
        one_hot_labels(batch.labels, cfg.batch, cfg.patch_shape, net.num_classes);
    const double lr = cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.lr);
    const FinetuneStepMetrics metrics =
        finetune_step(batch.inputs, onehot, seg, opt, net, loss_cfg, lr, cfg.freeze_encoder);
    result.history.push_back(metrics);

    const bool eval_now =
        (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || step + 1 == cfg.steps;
    const std::size_t validations_before = result.validations.size();
    if (eval_now) {
      validate(step + 1);
    }
    if (persist) {
      char row[128];
      std::snprintf(row, sizeof(row), "%lld,%.9g,%.17g", static_cast<long long>(step),
                    metrics.loss, metrics.lr);
      csv << row;
      if (result.validations.size() > validations_before) {
        const ValidationPoint& point = result.validations.back();
        char cell[48];
        std::snprintf(cell, sizeof(cell), ",%.9g", point.mean_dice);
        csv << cell;
        for (const double d : point.per_class_dice) {
          std::snprintf(cell, sizeof(cell), ",%.9g", d);
          csv << cell;
        }
      } else {
        for (std::int64_t c = 0; c < net.num_classes; ++c) {
          csv << ",";
        }
      }
      csv << "\n";
      csv.flush();
    }
  }

  if (persist) {
    Checkpoint ckpt;
    add_param_store(ckpt, "seg.", seg);
    ckpt.add_u64("meta.step", {static_cast<std::uint64_t>(cfg.steps)});
    ckpt.save(out_dir + "/seg-final.pgl");
  }
  result.seg = std::move(seg);
  return result;
}

}  // namespace pgl
