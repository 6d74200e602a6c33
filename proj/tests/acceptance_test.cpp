// Acceptance suite: one runnable check per release criterion, selected by
// number on the command line (all of them when none is given). Each criterion
// prints a single PASS/FAIL line; the process exits nonzero if any selected
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <sstream>
#include <string>
#include <vector>

#include "common/gradcheck.hpp"
#include "common/oracles.hpp"
#include "pgl/align.hpp"
#include "pgl/augment.hpp"
#include "pgl/checkpoint.hpp"
#include "pgl/cli.hpp"
#include "pgl/config.hpp"
#include "pgl/data.hpp"
#include "pgl/eval.hpp"
#include "pgl/loss.hpp"
#include "pgl/networks.hpp"
#include "pgl/rng.hpp"
#include "pgl/tensor.hpp"
#include "pgl/trainer.hpp"

namespace pgl {
namespace {

namespace fs = std::filesystem;
using testing::bit_identical;
using testing::brute_force_axis_overlap;
using testing::feature_coord_oracle;
using testing::grid_box;
using testing::max_grad_rel_error;
using testing::overlap_fraction_oracle;
using testing::random_tensor;

struct CheckFailure {
  std::string detail;
};

#define REQUIRE(cond, msg)                  \
  do {                                      \
    if (!(cond)) throw CheckFailure{(msg)}; \
  } while (0)

std::string fmt(const char* format, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

/// Runs independent jobs on two workers; each job is single-threaded and
/// deterministic on its own, so the schedule cannot change any result.
template <class T>
std::vector<T> parallel_map(const std::vector<std::function<T()>>& jobs) {
  std::vector<T> results(jobs.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
      results[i] = jobs[i]();
    }
  };
  std::thread side(worker);
  worker();
  side.join();
  return results;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(fs::temp_directory_path() /
              ("pgl_acceptance_" + tag + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string dir() const { return path_.string(); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

std::vector<Volume> synth_dataset(int count, std::uint64_t seed, const SynthSpec& spec = {}) {
  std::vector<Volume> volumes;
  for (int i = 0; i < count; ++i) {
    Rng rng(Rng::split(seed, static_cast<std::uint64_t>(i)));
    volumes.push_back(preprocess(synth_generate(spec, rng), -1024, 325));
  }
  return volumes;
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

std::string criterion_gradients() {
  const auto start = std::chrono::steady_clock::now();
  const int instances = 20;
  double worst = 0.0;

  const auto track = [&worst](double err, double tol, const char* op) {
    worst = std::max(worst, err);
    REQUIRE(err <= tol, fmt("%s gradient error %.3g exceeds %.1g", op, err, tol));
  };

  for (int i = 0; i < instances; ++i) {
    Rng rng(1000 + static_cast<std::uint64_t>(i));

    {  // conv3d, including grouped/dilated variants
      const std::int64_t groups = i % 4 == 3 ? 2 : 1;
      const std::int64_t cin = 2 * groups;
      const std::int64_t cout = 2 * groups;
      const std::int64_t k = 1 + i % 3;
      Conv3dSpec spec;
      spec.stride = {1 + i % 2, 1, 1 + (i / 2) % 2};
      spec.padding = {k / 2, k / 2, k / 2};
      spec.dilation = {1, 1 + i % 2, 1};
      spec.groups = groups;
      Tensor64 x = random_tensor<double>({1 + i % 2, cin, 4, 5, 5}, rng);
      Tensor64 w = random_tensor<double>({cout, cin / groups, k, k, k}, rng);
      Tensor64 b = random_tensor<double>({cout}, rng);
      std::vector<Tensor64> leaves{x, w, b};
      Tensor64 probe;
      {  // one untaped forward discovers the output shape for the probe
        Tape<double>::Scope off(nullptr);
        probe = random_tensor<double>(conv3d<double>(x, w, b, spec).shape(), rng);
      }
      const auto build = [&] { return sum_all(mul(conv3d<double>(x, w, b, spec), probe)); };
      track(max_grad_rel_error(leaves, build), 1e-5, "conv3d");
    }

    {  // batchnorm3d (training mode)
      Tensor64 x = random_tensor<double>({2, 2, 3, 3, 3}, rng);
      Tensor64 gamma = random_tensor<double>({2}, rng, 0.5, 1.5);
      Tensor64 beta = random_tensor<double>({2}, rng);
      Tensor64 rm = Tensor64::zeros({2});
      Tensor64 rv = Tensor64::full({2}, 1.0);
      Tensor64 probe = random_tensor<double>({2, 2, 3, 3, 3}, rng);
      std::vector<Tensor64> leaves{x, gamma, beta};
      track(max_grad_rel_error(leaves,
                               [&] {
                                 return sum_all(mul(batchnorm3d<double>(x, gamma, beta, rm, rv,
                                                                        0.1, 1e-5, true, false),
                                                    probe));
                               }),
            1e-4, "batchnorm3d");
    }

    {  // relu, sampled away from the kink at 0
      Tensor64 x = random_tensor<double>({3, 4, 4}, rng, 0.05, 2.0);
      auto vals = x.mutable_data();
      for (std::size_t j = 0; j < vals.size(); ++j) {
        if (j % 2 == 0) vals[j] = -vals[j];
      }
      Tensor64 probe = random_tensor<double>({3, 4, 4}, rng);
      std::vector<Tensor64> leaves{x};
      track(max_grad_rel_error(leaves, [&] { return sum_all(mul(relu(x), probe)); }), 1e-5,
            "relu");
    }

    {  // trilinear_sample (linear in values; clamped points included)
      Tensor64 x = random_tensor<double>({1, 2, 3, 4, 4}, rng);
      std::vector<Dvec3> points;
      for (int p = 0; p < 12; ++p) {
        points.push_back(
            {rng.uniform(-1.0, 3.5), rng.uniform(-1.0, 4.5), rng.uniform(-1.0, 4.5)});
      }
      Tensor64 probe = random_tensor<double>({1, 2, 12}, rng);
      std::vector<Tensor64> leaves{x};
      track(max_grad_rel_error(
                leaves, [&] { return sum_all(mul(trilinear_sample(x, points), probe)); }),
            1e-5, "trilinear_sample");
    }

    {  // l2_normalize, inputs bounded away from the eps guard
      Tensor64 x = random_tensor<double>({2, 3, 2, 2, 2}, rng, 0.1, 2.0);
      auto vals = x.mutable_data();
      for (std::size_t j = 0; j < vals.size(); ++j) {
        if ((j / 3) % 2 == 0) vals[j] = -vals[j];
      }
      Tensor64 probe = random_tensor<double>({2, 3, 2, 2, 2}, rng);
      std::vector<Tensor64> leaves{x};
      track(max_grad_rel_error(
                leaves, [&] { return sum_all(mul(l2_normalize_channels(x, 1e-9), probe)); }),
            1e-5, "l2_normalize");
    }

    {  // extract_aligned
      Tensor64 f = random_tensor<double>({1 + i % 2, 2, 3, 4, 4}, rng);
      FeatureRoI roi;
      roi.feature_shape = {3, 4, 4};
      for (int a = 0; a < 3; ++a) {
        const double hi = static_cast<double>(roi.feature_shape[a]);
        const double s = rng.uniform(0.0, hi - 0.5);
        roi.start[a] = s;
        roi.end[a] = rng.uniform(s + 0.25, hi);
      }
      Tensor64 probe = random_tensor<double>({f.dim(0), 2, 3, 4, 4}, rng);
      std::vector<Tensor64> leaves{f};
      const std::int64_t spb = 1 + i % 2;
      track(max_grad_rel_error(leaves,
                               [&] {
                                 return sum_all(mul(extract_aligned(f, roi, {3, 4, 4}, spb), probe));
                               }),
            1e-5, "extract_aligned");
    }

    {  // local consistency loss
      Tensor64 online = random_tensor<double>({2, 4, 2, 2, 2}, rng, -2.0, 2.0);
      Tensor64 target = random_tensor<double>({2, 4, 2, 2, 2}, rng, -2.0, 2.0);
      std::vector<Tensor64> leaves{online};
      track(max_grad_rel_error(
                leaves, [&] { return local_consistency<double>(online, stop_gradient(target)); }),
            1e-5, "local_consistency");
    }

    {  // dice + cross-entropy, both variants, away from the log clamp
      Tensor64 pred = random_tensor<double>({3, 4, 4}, rng, 0.05, 0.95);
      std::vector<double> gt_vals(48);
      for (auto& v : gt_vals) {
        v = rng.bernoulli(0.4) ? 1.0 : 0.0;
      }
      Tensor64 gt = Tensor64::from({3, 4, 4}, std::move(gt_vals));
      std::vector<Tensor64> leaves{pred};
      track(max_grad_rel_error(leaves, [&] { return dice_ce_binary<double>(pred, gt, 1e-5); }),
            1e-5, "dice_ce_binary");

      Tensor64 mpred = random_tensor<double>({2, 3, 2, 2, 2}, rng, 0.05, 0.95);
      std::vector<double> onehot(static_cast<std::size_t>(mpred.numel()), 0.0);
      for (std::int64_t n = 0; n < 2; ++n) {
        for (std::int64_t s = 0; s < 8; ++s) {
          onehot[static_cast<std::size_t>((n * 3 + rng.uniform_int(3)) * 8 + s)] = 1.0;
        }
      }
      Tensor64 mgt = Tensor64::from(mpred.shape(), std::move(onehot));
      std::vector<Tensor64> mleaves{mpred};
      track(max_grad_rel_error(mleaves,
                               [&] { return dice_ce_multiclass<double>(mpred, mgt, 1e-5, 3); }),
            1e-5, "dice_ce_multiclass");
    }
  }

  const double elapsed = seconds_since(start);
  REQUIRE(elapsed < 120.0, fmt("gradient suite took %.1fs, budget is 120s", elapsed));
  return fmt("%d instances per op, worst relative error %.2e, %.1fs", instances, worst, elapsed);
}

// ---------------------------------------------------------------------------
// 2. Alignment oracle
// ---------------------------------------------------------------------------

std::string criterion_alignment_oracle() {
  Rng rng(2024);
  const Ivec3 source{12, 45, 45};
  const Ivec3 view{8, 32, 32};
  const Ivec3 stride{4, 8, 8};
  const Ivec3 feat{2, 4, 4};
  const int pairs = 1000;
  for (int i = 0; i < pairs; ++i) {
    const auto [rec1, rec2] = sample_crop_pair(source, view, rng);
    const auto overlap = compute_overlap(rec1, rec2);
    REQUIRE(overlap.has_value(), "sampler produced a non-overlapping pair");
    const auto g1 = grid_box(rec1);
    const auto g2 = grid_box(rec2);
    for (int a = 0; a < 3; ++a) {
      const auto range = brute_force_axis_overlap(g1.start[a], g1.end[a], g2.start[a], g2.end[a],
                                                  source[a] * kCropGrid);
      REQUIRE(!range.empty, "oracle found an empty axis the closed form missed");
      const auto o1s = std::llround(overlap->first.start[a] * kCropGrid);
      const auto o1e = std::llround(overlap->first.end[a] * kCropGrid);
      const auto o2s = std::llround(overlap->second.start[a] * kCropGrid);
      const auto o2e = std::llround(overlap->second.end[a] * kCropGrid);
      REQUIRE(o1s + g1.start[a] == range.lo && o1e + g1.start[a] == range.hi,
              fmt("pair %d axis %d: view-1 box disagrees with the voxel oracle", i, a));
      REQUIRE(o2s + g2.start[a] == range.lo && o2e + g2.start[a] == range.hi,
              fmt("pair %d axis %d: view-2 box disagrees with the voxel oracle", i, a));
      // Both views reconstruct the identical source region, exactly.
      REQUIRE(overlap->first.start[a] + rec1.crop_start[a] ==
                  overlap->second.start[a] + rec2.crop_start[a],
              "source-region reconstruction differs between views");
      REQUIRE(overlap->first.end[a] + rec1.crop_start[a] ==
                  overlap->second.end[a] + rec2.crop_start[a],
              "source-region reconstruction differs between views");
    }
    const FeatureRoI roi1 = to_feature_coords(overlap->first, rec1, stride, feat);
    const FeatureRoI roi2 = to_feature_coords(overlap->second, rec2, stride, feat);
    for (int a = 0; a < 3; ++a) {
      const auto check = [&](const OverlapBox& box, const TransformRecord& rec,
                             const FeatureRoI& roi) {
        const auto crop = std::llround((rec.crop_end[a] - rec.crop_start[a]) * kCropGrid);
        const double lo =
            feature_coord_oracle(std::llround(box.start[a] * kCropGrid), view[a], crop, stride[a]);
        const double hi =
            feature_coord_oracle(std::llround(box.end[a] * kCropGrid), view[a], crop, stride[a]);
        REQUIRE(std::abs(roi.start[a] - lo) <= 1e-9 && std::abs(roi.end[a] - hi) <= 1e-9,
                fmt("pair %d axis %d: feature mapping off the center-mapping arithmetic", i, a));
      };
      check(overlap->first, rec1, roi1);
      check(overlap->second, rec2, roi2);
    }
  }
  return fmt("%d record pairs match the voxel-mapping oracle exactly", pairs);
}

// ---------------------------------------------------------------------------
// 3. Identity-pair zero loss
// ---------------------------------------------------------------------------

std::string criterion_identity_pair() {
  NetworkConfig net = NetworkConfig::desk();
  net.predictor_mode = PredictorMode::kIdentity;
  auto [online, target] = init_ssl_stores(net, 3);

  const std::vector<Volume> volumes = synth_dataset(1, 30);
  AugmentConfig aug;
  aug.intensity = false;
  Rng rng(31);
  const Patch patch =
      sample_patch(volumes[0], ssl_source_shape({8, 32, 32}, aug.max_scale), rng);
  auto [rec1, rec2] = sample_crop_pair({12, 45, 45}, {8, 32, 32}, rng, aug);
  rec2 = rec1;
  ViewPair pair;
  pair.view1 = apply_flip(apply_crop_resize(patch.values, rec1), rec1.flip);
  pair.view2 = apply_flip(apply_crop_resize(patch.values, rec2), rec2.flip);
  pair.rec1 = rec1;
  pair.rec2 = rec2;

  TrainerConfig cfg;
  cfg.batch_size = 1;
  cfg.steps = 10;
  cfg.warmup_steps = 1;
  LarsState opt(online, cfg.lars);
  const SslStepMetrics metrics =
      ssl_train_step({pair}, online, target, opt, net, {}, {}, cfg, 0);
  REQUIRE(std::abs(metrics.loss) <= 1e-6,
          fmt("identity pair produced loss %.3g, expected 0 within 1e-6", metrics.loss));
  return fmt("total loss %.3g with identical transforms and shared weights", metrics.loss);
}

// ---------------------------------------------------------------------------
// 4. Loss bounds and invariances
// ---------------------------------------------------------------------------

std::string criterion_loss_bounds() {
  Rng rng(4004);
  for (int i = 0; i < 1000; ++i) {
    // Single-position pair: the per-position loss lies in [0, 4].
    Tensor32 a = random_tensor<float>({1, 6, 1, 1, 1}, rng, -5.0, 5.0);
    Tensor32 b = random_tensor<float>({1, 6, 1, 1, 1}, rng, -5.0, 5.0);
    const float per_position = local_consistency<float>(a, b).item();
    REQUIRE(per_position >= 0.0f && per_position <= 4.0f + 1e-6f,
            fmt("per-position loss %.6f outside [0, 4]", per_position));

    // Symmetrized total over full feature maps lies in [0, 8].
    Tensor32 f1 = random_tensor<float>({2, 4, 2, 2, 2}, rng, -3.0, 3.0);
    Tensor32 f2 = random_tensor<float>({2, 4, 2, 2, 2}, rng, -3.0, 3.0);
    const float total =
        local_consistency<float>(f1, f2).item() + local_consistency<float>(f2, f1).item();
    REQUIRE(total >= 0.0f && total <= 8.0f + 1e-6f, fmt("total %.6f outside [0, 8]", total));

    if (i < 100) {
      // Positive per-position rescaling of either argument is absorbed.
      const double factor = rng.uniform(0.01, 50.0);
      std::vector<float> scaled(f1.data().begin(), f1.data().end());
      for (auto& v : scaled) v = static_cast<float>(v * factor);
      const float rescaled =
          local_consistency<float>(Tensor32::from(f1.shape(), std::move(scaled)), f2).item();
      REQUIRE(std::abs(rescaled - local_consistency<float>(f1, f2).item()) < 1e-6f,
              "rescaling changed the loss by 1e-6 or more");
    }
  }
  return "per-position in [0,4], symmetrized in [0,8], scale-invariant over 1000 draws";
}

// ---------------------------------------------------------------------------
// 5. EMA / stop-gradient
// ---------------------------------------------------------------------------

std::string criterion_ema_stop_gradient() {
  TempDir dir("ema");
  const NetworkConfig net = NetworkConfig::desk();
  const std::vector<Volume> volumes = synth_dataset(3, 50);
  TrainerConfig cfg;
  cfg.seed = 5;
  cfg.steps = 12;
  cfg.warmup_steps = 2;
  cfg.batch_size = 2;
  cfg.checkpoint_every = 4;
  cfg.base_lr = 0.05;

  // Reference run with persisted logs and checkpoints.
  run_pretraining(volumes, net, {}, {}, {}, cfg, dir.dir());

  // Parse the omega log.
  std::ifstream csv(dir.file("metrics.csv"));
  std::string line;
  std::getline(csv, line);  // header
  std::vector<double> omegas;
  while (std::getline(csv, line)) {
    std::istringstream cells(line);
    std::string cell;
    for (int i = 0; i < 4; ++i) {
      std::getline(cells, cell, ',');
    }
    omegas.push_back(std::stod(cell));
  }
  REQUIRE(static_cast<std::int64_t>(omegas.size()) == cfg.steps, "omega log incomplete");
  REQUIRE(omegas.front() == ema_omega(0, cfg.steps, cfg.ema_base) && omegas.front() == 0.996,
          "omega(0) != 0.996");
  REQUIRE(ema_omega(cfg.steps, cfg.steps, cfg.ema_base) == 1.0, "omega(total) != 1.0");

  // Deterministic replication of the same trajectory, checking the target's
  // gradients and replaying the EMA line from the logged omegas.
  auto [online, target] = init_ssl_stores(net, cfg.seed);
  ParamStore replay = init_ssl_target(online);
  LarsState opt(online, cfg.lars);
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const auto batch = make_ssl_batch(volumes, {}, cfg.view_shape, cfg.batch_size, cfg.seed, step);
    ssl_train_step(batch, online, target, opt, net, {}, {}, cfg, step);

    double target_grad_norm = 0.0;
    for (const auto& name : target.names()) {
      for (const float g : target.at(name).grad()) {
        target_grad_norm += static_cast<double>(g) * g;
      }
    }
    REQUIRE(target_grad_norm == 0.0,
            fmt("target gradient norm %.3g at step %lld is not exactly 0", target_grad_norm,
                static_cast<long long>(step)));

    ema_update(replay, online, omegas[static_cast<std::size_t>(step)]);

    const bool at_checkpoint = cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
                               step + 1 < cfg.steps;
    const bool at_final = step + 1 == cfg.steps;
    if (at_checkpoint || at_final) {
      const std::string path =
          at_final ? dir.file("ckpt-final.pgl") : dir.file("ckpt-" + std::to_string(step + 1) + ".pgl");
      const Checkpoint ckpt = Checkpoint::load(path);
      ParamStore stored = init_ssl_target(online);
      load_param_store(ckpt, "target.", stored);
      for (const auto& name : stored.names()) {
        REQUIRE(bit_identical(stored.at(name), replay.at(name)),
                "replayed target diverges from the stored checkpoint at " + name);
        REQUIRE(bit_identical(stored.at(name), target.at(name)),
                "live target diverges from the stored checkpoint at " + name);
      }
    }
  }
  return fmt("%lld steps: zero target gradients, log-replayed EMA bit-exact at 3 checkpoints",
             static_cast<long long>(cfg.steps));
}

// ---------------------------------------------------------------------------
// 6. Training smoke
// ---------------------------------------------------------------------------

std::string criterion_training_smoke() {
  const NetworkConfig net = NetworkConfig::desk();
  const std::vector<Volume> volumes = synth_dataset(10, 60);
  const auto start = std::chrono::steady_clock::now();

  std::vector<std::function<std::pair<bool, double>()>> jobs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    jobs.push_back([&, seed] {
      TrainerConfig cfg;
      cfg.seed = seed;
      cfg.steps = 200;
      cfg.warmup_steps = 20;
      cfg.batch_size = 4;
      cfg.base_lr = 0.05;
      cfg.prefetch = 0;
      const PretrainResult result = run_pretraining(volumes, net, {}, {}, {}, cfg, "");
      double first = 0.0, last = 0.0;
      for (int i = 0; i < 50; ++i) {
        first += result.history[static_cast<std::size_t>(i)].loss;
        last += result.history[static_cast<std::size_t>(150 + i)].loss;
      }
      for (const auto& m : result.history) {
        if (!std::isfinite(m.loss)) {
          return std::make_pair(false, 0.0);
        }
      }
      return std::make_pair(last / 50.0 < first / 50.0, (first - last) / 50.0);
    });
  }
  const auto results = parallel_map(jobs);
  int decreased = 0;
  for (const auto& [ok, delta] : results) {
    decreased += ok ? 1 : 0;
  }
  const double elapsed = seconds_since(start);
  REQUIRE(decreased >= 4, fmt("loss decreased in %d of 5 seeds, need at least 4", decreased));
  REQUIRE(elapsed < 600.0, fmt("smoke runs took %.0fs, budget is 600s", elapsed));
  return fmt("loss decreased in %d/5 seeds over 200 steps, %.0fs total", decreased, elapsed);
}

// ---------------------------------------------------------------------------
// 7 & 8. Transfer and ablation ordering
// ---------------------------------------------------------------------------

struct TransferSetup {
  NetworkConfig net = NetworkConfig::desk();
  LossConfig loss;
  std::vector<Volume> pretrain_vols = synth_dataset(10, 700);
  std::vector<Volume> train_vols = synth_dataset(2, 701);
  std::vector<Volume> val_vols = synth_dataset(2, 702);
};

ParamStore pretrain_arm(const TransferSetup& setup, const AugmentConfig& aug,
                        const AlignConfig& align_cfg, std::uint64_t seed, std::int64_t steps) {
  TrainerConfig cfg;
  cfg.seed = seed;
  cfg.steps = steps;
  cfg.warmup_steps = 20;
  cfg.batch_size = 4;
  cfg.base_lr = 0.05;
  cfg.prefetch = 0;
  return run_pretraining(setup.pretrain_vols, setup.net, aug, align_cfg, setup.loss, cfg, "")
      .online;
}

double finetune_mean_dice(const TransferSetup& setup, const ParamStore* pretrained,
                          std::uint64_t seed) {
  Rng rng(Rng::split(seed, 0x5e6));
  ParamStore seg = init_segmentation(setup.net, rng);
  if (pretrained != nullptr) {
    for (const auto& name : seg.names()) {
      if (name.starts_with("encoder.")) {
        const Tensor32& src = pretrained->at(name);
        auto dst = seg.at(name).mutable_data();
        std::copy(src.data().begin(), src.data().end(), dst.begin());
      }
    }
  }
  FinetuneRunConfig cfg;
  cfg.seed = seed;
  cfg.lr = 0.01;
  cfg.steps = 300;
  cfg.batch = 4;
  cfg.eval_every = 0;  // validate at the end only
  cfg.patch_shape = {8, 32, 32};
  const FinetuneResult result =
      run_finetune(setup.train_vols, setup.val_vols, std::move(seg), setup.net, setup.loss, cfg, "");
  return result.final_mean_dice;
}

std::string criterion_transfer_direction() {
  TransferSetup setup;
  const ParamStore pgl = pretrain_arm(setup, {}, {}, 0, 400);

  std::vector<std::function<double()>> jobs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    jobs.push_back([&, seed] { return finetune_mean_dice(setup, &pgl, seed); });
  }
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    jobs.push_back([&, seed] { return finetune_mean_dice(setup, nullptr, seed); });
  }
  const auto dices = parallel_map(jobs);
  double mean_pgl = 0.0, mean_random = 0.0;
  for (int i = 0; i < 5; ++i) {
    mean_pgl += dices[static_cast<std::size_t>(i)] / 5.0;
    mean_random += dices[static_cast<std::size_t>(5 + i)] / 5.0;
  }
  REQUIRE(mean_pgl >= mean_random,
          fmt("pretrained mean dice %.4f below random-init mean %.4f", mean_pgl, mean_random));
  return fmt("mean validation dice: pretrained %.4f >= random %.4f over 5 seeds", mean_pgl,
             mean_random);
}

std::string criterion_ablation_ordering() {
  TransferSetup setup;
  const std::int64_t ssl_steps = 400;

  AugmentConfig aug_full;
  AlignConfig align_full;

  AugmentConfig aug_no_flip = aug_full;
  aug_no_flip.flip_prob = 0.0;
  AlignConfig align_no_flip;
  align_no_flip.use_flipalign = false;

  // Removing cropping/scaling: both views cover the whole (view-sized)
  // source patch, so their crop boxes coincide.
  AugmentConfig aug_no_cs = aug_full;
  aug_no_cs.min_scale = 1.0;
  aug_no_cs.max_scale = 1.0;
  AlignConfig align_no_cs;
  align_no_cs.use_csalign = false;

  AugmentConfig aug_neither = aug_no_cs;
  aug_neither.flip_prob = 0.0;
  AlignConfig align_neither;
  align_neither.use_flipalign = false;
  align_neither.use_csalign = false;

  std::vector<std::function<ParamStore()>> arm_jobs{
      [&] { return pretrain_arm(setup, aug_full, align_full, 0, ssl_steps); },
      [&] { return pretrain_arm(setup, aug_no_flip, align_no_flip, 0, ssl_steps); },
      [&] { return pretrain_arm(setup, aug_no_cs, align_no_cs, 0, ssl_steps); },
      [&] { return pretrain_arm(setup, aug_neither, align_neither, 0, ssl_steps); },
  };
  const auto arms = parallel_map(arm_jobs);
  const ParamStore& full = arms[0];
  const ParamStore& no_flip = arms[1];
  const ParamStore& no_cs = arms[2];
  const ParamStore& neither = arms[3];

  std::vector<std::function<double()>> jobs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (const ParamStore* arm : {&full, &no_flip, &no_cs, &neither}) {
      jobs.push_back([&, arm, seed] { return finetune_mean_dice(setup, arm, seed); });
    }
  }
  const auto dices = parallel_map(jobs);

  int ordered = 0;
  std::string detail;
  for (int seed = 0; seed < 5; ++seed) {
    const double d_full = dices[static_cast<std::size_t>(seed * 4 + 0)];
    const double d_no_flip = dices[static_cast<std::size_t>(seed * 4 + 1)];
    const double d_no_cs = dices[static_cast<std::size_t>(seed * 4 + 2)];
    const double d_neither = dices[static_cast<std::size_t>(seed * 4 + 3)];
    const bool ok = d_full >= d_no_flip && d_full >= d_no_cs && d_no_flip >= d_neither &&
                    d_no_cs >= d_neither;
    ordered += ok ? 1 : 0;
    detail += fmt("[seed %d: full %.3f, w/oF %.3f, w/oCS %.3f, w/oF&CS %.3f]", seed + 1, d_full,
                  d_no_flip, d_no_cs, d_neither);
  }
  REQUIRE(ordered >= 3, fmt("arm ordering held in %d of 5 seeds, need 3 %s", ordered,
                            detail.c_str()));
  return fmt("ordering held in %d/5 seeds %s", ordered, detail.c_str());
}

// ---------------------------------------------------------------------------
// 9. Determinism and persistence
// ---------------------------------------------------------------------------

std::string criterion_determinism() {
  TempDir dir("determinism");
  const int gen = cmd_gendata("", dir.file("data"), 3, 9, "pretrain", {});
  REQUIRE(gen == kExitOk, "gendata failed");
  {
    std::ofstream cfg(dir.file("run.cfg"));
    cfg << "[data]\nmanifest = " << dir.file("data/manifest.txt") << "\n"
        << "[trainer]\nsteps = 10\nwarmup_steps = 2\nbatch_size = 2\n"
        << "[output]\ndir = " << dir.file("out_a") << "\n";
  }
  REQUIRE(cmd_pretrain(dir.file("run.cfg"), {}) == kExitOk, "first pretrain run failed");
  REQUIRE(cmd_pretrain(dir.file("run.cfg"), {{"output.dir", dir.file("out_b")}}) == kExitOk,
          "second pretrain run failed");

  const auto read = [](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  };
  const std::string csv_a = read(dir.file("out_a/metrics.csv"));
  REQUIRE(!csv_a.empty() && csv_a == read(dir.file("out_b/metrics.csv")),
          "metrics CSVs differ between identically seeded runs");
  REQUIRE(read(dir.file("out_a/ckpt-final.pgl")) == read(dir.file("out_b/ckpt-final.pgl")),
          "checkpoints differ between identically seeded runs");

  // save -> load -> forward is bit-identical to the pre-save forward.
  const NetworkConfig net = NetworkConfig::desk();
  const std::vector<Volume> volumes = synth_dataset(2, 90);
  TrainerConfig cfg;
  cfg.seed = 9;
  cfg.steps = 6;
  cfg.warmup_steps = 1;
  cfg.batch_size = 2;
  const PretrainResult result = run_pretraining(volumes, net, {}, {}, {}, cfg, dir.file("out_c"));
  const Checkpoint ckpt = Checkpoint::load(dir.file("out_c/ckpt-final.pgl"));
  auto [reloaded, reloaded_target] = init_ssl_stores(net, 12345);
  load_param_store(ckpt, "online.", reloaded);
  Rng data_rng(91);
  Tensor32 x = random_tensor<float>({1, 1, 8, 32, 32}, data_rng);
  ParamStore in_memory = result.online.clone();
  const Tensor32 before = encode(in_memory, x, net.encoder, false, false);
  const Tensor32 after = encode(reloaded, x, net.encoder, false, false);
  REQUIRE(bit_identical(before, after), "forward after save/load differs from pre-save forward");
  return "bit-identical metrics and checkpoints across reruns; save/load/forward exact";
}

// ---------------------------------------------------------------------------
// 10. Augmentation statistics
// ---------------------------------------------------------------------------

std::string criterion_augmentation_statistics() {
  Rng vol_rng(1010);
  SynthSpec spec;
  spec.dims = {14, 26, 26};
  const Volume vol = preprocess(synth_generate(spec, vol_rng), -1024, 325);
  const Ivec3 view{8, 16, 16};
  const Ivec3 source = ssl_source_shape(view, 1.4);

  Rng rng(1011);
  const int draws = 10000;
  std::int64_t flips[3] = {0, 0, 0};
  double scale_min = 10.0, scale_max = 0.0;
  std::int64_t applied_noise = 0, applied_blur = 0, applied_brightness = 0, applied_gamma = 0;
  Rng patch_rng(1012);
  const Patch patch = sample_patch(vol, source, patch_rng);

  for (int i = 0; i < draws; ++i) {
    const ViewPair pair = make_view_pair(patch.values, view, rng);
    for (const TransformRecord* rec : {&pair.rec1, &pair.rec2}) {
      for (int a = 0; a < 3; ++a) {
        flips[a] += rec->flip[a] ? 1 : 0;
        const double scale = rec->crop_shape()[a] / static_cast<double>(view[a]);
        scale_min = std::min(scale_min, scale);
        scale_max = std::max(scale_max, scale);
      }
      applied_noise += rec->noise_variance.has_value();
      applied_blur += rec->blur_sigma.has_value();
      applied_brightness += rec->brightness.has_value();
      applied_gamma += rec->gamma.has_value();
    }
    REQUIRE(overlap_fraction_oracle(pair.rec1, pair.rec2) >= 0.10 &&
                overlap_fraction_oracle(pair.rec2, pair.rec1) >= 0.10,
            fmt("draw %d violates the 10%% overlap floor", i));
  }

  const double n = 2.0 * draws;
  for (int a = 0; a < 3; ++a) {
    const double freq = static_cast<double>(flips[a]) / n;
    REQUIRE(freq >= 0.45 && freq <= 0.55, fmt("axis %d flip frequency %.3f outside [0.45, 0.55]", a, freq));
  }
  REQUIRE(scale_min >= 1.1 && scale_max <= 1.4,
          fmt("crop scales [%.4f, %.4f] escape [1.1, 1.4]", scale_min, scale_max));

  const auto check_rate = [&](std::int64_t count, double expected, const char* op) {
    const double rate = static_cast<double>(count) / n;
    REQUIRE(std::abs(rate - expected) <= 0.03,
            fmt("%s application rate %.3f deviates more than 3%% from %.2f", op, rate, expected));
    return rate;
  };
  const double r_noise = check_rate(applied_noise, 0.10, "noise");
  const double r_blur = check_rate(applied_blur, 0.20, "blur");
  const double r_brightness = check_rate(applied_brightness, 0.50, "brightness");
  const double r_gamma = check_rate(applied_gamma, 0.50, "gamma");

  return fmt("10k draws: flips ~0.5/axis, scales in [%.3f, %.3f], rates %.3f/%.3f/%.3f/%.3f",
             scale_min, scale_max, r_noise, r_blur, r_brightness, r_gamma);
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* name;
  std::function<std::string()> run;
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> list{
      {1, "gradient suite", criterion_gradients},
      {2, "alignment oracle", criterion_alignment_oracle},
      {3, "identity-pair zero loss", criterion_identity_pair},
      {4, "loss bounds and invariances", criterion_loss_bounds},
      {5, "EMA and stop-gradient", criterion_ema_stop_gradient},
      {6, "training smoke", criterion_training_smoke},
      {7, "transfer direction", criterion_transfer_direction},
      {8, "ablation ordering", criterion_ablation_ordering},
      {9, "determinism and persistence", criterion_determinism},
      {10, "augmentation statistics", criterion_augmentation_statistics},
  };
  return list;
}

}  // namespace
}  // namespace pgl

int main(int argc, char** argv) {
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    selected.push_back(std::atoi(argv[i]));
  }
  bool all_passed = true;
  for (const auto& criterion : pgl::criteria()) {
    if (!selected.empty() &&
        std::find(selected.begin(), selected.end(), criterion.id) == selected.end()) {
      continue;
    }
    try {
      const std::string detail = criterion.run();
      std::printf("criterion %2d (%s): PASS — %s\n", criterion.id, criterion.name, detail.c_str());
    } catch (const pgl::CheckFailure& failure) {
      std::printf("criterion %2d (%s): FAIL — %s\n", criterion.id, criterion.name,
                  failure.detail.c_str());
      all_passed = false;
    } catch (const std::exception& e) {
      std::printf("criterion %2d (%s): FAIL — unexpected error: %s\n", criterion.id,
                  criterion.name, e.what());
      all_passed = false;
    }
    std::fflush(stdout);
  }
  return all_passed ? 0 : 1;
}
