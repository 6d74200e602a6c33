#include "pgl/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pgl/align.hpp"
#include "pgl/checkpoint.hpp"
#include "pgl/config.hpp"
#include "pgl/eval.hpp"
#include "pgl/trainer.hpp"

namespace pgl {

namespace fs = std::filesystem;

namespace {

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
}

void write_resolved_config(const RunConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream out(dir + "/config.resolved.cfg", std::ios::trunc);
  if (!out) {
    throw IoError("cannot write resolved config to " + dir);
  }
  out << cfg.serialize();
}

std::string resolve_against(const std::string& base_file, const std::string& path) {
  const fs::path p(path);
  if (p.is_absolute()) {
    return path;
  }
  return (fs::path(base_file).parent_path() / p).string();
}

std::vector<Volume> load_manifest_volumes(const std::string& manifest_path, double clip_lo,
                                          double clip_hi, bool require_labels) {
  const Manifest manifest = load_manifest(manifest_path);
  std::vector<Volume> volumes;
  for (const auto& entry : manifest.paths) {
    Volume vol = load_volume(resolve_against(manifest_path, entry));
    if (require_labels && !vol.has_labels()) {
      throw ConfigError("volume " + entry + " has no labels");
    }
    volumes.push_back(preprocess(vol, clip_lo, clip_hi));
  }
  if (volumes.empty()) {
    throw ConfigError("manifest " + manifest_path + " lists no volumes");
  }
  return volumes;
}

FinetuneRunConfig finetune_run_config(const RunConfig& cfg) {
  FinetuneRunConfig run;
  run.seed = cfg.trainer.seed;
  run.lr = cfg.finetune.lr;
  run.steps = cfg.finetune.steps;
  run.batch = cfg.finetune.batch;
  run.warmup_steps = cfg.finetune.warmup_steps;
  run.sgd.momentum = cfg.finetune.momentum;
  run.sgd.weight_decay = cfg.finetune.weight_decay;
  run.freeze_encoder = cfg.finetune.freeze_encoder;
  run.eval_every = cfg.finetune.eval_every;
  run.patch_shape = cfg.trainer.view_shape;
  run.augment = cfg.augment;
  return run;
}

}  // namespace

int cmd_pretrain(const std::string& config_path, const Overrides& overrides) {
  return guarded([&] {
    const RunConfig cfg = RunConfig::from_file(config_path, overrides);
    write_resolved_config(cfg, cfg.output.dir);
    if (cfg.data.manifest.empty()) {
      throw ConfigError("pretrain: data.manifest is required");
    }
    const std::vector<Volume> volumes = load_manifest_volumes(
        resolve_against(config_path, cfg.data.manifest), cfg.data.clip_lo, cfg.data.clip_hi,
        /*require_labels=*/false);
    const NetworkConfig net = cfg.network_config();
    const PretrainResult result =
        run_pretraining(volumes, net, cfg.augment, cfg.align, cfg.loss_config(), cfg.trainer,
                        cfg.output.dir, cfg.output.log_wall_time);
    std::printf("pretraining complete: %lld steps, final loss %.6f\n",
                static_cast<long long>(result.steps_done), result.final_loss);
    std::printf("checkpoint: %s\n", result.final_checkpoint.c_str());
    return kExitOk;
  });
}

namespace {

// Copies the online-path encoder out of a pretraining checkpoint and reports
// the parameter provenance split.
void init_encoder_from_checkpoint(ParamStore& seg, const std::string& checkpoint_path) {
  const Checkpoint ckpt = Checkpoint::load(checkpoint_path);
  std::string problems;
  std::int64_t loaded = 0, fresh = 0;
  for (const auto& name : seg.names()) {
    if (!name.starts_with("encoder.")) {
      ++fresh;
      continue;
    }
    const std::string key = "online." + name;
    if (!ckpt.contains(key)) {
      problems += "  missing: " + key + "\n";
      continue;
    }
    const auto& array = ckpt.at(key);
    Tensor32& t = seg.at(name);
    if (array.dtype != Checkpoint::Dtype::kF32 || Shape(array.dims) != t.shape()) {
      problems += "  shape/dtype mismatch: " + key + "\n";
      continue;
    }
    auto dst = t.mutable_data();
    std::copy(array.f32.begin(), array.f32.end(), dst.begin());
    ++loaded;
  }
  if (!problems.empty()) {
    throw IoError("finetune: incompatible checkpoint keys:\n" + problems);
  }
  std::printf("parameter init report: %lld tensors from %s, %lld randomly initialized\n",
              static_cast<long long>(loaded), checkpoint_path.c_str(),
              static_cast<long long>(fresh));
}

}  // namespace

int cmd_finetune(const std::string& config_path, const std::string& init_mode,
                 const std::string& init_checkpoint, const Overrides& overrides) {
  return guarded([&] {
    const RunConfig cfg = RunConfig::from_file(config_path, overrides);
    write_resolved_config(cfg, cfg.output.dir);
    if (init_mode != "random" && init_mode != "checkpoint") {
      throw ConfigError("finetune: --init must be 'random' or 'checkpoint <path>'");
    }
    if (init_mode == "checkpoint" && init_checkpoint.empty()) {
      throw ConfigError("finetune: --init checkpoint requires a checkpoint path");
    }
    if (cfg.data.manifest.empty()) {
      throw ConfigError("finetune: data.manifest is required");
    }
    const std::vector<Volume> train = load_manifest_volumes(
        resolve_against(config_path, cfg.data.manifest), cfg.data.clip_lo, cfg.data.clip_hi,
        /*require_labels=*/true);
    std::vector<Volume> val;
    if (!cfg.data.val_manifest.empty()) {
      val = load_manifest_volumes(resolve_against(config_path, cfg.data.val_manifest),
                                  cfg.data.clip_lo, cfg.data.clip_hi, /*require_labels=*/true);
    }

    const NetworkConfig net = cfg.network_config();
    Rng init_rng(Rng::split(cfg.trainer.seed, 0x5e6));
    ParamStore seg = init_segmentation(net, init_rng);
    if (init_mode == "checkpoint") {
      init_encoder_from_checkpoint(seg, init_checkpoint);
    } else {
      std::printf("parameter init report: 0 tensors from checkpoint, %lld randomly initialized\n",
                  static_cast<long long>(seg.size()));
    }

    const FinetuneResult result = run_finetune(train, val, std::move(seg), net, cfg.loss_config(),
                                               finetune_run_config(cfg), cfg.output.dir);
    if (!result.validations.empty()) {
      std::printf("final validation mean dice: %.4f\n", result.final_mean_dice);
    }
    std::printf("fine-tuning complete: %lld steps\n", static_cast<long long>(cfg.finetune.steps));
    return kExitOk;
  });
}

int cmd_eval(const std::string& checkpoint_path, const std::string& manifest_path,
             const std::string& config_path, const Overrides& overrides) {
  return guarded([&] {
    std::string resolved_config = config_path;
    if (resolved_config.empty()) {
      const fs::path sibling = fs::path(checkpoint_path).parent_path() / "config.resolved.cfg";
      if (fs::exists(sibling)) {
        resolved_config = sibling.string();
      }
    }
    const RunConfig cfg = resolved_config.empty()
                              ? RunConfig::from_text("", overrides)
                              : RunConfig::from_file(resolved_config, overrides);

    const NetworkConfig net = cfg.network_config();
    Rng init_rng(0);
    ParamStore seg = init_segmentation(net, init_rng);
    const Checkpoint ckpt = Checkpoint::load(checkpoint_path);
    load_param_store(ckpt, "seg.", seg);

    const std::vector<Volume> volumes = load_manifest_volumes(
        manifest_path, cfg.data.clip_lo, cfg.data.clip_hi, /*require_labels=*/true);
    const EvalReport report = evaluate_volumes(seg, net, volumes, cfg.trainer.view_shape);

    std::printf("class  dice      iou\n");
    for (const auto& m : report.per_class) {
      std::printf("%-6lld %-9.6f %-9.6f\n", static_cast<long long>(m.cls), m.dice, m.iou);
    }
    std::printf("mean   %-9.6f %-9.6f\n", report.mean_dice, report.mean_iou);

    fs::create_directories(cfg.output.dir);
    std::ofstream csv(cfg.output.dir + "/eval_report.csv", std::ios::trunc);
    if (!csv) {
      throw IoError("eval: cannot write " + cfg.output.dir + "/eval_report.csv");
    }
    csv << "class,dice,iou\n";
    char row[96];
    for (const auto& m : report.per_class) {
      std::snprintf(row, sizeof(row), "%lld,%.9g,%.9g\n", static_cast<long long>(m.cls), m.dice,
                    m.iou);
      csv << row;
    }
    std::snprintf(row, sizeof(row), "mean,%.9g,%.9g\n", report.mean_dice, report.mean_iou);
    csv << row;
    return kExitOk;
  });
}

int cmd_gendata(const std::string& spec_path, const std::string& out_dir, std::int64_t count,
                std::uint64_t seed, const std::string& split, const Overrides& overrides) {
  return guarded([&] {
    const RunConfig cfg = spec_path.empty() ? RunConfig::from_text("", overrides)
                                            : RunConfig::from_file(spec_path, overrides);
    if (count <= 0) {
      throw ConfigError("gendata: count must be positive");
    }
    fs::create_directories(out_dir);
    write_resolved_config(cfg, out_dir);

    Manifest manifest;
    manifest.split = split;
    manifest.seed = seed;
    for (std::int64_t i = 0; i < count; ++i) {
      Rng rng(Rng::split(seed, static_cast<std::uint64_t>(i)));
      const Volume vol = synth_generate(cfg.synth, rng);
      char name[32];
      std::snprintf(name, sizeof(name), "vol_%04lld.rvf", static_cast<long long>(i));
      save_volume(vol, (fs::path(out_dir) / name).string());
      manifest.paths.push_back(name);
    }
    save_manifest(manifest, (fs::path(out_dir) / "manifest.txt").string());
    std::printf("wrote %lld volumes and manifest.txt to %s\n", static_cast<long long>(count),
                out_dir.c_str());
    return kExitOk;
  });
}

int cmd_inspect_align(const std::string& config_path, std::int64_t n_pairs,
                      const Overrides& overrides) {
  return guarded([&] {
    const RunConfig cfg = config_path.empty() ? RunConfig::from_text("", overrides)
                                              : RunConfig::from_file(config_path, overrides);
    const NetworkConfig net = cfg.network_config();
    const Ivec3 stride = net.encoder.output_stride();
    const Ivec3 view = cfg.trainer.view_shape;
    const Ivec3 feat{view[0] / stride[0], view[1] / stride[1], view[2] / stride[2]};
    const Ivec3 source = ssl_source_shape(view, cfg.augment.max_scale);

    Rng rng(Rng::split(cfg.trainer.seed, 0x1a5));
    std::int64_t agreements = 0;
    std::printf("# view=%lldx%lldx%lld stride=%lld,%lld,%lld source=%lldx%lldx%lld\n",
                static_cast<long long>(view[0]), static_cast<long long>(view[1]),
                static_cast<long long>(view[2]), static_cast<long long>(stride[0]),
                static_cast<long long>(stride[1]), static_cast<long long>(stride[2]),
                static_cast<long long>(source[0]), static_cast<long long>(source[1]),
                static_cast<long long>(source[2]));
    std::printf("# pair | crop1 | crop2 | flips | overlap1 | overlap2 | roi1 | roi2 | oracle\n");

    const auto box_str = [](const Dvec3& lo, const Dvec3& hi) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "[%.4g,%.4g)x[%.4g,%.4g)x[%.4g,%.4g)", lo[0], hi[0], lo[1],
                    hi[1], lo[2], hi[2]);
      return std::string(buf);
    };

    for (std::int64_t i = 0; i < n_pairs; ++i) {
      const auto [rec1, rec2] = sample_crop_pair(source, view, rng, cfg.augment);
      const auto overlap = compute_overlap(rec1, rec2);
      bool ok = overlap.has_value();
      std::string row = std::to_string(i) + " | " + box_str(rec1.crop_start, rec1.crop_end) +
                        " | " + box_str(rec2.crop_start, rec2.crop_end) + " | ";
      for (int a = 0; a < 3; ++a) {
        row += rec1.flip[a] ? "F" : ".";
      }
      row += "/";
      for (int a = 0; a < 3; ++a) {
        row += rec2.flip[a] ? "F" : ".";
      }
      if (ok) {
        const FeatureRoI roi1 = to_feature_coords(overlap->first, rec1, stride, feat);
        const FeatureRoI roi2 = to_feature_coords(overlap->second, rec2, stride, feat);
        row += " | " + box_str(overlap->first.start, overlap->first.end) + " | " +
               box_str(overlap->second.start, overlap->second.end) + " | " +
               box_str(roi1.start, roi1.end) + " | " + box_str(roi2.start, roi2.end);

        // Oracle agreement: (a) both overlap boxes reconstruct the identical
        // source region, exactly on the crop grid; (b) the feature mapping
        // matches independent integer-ratio arithmetic to 1e-9.
        for (int a = 0; a < 3 && ok; ++a) {
          ok = overlap->first.start[a] + rec1.crop_start[a] ==
                   overlap->second.start[a] + rec2.crop_start[a] &&
               overlap->first.end[a] + rec1.crop_start[a] ==
                   overlap->second.end[a] + rec2.crop_start[a];
        }
        const auto check_roi = [&](const OverlapBox& box, const TransformRecord& rec,
                                   const FeatureRoI& roi) {
          for (int a = 0; a < 3; ++a) {
            const auto o0 = std::llround(box.start[a] * kCropGrid);
            const auto o1 = std::llround(box.end[a] * kCropGrid);
            const auto crop = std::llround((rec.crop_end[a] - rec.crop_start[a]) * kCropGrid);
            const double expect0 = static_cast<double>(o0 * view[a]) /
                                   static_cast<double>(crop * stride[a]);
            const double expect1 = static_cast<double>(o1 * view[a]) /
                                   static_cast<double>(crop * stride[a]);
            if (std::abs(roi.start[a] - expect0) > 1e-9 || std::abs(roi.end[a] - expect1) > 1e-9) {
              return false;
            }
          }
          return true;
        };
        ok = ok && check_roi(overlap->first, rec1, roi1) && check_roi(overlap->second, rec2, roi2);
      } else {
        row += " | empty | empty | - | -";
      }
      agreements += ok ? 1 : 0;
      row += ok ? " | ok" : " | MISMATCH";
      std::printf("%s\n", row.c_str());
    }
    std::printf("oracle agreement: %.2f%% (%lld/%lld)\n",
                n_pairs > 0 ? 100.0 * static_cast<double>(agreements) / static_cast<double>(n_pairs)
                            : 100.0,
                static_cast<long long>(agreements), static_cast<long long>(n_pairs));
    return agreements == n_pairs ? kExitOk : kExitUsage;
  });
}

}  // namespace pgl
