#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace pgl {

/// Dotted configuration overrides from the command line
/// (--section.key=value); flags win over file values.
using Overrides = std::vector<std::pair<std::string, std::string>>;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;    // usage, config, or schema problems
inline constexpr int kExitNumeric = 3;  // non-finite loss or gradients

/// Self-supervised pretraining: runs the dual-path loop over the manifest's
/// volumes, writing metrics.csv, periodic checkpoints, ckpt-final.pgl, and
/// the resolved configuration into output.dir.
int cmd_pretrain(const std::string& config_path, const Overrides& overrides);

/// Supervised fine-tuning. init_mode is "random" or "checkpoint"; the latter
/// loads the online-path encoder from a pretraining checkpoint and reports
/// which tensors were taken from it.
int cmd_finetune(const std::string& config_path, const std::string& init_mode,
                 const std::string& init_checkpoint, const Overrides& overrides);

/// Per-class and mean Dice/IoU of a fine-tuned checkpoint over a labeled
/// manifest; prints a table and writes eval_report.csv. config_path may be
/// empty, in which case the resolved config next to the checkpoint is used.
int cmd_eval(const std::string& checkpoint_path, const std::string& manifest_path,
             const std::string& config_path, const Overrides& overrides);

/// Generates `count` synthetic RVF1 volumes plus a manifest tagged with
/// `split` into out_dir.
int cmd_gendata(const std::string& spec_path, const std::string& out_dir, std::int64_t count,
                std::uint64_t seed, const std::string& split, const Overrides& overrides);

/// Dumps sampled record pairs, overlap boxes, and feature ROIs as text rows,
/// with per-pair oracle-agreement flags and a summary line.
int cmd_inspect_align(const std::string& config_path, std::int64_t n_pairs,
                      const Overrides& overrides);

}  // namespace pgl
