#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pgl/cli.hpp"

namespace {

// Remaining tokens of the form --section.key=value become config overrides.
pgl::Overrides parse_overrides(const std::vector<std::string>& extras) {
  pgl::Overrides overrides;
  for (const auto& token : extras) {
    if (token.rfind("--", 0) != 0) {
      throw CLI::ValidationError("unexpected argument '" + token +
                                 "' (overrides look like --section.key=value)");
    }
    const auto eq = token.find('=');
    if (eq == std::string::npos || token.find('.') == std::string::npos || eq < 3) {
      throw CLI::ValidationError("malformed override '" + token +
                                 "' (expected --section.key=value)");
    }
    overrides.emplace_back(token.substr(2, eq - 2), token.substr(eq + 1));
  }
  return overrides;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pgl: prior-guided local self-supervised pretraining for volumetric images"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> init_spec{"random"};
  std::string ckpt_path, manifest_path, spec_path, out_dir, split = "pretrain";
  std::int64_t count = 10, pairs = 100;
  std::uint64_t seed = 0;

  auto* pretrain = app.add_subcommand("pretrain", "run self-supervised pretraining");
  pretrain->add_option("--config", config_path, "run configuration file")->required();
  pretrain->allow_extras();

  auto* finetune = app.add_subcommand("finetune", "fine-tune the segmentation network");
  finetune->add_option("--config", config_path, "run configuration file")->required();
  finetune
      ->add_option("--init", init_spec,
                   "random, or: checkpoint <path> to initialize the encoder from a "
                   "pretraining checkpoint")
      ->expected(1, 2);
  finetune->allow_extras();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint");
  eval_cmd->add_option("--checkpoint", ckpt_path, "seg-final.pgl from a fine-tuning run")
      ->required();
  eval_cmd->add_option("--manifest", manifest_path, "labeled test manifest")->required();
  eval_cmd->add_option("--config", config_path,
                       "run configuration (defaults to the resolved config next to the checkpoint)");
  eval_cmd->allow_extras();

  auto* gendata = app.add_subcommand("gendata", "generate synthetic volumes");
  gendata->add_option("--spec", spec_path, "configuration file with a [synth] section");
  gendata->add_option("--out", out_dir, "output directory")->required();
  gendata->add_option("--count", count, "number of volumes");
  gendata->add_option("--seed", seed, "generator seed");
  gendata->add_option("--split", split, "manifest split tag (pretrain|train|val|test)");
  gendata->allow_extras();

  auto* inspect = app.add_subcommand("inspect-align", "dump record pairs, overlaps, and ROIs");
  inspect->add_option("--config", config_path, "run configuration file");
  inspect->add_option("--pairs", pairs, "number of record pairs to sample");
  inspect->allow_extras();

  try {
    app.parse(argc, argv);

    if (pretrain->parsed()) {
      return pgl::cmd_pretrain(config_path, parse_overrides(pretrain->remaining()));
    }
    if (finetune->parsed()) {
      const std::string mode = init_spec.empty() ? "random" : init_spec[0];
      const std::string init_ckpt = init_spec.size() > 1 ? init_spec[1] : "";
      return pgl::cmd_finetune(config_path, mode, init_ckpt,
                               parse_overrides(finetune->remaining()));
    }
    if (eval_cmd->parsed()) {
      return pgl::cmd_eval(ckpt_path, manifest_path, config_path,
                           parse_overrides(eval_cmd->remaining()));
    }
    if (gendata->parsed()) {
      return pgl::cmd_gendata(spec_path, out_dir, count, seed, split,
                              parse_overrides(gendata->remaining()));
    }
    if (inspect->parsed()) {
      return pgl::cmd_inspect_align(config_path, pairs, parse_overrides(inspect->remaining()));
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : pgl::kExitUsage;
  }
  return pgl::kExitUsage;
}
