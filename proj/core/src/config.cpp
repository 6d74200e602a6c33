#include "pgl/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace pgl {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) {
    return "";
  }
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + ": '" + value + "' is not a number");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + ": '" + value + "' is not an integer");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + ": '" + value + "' is not a non-negative integer");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: " + key + ": '" + value + "' is not a boolean (true/false)");
}

std::vector<std::string> split(const std::string& value, char sep) {
  std::vector<std::string> parts;
  std::string current;
  std::istringstream in(value);
  while (std::getline(in, current, sep)) {
    parts.push_back(trim(current));
  }
  return parts;
}

Ivec3 parse_ivec3(const std::string& key, const std::string& value) {
  const auto parts = split(value, ',');
  if (parts.size() != 3) {
    throw ConfigError("config: " + key + ": expected three comma-separated integers");
  }
  return {parse_int(key, parts[0]), parse_int(key, parts[1]), parse_int(key, parts[2])};
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_ivec3(const Ivec3& v) {
  return std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]);
}

struct Field {
  std::function<void(RunConfig&, const std::string& key, const std::string& value)> parse;
  std::function<std::string(const RunConfig&)> print;
};

using Schema = std::vector<std::pair<std::string, Field>>;

template <class Get>
Field f_double(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_double(k, v); },
          [get](const RunConfig& c) { return fmt_double(get(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field f_int(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_int(k, v); },
          [get](const RunConfig& c) { return std::to_string(get(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field f_uint(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_uint(k, v); },
          [get](const RunConfig& c) { return std::to_string(get(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field f_bool(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_bool(k, v); },
          [get](const RunConfig& c) { return get(const_cast<RunConfig&>(c)) ? "true" : "false"; }};
}

template <class Get>
Field f_string(Get get) {
  return {[get](RunConfig& c, const std::string&, const std::string& v) { get(c) = v; },
          [get](const RunConfig& c) { return get(const_cast<RunConfig&>(c)); }};
}

template <class Get>
Field f_ivec3(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_ivec3(k, v); },
          [get](const RunConfig& c) { return fmt_ivec3(get(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field f_int_list(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) {
            std::vector<std::int64_t> out;
            for (const auto& part : split(v, ',')) {
              out.push_back(parse_int(k, part));
            }
            get(c) = std::move(out);
          },
          [get](const RunConfig& c) {
            std::string out;
            for (const auto& v : get(const_cast<RunConfig&>(c))) {
              if (!out.empty()) out += ",";
              out += std::to_string(v);
            }
            return out;
          }};
}

template <class Get>
Field f_double_list(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) {
            std::vector<double> out;
            for (const auto& part : split(v, ',')) {
              out.push_back(parse_double(k, part));
            }
            get(c) = std::move(out);
          },
          [get](const RunConfig& c) {
            std::string out;
            for (const double v : get(const_cast<RunConfig&>(c))) {
              if (!out.empty()) out += ",";
              out += fmt_double(v);
            }
            return out;
          }};
}

template <class Get>
Field f_stride_list(Get get) {
  return {[get](RunConfig& c, const std::string& k, const std::string& v) {
            std::vector<Ivec3> out;
            for (const auto& part : split(v, ';')) {
              out.push_back(parse_ivec3(k, part));
            }
            get(c) = std::move(out);
          },
          [get](const RunConfig& c) {
            std::string out;
            for (const Ivec3& v : get(const_cast<RunConfig&>(c))) {
              if (!out.empty()) out += ";";
              out += fmt_ivec3(v);
            }
            return out;
          }};
}

// Applying a preset rewrites the whole network section; explicit keys then
// override individual fields, so file order and override order both behave
// predictably.
void apply_network_preset(RunConfig& cfg, const std::string& preset) {
  NetworkSection section;
  if (preset == "desk") {
    // struct defaults are the desk preset
  } else if (preset == "paper") {
    section.stem_channels = 64;
    section.stem_kernel = 7;
    section.stem_stride = {2, 2, 2};
    section.blocks = {3, 4, 6, 3};
    section.widths = {64, 128, 256, 512};
    section.stage_strides = {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}, {1, 2, 2}};
    section.bottleneck = true;
    section.projector_hidden = 4096;
    section.projector_out = 256;
    section.predictor_hidden = 4096;
    section.aspp_channels = 256;
    section.num_classes = 14;
  } else {
    throw ConfigError("config: network.preset: unknown preset '" + preset +
                      "' (expected desk or paper)");
  }
  section.preset = preset;
  cfg.network = section;
}

const Schema& schema() {
  static const Schema s = [] {
    Schema fields;
    const auto add = [&fields](const char* key, Field field) {
      fields.emplace_back(key, std::move(field));
    };

    add("data.manifest", f_string([](RunConfig& c) -> std::string& { return c.data.manifest; }));
    add("data.val_manifest", f_string([](RunConfig& c) -> std::string& { return c.data.val_manifest; }));
    add("data.test_manifest", f_string([](RunConfig& c) -> std::string& { return c.data.test_manifest; }));
    add("data.clip_lo", f_double([](RunConfig& c) -> double& { return c.data.clip_lo; }));
    add("data.clip_hi", f_double([](RunConfig& c) -> double& { return c.data.clip_hi; }));

    add("synth.dims", f_ivec3([](RunConfig& c) -> Ivec3& { return c.synth.dims; }));
    add("synth.classes", f_int([](RunConfig& c) -> std::int64_t& { return c.synth.classes; }));
    add("synth.objects_min", f_int([](RunConfig& c) -> std::int64_t& { return c.synth.objects_min; }));
    add("synth.objects_max", f_int([](RunConfig& c) -> std::int64_t& { return c.synth.objects_max; }));
    add("synth.background_mean", f_double([](RunConfig& c) -> double& { return c.synth.background_mean; }));
    add("synth.background_std", f_double([](RunConfig& c) -> double& { return c.synth.background_std; }));
    add("synth.class_means", f_double_list([](RunConfig& c) -> std::vector<double>& { return c.synth.class_means; }));
    add("synth.class_stds", f_double_list([](RunConfig& c) -> std::vector<double>& { return c.synth.class_stds; }));
    add("synth.radius_min_frac", f_double([](RunConfig& c) -> double& { return c.synth.radius_min_frac; }));
    add("synth.radius_max_frac", f_double([](RunConfig& c) -> double& { return c.synth.radius_max_frac; }));

    add("augment.min_scale", f_double([](RunConfig& c) -> double& { return c.augment.min_scale; }));
    add("augment.max_scale", f_double([](RunConfig& c) -> double& { return c.augment.max_scale; }));
    add("augment.min_overlap", f_double([](RunConfig& c) -> double& { return c.augment.min_overlap; }));
    add("augment.flip_prob", f_double([](RunConfig& c) -> double& { return c.augment.flip_prob; }));
    add("augment.noise_prob", f_double([](RunConfig& c) -> double& { return c.augment.noise_prob; }));
    add("augment.noise_var_max", f_double([](RunConfig& c) -> double& { return c.augment.noise_var_max; }));
    add("augment.blur_prob", f_double([](RunConfig& c) -> double& { return c.augment.blur_prob; }));
    add("augment.blur_sigma_min", f_double([](RunConfig& c) -> double& { return c.augment.blur_sigma_min; }));
    add("augment.blur_sigma_max", f_double([](RunConfig& c) -> double& { return c.augment.blur_sigma_max; }));
    add("augment.brightness_prob", f_double([](RunConfig& c) -> double& { return c.augment.brightness_prob; }));
    add("augment.brightness_min", f_double([](RunConfig& c) -> double& { return c.augment.brightness_min; }));
    add("augment.brightness_max", f_double([](RunConfig& c) -> double& { return c.augment.brightness_max; }));
    add("augment.gamma_prob", f_double([](RunConfig& c) -> double& { return c.augment.gamma_prob; }));
    add("augment.gamma_min", f_double([](RunConfig& c) -> double& { return c.augment.gamma_min; }));
    add("augment.gamma_max", f_double([](RunConfig& c) -> double& { return c.augment.gamma_max; }));
    add("augment.intensity", f_bool([](RunConfig& c) -> bool& { return c.augment.intensity; }));
    add("augment.rejection_budget", Field{
        [](RunConfig& c, const std::string& k, const std::string& v) {
          c.augment.rejection_budget = static_cast<int>(parse_int(k, v));
        },
        [](const RunConfig& c) { return std::to_string(c.augment.rejection_budget); }});

    // network.preset is handled before the generic keys; serialize it anyway.
    add("network.preset", f_string([](RunConfig& c) -> std::string& { return c.network.preset; }));
    add("network.stem_channels", f_int([](RunConfig& c) -> std::int64_t& { return c.network.stem_channels; }));
    add("network.stem_kernel", f_int([](RunConfig& c) -> std::int64_t& { return c.network.stem_kernel; }));
    add("network.stem_stride", f_ivec3([](RunConfig& c) -> Ivec3& { return c.network.stem_stride; }));
    add("network.blocks", f_int_list([](RunConfig& c) -> std::vector<std::int64_t>& { return c.network.blocks; }));
    add("network.widths", f_int_list([](RunConfig& c) -> std::vector<std::int64_t>& { return c.network.widths; }));
    add("network.stage_strides", f_stride_list([](RunConfig& c) -> std::vector<Ivec3>& { return c.network.stage_strides; }));
    add("network.bottleneck", f_bool([](RunConfig& c) -> bool& { return c.network.bottleneck; }));
    add("network.projector_hidden", f_int([](RunConfig& c) -> std::int64_t& { return c.network.projector_hidden; }));
    add("network.projector_out", f_int([](RunConfig& c) -> std::int64_t& { return c.network.projector_out; }));
    add("network.predictor", f_string([](RunConfig& c) -> std::string& { return c.network.predictor; }));
    add("network.predictor_hidden", f_int([](RunConfig& c) -> std::int64_t& { return c.network.predictor_hidden; }));
    add("network.aspp_channels", f_int([](RunConfig& c) -> std::int64_t& { return c.network.aspp_channels; }));
    add("network.num_classes", f_int([](RunConfig& c) -> std::int64_t& { return c.network.num_classes; }));

    add("align.use_flipalign", f_bool([](RunConfig& c) -> bool& { return c.align.use_flipalign; }));
    add("align.use_csalign", f_bool([](RunConfig& c) -> bool& { return c.align.use_csalign; }));
    add("align.samples_per_bin", f_int([](RunConfig& c) -> std::int64_t& { return c.align.samples_per_bin; }));

    add("loss.l2_eps", f_double([](RunConfig& c) -> double& { return c.loss.l2_eps; }));
    add("loss.dice_epsilon", f_double([](RunConfig& c) -> double& { return c.loss.dice_epsilon; }));
    add("loss.normalize_channels", f_bool([](RunConfig& c) -> bool& { return c.loss.normalize_channels; }));

    add("trainer.seed", f_uint([](RunConfig& c) -> std::uint64_t& { return c.trainer.seed; }));
    add("trainer.batch_size", f_int([](RunConfig& c) -> std::int64_t& { return c.trainer.batch_size; }));
    add("trainer.steps", f_int([](RunConfig& c) -> std::int64_t& { return c.trainer.steps; }));
    add("trainer.warmup_steps", f_int([](RunConfig& c) -> std::int64_t& { return c.trainer.warmup_steps; }));
    add("trainer.base_lr", f_double([](RunConfig& c) -> double& { return c.trainer.base_lr; }));
    add("trainer.ema_base", f_double([](RunConfig& c) -> double& { return c.trainer.ema_base; }));
    add("trainer.view_shape", f_ivec3([](RunConfig& c) -> Ivec3& { return c.trainer.view_shape; }));
    add("trainer.lars_trust", f_double([](RunConfig& c) -> double& { return c.trainer.lars.trust; }));
    add("trainer.lars_weight_decay", f_double([](RunConfig& c) -> double& { return c.trainer.lars.weight_decay; }));
    add("trainer.lars_momentum", f_double([](RunConfig& c) -> double& { return c.trainer.lars.momentum; }));
    add("trainer.checkpoint_every", f_int([](RunConfig& c) -> std::int64_t& { return c.trainer.checkpoint_every; }));
    add("trainer.prefetch", f_int([](RunConfig& c) -> std::int64_t& { return c.trainer.prefetch; }));
    add("trainer.symmetric_mode", Field{
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "shared") c.trainer.sequential_symmetric = false;
          else if (v == "sequential") c.trainer.sequential_symmetric = true;
          else throw ConfigError("config: " + k + ": expected shared or sequential, got '" + v + "'");
        },
        [](const RunConfig& c) {
          return c.trainer.sequential_symmetric ? std::string("sequential") : std::string("shared");
        }});

    add("finetune.lr", f_double([](RunConfig& c) -> double& { return c.finetune.lr; }));
    add("finetune.steps", f_int([](RunConfig& c) -> std::int64_t& { return c.finetune.steps; }));
    add("finetune.batch", f_int([](RunConfig& c) -> std::int64_t& { return c.finetune.batch; }));
    add("finetune.warmup_steps", f_int([](RunConfig& c) -> std::int64_t& { return c.finetune.warmup_steps; }));
    add("finetune.momentum", f_double([](RunConfig& c) -> double& { return c.finetune.momentum; }));
    add("finetune.weight_decay", f_double([](RunConfig& c) -> double& { return c.finetune.weight_decay; }));
    add("finetune.freeze_encoder", f_bool([](RunConfig& c) -> bool& { return c.finetune.freeze_encoder; }));
    add("finetune.eval_every", f_int([](RunConfig& c) -> std::int64_t& { return c.finetune.eval_every; }));

    add("output.dir", f_string([](RunConfig& c) -> std::string& { return c.output.dir; }));
    add("output.log_wall_time", f_bool([](RunConfig& c) -> bool& { return c.output.log_wall_time; }));
    return fields;
  }();
  return s;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, field] : schema()) {
    if (name == key) {
      return &field;
    }
  }
  return nullptr;
}

struct RawEntry {
  std::string key;  // section.key
  std::string value;
};

std::vector<RawEntry> tokenize(const std::string& text) {
  std::vector<RawEntry> entries;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto comment = line.find('#');
    if (comment != std::string::npos) {
      line = line.substr(0, comment);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("config: line " + std::to_string(line_no) + ": malformed section header '" +
                          line + "'");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(line_no) + ": expected key = value, got '" +
                        line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (section.empty()) {
      throw ConfigError("config: line " + std::to_string(line_no) + ": key '" + key +
                        "' appears before any [section] header");
    }
    entries.push_back({section + "." + key, trim(line.substr(eq + 1))});
  }
  return entries;
}

}  // namespace

RunConfig RunConfig::from_text(const std::string& text,
                               std::span<const std::pair<std::string, std::string>> overrides) {
  std::vector<RawEntry> entries = tokenize(text);
  for (const auto& [key, value] : overrides) {
    entries.push_back({key, value});
  }

  RunConfig cfg;
  // The preset rewrites the whole network section, so resolve it first; the
  // last preset mention wins (overrides come after file entries).
  for (const auto& entry : entries) {
    if (entry.key == "network.preset") {
      apply_network_preset(cfg, entry.value);
    }
  }
  for (const auto& entry : entries) {
    if (entry.key == "network.preset") {
      continue;
    }
    const Field* field = find_field(entry.key);
    if (field == nullptr) {
      throw ConfigError("config: unknown key '" + entry.key + "'");
    }
    field->parse(cfg, entry.key, entry.value);
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path,
                               std::span<const std::pair<std::string, std::string>> overrides) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("config: cannot open " + path);
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return from_text(buffer.str(), overrides);
}

std::string RunConfig::serialize() const {
  std::string out;
  std::string current_section;
  for (const auto& [key, field] : schema()) {
    const auto dot = key.find('.');
    const std::string section = key.substr(0, dot);
    if (section != current_section) {
      if (!out.empty()) {
        out += "\n";
      }
      out += "[" + section + "]\n";
      current_section = section;
    }
    out += key.substr(dot + 1) + " = " + field.print(*this) + "\n";
  }
  return out;
}

void RunConfig::validate() const {
  if (data.clip_lo >= data.clip_hi) {
    throw ConfigError("config: data.clip_lo must be below data.clip_hi");
  }
  if (augment.min_scale < 1.0 || augment.max_scale < augment.min_scale) {
    throw ConfigError("config: augment scale range must satisfy 1 <= min_scale <= max_scale");
  }
  if (augment.min_overlap <= 0.0 || augment.min_overlap >= 1.0) {
    throw ConfigError("config: augment.min_overlap must lie in (0, 1)");
  }
  if (network.blocks.size() != network.widths.size() ||
      network.blocks.size() != network.stage_strides.size() || network.blocks.empty()) {
    throw ConfigError("config: network blocks, widths, and stage_strides must have equal nonzero length");
  }
  if (network.predictor != "block" && network.predictor != "identity") {
    throw ConfigError("config: network.predictor must be block or identity");
  }
  if (network.num_classes < 1) {
    throw ConfigError("config: network.num_classes must be positive");
  }
  if (trainer.steps <= 0 || trainer.batch_size <= 0) {
    throw ConfigError("config: trainer.steps and trainer.batch_size must be positive");
  }
  if (trainer.warmup_steps < 0 || trainer.warmup_steps >= trainer.steps) {
    throw ConfigError("config: trainer.warmup_steps must lie in [0, trainer.steps)");
  }
  if (finetune.steps <= 0 || finetune.batch <= 0) {
    throw ConfigError("config: finetune.steps and finetune.batch must be positive");
  }
  if (align.samples_per_bin < 1) {
    throw ConfigError("config: align.samples_per_bin must be at least 1");
  }
  if (synth.classes < 1 ||
      static_cast<std::int64_t>(synth.class_means.size()) < synth.classes ||
      static_cast<std::int64_t>(synth.class_stds.size()) < synth.classes) {
    throw ConfigError("config: synth.class_means/class_stds must cover synth.classes entries");
  }
  const Ivec3 stride = network_config().encoder.output_stride();
  for (int a = 0; a < 3; ++a) {
    if (trainer.view_shape[a] % stride[a] != 0) {
      throw ConfigError(std::string("config: trainer.view_shape ") + kAxisNames[a] +
                        " is not divisible by the encoder output stride " +
                        std::to_string(stride[a]));
    }
  }
}

NetworkConfig RunConfig::network_config() const {
  NetworkConfig cfg;
  cfg.encoder.in_channels = 1;
  cfg.encoder.stem_channels = network.stem_channels;
  cfg.encoder.stem_kernel = network.stem_kernel;
  cfg.encoder.stem_stride = network.stem_stride;
  cfg.encoder.bottleneck = network.bottleneck;
  cfg.encoder.stages.clear();
  for (std::size_t i = 0; i < network.blocks.size(); ++i) {
    cfg.encoder.stages.push_back(
        {network.blocks[i], network.widths[i], network.stage_strides[i]});
  }
  cfg.projector = {network.projector_hidden, network.projector_out};
  cfg.predictor_mode =
      network.predictor == "identity" ? PredictorMode::kIdentity : PredictorMode::kBlock;
  cfg.predictor_hidden = network.predictor_hidden;
  cfg.aspp_channels = network.aspp_channels;
  cfg.num_classes = network.num_classes;
  return cfg;
}

LossConfig RunConfig::loss_config() const {
  LossConfig cfg;
  cfg.l2_eps = loss.l2_eps;
  cfg.dice_epsilon = loss.dice_epsilon;
  cfg.num_classes = network.num_classes;
  cfg.normalize_channels = loss.normalize_channels;
  return cfg;
}

}  // namespace pgl
