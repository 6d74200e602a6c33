#include "pgl/networks.hpp"

#include <cmath>

namespace pgl {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Tensor32& ParamStore::add(const std::string& name, Tensor32 tensor, ParamRole role) {
  if (index_.contains(name)) {
    throw ConfigError("ParamStore::add: duplicate parameter name " + name);
  }
  index_.emplace(name, order_.size());
  order_.push_back(name);
  roles_.push_back(role);
  if (role != ParamRole::kRunningStat) {
    tensor.set_requires_grad(true);
  }
  tensors_.push_back(std::move(tensor));
  return tensors_.back();
}

Tensor32& ParamStore::at(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("ParamStore: unknown parameter " + name);
  }
  return tensors_[it->second];
}

const Tensor32& ParamStore::at(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("ParamStore: unknown parameter " + name);
  }
  return tensors_[it->second];
}

bool ParamStore::contains(const std::string& name) const { return index_.contains(name); }

ParamRole ParamStore::role(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("ParamStore: unknown parameter " + name);
  }
  return roles_[it->second];
}

std::int64_t ParamStore::total_parameters() const {
  std::int64_t count = 0;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (roles_[i] != ParamRole::kRunningStat) {
      count += tensors_[i].numel();
    }
  }
  return count;
}

ParamStore ParamStore::clone() const {
  ParamStore copy;
  for (std::size_t i = 0; i < order_.size(); ++i) {
    copy.add(order_[i], tensors_[i].clone_data(), roles_[i]);
  }
  return copy;
}

void ParamStore::zero_grads() {
  for (auto& t : tensors_) {
    t.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

Ivec3 EncoderConfig::output_stride() const {
  Ivec3 s = stem_stride;
  for (const auto& stage : stages) {
    for (int a = 0; a < 3; ++a) {
      s[a] *= stage.stride[a];
    }
  }
  return s;
}

std::int64_t EncoderConfig::stage_out_channels(std::size_t stage) const {
  return stages[stage].width * (bottleneck ? 4 : 1);
}

std::int64_t EncoderConfig::out_channels() const {
  if (stages.empty()) {
    return stem_channels;
  }
  return stage_out_channels(stages.size() - 1);
}

NetworkConfig NetworkConfig::desk() {
  NetworkConfig cfg;
  cfg.encoder.in_channels = 1;
  cfg.encoder.stem_channels = 8;
  cfg.encoder.stem_kernel = 3;
  cfg.encoder.stem_stride = {1, 2, 2};
  cfg.encoder.stages = {{1, 8, {2, 2, 2}}, {1, 16, {2, 2, 2}}};
  cfg.encoder.bottleneck = false;
  cfg.projector = {32, 16};
  cfg.predictor_hidden = 32;
  cfg.aspp_channels = 16;
  cfg.num_classes = 4;
  return cfg;
}

NetworkConfig NetworkConfig::paper() {
  NetworkConfig cfg;
  cfg.encoder.in_channels = 1;
  cfg.encoder.stem_channels = 64;
  cfg.encoder.stem_kernel = 7;
  cfg.encoder.stem_stride = {2, 2, 2};
  cfg.encoder.stages = {{3, 64, {1, 1, 1}},
                        {4, 128, {2, 2, 2}},
                        {6, 256, {2, 2, 2}},
                        {3, 512, {1, 2, 2}}};
  cfg.encoder.bottleneck = true;
  cfg.projector = {4096, 256};
  cfg.predictor_hidden = 4096;
  cfg.aspp_channels = 256;
  cfg.num_classes = 14;
  return cfg;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

std::vector<float> truncated_normal(std::int64_t count, double stddev, Rng& rng) {
  std::vector<float> values(static_cast<std::size_t>(count));
  for (auto& v : values) {
    double z = rng.normal();
    while (std::abs(z) > 2.0) {
      z = rng.normal();
    }
    v = static_cast<float>(z * stddev);
  }
  return values;
}

std::vector<float> kaiming_uniform(std::int64_t count, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<float> values(static_cast<std::size_t>(count));
  for (auto& v : values) {
    v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return values;
}

enum class WeightInit { kTruncatedNormal, kKaimingUniform };

void add_conv(ParamStore& store, const std::string& name, Shape shape, WeightInit init, Rng& rng) {
  const std::int64_t count = shape_numel(shape);
  std::int64_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) {
    fan_in *= shape[i];
  }
  auto values = init == WeightInit::kTruncatedNormal ? truncated_normal(count, 0.02, rng)
                                                     : kaiming_uniform(count, fan_in, rng);
  store.add(name, Tensor32::from(std::move(shape), std::move(values)), ParamRole::kWeight);
}

void add_bias(ParamStore& store, const std::string& name, std::int64_t channels) {
  store.add(name, Tensor32::zeros({channels}), ParamRole::kBias);
}

void add_bn(ParamStore& store, const std::string& prefix, std::int64_t channels) {
  store.add(prefix + ".gamma", Tensor32::full({channels}, 1.0f), ParamRole::kNormScale);
  store.add(prefix + ".beta", Tensor32::zeros({channels}), ParamRole::kNormShift);
  store.add(prefix + ".running_mean", Tensor32::zeros({channels}), ParamRole::kRunningStat);
  store.add(prefix + ".running_var", Tensor32::full({channels}, 1.0f), ParamRole::kRunningStat);
}

bool is_unit(const Ivec3& s) { return s[0] == 1 && s[1] == 1 && s[2] == 1; }

void init_encoder(ParamStore& store, const EncoderConfig& cfg, WeightInit init, Rng& rng) {
  const std::int64_t k = cfg.stem_kernel;
  add_conv(store, "encoder.stem.conv.weight", {cfg.stem_channels, cfg.in_channels, k, k, k}, init,
           rng);
  add_bn(store, "encoder.stem.bn", cfg.stem_channels);

  std::int64_t in_c = cfg.stem_channels;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageSpec& stage = cfg.stages[s];
    const std::int64_t out_c = cfg.stage_out_channels(s);
    for (std::int64_t b = 0; b < stage.blocks; ++b) {
      const std::string prefix = "encoder.s" + std::to_string(s) + ".b" + std::to_string(b);
      const Ivec3 stride = b == 0 ? stage.stride : Ivec3{1, 1, 1};
      if (cfg.bottleneck) {
        add_conv(store, prefix + ".conv1.weight", {stage.width, in_c, 1, 1, 1}, init, rng);
        add_bn(store, prefix + ".bn1", stage.width);
        add_conv(store, prefix + ".conv2.weight", {stage.width, stage.width, 3, 3, 3}, init, rng);
        add_bn(store, prefix + ".bn2", stage.width);
        add_conv(store, prefix + ".conv3.weight", {out_c, stage.width, 1, 1, 1}, init, rng);
        add_bn(store, prefix + ".bn3", out_c);
      } else {
        add_conv(store, prefix + ".conv1.weight", {out_c, in_c, 3, 3, 3}, init, rng);
        add_bn(store, prefix + ".bn1", out_c);
        add_conv(store, prefix + ".conv2.weight", {out_c, out_c, 3, 3, 3}, init, rng);
        add_bn(store, prefix + ".bn2", out_c);
      }
      if (!is_unit(stride) || in_c != out_c) {
        add_conv(store, prefix + ".down.conv.weight", {out_c, in_c, 1, 1, 1}, init, rng);
        add_bn(store, prefix + ".down.bn", out_c);
      }
      in_c = out_c;
    }
  }
}

void init_projector_block(ParamStore& store, const std::string& prefix, std::int64_t in_c,
                          std::int64_t hidden, std::int64_t out_c, Rng& rng) {
  add_conv(store, prefix + ".conv1.weight", {hidden, in_c, 1, 1, 1}, WeightInit::kTruncatedNormal,
           rng);
  add_bn(store, prefix + ".bn", hidden);
  add_conv(store, prefix + ".conv2.weight", {out_c, hidden, 1, 1, 1},
           WeightInit::kTruncatedNormal, rng);
  add_bias(store, prefix + ".conv2.bias", out_c);
}

void init_sepconv(ParamStore& store, const std::string& prefix, std::int64_t in_c,
                  std::int64_t out_c, Rng& rng) {
  add_conv(store, prefix + ".dw.weight", {in_c, 1, 3, 3, 3}, WeightInit::kKaimingUniform, rng);
  add_conv(store, prefix + ".pw.weight", {out_c, in_c, 1, 1, 1}, WeightInit::kKaimingUniform, rng);
  add_bn(store, prefix + ".bn", out_c);
}

}  // namespace

ParamStore init_ssl_online(const NetworkConfig& cfg, Rng& rng) {
  ParamStore store;
  init_encoder(store, cfg.encoder, WeightInit::kTruncatedNormal, rng);
  init_projector_block(store, "projector", cfg.encoder.out_channels(), cfg.projector.hidden,
                       cfg.projector.out, rng);
  if (cfg.predictor_mode == PredictorMode::kBlock) {
    init_projector_block(store, "predictor", cfg.projector.out, cfg.predictor_hidden,
                         cfg.projector.out, rng);
  }
  return store;
}

ParamStore init_ssl_target(const ParamStore& online) {
  ParamStore target;
  for (const auto& name : online.names()) {
    if (name.starts_with("encoder.") || name.starts_with("projector.")) {
      target.add(name, online.at(name).clone_data(), online.role(name));
    }
  }
  return target;
}

ParamStore init_segmentation(const NetworkConfig& cfg, Rng& rng) {
  ParamStore store;
  init_encoder(store, cfg.encoder, WeightInit::kTruncatedNormal, rng);

  const std::int64_t deep_c = cfg.encoder.out_channels();
  const std::int64_t a = cfg.aspp_channels;
  add_conv(store, "aspp.b0.conv.weight", {a, deep_c, 1, 1, 1}, WeightInit::kKaimingUniform, rng);
  add_bn(store, "aspp.b0.bn", a);
  for (const int rate : {2, 4, 8}) {
    const std::string prefix = "aspp.r" + std::to_string(rate);
    add_conv(store, prefix + ".dw.weight", {deep_c, 1, 3, 3, 3}, WeightInit::kKaimingUniform, rng);
    add_conv(store, prefix + ".pw.weight", {a, deep_c, 1, 1, 1}, WeightInit::kKaimingUniform, rng);
    add_bn(store, prefix + ".bn", a);
  }
  add_conv(store, "aspp.pool.conv.weight", {a, deep_c, 1, 1, 1}, WeightInit::kKaimingUniform, rng);
  add_bn(store, "aspp.pool.bn", a);
  add_conv(store, "aspp.fuse.conv.weight", {a, 5 * a, 1, 1, 1}, WeightInit::kKaimingUniform, rng);
  add_bn(store, "aspp.fuse.bn", a);

  // Decoder: one transposed-conv block per encoder level above the deepest.
  std::vector<std::int64_t> level_channels{cfg.encoder.stem_channels};
  for (std::size_t s = 0; s < cfg.encoder.stages.size(); ++s) {
    level_channels.push_back(cfg.encoder.stage_out_channels(s));
  }
  std::int64_t in_c = a;
  for (std::size_t level = level_channels.size() - 1; level-- > 0;) {
    const std::string prefix = "decoder.up" + std::to_string(level);
    const std::int64_t out_c = level_channels[level];
    const Ivec3 stride = cfg.encoder.stages[level].stride;
    add_conv(store, prefix + ".tconv.weight", {in_c, out_c, stride[0], stride[1], stride[2]},
             WeightInit::kKaimingUniform, rng);
    add_bias(store, prefix + ".tconv.bias", out_c);
    init_sepconv(store, prefix + ".res.conv1", out_c, out_c, rng);
    init_sepconv(store, prefix + ".res.conv2", out_c, out_c, rng);
    in_c = out_c;
  }
  add_conv(store, "decoder.head.conv.weight", {cfg.num_classes, in_c, 1, 1, 1},
           WeightInit::kKaimingUniform, rng);
  add_bias(store, "decoder.head.conv.bias", cfg.num_classes);
  return store;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace {

struct Ctx {
  ParamStore& params;
  bool training;
  bool update_running;
  double momentum;
  double eps;
};

Tensor32 bn(Ctx& ctx, const std::string& prefix, const Tensor32& x) {
  return batchnorm3d<float>(x, ctx.params.at(prefix + ".gamma"), ctx.params.at(prefix + ".beta"),
                            ctx.params.at(prefix + ".running_mean"),
                            ctx.params.at(prefix + ".running_var"), ctx.momentum, ctx.eps,
                            ctx.training, ctx.update_running);
}

Tensor32 conv(Ctx& ctx, const std::string& name, const Tensor32& x, Ivec3 stride, Ivec3 padding,
              Ivec3 dilation = {1, 1, 1}, std::int64_t groups = 1) {
  Conv3dSpec spec;
  spec.stride = stride;
  spec.padding = padding;
  spec.dilation = dilation;
  spec.groups = groups;
  return conv3d<float>(x, ctx.params.at(name), std::nullopt, spec);
}

Tensor32 residual_block(Ctx& ctx, const std::string& prefix, const Tensor32& x, Ivec3 stride,
                        bool bottleneck) {
  Tensor32 identity = x;
  Tensor32 h;
  if (bottleneck) {
    h = relu(bn(ctx, prefix + ".bn1", conv(ctx, prefix + ".conv1.weight", x, {1, 1, 1}, {0, 0, 0})));
    h = relu(bn(ctx, prefix + ".bn2", conv(ctx, prefix + ".conv2.weight", h, stride, {1, 1, 1})));
    h = bn(ctx, prefix + ".bn3", conv(ctx, prefix + ".conv3.weight", h, {1, 1, 1}, {0, 0, 0}));
  } else {
    h = relu(bn(ctx, prefix + ".bn1", conv(ctx, prefix + ".conv1.weight", x, stride, {1, 1, 1})));
    h = bn(ctx, prefix + ".bn2", conv(ctx, prefix + ".conv2.weight", h, {1, 1, 1}, {1, 1, 1}));
  }
  if (ctx.params.contains(prefix + ".down.conv.weight")) {
    identity = bn(ctx, prefix + ".down.bn",
                  conv(ctx, prefix + ".down.conv.weight", x, stride, {0, 0, 0}));
  }
  return relu(add(h, identity));
}

std::vector<Tensor32> encoder_levels(Ctx& ctx, const Tensor32& x, const EncoderConfig& cfg) {
  if (x.rank() != 5) {
    throw ShapeError("encode: expected an NCDHW input, got shape " + shape_str(x.shape()));
  }
  if (x.dim(1) != cfg.in_channels) {
    throw ShapeError("encode: input has " + std::to_string(x.dim(1)) + " channels, config expects " +
                     std::to_string(cfg.in_channels));
  }
  const Ivec3 stride = cfg.output_stride();
  const Ivec3 spatial{x.dim(2), x.dim(3), x.dim(4)};
  for (int a = 0; a < 3; ++a) {
    if (spatial[a] % stride[a] != 0) {
      throw ShapeError(std::string("encode: input ") + kAxisNames[a] + " " +
                       std::to_string(spatial[a]) + " is not divisible by the output stride " +
                       std::to_string(stride[a]));
    }
  }

  std::vector<Tensor32> levels;
  const std::int64_t k = cfg.stem_kernel;
  const Ivec3 stem_pad{(k - 1) / 2, (k - 1) / 2, (k - 1) / 2};
  Tensor32 h = relu(bn(ctx, "encoder.stem.bn",
                       conv(ctx, "encoder.stem.conv.weight", x, cfg.stem_stride, stem_pad)));
  levels.push_back(h);
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    for (std::int64_t b = 0; b < cfg.stages[s].blocks; ++b) {
      const std::string prefix = "encoder.s" + std::to_string(s) + ".b" + std::to_string(b);
      const Ivec3 block_stride = b == 0 ? cfg.stages[s].stride : Ivec3{1, 1, 1};
      h = residual_block(ctx, prefix, h, block_stride, cfg.bottleneck);
    }
    levels.push_back(h);
  }
  return levels;
}

Tensor32 projector_block(Ctx& ctx, const std::string& prefix, const Tensor32& f) {
  Tensor32 h = relu(bn(ctx, prefix + ".bn", conv(ctx, prefix + ".conv1.weight", f, {1, 1, 1}, {0, 0, 0})));
  Conv3dSpec spec;
  return conv3d<float>(h, ctx.params.at(prefix + ".conv2.weight"),
                       ctx.params.at(prefix + ".conv2.bias"), spec);
}

Tensor32 sepconv_bn_relu(Ctx& ctx, const std::string& prefix, const Tensor32& x, Ivec3 dilation) {
  const std::int64_t channels = x.dim(1);
  Tensor32 h = conv(ctx, prefix + ".dw.weight", x, {1, 1, 1}, dilation, dilation, channels);
  h = conv(ctx, prefix + ".pw.weight", h, {1, 1, 1}, {0, 0, 0});
  return relu(bn(ctx, prefix + ".bn", h));
}

Tensor32 sep_residual_block(Ctx& ctx, const std::string& prefix, const Tensor32& x) {
  const std::int64_t channels = x.dim(1);
  Tensor32 h = conv(ctx, prefix + ".conv1.dw.weight", x, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, channels);
  h = conv(ctx, prefix + ".conv1.pw.weight", h, {1, 1, 1}, {0, 0, 0});
  h = relu(bn(ctx, prefix + ".conv1.bn", h));
  h = conv(ctx, prefix + ".conv2.dw.weight", h, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}, channels);
  h = conv(ctx, prefix + ".conv2.pw.weight", h, {1, 1, 1}, {0, 0, 0});
  h = bn(ctx, prefix + ".conv2.bn", h);
  return relu(add(h, x));
}

}  // namespace

std::vector<Tensor32> encode_stages(ParamStore& params, const Tensor32& x,
                                    const EncoderConfig& cfg, bool training, bool update_running,
                                    double bn_momentum, double bn_eps) {
  Ctx ctx{params, training, update_running, bn_momentum, bn_eps};
  return encoder_levels(ctx, x, cfg);
}

Tensor32 encode(ParamStore& params, const Tensor32& x, const EncoderConfig& cfg, bool training,
                bool update_running, double bn_momentum, double bn_eps) {
  Ctx ctx{params, training, update_running, bn_momentum, bn_eps};
  return encoder_levels(ctx, x, cfg).back();
}

Tensor32 project(ParamStore& params, const Tensor32& f, const NetworkConfig& cfg, bool training,
                 bool update_running) {
  if (f.rank() != 5 || f.dim(1) != cfg.encoder.out_channels()) {
    throw ShapeError("project: feature channels " +
                     std::to_string(f.rank() == 5 ? f.dim(1) : -1) + " do not match encoder output " +
                     std::to_string(cfg.encoder.out_channels()));
  }
  Ctx ctx{params, training, update_running, cfg.bn_momentum, cfg.bn_eps};
  return projector_block(ctx, "projector", f);
}

Tensor32 predict(ParamStore& params, const Tensor32& f, const NetworkConfig& cfg, bool training,
                 bool update_running) {
  if (cfg.predictor_mode == PredictorMode::kIdentity) {
    return f;
  }
  if (f.rank() != 5 || f.dim(1) != cfg.projector.out) {
    throw ShapeError("predict: feature channels do not match the projector output width " +
                     std::to_string(cfg.projector.out));
  }
  Ctx ctx{params, training, update_running, cfg.bn_momentum, cfg.bn_eps};
  return projector_block(ctx, "predictor", f);
}

Tensor32 segment(ParamStore& params, const Tensor32& x, const NetworkConfig& cfg, bool training,
                 bool update_running) {
  Ctx ctx{params, training, update_running, cfg.bn_momentum, cfg.bn_eps};
  std::vector<Tensor32> levels = encoder_levels(ctx, x, cfg.encoder);
  Tensor32 deep = levels.back();
  const Ivec3 deep_size{deep.dim(2), deep.dim(3), deep.dim(4)};

  // ASPP: 1x1 branch, three dilated separable branches, pooled branch,
  // concatenated and fused.
  std::vector<Tensor32> branches;
  branches.push_back(relu(bn(ctx, "aspp.b0.bn", conv(ctx, "aspp.b0.conv.weight", deep, {1, 1, 1}, {0, 0, 0}))));
  for (const int rate : {2, 4, 8}) {
    branches.push_back(sepconv_bn_relu(ctx, "aspp.r" + std::to_string(rate), deep,
                                       {rate, rate, rate}));
  }
  Tensor32 pooled = global_avg_pool(deep);
  pooled = relu(bn(ctx, "aspp.pool.bn", conv(ctx, "aspp.pool.conv.weight", pooled, {1, 1, 1}, {0, 0, 0})));
  branches.push_back(resize_trilinear(pooled, deep_size));
  Tensor32 h = concat_channels<float>(branches);
  h = relu(bn(ctx, "aspp.fuse.bn", conv(ctx, "aspp.fuse.conv.weight", h, {1, 1, 1}, {0, 0, 0})));

  // Decoder: upsample, sum with the matching encoder level, refine.
  for (std::size_t level = levels.size() - 1; level-- > 0;) {
    const std::string prefix = "decoder.up" + std::to_string(level);
    const Ivec3 stride = cfg.encoder.stages[level].stride;
    h = conv_transpose3d<float>(h, params.at(prefix + ".tconv.weight"),
                                params.at(prefix + ".tconv.bias"), stride);
    h = add(h, levels[level]);
    h = sep_residual_block(ctx, prefix + ".res", h);
  }

  Conv3dSpec head;
  Tensor32 logits = conv3d<float>(h, params.at("decoder.head.conv.weight"),
                                  params.at("decoder.head.conv.bias"), head);
  return resize_trilinear(logits, {x.dim(2), x.dim(3), x.dim(4)});
}

}  // namespace pgl
