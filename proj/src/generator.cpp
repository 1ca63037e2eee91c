#include "fcboost/generator.hpp"

#include <cmath>

#include "fcboost/checkpoint.hpp"

namespace fcboost {
namespace {

namespace F = torch::nn::functional;

torch::Tensor upsample2x(const torch::Tensor& x) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .scale_factor(std::vector<double>{2.0, 2.0})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

torch::Tensor minibatch_stddev(const torch::Tensor& x) {
  const auto batch = x.size(0);
  const std::int64_t group = batch % 4 == 0 ? 4 : (batch % 2 == 0 ? 2 : 1);
  auto y = x.view({group, -1, x.size(1), x.size(2), x.size(3)});
  y = y - y.mean(0);
  y = torch::sqrt(y.square().mean(0) + 1e-8);
  y = y.mean({1, 2, 3}).view({-1, 1, 1, 1});
  y = y.repeat({group, 1, x.size(2), x.size(3)});
  return torch::cat({x, y}, 1);
}

void check_latents(const torch::Tensor& v, const char* what) {
  if (v.dim() != 2 || v.size(1) != kLatentDim) {
    fail(ErrorCode::config, std::string(what) + " must have shape [B, 512]");
  }
  if (!torch::isfinite(v).all().item<bool>()) {
    fail(ErrorCode::domain, std::string(what) + " contains non-finite values");
  }
}

nlohmann::json generator_metadata(const CategoryGenerator& gen) {
  return {{"category", category_name(gen->category())},
          {"resolution", gen->config().resolution},
          {"config", gen->config().to_json()}};
}

}  // namespace

void GeneratorConfig::validate() const {
  if (resolution < 8) fail(ErrorCode::config, "generator resolution must be at least 8");
  nn::log2_exact(resolution);
  if (mapping_layers < 1) fail(ErrorCode::config, "mapping network needs at least one layer");
  if (channel_base <= 0 || channel_max <= 0) fail(ErrorCode::config, "channel widths must be positive");
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"resolution", resolution},
          {"mapping_layers", mapping_layers},
          {"mapping_lr_mul", mapping_lr_mul},
          {"channel_base", channel_base},
          {"channel_max", channel_max}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.mapping_layers = j.value("mapping_layers", c.mapping_layers);
  c.mapping_lr_mul = j.value("mapping_lr_mul", c.mapping_lr_mul);
  c.channel_base = j.value("channel_base", c.channel_base);
  c.channel_max = j.value("channel_max", c.channel_max);
  return c;
}

MappingNetworkImpl::MappingNetworkImpl(const GeneratorConfig& config, Rng& rng) {
  layers_ = register_module("layers", torch::nn::ModuleList());
  for (int i = 0; i < config.mapping_layers; ++i) {
    layers_->push_back(nn::EqualLinear(kLatentDim, kLatentDim, rng, 0.0, config.mapping_lr_mul,
                                       /*activate=*/true));
  }
  w_avg = register_buffer("w_avg", torch::zeros({kLatentDim}));
}

torch::Tensor MappingNetworkImpl::forward(const torch::Tensor& z) {
  auto x = z * torch::rsqrt(z.square().mean(1, /*keepdim=*/true) + 1e-8);
  for (const auto& layer : *layers_) x = layer->as<nn::EqualLinearImpl>()->forward(x);
  return x;
}

void MappingNetworkImpl::track_average(const torch::Tensor& w, double beta) {
  torch::NoGradGuard no_grad;
  w_avg.copy_(torch::lerp(w.detach().mean(0), w_avg, beta));
}

SynthesisNetworkImpl::SynthesisNetworkImpl(const GeneratorConfig& config, Rng& rng) {
  config.validate();
  const auto ch = [&](int r) { return nn::channels_at(r, config.channel_base, config.channel_max); };
  constant_ = register_parameter("constant", nn::normal_tensor(rng, {1, ch(4), 4, 4}));
  int index = 0;
  auto add_conv = [&](int in, int out, bool upsample) {
    convs_.push_back(register_module("conv" + std::to_string(index++),
                                     nn::ModulatedConv2d(in, out, 3, kLatentDim, rng, true, upsample)));
  };
  auto add_rgb = [&](int in) {
    to_rgb_.push_back(register_module(
        "to_rgb" + std::to_string(to_rgb_.size()),
        nn::ModulatedConv2d(in, 3, 1, kLatentDim, rng, /*demodulate=*/false, false, /*activate=*/false)));
  };
  add_conv(ch(4), ch(4), false);
  add_rgb(ch(4));
  for (int r = 8; r <= config.resolution; r *= 2) {
    add_conv(ch(r / 2), ch(r), true);
    add_conv(ch(r), ch(r), false);
    add_rgb(ch(r));
  }
}

torch::Tensor SynthesisNetworkImpl::forward(const torch::Tensor& w) {
  auto x = constant_.expand({w.size(0), -1, -1, -1});
  x = convs_[0]->forward(x, w);
  auto rgb = to_rgb_[0]->forward(x, w);
  for (std::size_t level = 1; level < to_rgb_.size(); ++level) {
    x = convs_[2 * level - 1]->forward(x, w);
    x = convs_[2 * level]->forward(x, w);
    rgb = upsample2x(rgb) + to_rgb_[level]->forward(x, w);
  }
  return torch::tanh(rgb);
}

CategoryGeneratorImpl::CategoryGeneratorImpl(Category category, const GeneratorConfig& config, Rng& rng)
    : category_(category), config_(config) {
  config_.validate();
  mapping = register_module("mapping", MappingNetwork(config_, rng));
  synthesis = register_module("synthesis", SynthesisNetwork(config_, rng));
}

void CategoryGeneratorImpl::freeze() {
  nn::set_requires_grad(*this, false);
  eval();
  frozen_ = true;
}

torch::Tensor map_latent(CategoryGenerator& gen, const torch::Tensor& z) {
  check_latents(z, "latent noise z");
  return gen->mapping->forward(z);
}

torch::Tensor synthesize(CategoryGenerator& gen, const torch::Tensor& w) {
  if (w.dim() != 2 || w.size(1) != kLatentDim) {
    fail(ErrorCode::config, "latent code w must have shape [B, 512]");
  }
  return gen->synthesis->forward(w);
}

torch::Tensor random_item(CategoryGenerator& gen, const torch::Tensor& z) {
  return synthesize(gen, map_latent(gen, z));
}

// ---------------------------------------------------------------------------

void EncoderConfig::validate() const {
  if (resolution < 8) fail(ErrorCode::config, "encoder resolution must be at least 8");
  nn::log2_exact(resolution);
  if (channel_base <= 0 || channel_max <= 0) fail(ErrorCode::config, "channel widths must be positive");
}

nlohmann::json EncoderConfig::to_json() const {
  return {{"resolution", resolution}, {"channel_base", channel_base}, {"channel_max", channel_max}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.channel_base = j.value("channel_base", c.channel_base);
  c.channel_max = j.value("channel_max", c.channel_max);
  return c;
}

OutfitEncoderImpl::OutfitEncoderImpl(Category category, const EncoderConfig& config, Rng& rng)
    : category_(category), config_(config) {
  config_.validate();
  const auto ch = [&](int r) { return nn::channels_at(r, config_.channel_base, config_.channel_max); };
  convs_ = register_module("convs", torch::nn::ModuleList());
  convs_->push_back(nn::EqualConv2d(kOutfitChannels, ch(config_.resolution), 3, rng));
  for (int r = config_.resolution; r > 4; r /= 2) {
    convs_->push_back(nn::EqualConv2d(ch(r), ch(r / 2), 3, rng, /*stride=*/2));
  }
  head_ = register_module("head", nn::EqualLinear(ch(4) * 16, kLatentDim, rng));
  w_avg = register_buffer("w_avg", torch::zeros({kLatentDim}));
}

torch::Tensor OutfitEncoderImpl::forward(const torch::Tensor& stack) {
  auto x = stack;
  for (const auto& conv : *convs_) x = conv->as<nn::EqualConv2dImpl>()->forward(x);
  return head_->forward(x.flatten(1)) + w_avg;
}

torch::Tensor encode(OutfitEncoder& enc, const torch::Tensor& outfit_stack) {
  if (outfit_stack.dim() != 4 || outfit_stack.size(1) != kOutfitChannels) {
    fail(ErrorCode::config, "encoder input must have shape [B, 12, R, R]");
  }
  if (outfit_stack.size(2) != enc->config().resolution || outfit_stack.size(3) != enc->config().resolution) {
    fail(ErrorCode::config, "encoder input resolution does not match the encoder");
  }
  return enc->forward(outfit_stack);
}

// ---------------------------------------------------------------------------

ImageDiscriminatorImpl::ImageDiscriminatorImpl(const GeneratorConfig& config, Rng& rng) {
  config.validate();
  const auto ch = [&](int r) { return nn::channels_at(r, config.channel_base, config.channel_max); };
  from_rgb_ = register_module("from_rgb", nn::EqualConv2d(3, ch(config.resolution), 1, rng));
  blocks_ = register_module("blocks", torch::nn::ModuleList());
  for (int r = config.resolution; r > 4; r /= 2) {
    blocks_->push_back(nn::EqualConv2d(ch(r), ch(r), 3, rng));
    blocks_->push_back(nn::EqualConv2d(ch(r), ch(r / 2), 3, rng, /*stride=*/2));
  }
  final_conv_ = register_module("final_conv", nn::EqualConv2d(ch(4) + 1, ch(4), 3, rng));
  fc_ = register_module("fc", nn::EqualLinear(ch(4) * 16, ch(4), rng, 0.0, 1.0, /*activate=*/true));
  out_ = register_module("out", nn::EqualLinear(ch(4), 1, rng));
}

torch::Tensor ImageDiscriminatorImpl::forward(const torch::Tensor& images) {
  auto x = from_rgb_->forward(images);
  for (const auto& block : *blocks_) x = block->as<nn::EqualConv2dImpl>()->forward(x);
  x = final_conv_->forward(minibatch_stddev(x));
  return out_->forward(fc_->forward(x.flatten(1))).squeeze(1);
}

nlohmann::json GanTrainConfig::to_json() const {
  return {{"iterations", iterations},       {"batch_size", batch_size},
          {"learning_rate", learning_rate}, {"beta1", beta1},
          {"beta2", beta2},                 {"r1_gamma", r1_gamma},
          {"r1_interval", r1_interval},     {"w_avg_beta", w_avg_beta},
          {"collapse_window", collapse_window}, {"collapse_threshold", collapse_threshold},
          {"log_interval", log_interval},   {"seed", seed}};
}

GanTrainConfig GanTrainConfig::from_json(const nlohmann::json& j) {
  GanTrainConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.r1_gamma = j.value("r1_gamma", c.r1_gamma);
  c.r1_interval = j.value("r1_interval", c.r1_interval);
  c.w_avg_beta = j.value("w_avg_beta", c.w_avg_beta);
  c.collapse_window = j.value("collapse_window", c.collapse_window);
  c.collapse_threshold = j.value("collapse_threshold", c.collapse_threshold);
  c.log_interval = j.value("log_interval", c.log_interval);
  c.seed = j.value("seed", c.seed);
  return c;
}

CategoryGenerator pretrain_category_gan(const torch::Tensor& images, Category category,
                                        const GeneratorConfig& config, const GanTrainConfig& train,
                                        const std::function<void(const GanLogEntry&)>& on_log) {
  nn::configure_runtime();
  if (images.dim() != 4 || images.size(0) < 1 || images.size(2) != config.resolution) {
    fail(ErrorCode::config, "pre-training images must be [N, 3, R, R] at the generator resolution");
  }
  Rng rng(mix_seed(train.seed, static_cast<std::uint64_t>(slot(category))));
  CategoryGenerator gen(category, config, rng);
  ImageDiscriminator disc(config, rng);
  const auto adam = [&](std::vector<torch::Tensor> params) {
    return torch::optim::Adam(std::move(params), torch::optim::AdamOptions(train.learning_rate)
                                                     .betas({train.beta1, train.beta2})
                                                     .eps(1e-8));
  };
  auto opt_g = adam(gen->parameters());
  auto opt_d = adam(disc->parameters());

  const auto n = images.size(0);
  const auto batch = static_cast<std::int64_t>(train.batch_size);
  auto sample_real = [&] {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(batch));
    for (auto& i : idx) i = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(n)));
    return images.index_select(0, torch::tensor(idx));
  };
  auto sample_z = [&] { return nn::normal_tensor(rng, {batch, kLatentDim}); };

  int collapsed_steps = 0;
  GanLogEntry entry;
  for (int it = 1; it <= train.iterations; ++it) {
    // Discriminator step.
    nn::set_requires_grad(*gen, false);
    nn::set_requires_grad(*disc, true);
    const auto real = sample_real();
    const auto fake = random_item(gen, sample_z()).detach();
    const bool regularize = train.r1_gamma > 0.0 && it % train.r1_interval == 0;
    const auto real_in = regularize ? real.clone().requires_grad_(true) : real;
    const auto real_logits = disc->forward(real_in);
    const auto d_loss = torch::softplus(disc->forward(fake)).mean() + torch::softplus(-real_logits).mean();
    auto d_total = d_loss;
    double r1_value = 0.0;
    if (regularize) {
      const auto grad = torch::autograd::grad({real_logits.sum()}, {real_in}, {}, true, true)[0];
      const auto penalty = grad.square().sum({1, 2, 3}).mean();
      r1_value = penalty.item<double>();
      d_total = d_total + penalty * (train.r1_gamma * 0.5 * train.r1_interval);
    }
    opt_d.zero_grad();
    d_total.backward();
    opt_d.step();

    // Generator step.
    nn::set_requires_grad(*gen, true);
    nn::set_requires_grad(*disc, false);
    const auto w = gen->mapping->forward(sample_z());
    const auto g_loss = torch::softplus(-disc->forward(gen->synthesis->forward(w))).mean();
    opt_g.zero_grad();
    g_loss.backward();
    opt_g.step();
    gen->mapping->track_average(w, train.w_avg_beta);

    const double d_value = d_loss.item<double>();
    const double g_value = g_loss.item<double>();
    if (!std::isfinite(d_value) || !std::isfinite(g_value)) {
      fail(ErrorCode::divergence, "non-finite GAN loss at iteration " + std::to_string(it) +
                                      " for category " + std::string(category_name(category)));
    }
    collapsed_steps = d_value < train.collapse_threshold ? collapsed_steps + 1 : 0;
    if (collapsed_steps >= train.collapse_window) {
      fail(ErrorCode::divergence, "discriminator loss collapsed to 0 for " +
                                      std::to_string(collapsed_steps) + " steps (category " +
                                      std::string(category_name(category)) + ")");
    }
    if (r1_value > 0.0) entry.r1 = r1_value;
    if (on_log && train.log_interval > 0 && it % train.log_interval == 0) {
      entry.iteration = it;
      entry.d_loss = d_value;
      entry.g_loss = g_value;
      on_log(entry);
    }
  }
  nn::set_requires_grad(*gen, true);
  gen->eval();
  return gen;
}

// ---------------------------------------------------------------------------

std::filesystem::path generator_file(const std::filesystem::path& dir, Category c,
                                     const std::string& network) {
  return dir / ("gan_" + std::string(category_name(c)) + "_" + network + ".fcbk");
}

void save_generator(CategoryGenerator& gen, const std::filesystem::path& dir,
                    const nlohmann::json& sidecar) {
  const auto meta = generator_metadata(gen);
  save_checkpoint(module_checkpoint(*gen->mapping, "mapping", meta),
                  generator_file(dir, gen->category(), "mapping"));
  save_checkpoint(module_checkpoint(*gen->synthesis, "synthesis", meta),
                  generator_file(dir, gen->category(), "synthesis"));
  nlohmann::json side = sidecar;
  side["category"] = category_name(gen->category());
  side["generator"] = gen->config().to_json();
  side["state_hash"] = nn::state_hash(*gen);
  write_json_file(side, dir / ("gan_" + std::string(category_name(gen->category())) + ".json"));
}

CategoryGenerator load_generator(const std::filesystem::path& dir, Category category) {
  const auto mapping = load_checkpoint(generator_file(dir, category, "mapping"));
  const auto synthesis = load_checkpoint(generator_file(dir, category, "synthesis"));
  if (mapping.kind != "mapping" || synthesis.kind != "synthesis") {
    fail(ErrorCode::incompatible_checkpoint, "generator checkpoints have unexpected kinds");
  }
  const auto config = GeneratorConfig::from_json(mapping.metadata.at("config"));
  if (synthesis.metadata.at("config") != mapping.metadata.at("config")) {
    fail(ErrorCode::incompatible_checkpoint,
         "mapping and synthesis checkpoints disagree for " + std::string(category_name(category)));
  }
  Rng rng(0);
  CategoryGenerator gen(category, config, rng);
  load_module_state(*gen->mapping, mapping);
  load_module_state(*gen->synthesis, synthesis);
  gen->eval();
  return gen;
}

void save_encoder(OutfitEncoder& enc, const std::filesystem::path& path, const nlohmann::json& metadata) {
  nlohmann::json meta = metadata;
  meta["category"] = category_name(enc->category());
  meta["resolution"] = enc->config().resolution;
  meta["config"] = enc->config().to_json();
  save_checkpoint(module_checkpoint(*enc, "encoder", meta), path);
}

OutfitEncoder load_encoder(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  if (ckpt.kind != "encoder") fail(ErrorCode::incompatible_checkpoint, "'" + path.string() + "' is not an encoder");
  Rng rng(0);
  OutfitEncoder enc(parse_category(ckpt.metadata.at("category").get<std::string>()),
                    EncoderConfig::from_json(ckpt.metadata.at("config")), rng);
  load_module_state(*enc, ckpt);
  return enc;
}

}  // namespace fcboost
