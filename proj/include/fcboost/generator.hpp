#pragma once

#include <filesystem>
#include <functional>

#include <torch/torch.h>

#include "json.hpp"

#include "fcboost/common.hpp"
#include "fcboost/nn.hpp"

// Per-category generator triple: mapping network (z -> w), synthesis network
// (w -> image) and the outfit encoder (12-channel outfit stack -> w).
//
// Shape conventions: latent noise z and latent codes w are [B, 512] float
// tensors; item images are [B, 3, R, R] in [-1, 1].

namespace fcboost {

struct GeneratorConfig {
  int resolution = 64;
  int mapping_layers = 4;
  double mapping_lr_mul = 0.01;
  int channel_base = 512;  // feature width at resolution r: min(channel_max, channel_base / r)
  int channel_max = 64;

  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

class MappingNetworkImpl : public torch::nn::Module {
 public:
  MappingNetworkImpl(const GeneratorConfig& config, Rng& rng);

  torch::Tensor forward(const torch::Tensor& z);
  /// Exponential moving average of produced codes (no gradient).
  void track_average(const torch::Tensor& w, double beta);

  torch::Tensor w_avg;

 private:
  torch::nn::ModuleList layers_;
};
TORCH_MODULE(MappingNetwork);

class SynthesisNetworkImpl : public torch::nn::Module {
 public:
  SynthesisNetworkImpl(const GeneratorConfig& config, Rng& rng);

  /// Deterministic in w: no per-layer noise injection.
  torch::Tensor forward(const torch::Tensor& w);

 private:
  torch::Tensor constant_;
  std::vector<nn::ModulatedConv2d> convs_;
  std::vector<nn::ModulatedConv2d> to_rgb_;
};
TORCH_MODULE(SynthesisNetwork);

class CategoryGeneratorImpl : public torch::nn::Module {
 public:
  CategoryGeneratorImpl(Category category, const GeneratorConfig& config, Rng& rng);

  Category category() const { return category_; }
  const GeneratorConfig& config() const { return config_; }
  bool frozen() const { return frozen_; }
  /// Stops gradient accumulation into mapping and synthesis parameters.
  void freeze();

  MappingNetwork mapping{nullptr};
  SynthesisNetwork synthesis{nullptr};

 private:
  Category category_;
  GeneratorConfig config_;
  bool frozen_ = false;
};
TORCH_MODULE(CategoryGenerator);

/// w = f(z). Rejects non-finite or wrongly shaped noise.
torch::Tensor map_latent(CategoryGenerator& gen, const torch::Tensor& z);
/// image = g(w), in [-1, 1].
torch::Tensor synthesize(CategoryGenerator& gen, const torch::Tensor& w);
/// g(f(z)); order-preserving over the batch.
torch::Tensor random_item(CategoryGenerator& gen, const torch::Tensor& z);

// ---------------------------------------------------------------------------
// Outfit encoder

struct EncoderConfig {
  int resolution = 64;
  int channel_base = 512;
  int channel_max = 128;

  void validate() const;
  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

inline constexpr int kOutfitChannels = 3 * kNumCategories;

/// Conv backbone over the 12-channel outfit stack, downsampling to 4x4 and
/// projecting to one 512-d code. The output is an offset from `w_avg`, the
/// average code of the category's mapping network.
class OutfitEncoderImpl : public torch::nn::Module {
 public:
  OutfitEncoderImpl(Category category, const EncoderConfig& config, Rng& rng);

  torch::Tensor forward(const torch::Tensor& stack);

  Category category() const { return category_; }
  const EncoderConfig& config() const { return config_; }

  torch::Tensor w_avg;

 private:
  Category category_;
  EncoderConfig config_;
  torch::nn::ModuleList convs_;
  nn::EqualLinear head_{nullptr};
};
TORCH_MODULE(OutfitEncoder);

/// w = e(stack). Throws ErrorCode::config on a wrong channel count or resolution.
torch::Tensor encode(OutfitEncoder& enc, const torch::Tensor& outfit_stack);

// ---------------------------------------------------------------------------
// Unconditional pre-training of (mapping, synthesis)

class ImageDiscriminatorImpl : public torch::nn::Module {
 public:
  ImageDiscriminatorImpl(const GeneratorConfig& config, Rng& rng);

  /// Real/fake logits, shape [B].
  torch::Tensor forward(const torch::Tensor& images);

 private:
  nn::EqualConv2d from_rgb_{nullptr};
  torch::nn::ModuleList blocks_;
  nn::EqualConv2d final_conv_{nullptr};
  nn::EqualLinear fc_{nullptr};
  nn::EqualLinear out_{nullptr};
};
TORCH_MODULE(ImageDiscriminator);

struct GanTrainConfig {
  int iterations = 3000;
  int batch_size = 16;
  double learning_rate = 2e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double r1_gamma = 1.0;
  int r1_interval = 4;  // lazy regularization; the penalty is scaled by the interval
  double w_avg_beta = 0.995;
  int collapse_window = 1000;
  double collapse_threshold = 1e-3;
  int log_interval = 100;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static GanTrainConfig from_json(const nlohmann::json& j);
};

struct GanLogEntry {
  int iteration = 0;
  double d_loss = 0.0;
  double g_loss = 0.0;
  double r1 = 0.0;
};

/// Trains mapping + synthesis for one category with the non-saturating loss
/// and an R1 penalty on real images. `images` is [N, 3, R, R]. Throws
/// ErrorCode::divergence when the discriminator loss stays below
/// `collapse_threshold` for `collapse_window` consecutive steps.
CategoryGenerator pretrain_category_gan(const torch::Tensor& images, Category category,
                                        const GeneratorConfig& config,
                                        const GanTrainConfig& train,
                                        const std::function<void(const GanLogEntry&)>& on_log = {});

// ---------------------------------------------------------------------------
// Checkpoints: gan_<category>_mapping.fcbk, gan_<category>_synthesis.fcbk,
// gan_<category>.json (sidecar), encoder_<category>.fcbk.

std::filesystem::path generator_file(const std::filesystem::path& dir, Category c,
                                     const std::string& network);
void save_generator(CategoryGenerator& gen, const std::filesystem::path& dir,
                    const nlohmann::json& sidecar = nlohmann::json::object());
CategoryGenerator load_generator(const std::filesystem::path& dir, Category category);

void save_encoder(OutfitEncoder& enc, const std::filesystem::path& path,
                  const nlohmann::json& metadata = nlohmann::json::object());
OutfitEncoder load_encoder(const std::filesystem::path& path);

}  // namespace fcboost
