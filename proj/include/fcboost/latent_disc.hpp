#pragma once

#include <filesystem>

#include <torch/torch.h>

#include "json.hpp"

#include "fcboost/checkpoint.hpp"
#include "fcboost/common.hpp"
#include "fcboost/nn.hpp"

namespace fcboost {

/// Real/fake discriminator over W: 512 -> 512 -> 256 -> 64 -> 1 with leaky
/// ReLU between layers. `forward` returns logits; `disc_score` the
/// probability.
class LatentDiscriminatorImpl : public torch::nn::Module {
 public:
  static constexpr std::array<int, 5> kWidths = {kLatentDim, 512, 256, 64, 1};

  LatentDiscriminatorImpl(Category category, Rng& rng, bool zero_last_layer = false);

  torch::Tensor forward(const torch::Tensor& w);

  Category category() const { return category_; }
  std::size_t num_layers() const { return layers_.size(); }

 private:
  Category category_;
  std::vector<nn::EqualLinear> layers_;
};
TORCH_MODULE(LatentDiscriminator);

inline constexpr double kProbabilityEpsilon = 1e-6;

/// Probability that each code is real, shape [B], strictly inside (0, 1).
torch::Tensor disc_score(LatentDiscriminator& d, const torch::Tensor& w);

/// -(mean log p_real + mean log(1 - p_fake)), probabilities clamped to
/// [1e-6, 1 - 1e-6].
torch::Tensor disc_loss_from_probs(const torch::Tensor& p_real, const torch::Tensor& p_fake);
/// -mean log p_fake, same clamping.
torch::Tensor adv_loss_from_probs(const torch::Tensor& p_fake);

/// `fake_ws` is detached here, so no gradient reaches the encoders.
torch::Tensor disc_loss(LatentDiscriminator& d, const torch::Tensor& real_ws, const torch::Tensor& fake_ws);
torch::Tensor adv_loss(LatentDiscriminator& d, const torch::Tensor& fake_ws);

/// Replay pool of past codes. While filling, fresh codes are stored and
/// returned unchanged. Once full, each fresh code is returned as is with
/// probability 1 - p, or swapped for a random stored code with probability p.
class CodePool {
 public:
  explicit CodePool(std::size_t capacity = 200, double replace_probability = 0.5);

  /// Returns a batch of the same shape as `fresh` ([B, D]); never carries
  /// gradient.
  torch::Tensor query(const torch::Tensor& fresh, Rng& rng);

  std::size_t size() const { return codes_.size(); }
  std::size_t capacity() const { return capacity_; }

  /// Stored codes as one [size, D] tensor (empty [0, 0] when the pool is empty).
  torch::Tensor snapshot() const;
  void restore(const torch::Tensor& codes);

 private:
  std::size_t capacity_;
  double replace_probability_;
  std::vector<torch::Tensor> codes_;
};

void save_latent_discriminator(LatentDiscriminator& d, const std::filesystem::path& path,
                               const nlohmann::json& metadata = nlohmann::json::object());
LatentDiscriminator load_latent_discriminator(const std::filesystem::path& path);

}  // namespace fcboost
