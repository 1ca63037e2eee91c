#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "fcboost/common.hpp"

namespace fcboost::nn {

/// Draws an i.i.d. normal tensor from `rng` (float32).
torch::Tensor normal_tensor(Rng& rng, std::vector<std::int64_t> shape, double stddev = 1.0);

/// leaky_relu(0.2) scaled by sqrt(2) to keep activations unit-variance.
torch::Tensor lrelu(const torch::Tensor& x);

/// Single-threaded, deterministic execution. Called by every entry point.
void configure_runtime();

/// Fully connected layer with equalized learning rate: weights are stored
/// with unit variance and scaled by lr_mul / sqrt(fan_in) at run time.
class EqualLinearImpl : public torch::nn::Module {
 public:
  EqualLinearImpl(std::int64_t in, std::int64_t out, Rng& rng, double bias_init = 0.0,
                  double lr_mul = 1.0, bool activate = false);

  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  double scale_;
  double lr_mul_;
  bool activate_;
};
TORCH_MODULE(EqualLinear);

class EqualConv2dImpl : public torch::nn::Module {
 public:
  EqualConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, Rng& rng,
                  std::int64_t stride = 1, bool activate = true);

  torch::Tensor forward(const torch::Tensor& x);

  torch::Tensor weight;
  torch::Tensor bias;

 private:
  double scale_;
  std::int64_t stride_;
  std::int64_t padding_;
  bool activate_;
};
TORCH_MODULE(EqualConv2d);

/// Style-modulated convolution. Modulation is applied to the input
/// activations and demodulation to the output, which equals the per-sample
/// weight form without grouped convolutions.
class ModulatedConv2dImpl : public torch::nn::Module {
 public:
  ModulatedConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel,
                      std::int64_t style_dim, Rng& rng, bool demodulate = true,
                      bool upsample = false, bool activate = true);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w);

 private:
  EqualLinear affine_{nullptr};
  torch::Tensor weight_;
  torch::Tensor bias_;
  double scale_;
  std::int64_t padding_;
  bool demodulate_;
  bool upsample_;
  bool activate_;
};
TORCH_MODULE(ModulatedConv2d);

/// Channel width at a given feature-map resolution: min(max, base / res).
int channels_at(int resolution, int channel_base, int channel_max);

int log2_exact(int value);

/// Parameters plus buffers, sorted by name.
std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& module);

/// SHA-256 over every named state tensor (names, shapes and raw bytes).
std::string state_hash(const torch::nn::Module& module);

void set_requires_grad(torch::nn::Module& module, bool requires_grad);

}  // namespace fcboost::nn
