#include "fcboost/nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <openssl/evp.h>

namespace fcboost::nn {

torch::Tensor normal_tensor(Rng& rng, std::vector<std::int64_t> shape, double stddev) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<float> values(static_cast<std::size_t>(n));
  for (float& v : values) v = static_cast<float>(rng.normal() * stddev);
  return torch::from_blob(values.data(), shape, torch::kFloat32).clone();
}

torch::Tensor lrelu(const torch::Tensor& x) {
  return torch::leaky_relu(x, 0.2) * std::sqrt(2.0);
}

void configure_runtime() {
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, /*warn_only=*/true);
}

EqualLinearImpl::EqualLinearImpl(std::int64_t in, std::int64_t out, Rng& rng, double bias_init,
                                 double lr_mul, bool activate)
    : scale_(lr_mul / std::sqrt(static_cast<double>(in))), lr_mul_(lr_mul), activate_(activate) {
  weight = register_parameter("weight", normal_tensor(rng, {out, in}, 1.0 / lr_mul));
  bias = register_parameter("bias", torch::full({out}, bias_init / lr_mul));
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) {
  auto y = torch::nn::functional::linear(x, weight * scale_, bias * lr_mul_);
  return activate_ ? lrelu(y) : y;
}

EqualConv2dImpl::EqualConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, Rng& rng,
                                 std::int64_t stride, bool activate)
    : scale_(1.0 / std::sqrt(static_cast<double>(in * kernel * kernel))),
      stride_(stride),
      padding_(kernel / 2),
      activate_(activate) {
  weight = register_parameter("weight", normal_tensor(rng, {out, in, kernel, kernel}));
  bias = register_parameter("bias", torch::zeros({out}));
}

torch::Tensor EqualConv2dImpl::forward(const torch::Tensor& x) {
  auto y = torch::conv2d(x, weight * scale_, bias, {stride_, stride_}, {padding_, padding_});
  return activate_ ? lrelu(y) : y;
}

ModulatedConv2dImpl::ModulatedConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel,
                                         std::int64_t style_dim, Rng& rng, bool demodulate,
                                         bool upsample, bool activate)
    : scale_(1.0 / std::sqrt(static_cast<double>(in * kernel * kernel))),
      padding_(kernel / 2),
      demodulate_(demodulate),
      upsample_(upsample),
      activate_(activate) {
  affine_ = register_module("affine", EqualLinear(style_dim, in, rng, /*bias_init=*/1.0));
  weight_ = register_parameter("weight", normal_tensor(rng, {out, in, kernel, kernel}));
  bias_ = register_parameter("bias", torch::zeros({out}));
}

torch::Tensor ModulatedConv2dImpl::forward(const torch::Tensor& x, const torch::Tensor& w) {
  const auto styles = affine_->forward(w);  // [B, in]
  auto h = x;
  if (upsample_) {
    h = torch::nn::functional::interpolate(
        h, torch::nn::functional::InterpolateFuncOptions()
               .scale_factor(std::vector<double>{2.0, 2.0})
               .mode(torch::kBilinear)
               .align_corners(false));
  }
  const auto weight = weight_ * scale_;
  h = h * styles.unsqueeze(-1).unsqueeze(-1);
  h = torch::conv2d(h, weight, {}, 1, padding_);
  if (demodulate_) {
    // sum_{in,k,k} (W * s)^2 per sample and output channel.
    const auto wsq = weight.square().sum({2, 3});              // [out, in]
    const auto dcoef = torch::rsqrt(torch::matmul(styles.square(), wsq.t()) + 1e-8);  // [B, out]
    h = h * dcoef.unsqueeze(-1).unsqueeze(-1);
  }
  h = h + bias_.view({1, -1, 1, 1});
  return activate_ ? lrelu(h) : h;
}

int channels_at(int resolution, int channel_base, int channel_max) {
  return std::max(1, std::min(channel_max, channel_base / resolution));
}

int log2_exact(int value) {
  int bits = 0;
  while ((1 << bits) < value) ++bits;
  if ((1 << bits) != value) fail(ErrorCode::config, "resolution must be a power of two");
  return bits;
}

std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> sorted;
  for (const auto& p : module.named_parameters(/*recurse=*/true)) sorted[p.key()] = p.value();
  for (const auto& b : module.named_buffers(/*recurse=*/true)) sorted[b.key()] = b.value();
  return {sorted.begin(), sorted.end()};
}

std::string state_hash(const torch::nn::Module& module) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto& [name, tensor] : named_state(module)) {
    const auto t = tensor.detach().contiguous().cpu();
    EVP_DigestUpdate(ctx, name.data(), name.size());
    for (auto d : t.sizes()) EVP_DigestUpdate(ctx, &d, sizeof(d));
    EVP_DigestUpdate(ctx, t.data_ptr(), t.numel() * t.element_size());
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  EVP_DigestFinal_ex(ctx, digest, &length);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < length; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xF]);
  }
  return hex;
}

void set_requires_grad(torch::nn::Module& module, bool requires_grad) {
  for (auto& p : module.parameters(/*recurse=*/true)) p.set_requires_grad(requires_grad);
}

}  // namespace fcboost::nn
