#include "fcboost/latent_disc.hpp"

namespace fcboost {

LatentDiscriminatorImpl::LatentDiscriminatorImpl(Category category, Rng& rng, bool zero_last_layer)
    : category_(category) {
  for (std::size_t i = 0; i + 1 < kWidths.size(); ++i) {
    const bool last = i + 2 == kWidths.size();
    layers_.push_back(register_module("fc" + std::to_string(i),
                                      nn::EqualLinear(kWidths[i], kWidths[i + 1], rng, 0.0, 1.0, !last)));
  }
  if (zero_last_layer) {
    torch::NoGradGuard no_grad;
    layers_.back()->weight.zero_();
    layers_.back()->bias.zero_();
  }
}

torch::Tensor LatentDiscriminatorImpl::forward(const torch::Tensor& w) {
  auto x = w;
  for (auto& layer : layers_) x = layer->forward(x);
  return x.squeeze(1);
}

torch::Tensor disc_score(LatentDiscriminator& d, const torch::Tensor& w) {
  if (w.dim() != 2 || w.size(1) != kLatentDim) {
    fail(ErrorCode::config, "latent discriminator input must have shape [B, 512]");
  }
  return torch::sigmoid(d->forward(w));
}

torch::Tensor disc_loss_from_probs(const torch::Tensor& p_real, const torch::Tensor& p_fake) {
  if (p_real.numel() == 0 || p_fake.numel() == 0) {
    fail(ErrorCode::contract, "discriminator loss needs non-empty real and fake batches");
  }
  const auto real = p_real.clamp(kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
  const auto fake = p_fake.clamp(kProbabilityEpsilon, 1.0 - kProbabilityEpsilon);
  return -(torch::log(real).mean() + torch::log(1.0 - fake).mean());
}

torch::Tensor adv_loss_from_probs(const torch::Tensor& p_fake) {
  if (p_fake.numel() == 0) fail(ErrorCode::contract, "adversarial loss needs a non-empty batch");
  return -torch::log(p_fake.clamp(kProbabilityEpsilon, 1.0 - kProbabilityEpsilon)).mean();
}

torch::Tensor disc_loss(LatentDiscriminator& d, const torch::Tensor& real_ws, const torch::Tensor& fake_ws) {
  return disc_loss_from_probs(disc_score(d, real_ws.detach()), disc_score(d, fake_ws.detach()));
}

torch::Tensor adv_loss(LatentDiscriminator& d, const torch::Tensor& fake_ws) {
  return adv_loss_from_probs(disc_score(d, fake_ws));
}

CodePool::CodePool(std::size_t capacity, double replace_probability)
    : capacity_(capacity), replace_probability_(replace_probability) {
  if (capacity_ == 0) fail(ErrorCode::config, "code pool capacity must be positive");
  if (!(replace_probability_ >= 0.0 && replace_probability_ <= 1.0)) {
    fail(ErrorCode::config, "pool replacement probability must lie in [0, 1]");
  }
}

torch::Tensor CodePool::query(const torch::Tensor& fresh, Rng& rng) {
  if (fresh.dim() != 2) fail(ErrorCode::contract, "pool codes must be a [B, D] tensor");
  const auto batch = fresh.detach();
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<std::size_t>(batch.size(0)));
  for (std::int64_t i = 0; i < batch.size(0); ++i) {
    auto code = batch[i].clone();
    if (codes_.size() < capacity_) {
      codes_.push_back(code);
      out.push_back(code);
    } else if (rng.uniform() < replace_probability_) {
      const auto j = static_cast<std::size_t>(rng.index(codes_.size()));
      out.push_back(codes_[j]);
      codes_[j] = code;
    } else {
      out.push_back(code);
    }
  }
  return torch::stack(out);
}

torch::Tensor CodePool::snapshot() const {
  if (codes_.empty()) return torch::zeros({0, 0});
  return torch::stack(codes_);
}

void CodePool::restore(const torch::Tensor& codes) {
  codes_.clear();
  if (codes.numel() == 0) return;
  if (codes.dim() != 2 || static_cast<std::size_t>(codes.size(0)) > capacity_) {
    fail(ErrorCode::incompatible_checkpoint, "stored pool does not fit the configured capacity");
  }
  for (std::int64_t i = 0; i < codes.size(0); ++i) codes_.push_back(codes[i].clone());
}

void save_latent_discriminator(LatentDiscriminator& d, const std::filesystem::path& path,
                               const nlohmann::json& metadata) {
  nlohmann::json meta = metadata;
  meta["category"] = category_name(d->category());
  save_checkpoint(module_checkpoint(*d, "latent_discriminator", meta), path);
}

LatentDiscriminator load_latent_discriminator(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  if (ckpt.kind != "latent_discriminator") {
    fail(ErrorCode::incompatible_checkpoint, "'" + path.string() + "' is not a latent discriminator");
  }
  Rng rng(0);
  LatentDiscriminator d(parse_category(ckpt.metadata.at("category").get<std::string>()), rng);
  load_module_state(*d, ckpt);
  return d;
}

}  // namespace fcboost
