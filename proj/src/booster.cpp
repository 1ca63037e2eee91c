#include "fcboost/booster.hpp"

#include <algorithm>
#include <cmath>

#include "fcboost/checkpoint.hpp"

namespace fcboost {
namespace {

namespace F = torch::nn::functional;

constexpr std::array<std::pair<int, int>, kNumPairTypes> kPairs = {
    {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

torch::Tensor random_indices(Rng& rng, std::int64_t count, std::int64_t n) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
  for (auto& i : idx) i = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(n)));
  return torch::tensor(idx);
}

// Distance between rows of two [B, D] embeddings.
torch::Tensor row_distance(const torch::Tensor& a, const torch::Tensor& b) {
  return torch::norm(a - b, 2, {1});
}

}  // namespace

int pair_index(Category a, Category b) {
  int i = slot(a), j = slot(b);
  if (i == j) {
    fail(ErrorCode::domain, "compatibility distance needs two different categories, got " +
                                std::string(category_name(a)) + " twice");
  }
  if (i > j) std::swap(i, j);
  for (int p = 0; p < kNumPairTypes; ++p) {
    if (kPairs[p].first == i && kPairs[p].second == j) return p;
  }
  fail(ErrorCode::contract, "unreachable pair index");
}

std::pair<Category, Category> pair_categories(int index) {
  if (index < 0 || index >= kNumPairTypes) fail(ErrorCode::contract, "pair index out of range");
  return {category_at(kPairs[index].first), category_at(kPairs[index].second)};
}

void BoosterConfig::validate() const {
  if (resolution < 8) fail(ErrorCode::config, "booster resolution must be at least 8");
  nn::log2_exact(resolution);
  if (channel_base <= 0 || channel_max <= 0 || feature_dim <= 0 || embed_dim <= 0) {
    fail(ErrorCode::config, "booster widths must be positive");
  }
}

nlohmann::json BoosterConfig::to_json() const {
  return {{"resolution", resolution},
          {"channel_base", channel_base},
          {"channel_max", channel_max},
          {"feature_dim", feature_dim},
          {"embed_dim", embed_dim}};
}

BoosterConfig BoosterConfig::from_json(const nlohmann::json& j) {
  BoosterConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.channel_base = j.value("channel_base", c.channel_base);
  c.channel_max = j.value("channel_max", c.channel_max);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  return c;
}

BoosterModelImpl::BoosterModelImpl(const BoosterConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const auto ch = [&](int r) { return nn::channels_at(r, config_.channel_base, config_.channel_max); };
  convs_ = register_module("convs", torch::nn::ModuleList());
  convs_->push_back(nn::EqualConv2d(3, ch(config_.resolution), 3, rng));
  for (int r = config_.resolution; r > 4; r /= 2) {
    convs_->push_back(nn::EqualConv2d(ch(r), ch(r / 2), 3, rng, /*stride=*/2));
  }
  fc_ = register_module("fc", nn::EqualLinear(ch(4) * 16, config_.feature_dim, rng));
  projections = register_parameter(
      "projections",
      nn::normal_tensor(rng, {kNumPairTypes, config_.embed_dim, config_.feature_dim},
                        1.0 / std::sqrt(static_cast<double>(config_.feature_dim))));
}

std::vector<torch::Tensor> BoosterModelImpl::feature_layers(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config_.resolution ||
      images.size(3) != config_.resolution) {
    fail(ErrorCode::config, "booster input must be [B, 3, " + std::to_string(config_.resolution) + ", " +
                                std::to_string(config_.resolution) + "]");
  }
  std::vector<torch::Tensor> out;
  auto x = images;
  for (const auto& conv : *convs_) {
    x = conv->as<nn::EqualConv2dImpl>()->forward(x);
    out.push_back(x);
  }
  return out;
}

torch::Tensor BoosterModelImpl::features(const torch::Tensor& images) {
  return head(feature_layers(images).back());
}

torch::Tensor BoosterModelImpl::head(const torch::Tensor& last_layer) { return fc_->forward(last_layer.flatten(1)); }

torch::Tensor BoosterModelImpl::embed(const torch::Tensor& features, int pair) {
  if (pair < 0 || pair >= kNumPairTypes) fail(ErrorCode::contract, "pair index out of range");
  return F::normalize(torch::matmul(features, projections[pair].t()),
                      F::NormalizeFuncOptions().dim(1).eps(1e-12));
}

void BoosterModelImpl::set_projection(int pair, const torch::Tensor& matrix) {
  if (pair < 0 || pair >= kNumPairTypes) fail(ErrorCode::contract, "pair index out of range");
  if (matrix.sizes() != projections[pair].sizes()) {
    fail(ErrorCode::contract, "projection matrix must be [embed_dim, feature_dim]");
  }
  torch::NoGradGuard no_grad;
  projections[pair].copy_(matrix);
}

void BoosterModelImpl::freeze() {
  nn::set_requires_grad(*this, false);
  eval();
  frozen_ = true;
}

torch::Tensor extract_features(BoosterModel& booster, const torch::Tensor& images) {
  return booster->features(images);
}

torch::Tensor pair_distance_from_features(BoosterModel& booster, const torch::Tensor& feat_a,
                                          Category cat_a, const torch::Tensor& feat_b, Category cat_b) {
  const int p = pair_index(cat_a, cat_b);
  return row_distance(booster->embed(feat_a, p), booster->embed(feat_b, p));
}

torch::Tensor pair_distance(BoosterModel& booster, const torch::Tensor& img_a, Category cat_a,
                            const torch::Tensor& img_b, Category cat_b) {
  pair_index(cat_a, cat_b);
  return pair_distance_from_features(booster, booster->features(img_a), cat_a, booster->features(img_b),
                                     cat_b);
}

torch::Tensor fcb_hinge(const torch::Tensor& current, const torch::Tensor& cross, double alpha) {
  return torch::relu(current - cross + alpha);
}

torch::Tensor fcb_loss_from_features(BoosterModel& booster, const torch::Tensor& features_t,
                                     const torch::Tensor& features_prev, double alpha) {
  if (features_t.sizes() != features_prev.sizes() || features_t.dim() != 3 ||
      features_t.size(1) != kNumCategories) {
    fail(ErrorCode::contract, "boosting rounds must hold the same number of complete outfits");
  }
  const auto prev = features_prev.detach();
  std::vector<torch::Tensor> terms;
  for (int p = 0; p < kNumPairTypes; ++p) {
    const auto [a, b] = kPairs[p];
    for (const auto& [i, j] : {std::pair{a, b}, std::pair{b, a}}) {
      const auto ei = booster->embed(features_t.select(1, i), p);
      const auto ej = booster->embed(features_t.select(1, j), p);
      const auto ej_prev = booster->embed(prev.select(1, j), p);
      terms.push_back(fcb_hinge(row_distance(ei, ej), row_distance(ei, ej_prev), alpha));
    }
  }
  return torch::stack(terms).mean();
}

torch::Tensor fcb_loss(BoosterModel& booster, const torch::Tensor& outfits_t, const torch::Tensor& outfits_prev,
                       double alpha) {
  if (outfits_t.sizes() != outfits_prev.sizes() || outfits_t.dim() != 5 ||
      outfits_t.size(1) != kNumCategories) {
    fail(ErrorCode::contract, "boosting rounds must hold the same number of complete outfits");
  }
  const auto m = outfits_t.size(0);
  const auto flat = [&](const torch::Tensor& o) {
    return booster->features(o.flatten(0, 1)).view({m, kNumCategories, -1});
  };
  return fcb_loss_from_features(booster, flat(outfits_t), flat(outfits_prev.detach()), alpha);
}

nlohmann::json BoosterTrainConfig::to_json() const {
  return {{"iterations", iterations}, {"batch_size", batch_size}, {"learning_rate", learning_rate},
          {"margin", margin},         {"log_interval", log_interval}, {"seed", seed}};
}

BoosterTrainConfig BoosterTrainConfig::from_json(const nlohmann::json& j) {
  BoosterTrainConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.margin = j.value("margin", c.margin);
  c.log_interval = j.value("log_interval", c.log_interval);
  c.seed = j.value("seed", c.seed);
  return c;
}

BoosterModel pretrain_booster(const OutfitTensors& train, const BoosterConfig& config,
                              const BoosterTrainConfig& train_config,
                              const std::function<void(const BoosterLogEntry&)>& on_log) {
  nn::configure_runtime();
  if (train.size() < 2) fail(ErrorCode::config, "booster pre-training needs at least two outfits");
  if (train.resolution() != config.resolution) {
    fail(ErrorCode::config, "dataset resolution does not match the booster resolution");
  }
  Rng rng(mix_seed(train_config.seed, 0xb005));
  BoosterModel booster(config, rng);
  torch::optim::Adam opt(booster->parameters(), torch::optim::AdamOptions(train_config.learning_rate));
  const auto n = train.size();
  const auto batch = static_cast<std::int64_t>(train_config.batch_size);

  for (int it = 1; it <= train_config.iterations; ++it) {
    const auto outfits = train.images.index_select(0, random_indices(rng, batch, n));
    const auto others = train.images.index_select(0, random_indices(rng, batch, n));
    const auto feats = booster->features(outfits.flatten(0, 1)).view({batch, kNumCategories, -1});
    const auto swapped = booster->features(others.flatten(0, 1)).view({batch, kNumCategories, -1});
    std::vector<torch::Tensor> terms;
    for (int p = 0; p < kNumPairTypes; ++p) {
      const auto [a, b] = kPairs[p];
      const auto ea = booster->embed(feats.select(1, a), p);
      const auto eb = booster->embed(feats.select(1, b), p);
      const auto pos = row_distance(ea, eb);
      const auto neg_b = row_distance(ea, booster->embed(swapped.select(1, b), p));
      const auto neg_a = row_distance(booster->embed(swapped.select(1, a), p), eb);
      terms.push_back(torch::relu(pos - neg_b + train_config.margin));
      terms.push_back(torch::relu(pos - neg_a + train_config.margin));
    }
    const auto loss = torch::stack(terms).mean();
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      fail(ErrorCode::divergence, "non-finite booster loss at iteration " + std::to_string(it));
    }
    if (on_log && train_config.log_interval > 0 && it % train_config.log_interval == 0) {
      on_log({it, value});
    }
  }
  booster->eval();
  return booster;
}

double roc_auc(const std::vector<double>& positive, const std::vector<double>& negative) {
  if (positive.empty() || negative.empty()) fail(ErrorCode::contract, "AUC needs both classes");
  std::vector<std::pair<double, int>> all;
  all.reserve(positive.size() + negative.size());
  for (double v : positive) all.emplace_back(v, 1);
  for (double v : negative) all.emplace_back(v, 0);
  std::sort(all.begin(), all.end());
  // Mann-Whitney U with average ranks for ties.
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (all[k].second == 1) rank_sum += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(positive.size());
  const double nn = static_cast<double>(negative.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

PairEvaluation evaluate_pairs(BoosterModel& booster, const OutfitTensors& outfits, std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  const auto n = outfits.size();
  if (n < 2) fail(ErrorCode::config, "pair evaluation needs at least two outfits");
  Rng rng(seed);
  const auto others = outfits.images.index_select(0, random_indices(rng, n, n));
  const auto feats = booster->features(outfits.images.flatten(0, 1)).view({n, kNumCategories, -1});
  const auto swapped = booster->features(others.flatten(0, 1)).view({n, kNumCategories, -1});
  std::vector<double> pos_scores, neg_scores;
  PairEvaluation eval;
  for (int p = 0; p < kNumPairTypes; ++p) {
    const auto [a, b] = kPairs[p];
    const auto ea = booster->embed(feats.select(1, a), p);
    const auto pos = row_distance(ea, booster->embed(feats.select(1, b), p));
    const auto neg = row_distance(ea, booster->embed(swapped.select(1, b), p));
    for (std::int64_t k = 0; k < n; ++k) {
      pos_scores.push_back(-pos[k].item<double>());
      neg_scores.push_back(-neg[k].item<double>());
    }
  }
  for (double v : pos_scores) eval.positive_mean -= v;
  for (double v : neg_scores) eval.negative_mean -= v;
  eval.positive_mean /= static_cast<double>(pos_scores.size());
  eval.negative_mean /= static_cast<double>(neg_scores.size());
  eval.auc = roc_auc(pos_scores, neg_scores);
  eval.pairs = pos_scores.size();
  return eval;
}

std::filesystem::path booster_file(const std::filesystem::path& dir) { return dir / "booster.fcbk"; }

void save_booster(BoosterModel& booster, const std::filesystem::path& dir, const nlohmann::json& sidecar) {
  nlohmann::json pairs = nlohmann::json::array();
  for (int p = 0; p < kNumPairTypes; ++p) {
    const auto [a, b] = pair_categories(p);
    pairs.push_back({{"index", p}, {"categories", {category_name(a), category_name(b)}}});
  }
  nlohmann::json meta = {{"resolution", booster->config().resolution},
                         {"config", booster->config().to_json()},
                         {"pair_types", pairs}};
  save_checkpoint(module_checkpoint(*booster, "booster", meta), booster_file(dir));
  nlohmann::json side = sidecar;
  side["config"] = booster->config().to_json();
  side["pair_types"] = pairs;
  side["state_hash"] = nn::state_hash(*booster);
  write_json_file(side, dir / "booster.json");
}

BoosterModel load_booster(const std::filesystem::path& dir) {
  const auto path = booster_file(dir);
  if (!std::filesystem::exists(path)) {
    fail(ErrorCode::missing_artifact,
         "booster checkpoint '" + path.string() + "' not found; run `fcboost pretrain-booster` first");
  }
  const auto ckpt = load_checkpoint(path);
  if (ckpt.kind != "booster") fail(ErrorCode::incompatible_checkpoint, "'" + path.string() + "' is not a booster");
  Rng rng(0);
  BoosterModel booster(BoosterConfig::from_json(ckpt.metadata.at("config")), rng);
  load_module_state(*booster, ckpt);
  booster->eval();
  return booster;
}

}  // namespace fcboost
