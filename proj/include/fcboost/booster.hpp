#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <utility>

#include <torch/torch.h>

#include "json.hpp"

#include "fcboost/common.hpp"
#include "fcboost/data.hpp"
#include "fcboost/nn.hpp"

// Type-aware compatibility model: a conv feature extractor shared by all
// categories and one projection per unordered category pair. The distance
// between two items is the Euclidean distance of their L2-normalized
// projections; smaller means more compatible.

namespace fcboost {

inline constexpr int kNumPairTypes = kNumCategories * (kNumCategories - 1) / 2;

/// Unordered category pair -> projection index:
/// {upper,bag}=0 {upper,lower}=1 {upper,shoes}=2 {bag,lower}=3 {bag,shoes}=4 {lower,shoes}=5.
int pair_index(Category a, Category b);
std::pair<Category, Category> pair_categories(int index);

struct BoosterConfig {
  int resolution = 64;
  int channel_base = 512;
  int channel_max = 64;
  int feature_dim = 128;
  int embed_dim = 32;

  void validate() const;
  nlohmann::json to_json() const;
  static BoosterConfig from_json(const nlohmann::json& j);
};

class BoosterModelImpl : public torch::nn::Module {
 public:
  BoosterModelImpl(const BoosterConfig& config, Rng& rng);

  /// Activations after every conv layer, finest first.
  std::vector<torch::Tensor> feature_layers(const torch::Tensor& images);
  /// [B, 3, R, R] -> [B, feature_dim].
  torch::Tensor features(const torch::Tensor& images);
  /// Feature vector from the last entry of `feature_layers`.
  torch::Tensor head(const torch::Tensor& last_layer);
  /// Unit-norm type-aware embedding [B, embed_dim] under one pair type.
  torch::Tensor embed(const torch::Tensor& features, int pair);

  /// Overwrites one projection matrix ([embed_dim, feature_dim]).
  void set_projection(int pair, const torch::Tensor& matrix);

  void freeze();
  bool frozen() const { return frozen_; }
  const BoosterConfig& config() const { return config_; }

  torch::Tensor projections;  // [6, embed_dim, feature_dim]

 private:
  BoosterConfig config_;
  torch::nn::ModuleList convs_;
  nn::EqualLinear fc_{nullptr};
  bool frozen_ = false;
};
TORCH_MODULE(BoosterModel);

torch::Tensor extract_features(BoosterModel& booster, const torch::Tensor& images);

/// Distance per batch element, shape [B]. Throws ErrorCode::domain when
/// both categories are equal.
torch::Tensor pair_distance(BoosterModel& booster, const torch::Tensor& img_a, Category cat_a,
                            const torch::Tensor& img_b, Category cat_b);
torch::Tensor pair_distance_from_features(BoosterModel& booster, const torch::Tensor& feat_a,
                                          Category cat_a, const torch::Tensor& feat_b, Category cat_b);

/// Single hinge term max(0, current - cross + alpha).
torch::Tensor fcb_hinge(const torch::Tensor& current, const torch::Tensor& cross, double alpha);

/// Boosting objective over completed outfits of two consecutive rounds.
/// Both are [M, 4, 3, R, R]; the previous round is treated as a constant.
/// Mean over samples and ordered slot pairs i != j of
///   max(0, B(cur_i, cur_j) - B(cur_i, prev_j) + alpha).
torch::Tensor fcb_loss(BoosterModel& booster, const torch::Tensor& outfits_t,
                       const torch::Tensor& outfits_prev, double alpha);
/// Same objective on precomputed features [M, 4, feature_dim].
torch::Tensor fcb_loss_from_features(BoosterModel& booster, const torch::Tensor& features_t,
                                     const torch::Tensor& features_prev, double alpha);

struct BoosterTrainConfig {
  int iterations = 3000;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double margin = 0.2;
  int log_interval = 100;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static BoosterTrainConfig from_json(const nlohmann::json& j);
};

struct BoosterLogEntry {
  int iteration = 0;
  double loss = 0.0;
};

struct PairEvaluation {
  double positive_mean = 0.0;
  double negative_mean = 0.0;
  double auc = 0.0;  // of -B separating compatible from swapped pairs
  std::size_t pairs = 0;
};

/// Positive pairs come from dataset outfits, negatives replace one item of
/// the pair by the same-category item of another random outfit; the loss is
/// max(0, B(pos) - B(neg) + margin).
BoosterModel pretrain_booster(const OutfitTensors& train, const BoosterConfig& config,
                              const BoosterTrainConfig& train_config,
                              const std::function<void(const BoosterLogEntry&)>& on_log = {});

PairEvaluation evaluate_pairs(BoosterModel& booster, const OutfitTensors& outfits, std::uint64_t seed);

/// Area under the ROC curve of `positive` vs `negative` scores, ties
/// counted as one half.
double roc_auc(const std::vector<double>& positive, const std::vector<double>& negative);

void save_booster(BoosterModel& booster, const std::filesystem::path& dir,
                  const nlohmann::json& sidecar = nlohmann::json::object());
BoosterModel load_booster(const std::filesystem::path& dir);
std::filesystem::path booster_file(const std::filesystem::path& dir);

}  // namespace fcboost
