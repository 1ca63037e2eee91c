#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "json.hpp"

#include "fcboost/booster.hpp"
#include "fcboost/common.hpp"
#include "fcboost/data.hpp"
#include "fcboost/image.hpp"
#include "fcboost/outfits.hpp"

namespace fcboost {

// ---------------------------------------------------------------------------
// Perceptual distance over the booster conv stack

/// Concatenation over layers of channel-normalized activations, scaled so
/// that the squared Euclidean distance of two embeddings equals the mean over
/// layers of the spatially averaged squared difference. [B, 3, R, R] -> [B, F].
torch::Tensor perceptual_embedding(BoosterModel& booster, const torch::Tensor& images);
torch::Tensor perceptual_embedding_from_layers(const std::vector<torch::Tensor>& layers);
/// Shape [B]; symmetric, zero for identical inputs.
torch::Tensor perceptual_distance(BoosterModel& booster, const torch::Tensor& a, const torch::Tensor& b);

// ---------------------------------------------------------------------------
// Feature statistics and FID

struct FeatureStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;  // unbiased, symmetrized
  std::int64_t count = 0;

  nlohmann::json to_json() const;
};

/// Streaming mean/covariance accumulator (pairwise merge formula), so that
/// feeding a set in chunks gives the same statistics as feeding it at once.
class FeatureAccumulator {
 public:
  explicit FeatureAccumulator(int dim);

  /// Rows of `features` ([B, dim]) are samples.
  void add(const Eigen::MatrixXd& features);
  void add(const torch::Tensor& features);
  void merge(const FeatureAccumulator& other);

  std::int64_t count() const { return count_; }
  /// Throws ErrorCode::numeric with fewer than two samples.
  FeatureStats stats() const;

 private:
  int dim_;
  std::int64_t count_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
};

FeatureStats feature_stats(const Eigen::MatrixXd& features);

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The trace of the
/// root is computed from the symmetric matrix sqrt(S_a) S_b sqrt(S_a), which
/// has the same spectrum as S_a S_b. Eigenvalues below -1e-6 (relative to the
/// largest one when that exceeds 1) raise ErrorCode::numeric; smaller
/// negatives are clipped to zero.
double fid(const FeatureStats& a, const FeatureStats& b);

/// Image classifier used as the FID feature extractor; `features` returns
/// the 64-d penultimate activations.
struct ClassifierConfig {
  int resolution = 64;
  int channel_base = 256;
  int channel_max = 64;
  int feature_dim = 64;
  int iterations = 400;
  int batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ClassifierConfig from_json(const nlohmann::json& j);
};

class ItemClassifierImpl : public torch::nn::Module {
 public:
  ItemClassifierImpl(const ClassifierConfig& config, Rng& rng);

  torch::Tensor features(const torch::Tensor& images);
  torch::Tensor logits(const torch::Tensor& images);
  const ClassifierConfig& config() const { return config_; }

 private:
  ClassifierConfig config_;
  torch::nn::ModuleList convs_;
  nn::EqualLinear fc_{nullptr};
  nn::EqualLinear out_{nullptr};
};
TORCH_MODULE(ItemClassifier);

/// Trains the classifier to predict the category of single items.
ItemClassifier train_classifier(const OutfitTensors& train, const ClassifierConfig& config);
double classifier_accuracy(ItemClassifier& classifier, const OutfitTensors& outfits);
void save_classifier(ItemClassifier& classifier, const std::filesystem::path& path);
ItemClassifier load_classifier(const std::filesystem::path& path);

/// Features of [N, 3, R, R] images in chunks, without gradient.
FeatureStats image_stats(ItemClassifier& classifier, const torch::Tensor& images, std::int64_t chunk = 256);

// ---------------------------------------------------------------------------
// Compatibility scoring and F2BT

/// estimate_spec on each of the 4 items, then the hue-window oracle. Blank
/// items raise ErrorCode::blank_image naming the item index.
OracleResult oracle_outfit_score(const std::array<ItemImage, kNumCategories>& items,
                                 const CompatibilityRule& rule = {});
/// [4, 3, R, R] tensor variant.
OracleResult oracle_outfit_score(const torch::Tensor& outfit, const CompatibilityRule& rule = {});

/// Same as `oracle_outfit_score` but a blank item scores the outfit 0
/// instead of throwing; `blank` is set when that happened.
double oracle_outfit_score_or_zero(const torch::Tensor& outfit, const CompatibilityRule& rule,
                                   bool* blank = nullptr);

struct MethodRun {
  std::string name;
  std::vector<std::string> case_ids;
  std::vector<torch::Tensor> outfits;  // per case, [4, 3, R, R]
};

/// scores[case][method] -> win percentage per method; the best method of each
/// case gets one win, split evenly on ties.
std::vector<double> f2bt_from_scores(const std::vector<std::vector<double>>& scores);
using OutfitScorer = std::function<double(const torch::Tensor&)>;
std::vector<double> f2bt(const std::vector<MethodRun>& runs, const OutfitScorer& scorer);

}  // namespace fcboost
