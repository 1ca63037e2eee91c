#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "fcboost/booster.hpp"
#include "fcboost/common.hpp"
#include "fcboost/data.hpp"
#include "fcboost/generator.hpp"
#include "fcboost/latent_disc.hpp"
#include "fcboost/outfits.hpp"

namespace fcboost {

struct TrainConfig {
  int K = 2;                 // latent codes per given set
  int T = 2;                 // boosting rounds
  double alpha = 0.2;        // boosting hinge margin
  double lambda_div = 10.0;
  double lambda_fcb = 20.0;
  double learning_rate = 2e-4;
  double beta1 = 0.0;
  double beta2 = 0.99;
  int batch_size = 4;
  int iterations = 10000;
  int resolution = 64;
  std::uint64_t seed = 0;
  int log_interval = 100;
  int checkpoint_interval = 1000;
  int probe_interval = 500;
  int probe_size = 32;
  int pool_capacity = 200;
  double pool_probability = 0.5;
  EncoderConfig encoder;

  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected so typos surface as config errors.
  static TrainConfig from_json(const nlohmann::json& j);
  /// SHA-256 of the fields that change the trained model; iteration count
  /// and logging/checkpoint intervals are excluded so runs can be extended.
  std::string hash() const;
};

using SlotMask = std::array<bool, kNumCategories>;  // true = given

/// Uniformly random subset of `n_given` categories marked as given.
SlotMask mask_outfit(int n_given, Rng& rng);

/// Frozen pre-trained parts plus the trainable encoders.
struct FCBoostModel {
  std::vector<CategoryGenerator> generators;  // slot order
  std::vector<OutfitEncoder> encoders;        // slot order
  BoosterModel booster{nullptr};

  int resolution() const;
};

/// Loads and freezes the generators and booster from `checkpoint_dir`.
/// Missing files raise ErrorCode::missing_artifact naming the component.
FCBoostModel load_frozen_model(const std::filesystem::path& checkpoint_dir);
/// Fresh encoders whose `w_avg` is copied from the matching mapping network.
void init_encoders(FCBoostModel& model, const EncoderConfig& config, std::uint64_t seed);
void load_encoders(FCBoostModel& model, const std::filesystem::path& dir);
void save_encoders(FCBoostModel& model, const std::filesystem::path& dir, const nlohmann::json& metadata);
std::filesystem::path encoder_file(const std::filesystem::path& dir, Category c);

struct RoundOutputs {
  /// Per round t = 0..T: completed outfits [M, K, 4, 3, R, R].
  std::vector<torch::Tensor> outfits;
  /// Per round and category: codes of the synthesized items, [rows * K, 512]
  /// ordered row-major over (target sample, k); undefined when the category
  /// is given for every sample.
  std::vector<std::array<torch::Tensor, kNumCategories>> codes;
  /// Per category: int64 indices of the samples where it is a target.
  std::array<torch::Tensor, kNumCategories> target_rows;

  int rounds() const { return static_cast<int>(outfits.size()) - 1; }
  /// Synthesized items of category c at round t, [rows, K, 3, R, R].
  torch::Tensor items(int t, Category c) const;
};

/// Round 0 fills target slot i with g_i(f_i(z_k)); round t >= 1 fills it
/// with g_i(e_i(stack of round t-1)), where the round t-1 outfit enters the
/// encoder as a constant. Given slots are copied from `given` every round.
/// given: [M, 4, 3, R, R]; z: [M, K, 512].
RoundOutputs boost_forward(FCBoostModel& model, const torch::Tensor& given, const std::vector<SlotMask>& masks,
                           const torch::Tensor& z, int rounds);

using DistanceFn = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&)>;

/// -mean over categories and unordered code pairs of d(item_k1, item_k2).
/// items[c] is [rows, K, ...] or undefined/empty when category c has no
/// synthesized items; d maps two [rows, ...] batches to [rows].
torch::Tensor diversity_loss(const std::vector<torch::Tensor>& items, const DistanceFn& d);

struct RoundLosses {
  torch::Tensor adv;
  torch::Tensor div;
  torch::Tensor fcb;
};

/// Mean over rounds of adv + lambda_div * div + lambda_fcb * fcb.
torch::Tensor total_loss(const std::vector<RoundLosses>& rounds, const TrainConfig& config);

struct StepMetrics {
  int iteration = 0;
  double d_loss = 0.0;
  double adv = 0.0;
  double div = 0.0;
  double fcb = 0.0;
  double total = 0.0;
  std::vector<double> probe_scores;  // mean oracle score per round, when probed

  nlohmann::json to_json() const;
};

/// Owns everything that changes during training: encoders (inside the
/// model), latent discriminators, both optimizers, code pools and RNG
/// streams.
class Trainer {
 public:
  Trainer(TrainConfig config, FCBoostModel model, OutfitTensors train);

  StepMetrics step();

  int iteration() const { return iteration_; }
  const TrainConfig& config() const { return config_; }
  FCBoostModel& model() { return model_; }
  std::vector<LatentDiscriminator>& discriminators() { return discriminators_; }

  /// Directory receiving nan_dump.json when a loss turns non-finite.
  void set_dump_dir(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

  void save_state(const std::filesystem::path& path) const;
  /// Rejects checkpoints written under a different config hash or resolution.
  void load_state(const std::filesystem::path& path);

 private:
  void check_finite(const char* component, double value) const;

  TrainConfig config_;
  FCBoostModel model_;
  OutfitTensors train_;
  std::vector<LatentDiscriminator> discriminators_;
  std::unique_ptr<torch::optim::Adam> opt_g_;
  std::unique_ptr<torch::optim::Adam> opt_d_;
  std::vector<CodePool> real_pools_;
  std::vector<CodePool> fake_pools_;
  Rng data_rng_;
  Rng pool_rng_;
  int iteration_ = 0;
  std::filesystem::path dump_dir_;
};

/// Probe given-sets: the first `size` test outfits with seeded masks and codes.
struct ProbeSet {
  torch::Tensor given;
  std::vector<SlotMask> masks;
  torch::Tensor z;
};
ProbeSet make_probe_set(const OutfitTensors& outfits, int size, int K, std::uint64_t seed);
std::vector<double> probe_scores(FCBoostModel& model, const ProbeSet& probe, int rounds,
                                 const CompatibilityRule& rule = {});

struct TrainPaths {
  std::filesystem::path dataset;     // directory holding manifest.json
  std::filesystem::path checkpoints; // pre-trained generators and booster
  std::filesystem::path run;         // output directory of this run
};

/// Full training run: resumes from the newest state in `paths.run` when
/// present, writes metrics.jsonl, state_<iteration>.fcbk every
/// checkpoint_interval iterations and encoder_<category>.fcbk at the end.
void train(const TrainConfig& config, const TrainPaths& paths,
           const std::function<void(const StepMetrics&)>& on_log = {});

std::filesystem::path state_file(const std::filesystem::path& run_dir, int iteration);
std::optional<std::filesystem::path> latest_state(const std::filesystem::path& run_dir);

}  // namespace fcboost
