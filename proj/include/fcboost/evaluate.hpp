#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

#include "fcboost/boost_train.hpp"
#include "fcboost/metrics.hpp"

// Held-out evaluation of trained models. Every method is evaluated on the
// same test cases: case i uses test outfit i mod N, n_given = 1 + i mod 3,
// and a mask and latent codes drawn from mix_seed(seed, i).

namespace fcboost {

struct EvalConfig {
  int cases = 1000;           // given-sets for F2BT, FID and round scores
  int K = 2;                  // completions per case for round scores
  int diversity_cases = 300;  // given-sets for the diversity estimate
  int diversity_K = 8;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static EvalConfig from_json(const nlohmann::json& j);
};

struct EvalCase {
  std::int64_t outfit = 0;  // row in the test tensors
  int n_given = 1;
  SlotMask mask{};
  torch::Tensor z;  // [K, 512]
};

std::vector<EvalCase> make_eval_cases(std::int64_t test_outfits, int count, int K, std::uint64_t seed);

/// Values per n_given setting plus their mean, keyed "1", "2", "3", "Avg.".
using SettingTable = std::map<std::string, double>;
nlohmann::json to_json(const SettingTable& table);
/// Builds a table from per-case values and the cases' settings.
SettingTable setting_means(const std::vector<double>& values, const std::vector<EvalCase>& cases);

/// Runs boost_forward over the cases in chunks without gradient and hands
/// each chunk's outputs to `visit` together with the index of its first case.
void for_each_completion(FCBoostModel& model, const OutfitTensors& test, const std::vector<EvalCase>& cases,
                         int rounds, std::int64_t chunk,
                         const std::function<void(std::size_t, const RoundOutputs&)>& visit);

/// Mean perceptual distance over code pairs and target categories at the
/// last round, averaged over the cases of each setting.
SettingTable diversity_eval(FCBoostModel& model, const OutfitTensors& test, const EvalConfig& config, int rounds);

struct ModelEvaluation {
  std::vector<double> round_mean;          // oracle score per round over cases and codes
  std::vector<SettingTable> round_table;   // same, per setting
  std::vector<double> final_scores;        // per case: k = 0 completion at the last round
  SettingTable fid;                        // empty without a classifier
  std::int64_t blank_outfits = 0;          // completions scored 0 because an item was blank

  nlohmann::json to_json() const;
};

ModelEvaluation evaluate_model(FCBoostModel& model, const OutfitTensors& test, const std::vector<EvalCase>& cases,
                               int rounds, ItemClassifier* classifier, const CompatibilityRule& rule = {});

/// F2BT win percentages per method, per setting and overall.
std::map<std::string, SettingTable> f2bt_eval(const std::vector<std::string>& methods,
                                              const std::vector<std::vector<double>>& scores_per_method,
                                              const std::vector<EvalCase>& cases);

}  // namespace fcboost
