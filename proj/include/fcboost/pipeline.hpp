#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "fcboost/booster.hpp"
#include "fcboost/boost_train.hpp"
#include "fcboost/evaluate.hpp"
#include "fcboost/generator.hpp"
#include "fcboost/metrics.hpp"
#include "fcboost/outfits.hpp"

// Stage orchestration shared by the CLI, the service and the tests.
//
// Artifact layout below the home directory:
//   data/                 manifest.json, images/, dataset.json
//   checkpoints/          gan_<cat>_{mapping,synthesis}.fcbk, gan_<cat>.json,
//                         booster.fcbk, booster.json, classifier.fcbk
//   train/<run>/          state_<iteration>.fcbk, metrics.jsonl, config.json,
//                         encoder_<cat>.fcbk
//   eval/                 report.json

namespace fcboost {

struct PipelineConfig {
  DatasetConfig dataset;
  GeneratorConfig generator;
  GanTrainConfig gan;
  BoosterConfig booster;
  BoosterTrainConfig booster_train;
  ClassifierConfig classifier;
  TrainConfig train;
  EvalConfig eval;

  /// Desk defaults at 64x64.
  static PipelineConfig defaults();
  /// Overrides on top of the defaults. Sections: "resolution", "seed",
  /// "dataset", "generator", "gan", "booster", "booster_train", "classifier",
  /// "train", "eval". A top-level resolution or seed applies to every stage.
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  void set_resolution(int resolution);
  void set_seed(std::uint64_t seed);
  void validate() const;
};

struct Layout {
  std::filesystem::path home;

  std::filesystem::path data() const { return home / "data"; }
  std::filesystem::path checkpoints() const { return home / "checkpoints"; }
  std::filesystem::path run(const std::string& name) const { return home / "train" / name; }
  std::filesystem::path eval() const { return home / "eval"; }
};

/// FCBOOST_HOME, or ./fcboost_home when unset.
std::filesystem::path default_home();

using LogFn = std::function<void(const std::string&)>;

/// Each stage skips its work when the artifacts on disk were produced by the
/// same configuration, unless `force` is set. They return true when work was done.
bool stage_dataset(const PipelineConfig& config, const Layout& layout, bool force = false, const LogFn& log = {});
bool stage_pretrain_gan(const PipelineConfig& config, const Layout& layout, Category category, bool force = false,
                        const LogFn& log = {});
bool stage_pretrain_booster(const PipelineConfig& config, const Layout& layout, bool force = false,
                            const LogFn& log = {});
bool stage_classifier(const PipelineConfig& config, const Layout& layout, bool force = false, const LogFn& log = {});
void stage_train(const PipelineConfig& config, const Layout& layout, const std::string& run_name,
                 const LogFn& log = {});

/// Evaluates the named runs on identical held-out cases and writes
/// eval/report.json (or `out` when given). Returns the report.
nlohmann::json stage_eval(const PipelineConfig& config, const Layout& layout, const std::vector<std::string>& runs,
                          const std::optional<std::filesystem::path>& out = {}, const LogFn& log = {});

/// Config hashes that decide whether a stage is up to date.
std::string dataset_hash(const PipelineConfig& config);
std::string gan_hash(const PipelineConfig& config);
std::string booster_hash(const PipelineConfig& config);

/// Frozen generators + booster and the encoders of a finished run.
FCBoostModel load_trained_model(const Layout& layout, const std::string& run_name);

}  // namespace fcboost
