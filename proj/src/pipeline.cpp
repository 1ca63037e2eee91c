#include "fcboost/pipeline.hpp"

#include <cstdlib>
#include <fstream>

#include "fcboost/checkpoint.hpp"
#include "fcboost/data.hpp"

namespace fcboost {
namespace {

nlohmann::json dataset_json(const DatasetConfig& d) {
  return {{"train_count", d.train_count},
          {"test_count", d.test_count},
          {"resolution", d.resolution},
          {"seed", d.seed},
          {"rule", {{"hue_window", d.rule.hue_window}, {"max_lightness_spread", d.rule.max_lightness_spread}}}};
}

DatasetConfig dataset_from_json(const nlohmann::json& j) {
  DatasetConfig d;
  d.train_count = j.value("train_count", d.train_count);
  d.test_count = j.value("test_count", d.test_count);
  d.resolution = j.value("resolution", d.resolution);
  d.seed = j.value("seed", d.seed);
  if (j.contains("rule")) {
    d.rule.hue_window = j.at("rule").value("hue_window", d.rule.hue_window);
    d.rule.max_lightness_spread = j.at("rule").value("max_lightness_spread", d.rule.max_lightness_spread);
  }
  return d;
}

bool sidecar_matches(const std::filesystem::path& path, const std::string& hash) {
  if (!std::filesystem::exists(path)) return false;
  try {
    return read_json_file(path).value("config_hash", std::string()) == hash;
  } catch (const Error&) {
    return false;
  }
}

void say(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

DatasetManifest require_dataset(const Layout& layout) {
  if (!std::filesystem::exists(layout.data() / "manifest.json")) {
    fail(ErrorCode::missing_artifact,
         "dataset manifest not found in '" + layout.data().string() + "'; run `fcboost dataset` first");
  }
  return load_manifest(layout.data());
}

}  // namespace

PipelineConfig PipelineConfig::defaults() {
  PipelineConfig c;
  c.set_resolution(64);
  return c;
}

void PipelineConfig::set_resolution(int resolution) {
  dataset.resolution = resolution;
  generator.resolution = resolution;
  booster.resolution = resolution;
  classifier.resolution = resolution;
  train.resolution = resolution;
  train.encoder.resolution = resolution;
}

void PipelineConfig::set_seed(std::uint64_t seed) {
  dataset.seed = seed;
  gan.seed = seed;
  booster_train.seed = seed;
  classifier.seed = seed;
  train.seed = seed;
  eval.seed = seed;
}

nlohmann::json PipelineConfig::to_json() const {
  return {{"dataset", dataset_json(dataset)},
          {"generator", generator.to_json()},
          {"gan", gan.to_json()},
          {"booster", booster.to_json()},
          {"booster_train", booster_train.to_json()},
          {"classifier", classifier.to_json()},
          {"train", train.to_json()},
          {"eval", eval.to_json()}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::config, "pipeline config must be a JSON object");
  static const std::vector<std::string> sections = {"resolution", "seed",          "dataset",    "generator", "gan",
                                                    "booster",    "booster_train", "classifier", "train",     "eval"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(sections.begin(), sections.end(), key) == sections.end()) {
      fail(ErrorCode::config, "unknown config section '" + key + "'");
    }
  }
  PipelineConfig c = defaults();
  try {
    if (j.contains("resolution")) c.set_resolution(j.at("resolution").get<int>());
    if (j.contains("seed")) c.set_seed(j.at("seed").get<std::uint64_t>());
    nlohmann::json merged = c.to_json();
    nlohmann::json patch = j;
    patch.erase("resolution");
    patch.erase("seed");
    merged.merge_patch(patch);
    c.dataset = dataset_from_json(merged.at("dataset"));
    c.generator = GeneratorConfig::from_json(merged.at("generator"));
    c.gan = GanTrainConfig::from_json(merged.at("gan"));
    c.booster = BoosterConfig::from_json(merged.at("booster"));
    c.booster_train = BoosterTrainConfig::from_json(merged.at("booster_train"));
    c.classifier = ClassifierConfig::from_json(merged.at("classifier"));
    c.train = TrainConfig::from_json(merged.at("train"));
    c.eval = EvalConfig::from_json(merged.at("eval"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::config, std::string("malformed pipeline config: ") + e.what());
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::config, "config file '" + path.string() + "' not found");
  return from_json(read_json_file(path));
}

void PipelineConfig::validate() const {
  const int r = dataset.resolution;
  if (!is_supported_resolution(r)) fail(ErrorCode::config, "resolution must be 32 or 64");
  if (generator.resolution != r || booster.resolution != r || classifier.resolution != r || train.resolution != r) {
    fail(ErrorCode::config, "every stage must use the dataset resolution");
  }
  dataset.rule.validate();
  generator.validate();
  booster.validate();
  train.validate();
}

std::filesystem::path default_home() {
  if (const char* env = std::getenv("FCBOOST_HOME"); env && *env) return env;
  return std::filesystem::current_path() / "fcboost_home";
}

std::string dataset_hash(const PipelineConfig& config) { return sha256_hex(dataset_json(config.dataset).dump()); }

std::string gan_hash(const PipelineConfig& config) {
  return sha256_hex(dataset_hash(config) + config.generator.to_json().dump() + config.gan.to_json().dump());
}

std::string booster_hash(const PipelineConfig& config) {
  return sha256_hex(dataset_hash(config) + config.booster.to_json().dump() + config.booster_train.to_json().dump());
}

bool stage_dataset(const PipelineConfig& config, const Layout& layout, bool force, const LogFn& log) {
  const auto hash = dataset_hash(config);
  const auto sidecar = layout.data() / "dataset.json";
  if (!force && sidecar_matches(sidecar, hash) && std::filesystem::exists(layout.data() / "manifest.json")) {
    say(log, "dataset up to date in " + layout.data().string());
    return false;
  }
  std::error_code ec;
  std::filesystem::remove_all(layout.data() / "images", ec);
  DatasetConfig d = config.dataset;
  d.root = layout.data().string();
  const auto manifest = build_dataset(d);
  write_json_file({{"config_hash", hash}, {"config", dataset_json(config.dataset)}}, sidecar);
  say(log, "dataset: " + std::to_string(manifest.count(Split::train)) + " train / " +
               std::to_string(manifest.count(Split::test)) + " test outfits in " + layout.data().string());
  return true;
}

bool stage_pretrain_gan(const PipelineConfig& config, const Layout& layout, Category category, bool force,
                        const LogFn& log) {
  const auto hash = gan_hash(config);
  const auto name = std::string(category_name(category));
  const auto sidecar = layout.checkpoints() / ("gan_" + name + ".json");
  if (!force && sidecar_matches(sidecar, hash) &&
      std::filesystem::exists(generator_file(layout.checkpoints(), category, "mapping")) &&
      std::filesystem::exists(generator_file(layout.checkpoints(), category, "synthesis"))) {
    say(log, "generator '" + name + "' up to date");
    return false;
  }
  const auto manifest = require_dataset(layout);
  const auto train = load_split(manifest, Split::train);
  GanLogEntry last;
  auto gen = pretrain_category_gan(train.category(category), category, config.generator, config.gan,
                                   [&](const GanLogEntry& e) {
                                     last = e;
                                     say(log, "gan " + name + " it " + std::to_string(e.iteration) +
                                                  " d " + std::to_string(e.d_loss) + " g " +
                                                  std::to_string(e.g_loss) + " r1 " + std::to_string(e.r1));
                                   });
  save_generator(gen, layout.checkpoints(),
                 {{"config_hash", hash},
                  {"train", config.gan.to_json()},
                  {"final", {{"iteration", last.iteration}, {"d_loss", last.d_loss}, {"g_loss", last.g_loss}}}});
  return true;
}

bool stage_pretrain_booster(const PipelineConfig& config, const Layout& layout, bool force, const LogFn& log) {
  const auto hash = booster_hash(config);
  const auto sidecar = layout.checkpoints() / "booster.json";
  if (!force && sidecar_matches(sidecar, hash) && std::filesystem::exists(booster_file(layout.checkpoints()))) {
    say(log, "booster up to date");
    return false;
  }
  const auto manifest = require_dataset(layout);
  const auto train = load_split(manifest, Split::train);
  const auto test = load_split(manifest, Split::test);
  auto booster = pretrain_booster(train, config.booster, config.booster_train, [&](const BoosterLogEntry& e) {
    say(log, "booster it " + std::to_string(e.iteration) + " loss " + std::to_string(e.loss));
  });
  const auto eval = evaluate_pairs(booster, test, mix_seed(config.booster_train.seed, 0xa0c));
  say(log, "booster held-out AUC " + std::to_string(eval.auc) + " (positive mean " +
               std::to_string(eval.positive_mean) + ", negative mean " + std::to_string(eval.negative_mean) + ")");
  save_booster(booster, layout.checkpoints(),
               {{"config_hash", hash},
                {"train", config.booster_train.to_json()},
                {"heldout", {{"auc", eval.auc},
                             {"positive_mean", eval.positive_mean},
                             {"negative_mean", eval.negative_mean},
                             {"pairs", eval.pairs}}}});
  return true;
}

bool stage_classifier(const PipelineConfig& config, const Layout& layout, bool force, const LogFn& log) {
  const auto hash = sha256_hex(dataset_hash(config) + config.classifier.to_json().dump());
  const auto path = layout.checkpoints() / "classifier.fcbk";
  const auto sidecar = layout.checkpoints() / "classifier.json";
  if (!force && sidecar_matches(sidecar, hash) && std::filesystem::exists(path)) return false;
  const auto manifest = require_dataset(layout);
  auto classifier = train_classifier(load_split(manifest, Split::train), config.classifier);
  const double accuracy = classifier_accuracy(classifier, load_split(manifest, Split::test));
  save_classifier(classifier, path);
  write_json_file({{"config_hash", hash}, {"heldout_accuracy", accuracy}}, sidecar);
  say(log, "FID feature classifier held-out accuracy " + std::to_string(accuracy));
  return true;
}

void stage_train(const PipelineConfig& config, const Layout& layout, const std::string& run_name, const LogFn& log) {
  if (run_name.empty() || run_name.find('/') != std::string::npos) {
    fail(ErrorCode::config, "run name must be a non-empty single path component");
  }
  TrainPaths paths{layout.data(), layout.checkpoints(), layout.run(run_name)};
  train(config.train, paths, [&](const StepMetrics& m) { say(log, m.to_json().dump()); });
}

FCBoostModel load_trained_model(const Layout& layout, const std::string& run_name) {
  auto model = load_frozen_model(layout.checkpoints());
  load_encoders(model, layout.run(run_name));
  return model;
}

nlohmann::json stage_eval(const PipelineConfig& config, const Layout& layout, const std::vector<std::string>& runs,
                          const std::optional<std::filesystem::path>& out, const LogFn& log) {
  if (runs.empty()) fail(ErrorCode::config, "eval needs at least one run");
  const auto manifest = require_dataset(layout);
  const auto test = load_split(manifest, Split::test);
  const auto frozen = load_frozen_model(layout.checkpoints());
  for (const auto& run : runs) {
    FCBoostModel probe = frozen;
    load_encoders(probe, layout.run(run));  // fail before any expensive work
  }
  stage_classifier(config, layout, false, log);
  auto classifier = load_classifier(layout.checkpoints() / "classifier.fcbk");
  const auto cases = make_eval_cases(test.size(), config.eval.cases, config.eval.K, config.eval.seed);
  const int rounds = config.train.T;

  nlohmann::json report = {{"cases", cases.size()},
                           {"rounds", rounds},
                           {"eval", config.eval.to_json()},
                           {"FID", nlohmann::json::object()},
                           {"LPIPS", nlohmann::json::object()},
                           {"oracle_by_round", nlohmann::json::object()},
                           {"blank_outfits", nlohmann::json::object()}};
  std::vector<std::vector<double>> finals;
  for (const auto& run : runs) {
    FCBoostModel model = frozen;
    load_encoders(model, layout.run(run));
    const auto evaluation = evaluate_model(model, test, cases, rounds, &classifier, manifest.rule);
    const auto diversity = diversity_eval(model, test, config.eval, rounds);
    const auto j = evaluation.to_json();
    report["FID"][run] = j.at("FID");
    report["LPIPS"][run] = to_json(diversity);
    report["oracle_by_round"][run] = j.at("oracle_by_round");
    report["blank_outfits"][run] = evaluation.blank_outfits;
    finals.push_back(evaluation.final_scores);
    say(log, "evaluated run '" + run + "'");
  }
  nlohmann::json f2bt_json = nlohmann::json::object();
  for (const auto& [method, table] : f2bt_eval(runs, finals, cases)) f2bt_json[method] = to_json(table);
  report["F2BT"] = f2bt_json;
  write_json_file(report, out ? *out : layout.eval() / "report.json");
  return report;
}

}  // namespace fcboost
