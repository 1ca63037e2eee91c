// Command-line front end for every pipeline stage and the HTTP service.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "fcboost/image.hpp"
#include "fcboost/pipeline.hpp"
#include "fcboost/service.hpp"

namespace fs = std::filesystem;
using namespace fcboost;

namespace {

struct GlobalOptions {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> home;
  bool force = false;
  bool quiet = false;
};

PipelineConfig load_config(const GlobalOptions& g) {
  auto config = g.config ? PipelineConfig::load(*g.config) : PipelineConfig::defaults();
  if (g.seed) config.set_seed(*g.seed);
  config.validate();
  return config;
}

Layout layout_for(const GlobalOptions& g) { return Layout{g.home ? fs::path(*g.home) : default_home()}; }

LogFn logger(const GlobalOptions& g) {
  if (g.quiet) return {};
  return [](const std::string& line) { std::cout << line << std::endl; };
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::missing_artifact: return 2;
    case ErrorCode::config: return 3;
    case ErrorCode::incompatible_checkpoint: return 4;
    case ErrorCode::divergence: return 5;
    default: return 1;
  }
}

void report_error(const std::string& kind, const std::string& message, const nlohmann::json& extra = {}) {
  nlohmann::json j = {{"error", kind}, {"message", message}};
  if (extra.is_object()) j.update(extra);
  std::cerr << j.dump() << std::endl;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot read '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "cannot write '" + path.string() + "'");
}

/// Writes grid.png (one row per set), one PNG per item and result.json.
void write_generation(const nlohmann::json& result, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<ItemImage> tiles;
  for (const auto& set : result.at("sets")) {
    const int index = set.at("index").get<int>();
    for (const auto& item : set.at("items")) {
      const auto bytes = base64_decode(item.at("image").get<std::string>());
      write_bytes(dir / ("set" + std::to_string(index) + "_" + item.at("category").get<std::string>() + ".png"),
                  bytes);
      tiles.push_back(decode_png(bytes));
    }
  }
  write_png_grid(tiles, kNumCategories, (dir / "grid.png").string());
  nlohmann::json slim = result;
  for (auto& set : slim["sets"]) {
    for (auto& item : set["items"]) {
      item["file"] = "set" + std::to_string(set["index"].get<int>()) + "_" + item["category"].get<std::string>() + ".png";
      item.erase("image");
      item.erase("rounds");
    }
  }
  std::ofstream((dir / "result.json").string()) << slim.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"fcboost: diverse outfit completion pipeline"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "JSON config overriding the defaults");
  app.add_option("--seed", g.seed, "Seed applied to every stage");
  app.add_option("--out", g.out, "Output path (stage dependent)");
  app.add_option("--home", g.home, "Artifact root (default: $FCBOOST_HOME or ./fcboost_home)");
  app.add_flag("--force", g.force, "Redo stages whose artifacts are up to date");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress logs");

  auto* dataset = app.add_subcommand("dataset", "Render the synthetic outfit dataset");

  auto* gan = app.add_subcommand("pretrain-gan", "Pretrain the per-category generators");
  std::string gan_category = "all";
  gan->add_option("--category", gan_category, "upper, bag, lower, shoes or all");

  auto* booster = app.add_subcommand("pretrain-booster", "Pretrain the compatibility booster");
  auto* classifier = app.add_subcommand("classifier", "Train the item classifier used as the FID feature extractor");

  auto* train = app.add_subcommand("train", "Train the boosting encoders and latent discriminators");
  std::string run_name = "full";
  std::optional<double> lambda_div, lambda_fcb;
  std::optional<int> iterations;
  train->add_option("--run-name", run_name, "Run directory name under train/");
  train->add_option("--lambda-div", lambda_div, "Override the diversity loss weight");
  train->add_option("--lambda-fcb", lambda_fcb, "Override the compatibility loss weight");
  train->add_option("--iterations", iterations, "Override the iteration count");

  auto* eval = app.add_subcommand("eval", "Evaluate trained runs on held-out given-sets");
  std::vector<std::string> eval_runs{"full"};
  eval->add_option("--runs", eval_runs, "Run names; the first is the reference for comparisons");

  auto* generate = app.add_subcommand("generate", "Complete a partial outfit");
  std::vector<std::string> given_specs;
  int k = 1, rounds = 2;
  std::string gen_run = "full";
  generate->add_option("--given", given_specs, "category=path.png (repeatable)")->required();
  generate->add_option("--k", k, "Number of completions");
  generate->add_option("--rounds", rounds, "Boosting rounds");
  generate->add_option("--run", gen_run, "Trained run to use");

  auto* serve_cmd = app.add_subcommand("serve", "Serve the HTTP API");
  int port = 8080;
  std::string host = "127.0.0.1";
  serve_cmd->add_option("--port", port, "Port to listen on");
  serve_cmd->add_option("--host", host, "Interface to bind");
  serve_cmd->add_option("--run", gen_run, "Trained run to serve");

  CLI11_PARSE(app, argc, argv);

  try {
    const auto layout = layout_for(g);
    const auto log = logger(g);
    if (*dataset) {
      auto config = load_config(g);
      Layout target = layout;
      if (g.out) target.home = *g.out;
      stage_dataset(config, target, g.force, log);
    } else if (*gan) {
      auto config = load_config(g);
      if (gan_category == "all") {
        for (Category c : kAllCategories) stage_pretrain_gan(config, layout, c, g.force, log);
      } else {
        stage_pretrain_gan(config, layout, parse_category(gan_category), g.force, log);
      }
    } else if (*booster) {
      stage_pretrain_booster(load_config(g), layout, g.force, log);
    } else if (*classifier) {
      stage_classifier(load_config(g), layout, g.force, log);
    } else if (*train) {
      auto config = load_config(g);
      if (lambda_div) config.train.lambda_div = *lambda_div;
      if (lambda_fcb) config.train.lambda_fcb = *lambda_fcb;
      if (iterations) config.train.iterations = *iterations;
      config.validate();
      stage_train(config, layout, run_name, log);
    } else if (*eval) {
      std::optional<fs::path> out;
      if (g.out) out = *g.out;
      const auto report = stage_eval(load_config(g), layout, eval_runs, out, log);
      std::cout << report.dump(2) << std::endl;
    } else if (*generate) {
      GenerationService service(layout, gen_run);
      service.warm_up();
      nlohmann::json request = {{"k", k}, {"rounds", rounds}, {"given", nlohmann::json::array()}};
      if (g.seed) request["seed"] = *g.seed;
      for (const auto& spec : given_specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) fail(ErrorCode::config, "--given expects category=path, got '" + spec + "'");
        request["given"].push_back(
            {{"category", spec.substr(0, eq)}, {"image", base64_encode(read_bytes(spec.substr(eq + 1)))}});
      }
      const auto result = service.generate(request);
      const fs::path dir = g.out ? fs::path(*g.out) : fs::path("generated");
      write_generation(result, dir);
      if (log) log("wrote " + (dir / "grid.png").string());
    } else if (*serve_cmd) {
      GenerationService service(layout, gen_run);
      if (log) log("listening on " + host + ":" + std::to_string(port));
      serve(service, host, port);
    }
  } catch (const RequestError& e) {
    report_error("invalid request", e.what(), {{"fields", e.fields()}, {"messages", e.messages()}});
    return 3;
  } catch (const Error& e) {
    report_error(std::string(error_code_name(e.code())), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
  return 0;
}
