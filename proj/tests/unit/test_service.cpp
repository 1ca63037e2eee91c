#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <thread>

#include "fcboost/checkpoint.hpp"
#include "fcboost/evaluate.hpp"
#include "fcboost/image.hpp"
#include "fcboost/pipeline.hpp"
#include "fcboost/service.hpp"
#include "support.hpp"
#include "tiny_pipeline.hpp"

// After the Eigen headers: resolv.h defines a _res macro.
#include "httplib.h"

using namespace fcboost;
using fcboost::testing::TempDir;
using nlohmann::json;

namespace {

class TrainedHome : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("service");
    layout_ = Layout{dir_->path()};
    config_ = fcboost::testing::tiny_config(11);
    fcboost::testing::build_trained(config_, layout_);
    std::ofstream(dir_->path() / "config.json") << fcboost::testing::tiny_config_json(11).dump();
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static const GenerationService& service() {
    static GenerationService* s = [] {
      auto* created = new GenerationService(layout_, "full");
      created->warm_up();
      return created;
    }();
    return *s;
  }
  static std::string first_item(Category c) {
    const auto page = service().catalog(0, 200);
    for (const auto& item : page.at("items")) {
      if (item.at("category").get<std::string>() == category_name(c)) return item.at("id");
    }
    return {};
  }

  static TempDir* dir_;
  static Layout layout_;
  static PipelineConfig config_;
};

TempDir* TrainedHome::dir_ = nullptr;
Layout TrainedHome::layout_;
PipelineConfig TrainedHome::config_;

std::vector<std::string> fields_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const RequestError& e) {
    return e.fields();
  }
  return {};
}

struct CliResult {
  int status = -1;
  std::string err;
};

CliResult run_cli(const std::string& args, const std::filesystem::path& scratch) {
  const auto err_file = scratch / "stderr.txt";
  const std::string command = std::string(FCBOOST_CLI) + " -q " + args + " > /dev/null 2> " + err_file.string();
  const int raw = std::system(command.c_str());
  CliResult r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(err_file);
  r.err.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Request validation (no model needed)

TEST(GenerationRequest, ParsesDefaults) {
  const auto r = GenerationRequest::from_json({{"given", {{{"category", "upper"}, {"item_id", "x"}}}}});
  EXPECT_EQ(r.k, 1);
  EXPECT_EQ(r.rounds, 2);
  EXPECT_FALSE(r.seed.has_value());
  ASSERT_EQ(r.given.size(), 1u);
  EXPECT_EQ(r.given[0].category, Category::upper);
}

TEST(GenerationRequest, ListsEveryInvalidField) {
  const auto fields = fields_of([] {
    GenerationRequest::from_json({{"given", {{{"category", "hat"}, {"item_id", "x"}}}}, {"k", 0}, {"rounds", 9}, {"seed", -1}});
  });
  EXPECT_EQ(fields, (std::vector<std::string>{"given[0].category", "k", "rounds", "seed"}));
  EXPECT_EQ(fields_of([] { GenerationRequest::from_json(json::array()); }), std::vector<std::string>{"body"});
  EXPECT_EQ(fields_of([] { GenerationRequest::from_json(json::object()); }), std::vector<std::string>{"given"});
  EXPECT_EQ(fields_of([] { GenerationRequest::from_json({{"given", {{{"category", "bag"}}}}}); }),
            std::vector<std::string>{"given[0]"});
  EXPECT_EQ(fields_of([] {
              GenerationRequest::from_json(
                  {{"given", {{{"category", "bag"}, {"item_id", "a"}}, {{"category", "bag"}, {"item_id", "b"}}}}});
            }),
            std::vector<std::string>{"given[1].category"});
  EXPECT_EQ(fields_of([] { GenerationRequest::from_json({{"given", {{{"category", "bag"}, {"item_id", "a"}}}}, {"k", 17}}); }),
            std::vector<std::string>{"k"});
}

TEST(GenerationRequest, RejectsFullOutfitsAndIdLocks) {
  const json four = {{"given",
                      {{{"category", "upper"}, {"item_id", "a"}},
                       {{"category", "bag"}, {"item_id", "b"}},
                       {{"category", "lower"}, {"item_id", "c"}},
                       {{"category", "shoes"}, {"item_id", "d"}}}}};
  EXPECT_EQ(fields_of([&] { GenerationRequest::from_json(four); }), std::vector<std::string>{"given"});
  const json locked = {{"given", {{{"category", "upper"}, {"item_id", "a"}}}},
                       {"locks", {{{"category", "bag"}, {"item_id", "b"}}}}};
  EXPECT_EQ(fields_of([&] { GenerationRequest::from_json(locked); }), std::vector<std::string>{"locks[0].item_id"});
}

TEST(GenerationServiceCold, NotReadyBeforeWarmUp) {
  TempDir empty("cold");
  GenerationService service(Layout{empty.path()}, "full");
  EXPECT_FALSE(service.ready());
  EXPECT_EQ(service.health().at("status"), "loading");
  EXPECT_THROW(service.catalog(0), NotReadyError);
  EXPECT_THROW(service.generate(json{{"given", json::array()}}), NotReadyError);
  EXPECT_THROW(service.warm_up(), Error);
  EXPECT_EQ(service.health().at("status"), "loading");
  EXPECT_TRUE(service.health().contains("error"));
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(EvalCases, SettingsCycleAndSeedsAreStable) {
  const auto a = make_eval_cases(5, 9, 2, 4);
  const auto b = make_eval_cases(5, 9, 2, 4);
  ASSERT_EQ(a.size(), 9u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].outfit, static_cast<std::int64_t>(i % 5));
    EXPECT_EQ(a[i].n_given, 1 + static_cast<int>(i % 3));
    EXPECT_EQ(std::count(a[i].mask.begin(), a[i].mask.end(), true), a[i].n_given);
    EXPECT_TRUE(torch::equal(a[i].z, b[i].z));
    EXPECT_EQ(a[i].mask, b[i].mask);
  }
  // Extending the case list keeps the prefix.
  const auto longer = make_eval_cases(5, 12, 2, 4);
  EXPECT_TRUE(torch::equal(longer[8].z, a[8].z));
}

TEST(EvalCases, SettingMeans) {
  const auto cases = make_eval_cases(4, 6, 1, 0);
  const auto table = setting_means({1, 2, 3, 3, 4, 5}, cases);
  EXPECT_EQ(table.at("1"), 2.0);
  EXPECT_EQ(table.at("2"), 3.0);
  EXPECT_EQ(table.at("3"), 4.0);
  EXPECT_EQ(table.at("Avg."), 3.0);
  EXPECT_THROW(setting_means({1.0}, cases), Error);
}

TEST(EvalCases, F2btEvalPerSetting) {
  const auto cases = make_eval_cases(4, 6, 1, 0);
  // "a" wins settings 1 and 2, "b" wins setting 3, case 2 and 5 are ties.
  const std::vector<double> a = {0.9, 0.9, 0.5, 0.9, 0.9, 0.5};
  const std::vector<double> b = {0.1, 0.1, 0.5, 0.1, 0.1, 0.5};
  const auto table = f2bt_eval({"a", "b"}, {a, b}, cases);
  EXPECT_DOUBLE_EQ(table.at("a").at("1"), 100.0);
  EXPECT_DOUBLE_EQ(table.at("a").at("3"), 50.0);
  EXPECT_DOUBLE_EQ(table.at("b").at("3"), 50.0);
  EXPECT_DOUBLE_EQ(table.at("a").at("Avg.") + table.at("b").at("Avg."), 100.0);
  EXPECT_THROW(f2bt_eval({"a"}, {a, b}, cases), Error);
}

TEST_F(TrainedHome, DiversityIsZeroWhenNoiseIsIgnored) {
  auto model = load_trained_model(layout_, "full");
  const auto test = load_split(load_manifest(layout_.data()), Split::test);
  auto eval = config_.eval;
  const auto varied = diversity_eval(model, test, eval, 2);
  for (const auto& key : {"1", "2", "3", "Avg."}) {
    ASSERT_TRUE(varied.count(key)) << key;
    EXPECT_GT(varied.at(key), 0.0) << key;
  }
  // A mapping with zero weights sends every z to the same code.
  auto collapsed = load_trained_model(layout_, "full");
  torch::NoGradGuard no_grad;
  for (auto& g : collapsed.generators) {
    g = load_generator(layout_.checkpoints(), g->category());
    for (auto& p : g->mapping->named_parameters()) {
      if (p.key().find("weight") != std::string::npos) p.value().zero_();
    }
  }
  const auto flat = diversity_eval(collapsed, test, eval, 2);
  for (const auto& [key, value] : flat) EXPECT_EQ(value, 0.0) << key;
}

TEST_F(TrainedHome, EvaluateModelShapesAndDeterminism) {
  auto model = load_trained_model(layout_, "full");
  const auto test = load_split(load_manifest(layout_.data()), Split::test);
  const auto cases = make_eval_cases(test.size(), 9, 2, 1);
  const auto a = evaluate_model(model, test, cases, 2, nullptr);
  const auto b = evaluate_model(model, test, cases, 2, nullptr);
  ASSERT_EQ(a.round_mean.size(), 3u);
  ASSERT_EQ(a.round_table.size(), 3u);
  EXPECT_EQ(a.final_scores.size(), cases.size());
  EXPECT_EQ(a.final_scores, b.final_scores);
  EXPECT_TRUE(a.fid.empty());
  for (double s : a.final_scores) {
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST_F(TrainedHome, EvalStageReport) {
  auto config = config_;
  TempDir out("report");
  const auto report = stage_eval(config, layout_, {"full"}, out.path() / "report.json");
  EXPECT_TRUE(std::filesystem::exists(out.path() / "report.json"));
  for (const auto& key : {"FID", "LPIPS", "oracle_by_round", "F2BT", "blank_outfits"}) {
    ASSERT_TRUE(report.contains(key)) << key;
  }
  for (const auto& key : {"1", "2", "3", "Avg."}) {
    EXPECT_TRUE(report["FID"]["full"].contains(key)) << key;
    EXPECT_TRUE(report["LPIPS"]["full"].contains(key)) << key;
    EXPECT_TRUE(report["F2BT"]["full"].contains(key)) << key;
  }
  EXPECT_EQ(report["oracle_by_round"]["full"].size(), 3u);
  EXPECT_EQ(report["cases"], config.eval.cases);
  EXPECT_THROW(stage_eval(config, layout_, {"missing"}, out.path() / "r2.json"), Error);
}

// ---------------------------------------------------------------------------
// Service

TEST_F(TrainedHome, HealthAndCatalog) {
  const auto health = service().health();
  EXPECT_EQ(health.at("status"), "ready");
  EXPECT_EQ(health.at("resolution"), 32);
  EXPECT_EQ(health.at("model_hash").get<std::string>().size(), 64u);
  for (const auto& key : {"gan_upper", "gan_bag", "gan_lower", "gan_shoes", "booster", "encoder_upper"}) {
    EXPECT_TRUE(health.at("checkpoints").contains(key)) << key;
  }

  const auto page = service().catalog(0);
  EXPECT_EQ(page.at("page_size"), 24);
  EXPECT_EQ(page.at("items").size(), 24u);
  EXPECT_EQ(page.at("total_outfits"), config_.dataset.test_count);
  EXPECT_EQ(page.at("total_items"), config_.dataset.test_count * 4);
  std::vector<std::string> ids;
  for (int p = 0;; ++p) {
    const auto j = service().catalog(p, 7);
    if (j.at("items").empty()) break;
    for (const auto& item : j.at("items")) ids.push_back(item.at("id"));
  }
  EXPECT_EQ(ids.size(), static_cast<std::size_t>(config_.dataset.test_count * 4));
  EXPECT_TRUE(std::is_sorted(ids.begin(), ids.end()));
  EXPECT_EQ(service().catalog(0).dump(), page.dump());
  const auto first = page.at("items").at(0);
  const auto png = decode_png(base64_decode(first.at("thumbnail").get<std::string>()));
  EXPECT_EQ(png.size, 32);
  EXPECT_THROW(service().catalog(0, 0), RequestError);
  EXPECT_THROW(service().catalog(-1), RequestError);
}

TEST_F(TrainedHome, GenerateShapesRolesAndDeterminism) {
  const auto upper = first_item(Category::upper);
  const auto lower = first_item(Category::lower);
  const auto shoes = first_item(Category::shoes);
  const json request = {{"given",
                         {{{"category", "upper"}, {"item_id", upper}},
                          {{"category", "lower"}, {"item_id", lower}},
                          {{"category", "shoes"}, {"item_id", shoes}}}},
                        {"k", 1},
                        {"rounds", 2},
                        {"seed", 99}};
  const auto a = service().generate(request);
  ASSERT_EQ(a.at("sets").size(), 1u);
  const auto& items = a["sets"][0]["items"];
  ASSERT_EQ(items.size(), 4u);
  int synthesized = 0;
  for (const auto& item : items) {
    if (item.at("role") == "synthesized") {
      ++synthesized;
      EXPECT_EQ(item.at("category"), "bag");
      EXPECT_EQ(item.at("rounds").size(), 3u);
      EXPECT_EQ(item.at("image"), item.at("rounds").back());
    } else {
      EXPECT_EQ(item.at("role"), "given");
    }
  }
  EXPECT_EQ(synthesized, 1);
  EXPECT_EQ(a["sets"][0]["round_scores"].size(), 3u);
  EXPECT_EQ(a.at("seed"), 99);
  EXPECT_EQ(service().generate(request).dump(), a.dump());

  auto other = request;
  other["seed"] = 100;
  EXPECT_NE(service().generate(other).dump(), a.dump());

  auto unseeded = request;
  unseeded.erase("seed");
  const auto drawn = service().generate(unseeded);
  auto replay = request;
  replay["seed"] = drawn.at("seed");
  EXPECT_EQ(service().generate(replay).dump(), drawn.dump());
}

TEST_F(TrainedHome, GivenImagesAreEchoedByteForByte) {
  const auto page = service().catalog(0, 200);
  std::string thumb;
  for (const auto& item : page.at("items")) {
    if (item.at("category") == "upper") {
      thumb = item.at("thumbnail");
      break;
    }
  }
  const auto result = service().generate(json{{"given", {{{"category", "upper"}, {"image", thumb}}}}, {"k", 3}, {"seed", 1}});
  ASSERT_EQ(result.at("sets").size(), 3u);
  std::set<std::string> bags;
  for (const auto& set : result.at("sets")) {
    EXPECT_EQ(set["items"][0].at("image"), thumb);
    bags.insert(set["items"][1].at("image").get<std::string>());
  }
  EXPECT_EQ(bags.size(), 3u);
}

TEST_F(TrainedHome, LockAndRegenerate) {
  const auto upper = first_item(Category::upper);
  const json first = {{"given", {{{"category", "upper"}, {"item_id", upper}}}}, {"k", 1}, {"seed", 5}};
  const auto a = service().generate(first);
  const auto bag = a["sets"][0]["items"][1];
  ASSERT_EQ(bag.at("role"), "synthesized");
  const json second = {{"given", {{{"category", "upper"}, {"item_id", upper}}}},
                       {"locks", {{{"category", "bag"}, {"image", bag.at("image")}}}},
                       {"k", 1},
                       {"seed", 6}};
  const auto b = service().generate(second);
  const auto& items = b["sets"][0]["items"];
  EXPECT_EQ(items[1].at("role"), "locked");
  EXPECT_EQ(items[1].at("image"), bag.at("image"));
  EXPECT_EQ(items[2].at("role"), "synthesized");
  EXPECT_NE(items[2].at("image"), a["sets"][0]["items"][2].at("image"));
  EXPECT_NE(items[3].at("image"), a["sets"][0]["items"][3].at("image"));
}

TEST_F(TrainedHome, GenerateRejectsUnknownItemsAndBadImages) {
  const auto fields = fields_of([] {
    service().generate(json{{"given",
                             {{{"category", "upper"}, {"item_id", "nope"}},
                              {{"category", "bag"}, {"image", "bm90IGEgcG5n"}}}}});
  });
  EXPECT_EQ(fields, (std::vector<std::string>{"given[0].item_id", "given[1].image"}));
  const auto upper = first_item(Category::upper);
  EXPECT_EQ(fields_of([&] { service().generate(json{{"given", {{{"category", "bag"}, {"item_id", upper}}}}}); }),
            std::vector<std::string>{"given[0].category"});
  ItemImage big(64);
  const auto wrong_size = base64_encode(encode_png(big));
  EXPECT_EQ(fields_of([&] { service().generate(json{{"given", {{{"category", "bag"}, {"image", wrong_size}}}}}); }),
            std::vector<std::string>{"given[0].image"});
}

TEST_F(TrainedHome, HttpRoutes) {
  GenerationService svc(layout_, "full");
  httplib::Server server;
  install_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(120, 0);

  auto res = client.Get("/api/health");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body).at("status"), "loading");
  res = client.Get("/api/catalog");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 503);
  EXPECT_TRUE(json::parse(res->body).contains("model_hash"));
  res = client.Post("/api/generate", "{}", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 503);

  svc.warm_up();
  res = client.Get("/api/health");
  const auto hash = json::parse(res->body).at("model_hash").get<std::string>();
  EXPECT_EQ(json::parse(res->body).at("status"), "ready");

  res = client.Get("/api/catalog?page=0&page_size=5");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  auto body = json::parse(res->body);
  EXPECT_EQ(body.at("items").size(), 5u);
  EXPECT_EQ(body.at("model_hash"), hash);
  const std::string item_id = body["items"][0]["id"];
  const std::string category = body["items"][0]["category"];

  res = client.Get("/api/catalog?page=x");
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body).at("fields"), json::array({"page"}));

  res = client.Post("/api/generate", "not json", "application/json");
  EXPECT_EQ(res->status, 400);
  EXPECT_EQ(json::parse(res->body).at("fields"), json::array({"body"}));

  res = client.Post("/api/generate", json{{"given", json::array()}, {"k", 99}}.dump(), "application/json");
  EXPECT_EQ(res->status, 400);
  body = json::parse(res->body);
  EXPECT_EQ(body.at("fields"), json::array({"k", "given"}));
  EXPECT_EQ(body.at("model_hash"), hash);

  const json request = {{"given", {{{"category", category}, {"item_id", item_id}}}}, {"k", 2}, {"rounds", 1}, {"seed", 3}};
  res = client.Post("/api/generate", request.dump(), "application/json");
  ASSERT_EQ(res->status, 200);
  body = json::parse(res->body);
  EXPECT_EQ(body.at("sets").size(), 2u);
  EXPECT_EQ(body.at("model_hash"), hash);
  EXPECT_EQ(body.dump(), svc.generate(request).dump());

  server.stop();
  worker.join();
}

// ---------------------------------------------------------------------------
// Command line

TEST_F(TrainedHome, CliGenerateIsReproducible) {
  TempDir scratch("cli_generate");
  const auto page = service().catalog(0, 200);
  const auto thumb = base64_decode(page["items"][0]["thumbnail"].get<std::string>());
  const auto given = scratch.path() / "given.png";
  std::ofstream(given, std::ios::binary).write(reinterpret_cast<const char*>(thumb.data()),
                                               static_cast<std::streamsize>(thumb.size()));
  const std::string category = page["items"][0]["category"];
  std::array<std::filesystem::path, 2> outs = {scratch.path() / "a", scratch.path() / "b"};
  for (const auto& out : outs) {
    const auto r = run_cli("--home " + dir_->path().string() + " --seed 21 --out " + out.string() +
                               " generate --given " + category + "=" + given.string() + " --k 4 --rounds 2",
                           scratch.path());
    ASSERT_EQ(r.status, 0) << r.err;
  }
  EXPECT_TRUE(std::filesystem::exists(outs[0] / "grid.png"));
  for (int k = 0; k < 4; ++k) {
    for (Category c : kAllCategories) {
      const auto name = "set" + std::to_string(k) + "_" + std::string(category_name(c)) + ".png";
      ASSERT_TRUE(std::filesystem::exists(outs[0] / name)) << name;
      EXPECT_EQ(sha256_file((outs[0] / name).string()), sha256_file((outs[1] / name).string())) << name;
    }
  }
  EXPECT_EQ(sha256_file((outs[0] / "grid.png").string()), sha256_file((outs[1] / "grid.png").string()));
  std::ifstream in(outs[0] / "result.json");
  const auto result = json::parse(in);
  EXPECT_EQ(result.at("seed"), 21);
  EXPECT_EQ(result.at("sets").size(), 4u);
  EXPECT_EQ(sha256_file((outs[0] / ("set0_" + category + ".png")).string()), sha256_file(given.string()));
}

TEST_F(TrainedHome, CliReportsMissingBooster) {
  TempDir scratch("cli_missing");
  TempDir home("cli_home");
  std::filesystem::copy(layout_.data(), home.path() / "data", std::filesystem::copy_options::recursive);
  std::filesystem::create_directories(home.path() / "checkpoints");
  for (const auto& entry : std::filesystem::directory_iterator(layout_.checkpoints())) {
    if (entry.path().filename().string().rfind("gan_", 0) == 0) {
      std::filesystem::copy_file(entry.path(), home.path() / "checkpoints" / entry.path().filename());
    }
  }
  const auto r = run_cli("--home " + home.path().string() + " --config " + (dir_->path() / "config.json").string() +
                             " train --run-name x",
                         scratch.path());
  EXPECT_EQ(r.status, 2);
  const auto err = json::parse(r.err);
  EXPECT_EQ(err.at("error"), "missing_artifact");
  EXPECT_NE(err.at("message").get<std::string>().find("booster"), std::string::npos);
}

TEST_F(TrainedHome, CliRejectsBadRequestsWithConfigExit) {
  TempDir scratch("cli_bad");
  auto r = run_cli("--home " + dir_->path().string() + " generate --given hat=/nonexistent.png", scratch.path());
  EXPECT_EQ(r.status, 1) << r.err;  // unreadable file is an io error
  const auto given = scratch.path() / "g.png";
  write_png(ItemImage(32), given.string());
  r = run_cli("--home " + dir_->path().string() + " generate --given hat=" + given.string(), scratch.path());
  EXPECT_EQ(r.status, 3) << r.err;
  EXPECT_EQ(json::parse(r.err).at("fields"), json::array({"given[0].category"}));
}
