#include <gtest/gtest.h>

#include <fstream>

#include "fcboost/boost_train.hpp"
#include "fcboost/checkpoint.hpp"
#include "fcboost/metrics.hpp"
#include "fcboost/pipeline.hpp"
#include "support.hpp"
#include "tiny_pipeline.hpp"

using namespace fcboost;
using fcboost::testing::TempDir;

namespace {

class Pretrained : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("boost_train");
    layout_ = Layout{dir_->path()};
    config_ = fcboost::testing::tiny_config(5);
    fcboost::testing::build_pretrained(config_, layout_);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static FCBoostModel fresh_model() {
    auto model = load_frozen_model(layout_.checkpoints());
    init_encoders(model, config_.train.encoder, config_.train.seed);
    return model;
  }
  static OutfitTensors train_split() { return load_split(load_manifest(layout_.data()), Split::train); }

  static TempDir* dir_;
  static Layout layout_;
  static PipelineConfig config_;
};

TempDir* Pretrained::dir_ = nullptr;
Layout Pretrained::layout_;
PipelineConfig Pretrained::config_;

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

std::string model_hash(FCBoostModel& model, bool encoders) {
  std::string all;
  for (auto& g : model.generators) all += nn::state_hash(*g);
  all += nn::state_hash(*model.booster);
  if (encoders) {
    for (auto& e : model.encoders) all += nn::state_hash(*e);
  }
  return sha256_hex(all);
}

}  // namespace

TEST(MaskOutfit, CardinalityAndDeterminism) {
  Rng rng(1);
  for (int n = 1; n <= 3; ++n) {
    for (int i = 0; i < 20; ++i) {
      const auto mask = mask_outfit(n, rng);
      EXPECT_EQ(std::count(mask.begin(), mask.end(), true), n);
    }
  }
  Rng a(2), b(2);
  EXPECT_EQ(mask_outfit(2, a), mask_outfit(2, b));
  EXPECT_THROW(mask_outfit(0, rng), Error);
  EXPECT_THROW(mask_outfit(4, rng), Error);
}

TEST(MaskOutfit, UniformOverCategories) {
  Rng rng(3);
  std::array<int, 4> given{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto mask = mask_outfit(1, rng);
    for (int c = 0; c < 4; ++c) given[c] += mask[c];
  }
  for (int c = 0; c < 4; ++c) EXPECT_NEAR(given[c] / static_cast<double>(n), 0.25, 0.02);
}

TEST(DiversityLoss, IdenticalItemsGiveZero) {
  const auto x = torch::randn({3, 1, 5}).expand({3, 4, 5});
  const auto loss = diversity_loss({x, torch::Tensor(), x, torch::Tensor()}, [](const torch::Tensor& a, const torch::Tensor& b) {
    return (a - b).square().sum(1);
  });
  EXPECT_EQ(loss.item<double>(), 0.0);
}

TEST(DiversityLoss, InjectedDistances) {
  const auto stub = [](double value) {
    return [value](const torch::Tensor& a, const torch::Tensor&) { return torch::full({a.size(0)}, value); };
  };
  EXPECT_NEAR(diversity_loss({torch::zeros({2, 2, 3})}, stub(0.4)).item<double>(), -0.4, 1e-7);

  // K = 3: pair (0,1) -> 0.2, (0,2) -> 0.4, (1,2) -> 0.6, encoded in the first feature.
  auto x = torch::zeros({1, 3, 1});
  x[0][0][0] = 0.0;
  x[0][1][0] = 0.2;
  x[0][2][0] = 0.6;
  const auto d = [](const torch::Tensor& a, const torch::Tensor& b) {
    const auto s = (a + b).select(1, 0);
    return torch::where(s < 0.3, torch::full_like(s, 0.2), torch::where(s < 0.7, torch::full_like(s, 0.4),
                                                                          torch::full_like(s, 0.6)));
  };
  EXPECT_NEAR(diversity_loss({x}, d).item<double>(), -0.4, 1e-7);
  EXPECT_THROW(diversity_loss({torch::zeros({2, 1, 3})}, stub(0.1)), Error);
}

TEST(DiversityLoss, NonPositiveAndStrictWhenItemsDiffer) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = nn::normal_tensor(rng, {2, 3, 6});
    const double loss =
        diversity_loss({x}, [](const torch::Tensor& a, const torch::Tensor& b) { return (a - b).square().sum(1); })
            .item<double>();
    EXPECT_LT(loss, 0.0);
  }
}

TEST(TotalLoss, WorkedExamples) {
  TrainConfig config;
  auto s = [](double v) { return torch::tensor(v, torch::kFloat64); };
  EXPECT_NEAR(total_loss({{s(0.5), s(-0.3), s(0.1)}}, config).item<double>(), -0.5, 1e-12);
  EXPECT_EQ(total_loss({{s(0), s(0), s(0)}}, config).item<double>(), 0.0);
  // Per-round totals -0.5 and -0.7.
  EXPECT_NEAR(total_loss({{s(0.5), s(-0.3), s(0.1)}, {s(0.3), s(-0.3), s(0.1)}}, config).item<double>(), -0.6, 1e-12);
  EXPECT_THROW(total_loss({}, config), Error);
}

TEST(TrainConfig, ValidationAndHash) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  auto bad = c;
  bad.K = 1;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.T = 0;
  EXPECT_THROW(bad.validate(), Error);
  auto longer = c;
  longer.iterations = 5;
  longer.log_interval = 7;
  EXPECT_EQ(longer.hash(), c.hash());
  auto other = c;
  other.lambda_div = 0.0;
  EXPECT_NE(other.hash(), c.hash());
  EXPECT_THROW(TrainConfig::from_json({{"lamda_div", 1.0}}), Error);
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).hash(), c.hash());
}

TEST_F(Pretrained, BoostForwardRoundsAndGivenSlots) {
  auto model = fresh_model();
  const auto data = train_split();
  torch::NoGradGuard no_grad;
  const auto given = data.images.slice(0, 0, 3);
  std::vector<SlotMask> masks = {SlotMask{true, false, false, false}, SlotMask{true, true, false, true},
                                 SlotMask{false, true, true, false}};
  Rng rng(6);
  const auto z = nn::normal_tensor(rng, {3, 2, kLatentDim});

  EXPECT_EQ(boost_forward(model, given, masks, z, 0).outfits.size(), 1u);
  const auto out = boost_forward(model, given, masks, z, 2);
  ASSERT_EQ(out.outfits.size(), 3u);
  EXPECT_EQ(out.rounds(), 2);
  for (int t = 0; t <= 2; ++t) {
    const auto& o = out.outfits[static_cast<std::size_t>(t)];
    EXPECT_EQ(o.sizes(), (std::vector<std::int64_t>{3, 2, 4, 3, 32, 32}));
    for (int i = 0; i < 3; ++i) {
      for (int c = 0; c < 4; ++c) {
        for (int k = 0; k < 2; ++k) {
          if (masks[i][c]) {
            EXPECT_TRUE(torch::equal(o[i][k][c], given[i][c])) << "t" << t << " i" << i << " c" << c;
          }
        }
        if (!masks[i][c]) EXPECT_FALSE(torch::equal(o[i][0][c], o[i][1][c])) << "t" << t << " i" << i << " c" << c;
      }
    }
  }
  // Codes are stored per synthesized row and code.
  EXPECT_EQ(out.target_rows[slot(Category::upper)].size(0), 1);
  EXPECT_EQ(out.codes[1][slot(Category::upper)].sizes(), (std::vector<std::int64_t>{2, kLatentDim}));
  EXPECT_EQ(out.items(2, Category::lower).sizes(), (std::vector<std::int64_t>{2, 2, 3, 32, 32}));
  EXPECT_THROW(boost_forward(model, given, {masks[0]}, z, 1), Error);
}

TEST_F(Pretrained, RoundZeroUsesMappingOutput) {
  auto model = fresh_model();
  const auto data = train_split();
  torch::NoGradGuard no_grad;
  Rng rng(7);
  const auto z = nn::normal_tensor(rng, {1, 2, kLatentDim});
  const SlotMask mask{true, true, true, false};
  const auto out = boost_forward(model, data.images.slice(0, 0, 1), {mask}, z, 1);
  auto& shoes = model.generators[slot(Category::shoes)];
  EXPECT_TRUE(torch::allclose(out.outfits[0][0].select(1, 3), random_item(shoes, z[0]), 1e-5, 1e-6));
  // Round 1 encodes the round-0 outfit.
  const auto stack = out.outfits[0][0].reshape({2, kOutfitChannels, 32, 32});
  const auto w = encode(model.encoders[slot(Category::shoes)], stack);
  EXPECT_TRUE(torch::allclose(out.outfits[1][0].select(1, 3), synthesize(shoes, w), 1e-5, 1e-6));
}

TEST_F(Pretrained, StepUpdatesOnlyTrainableParts) {
  auto model = fresh_model();
  const auto frozen_before = model_hash(model, false);
  std::vector<std::string> enc_before;
  for (auto& e : model.encoders) enc_before.push_back(nn::state_hash(*e));
  auto tc = config_.train;
  Trainer trainer(tc, model, train_split());
  std::vector<std::string> disc_before;
  for (auto& d : trainer.discriminators()) disc_before.push_back(nn::state_hash(*d));
  const auto m = trainer.step();
  EXPECT_EQ(m.iteration, 1);
  EXPECT_EQ(model_hash(trainer.model(), false), frozen_before);
  int enc_changed = 0, disc_changed = 0;
  for (int c = 0; c < 4; ++c) {
    enc_changed += nn::state_hash(*trainer.model().encoders[c]) != enc_before[c];
    disc_changed += nn::state_hash(*trainer.discriminators()[c]) != disc_before[c];
  }
  EXPECT_GT(enc_changed, 0);
  EXPECT_GT(disc_changed, 0);
  for (auto& g : trainer.model().generators) {
    for (const auto& p : g->parameters()) EXPECT_FALSE(p.grad().defined() && p.grad().abs().sum().item<double>() != 0);
  }
  for (const auto& p : trainer.model().booster->parameters()) {
    EXPECT_FALSE(p.grad().defined() && p.grad().abs().sum().item<double>() != 0);
  }
}

TEST_F(Pretrained, LossesStayFiniteAndDiversityNonPositive) {
  auto tc = config_.train;
  Trainer trainer(tc, fresh_model(), train_split());
  for (int i = 0; i < 100; ++i) {
    const auto m = trainer.step();
    ASSERT_TRUE(std::isfinite(m.d_loss) && std::isfinite(m.adv) && std::isfinite(m.div) && std::isfinite(m.fcb) &&
                std::isfinite(m.total))
        << "iteration " << m.iteration;
    EXPECT_LE(m.div, 0.0);
    EXPECT_GE(m.fcb, 0.0);
    EXPECT_NEAR(m.total, m.adv + tc.lambda_div * m.div + tc.lambda_fcb * m.fcb, 1e-4 * (1 + std::abs(m.total)));
  }
}

TEST_F(Pretrained, ZeroWeightsLeaveAdversarialObjective) {
  auto tc = config_.train;
  tc.lambda_div = 0.0;
  tc.lambda_fcb = 0.0;
  Trainer trainer(tc, fresh_model(), train_split());
  for (int i = 0; i < 3; ++i) {
    const auto m = trainer.step();
    EXPECT_NEAR(m.total, m.adv, 1e-6);
  }
}

TEST_F(Pretrained, StateRoundTripAndIncompatibility) {
  auto tc = config_.train;
  Trainer a(tc, fresh_model(), train_split());
  a.step();
  a.step();
  TempDir dir("state");
  a.save_state(dir.path() / "s.fcbk");
  Trainer b(tc, fresh_model(), train_split());
  b.load_state(dir.path() / "s.fcbk");
  EXPECT_EQ(b.iteration(), 2);
  const auto ma = a.step(), mb = b.step();
  EXPECT_EQ(ma.to_json().dump(), mb.to_json().dump());

  auto other = tc;
  other.alpha = 0.3;
  Trainer c(other, fresh_model(), train_split());
  try {
    c.load_state(dir.path() / "s.fcbk");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::incompatible_checkpoint);
  }
}

TEST_F(Pretrained, ResumeIsBitIdentical) {
  TempDir straight("resume_a"), split("resume_b");
  auto tc = config_.train;
  tc.iterations = 6;
  tc.checkpoint_interval = 3;
  const TrainPaths a{layout_.data(), layout_.checkpoints(), straight.path()};
  const TrainPaths b{layout_.data(), layout_.checkpoints(), split.path()};
  train(tc, a);
  auto first = tc;
  first.iterations = 3;
  train(first, b);
  EXPECT_TRUE(std::filesystem::exists(state_file(split.path(), 3)));
  train(tc, b);
  const auto la = read_lines(straight.path() / "metrics.jsonl");
  EXPECT_EQ(la.size(), 6u);  // iterations / log_interval
  EXPECT_EQ(la, read_lines(split.path() / "metrics.jsonl"));
  for (Category c : kAllCategories) {
    EXPECT_EQ(sha256_file(encoder_file(straight.path(), c).string()), sha256_file(encoder_file(split.path(), c).string()));
  }
  EXPECT_EQ(sha256_file(state_file(straight.path(), 6).string()), sha256_file(state_file(split.path(), 6).string()));
  // Probe scores are logged at the probe interval.
  EXPECT_TRUE(nlohmann::json::parse(la[1]).contains("oracle"));
  EXPECT_FALSE(nlohmann::json::parse(la[0]).contains("oracle"));
}

TEST_F(Pretrained, MissingBoosterIsReportedByName) {
  TempDir partial("partial");
  for (Category c : kAllCategories) {
    for (const char* net : {"mapping", "synthesis"}) {
      std::filesystem::copy_file(generator_file(layout_.checkpoints(), c, net), generator_file(partial.path(), c, net));
    }
    const auto sidecar = std::string("gan_") + std::string(category_name(c)) + ".json";
    std::filesystem::copy_file(layout_.checkpoints() / sidecar, partial.path() / sidecar);
  }
  try {
    load_frozen_model(partial.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::missing_artifact);
    EXPECT_NE(std::string(e.what()).find("booster"), std::string::npos);
  }
}
