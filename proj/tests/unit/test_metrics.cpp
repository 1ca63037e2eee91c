#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numeric>

#include "fcboost/data.hpp"
#include "fcboost/metrics.hpp"
#include "support.hpp"

using namespace fcboost;

namespace {

FeatureStats make_stats(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
  FeatureStats s;
  s.mean = std::move(mean);
  s.covariance = std::move(cov);
  s.count = 100;
  return s;
}

// Trace of the square root of Sa Sb from the (real, non-negative) spectrum
// of the non-symmetric product.
double fid_oracle(const FeatureStats& a, const FeatureStats& b) {
  Eigen::EigenSolver<Eigen::MatrixXd> solver(a.covariance * b.covariance);
  double root = 0.0;
  for (int i = 0; i < solver.eigenvalues().size(); ++i) root += std::sqrt(std::max(0.0, solver.eigenvalues()[i].real()));
  return (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() - 2.0 * root;
}

Eigen::MatrixXd random_spd(int dim, Rng& rng) {
  Eigen::MatrixXd m(dim, dim + 3);
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) m(i, j) = rng.normal();
  }
  return m * m.transpose() / m.cols() + 0.05 * Eigen::MatrixXd::Identity(dim, dim);
}

Eigen::MatrixXd random_features(int n, int dim, Rng& rng) {
  Eigen::MatrixXd f(n, dim);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < dim; ++j) f(i, j) = rng.normal() * (1 + j) + 0.3 * j;
  }
  return f;
}

// Win counting written from scratch in integer units of 1/6 of a case
// (exact for up to three tied winners): a method wins a case when no other
// method scores strictly higher; the case's point is split among winners.
std::vector<long> f2bt_oracle_sixths(const std::vector<std::vector<double>>& scores) {
  const std::size_t methods = scores.front().size();
  std::vector<long> points(methods, 0);
  for (const auto& row : scores) {
    std::vector<std::size_t> winners;
    for (std::size_t m = 0; m < methods; ++m) {
      bool beaten = false;
      for (std::size_t o = 0; o < methods; ++o) beaten = beaten || row[o] > row[m];
      if (!beaten) winners.push_back(m);
    }
    for (std::size_t m : winners) points[m] += 6 / static_cast<long>(winners.size());
  }
  return points;
}

}  // namespace

TEST(Fid, SelfDistanceIsZero) {
  Rng rng(1);
  const auto s = make_stats(Eigen::VectorXd::Random(6), random_spd(6, rng));
  EXPECT_NEAR(fid(s, s), 0.0, 1e-6);
}

TEST(Fid, UnitMeanShift) {
  Rng rng(2);
  const auto cov = random_spd(5, rng);
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(5);
  Eigen::VectorXd shifted = mu;
  shifted(2) = 1.0;
  EXPECT_NEAR(fid(make_stats(mu, cov), make_stats(shifted, cov)), 1.0, 1e-6);
}

TEST(Fid, ScaledIdentityCovariance) {
  const Eigen::VectorXd mu = Eigen::VectorXd::Zero(2);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 2);
  EXPECT_NEAR(fid(make_stats(mu, eye), make_stats(mu, 4.0 * eye)), 2.0, 1e-6);
}

TEST(Fid, MatchesNonSymmetricEigenOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int dim = 2 + trial % 7;
    Eigen::VectorXd ma(dim), mb(dim);
    for (int i = 0; i < dim; ++i) {
      ma(i) = rng.normal();
      mb(i) = rng.normal();
    }
    const auto a = make_stats(ma, random_spd(dim, rng));
    const auto b = make_stats(mb, random_spd(dim, rng));
    const double oracle = fid_oracle(a, b);
    EXPECT_NEAR(fid(a, b), oracle, 1e-8 * std::max(1.0, oracle));
    EXPECT_NEAR(fid(a, b), fid(b, a), 1e-9 * std::max(1.0, oracle));
  }
}

TEST(Fid, MonotoneUnderTranslation) {
  Rng rng(4);
  const auto ca = random_spd(4, rng), cb = random_spd(4, rng);
  Eigen::VectorXd dir = Eigen::VectorXd::Ones(4).normalized();
  double last = -1.0;
  for (int step = 0; step < 6; ++step) {
    const double value = fid(make_stats(Eigen::VectorXd::Zero(4), ca), make_stats(step * 0.5 * dir, cb));
    EXPECT_GE(value, 0.0);
    EXPECT_GT(value, last);
    last = value;
  }
}

TEST(Fid, RejectsIndefiniteCovariance) {
  const Eigen::VectorXd mu = Eigen::VectorXd::Zero(2);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Identity(2, 2);
  bad(1, 1) = -0.5;
  try {
    fid(make_stats(mu, Eigen::MatrixXd::Identity(2, 2)), make_stats(mu, bad));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::numeric);
  }
}

TEST(FeatureStats, ConstantSetHasZeroCovariance) {
  Eigen::MatrixXd f = Eigen::MatrixXd::Constant(10, 3, 2.5);
  const auto s = feature_stats(f);
  EXPECT_EQ(s.count, 10);
  EXPECT_NEAR(s.covariance.cwiseAbs().maxCoeff(), 0.0, 1e-15);
  EXPECT_NEAR((s.mean - Eigen::VectorXd::Constant(3, 2.5)).norm(), 0.0, 1e-15);
}

TEST(FeatureStats, StreamingMatchesBatch) {
  Rng rng(5);
  const auto f = random_features(257, 6, rng);
  FeatureAccumulator acc(6), merged(6), other(6);
  int start = 0;
  for (int chunk : {1, 16, 40, 100, 100}) {
    acc.add(Eigen::MatrixXd(f.middleRows(start, chunk)));
    (start < 120 ? merged : other).add(Eigen::MatrixXd(f.middleRows(start, chunk)));
    start += chunk;
  }
  merged.merge(other);
  // Two-pass textbook estimate.
  const Eigen::VectorXd mean = f.colwise().mean().transpose();
  const Eigen::MatrixXd centered = f.rowwise() - mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / (f.rows() - 1);
  for (const auto* a : {&acc, &merged}) {
    const auto s = a->stats();
    EXPECT_EQ(s.count, 257);
    EXPECT_LT((s.mean - mean).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((s.covariance - cov).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(FeatureStats, PermutationInvariant) {
  Rng rng(6);
  const auto f = random_features(50, 4, rng);
  Eigen::MatrixXd shuffled = f.colwise().reverse();
  const auto a = feature_stats(f), b = feature_stats(shuffled);
  EXPECT_LT((a.mean - b.mean).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.covariance - b.covariance).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FeatureStats, TorchInputAndTooFewSamples) {
  FeatureAccumulator acc(3);
  acc.add(torch::tensor({{1.0, 2.0, 3.0}}));
  EXPECT_THROW(acc.stats(), Error);
  acc.add(torch::tensor({{3.0, 2.0, 1.0}}));
  const auto s = acc.stats();
  EXPECT_NEAR(s.mean(0), 2.0, 1e-12);
  EXPECT_NEAR(s.covariance(0, 0), 2.0, 1e-12);
  EXPECT_NEAR(s.covariance(0, 2), -2.0, 1e-12);
}

TEST(F2bt, SingleMethodWinsEverything) {
  EXPECT_DOUBLE_EQ(f2bt_from_scores({{0.2}, {0.9}, {0.0}})[0], 100.0);
}

TEST(F2bt, StrictDominance) {
  const auto r = f2bt_from_scores({{0.9, 0.1}, {0.5, 0.4}, {0.3, 0.2}});
  EXPECT_DOUBLE_EQ(r[0], 100.0);
  EXPECT_DOUBLE_EQ(r[1], 0.0);
}

TEST(F2bt, TiesAreSplit) {
  const auto r = f2bt_from_scores({{0.5, 0.5}, {0.7, 0.1}});
  EXPECT_DOUBLE_EQ(r[0], 75.0);
  EXPECT_DOUBLE_EQ(r[1], 25.0);
}

TEST(F2bt, MatchesBruteForceRecount) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> scores(40, std::vector<double>(3));
    for (auto& row : scores) {
      // Coarse grid so ties happen often.
      for (double& v : row) v = static_cast<double>(rng.index(4)) / 4.0;
    }
    const auto got = f2bt_from_scores(scores);
    const auto want = f2bt_oracle_sixths(scores);
    for (int m = 0; m < 3; ++m) {
      const double units = got[m] * 6.0 * scores.size() / 100.0;
      EXPECT_EQ(std::lround(units), want[m]);
      EXPECT_NEAR(units, static_cast<double>(want[m]), 1e-9);
    }
    EXPECT_NEAR(std::accumulate(got.begin(), got.end(), 0.0), 100.0, 1e-9);

    // Permutation equivariance in method order.
    auto rotated = scores;
    for (auto& row : rotated) std::rotate(row.begin(), row.begin() + 1, row.end());
    const auto r = f2bt_from_scores(rotated);
    for (int m = 0; m < 3; ++m) EXPECT_NEAR(r[m], got[(m + 1) % 3], 1e-9);
  }
}

TEST(F2bt, RejectsMisalignedRuns) {
  MethodRun a{"a", {"c0", "c1"}, {torch::zeros({4, 3, 8, 8}), torch::zeros({4, 3, 8, 8})}};
  MethodRun b{"b", {"c1", "c0"}, {torch::zeros({4, 3, 8, 8}), torch::zeros({4, 3, 8, 8})}};
  EXPECT_THROW(f2bt({a, b}, [](const torch::Tensor&) { return 0.0; }), Error);
  const auto r = f2bt({a, a}, [](const torch::Tensor&) { return 1.0; });
  EXPECT_DOUBLE_EQ(r[0], 50.0);
}

TEST(Perceptual, PseudometricProperties) {
  Rng rng(8);
  BoosterConfig bc;
  bc.resolution = 16;
  bc.channel_base = 64;
  bc.channel_max = 8;
  BoosterModel booster(bc, rng);
  torch::NoGradGuard no_grad;
  const auto a = torch::rand({6, 3, 16, 16}) * 2 - 1;
  const auto b = torch::rand({6, 3, 16, 16}) * 2 - 1;
  EXPECT_TRUE(torch::allclose(perceptual_distance(booster, a, a), torch::zeros({6}), 0, 1e-7));
  EXPECT_TRUE(torch::equal(perceptual_distance(booster, a, b), perceptual_distance(booster, b, a)) ||
              torch::allclose(perceptual_distance(booster, a, b), perceptual_distance(booster, b, a), 0, 1e-7));
  EXPECT_TRUE((perceptual_distance(booster, a, b) >= 0).all().item<bool>());
}

TEST(Perceptual, EqualsMeanOfLayerwiseDifferences) {
  Rng rng(9);
  BoosterConfig bc;
  bc.resolution = 16;
  bc.channel_base = 64;
  bc.channel_max = 8;
  BoosterModel booster(bc, rng);
  booster->to(torch::kFloat64);
  torch::NoGradGuard no_grad;
  const auto a = torch::rand({3, 3, 16, 16}, torch::kFloat64) * 2 - 1;
  const auto b = torch::rand({3, 3, 16, 16}, torch::kFloat64) * 2 - 1;
  const auto la = booster->feature_layers(a), lb = booster->feature_layers(b);
  auto expected = torch::zeros({3}, torch::kFloat64);
  for (std::size_t l = 0; l < la.size(); ++l) {
    const auto na = la[l] / (la[l].square().sum(1, true) + 1e-10).sqrt();
    const auto nb = lb[l] / (lb[l].square().sum(1, true) + 1e-10).sqrt();
    expected += (na - nb).square().sum(1).mean({1, 2});
  }
  expected /= static_cast<double>(la.size());
  EXPECT_TRUE(torch::allclose(perceptual_distance(booster, a, b), expected, 1e-10, 1e-12));
}

TEST(Perceptual, HueChangeOutweighsBrightnessJitter) {
  Rng rng(10);
  BoosterConfig bc;
  bc.resolution = 32;
  bc.channel_base = 128;
  bc.channel_max = 16;
  BoosterModel booster(bc, rng);
  std::vector<torch::Tensor> base, rotated, jittered;
  for (int i = 0; i < 500; ++i) {
    auto spec = sample_item(rng, category_at(i % 4));
    base.push_back(to_tensor(render_item(spec, 32)));
    auto r = spec;
    r.hue = std::fmod(spec.hue + 180.0, 360.0);
    rotated.push_back(to_tensor(render_item(r, 32)));
    auto j = spec;
    j.lightness = std::clamp(spec.lightness + (i % 2 ? 0.05 : -0.05), 0.0, 1.0);
    jittered.push_back(to_tensor(render_item(j, 32)));
  }
  torch::NoGradGuard no_grad;
  const auto x = torch::stack(base);
  const double d_rot = perceptual_distance(booster, x, torch::stack(rotated)).mean().item<double>();
  const double d_jit = perceptual_distance(booster, x, torch::stack(jittered)).mean().item<double>();
  EXPECT_GT(d_rot, d_jit);
}

TEST(OracleOutfit, RenderedCompatibleOutfitsScoreHigh) {
  Rng rng(11);
  int compatible = 0;
  for (int i = 0; i < 200; ++i) {
    const auto spec = sample_compatible_outfit(rng);
    std::array<ItemImage, 4> items;
    for (int s = 0; s < 4; ++s) items[s] = render_item(spec.items[s], 64);
    const auto r = oracle_outfit_score(items);
    // Estimation error is at most 5 degrees per item.
    EXPECT_GE(r.score, 1.0 - (oracle_score(spec).spread + 10.0) / 180.0);
    compatible += r.compatible && r.score >= 0.78;
  }
  EXPECT_GE(compatible, 190);
}

TEST(OracleOutfit, ClashingPrimariesScoreZero) {
  Rng rng(12);
  auto spec = sample_random_outfit(rng);
  const std::array<double, 4> hues{0.0, 90.0, 180.0, 270.0};
  std::array<ItemImage, 4> items;
  for (int s = 0; s < 4; ++s) {
    spec.items[s].hue = hues[s];
    spec.items[s].saturation = 1.0;
    spec.items[s].lightness = 0.5;
    items[s] = render_item(spec.items[s], 64);
  }
  EXPECT_DOUBLE_EQ(oracle_outfit_score(items).score, 0.0);
}

TEST(OracleOutfit, CopiedItemScoresOne) {
  Rng rng(13);
  const auto item = to_tensor(render_item(sample_item(rng, Category::upper), 32));
  const auto outfit = torch::stack({item, item, item, item});
  EXPECT_DOUBLE_EQ(oracle_outfit_score(outfit).score, 1.0);
}

TEST(OracleOutfit, BlankItemHandling) {
  Rng rng(14);
  auto outfit = torch::stack({to_tensor(render_item(sample_item(rng, Category::upper), 32)),
                              torch::ones({3, 32, 32}), to_tensor(render_item(sample_item(rng, Category::lower), 32)),
                              to_tensor(render_item(sample_item(rng, Category::shoes), 32))});
  try {
    oracle_outfit_score(outfit);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::blank_image);
    EXPECT_NE(std::string(e.what()).find('1'), std::string::npos);
  }
  bool blank = false;
  EXPECT_EQ(oracle_outfit_score_or_zero(outfit, {}, &blank), 0.0);
  EXPECT_TRUE(blank);
}

TEST(Classifier, LearnsCategoriesAndRoundTrips) {
  fcboost::testing::TempDir dir("classifier");
  DatasetConfig dc;
  dc.root = dir.path().string();
  dc.train_count = 120;
  dc.test_count = 40;
  dc.resolution = 32;
  dc.seed = 9;
  const auto manifest = build_dataset(dc);
  ClassifierConfig cc;
  cc.resolution = 32;
  cc.iterations = 60;
  cc.seed = 2;
  auto classifier = train_classifier(load_split(manifest, Split::train), cc);
  const auto test = load_split(manifest, Split::test);
  const double accuracy = classifier_accuracy(classifier, test);
  EXPECT_GE(accuracy, 0.9);
  save_classifier(classifier, dir.path() / "classifier.fcbk");
  auto loaded = load_classifier(dir.path() / "classifier.fcbk");
  EXPECT_DOUBLE_EQ(classifier_accuracy(loaded, test), accuracy);
  const auto stats = image_stats(loaded, test.images.flatten(0, 1), 37);
  EXPECT_EQ(stats.count, 160);
  EXPECT_EQ(stats.mean.size(), cc.feature_dim);
}
