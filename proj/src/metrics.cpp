#include "fcboost/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "fcboost/checkpoint.hpp"

namespace fcboost {
namespace {

Eigen::MatrixXd to_eigen(const torch::Tensor& t) {
  const auto d = t.detach().to(torch::kFloat64).contiguous();
  Eigen::MatrixXd m(d.size(0), d.size(1));
  const double* src = d.data_ptr<double>();
  for (std::int64_t r = 0; r < d.size(0); ++r) {
    for (std::int64_t c = 0; c < d.size(1); ++c) m(r, c) = src[r * d.size(1) + c];
  }
  return m;
}

// Eigen decomposition of a symmetric matrix with tolerance-checked clipping
// of negative eigenvalues.
Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> checked_eigen(const Eigen::MatrixXd& m, const char* what,
                                                             Eigen::VectorXd& values) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) {
    fail(ErrorCode::numeric, std::string("eigen decomposition of ") + what + " did not converge");
  }
  values = solver.eigenvalues();
  const double largest = values.size() ? values.cwiseAbs().maxCoeff() : 0.0;
  const double tolerance = -1e-6 * std::max(1.0, largest);
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values(i) < tolerance) {
      std::ostringstream msg;
      msg << "matrix square root failed for " << what << ": eigenvalue " << values(i)
          << " is below the clipping tolerance (largest |eigenvalue| " << largest << ")";
      fail(ErrorCode::numeric, msg.str());
    }
    values(i) = std::max(0.0, values(i));
  }
  return solver;
}

std::vector<torch::Tensor> conv_stack(torch::nn::ModuleList& convs, const torch::Tensor& images) {
  std::vector<torch::Tensor> out;
  auto x = images;
  for (const auto& conv : *convs) {
    x = conv->as<nn::EqualConv2dImpl>()->forward(x);
    out.push_back(x);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

torch::Tensor perceptual_embedding_from_layers(const std::vector<torch::Tensor>& layers) {
  if (layers.empty()) fail(ErrorCode::contract, "perceptual embedding needs at least one layer");
  std::vector<torch::Tensor> parts;
  const double num_layers = static_cast<double>(layers.size());
  for (const auto& x : layers) {
    const auto unit = x * torch::rsqrt(x.square().sum(1, /*keepdim=*/true) + 1e-10);
    const double area = static_cast<double>(x.size(2) * x.size(3));
    parts.push_back(unit.flatten(1) / std::sqrt(area * num_layers));
  }
  return torch::cat(parts, 1);
}

torch::Tensor perceptual_embedding(BoosterModel& booster, const torch::Tensor& images) {
  return perceptual_embedding_from_layers(booster->feature_layers(images));
}

torch::Tensor perceptual_distance(BoosterModel& booster, const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) fail(ErrorCode::config, "perceptual distance needs images of the same shape");
  const auto n = a.size(0);
  const auto e = perceptual_embedding(booster, torch::cat({a, b}, 0));
  return (e.slice(0, 0, n) - e.slice(0, n)).square().sum(1);
}

// ---------------------------------------------------------------------------

nlohmann::json FeatureStats::to_json() const {
  return {{"dim", mean.size()}, {"count", count}, {"mean_norm", mean.norm()}, {"trace", covariance.trace()}};
}

FeatureAccumulator::FeatureAccumulator(int dim)
    : dim_(dim), mean_(Eigen::VectorXd::Zero(dim)), m2_(Eigen::MatrixXd::Zero(dim, dim)) {
  if (dim <= 0) fail(ErrorCode::config, "feature dimension must be positive");
}

void FeatureAccumulator::add(const Eigen::MatrixXd& features) {
  if (features.rows() == 0) return;
  if (features.cols() != dim_) fail(ErrorCode::contract, "feature dimension mismatch");
  const auto nb = static_cast<double>(features.rows());
  const Eigen::VectorXd mean_b = features.colwise().sum().transpose() / nb;
  const Eigen::MatrixXd centered = features.rowwise() - mean_b.transpose();
  FeatureAccumulator batch(dim_);
  batch.count_ = features.rows();
  batch.mean_ = mean_b;
  batch.m2_ = centered.transpose() * centered;
  merge(batch);
}

void FeatureAccumulator::add(const torch::Tensor& features) {
  if (features.dim() != 2) fail(ErrorCode::contract, "features must be a [B, D] tensor");
  add(to_eigen(features));
}

void FeatureAccumulator::merge(const FeatureAccumulator& other) {
  if (other.dim_ != dim_) fail(ErrorCode::contract, "feature dimension mismatch");
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  const double na = static_cast<double>(count_);
  const double nb = static_cast<double>(other.count_);
  const double n = na + nb;
  const Eigen::VectorXd delta = other.mean_ - mean_;
  mean_ += delta * (nb / n);
  m2_ += other.m2_ + delta * delta.transpose() * (na * nb / n);
  count_ += other.count_;
}

FeatureStats FeatureAccumulator::stats() const {
  if (count_ < 2) fail(ErrorCode::numeric, "feature statistics need at least two samples");
  FeatureStats s;
  s.mean = mean_;
  const Eigen::MatrixXd cov = m2_ / static_cast<double>(count_ - 1);
  s.covariance = 0.5 * (cov + cov.transpose());
  s.count = count_;
  return s;
}

FeatureStats feature_stats(const Eigen::MatrixXd& features) {
  FeatureAccumulator acc(static_cast<int>(features.cols()));
  acc.add(features);
  return acc.stats();
}

double fid(const FeatureStats& a, const FeatureStats& b) {
  if (a.mean.size() != b.mean.size() || a.covariance.rows() != b.covariance.rows()) {
    fail(ErrorCode::contract, "FID needs statistics of the same dimension");
  }
  Eigen::VectorXd values_a;
  const auto solver_a = checked_eigen(a.covariance, "the first covariance", values_a);
  const Eigen::MatrixXd sqrt_a =
      solver_a.eigenvectors() * values_a.cwiseSqrt().asDiagonal() * solver_a.eigenvectors().transpose();
  Eigen::MatrixXd inner = sqrt_a * b.covariance * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::VectorXd values_inner;
  checked_eigen(inner, "the covariance product", values_inner);
  const double trace_root = values_inner.cwiseSqrt().sum();
  const double value = (a.mean - b.mean).squaredNorm() + a.covariance.trace() + b.covariance.trace() -
                       2.0 * trace_root;
  return std::max(0.0, value);
}

// ---------------------------------------------------------------------------

nlohmann::json ClassifierConfig::to_json() const {
  return {{"resolution", resolution},   {"channel_base", channel_base},
          {"channel_max", channel_max}, {"feature_dim", feature_dim},
          {"iterations", iterations},   {"batch_size", batch_size},
          {"learning_rate", learning_rate}, {"seed", seed}};
}

ClassifierConfig ClassifierConfig::from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.resolution = j.value("resolution", c.resolution);
  c.channel_base = j.value("channel_base", c.channel_base);
  c.channel_max = j.value("channel_max", c.channel_max);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.seed = j.value("seed", c.seed);
  return c;
}

ItemClassifierImpl::ItemClassifierImpl(const ClassifierConfig& config, Rng& rng) : config_(config) {
  nn::log2_exact(config_.resolution);
  const auto ch = [&](int r) { return nn::channels_at(r, config_.channel_base, config_.channel_max); };
  convs_ = register_module("convs", torch::nn::ModuleList());
  convs_->push_back(nn::EqualConv2d(3, ch(config_.resolution), 3, rng));
  for (int r = config_.resolution; r > 4; r /= 2) {
    convs_->push_back(nn::EqualConv2d(ch(r), ch(r / 2), 3, rng, /*stride=*/2));
  }
  fc_ = register_module("fc", nn::EqualLinear(ch(4) * 16, config_.feature_dim, rng, 0.0, 1.0, true));
  out_ = register_module("out", nn::EqualLinear(config_.feature_dim, kNumCategories, rng));
}

torch::Tensor ItemClassifierImpl::features(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(2) != config_.resolution) {
    fail(ErrorCode::config, "classifier input must be [B, 3, R, R] at the classifier resolution");
  }
  return fc_->forward(conv_stack(convs_, images).back().flatten(1));
}

torch::Tensor ItemClassifierImpl::logits(const torch::Tensor& images) { return out_->forward(features(images)); }

ItemClassifier train_classifier(const OutfitTensors& train, const ClassifierConfig& config) {
  nn::configure_runtime();
  if (train.size() < 1) fail(ErrorCode::config, "classifier training needs data");
  Rng rng(mix_seed(config.seed, 0xc1a55));
  ItemClassifier classifier(config, rng);
  torch::optim::Adam opt(classifier->parameters(), torch::optim::AdamOptions(config.learning_rate));
  const auto items = train.images.flatten(0, 1);  // slot-major within each outfit
  const auto n = items.size(0);
  for (int it = 0; it < config.iterations; ++it) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(config.batch_size));
    for (auto& i : idx) i = static_cast<std::int64_t>(rng.index(static_cast<std::uint64_t>(n)));
    const auto index = torch::tensor(idx);
    const auto labels = index.remainder(kNumCategories);
    const auto loss = torch::nn::functional::cross_entropy(classifier->logits(items.index_select(0, index)), labels);
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (!std::isfinite(loss.item<double>())) fail(ErrorCode::divergence, "non-finite classifier loss");
  }
  classifier->eval();
  return classifier;
}

double classifier_accuracy(ItemClassifier& classifier, const OutfitTensors& outfits) {
  torch::NoGradGuard no_grad;
  const auto items = outfits.images.flatten(0, 1);
  const auto labels = torch::arange(items.size(0)).remainder(kNumCategories);
  const auto pred = classifier->logits(items).argmax(1);
  return pred.eq(labels).to(torch::kFloat64).mean().item<double>();
}

void save_classifier(ItemClassifier& classifier, const std::filesystem::path& path) {
  save_checkpoint(module_checkpoint(*classifier, "classifier", {{"config", classifier->config().to_json()}}), path);
}

ItemClassifier load_classifier(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  if (ckpt.kind != "classifier") fail(ErrorCode::incompatible_checkpoint, "'" + path.string() + "' is not a classifier");
  Rng rng(0);
  ItemClassifier classifier(ClassifierConfig::from_json(ckpt.metadata.at("config")), rng);
  load_module_state(*classifier, ckpt);
  classifier->eval();
  return classifier;
}

FeatureStats image_stats(ItemClassifier& classifier, const torch::Tensor& images, std::int64_t chunk) {
  torch::NoGradGuard no_grad;
  FeatureAccumulator acc(classifier->config().feature_dim);
  for (std::int64_t start = 0; start < images.size(0); start += chunk) {
    acc.add(classifier->features(images.slice(0, start, std::min(images.size(0), start + chunk))));
  }
  return acc.stats();
}

// ---------------------------------------------------------------------------

OracleResult oracle_outfit_score(const std::array<ItemImage, kNumCategories>& items, const CompatibilityRule& rule) {
  std::array<double, kNumCategories> hues{};
  std::array<double, kNumCategories> light{};
  for (int s = 0; s < kNumCategories; ++s) {
    try {
      const auto est = estimate_spec(items[s], category_at(s));
      hues[s] = est.hue;
      light[s] = est.lightness;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::blank_image) throw;
      fail(ErrorCode::blank_image, "item " + std::to_string(s) + " (" + std::string(category_name(category_at(s))) +
                                       "): " + e.what());
    }
  }
  return oracle_score(hues, light, rule);
}

OracleResult oracle_outfit_score(const torch::Tensor& outfit, const CompatibilityRule& rule) {
  if (outfit.dim() != 4 || outfit.size(0) != kNumCategories || outfit.size(1) != 3) {
    fail(ErrorCode::contract, "an outfit must be a [4, 3, R, R] tensor");
  }
  std::array<ItemImage, kNumCategories> items;
  for (int s = 0; s < kNumCategories; ++s) items[s] = from_tensor(outfit[s]);
  return oracle_outfit_score(items, rule);
}

double oracle_outfit_score_or_zero(const torch::Tensor& outfit, const CompatibilityRule& rule, bool* blank) {
  if (blank) *blank = false;
  try {
    return oracle_outfit_score(outfit, rule).score;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::blank_image) throw;
    if (blank) *blank = true;
    return 0.0;
  }
}

std::vector<double> f2bt_from_scores(const std::vector<std::vector<double>>& scores) {
  if (scores.empty()) fail(ErrorCode::contract, "F2BT needs at least one test case");
  const std::size_t methods = scores.front().size();
  if (methods == 0) fail(ErrorCode::contract, "F2BT needs at least one method");
  std::vector<double> wins(methods, 0.0);
  for (const auto& row : scores) {
    if (row.size() != methods) fail(ErrorCode::contract, "every test case must score every method");
    const double best = *std::max_element(row.begin(), row.end());
    const auto tied = static_cast<double>(std::count(row.begin(), row.end(), best));
    for (std::size_t m = 0; m < methods; ++m) {
      if (row[m] == best) wins[m] += 1.0 / tied;
    }
  }
  for (double& w : wins) w *= 100.0 / static_cast<double>(scores.size());
  return wins;
}

std::vector<double> f2bt(const std::vector<MethodRun>& runs, const OutfitScorer& scorer) {
  if (runs.empty()) fail(ErrorCode::contract, "F2BT needs at least one method");
  const auto& reference = runs.front();
  for (const auto& run : runs) {
    if (run.case_ids != reference.case_ids || run.outfits.size() != reference.case_ids.size()) {
      fail(ErrorCode::contract, "method '" + run.name + "' is not aligned with the other test cases");
    }
  }
  std::vector<std::vector<double>> scores(reference.case_ids.size(), std::vector<double>(runs.size()));
  for (std::size_t c = 0; c < reference.case_ids.size(); ++c) {
    for (std::size_t m = 0; m < runs.size(); ++m) scores[c][m] = scorer(runs[m].outfits[c]);
  }
  return f2bt_from_scores(scores);
}

}  // namespace fcboost
