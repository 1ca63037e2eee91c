#include "fcboost/boost_train.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "fcboost/checkpoint.hpp"
#include "fcboost/metrics.hpp"

namespace fcboost {
namespace {

const std::vector<std::string> kConfigKeys = {
    "K",           "T",          "alpha",           "lambda_div",    "lambda_fcb",
    "learning_rate", "beta1",    "beta2",           "batch_size",    "iterations",
    "resolution",  "seed",       "log_interval",    "checkpoint_interval", "probe_interval",
    "probe_size",  "pool_capacity", "pool_probability", "encoder"};

torch::Tensor squared_distance(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).square().flatten(1).sum(1);
}

std::string cat_prefix(const char* group, int c) {
  return std::string(group) + "." + std::string(category_name(category_at(c))) + ".";
}

void save_adam(const torch::optim::Adam& opt, const std::string& prefix, Checkpoint& ckpt, nlohmann::json& steps) {
  steps = nlohmann::json::array();
  const auto& params = opt.param_groups().at(0).params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto it = opt.state().find(params[i].unsafeGetTensorImpl());
    if (it == opt.state().end()) {
      steps.push_back(-1);
      continue;
    }
    const auto& st = static_cast<const torch::optim::AdamParamState&>(*it->second);
    steps.push_back(st.step());
    ckpt.tensors.emplace_back(prefix + std::to_string(i) + ".exp_avg", st.exp_avg().clone());
    ckpt.tensors.emplace_back(prefix + std::to_string(i) + ".exp_avg_sq", st.exp_avg_sq().clone());
  }
}

void load_adam(torch::optim::Adam& opt, const std::string& prefix, const Checkpoint& ckpt, const nlohmann::json& steps) {
  const auto& params = opt.param_groups().at(0).params();
  if (steps.size() != params.size()) {
    fail(ErrorCode::incompatible_checkpoint, "optimizer state does not match the parameter list");
  }
  opt.state().clear();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto step = steps[i].get<std::int64_t>();
    if (step < 0) continue;
    auto st = std::make_unique<torch::optim::AdamParamState>();
    st->step(step);
    st->exp_avg(ckpt.tensor(prefix + std::to_string(i) + ".exp_avg").clone());
    st->exp_avg_sq(ckpt.tensor(prefix + std::to_string(i) + ".exp_avg_sq").clone());
    opt.state()[params[i].unsafeGetTensorImpl()] = std::move(st);
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (K < 2) fail(ErrorCode::config, "K must be at least 2 (the diversity objective needs code pairs)");
  if (T < 1) fail(ErrorCode::config, "T must be at least 1");
  if (alpha < 0.0) fail(ErrorCode::config, "alpha must be non-negative");
  if (lambda_div < 0.0 || lambda_fcb < 0.0) fail(ErrorCode::config, "loss weights must be non-negative");
  if (!(learning_rate > 0.0)) fail(ErrorCode::config, "learning_rate must be positive");
  if (batch_size < 1 || iterations < 0) fail(ErrorCode::config, "batch_size and iterations must be positive");
  if (!is_supported_resolution(resolution)) fail(ErrorCode::config, "resolution must be 32 or 64");
  if (log_interval < 1 || checkpoint_interval < 1 || probe_interval < 1) {
    fail(ErrorCode::config, "intervals must be positive");
  }
  if (probe_size < 1 || pool_capacity < 1) fail(ErrorCode::config, "probe_size and pool_capacity must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"K", K},
          {"T", T},
          {"alpha", alpha},
          {"lambda_div", lambda_div},
          {"lambda_fcb", lambda_fcb},
          {"learning_rate", learning_rate},
          {"beta1", beta1},
          {"beta2", beta2},
          {"batch_size", batch_size},
          {"iterations", iterations},
          {"resolution", resolution},
          {"seed", seed},
          {"log_interval", log_interval},
          {"checkpoint_interval", checkpoint_interval},
          {"probe_interval", probe_interval},
          {"probe_size", probe_size},
          {"pool_capacity", pool_capacity},
          {"pool_probability", pool_probability},
          {"encoder", encoder.to_json()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::config, "training config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(kConfigKeys.begin(), kConfigKeys.end(), key) == kConfigKeys.end()) {
      fail(ErrorCode::config, "unknown training config key '" + key + "'");
    }
  }
  TrainConfig c;
  try {
    c.K = j.value("K", c.K);
    c.T = j.value("T", c.T);
    c.alpha = j.value("alpha", c.alpha);
    c.lambda_div = j.value("lambda_div", c.lambda_div);
    c.lambda_fcb = j.value("lambda_fcb", c.lambda_fcb);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.iterations = j.value("iterations", c.iterations);
    c.resolution = j.value("resolution", c.resolution);
    c.seed = j.value("seed", c.seed);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.probe_interval = j.value("probe_interval", c.probe_interval);
    c.probe_size = j.value("probe_size", c.probe_size);
    c.pool_capacity = j.value("pool_capacity", c.pool_capacity);
    c.pool_probability = j.value("pool_probability", c.pool_probability);
    if (j.contains("encoder")) c.encoder = EncoderConfig::from_json(j.at("encoder"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::config, std::string("malformed training config: ") + e.what());
  }
  c.encoder.resolution = c.resolution;
  return c;
}

std::string TrainConfig::hash() const {
  auto j = to_json();
  for (const char* key : {"iterations", "log_interval", "checkpoint_interval", "probe_interval"}) j.erase(key);
  return sha256_hex(j.dump());
}

SlotMask mask_outfit(int n_given, Rng& rng) {
  if (n_given < 1 || n_given > kNumCategories - 1) {
    fail(ErrorCode::domain, "n_given must lie in {1, 2, 3}, got " + std::to_string(n_given));
  }
  std::array<int, kNumCategories> order = {0, 1, 2, 3};
  for (int i = kNumCategories - 1; i > 0; --i) {
    std::swap(order[i], order[rng.index(static_cast<std::uint64_t>(i + 1))]);
  }
  SlotMask mask{};
  for (int i = 0; i < n_given; ++i) mask[order[i]] = true;
  return mask;
}

// ---------------------------------------------------------------------------

int FCBoostModel::resolution() const {
  if (generators.empty()) fail(ErrorCode::contract, "model has no generators");
  return generators.front()->config().resolution;
}

FCBoostModel load_frozen_model(const std::filesystem::path& checkpoint_dir) {
  nn::configure_runtime();
  std::vector<std::string> missing;
  for (Category c : kAllCategories) {
    for (const char* network : {"mapping", "synthesis"}) {
      const auto path = generator_file(checkpoint_dir, c, network);
      if (!std::filesystem::exists(path)) {
        missing.push_back("generator '" + std::string(category_name(c)) + "' (" + path.string() +
                          "; run `fcboost pretrain-gan`)");
        break;
      }
    }
  }
  if (!std::filesystem::exists(booster_file(checkpoint_dir))) {
    missing.push_back("booster (" + booster_file(checkpoint_dir).string() + "; run `fcboost pretrain-booster`)");
  }
  if (!missing.empty()) {
    std::string msg = "missing pre-trained artifacts: ";
    for (std::size_t i = 0; i < missing.size(); ++i) msg += (i ? ", " : "") + missing[i];
    fail(ErrorCode::missing_artifact, msg);
  }
  FCBoostModel model;
  for (Category c : kAllCategories) {
    auto gen = load_generator(checkpoint_dir, c);
    gen->freeze();
    model.generators.push_back(gen);
  }
  model.booster = load_booster(checkpoint_dir);
  model.booster->freeze();
  for (const auto& gen : model.generators) {
    if (gen->config().resolution != model.booster->config().resolution) {
      fail(ErrorCode::incompatible_checkpoint, "generator and booster resolutions differ");
    }
  }
  return model;
}

void init_encoders(FCBoostModel& model, const EncoderConfig& config, std::uint64_t seed) {
  EncoderConfig cfg = config;
  cfg.resolution = model.resolution();
  model.encoders.clear();
  for (Category c : kAllCategories) {
    Rng rng(mix_seed(seed, 0xe4c0de00ULL + static_cast<std::uint64_t>(slot(c))));
    OutfitEncoder enc(c, cfg, rng);
    torch::NoGradGuard no_grad;
    enc->w_avg.copy_(model.generators[slot(c)]->mapping->w_avg);
    model.encoders.push_back(enc);
  }
}

std::filesystem::path encoder_file(const std::filesystem::path& dir, Category c) {
  return dir / ("encoder_" + std::string(category_name(c)) + ".fcbk");
}

void save_encoders(FCBoostModel& model, const std::filesystem::path& dir, const nlohmann::json& metadata) {
  for (auto& enc : model.encoders) save_encoder(enc, encoder_file(dir, enc->category()), metadata);
}

void load_encoders(FCBoostModel& model, const std::filesystem::path& dir) {
  model.encoders.clear();
  for (Category c : kAllCategories) {
    const auto path = encoder_file(dir, c);
    if (!std::filesystem::exists(path)) {
      fail(ErrorCode::missing_artifact, "trained encoder for '" + std::string(category_name(c)) + "' not found at '" +
                                            path.string() + "'; run `fcboost train` first");
    }
    auto enc = load_encoder(path);
    if (enc->config().resolution != model.resolution()) {
      fail(ErrorCode::incompatible_checkpoint, "encoder resolution does not match the generators");
    }
    enc->eval();
    model.encoders.push_back(enc);
  }
}

// ---------------------------------------------------------------------------

torch::Tensor RoundOutputs::items(int t, Category c) const {
  const auto& rows = target_rows[slot(c)];
  return outfits.at(static_cast<std::size_t>(t)).index_select(0, rows).select(2, slot(c));
}

RoundOutputs boost_forward(FCBoostModel& model, const torch::Tensor& given, const std::vector<SlotMask>& masks,
                           const torch::Tensor& z, int rounds) {
  const int r = model.resolution();
  if (given.dim() != 5 || given.size(1) != kNumCategories || given.size(2) != 3 || given.size(3) != r ||
      given.size(4) != r) {
    fail(ErrorCode::contract, "given outfits must be [M, 4, 3, R, R] at the model resolution");
  }
  const auto m = given.size(0);
  if (z.dim() != 3 || z.size(0) != m || z.size(2) != kLatentDim) {
    fail(ErrorCode::contract, "latent codes must be [M, K, 512]");
  }
  if (static_cast<std::int64_t>(masks.size()) != m) fail(ErrorCode::contract, "one slot mask per sample required");
  if (rounds < 0) fail(ErrorCode::contract, "rounds must be non-negative");
  if (rounds > 0 && model.encoders.size() != kNumCategories) fail(ErrorCode::contract, "model has no encoders");
  const auto k = z.size(1);

  RoundOutputs out;
  for (int c = 0; c < kNumCategories; ++c) {
    std::vector<std::int64_t> rows;
    for (std::int64_t i = 0; i < m; ++i) {
      if (!masks[static_cast<std::size_t>(i)][c]) rows.push_back(i);
    }
    out.target_rows[c] = torch::tensor(rows, torch::kInt64);
  }
  const auto base = given.unsqueeze(1).expand({m, k, kNumCategories, 3, r, r});

  auto assemble = [&](const std::array<torch::Tensor, kNumCategories>& images) {
    std::vector<torch::Tensor> slots;
    for (int c = 0; c < kNumCategories; ++c) {
      auto s = base.select(2, c);
      if (images[c].defined()) s = s.index_copy(0, out.target_rows[c], images[c]);
      slots.push_back(s);
    }
    return torch::stack(slots, 2);
  };

  for (int t = 0; t <= rounds; ++t) {
    std::array<torch::Tensor, kNumCategories> images;
    std::array<torch::Tensor, kNumCategories> codes;
    const torch::Tensor prev = t > 0 ? out.outfits.back().detach() : torch::Tensor();
    for (int c = 0; c < kNumCategories; ++c) {
      const auto& rows = out.target_rows[c];
      const auto n = rows.size(0);
      if (n == 0) continue;
      auto& gen = model.generators[static_cast<std::size_t>(c)];
      torch::Tensor w;
      if (t == 0) {
        w = map_latent(gen, z.index_select(0, rows).reshape({n * k, kLatentDim}));
      } else {
        const auto stack = prev.index_select(0, rows).reshape({n * k, kOutfitChannels, r, r});
        w = encode(model.encoders[static_cast<std::size_t>(c)], stack);
      }
      codes[c] = w;
      images[c] = synthesize(gen, w).view({n, k, 3, r, r});
    }
    out.outfits.push_back(assemble(images));
    out.codes.push_back(codes);
  }
  return out;
}

torch::Tensor diversity_loss(const std::vector<torch::Tensor>& items, const DistanceFn& d) {
  std::vector<torch::Tensor> per_category;
  for (const auto& x : items) {
    if (!x.defined() || x.numel() == 0) continue;
    if (x.dim() < 2 || x.size(1) < 2) fail(ErrorCode::contract, "diversity loss needs K >= 2 codes");
    std::vector<torch::Tensor> pairs;
    for (std::int64_t a = 0; a < x.size(1); ++a) {
      for (std::int64_t b = a + 1; b < x.size(1); ++b) pairs.push_back(d(x.select(1, a), x.select(1, b)));
    }
    per_category.push_back(torch::stack(pairs).mean());
  }
  if (per_category.empty()) return torch::zeros({});
  return -torch::stack(per_category).mean();
}

torch::Tensor total_loss(const std::vector<RoundLosses>& rounds, const TrainConfig& config) {
  if (rounds.empty()) fail(ErrorCode::contract, "total loss needs at least one round");
  std::vector<torch::Tensor> totals;
  for (const auto& r : rounds) totals.push_back(r.adv + config.lambda_div * r.div + config.lambda_fcb * r.fcb);
  return torch::stack(totals).mean();
}

nlohmann::json StepMetrics::to_json() const {
  nlohmann::json j = {{"iteration", iteration}, {"L_dis", d_loss}, {"L_adv", adv},
                      {"L_div", div},           {"L_fcb", fcb},    {"L_total", total}};
  if (!probe_scores.empty()) j["oracle"] = probe_scores;
  return j;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, FCBoostModel model, OutfitTensors train)
    : config_(std::move(config)),
      model_(std::move(model)),
      train_(std::move(train)),
      data_rng_(mix_seed(config_.seed, 1)),
      pool_rng_(mix_seed(config_.seed, 2)) {
  config_.validate();
  nn::configure_runtime();
  if (model_.encoders.size() != kNumCategories) fail(ErrorCode::contract, "trainer needs initialized encoders");
  if (model_.resolution() != config_.resolution || train_.resolution() != config_.resolution) {
    fail(ErrorCode::config, "training resolution does not match the pre-trained models or the dataset");
  }
  if (train_.size() < 1) fail(ErrorCode::config, "empty training split");
  Rng disc_rng(mix_seed(config_.seed, 3));
  std::vector<torch::Tensor> g_params, d_params;
  for (Category c : kAllCategories) {
    discriminators_.emplace_back(c, disc_rng);
    for (auto& p : discriminators_.back()->parameters()) d_params.push_back(p);
    for (auto& p : model_.encoders[slot(c)]->parameters()) g_params.push_back(p);
    model_.encoders[slot(c)]->train();
    real_pools_.emplace_back(static_cast<std::size_t>(config_.pool_capacity), config_.pool_probability);
    fake_pools_.emplace_back(static_cast<std::size_t>(config_.pool_capacity), config_.pool_probability);
  }
  const auto options = torch::optim::AdamOptions(config_.learning_rate)
                           .betas({config_.beta1, config_.beta2})
                           .eps(1e-8);
  opt_g_ = std::make_unique<torch::optim::Adam>(g_params, options);
  opt_d_ = std::make_unique<torch::optim::Adam>(d_params, options);
}

void Trainer::check_finite(const char* component, double value) const {
  if (std::isfinite(value)) return;
  nlohmann::json norms = nlohmann::json::object();
  for (Category c : kAllCategories) {
    double enc = 0.0, disc = 0.0;
    for (const auto& p : model_.encoders[slot(c)]->parameters()) enc += p.detach().square().sum().item<double>();
    for (const auto& p : discriminators_[slot(c)]->parameters()) disc += p.detach().square().sum().item<double>();
    norms[std::string("encoder.") + std::string(category_name(c))] = std::sqrt(enc);
    norms[std::string("disc.") + std::string(category_name(c))] = std::sqrt(disc);
  }
  const nlohmann::json dump = {{"iteration", iteration_ + 1},
                               {"component", component},
                               {"value", std::isnan(value) ? "nan" : (value > 0 ? "inf" : "-inf")},
                               {"parameter_norms", norms}};
  if (!dump_dir_.empty()) write_json_file(dump, dump_dir_ / "nan_dump.json");
  fail(ErrorCode::divergence, "non-finite " + std::string(component) + " at iteration " +
                                  std::to_string(iteration_ + 1) + ": " + dump.dump());
}

StepMetrics Trainer::step() {
  const auto m = static_cast<std::int64_t>(config_.batch_size);
  const auto k = static_cast<std::int64_t>(config_.K);
  const int r = config_.resolution;

  std::vector<std::int64_t> idx(static_cast<std::size_t>(m));
  std::vector<SlotMask> masks;
  for (auto& i : idx) {
    i = static_cast<std::int64_t>(data_rng_.index(static_cast<std::uint64_t>(train_.size())));
    const int n_given = 1 + static_cast<int>(data_rng_.index(3));
    masks.push_back(mask_outfit(n_given, data_rng_));
  }
  const auto given = train_.images.index_select(0, torch::tensor(idx));
  const auto z = nn::normal_tensor(data_rng_, {m, k, kLatentDim});

  for (auto& d : discriminators_) nn::set_requires_grad(*d, false);
  const auto out = boost_forward(model_, given, masks, z, config_.T);

  // Discriminator update on pooled, detached codes.
  StepMetrics metrics;
  {
    for (auto& d : discriminators_) nn::set_requires_grad(*d, true);
    std::vector<torch::Tensor> losses;
    for (int c = 0; c < kNumCategories; ++c) {
      std::vector<torch::Tensor> fakes;
      for (int t = 1; t <= config_.T; ++t) {
        if (out.codes[static_cast<std::size_t>(t)][c].defined()) fakes.push_back(out.codes[t][c].detach());
      }
      if (fakes.empty()) continue;
      const auto fake = torch::cat(fakes, 0);
      torch::Tensor real;
      {
        torch::NoGradGuard no_grad;
        real = map_latent(model_.generators[static_cast<std::size_t>(c)],
                          nn::normal_tensor(data_rng_, {fake.size(0), kLatentDim}));
      }
      const auto real_pooled = real_pools_[static_cast<std::size_t>(c)].query(real, pool_rng_);
      const auto fake_pooled = fake_pools_[static_cast<std::size_t>(c)].query(fake, pool_rng_);
      losses.push_back(disc_loss(discriminators_[static_cast<std::size_t>(c)], real_pooled, fake_pooled));
    }
    const auto d_loss = torch::stack(losses).mean();
    metrics.d_loss = d_loss.item<double>();
    check_finite("L_dis", metrics.d_loss);
    opt_d_->zero_grad();
    d_loss.backward();
    opt_d_->step();
    for (auto& d : discriminators_) nn::set_requires_grad(*d, false);
  }

  // Encoder update.
  auto& booster = model_.booster;
  const auto flat_features = [&](const std::vector<torch::Tensor>& layers) {
    return booster->head(layers.back()).view({m * k, kNumCategories, -1});
  };
  torch::Tensor prev_features;
  {
    torch::NoGradGuard no_grad;
    prev_features = flat_features(booster->feature_layers(out.outfits[0].reshape({-1, 3, r, r})));
  }
  std::vector<RoundLosses> round_losses;
  for (int t = 1; t <= config_.T; ++t) {
    RoundLosses rl;
    std::vector<torch::Tensor> adv;
    for (int c = 0; c < kNumCategories; ++c) {
      const auto& codes = out.codes[static_cast<std::size_t>(t)][c];
      if (codes.defined()) adv.push_back(adv_loss(discriminators_[static_cast<std::size_t>(c)], codes));
    }
    rl.adv = torch::stack(adv).mean();

    const auto layers = booster->feature_layers(out.outfits[static_cast<std::size_t>(t)].reshape({-1, 3, r, r}));
    const auto features = flat_features(layers);
    rl.fcb = fcb_loss_from_features(booster, features, prev_features, config_.alpha);
    prev_features = features.detach();

    const auto embedding = perceptual_embedding_from_layers(layers).view({m, k, kNumCategories, -1});
    std::vector<torch::Tensor> items;
    for (int c = 0; c < kNumCategories; ++c) {
      const auto& rows = out.target_rows[c];
      items.push_back(rows.size(0) ? embedding.index_select(0, rows).select(2, c) : torch::Tensor());
    }
    rl.div = diversity_loss(items, squared_distance);
    round_losses.push_back(rl);
  }
  const auto total = total_loss(round_losses, config_);

  std::vector<double> adv_v, div_v, fcb_v;
  for (const auto& rl : round_losses) {
    adv_v.push_back(rl.adv.item<double>());
    div_v.push_back(rl.div.item<double>());
    fcb_v.push_back(rl.fcb.item<double>());
  }
  metrics.adv = mean_of(adv_v);
  metrics.div = mean_of(div_v);
  metrics.fcb = mean_of(fcb_v);
  metrics.total = total.item<double>();
  check_finite("L_adv", metrics.adv);
  check_finite("L_div", metrics.div);
  check_finite("L_fcb", metrics.fcb);
  check_finite("L_total", metrics.total);

  opt_g_->zero_grad();
  total.backward();
  opt_g_->step();

  metrics.iteration = ++iteration_;
  return metrics;
}

void Trainer::save_state(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.kind = "train_state";
  for (int c = 0; c < kNumCategories; ++c) {
    for (auto& [name, t] : nn::named_state(*model_.encoders[static_cast<std::size_t>(c)])) {
      ckpt.tensors.emplace_back(cat_prefix("encoder", c) + name, t.detach().clone());
    }
    for (auto& [name, t] : nn::named_state(*discriminators_[static_cast<std::size_t>(c)])) {
      ckpt.tensors.emplace_back(cat_prefix("disc", c) + name, t.detach().clone());
    }
    const auto real = real_pools_[static_cast<std::size_t>(c)].snapshot();
    const auto fake = fake_pools_[static_cast<std::size_t>(c)].snapshot();
    if (real.numel()) ckpt.tensors.emplace_back(cat_prefix("pool_real", c) + "codes", real);
    if (fake.numel()) ckpt.tensors.emplace_back(cat_prefix("pool_fake", c) + "codes", fake);
  }
  nlohmann::json steps_g, steps_d;
  save_adam(*opt_g_, "adam_g.", ckpt, steps_g);
  save_adam(*opt_d_, "adam_d.", ckpt, steps_d);
  ckpt.metadata = {{"iteration", iteration_},
                   {"config_hash", config_.hash()},
                   {"resolution", config_.resolution},
                   {"config", config_.to_json()},
                   {"rng_data", data_rng_.serialize()},
                   {"rng_pool", pool_rng_.serialize()},
                   {"adam_g_steps", steps_g},
                   {"adam_d_steps", steps_d}};
  save_checkpoint(ckpt, path);
}

void Trainer::load_state(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  if (ckpt.kind != "train_state") {
    fail(ErrorCode::incompatible_checkpoint, "'" + path.string() + "' is not a training state");
  }
  if (ckpt.metadata.at("resolution").get<int>() != config_.resolution) {
    fail(ErrorCode::incompatible_checkpoint, "training state '" + path.string() + "' was written at resolution " +
                                                 std::to_string(ckpt.metadata.at("resolution").get<int>()));
  }
  if (ckpt.metadata.at("config_hash").get<std::string>() != config_.hash()) {
    fail(ErrorCode::incompatible_checkpoint,
         "training state '" + path.string() + "' was written under a different config (hash mismatch)");
  }
  for (int c = 0; c < kNumCategories; ++c) {
    load_module_state(*model_.encoders[static_cast<std::size_t>(c)], ckpt, cat_prefix("encoder", c));
    load_module_state(*discriminators_[static_cast<std::size_t>(c)], ckpt, cat_prefix("disc", c));
    const auto real_name = cat_prefix("pool_real", c) + "codes";
    const auto fake_name = cat_prefix("pool_fake", c) + "codes";
    real_pools_[static_cast<std::size_t>(c)].restore(ckpt.has_tensor(real_name) ? ckpt.tensor(real_name) : torch::Tensor());
    fake_pools_[static_cast<std::size_t>(c)].restore(ckpt.has_tensor(fake_name) ? ckpt.tensor(fake_name) : torch::Tensor());
  }
  load_adam(*opt_g_, "adam_g.", ckpt, ckpt.metadata.at("adam_g_steps"));
  load_adam(*opt_d_, "adam_d.", ckpt, ckpt.metadata.at("adam_d_steps"));
  data_rng_ = Rng::deserialize(ckpt.metadata.at("rng_data").get<std::string>());
  pool_rng_ = Rng::deserialize(ckpt.metadata.at("rng_pool").get<std::string>());
  iteration_ = ckpt.metadata.at("iteration").get<int>();
}

// ---------------------------------------------------------------------------

ProbeSet make_probe_set(const OutfitTensors& outfits, int size, int K, std::uint64_t seed) {
  if (outfits.size() < 1) fail(ErrorCode::config, "probe set needs at least one outfit");
  const auto n = std::min<std::int64_t>(size, outfits.size());
  Rng rng(seed);
  ProbeSet probe;
  probe.given = outfits.images.slice(0, 0, n);
  for (std::int64_t i = 0; i < n; ++i) {
    const int n_given = 1 + static_cast<int>(rng.index(3));
    probe.masks.push_back(mask_outfit(n_given, rng));
  }
  probe.z = nn::normal_tensor(rng, {n, K, kLatentDim});
  return probe;
}

std::vector<double> probe_scores(FCBoostModel& model, const ProbeSet& probe, int rounds, const CompatibilityRule& rule) {
  torch::NoGradGuard no_grad;
  const auto out = boost_forward(model, probe.given, probe.masks, probe.z, rounds);
  std::vector<double> scores;
  for (const auto& outfits : out.outfits) {
    double sum = 0.0;
    const auto flat = outfits.flatten(0, 1);
    for (std::int64_t i = 0; i < flat.size(0); ++i) sum += oracle_outfit_score_or_zero(flat[i], rule);
    scores.push_back(sum / static_cast<double>(flat.size(0)));
  }
  return scores;
}

std::filesystem::path state_file(const std::filesystem::path& run_dir, int iteration) {
  std::ostringstream name;
  name << "state_" << std::setw(6) << std::setfill('0') << iteration << ".fcbk";
  return run_dir / name.str();
}

std::optional<std::filesystem::path> latest_state(const std::filesystem::path& run_dir) {
  std::optional<std::filesystem::path> best;
  if (!std::filesystem::is_directory(run_dir)) return best;
  for (const auto& entry : std::filesystem::directory_iterator(run_dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("state_", 0) == 0 && entry.path().extension() == ".fcbk") {
      if (!best || name > best->filename().string()) best = entry.path();
    }
  }
  return best;
}

namespace {

int state_iteration(const std::filesystem::path& path) {
  return read_checkpoint_header(path).at("iteration").get<int>();
}

// Drops metric lines written after `iteration` (they are replayed on resume).
void truncate_metrics(const std::filesystem::path& path, int iteration) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (nlohmann::json::parse(line).at("iteration").get<int>() <= iteration) keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

void train(const TrainConfig& config, const TrainPaths& paths, const std::function<void(const StepMetrics&)>& on_log) {
  config.validate();
  nn::configure_runtime();
  if (!std::filesystem::exists(paths.dataset / "manifest.json")) {
    fail(ErrorCode::missing_artifact, "dataset manifest not found in '" + paths.dataset.string() +
                                          "'; run `fcboost dataset` first");
  }
  const auto manifest = load_manifest(paths.dataset);
  if (manifest.resolution != config.resolution) {
    fail(ErrorCode::config, "dataset resolution " + std::to_string(manifest.resolution) +
                                " does not match the training resolution " + std::to_string(config.resolution));
  }
  FCBoostModel model = load_frozen_model(paths.checkpoints);
  init_encoders(model, config.encoder, config.seed);
  const auto train_set = load_split(manifest, Split::train);
  const auto probe_set = load_split(manifest, Split::test, config.probe_size);
  const auto probe = make_probe_set(probe_set, config.probe_size, config.K, mix_seed(config.seed, 4));

  std::filesystem::create_directories(paths.run);
  Trainer trainer(config, model, train_set);
  trainer.set_dump_dir(paths.run);

  std::optional<std::filesystem::path> resume;
  for (const auto& entry : std::filesystem::directory_iterator(paths.run)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("state_", 0) != 0 || entry.path().extension() != ".fcbk") continue;
    if (state_iteration(entry.path()) > config.iterations) continue;
    if (!resume || name > resume->filename().string()) resume = entry.path();
  }
  const auto metrics_path = paths.run / "metrics.jsonl";
  if (resume) {
    trainer.load_state(*resume);
  } else if (std::filesystem::exists(metrics_path)) {
    std::filesystem::remove(metrics_path);
  }
  truncate_metrics(metrics_path, trainer.iteration());
  nlohmann::json run_info = {{"config", config.to_json()}, {"config_hash", config.hash()}};
  write_json_file(run_info, paths.run / "config.json");

  std::ofstream log(metrics_path, std::ios::app);
  while (trainer.iteration() < config.iterations) {
    auto m = trainer.step();
    if (m.iteration % config.probe_interval == 0) m.probe_scores = probe_scores(trainer.model(), probe, config.T);
    if (m.iteration % config.log_interval == 0) {
      log << m.to_json().dump() << '\n';
      log.flush();
      if (on_log) on_log(m);
    }
    if (m.iteration % config.checkpoint_interval == 0 || m.iteration == config.iterations) {
      trainer.save_state(state_file(paths.run, m.iteration));
    }
  }
  nlohmann::json meta = {{"config_hash", config.hash()},
                         {"iteration", trainer.iteration()},
                         {"lambda_div", config.lambda_div},
                         {"lambda_fcb", config.lambda_fcb},
                         {"K", config.K},
                         {"T", config.T}};
  save_encoders(trainer.model(), paths.run, meta);
}

}  // namespace fcboost
