#include "fcboost/evaluate.hpp"

#include <algorithm>

namespace fcboost {
namespace {

const std::array<std::string, 3> kSettings = {"1", "2", "3"};

}  // namespace

nlohmann::json EvalConfig::to_json() const {
  return {{"cases", cases},
          {"K", K},
          {"diversity_cases", diversity_cases},
          {"diversity_K", diversity_K},
          {"seed", seed}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
  EvalConfig c;
  c.cases = j.value("cases", c.cases);
  c.K = j.value("K", c.K);
  c.diversity_cases = j.value("diversity_cases", c.diversity_cases);
  c.diversity_K = j.value("diversity_K", c.diversity_K);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<EvalCase> make_eval_cases(std::int64_t test_outfits, int count, int K, std::uint64_t seed) {
  if (test_outfits < 1) fail(ErrorCode::config, "evaluation needs test outfits");
  if (count < 1 || K < 1) fail(ErrorCode::config, "evaluation needs at least one case and one code");
  std::vector<EvalCase> cases;
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    EvalCase c;
    c.outfit = i % test_outfits;
    c.n_given = 1 + i % 3;
    c.mask = mask_outfit(c.n_given, rng);
    c.z = nn::normal_tensor(rng, {K, kLatentDim});
    cases.push_back(std::move(c));
  }
  return cases;
}

nlohmann::json to_json(const SettingTable& table) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, value] : table) j[key] = value;
  return j;
}

SettingTable setting_means(const std::vector<double>& values, const std::vector<EvalCase>& cases) {
  if (values.size() != cases.size()) fail(ErrorCode::contract, "one value per case required");
  std::array<double, 3> sum{};
  std::array<int, 3> count{};
  for (std::size_t i = 0; i < values.size(); ++i) {
    sum[static_cast<std::size_t>(cases[i].n_given - 1)] += values[i];
    ++count[static_cast<std::size_t>(cases[i].n_given - 1)];
  }
  SettingTable table;
  double avg = 0.0;
  int settings = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    if (count[s] == 0) continue;
    table[kSettings[s]] = sum[s] / count[s];
    avg += table[kSettings[s]];
    ++settings;
  }
  if (settings) table["Avg."] = avg / settings;
  return table;
}

void for_each_completion(FCBoostModel& model, const OutfitTensors& test, const std::vector<EvalCase>& cases,
                         int rounds, std::int64_t chunk,
                         const std::function<void(std::size_t, const RoundOutputs&)>& visit) {
  torch::NoGradGuard no_grad;
  for (std::size_t start = 0; start < cases.size(); start += static_cast<std::size_t>(chunk)) {
    const std::size_t end = std::min(cases.size(), start + static_cast<std::size_t>(chunk));
    std::vector<std::int64_t> rows;
    std::vector<SlotMask> masks;
    std::vector<torch::Tensor> zs;
    for (std::size_t i = start; i < end; ++i) {
      rows.push_back(cases[i].outfit);
      masks.push_back(cases[i].mask);
      zs.push_back(cases[i].z);
    }
    const auto given = test.images.index_select(0, torch::tensor(rows));
    visit(start, boost_forward(model, given, masks, torch::stack(zs), rounds));
  }
}

SettingTable diversity_eval(FCBoostModel& model, const OutfitTensors& test, const EvalConfig& config, int rounds) {
  if (config.diversity_K < 2) fail(ErrorCode::config, "diversity evaluation needs K >= 2");
  const auto cases = make_eval_cases(test.size(), config.diversity_cases, config.diversity_K,
                                     mix_seed(config.seed, 0xd1));
  std::vector<double> sum(cases.size(), 0.0);
  std::vector<int> count(cases.size(), 0);
  const int r = model.resolution();
  for_each_completion(model, test, cases, rounds, 32, [&](std::size_t start, const RoundOutputs& out) {
    for (Category c : kAllCategories) {
      const auto& rows = out.target_rows[slot(c)];
      if (rows.size(0) == 0) continue;
      const auto items = out.items(rounds, c);
      const auto n = items.size(0), k = items.size(1);
      const auto e = perceptual_embedding(model.booster, items.reshape({n * k, 3, r, r})).view({n, k, -1});
      std::vector<torch::Tensor> pairs;
      for (std::int64_t a = 0; a < k; ++a) {
        for (std::int64_t b = a + 1; b < k; ++b) pairs.push_back((e.select(1, a) - e.select(1, b)).square().sum(1));
      }
      const auto per_row = torch::stack(pairs).mean(0).to(torch::kFloat64);
      for (std::int64_t i = 0; i < n; ++i) {
        const auto idx = start + static_cast<std::size_t>(rows[i].item<std::int64_t>());
        sum[idx] += per_row[i].item<double>();
        ++count[idx];
      }
    }
  });
  std::vector<double> values(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) values[i] = count[i] ? sum[i] / count[i] : 0.0;
  return setting_means(values, cases);
}

nlohmann::json ModelEvaluation::to_json() const {
  nlohmann::json rounds = nlohmann::json::array();
  for (std::size_t t = 0; t < round_mean.size(); ++t) {
    rounds.push_back({{"round", t}, {"mean", round_mean[t]}, {"settings", fcboost::to_json(round_table[t])}});
  }
  nlohmann::json j = {{"oracle_by_round", rounds}, {"blank_outfits", blank_outfits}};
  if (!fid.empty()) j["FID"] = fcboost::to_json(fid);
  return j;
}

ModelEvaluation evaluate_model(FCBoostModel& model, const OutfitTensors& test, const std::vector<EvalCase>& cases,
                               int rounds, ItemClassifier* classifier, const CompatibilityRule& rule) {
  ModelEvaluation result;
  std::vector<std::vector<double>> per_round(static_cast<std::size_t>(rounds + 1),
                                             std::vector<double>(cases.size(), 0.0));
  result.final_scores.assign(cases.size(), 0.0);
  const int r = model.resolution();
  std::vector<FeatureAccumulator> generated;
  if (classifier) {
    for (int s = 0; s < 3; ++s) generated.emplace_back((*classifier)->config().feature_dim);
  }
  for_each_completion(model, test, cases, rounds, 64, [&](std::size_t start, const RoundOutputs& out) {
    for (int t = 0; t <= rounds; ++t) {
      const auto& outfits = out.outfits[static_cast<std::size_t>(t)];
      for (std::int64_t i = 0; i < outfits.size(0); ++i) {
        double sum = 0.0;
        for (std::int64_t k = 0; k < outfits.size(1); ++k) {
          bool blank = false;
          const double score = oracle_outfit_score_or_zero(outfits[i][k], rule, &blank);
          if (blank) ++result.blank_outfits;
          sum += score;
          if (t == rounds && k == 0) result.final_scores[start + static_cast<std::size_t>(i)] = score;
        }
        per_round[static_cast<std::size_t>(t)][start + static_cast<std::size_t>(i)] =
            sum / static_cast<double>(outfits.size(1));
      }
    }
    if (classifier) {
      for (Category c : kAllCategories) {
        const auto& rows = out.target_rows[slot(c)];
        if (rows.size(0) == 0) continue;
        const auto items = out.items(rounds, c).select(1, 0);
        const auto feats = (*classifier)->features(items.reshape({-1, 3, r, r}));
        for (std::int64_t i = 0; i < rows.size(0); ++i) {
          const auto& cs = cases[start + static_cast<std::size_t>(rows[i].item<std::int64_t>())];
          generated[static_cast<std::size_t>(cs.n_given - 1)].add(feats.slice(0, i, i + 1));
        }
      }
    }
  });
  for (const auto& values : per_round) {
    double mean = 0.0;
    for (double v : values) mean += v;
    result.round_mean.push_back(mean / static_cast<double>(values.size()));
    result.round_table.push_back(setting_means(values, cases));
  }
  if (classifier) {
    const auto real = image_stats(*classifier, test.images.flatten(0, 1));
    double avg = 0.0;
    int settings = 0;
    for (int s = 0; s < 3; ++s) {
      if (generated[static_cast<std::size_t>(s)].count() < 2) continue;
      result.fid[kSettings[static_cast<std::size_t>(s)]] = fid(real, generated[static_cast<std::size_t>(s)].stats());
      avg += result.fid[kSettings[static_cast<std::size_t>(s)]];
      ++settings;
    }
    if (settings) result.fid["Avg."] = avg / settings;
  }
  return result;
}

std::map<std::string, SettingTable> f2bt_eval(const std::vector<std::string>& methods,
                                              const std::vector<std::vector<double>>& scores_per_method,
                                              const std::vector<EvalCase>& cases) {
  if (methods.size() != scores_per_method.size() || methods.empty()) {
    fail(ErrorCode::contract, "one score list per method required");
  }
  for (const auto& s : scores_per_method) {
    if (s.size() != cases.size()) fail(ErrorCode::contract, "every method must be scored on every case");
  }
  std::map<std::string, SettingTable> table;
  auto fill = [&](const std::string& key, const std::function<bool(const EvalCase&)>& keep) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      if (!keep(cases[i])) continue;
      std::vector<double> row;
      for (const auto& s : scores_per_method) row.push_back(s[i]);
      rows.push_back(std::move(row));
    }
    if (rows.empty()) return;
    const auto pct = f2bt_from_scores(rows);
    for (std::size_t m = 0; m < methods.size(); ++m) table[methods[m]][key] = pct[m];
  };
  for (int s = 1; s <= 3; ++s) fill(std::to_string(s), [s](const EvalCase& c) { return c.n_given == s; });
  fill("Avg.", [](const EvalCase&) { return true; });
  return table;
}

}  // namespace fcboost
