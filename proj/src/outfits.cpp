#include "fcboost/outfits.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace fcboost {
namespace {

struct Point {
  double x, y;
};
using Polygon = std::vector<Point>;

// Even-odd rule.
bool inside(const Polygon& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Point& a = poly[i];
    const Point& b = poly[j];
    if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

Polygon mirror(const Polygon& poly, double cx) {
  Polygon out;
  out.reserve(poly.size());
  for (const Point& p : poly) out.push_back({2.0 * cx - p.x, p.y});
  return out;
}

// Silhouettes live in canvas units ([0,1]^2, y down). The item spans 80% of
// the canvas along its major axis and is centered.
std::vector<Polygon> silhouette(const ItemSpec& spec) {
  const double a = spec.shape[0];
  const double b = spec.shape[1];
  const double c = spec.shape[2];
  constexpr double cx = 0.5;
  constexpr double y0 = 0.1;
  constexpr double y1 = 0.9;
  std::vector<Polygon> parts;
  switch (spec.category) {
    case Category::upper: {
      const double hs = 0.15 + 0.08 * a;
      const double hb = hs * (1.0 - 0.3 * b);
      const double sl = 0.06 + 0.12 * c;
      parts.push_back({{cx - hs, y0 + 0.04},
                       {cx - 0.06, y0},
                       {cx + 0.06, y0},
                       {cx + hs, y0 + 0.04},
                       {cx + hb, y1},
                       {cx - hb, y1}});
      const Polygon sleeve = {{cx - hs, y0 + 0.04},
                              {cx - hs - sl, y0 + 0.04 + 0.8 * sl},
                              {cx - hs - sl + 0.06, y0 + 0.10 + 0.8 * sl},
                              {cx - hs + 0.01, y0 + 0.22}};
      parts.push_back(sleeve);
      parts.push_back(mirror(sleeve, cx));
      break;
    }
    case Category::bag: {
      constexpr double top = 0.38;
      const double ht = 0.17 + 0.10 * a;
      const double hb = ht * (1.0 + 0.3 * b);
      parts.push_back({{cx - ht, top}, {cx + ht, top}, {cx + hb, y1}, {cx - hb, y1}});
      const double outer = std::min(ht * (0.45 + 0.5 * c), top - y0);
      const double inner = outer - 0.04;
      constexpr int kSegments = 16;
      Polygon handle;
      for (int s = 0; s <= kSegments; ++s) {
        const double t = std::numbers::pi * s / kSegments;
        handle.push_back({cx - outer * std::cos(t), top - outer * std::sin(t)});
      }
      for (int s = kSegments; s >= 0; --s) {
        const double t = std::numbers::pi * s / kSegments;
        handle.push_back({cx - inner * std::cos(t), top - inner * std::sin(t)});
      }
      parts.push_back(std::move(handle));
      break;
    }
    case Category::lower: {
      const double hw = 0.13 + 0.08 * a;
      const double crotch = 0.18 + 0.2 * c;
      const double leg = 0.07 + 0.07 * (1.0 - b);
      const double gap = 0.015 + 0.03 * b;
      const Polygon left = {{cx - hw, y0},
                            {cx, y0},
                            {cx, y0 + crotch},
                            {cx - gap, y1},
                            {cx - gap - leg, y1}};
      parts.push_back(left);
      parts.push_back(mirror(left, cx));
      break;
    }
    case Category::shoes: {
      constexpr double x0 = 0.1;
      constexpr double x1 = 0.9;
      const double h = 0.28 + 0.16 * a;
      const double top = 0.5 - h / 2.0;
      const double bottom = 0.5 + h / 2.0;
      const double heel = 0.02 + 0.06 * b;
      parts.push_back({{x0, top},
                       {x0 + 0.2, top},
                       {x0 + 0.33, top + 0.35 * h},
                       {x1 - 0.1 - 0.12 * c, bottom - 0.5 * h},
                       {x1, bottom - 0.22 * h},
                       {x1, bottom},
                       {x0 + 0.22, bottom},
                       {x0 + 0.22, bottom - heel},
                       {x0 + 0.16, bottom - heel},
                       {x0 + 0.16, bottom},
                       {x0, bottom}});
      break;
    }
  }
  return parts;
}

bool in_silhouette(const std::vector<Polygon>& parts, double x, double y) {
  for (const Polygon& p : parts) {
    if (inside(p, x, y)) return true;
  }
  return false;
}

bool pattern_on(const ItemSpec& spec, double x, double y) {
  constexpr double kStripePeriod = 0.1;
  constexpr double kDotSpacing = 0.11;
  constexpr double kDotRadius = 0.028;
  const double phase = static_cast<double>(spec.seed % 997) / 997.0;
  switch (spec.pattern) {
    case Pattern::solid: return false;
    case Pattern::stripes: {
      const double u = std::fmod(y - phase * kStripePeriod + 10.0, kStripePeriod);
      return u < 0.35 * kStripePeriod;
    }
    case Pattern::dots: {
      const double px = phase * kDotSpacing;
      const double py = static_cast<double>((spec.seed / 997) % 991) / 991.0 * kDotSpacing;
      const double gx = std::round((x - px) / kDotSpacing) * kDotSpacing + px;
      const double gy = std::round((y - py) / kDotSpacing) * kDotSpacing + py;
      return std::hypot(x - gx, y - gy) < kDotRadius;
    }
  }
  return false;
}

constexpr int kSuperSamples = 4;
constexpr double kBackgroundThreshold = 0.9;  // all channels above => background

double wrap_hue(double h) {
  double w = std::fmod(h, 360.0);
  if (w < 0.0) w += 360.0;
  if (w >= 360.0) w -= 360.0;
  return w;
}

}  // namespace

std::string_view pattern_name(Pattern p) {
  switch (p) {
    case Pattern::solid: return "solid";
    case Pattern::stripes: return "stripes";
    case Pattern::dots: return "dots";
  }
  return "unknown";
}

Pattern parse_pattern(std::string_view name) {
  for (Pattern p : {Pattern::solid, Pattern::stripes, Pattern::dots}) {
    if (pattern_name(p) == name) return p;
  }
  fail(ErrorCode::config, "unknown pattern '" + std::string(name) + "'");
}

void ItemSpec::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!(hue >= 0.0 && hue < 360.0)) fail(ErrorCode::domain, "hue must lie in [0, 360)");
  if (!unit(saturation)) fail(ErrorCode::domain, "saturation must lie in [0, 1]");
  if (!unit(lightness)) fail(ErrorCode::domain, "lightness must lie in [0, 1]");
  for (double s : shape) {
    if (!unit(s)) fail(ErrorCode::domain, "shape parameters must lie in [0, 1]");
  }
}

void OutfitSpec::validate() const {
  for (int i = 0; i < kNumCategories; ++i) {
    if (items[i].category != category_at(i)) {
      fail(ErrorCode::domain, "outfit slot " + std::to_string(i) + " must hold category " +
                                  std::string(category_name(category_at(i))));
    }
    items[i].validate();
  }
}

void CompatibilityRule::validate() const {
  // Windows above 180 degrees are degenerate but allowed (360 accepts everything).
  if (!(hue_window > 0.0 && hue_window <= 360.0)) {
    fail(ErrorCode::config, "hue_window must lie in (0, 360]");
  }
  if (!(max_lightness_spread > 0.0 && max_lightness_spread <= 1.0)) {
    fail(ErrorCode::config, "max_lightness_spread must lie in (0, 1]");
  }
}

double covering_arc(std::span<const double> hues) {
  if (hues.size() < 2) return 0.0;
  std::vector<double> sorted;
  sorted.reserve(hues.size());
  for (double h : hues) sorted.push_back(wrap_hue(h));
  std::sort(sorted.begin(), sorted.end());
  double largest_gap = sorted.front() + 360.0 - sorted.back();
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    largest_gap = std::max(largest_gap, sorted[i] - sorted[i - 1]);
  }
  return 360.0 - largest_gap;
}

OracleResult oracle_score(std::span<const double, kNumCategories> hues,
                          std::span<const double, kNumCategories> lightnesses,
                          const CompatibilityRule& rule) {
  OracleResult r;
  r.spread = covering_arc(hues);
  r.score = std::max(0.0, 1.0 - r.spread / 180.0);
  const auto [lo, hi] = std::minmax_element(lightnesses.begin(), lightnesses.end());
  r.compatible = r.spread <= rule.hue_window && (*hi - *lo) <= rule.max_lightness_spread;
  return r;
}

OracleResult oracle_score(const OutfitSpec& outfit, const CompatibilityRule& rule) {
  std::array<double, kNumCategories> hues{};
  std::array<double, kNumCategories> light{};
  for (int i = 0; i < kNumCategories; ++i) {
    hues[i] = outfit.items[i].hue;
    light[i] = outfit.items[i].lightness;
  }
  return oracle_score(hues, light, rule);
}

ItemSpec sample_item(Rng& rng, Category category, const SamplingRanges& ranges) {
  ItemSpec spec;
  spec.category = category;
  spec.hue = wrap_hue(rng.uniform(0.0, 360.0));
  spec.saturation = rng.uniform(ranges.saturation_lo, ranges.saturation_hi);
  spec.lightness = rng.uniform(ranges.lightness_lo, ranges.lightness_hi);
  spec.pattern = static_cast<Pattern>(rng.index(3));
  for (double& s : spec.shape) s = rng.uniform();
  spec.seed = rng.next_u64();
  return spec;
}

OutfitSpec sample_random_outfit(Rng& rng, const SamplingRanges& ranges) {
  OutfitSpec outfit;
  for (Category c : kAllCategories) outfit.items[slot(c)] = sample_item(rng, c, ranges);
  return outfit;
}

OutfitSpec sample_compatible_outfit(Rng& rng, const CompatibilityRule& rule,
                                    const SamplingRanges& ranges) {
  // Hues are drawn inside one window-wide arc and lightnesses inside one
  // spread-wide band, so the result is compatible by construction.
  OutfitSpec outfit = sample_random_outfit(rng, ranges);
  const double base = rng.uniform(0.0, 360.0);
  const double window = std::min(rule.hue_window, 360.0);
  const double band = std::min(rule.max_lightness_spread, ranges.lightness_hi - ranges.lightness_lo);
  const double band_start = rng.uniform(ranges.lightness_lo, ranges.lightness_hi - band);
  for (ItemSpec& item : outfit.items) {
    item.hue = wrap_hue(base + rng.uniform(0.0, window));
    item.lightness = band_start + rng.uniform(0.0, band);
  }
  return outfit;
}

bool is_supported_resolution(int resolution) { return resolution == 32 || resolution == 64; }

std::array<double, 3> hsl_to_rgb(double hue, double saturation, double lightness) {
  const double chroma = (1.0 - std::abs(2.0 * lightness - 1.0)) * saturation;
  const double hp = wrap_hue(hue) / 60.0;
  const double x = chroma * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = chroma; g = x; }
  else if (hp < 2) { r = x; g = chroma; }
  else if (hp < 3) { g = chroma; b = x; }
  else if (hp < 4) { g = x; b = chroma; }
  else if (hp < 5) { r = x; b = chroma; }
  else { r = chroma; b = x; }
  const double m = lightness - chroma / 2.0;
  return {r + m, g + m, b + m};
}

Hsl rgb_to_hsl(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double chroma = mx - mn;
  const double lightness = (mx + mn) / 2.0;
  double hue = 0.0;
  if (chroma > 0.0) {
    if (mx == r) hue = 60.0 * std::fmod((g - b) / chroma + 6.0, 6.0);
    else if (mx == g) hue = 60.0 * ((b - r) / chroma + 2.0);
    else hue = 60.0 * ((r - g) / chroma + 4.0);
  }
  const double denom = 1.0 - std::abs(2.0 * lightness - 1.0);
  const double saturation = denom > 1e-12 ? std::clamp(chroma / denom, 0.0, 1.0) : 0.0;
  return {wrap_hue(hue), saturation, lightness};
}

ItemImage render_item(const ItemSpec& spec, int resolution) {
  if (!is_supported_resolution(resolution)) {
    fail(ErrorCode::config, "unsupported render resolution " + std::to_string(resolution) +
                                " (expected 32 or 64)");
  }
  spec.validate();
  const auto parts = silhouette(spec);
  const auto fill = hsl_to_rgb(spec.hue, spec.saturation, spec.lightness);
  const auto accent = hsl_to_rgb(spec.hue, spec.saturation, spec.lightness * 0.55);
  ItemImage image(resolution);
  const double inv = 1.0 / (static_cast<double>(resolution) * kSuperSamples);
  for (int py = 0; py < resolution; ++py) {
    for (int px = 0; px < resolution; ++px) {
      std::array<double, 3> sum{0.0, 0.0, 0.0};
      for (int sy = 0; sy < kSuperSamples; ++sy) {
        for (int sx = 0; sx < kSuperSamples; ++sx) {
          const double x = (px * kSuperSamples + sx + 0.5) * inv;
          const double y = (py * kSuperSamples + sy + 0.5) * inv;
          if (!in_silhouette(parts, x, y)) {
            for (double& v : sum) v += 1.0;
          } else {
            const auto& color = pattern_on(spec, x, y) ? accent : fill;
            for (int c = 0; c < 3; ++c) sum[c] += color[c];
          }
        }
      }
      for (int c = 0; c < 3; ++c) {
        const double unit = sum[c] / (kSuperSamples * kSuperSamples);
        image.at(c, py, px) = static_cast<float>(unit * 2.0 - 1.0);
      }
    }
  }
  return image;
}

std::vector<float> silhouette_mask(const ItemSpec& spec, int resolution) {
  if (!is_supported_resolution(resolution)) {
    fail(ErrorCode::config, "unsupported render resolution " + std::to_string(resolution));
  }
  const auto parts = silhouette(spec);
  std::vector<float> mask(static_cast<std::size_t>(resolution) * resolution);
  const double inv = 1.0 / (static_cast<double>(resolution) * kSuperSamples);
  for (int py = 0; py < resolution; ++py) {
    for (int px = 0; px < resolution; ++px) {
      int hits = 0;
      for (int sy = 0; sy < kSuperSamples; ++sy) {
        for (int sx = 0; sx < kSuperSamples; ++sx) {
          hits += in_silhouette(parts, (px * kSuperSamples + sx + 0.5) * inv,
                                (py * kSuperSamples + sy + 0.5) * inv);
        }
      }
      mask[static_cast<std::size_t>(py) * resolution + px] =
          static_cast<float>(hits) / (kSuperSamples * kSuperSamples);
    }
  }
  return mask;
}

ColorEstimate estimate_spec(const ItemImage& image, Category category) {
  constexpr int kBins = 8;
  const int s = image.size;
  const std::size_t total = static_cast<std::size_t>(s) * s;
  std::vector<int> counts(kBins * kBins * kBins, 0);
  std::vector<std::array<double, 3>> sums(counts.size(), {0.0, 0.0, 0.0});
  std::size_t foreground = 0;
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      std::array<double, 3> rgb{};
      bool background = true;
      for (int c = 0; c < 3; ++c) {
        rgb[c] = std::clamp((static_cast<double>(image.at(c, y, x)) + 1.0) * 0.5, 0.0, 1.0);
        background = background && rgb[c] >= kBackgroundThreshold;
      }
      if (background) continue;
      ++foreground;
      int bucket = 0;
      for (int c = 0; c < 3; ++c) {
        bucket = bucket * kBins + std::min(kBins - 1, static_cast<int>(rgb[c] * kBins));
      }
      ++counts[bucket];
      for (int c = 0; c < 3; ++c) sums[bucket][c] += rgb[c];
    }
  }
  if (foreground * 100 < total) {
    fail(ErrorCode::blank_image, "blank image: fewer than 1% non-background pixels");
  }
  const auto best = static_cast<std::size_t>(
      std::max_element(counts.begin(), counts.end()) - counts.begin());
  const double n = counts[best];
  const Hsl hsl = rgb_to_hsl(sums[best][0] / n, sums[best][1] / n, sums[best][2] / n);
  return {category, hsl.hue, hsl.saturation, hsl.lightness};
}

// ---------------------------------------------------------------------------
// Dataset

std::vector<const OutfitRecord*> DatasetManifest::split(Split which) const {
  std::vector<const OutfitRecord*> out;
  for (const auto& r : records) {
    if (r.split == which) out.push_back(&r);
  }
  return out;
}

std::size_t DatasetManifest::count(Split which) const {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [&](const auto& r) { return r.split == which; }));
}

std::string item_file_name(const std::string& outfit_id, Category category) {
  return outfit_id + "_" + std::string(category_name(category)) + ".png";
}

nlohmann::json to_json(const ItemSpec& spec) {
  return {{"category", category_name(spec.category)},
          {"hue", spec.hue},
          {"saturation", spec.saturation},
          {"lightness", spec.lightness},
          {"pattern", pattern_name(spec.pattern)},
          {"shape", spec.shape},
          {"seed", spec.seed}};
}

ItemSpec item_spec_from_json(const nlohmann::json& j) {
  ItemSpec spec;
  spec.category = parse_category(j.at("category").get<std::string>());
  spec.hue = j.at("hue").get<double>();
  spec.saturation = j.at("saturation").get<double>();
  spec.lightness = j.at("lightness").get<double>();
  spec.pattern = parse_pattern(j.at("pattern").get<std::string>());
  spec.shape = j.at("shape").get<std::array<double, 3>>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  return spec;
}

nlohmann::json to_json(const DatasetManifest& manifest) {
  nlohmann::json records = nlohmann::json::array();
  nlohmann::json train = nlohmann::json::array();
  nlohmann::json test = nlohmann::json::array();
  for (const auto& r : manifest.records) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& item : r.spec.items) items.push_back(to_json(item));
    records.push_back({{"id", r.id},
                       {"split", r.split == Split::train ? "train" : "test"},
                       {"compatible", r.compatible},
                       {"items", items},
                       {"files", r.files}});
    (r.split == Split::train ? train : test).push_back(r.id);
  }
  return {{"version", manifest.version},
          {"seed", manifest.seed},
          {"resolution", manifest.resolution},
          {"rule",
           {{"hue_window", manifest.rule.hue_window},
            {"max_lightness_spread", manifest.rule.max_lightness_spread}}},
          {"splits", {{"train", train}, {"test", test}}},
          {"records", records}};
}

DatasetManifest build_dataset(const DatasetConfig& config) {
  if (!is_supported_resolution(config.resolution)) {
    fail(ErrorCode::config, "dataset resolution must be 32 or 64");
  }
  if (config.train_count < 0 || config.test_count < 0 ||
      config.train_count + config.test_count == 0) {
    fail(ErrorCode::config, "dataset needs a positive outfit count");
  }
  config.rule.validate();
  namespace fs = std::filesystem;
  const fs::path root(config.root);
  const fs::path images = root / "images";
  std::error_code ec;
  fs::create_directories(images, ec);
  if (ec) fail(ErrorCode::io, "cannot create '" + images.string() + "': " + ec.message());

  DatasetManifest manifest;
  manifest.root = root;
  manifest.resolution = config.resolution;
  manifest.seed = config.seed;
  manifest.rule = config.rule;
  const int total = config.train_count + config.test_count;
  manifest.records.reserve(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i) {
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(i)));
    OutfitRecord record;
    char id[16];
    std::snprintf(id, sizeof(id), "o%06d", i);
    record.id = id;
    record.split = i < config.train_count ? Split::train : Split::test;
    record.spec = sample_compatible_outfit(rng, config.rule);
    record.compatible = oracle_score(record.spec, config.rule).compatible;
    for (Category c : kAllCategories) {
      record.files[slot(c)] = "images/" + item_file_name(record.id, c);
      write_png(render_item(record.spec.items[slot(c)], config.resolution),
                (root / record.files[slot(c)]).string());
    }
    manifest.records.push_back(std::move(record));
  }

  const fs::path manifest_path = root / "manifest.json";
  std::ofstream out(manifest_path);
  if (!out) fail(ErrorCode::io, "cannot write '" + manifest_path.string() + "'");
  out << to_json(manifest).dump(1) << '\n';
  if (!out) fail(ErrorCode::io, "write failed for '" + manifest_path.string() + "'");
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& root) {
  const auto path = root / "manifest.json";
  std::ifstream in(path);
  if (!in) fail(ErrorCode::missing_artifact, "dataset manifest not found at '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::io, "malformed manifest '" + path.string() + "': " + e.what());
  }
  DatasetManifest manifest;
  manifest.root = root;
  manifest.version = j.at("version").get<int>();
  manifest.seed = j.at("seed").get<std::uint64_t>();
  manifest.resolution = j.at("resolution").get<int>();
  manifest.rule.hue_window = j.at("rule").at("hue_window").get<double>();
  manifest.rule.max_lightness_spread = j.at("rule").at("max_lightness_spread").get<double>();
  for (const auto& r : j.at("records")) {
    OutfitRecord record;
    record.id = r.at("id").get<std::string>();
    record.split = r.at("split").get<std::string>() == "train" ? Split::train : Split::test;
    record.compatible = r.at("compatible").get<bool>();
    for (int i = 0; i < kNumCategories; ++i) {
      record.spec.items[i] = item_spec_from_json(r.at("items").at(i));
      record.files[i] = r.at("files").at(i).get<std::string>();
    }
    manifest.records.push_back(std::move(record));
  }
  return manifest;
}

}  // namespace fcboost
