#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fcboost/common.hpp"
#include "fcboost/image.hpp"

namespace fcboost {

enum class Pattern : std::uint8_t { solid = 0, stripes = 1, dots = 2 };

std::string_view pattern_name(Pattern p);
Pattern parse_pattern(std::string_view name);

/// Parametric ground truth for one rendered item.
struct ItemSpec {
  Category category = Category::upper;
  double hue = 0.0;         // degrees, [0, 360)
  double saturation = 0.0;  // [0, 1]
  double lightness = 0.0;   // [0, 1]
  Pattern pattern = Pattern::solid;
  std::array<double, 3> shape{0.5, 0.5, 0.5};  // aspect, taper, accent; each in [0, 1]
  std::uint64_t seed = 0;

  /// Throws ErrorCode::domain when any field is outside its range.
  void validate() const;

  friend bool operator==(const ItemSpec&, const ItemSpec&) = default;
};

/// Four items in slot order (upper, bag, lower, shoes).
struct OutfitSpec {
  std::array<ItemSpec, kNumCategories> items;

  void validate() const;

  friend bool operator==(const OutfitSpec&, const OutfitSpec&) = default;
};

struct CompatibilityRule {
  double hue_window = 40.0;            // (0, 180]
  double max_lightness_spread = 0.5;   // (0, 1]

  void validate() const;
};

/// Parameter ranges used by the samplers. Saturation and lightness are kept
/// away from the extremes so every item stays visible and has a hue.
struct SamplingRanges {
  double saturation_lo = 0.4, saturation_hi = 1.0;
  double lightness_lo = 0.3, lightness_hi = 0.7;
};

struct OracleResult {
  double spread = 0.0;  // minimal covering hue arc, degrees
  double score = 0.0;   // max(0, 1 - spread / 180)
  bool compatible = false;
};

/// Smallest arc of the hue circle containing every hue (degrees).
double covering_arc(std::span<const double> hues);

OracleResult oracle_score(std::span<const double, kNumCategories> hues,
                          std::span<const double, kNumCategories> lightnesses,
                          const CompatibilityRule& rule = {});
OracleResult oracle_score(const OutfitSpec& outfit, const CompatibilityRule& rule = {});

ItemSpec sample_item(Rng& rng, Category category, const SamplingRanges& ranges = {});
OutfitSpec sample_compatible_outfit(Rng& rng, const CompatibilityRule& rule = {},
                                    const SamplingRanges& ranges = {});
OutfitSpec sample_random_outfit(Rng& rng, const SamplingRanges& ranges = {});

/// Renderable resolutions.
bool is_supported_resolution(int resolution);

ItemImage render_item(const ItemSpec& spec, int resolution);
/// Per-pixel silhouette coverage in [0, 1], row-major, independent of color.
std::vector<float> silhouette_mask(const ItemSpec& spec, int resolution);

struct ColorEstimate {
  Category category = Category::upper;
  double hue = 0.0;
  double saturation = 0.0;
  double lightness = 0.0;
};

/// Dominant non-background color in HSL. Throws ErrorCode::blank_image when
/// fewer than 1% of the pixels differ from the white background.
ColorEstimate estimate_spec(const ItemImage& image, Category category);

struct Hsl {
  double hue, saturation, lightness;
};
std::array<double, 3> hsl_to_rgb(double hue, double saturation, double lightness);
Hsl rgb_to_hsl(double r, double g, double b);

// ---------------------------------------------------------------------------
// Dataset

struct DatasetConfig {
  std::string root;
  int train_count = 8000;
  int test_count = 2000;
  int resolution = 64;
  std::uint64_t seed = 0;
  CompatibilityRule rule;
};

enum class Split { train, test };

struct OutfitRecord {
  std::string id;
  Split split = Split::train;
  OutfitSpec spec;
  std::array<std::string, kNumCategories> files;  // relative to the dataset root
  bool compatible = true;
};

struct DatasetManifest {
  int version = 1;
  std::filesystem::path root;
  int resolution = 64;
  std::uint64_t seed = 0;
  CompatibilityRule rule;
  std::vector<OutfitRecord> records;

  std::vector<const OutfitRecord*> split(Split which) const;
  std::size_t count(Split which) const;
};

std::string item_file_name(const std::string& outfit_id, Category category);

/// Renders `train_count + test_count` compatible outfits into
/// `<root>/images/` and writes `<root>/manifest.json`.
DatasetManifest build_dataset(const DatasetConfig& config);
DatasetManifest load_manifest(const std::filesystem::path& root);

nlohmann::json to_json(const ItemSpec& spec);
ItemSpec item_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DatasetManifest& manifest);

}  // namespace fcboost
