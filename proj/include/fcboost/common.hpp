#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fcboost {

/// Item category. The numeric value is the slot index inside an outfit.
enum class Category : std::uint8_t { upper = 0, bag = 1, lower = 2, shoes = 3 };

inline constexpr int kNumCategories = 4;
inline constexpr int kLatentDim = 512;
inline constexpr std::array<Category, kNumCategories> kAllCategories = {
    Category::upper, Category::bag, Category::lower, Category::shoes};

constexpr int slot(Category c) { return static_cast<int>(c); }
constexpr Category category_at(int slot) { return static_cast<Category>(slot); }

std::string_view category_name(Category c);
Category parse_category(std::string_view name);

enum class ErrorCode {
  config,
  io,
  numeric,
  contract,
  domain,
  blank_image,
  missing_artifact,
  divergence,
  incompatible_checkpoint,
};

std::string_view error_code_name(ErrorCode code);

/// Single exception type for the library; `code()` classifies the failure so
/// callers (CLI, HTTP) can map it to exit codes and status codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& message);

/// Seeded random stream. Uniform and normal draws are computed here rather
/// than with <random> distributions so sequences are identical across
/// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t index(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();
  /// Independent stream derived from this one's seed material and `salt`.
  Rng fork(std::uint64_t salt);

  std::string serialize() const;
  static Rng deserialize(const std::string& state);

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// SplitMix64 finalizer, used to derive per-record seeds from a master seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::string& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace fcboost
