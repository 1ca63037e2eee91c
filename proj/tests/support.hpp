#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "fcboost/common.hpp"

namespace fcboost::testing {

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("fcboost_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  static int& counter() {
    static int n = 0;
    return n;
  }
  std::filesystem::path path_;
};

struct GradCheck {
  double max_relative_error = 0.0;
  int checked = 0;
};

/// Central differences on `param` (float64) against autograd. `loss` must
/// recompute the scalar from scratch. Probes `samples` evenly spaced entries.
/// Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck finite_difference_check(torch::Tensor param, const std::function<torch::Tensor()>& loss,
                                         int samples = 12, double eps = 1e-6, double floor = 1e-6) {
  TORCH_CHECK(param.scalar_type() == torch::kFloat64, "gradient checks run in double precision");
  if (param.grad().defined()) param.mutable_grad().zero_();
  const auto l = loss();
  const auto analytic = torch::autograd::grad({l}, {param}, {}, false, false, true)[0];
  GradCheck result;
  torch::NoGradGuard no_grad;
  auto flat = param.view({-1});
  const auto n = flat.numel();
  const auto grad_flat = analytic.defined() ? analytic.reshape({-1}) : torch::zeros_like(flat);
  const int count = static_cast<int>(std::min<std::int64_t>(samples, n));
  for (int s = 0; s < count; ++s) {
    const std::int64_t i = (n * s) / count + (s * 7919) % std::max<std::int64_t>(1, n / count);
    const double original = flat[i].item<double>();
    flat[i] = original + eps;
    const double up = loss().item<double>();
    flat[i] = original - eps;
    const double down = loss().item<double>();
    flat[i] = original;
    const double numeric = (up - down) / (2 * eps);
    const double a = grad_flat[i].item<double>();
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    result.max_relative_error = std::max(result.max_relative_error, std::abs(a - numeric) / denom);
    ++result.checked;
  }
  return result;
}

/// Sum of absolute gradient entries over every parameter of `params`; zero
/// when none carries a gradient.
inline double gradient_mass(const std::vector<torch::Tensor>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    if (p.grad().defined()) total += p.grad().abs().sum().item<double>();
  }
  return total;
}

}  // namespace fcboost::testing
