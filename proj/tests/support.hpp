#pragma once

// Test-only oracles: central finite differences and small random fixtures.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "sgg/numerics.hpp"

namespace sgg::testing {

using numerics::DiffTensor;

/// |a - n| / max(1, |a|, |n|): relative for large entries, absolute near zero.
inline double gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Largest gradient_error over every entry of every input. `loss` must rebuild
/// its graph from the inputs on each call; inputs are perturbed in place.
///
/// At 32-bit the step is large enough to straddle a relu or |x| kink. Entries
/// whose difference quotients at step and step/2 disagree are skipped there;
/// at 64-bit every entry counts.
template <std::floating_point T>
double gradcheck(std::vector<DiffTensor<T>> inputs, const std::function<DiffTensor<T>()>& loss,
                 T step) {
  constexpr bool skip_kinks = !std::is_same_v<T, double>;
  for (auto& x : inputs) x.zero_grad();
  numerics::backward(loss());
  std::vector<std::vector<T>> analytic;
  for (const auto& x : inputs) analytic.emplace_back(x.grad().begin(), x.grad().end());

  double worst = 0;
  numerics::NoGradGuard no_grad;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto v = inputs[t].mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const T saved = v[i];
      auto quotient = [&](T h) {
        v[i] = saved + h;
        const double up = static_cast<double>(loss().item());
        v[i] = saved - h;
        const double down = static_cast<double>(loss().item());
        v[i] = saved;
        return (up - down) / (2.0 * static_cast<double>(h));
      };
      const double numeric = quotient(step);
      if (skip_kinks && gradient_error(numeric, quotient(step / 2)) > 1e-3) continue;
      worst = std::max(worst, gradient_error(static_cast<double>(analytic[t][i]), numeric));
    }
  }
  return worst;
}

/// Uniform entries in [-scale, scale], kept at least `gap` away from zero so
/// that kinks (relu, |x|) are never within a finite-difference step.
template <std::floating_point T, class Rng>
DiffTensor<T> random_tensor(numerics::Shape shape, Rng& rng, double scale = 1.0, double gap = 1e-3,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<T> v(numerics::element_count(shape));
  for (auto& x : v) {
    double d;
    do {
      d = u(rng);
    } while (std::abs(d) < gap);
    x = static_cast<T>(d);
  }
  return DiffTensor<T>(std::move(shape), std::move(v), requires_grad);
}

/// <y, w> for a vector y: reduces a vector output to a scalar through fixed
/// random weights, so every output direction is checked at once.
template <std::floating_point T>
DiffTensor<T> project(const DiffTensor<T>& y, const DiffTensor<T>& w) {
  return numerics::dot(y, w);
}

template <std::floating_point T, class Rng>
DiffTensor<T> random_weights(std::size_t n, Rng& rng) {
  return random_tensor<T>({n}, rng, 1.0, 0.0, false);
}

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("sgg-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace sgg::testing
