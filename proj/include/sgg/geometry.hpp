#pragma once

// Axis-aligned boxes and the spatial encodings fed to the relation head.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <random>
#include <string>

#include "sgg/error.hpp"
#include "sgg/numerics.hpp"

namespace sgg::geometry {

/// Top-left (x_t, y_t) and bottom-right (x_b, y_b) corners.
struct BoundingBox {
  double x_t = 0;
  double y_t = 0;
  double x_b = 0;
  double y_b = 0;

  double width() const { return x_b - x_t; }
  double height() const { return y_b - y_t; }
  double area() const { return width() * height(); }

  bool valid() const {
    return std::isfinite(x_t) && std::isfinite(y_t) && std::isfinite(x_b) &&
           std::isfinite(y_b) && x_t < x_b && y_t < y_b;
  }

  bool operator==(const BoundingBox&) const = default;
};

inline std::string to_string(const BoundingBox& b) {
  return "[" + std::to_string(b.x_t) + ", " + std::to_string(b.y_t) + ", " +
         std::to_string(b.x_b) + ", " + std::to_string(b.y_b) + "]";
}

inline const BoundingBox& require_valid(const BoundingBox& b) {
  if (!b.valid()) throw Error("degenerate bounding box " + to_string(b));
  return b;
}

/// [x_t, y_t, x_b, y_b, w*h]
inline std::array<double, 5> encode_absolute(const BoundingBox& b) {
  require_valid(b);
  return {b.x_t, b.y_t, b.x_b, b.y_b, b.area()};
}

/// [x_c, y_c, w, h]
inline std::array<double, 4> to_center_form(const BoundingBox& b) {
  require_valid(b);
  return {(b.x_t + b.x_b) / 2, (b.y_t + b.y_b) / 2, b.width(), b.height()};
}

inline BoundingBox from_center_form(const std::array<double, 4>& c) {
  const double hw = c[2] / 2;
  const double hh = c[3] / 2;
  return require_valid(BoundingBox{c[0] - hw, c[1] - hh, c[0] + hw, c[1] + hh});
}

/// Position of b_j's corners relative to b_i's center, in units of b_i's
/// size, plus the area ratio. Not symmetric in its arguments.
///
/// The corner offsets are written as ((p - lo) + (p - hi)) / 2 rather than
/// p - center: the two forms agree algebraically, and this one makes the
/// self-relation exactly [-0.5, -0.5, 0.5, 0.5, 1] in floating point.
inline std::array<double, 5> relative_spatial(const BoundingBox& bi, const BoundingBox& bj) {
  require_valid(bi);
  require_valid(bj);
  const double wi = bi.width();
  const double hi = bi.height();
  auto offset = [](double p, double lo, double hi_edge, double extent) {
    return ((p - lo) + (p - hi_edge)) / 2 / extent;
  };
  return {offset(bj.x_t, bi.x_t, bi.x_b, wi), offset(bj.y_t, bi.y_t, bi.y_b, hi),
          offset(bj.x_b, bi.x_t, bi.x_b, wi), offset(bj.y_b, bi.y_t, bi.y_b, hi),
          bj.area() / bi.area()};
}

inline BoundingBox union_box(const BoundingBox& a, const BoundingBox& b) {
  return {std::min(a.x_t, b.x_t), std::min(a.y_t, b.y_t), std::max(a.x_b, b.x_b),
          std::max(a.y_b, b.y_b)};
}

inline double intersection_over_union(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x_b, b.x_b) - std::max(a.x_t, b.x_t);
  const double ih = std::min(a.y_b, b.y_b) - std::max(a.y_t, b.y_t);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Learned lift of the raw 5-d relative encoding: relu(W s + b).
template <std::floating_point T = double>
struct SpatialLift {
  numerics::DiffTensor<T> weight;  // d_s x 5
  numerics::DiffTensor<T> bias;    // d_s

  static SpatialLift zeros(std::size_t d_s, bool requires_grad = true) {
    return {numerics::DiffTensor<T>::zeros({d_s, 5}, requires_grad),
            numerics::DiffTensor<T>::zeros({d_s}, requires_grad)};
  }

  template <class Rng>
  static SpatialLift random(std::size_t d_s, Rng& rng, double stddev = 0.3) {
    auto lift = zeros(d_s);
    std::normal_distribution<double> normal(0.0, stddev);
    for (auto& v : lift.weight.mutable_value()) v = static_cast<T>(normal(rng));
    for (auto& v : lift.bias.mutable_value()) v = static_cast<T>(0.1);
    return lift;
  }

  std::size_t dim() const { return bias.size(); }
};

template <std::floating_point T>
numerics::DiffTensor<T> lift_spatial(const std::array<double, 5>& raw,
                                     const SpatialLift<T>& lift) {
  auto s = numerics::DiffTensor<T>::vector(std::vector<T>(raw.begin(), raw.end()));
  return numerics::relu(numerics::add(numerics::matvec(lift.weight, s), lift.bias));
}

}  // namespace sgg::geometry
