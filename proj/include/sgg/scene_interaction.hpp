#pragma once

// Scene-object interaction: an additive-attention coefficient per object that
// decides how much of the shared scene feature is mixed into the object's own
// feature, plus the class-weighted multi-label scene loss and the object
// classification head used when labels are not given.

#include <algorithm>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "sgg/error.hpp"
#include "sgg/numerics.hpp"

namespace sgg::scene {

using numerics::DiffTensor;

/// max{0, <w_g, f_o + f_s>}
template <std::floating_point T>
DiffTensor<T> interaction_coefficient(const DiffTensor<T>& object_feature,
                                      const DiffTensor<T>& scene_feature,
                                      const DiffTensor<T>& w_g) {
  if (object_feature.size() != scene_feature.size() || w_g.size() != object_feature.size()) {
    throw Error("interaction_coefficient: dimension mismatch (object " +
                std::to_string(object_feature.size()) + ", scene " +
                std::to_string(scene_feature.size()) + ", w_g " + std::to_string(w_g.size()) +
                ")");
  }
  return numerics::relu(numerics::dot(w_g, numerics::add(object_feature, scene_feature)));
}

/// f_o + a * f_s
template <std::floating_point T>
DiffTensor<T> refine_object_feature(const DiffTensor<T>& object_feature,
                                    const DiffTensor<T>& scene_feature,
                                    const DiffTensor<T>& coefficient) {
  if (coefficient.size() != 1) throw Error("refine_object_feature: coefficient must be a scalar");
  if (coefficient[0] < T{0}) throw Error("refine_object_feature: negative coefficient");
  return numerics::add(object_feature, numerics::mul(scene_feature, coefficient));
}

/// Inverse class frequencies rescaled to mean 1. A class never seen in
/// training gets the largest weight among the seen classes.
inline std::vector<double> class_weights(std::span<const std::int64_t> counts) {
  if (counts.empty()) throw Error("class_weights: no classes");
  std::int64_t total = 0;
  for (auto c : counts) {
    if (c < 0) throw Error("class_weights: negative count");
    total += c;
  }
  if (total == 0) throw Error("class_weights: all counts are zero");
  std::vector<double> w(counts.size(), 0.0);
  double largest = 0.0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] > 0) {
      w[c] = static_cast<double>(total) / static_cast<double>(counts[c]);
      largest = std::max(largest, w[c]);
    }
  }
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) w[c] = largest;
  }
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  for (auto& v : w) v /= mean;
  return w;
}

/// A linear layer with bias: W x + b.
template <std::floating_point T>
struct Affine {
  DiffTensor<T> weight;  // out x in
  DiffTensor<T> bias;    // out

  static Affine zeros(std::size_t out, std::size_t in, bool requires_grad = true) {
    return {DiffTensor<T>::zeros({out, in}, requires_grad),
            DiffTensor<T>::zeros({out}, requires_grad)};
  }

  DiffTensor<T> operator()(const DiffTensor<T>& x) const {
    return numerics::add(numerics::matvec(weight, x), bias);
  }
};

/// Sigmoid probability per class from the scene feature, then the
/// class-weighted binary cross-entropy against the present-class targets.
template <std::floating_point T>
DiffTensor<T> scene_multilabel_loss(const DiffTensor<T>& scene_feature,
                                    const Affine<T>& multilabel_head,
                                    std::span<const T> targets, std::span<const T> weights) {
  auto probs = numerics::sigmoid(multilabel_head(scene_feature));
  return numerics::weighted_bce(probs, targets, weights);
}

/// Object class distribution from a (refined) object feature.
template <std::floating_point T>
DiffTensor<T> classify_objects(const DiffTensor<T>& feature, const Affine<T>& object_head) {
  return numerics::softmax(object_head(feature));
}

}  // namespace sgg::scene
