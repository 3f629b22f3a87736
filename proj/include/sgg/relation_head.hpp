#pragma once

// Relation head: triple features, relation codewords and their margin loss,
// the coarse classifier, hallucinated features, attention fusion, confidence
// calibration, and the final (bias-free) relation classifier with an optional
// frequency prior over (subject class, object class).

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sgg/error.hpp"
#include "sgg/numerics.hpp"

namespace sgg::relation {

using numerics::DiffTensor;

/// [f_i * f_u * f_j ; s_ij] with * elementwise.
template <std::floating_point T>
DiffTensor<T> triple_feature(const DiffTensor<T>& subject, const DiffTensor<T>& union_feature,
                             const DiffTensor<T>& object, const DiffTensor<T>& spatial) {
  if (subject.size() != union_feature.size() || object.size() != union_feature.size()) {
    throw Error("triple_feature: visual dimensions differ (" + std::to_string(subject.size()) +
                ", " + std::to_string(union_feature.size()) + ", " +
                std::to_string(object.size()) + ")");
  }
  return numerics::concat(numerics::mul(numerics::mul(subject, union_feature), object), spatial);
}

// ---------------------------------------------------------------------------
// Codebook initialisation.

struct KMeansResult {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> assignment;
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with squared Euclidean distance. Initial centroids are
/// k distinct points drawn with `rng`; an emptied cluster keeps its centroid.
template <class Rng>
KMeansResult lloyd_kmeans(std::span<const std::vector<double>> points, std::size_t k, Rng& rng,
                          std::size_t max_iterations = 100) {
  if (k == 0 || points.size() < k) {
    throw Error("lloyd_kmeans: need at least k=" + std::to_string(k) + " points, got " +
                std::to_string(points.size()));
  }
  const std::size_t dim = points.front().size();
  std::vector<std::size_t> index(points.size());
  for (std::size_t i = 0; i < index.size(); ++i) index[i] = i;
  // Partial Fisher-Yates for the seeds.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, index.size() - 1);
    std::swap(index[i], index[pick(rng)]);
  }
  KMeansResult result;
  for (std::size_t i = 0; i < k; ++i) result.centroids.push_back(points[index[i]]);
  result.assignment.assign(points.size(), k);

  for (std::size_t it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (std::size_t p = 0; p < points.size(); ++p) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        double d = 0;
        for (std::size_t j = 0; j < dim; ++j) {
          const double diff = points[p][j] - result.centroids[c][j];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (result.assignment[p] != best) {
        result.assignment[p] = best;
        changed = true;
      }
    }
    result.iterations = it + 1;
    std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t p = 0; p < points.size(); ++p) {
      const auto c = result.assignment[p];
      ++counts[c];
      for (std::size_t j = 0; j < dim; ++j) sums[c][j] += points[p][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < dim; ++j) {
        result.centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
      }
    }
    if (!changed) break;
  }
  return result;
}

/// One codeword per relation: the single-cluster K-means centroid of that
/// relation's features. Relations without samples draw from N(0, 0.01^2).
/// Returns a row-major |R| x d matrix.
template <class Rng>
std::vector<double> init_codebook(std::span<const std::vector<double>> features,
                                  std::span<const std::size_t> labels, std::int64_t n_relations,
                                  Rng& rng) {
  if (n_relations <= 0) throw Error("init_codebook: number of relations must be positive");
  if (features.size() != labels.size()) {
    throw Error("init_codebook: " + std::to_string(features.size()) + " features but " +
                std::to_string(labels.size()) + " labels");
  }
  if (features.empty()) throw Error("init_codebook: no labelled samples");
  const auto n_rel = static_cast<std::size_t>(n_relations);
  const std::size_t dim = features.front().size();
  std::vector<std::vector<std::vector<double>>> groups(n_rel);
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (labels[i] >= n_rel) {
      throw Error("init_codebook: relation id " + std::to_string(labels[i]) + " out of range");
    }
    if (features[i].size() != dim) throw Error("init_codebook: ragged feature dimensions");
    groups[labels[i]].push_back(features[i]);
  }
  std::vector<double> codebook(n_rel * dim);
  std::normal_distribution<double> fallback(0.0, 0.01);
  for (std::size_t r = 0; r < n_rel; ++r) {
    double* row = codebook.data() + r * dim;
    if (groups[r].empty()) {
      for (std::size_t j = 0; j < dim; ++j) row[j] = fallback(rng);
      continue;
    }
    const auto km = lloyd_kmeans(std::span<const std::vector<double>>(groups[r]), 1, rng);
    std::copy(km.centroids[0].begin(), km.centroids[0].end(), row);
  }
  return codebook;
}

// ---------------------------------------------------------------------------
// Knowledge transfer.

/// sum_r [Y * dis(f, d_r) + (1 - Y) * max(0, M - dis(f, d_r))], with Y = 1
/// only for the labelled relation and dis the mean absolute difference.
template <std::floating_point T>
DiffTensor<T> codeword_loss(const DiffTensor<T>& feature, std::size_t label,
                            const DiffTensor<T>& codebook, T margin) {
  if (codebook.rank() != 2) throw Error("codeword_loss: codebook must be a matrix");
  if (label >= codebook.rows()) {
    throw Error("codeword_loss: relation label " + std::to_string(label) + " out of range " +
                std::to_string(codebook.rows()));
  }
  if (!(margin > T{0})) throw Error("codeword_loss: margin must be positive");
  const std::size_t n_rel = codebook.rows();
  std::vector<T> pull(n_rel, T{0});
  std::vector<T> push(n_rel, T{1});
  pull[label] = T{1};
  push[label] = T{0};
  auto dist = numerics::row_l1_distances(codebook, feature);
  auto hinge = numerics::relu(numerics::shift(numerics::scale(dist, T{-1}), margin));
  return numerics::add(numerics::dot(dist, DiffTensor<T>::vector(std::move(pull))),
                       numerics::dot(hinge, DiffTensor<T>::vector(std::move(push))));
}

/// Affine projection to |R| logits followed by softmax.
template <std::floating_point T>
DiffTensor<T> coarse_predict(const DiffTensor<T>& feature, const DiffTensor<T>& weight,
                             const DiffTensor<T>& bias) {
  return numerics::softmax(numerics::add(numerics::matvec(weight, feature), bias));
}

/// sum_r p_r d_r
template <std::floating_point T>
DiffTensor<T> hallucinate(const DiffTensor<T>& probs, const DiffTensor<T>& codebook) {
  T total{0};
  for (T p : probs.value()) {
    if (p < T{0}) throw Error("hallucinate: negative probability");
    total += p;
  }
  if (std::abs(total - T{1}) > T(1e-5)) {
    throw Error("hallucinate: probabilities sum to " + std::to_string(static_cast<double>(total)));
  }
  return numerics::transposed_matvec(codebook, probs);
}

template <std::floating_point T>
struct Fused {
  DiffTensor<T> coefficient;  // scalar a >= 0
  DiffTensor<T> feature;      // f + a * f_hall
};

/// a = max{0, <w_f, f + f_hall>}; returns a and f + a * f_hall.
template <std::floating_point T>
Fused<T> fuse(const DiffTensor<T>& feature, const DiffTensor<T>& hallucinated,
              const DiffTensor<T>& w_f) {
  auto a = numerics::relu(numerics::dot(w_f, numerics::add(feature, hallucinated)));
  return {a, numerics::add(feature, numerics::mul(hallucinated, a))};
}

/// alpha * max(p) * f. With `detach_confidence`, max(p) passes no gradient.
template <std::floating_point T>
DiffTensor<T> calibrate(const DiffTensor<T>& feature, const DiffTensor<T>& probs, T alpha,
                        bool detach_confidence = false) {
  if (!(alpha > T{0})) throw Error("calibrate: alpha must be positive");
  auto confidence = numerics::max(probs);
  if (detach_confidence) confidence = numerics::detach(confidence);
  return numerics::scale(numerics::mul(feature, confidence), alpha);
}

// ---------------------------------------------------------------------------
// Frequency prior.

/// log p(r | subject class, object class) from add-one smoothed counts.
class RelationPrior {
 public:
  RelationPrior() = default;

  RelationPrior(std::size_t n_classes, std::size_t n_relations)
      : n_classes_(n_classes),
        n_relations_(n_relations),
        counts_(n_classes * n_classes * n_relations, 0) {}

  void add(std::size_t subject_class, std::size_t object_class, std::size_t relation,
           std::int64_t count = 1) {
    check(subject_class, object_class);
    if (relation >= n_relations_) throw Error("RelationPrior: relation id out of range");
    counts_[offset(subject_class, object_class) + relation] += count;
    log_table_.clear();
  }

  /// Precomputes every log-prior; log_prior() then reads from the table.
  void build_log_table() {
    std::vector<double> table(counts_.size());
    for (std::size_t s = 0; s < n_classes_; ++s) {
      for (std::size_t o = 0; o < n_classes_; ++o) {
        auto lp = compute(s, o);
        std::copy(lp.begin(), lp.end(), table.begin() + static_cast<std::ptrdiff_t>(offset(s, o)));
      }
    }
    log_table_ = std::move(table);
  }

  /// Log-probabilities for one class pair; a proper distribution over R.
  std::vector<double> log_prior(std::size_t subject_class, std::size_t object_class) const {
    check(subject_class, object_class);
    if (!log_table_.empty()) {
      const auto first = log_table_.begin() +
                         static_cast<std::ptrdiff_t>(offset(subject_class, object_class));
      return {first, first + static_cast<std::ptrdiff_t>(n_relations_)};
    }
    return compute(subject_class, object_class);
  }

  std::size_t n_classes() const { return n_classes_; }
  std::size_t n_relations() const { return n_relations_; }
  bool empty() const { return counts_.empty(); }
  std::span<const std::int64_t> counts() const { return counts_; }
  std::span<std::int64_t> mutable_counts() {
    log_table_.clear();
    return counts_;
  }

 private:
  std::vector<double> compute(std::size_t subject_class, std::size_t object_class) const {
    const std::size_t base = offset(subject_class, object_class);
    double total = static_cast<double>(n_relations_);
    for (std::size_t r = 0; r < n_relations_; ++r) total += static_cast<double>(counts_[base + r]);
    std::vector<double> out(n_relations_);
    const double log_total = std::log(total);
    for (std::size_t r = 0; r < n_relations_; ++r) {
      out[r] = std::log(static_cast<double>(counts_[base + r]) + 1.0) - log_total;
    }
    return out;
  }

  void check(std::size_t s, std::size_t o) const {
    if (s >= n_classes_ || o >= n_classes_) {
      throw Error("RelationPrior: class id out of range (" + std::to_string(s) + ", " +
                  std::to_string(o) + ")");
    }
  }
  std::size_t offset(std::size_t s, std::size_t o) const {
    return (s * n_classes_ + o) * n_relations_;
  }

  std::size_t n_classes_ = 0;
  std::size_t n_relations_ = 0;
  std::vector<std::int64_t> counts_;
  std::vector<double> log_table_;
};

struct ClassPair {
  std::size_t subject = 0;
  std::size_t object = 0;
};

/// final_head * f, plus the log-prior of the class pair when a prior is given.
template <std::floating_point T>
DiffTensor<T> relation_logits(const DiffTensor<T>& feature, const DiffTensor<T>& final_head,
                              const RelationPrior* prior = nullptr,
                              std::optional<ClassPair> classes = std::nullopt) {
  auto logits = numerics::matvec(final_head, feature);
  if (prior == nullptr) return logits;
  if (!classes) throw Error("relation_logits: class ids are required when the prior is enabled");
  if (prior->n_relations() != final_head.rows()) {
    throw Error("relation_logits: prior covers " + std::to_string(prior->n_relations()) +
                " relations, head has " + std::to_string(final_head.rows()));
  }
  auto lp = prior->log_prior(classes->subject, classes->object);
  return numerics::add(logits, DiffTensor<T>::vector(std::vector<T>(lp.begin(), lp.end())));
}

}  // namespace sgg::relation
