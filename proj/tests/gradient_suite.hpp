#pragma once

// Finite-difference cases shared by the unit tests and the acceptance run.
// Each case draws one random instance and returns its worst gradient error.

#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "sgg/data.hpp"
#include "sgg/geometry.hpp"
#include "sgg/model.hpp"
#include "sgg/numerics.hpp"
#include "sgg/relation_head.hpp"
#include "sgg/scene_interaction.hpp"
#include "sgg/training.hpp"
#include "support.hpp"

namespace sgg::testing {

template <std::floating_point T>
struct GradCase {
  std::string name;
  std::function<double(std::mt19937_64&)> run;
};

template <std::floating_point T>
T default_step() {
  return std::is_same_v<T, double> ? T(1e-5) : T(1e-2);
}

/// A two-object scene with one annotated triple and random features.
template <class Rng>
data::SceneSample toy_scene(std::size_t d_v, std::size_t n_classes, std::size_t n_relations, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> cls(0, n_classes - 1);
  std::uniform_int_distribution<std::size_t> rel(1, n_relations - 1);
  std::uniform_real_distribution<double> pos(0.0, 0.5), size(0.1, 0.5);
  auto feature = [&] {
    std::vector<double> f(d_v);
    for (auto& v : f) v = n(rng);
    return f;
  };
  auto box = [&] {
    const double x = pos(rng), y = pos(rng);
    return geometry::BoundingBox{x, y, x + size(rng), y + size(rng)};
  };
  data::SceneSample s;
  s.image_id = "toy";
  s.objects = {{box(), cls(rng), feature()}, {box(), cls(rng), feature()}};
  s.scene_feature = feature();
  s.union_features[{0, 1}] = feature();
  s.gt_triples = {{0, rel(rng), 1}};
  return s;
}

template <std::floating_point T>
std::vector<GradCase<T>> gradient_cases() {
  using DT = DiffTensor<T>;
  const T h = default_step<T>();
  auto size = [](std::mt19937_64& rng) { return std::uniform_int_distribution<std::size_t>(1, 6)(rng); };
  std::vector<GradCase<T>> cases;

  auto binary = [&](std::string name, std::function<DT(const DT&, const DT&)> op, bool scalar_rhs) {
    cases.push_back({name, [=](std::mt19937_64& rng) {
                       const auto n = size(rng);
                       auto a = random_tensor<T>({n}, rng);
                       auto b = random_tensor<T>({scalar_rhs ? std::size_t{1} : n}, rng);
                       auto w = random_weights<T>(n, rng);
                       return gradcheck<T>({a, b}, [&] { return project(op(a, b), w); }, h);
                     }});
  };
  binary("add", [](const DT& a, const DT& b) { return numerics::add(a, b); }, false);
  binary("add (scalar)", [](const DT& a, const DT& b) { return numerics::add(a, b); }, true);
  binary("sub", [](const DT& a, const DT& b) { return numerics::sub(a, b); }, false);
  binary("mul", [](const DT& a, const DT& b) { return numerics::mul(a, b); }, false);
  binary("mul (scalar)", [](const DT& a, const DT& b) { return numerics::mul(a, b); }, true);

  auto unary = [&](std::string name, std::function<DT(const DT&)> op, double scale) {
    cases.push_back({name, [=](std::mt19937_64& rng) {
                       const auto n = size(rng);
                       auto a = random_tensor<T>({n}, rng, scale);
                       auto w = random_weights<T>(n, rng);
                       return gradcheck<T>({a}, [&] { return project(op(a), w); }, h);
                     }});
  };
  unary("relu", [](const DT& a) { return numerics::relu(a); }, 1.0);
  unary("scale", [](const DT& a) { return numerics::scale(a, T(-2.5)); }, 1.0);
  unary("shift", [](const DT& a) { return numerics::shift(a, T(0.75)); }, 1.0);
  unary("sigmoid", [](const DT& a) { return numerics::sigmoid(a); }, 3.0);
  unary("softmax", [](const DT& a) { return numerics::softmax(a); }, 3.0);

  auto reduce = [&](std::string name, std::function<DT(const DT&)> op) {
    cases.push_back({name, [=](std::mt19937_64& rng) {
                       auto a = random_tensor<T>({size(rng)}, rng);
                       return gradcheck<T>({a}, [&] { return op(a); }, h);
                     }});
  };
  reduce("sum", [](const DT& a) { return numerics::sum(a); });
  reduce("max", [](const DT& a) { return numerics::max(a); });

  cases.push_back({"dot", [=](std::mt19937_64& rng) {
                     const auto n = size(rng);
                     auto a = random_tensor<T>({n}, rng), b = random_tensor<T>({n}, rng);
                     return gradcheck<T>({a, b}, [&] { return numerics::dot(a, b); }, h);
                   }});
  cases.push_back({"matvec", [=](std::mt19937_64& rng) {
                     const auto m = size(rng), n = size(rng);
                     auto W = random_tensor<T>({m, n}, rng), x = random_tensor<T>({n}, rng);
                     auto w = random_weights<T>(m, rng);
                     return gradcheck<T>({W, x}, [&] { return project(numerics::matvec(W, x), w); }, h);
                   }});
  cases.push_back({"transposed_matvec", [=](std::mt19937_64& rng) {
                     const auto m = size(rng), n = size(rng);
                     auto W = random_tensor<T>({m, n}, rng), y = random_tensor<T>({m}, rng);
                     auto w = random_weights<T>(n, rng);
                     return gradcheck<T>(
                         {W, y}, [&] { return project(numerics::transposed_matvec(W, y), w); }, h);
                   }});
  cases.push_back({"concat", [=](std::mt19937_64& rng) {
                     const auto n = size(rng), m = size(rng);
                     auto a = random_tensor<T>({n}, rng), b = random_tensor<T>({m}, rng);
                     auto w = random_weights<T>(n + m, rng);
                     return gradcheck<T>({a, b}, [&] { return project(numerics::concat(a, b), w); }, h);
                   }});
  cases.push_back({"cross_entropy", [=](std::mt19937_64& rng) {
                     const auto n = size(rng);
                     auto z = random_tensor<T>({n}, rng, 3.0);
                     const auto label = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
                     return gradcheck<T>({z}, [&] { return numerics::cross_entropy(z, label); }, h);
                   }});
  cases.push_back({"weighted_bce", [=](std::mt19937_64& rng) {
                     const auto n = size(rng);
                     auto z = random_tensor<T>({n}, rng, 3.0);
                     std::vector<T> targets(n), weights(n);
                     std::bernoulli_distribution coin(0.5);
                     std::uniform_real_distribution<double> wd(0.1, 2.0);
                     for (std::size_t i = 0; i < n; ++i) {
                       targets[i] = coin(rng) ? T{1} : T{0};
                       weights[i] = static_cast<T>(wd(rng));
                     }
                     return gradcheck<T>({z}, [&] {
                       return numerics::weighted_bce(numerics::sigmoid(z), std::span<const T>(targets),
                                                     std::span<const T>(weights));
                     }, h);
                   }});
  cases.push_back({"l1_distance", [=](std::mt19937_64& rng) {
                     const auto n = size(rng);
                     auto a = random_tensor<T>({n}, rng), b = random_tensor<T>({n}, rng);
                     return gradcheck<T>({a, b}, [&] { return numerics::l1_distance(a, b); }, h);
                   }});
  cases.push_back({"row_l1_distances", [=](std::mt19937_64& rng) {
                     const auto m = size(rng), n = size(rng);
                     auto M = random_tensor<T>({m, n}, rng), x = random_tensor<T>({n}, rng);
                     auto w = random_weights<T>(m, rng);
                     return gradcheck<T>(
                         {M, x}, [&] { return project(numerics::row_l1_distances(M, x), w); }, h);
                   }});
  cases.push_back({"shared input", [=](std::mt19937_64& rng) {
                     const auto n = size(rng);
                     auto x = random_tensor<T>({n}, rng);
                     auto w = random_weights<T>(n, rng);
                     return gradcheck<T>({x}, [&] {
                       return numerics::add(numerics::sum(numerics::mul(x, x)),
                                            numerics::dot(numerics::relu(x), w));
                     }, h);
                   }});

  // Pipeline pieces.
  cases.push_back({"lift_spatial", [=](std::mt19937_64& rng) {
                     const auto d = size(rng);
                     geometry::SpatialLift<T> lift{random_tensor<T>({d, 5}, rng), random_tensor<T>({d}, rng)};
                     const auto raw = geometry::relative_spatial({0.1, 0.2, 0.5, 0.6}, {0.3, 0.1, 0.9, 0.4});
                     auto w = random_weights<T>(d, rng);
                     return gradcheck<T>({lift.weight, lift.bias},
                                         [&] { return project(geometry::lift_spatial(raw, lift), w); }, h);
                   }});
  cases.push_back({"interaction + refine", [=](std::mt19937_64& rng) {
                     const auto n = size(rng);
                     auto fo = random_tensor<T>({n}, rng), fs = random_tensor<T>({n}, rng);
                     auto wg = random_tensor<T>({n}, rng);
                     auto w = random_weights<T>(n, rng);
                     return gradcheck<T>({fo, fs, wg}, [&] {
                       auto a = scene::interaction_coefficient(fo, fs, wg);
                       return project(scene::refine_object_feature(fo, fs, a), w);
                     }, h);
                   }});
  cases.push_back({"scene_multilabel_loss", [=](std::mt19937_64& rng) {
                     const auto d = size(rng), c = size(rng);
                     auto fs = random_tensor<T>({d}, rng);
                     scene::Affine<T> head{random_tensor<T>({c, d}, rng), random_tensor<T>({c}, rng)};
                     std::vector<T> targets(c, T{0}), weights(c);
                     targets[0] = T{1};
                     std::uniform_real_distribution<double> wd(0.1, 2.0);
                     for (auto& v : weights) v = static_cast<T>(wd(rng));
                     return gradcheck<T>({fs, head.weight, head.bias}, [&] {
                       return scene::scene_multilabel_loss(fs, head, std::span<const T>(targets),
                                                           std::span<const T>(weights));
                     }, h);
                   }});
  cases.push_back({"triple_feature", [=](std::mt19937_64& rng) {
                     const auto n = size(rng), d = size(rng);
                     auto fi = random_tensor<T>({n}, rng), fu = random_tensor<T>({n}, rng);
                     auto fj = random_tensor<T>({n}, rng), s = random_tensor<T>({d}, rng);
                     auto w = random_weights<T>(n + d, rng);
                     return gradcheck<T>({fi, fu, fj, s},
                                         [&] { return project(relation::triple_feature(fi, fu, fj, s), w); }, h);
                   }});
  cases.push_back({"codeword_loss", [=](std::mt19937_64& rng) {
                     const auto r = size(rng) + 1, d = size(rng);
                     auto f = random_tensor<T>({d}, rng), D = random_tensor<T>({r, d}, rng);
                     const auto label = std::uniform_int_distribution<std::size_t>(0, r - 1)(rng);
                     return gradcheck<T>({f, D}, [&] {
                       return relation::codeword_loss(f, label, D, T(1.3));
                     }, h);
                   }});
  cases.push_back({"coarse + hallucinate + fuse + calibrate", [=](std::mt19937_64& rng) {
                     const auto r = size(rng) + 1, d = size(rng);
                     auto f = random_tensor<T>({d}, rng), W = random_tensor<T>({r, d}, rng);
                     auto b = random_tensor<T>({r}, rng), D = random_tensor<T>({r, d}, rng);
                     auto wf = random_tensor<T>({d}, rng);
                     auto w = random_weights<T>(d, rng);
                     return gradcheck<T>({f, W, b, D, wf}, [&] {
                       auto p = relation::coarse_predict(f, W, b);
                       auto fused = relation::fuse(f, relation::hallucinate(p, D), wf);
                       return project(relation::calibrate(fused.feature, p, T(10)), w);
                     }, h);
                   }});
  cases.push_back({"relation_logits (prior)", [=](std::mt19937_64& rng) {
                     const auto r = size(rng) + 1, d = size(rng);
                     relation::RelationPrior prior(3, r);
                     prior.add(1, 2, r - 1, 5);
                     auto f = random_tensor<T>({d}, rng), H = random_tensor<T>({r, d}, rng);
                     const auto label = std::uniform_int_distribution<std::size_t>(0, r - 1)(rng);
                     return gradcheck<T>({f, H}, [&] {
                       return numerics::cross_entropy(
                           relation::relation_logits(f, H, &prior, relation::ClassPair{1, 2}), label);
                     }, h);
                   }});

  // Composite step loss on a two-object scene, every learnable block at once.
  cases.push_back({"composite loss", [=](std::mt19937_64& rng) {
                     model::ModelConfig c;
                     c.n_object_classes = 5;
                     c.n_relations = 4;
                     c.d_v = 4;
                     c.d_s = 3;
                     auto params = model::ModelParams<T>::zeros(c);
                     auto blocks = params.blocks(c);
                     std::vector<DT> inputs;
                     for (auto& b : blocks) {
                       auto r = random_tensor<T>(b.tensor.shape(), rng, 0.7);
                       std::copy(r.value().begin(), r.value().end(), b.tensor.mutable_value().begin());
                       inputs.push_back(b.tensor);
                     }
                     params.class_weights = {0.5, 1.5, 1.0, 0.8, 1.2};
                     params.prior = relation::RelationPrior(c.n_object_classes, c.n_relations);
                     params.prior.add(0, 1, 2, 3);
                     params.prior.build_log_table();
                     model::Model<T> m(c, params);
                     const auto scene = toy_scene(c.d_v, c.n_object_classes, c.n_relations, rng);
                     const std::vector<training::LabeledPair> pairs{
                         {0, 1, scene.gt_triples[0].relation}, {1, 0, data::kNoneRelation}};
                     // L_obj is left out: it sees refined features through a detach,
                     // which finite differences cannot mimic.
                     return gradcheck<T>(inputs, [&] {
                       auto l = training::scene_losses(m, scene, std::span<const training::LabeledPair>(pairs),
                                                       T(0.01));
                       return training::total_loss(l.scene, l.coarse, l.relation, l.codeword, T(0.01));
                     }, h);
                   }});
  return cases;
}

}  // namespace sgg::testing
