#pragma once

// Synthetic long-tail scene generator.
//
// Each scene draws a latent context k. Relations are sampled i.i.d. from a
// Zipf law over ids 1..|R|-1, so the global histogram follows the target mass
// regardless of context. The context multiplies each union-region feature by a
// fixed +/-1 pattern g_k; the scene feature carries g_k (plus a summary of the
// present object classes), so a model that mixes scene context into object
// features can undo the pattern while one that ignores the scene cannot.
//
//   object feature  = 1 + class_signal * z_c + object_noise * eps
//   union feature   = union_scale * (g_k * pi_r + noise_sigma * eps)   (annotated pairs)
//   scene feature   = g_k + class_signal * mean_i z_{c_i} + scene_noise * eps
//
// Subject/object classes lean toward per-relation pools, and the object box is
// placed at a per-relation offset from the subject box, so class pairs and
// layout are informative too.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgg/data.hpp"
#include "sgg/error.hpp"

namespace sgg::data {

struct GeneratorConfig {
  std::size_t n_object_classes = 150;
  std::size_t n_relations = 50;
  double zipf_exponent = 1.5;
  std::size_t objects_min = 5;
  std::size_t objects_max = 12;
  std::size_t scenes = 3000;
  double test_fraction = 0.2;
  std::size_t d_v = 64;
  std::size_t d_s = 16;
  /// Noise on union-region features, the main difficulty knob.
  double noise_sigma = 2.25;
  /// Overall magnitude of union-region features.
  double union_scale = 0.3;
  double object_noise = 0.2;
  double scene_noise = 0.2;
  double class_signal = 0.4;
  std::size_t n_contexts = 4;
  double context_flip = 0.5;
  /// Annotated triples per object.
  double triple_density = 0.8;
  double class_affinity = 0.8;
  std::size_t class_pool = 6;
  double spatial_signal = 0.3;
  bool detections = true;
  std::uint64_t seed = 7;

  void validate() const {
    if (n_object_classes < 1) throw Error("generator: n_object_classes must be positive");
    if (n_relations < 2) throw Error("generator: n_relations must be at least 2 (none + one)");
    if (!(zipf_exponent > 0)) throw Error("generator: zipf_exponent must be positive");
    if (objects_min < 2) throw Error("generator: objects_per_scene must be at least 2");
    if (objects_max < objects_min) throw Error("generator: objects_max < objects_min");
    if (scenes < 2) throw Error("generator: need at least two scenes");
    if (!(test_fraction > 0 && test_fraction < 1)) {
      throw Error("generator: test_fraction must lie in (0, 1)");
    }
    if (d_v < 1 || d_s < 1) throw Error("generator: feature dimensions must be positive");
    if (n_contexts < 1) throw Error("generator: n_contexts must be positive");
    if (class_pool < 1) throw Error("generator: class_pool must be positive");
    if (!(triple_density > 0)) throw Error("generator: triple_density must be positive");
    for (double v :
         {noise_sigma, union_scale, object_noise, scene_noise, class_signal, spatial_signal}) {
      if (!(v >= 0)) throw Error("generator: noise and signal scales must be non-negative");
    }
    for (double v : {context_flip, class_affinity}) {
      if (!(v >= 0 && v <= 1)) throw Error("generator: probabilities must lie in [0, 1]");
    }
  }
};

inline nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"n_object_classes", c.n_object_classes},
          {"n_relations", c.n_relations},
          {"zipf_exponent", c.zipf_exponent},
          {"objects_min", c.objects_min},
          {"objects_max", c.objects_max},
          {"scenes", c.scenes},
          {"test_fraction", c.test_fraction},
          {"d_v", c.d_v},
          {"d_s", c.d_s},
          {"noise_sigma", c.noise_sigma},
          {"union_scale", c.union_scale},
          {"object_noise", c.object_noise},
          {"scene_noise", c.scene_noise},
          {"class_signal", c.class_signal},
          {"n_contexts", c.n_contexts},
          {"context_flip", c.context_flip},
          {"triple_density", c.triple_density},
          {"class_affinity", c.class_affinity},
          {"class_pool", c.class_pool},
          {"spatial_signal", c.spatial_signal},
          {"detections", c.detections},
          {"seed", c.seed}};
}

/// Overwrites fields present in `j`; unknown keys are rejected.
inline void apply_json(GeneratorConfig& c, const nlohmann::json& j) {
  const auto defaults = to_json(GeneratorConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw Error("generator config: unknown key '" + key + "'");
  }
  auto merged = to_json(c);
  merged.update(j);
  try {
    c.n_object_classes = merged.at("n_object_classes").get<std::size_t>();
    c.n_relations = merged.at("n_relations").get<std::size_t>();
    c.zipf_exponent = merged.at("zipf_exponent").get<double>();
    c.objects_min = merged.at("objects_min").get<std::size_t>();
    c.objects_max = merged.at("objects_max").get<std::size_t>();
    c.scenes = merged.at("scenes").get<std::size_t>();
    c.test_fraction = merged.at("test_fraction").get<double>();
    c.d_v = merged.at("d_v").get<std::size_t>();
    c.d_s = merged.at("d_s").get<std::size_t>();
    c.noise_sigma = merged.at("noise_sigma").get<double>();
    c.union_scale = merged.at("union_scale").get<double>();
    c.object_noise = merged.at("object_noise").get<double>();
    c.scene_noise = merged.at("scene_noise").get<double>();
    c.class_signal = merged.at("class_signal").get<double>();
    c.n_contexts = merged.at("n_contexts").get<std::size_t>();
    c.context_flip = merged.at("context_flip").get<double>();
    c.triple_density = merged.at("triple_density").get<double>();
    c.class_affinity = merged.at("class_affinity").get<double>();
    c.class_pool = merged.at("class_pool").get<std::size_t>();
    c.spatial_signal = merged.at("spatial_signal").get<double>();
    c.detections = merged.at("detections").get<bool>();
    c.seed = merged.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("generator config: ") + e.what());
  }
}

/// Target probability of each relation id; entry 0 (none) is 0.
inline std::vector<double> zipf_mass(std::size_t n_relations, double exponent) {
  std::vector<double> p(n_relations, 0.0);
  double total = 0;
  for (std::size_t r = 1; r < n_relations; ++r) {
    p[r] = std::pow(static_cast<double>(r), -exponent);
    total += p[r];
  }
  for (auto& v : p) v /= total;
  return p;
}

namespace detail {

struct LatentWorld {
  std::vector<std::vector<double>> class_codes;      // |C| x d_v
  std::vector<std::vector<double>> contexts;         // K x d_v, entries +/-1
  std::vector<std::vector<double>> prototypes;       // |R| x d_v
  std::vector<std::vector<std::size_t>> subject_pool;
  std::vector<std::vector<std::size_t>> object_pool;
  std::vector<std::array<double, 2>> offsets;        // per-relation layout
};

template <class Rng>
LatentWorld make_world(const GeneratorConfig& c, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution flip(c.context_flip);
  std::uniform_int_distribution<std::size_t> any_class(0, c.n_object_classes - 1);
  LatentWorld w;
  w.class_codes.assign(c.n_object_classes, std::vector<double>(c.d_v));
  for (auto& z : w.class_codes) {
    for (auto& v : z) v = normal(rng);
  }
  w.contexts.assign(c.n_contexts, std::vector<double>(c.d_v));
  for (auto& g : w.contexts) {
    for (auto& v : g) v = flip(rng) ? -1.0 : 1.0;
  }
  w.prototypes.assign(c.n_relations, std::vector<double>(c.d_v));
  for (auto& p : w.prototypes) {
    for (auto& v : p) v = normal(rng);
  }
  w.subject_pool.resize(c.n_relations);
  w.object_pool.resize(c.n_relations);
  w.offsets.resize(c.n_relations);
  for (std::size_t r = 0; r < c.n_relations; ++r) {
    for (std::size_t k = 0; k < c.class_pool; ++k) {
      w.subject_pool[r].push_back(any_class(rng));
      w.object_pool[r].push_back(any_class(rng));
    }
    w.offsets[r] = {c.spatial_signal * normal(rng), c.spatial_signal * normal(rng)};
  }
  return w;
}

template <class Rng>
BoundingBox random_box(Rng& rng, std::optional<std::array<double, 2>> center = std::nullopt) {
  std::uniform_real_distribution<double> size(0.08, 0.45);
  const double w = size(rng);
  const double h = size(rng);
  double cx;
  double cy;
  if (center) {
    cx = std::clamp((*center)[0], w / 2, 1 - w / 2);
    cy = std::clamp((*center)[1], h / 2, 1 - h / 2);
  } else {
    std::uniform_real_distribution<double> ux(w / 2, 1 - w / 2);
    std::uniform_real_distribution<double> uy(h / 2, 1 - h / 2);
    cx = ux(rng);
    cy = uy(rng);
  }
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

inline std::string image_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06zu", index);
  return buf;
}

template <class Rng>
DetectionSet make_detections(const SceneSample& scene, const GeneratorConfig& c,
                             const LatentWorld& world, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution keep(0.95);
  std::bernoulli_distribution spurious(0.5);
  std::uniform_int_distribution<std::size_t> any_class(0, c.n_object_classes - 1);

  struct Pending {
    Detection det;
    std::optional<std::size_t> source;
  };
  std::vector<Pending> pending;
  auto scores_for = [&](std::size_t label) {
    std::vector<double> logits(c.n_object_classes);
    for (std::size_t k = 0; k < logits.size(); ++k) {
      logits[k] = normal(rng) + (k == label ? 5.0 : 0.0);
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    double total = 0;
    for (auto& v : logits) total += (v = std::exp(v - top));
    for (auto& v : logits) v /= total;
    return logits;
  };
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& o = scene.objects[i];
    if (!keep(rng)) continue;
    const double jw = 0.05 * o.box.width();
    const double jh = 0.05 * o.box.height();
    BoundingBox b{o.box.x_t + jw * normal(rng), o.box.y_t + jh * normal(rng),
                  o.box.x_b + jw * normal(rng), o.box.y_b + jh * normal(rng)};
    if (!b.valid()) b = o.box;
    std::vector<double> f = o.feature;
    for (auto& v : f) v += 0.05 * normal(rng);
    pending.push_back({{b, scores_for(o.label), std::move(f)}, i});
  }
  if (spurious(rng)) {
    const std::size_t label = any_class(rng);
    std::vector<double> f(c.d_v);
    for (std::size_t k = 0; k < c.d_v; ++k) {
      f[k] = 1.0 + c.class_signal * world.class_codes[label][k] + c.object_noise * normal(rng);
    }
    pending.push_back({{random_box(rng), scores_for(label), std::move(f)}, std::nullopt});
  }
  std::shuffle(pending.begin(), pending.end(), rng);

  DetectionSet out;
  out.image_id = scene.image_id;
  std::vector<std::optional<std::size_t>> det_of_object(scene.objects.size());
  for (std::size_t d = 0; d < pending.size(); ++d) {
    if (pending[d].source) det_of_object[*pending[d].source] = d;
    out.detections.push_back(std::move(pending[d].det));
  }
  for (const auto& [key, f] : scene.union_features) {
    const auto a = det_of_object[key.first];
    const auto b = det_of_object[key.second];
    if (!a || !b) continue;
    std::vector<double> g = f;
    for (auto& v : g) v += 0.05 * normal(rng);
    out.union_features[{*a, *b}] = std::move(g);
  }
  return out;
}

}  // namespace detail

inline Dataset generate(const GeneratorConfig& c) {
  c.validate();
  std::mt19937_64 rng(c.seed);
  const auto world = detail::make_world(c, rng);

  const auto mass = zipf_mass(c.n_relations, c.zipf_exponent);
  std::discrete_distribution<std::size_t> relation_dist(mass.begin(), mass.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> n_objects(c.objects_min, c.objects_max);
  std::uniform_int_distribution<std::size_t> context_dist(0, c.n_contexts - 1);
  std::uniform_int_distribution<std::size_t> any_class(0, c.n_object_classes - 1);
  std::uniform_int_distribution<std::size_t> pool_pick(0, c.class_pool - 1);
  std::bernoulli_distribution affine(c.class_affinity);

  std::vector<SceneSample> scenes;
  scenes.reserve(c.scenes);
  for (std::size_t s = 0; s < c.scenes; ++s) {
    SceneSample scene;
    scene.image_id = detail::image_id(s);
    const std::size_t k = context_dist(rng);
    const auto& g = world.contexts[k];
    const std::size_t n = n_objects(rng);
    const std::size_t max_pairs = n * (n - 1);
    const auto m = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(c.triple_density * static_cast<double>(n))), 1,
        max_pairs);

    std::uniform_int_distribution<std::size_t> any_object(0, n - 1);
    std::set<PairKey> used;
    std::vector<std::optional<std::size_t>> labels(n);
    std::vector<std::optional<BoundingBox>> boxes(n);
    for (std::size_t t = 0; t < m; ++t) {
      const std::size_t r = relation_dist(rng);
      std::size_t i;
      std::size_t j;
      do {
        i = any_object(rng);
        j = any_object(rng);
      } while (i == j || used.contains({i, j}));
      used.insert({i, j});
      scene.gt_triples.push_back({i, r, j});
      if (!labels[i]) {
        labels[i] = affine(rng) ? world.subject_pool[r][pool_pick(rng)] : any_class(rng);
      }
      if (!labels[j]) {
        labels[j] = affine(rng) ? world.object_pool[r][pool_pick(rng)] : any_class(rng);
      }
      if (!boxes[i]) boxes[i] = detail::random_box(rng);
      if (!boxes[j]) {
        const double cx = (boxes[i]->x_t + boxes[i]->x_b) / 2 + world.offsets[r][0] +
                          0.05 * normal(rng);
        const double cy = (boxes[i]->y_t + boxes[i]->y_b) / 2 + world.offsets[r][1] +
                          0.05 * normal(rng);
        boxes[j] = detail::random_box(rng, std::array<double, 2>{cx, cy});
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!labels[i]) labels[i] = any_class(rng);
      if (!boxes[i]) boxes[i] = detail::random_box(rng);
      SceneObject o{*boxes[i], *labels[i], std::vector<double>(c.d_v)};
      const auto& z = world.class_codes[o.label];
      for (std::size_t d = 0; d < c.d_v; ++d) {
        o.feature[d] = 1.0 + c.class_signal * z[d] + c.object_noise * normal(rng);
      }
      scene.objects.push_back(std::move(o));
    }
    std::vector<double> sf(c.d_v, 0.0);
    for (const auto& o : scene.objects) {
      for (std::size_t d = 0; d < c.d_v; ++d) sf[d] += world.class_codes[o.label][d];
    }
    for (std::size_t d = 0; d < c.d_v; ++d) {
      sf[d] = g[d] + c.class_signal * sf[d] / static_cast<double>(n) + c.scene_noise * normal(rng);
    }
    scene.scene_feature = std::move(sf);
    for (const auto& t : scene.gt_triples) {
      std::vector<double> u(c.d_v);
      const auto& proto = world.prototypes[t.relation];
      for (std::size_t d = 0; d < c.d_v; ++d) {
        u[d] = c.union_scale * (g[d] * proto[d] + c.noise_sigma * normal(rng));
      }
      scene.union_features[{t.subject, t.object}] = std::move(u);
    }
    scenes.push_back(std::move(scene));
  }

  std::vector<std::size_t> order(scenes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(c.test_fraction * static_cast<double>(c.scenes))));
  std::vector<bool> is_test(scenes.size(), false);
  for (std::size_t k = 0; k < n_test; ++k) is_test[order[k]] = true;

  Dataset d;
  d.meta = {c.n_object_classes, c.n_relations, c.d_v};
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    (is_test[s] ? d.test : d.train).push_back(std::move(scenes[s]));
  }
  if (c.detections) {
    for (const auto& scene : d.test) {
      d.test_detections.push_back(detail::make_detections(scene, c, world, rng));
    }
  }
  return d;
}

/// Relation histogram and split sizes, written beside generated files.
inline nlohmann::json dataset_stats(const Dataset& d) {
  auto train = relation_histogram(d.train, d.meta.n_relations);
  auto test = relation_histogram(d.test, d.meta.n_relations);
  std::vector<std::int64_t> all(train.size());
  std::int64_t triples = 0;
  for (std::size_t r = 0; r < all.size(); ++r) {
    all[r] = train[r] + test[r];
    triples += all[r];
  }
  return {{"train_scenes", d.train.size()},
          {"test_scenes", d.test.size()},
          {"triples", triples},
          {"relation_histogram", all},
          {"train_relation_histogram", train},
          {"test_relation_histogram", test}};
}

}  // namespace sgg::data
