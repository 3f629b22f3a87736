#pragma once

// The relation model assembled from its parts. Which blocks exist depends on
// the module switches:
//
//   always      spatial lift, object head, final relation head
//   SO          scene projection, w_g, multi-label head (+ class weights)
//   KT          coarse head, w_f, codebook
//   FC          no parameters; rescales the fused feature by alpha * max(p)
//   bias        frequency prior (counts, not learned)

#include <array>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgg/data.hpp"
#include "sgg/error.hpp"
#include "sgg/geometry.hpp"
#include "sgg/numerics.hpp"
#include "sgg/relation_head.hpp"
#include "sgg/scene_interaction.hpp"

namespace sgg::model {

using numerics::DiffTensor;

struct ModelConfig {
  std::size_t n_object_classes = 150;
  std::size_t n_relations = 50;
  std::size_t d_v = 64;
  std::size_t d_s = 16;
  bool scene_object = true;
  bool knowledge_transfer = true;
  bool calibration = true;
  bool frequency_bias = true;
  double alpha = 10.0;
  double margin = 1.0;
  bool detach_confidence = false;

  std::size_t d_t() const { return d_v + d_s; }

  void validate() const {
    if (n_object_classes < 1 || n_relations < 2 || d_v < 1 || d_s < 1) {
      throw Error("model config: class counts and dimensions must be positive");
    }
    if (calibration && !knowledge_transfer) {
      throw Error("model config: calibration requires knowledge transfer (it consumes p)");
    }
    if (!(alpha > 0)) throw Error("model config: alpha must be positive");
    if (!(margin > 0)) throw Error("model config: margin must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_object_classes", c.n_object_classes},
          {"n_relations", c.n_relations},
          {"d_v", c.d_v},
          {"d_s", c.d_s},
          {"scene_object", c.scene_object},
          {"knowledge_transfer", c.knowledge_transfer},
          {"calibration", c.calibration},
          {"frequency_bias", c.frequency_bias},
          {"alpha", c.alpha},
          {"margin", c.margin},
          {"detach_confidence", c.detach_confidence}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_object_classes = j.at("n_object_classes").get<std::size_t>();
    c.n_relations = j.at("n_relations").get<std::size_t>();
    c.d_v = j.at("d_v").get<std::size_t>();
    c.d_s = j.at("d_s").get<std::size_t>();
    c.scene_object = j.at("scene_object").get<bool>();
    c.knowledge_transfer = j.at("knowledge_transfer").get<bool>();
    c.calibration = j.at("calibration").get<bool>();
    c.frequency_bias = j.at("frequency_bias").get<bool>();
    c.alpha = j.at("alpha").get<double>();
    c.margin = j.at("margin").get<double>();
    c.detach_confidence = j.at("detach_confidence").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("model config: ") + e.what());
  }
  return c;
}

/// FNV-1a over the canonical JSON of the config.
inline std::string config_hash(const ModelConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <std::floating_point T>
struct NamedBlock {
  std::string name;
  DiffTensor<T> tensor;
};

template <std::floating_point T = double>
struct ModelParams {
  geometry::SpatialLift<T> spatial;
  scene::Affine<T> object_head;
  DiffTensor<T> final_head;  // |R| x d_t, no bias

  // Scene-object interaction.
  DiffTensor<T> w_g;
  DiffTensor<T> scene_projection;  // d_v x d_v
  scene::Affine<T> multilabel_head;
  std::vector<double> class_weights;

  // Knowledge transfer.
  scene::Affine<T> coarse_head;
  DiffTensor<T> w_f;
  DiffTensor<T> codebook;  // |R| x d_t

  relation::RelationPrior prior;

  /// Learnable blocks of the enabled modules, in a fixed order.
  std::vector<NamedBlock<T>> blocks(const ModelConfig& c) const {
    std::vector<NamedBlock<T>> out{{"spatial.weight", spatial.weight},
                                   {"spatial.bias", spatial.bias},
                                   {"object.weight", object_head.weight},
                                   {"object.bias", object_head.bias},
                                   {"relation.final", final_head}};
    if (c.scene_object) {
      out.push_back({"scene.w_g", w_g});
      out.push_back({"scene.projection", scene_projection});
      out.push_back({"scene.multilabel.weight", multilabel_head.weight});
      out.push_back({"scene.multilabel.bias", multilabel_head.bias});
    }
    if (c.knowledge_transfer) {
      out.push_back({"kt.coarse.weight", coarse_head.weight});
      out.push_back({"kt.coarse.bias", coarse_head.bias});
      out.push_back({"kt.w_f", w_f});
      out.push_back({"kt.codebook", codebook});
    }
    return out;
  }

  /// Expected shape of every learnable block under `c`.
  static std::vector<std::pair<std::string, numerics::Shape>> block_shapes(const ModelConfig& c) {
    const std::size_t C = c.n_object_classes, R = c.n_relations, dv = c.d_v, dt = c.d_t();
    std::vector<std::pair<std::string, numerics::Shape>> out{
        {"spatial.weight", {c.d_s, 5}}, {"spatial.bias", {c.d_s}},  {"object.weight", {C, dv}},
        {"object.bias", {C}},           {"relation.final", {R, dt}}};
    if (c.scene_object) {
      out.push_back({"scene.w_g", {dv}});
      out.push_back({"scene.projection", {dv, dv}});
      out.push_back({"scene.multilabel.weight", {C, dv}});
      out.push_back({"scene.multilabel.bias", {C}});
    }
    if (c.knowledge_transfer) {
      out.push_back({"kt.coarse.weight", {R, dt}});
      out.push_back({"kt.coarse.bias", {R}});
      out.push_back({"kt.w_f", {dt}});
      out.push_back({"kt.codebook", {R, dt}});
    }
    return out;
  }

  /// Zero-valued blocks (requiring gradients) for every module of `c`.
  static ModelParams zeros(const ModelConfig& c) {
    c.validate();
    const std::size_t C = c.n_object_classes, R = c.n_relations, dv = c.d_v, dt = c.d_t();
    ModelParams p;
    p.spatial = geometry::SpatialLift<T>::zeros(c.d_s);
    p.object_head = scene::Affine<T>::zeros(C, dv);
    p.final_head = DiffTensor<T>::zeros({R, dt}, true);
    if (c.scene_object) {
      p.w_g = DiffTensor<T>::zeros({dv}, true);
      p.scene_projection = DiffTensor<T>::zeros({dv, dv}, true);
      p.multilabel_head = scene::Affine<T>::zeros(C, dv);
      p.class_weights.assign(C, 1.0);
    }
    if (c.knowledge_transfer) {
      p.coarse_head = scene::Affine<T>::zeros(R, dt);
      p.w_f = DiffTensor<T>::zeros({dt}, true);
      p.codebook = DiffTensor<T>::zeros({R, dt}, true);
    }
    if (c.frequency_bias) p.prior = relation::RelationPrior(C, R);
    return p;
  }

  /// Deep copy; the result shares no storage with this.
  ModelParams clone(const ModelConfig& c) const {
    ModelParams p = zeros(c);
    auto src = blocks(c);
    auto dst = p.blocks(c);
    for (std::size_t k = 0; k < src.size(); ++k) {
      auto from = src[k].tensor.value();
      auto to = dst[k].tensor.mutable_value();
      std::copy(from.begin(), from.end(), to.begin());
    }
    p.class_weights = class_weights;
    p.prior = prior;
    return p;
  }
};

/// Random initial values. The codebook stays zero until it is initialised
/// from training features.
template <std::floating_point T, class Rng>
ModelParams<T> init_params(const ModelConfig& c, Rng& rng) {
  auto p = ModelParams<T>::zeros(c);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](DiffTensor<T>& t, double stddev, double mean = 0.0) {
    for (auto& v : t.mutable_value()) v = static_cast<T>(mean + stddev * normal(rng));
  };
  fill(p.spatial.weight, 0.3);
  for (auto& v : p.spatial.bias.mutable_value()) v = T(0.1);
  fill(p.final_head, 0.01);
  if (c.scene_object) {
    // w_g starts near the constant 1/d_v so the gate opens for typical inputs.
    fill(p.w_g, 0.01 / static_cast<double>(c.d_v), 1.0 / static_cast<double>(c.d_v));
    auto proj = p.scene_projection.mutable_value();
    for (std::size_t k = 0; k < c.d_v; ++k) proj[k * c.d_v + k] = T{1};
  }
  if (c.knowledge_transfer) {
    fill(p.coarse_head.weight, 0.01);
    fill(p.w_f, 0.01 / static_cast<double>(c.d_t()));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward passes.

template <std::floating_point T>
struct ObjectEncoding {
  std::vector<DiffTensor<T>> refined;
  std::vector<DiffTensor<T>> coefficients;  // SO only
  std::optional<DiffTensor<T>> scene_feature;
};

template <std::floating_point T>
struct PairOutput {
  DiffTensor<T> triple;  // f^t
  std::optional<DiffTensor<T>> coarse_logits;
  std::optional<DiffTensor<T>> coarse_probs;
  std::optional<DiffTensor<T>> fusion_coefficient;
  DiffTensor<T> feature;  // input to the final head
  DiffTensor<T> logits;
};

template <std::floating_point T = double>
class Model {
 public:
  Model(ModelConfig config, ModelParams<T> params)
      : config_(std::move(config)), params_(std::move(params)) {
    config_.validate();
  }

  const ModelConfig& config() const { return config_; }
  const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& params() { return params_; }

  /// Refines object features with the scene context (SO) or passes them
  /// through. Without a scene feature the mean object feature stands in.
  ObjectEncoding<T> encode_objects(std::span<const std::span<const double>> features,
                                   const std::optional<std::vector<double>>& scene_feature) const {
    ObjectEncoding<T> enc;
    for (auto f : features) {
      if (f.size() != config_.d_v) {
        throw Error("encode_objects: feature width " + std::to_string(f.size()) + ", expected " +
                    std::to_string(config_.d_v));
      }
      enc.refined.push_back(DiffTensor<T>::vector(f));
    }
    if (!config_.scene_object) return enc;

    std::vector<double> source;
    if (scene_feature) {
      source = *scene_feature;
    } else {
      source.assign(config_.d_v, 0.0);
      for (auto f : features) {
        for (std::size_t k = 0; k < f.size(); ++k) source[k] += f[k];
      }
      for (auto& v : source) v /= static_cast<double>(features.size());
    }
    auto fs = numerics::matvec(params_.scene_projection,
                               DiffTensor<T>::vector(std::span<const double>(source)));
    for (auto& f : enc.refined) {
      auto a = scene::interaction_coefficient(f, fs, params_.w_g);
      f = scene::refine_object_feature(f, fs, a);
      enc.coefficients.push_back(a);
    }
    enc.scene_feature = fs;
    return enc;
  }

  /// Class-weighted multi-label loss of the scene feature (SO only).
  DiffTensor<T> scene_loss(const ObjectEncoding<T>& enc, std::span<const double> targets) const {
    if (!enc.scene_feature) throw Error("scene_loss: the scene-object module is disabled");
    std::vector<T> t(targets.begin(), targets.end());
    std::vector<T> w(params_.class_weights.begin(), params_.class_weights.end());
    return scene::scene_multilabel_loss(*enc.scene_feature, params_.multilabel_head,
                                        std::span<const T>(t), std::span<const T>(w));
  }

  DiffTensor<T> object_distribution(const DiffTensor<T>& refined) const {
    return scene::classify_objects(numerics::detach(refined), params_.object_head);
  }

  PairOutput<T> forward_pair(const ObjectEncoding<T>& enc, std::size_t i, std::size_t j,
                             std::span<const double> union_feature,
                             const geometry::BoundingBox& box_i,
                             const geometry::BoundingBox& box_j,
                             std::optional<relation::ClassPair> classes) const {
    auto spatial = geometry::lift_spatial(geometry::relative_spatial(box_i, box_j), params_.spatial);
    auto fu = DiffTensor<T>::vector(union_feature);
    auto ft = relation::triple_feature(enc.refined.at(i), fu, enc.refined.at(j), spatial);
    PairOutput<T> out{ft, std::nullopt, std::nullopt, std::nullopt, ft, ft};
    if (config_.knowledge_transfer) {
      auto coarse = params_.coarse_head(ft);
      auto p = numerics::softmax(coarse);
      auto hallucinated = relation::hallucinate(p, params_.codebook);
      auto fused = relation::fuse(ft, hallucinated, params_.w_f);
      out.coarse_logits = coarse;
      out.coarse_probs = p;
      out.fusion_coefficient = fused.coefficient;
      out.feature = fused.feature;
      if (config_.calibration) {
        out.feature = relation::calibrate(out.feature, p, static_cast<T>(config_.alpha),
                                          config_.detach_confidence);
      }
    }
    out.logits = relation::relation_logits(
        out.feature, params_.final_head, config_.frequency_bias ? &params_.prior : nullptr,
        classes);
    return out;
  }

 private:
  ModelConfig config_;
  ModelParams<T> params_;
};

/// Feature views of a scene's objects, in object order.
inline std::vector<std::span<const double>> object_features(const data::SceneSample& s) {
  std::vector<std::span<const double>> out;
  for (const auto& o : s.objects) out.emplace_back(o.feature);
  return out;
}

inline std::vector<std::span<const double>> object_features(const data::DetectionSet& d) {
  std::vector<std::span<const double>> out;
  for (const auto& x : d.detections) out.emplace_back(x.feature);
  return out;
}

/// Add-one-smoothed predicate counts per (subject class, object class) from
/// annotated triples; unannotated ordered pairs count toward the none relation.
inline relation::RelationPrior build_prior(const std::vector<data::SceneSample>& scenes,
                                           std::size_t n_classes, std::size_t n_relations) {
  relation::RelationPrior prior(n_classes, n_relations);
  for (const auto& s : scenes) {
    std::vector<std::vector<bool>> related(s.objects.size(),
                                           std::vector<bool>(s.objects.size(), false));
    for (const auto& t : s.gt_triples) {
      prior.add(s.objects[t.subject].label, s.objects[t.object].label, t.relation);
      related[t.subject][t.object] = true;
    }
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      for (std::size_t j = 0; j < s.objects.size(); ++j) {
        if (i != j && !related[i][j]) {
          prior.add(s.objects[i].label, s.objects[j].label, data::kNoneRelation);
        }
      }
    }
  }
  return prior;
}

}  // namespace sgg::model
