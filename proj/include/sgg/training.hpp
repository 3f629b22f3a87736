#pragma once

// Composite loss, SGD-with-momentum loop, and the module ablation ladder.
//
// One optimisation step consumes one scene: every annotated pair plus a
// sample of unrelated pairs labelled none. The step loss is
//   L = L_s + L_p + L_rel + epsilon * L_d  (+ L_obj, the object-classifier
// cross-entropy on detached refined features).

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgg/data.hpp"
#include "sgg/error.hpp"
#include "sgg/evaluation.hpp"
#include "sgg/model.hpp"
#include "sgg/numerics.hpp"
#include "sgg/relation_head.hpp"
#include "sgg/scene_interaction.hpp"

namespace sgg::training {

using numerics::DiffTensor;

struct TrainConfig {
  double epsilon = 0.01;
  double alpha = 10.0;
  double lr = 0.001;
  std::size_t epochs = 40;
  bool scene_object = true;
  bool knowledge_transfer = true;
  bool calibration = true;
  bool frequency_bias = true;
  std::uint64_t seed = 1;
  double lr_decay_factor = 0.5;
  std::size_t lr_decay_interval = 10;
  /// Linear ramp of the learning rate over this many epochs, applied per step.
  double warmup_epochs = 1.0;
  double momentum = 0.9;
  /// Gradient-norm ceiling per clip group and step; 0 disables clipping.
  double grad_clip = 5.0;
  double margin = 1.0;
  bool detach_confidence = false;
  /// Sampled none pairs per annotated pair, capped per scene.
  double none_ratio = 1.0;
  std::size_t none_cap = 16;
  std::size_t d_s = 16;
  /// Blocks held at zero and excluded from updates (toggle-identity checks).
  std::vector<std::string> freeze_at_zero;

  void validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw Error("train config: epsilon must be >= 0");
    if (!(alpha > 0)) throw Error("train config: alpha must be positive");
    if (!(lr >= 0) || !std::isfinite(lr)) throw Error("train config: lr must be >= 0");
    if (calibration && !knowledge_transfer) {
      throw Error("train config: calibration (FC) requires knowledge transfer (KT)");
    }
    if (!(lr_decay_factor > 0)) throw Error("train config: lr_decay_factor must be positive");
    if (lr_decay_interval == 0) throw Error("train config: lr_decay_interval must be positive");
    if (!(warmup_epochs >= 0)) throw Error("train config: warmup_epochs must be >= 0");
    if (!(momentum >= 0 && momentum < 1)) throw Error("train config: momentum must be in [0, 1)");
    if (!(grad_clip >= 0)) throw Error("train config: grad_clip must be >= 0");
    if (!(margin > 0)) throw Error("train config: margin must be positive");
    if (!(none_ratio >= 0)) throw Error("train config: none_ratio must be >= 0");
    if (d_s == 0) throw Error("train config: d_s must be positive");
  }

  model::ModelConfig model_config(const data::DatasetMeta& meta) const {
    model::ModelConfig c;
    c.n_object_classes = meta.n_object_classes;
    c.n_relations = meta.n_relations;
    c.d_v = meta.d_v;
    c.d_s = d_s;
    c.scene_object = scene_object;
    c.knowledge_transfer = knowledge_transfer;
    c.calibration = calibration;
    c.frequency_bias = frequency_bias;
    c.alpha = alpha;
    c.margin = margin;
    c.detach_confidence = detach_confidence;
    return c;
  }

  bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epsilon", c.epsilon},
          {"alpha", c.alpha},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"scene_object", c.scene_object},
          {"knowledge_transfer", c.knowledge_transfer},
          {"calibration", c.calibration},
          {"frequency_bias", c.frequency_bias},
          {"seed", c.seed},
          {"lr_decay_factor", c.lr_decay_factor},
          {"lr_decay_interval", c.lr_decay_interval},
          {"warmup_epochs", c.warmup_epochs},
          {"momentum", c.momentum},
          {"grad_clip", c.grad_clip},
          {"margin", c.margin},
          {"detach_confidence", c.detach_confidence},
          {"none_ratio", c.none_ratio},
          {"none_cap", c.none_cap},
          {"d_s", c.d_s},
          {"freeze_at_zero", c.freeze_at_zero}};
}

/// Overrides the fields present in `j`; unknown keys are an error.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw Error("train config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "epsilon") c.epsilon = v.get<double>();
      else if (key == "alpha") c.alpha = v.get<double>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "scene_object") c.scene_object = v.get<bool>();
      else if (key == "knowledge_transfer") c.knowledge_transfer = v.get<bool>();
      else if (key == "calibration") c.calibration = v.get<bool>();
      else if (key == "frequency_bias") c.frequency_bias = v.get<bool>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "lr_decay_factor") c.lr_decay_factor = v.get<double>();
      else if (key == "lr_decay_interval") c.lr_decay_interval = v.get<std::size_t>();
      else if (key == "warmup_epochs") c.warmup_epochs = v.get<double>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "grad_clip") c.grad_clip = v.get<double>();
      else if (key == "margin") c.margin = v.get<double>();
      else if (key == "detach_confidence") c.detach_confidence = v.get<bool>();
      else if (key == "none_ratio") c.none_ratio = v.get<double>();
      else if (key == "none_cap") c.none_cap = v.get<std::size_t>();
      else if (key == "d_s") c.d_s = v.get<std::size_t>();
      else if (key == "freeze_at_zero") c.freeze_at_zero = v.get<std::vector<std::string>>();
      else throw Error("train config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("train config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Loss assembly.

namespace detail {

inline void require_finite(double v, const char* name) {
  if (!std::isfinite(v)) throw NumericError(std::string("loss component ") + name + " is not finite");
}

}  // namespace detail

/// L_s + L_det + L_p + L_rel + epsilon * L_d with L_det = 0.
inline double total_loss(double l_s, double l_p, double l_rel, double l_d, double epsilon) {
  detail::require_finite(l_s, "L_s");
  detail::require_finite(l_p, "L_p");
  detail::require_finite(l_rel, "L_rel");
  detail::require_finite(l_d, "L_d");
  detail::require_finite(epsilon, "epsilon");
  return l_s + l_p + l_rel + epsilon * l_d;
}

template <std::floating_point T>
DiffTensor<T> total_loss(const DiffTensor<T>& l_s, const DiffTensor<T>& l_p,
                         const DiffTensor<T>& l_rel, const DiffTensor<T>& l_d, T epsilon) {
  detail::require_finite(static_cast<double>(l_s.item()), "L_s");
  detail::require_finite(static_cast<double>(l_p.item()), "L_p");
  detail::require_finite(static_cast<double>(l_rel.item()), "L_rel");
  detail::require_finite(static_cast<double>(l_d.item()), "L_d");
  return numerics::add(numerics::add(numerics::add(l_s, l_p), l_rel),
                       numerics::scale(l_d, epsilon));
}

struct LabeledPair {
  std::size_t subject = 0;
  std::size_t object = 0;
  std::size_t relation = 0;
};

/// Annotated pairs followed by up to min(ratio * positives, cap) unrelated
/// ordered pairs labelled none.
template <class Rng>
std::vector<LabeledPair> training_pairs(const data::SceneSample& s, double none_ratio,
                                        std::size_t none_cap, Rng& rng) {
  std::vector<LabeledPair> pairs;
  const std::size_t n = s.objects.size();
  std::vector<char> related(n * n, 0);
  for (const auto& t : s.gt_triples) {
    pairs.push_back({t.subject, t.object, t.relation});
    related[t.subject * n + t.object] = 1;
  }
  std::vector<LabeledPair> unrelated;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i != j && !related[i * n + j]) unrelated.push_back({i, j, data::kNoneRelation});
    }
  }
  const auto want = static_cast<std::size_t>(std::llround(none_ratio * static_cast<double>(pairs.size())));
  const std::size_t take = std::min({want, none_cap, unrelated.size()});
  // Partial Fisher-Yates: the first `take` entries become a uniform sample.
  for (std::size_t k = 0; k < take; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, unrelated.size() - 1);
    std::swap(unrelated[k], unrelated[pick(rng)]);
    pairs.push_back(unrelated[k]);
  }
  return pairs;
}

template <std::floating_point T>
struct SceneLosses {
  DiffTensor<T> scene;       // L_s
  DiffTensor<T> coarse;      // L_p
  DiffTensor<T> relation;    // L_rel
  DiffTensor<T> codeword;    // L_d
  DiffTensor<T> object;      // L_obj
  DiffTensor<T> objective;   // total_loss(...) + L_obj
  std::size_t relation_correct = 0;
  std::size_t object_correct = 0;
};

/// Builds the step loss of one scene over `pairs`. Disabled modules
/// contribute constant zeros.
template <std::floating_point T>
SceneLosses<T> scene_losses(const model::Model<T>& m, const data::SceneSample& s,
                            std::span<const LabeledPair> pairs, T epsilon) {
  const auto& c = m.config();
  const auto& p = m.params();
  const auto enc = m.encode_objects(model::object_features(s), s.scene_feature);
  SceneLosses<T> out{DiffTensor<T>::scalar(T{0}), DiffTensor<T>::scalar(T{0}),
                     DiffTensor<T>::scalar(T{0}), DiffTensor<T>::scalar(T{0}),
                     DiffTensor<T>::scalar(T{0}), DiffTensor<T>::scalar(T{0})};
  if (c.scene_object) out.scene = m.scene_loss(enc, s.multilabel_target(c.n_object_classes));

  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    auto logits = p.object_head(numerics::detach(enc.refined[i]));
    out.object = numerics::add(out.object, numerics::cross_entropy(logits, s.objects[i].label));
    const auto v = logits.value();
    const auto arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    out.object_correct += arg == s.objects[i].label;
  }

  for (const auto& pr : pairs) {
    const auto u = s.union_feature(pr.subject, pr.object);
    const auto& a = s.objects[pr.subject];
    const auto& b = s.objects[pr.object];
    auto f = m.forward_pair(enc, pr.subject, pr.object, u, a.box, b.box,
                            relation::ClassPair{a.label, b.label});
    out.relation = numerics::add(out.relation, numerics::cross_entropy(f.logits, pr.relation));
    const auto v = f.logits.value();
    const auto arg = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    out.relation_correct += arg == pr.relation;
    if (c.knowledge_transfer) {
      out.coarse = numerics::add(out.coarse, numerics::cross_entropy(*f.coarse_logits, pr.relation));
      out.codeword = numerics::add(
          out.codeword, relation::codeword_loss(f.triple, pr.relation, p.codebook, static_cast<T>(c.margin)));
    }
  }
  // Per-pair and per-object terms are averaged within the scene.
  if (!pairs.empty()) {
    const T inv = T{1} / static_cast<T>(pairs.size());
    out.relation = numerics::scale(out.relation, inv);
    out.coarse = numerics::scale(out.coarse, inv);
    out.codeword = numerics::scale(out.codeword, inv);
  }
  out.object = numerics::scale(out.object, T{1} / static_cast<T>(s.objects.size()));
  out.objective = numerics::add(total_loss(out.scene, out.coarse, out.relation, out.codeword, epsilon),
                                out.object);
  return out;
}

// ---------------------------------------------------------------------------
// Optimiser.

/// Per clip group: g <- g * min(1, clip / |g|);  v <- mu * v + g;  x <- x - lr * v.
/// The object head trains on detached features, so it is clipped on its own;
/// all other blocks share one norm.
class SgdMomentum {
 public:
  SgdMomentum(std::vector<model::NamedBlock<double>> blocks, double momentum, double clip = 0)
      : blocks_(std::move(blocks)), momentum_(momentum), clip_(clip) {
    for (const auto& b : blocks_) {
      velocity_.emplace_back(b.tensor.size(), 0.0);
      group_.push_back(b.name.starts_with("object.") ? 1 : 0);
    }
  }

  void zero_grad() {
    for (auto& b : blocks_) b.tensor.zero_grad();
  }

  /// L2 norm of the current gradients over all blocks.
  double grad_norm() const { return std::hypot(group_norm(0), group_norm(1)); }

  /// Applies one update. Returns false, leaving parameters untouched, if a
  /// gradient is not finite.
  bool step(double lr) {
    const std::array<double, 2> norm{group_norm(0), group_norm(1)};
    for (double n : norm) {
      if (!std::isfinite(n)) return false;
    }
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
      auto x = blocks_[k].tensor.mutable_value();
      auto g = blocks_[k].tensor.grad();
      auto& v = velocity_[k];
      const double n = norm[group_[k]];
      const double s = clip_ > 0 && n > clip_ ? clip_ / n : 1.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        v[i] = momentum_ * v[i] + s * g[i];
        x[i] -= lr * v[i];
      }
    }
    return true;
  }

  const std::vector<model::NamedBlock<double>>& blocks() const { return blocks_; }

 private:
  double group_norm(int group) const {
    double sq = 0;
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
      if (group_[k] != group) continue;
      for (double g : blocks_[k].tensor.grad()) sq += g * g;
    }
    return std::sqrt(sq);
  }

  std::vector<model::NamedBlock<double>> blocks_;
  std::vector<std::vector<double>> velocity_;
  std::vector<int> group_;
  double momentum_;
  double clip_;
};

/// Step decay every lr_decay_interval epochs, times the warmup ramp.
/// `progress` is the fraction of the current epoch completed after this step.
inline double learning_rate(const TrainConfig& c, std::size_t epoch, double progress = 1.0) {
  const double decayed =
      c.lr * std::pow(c.lr_decay_factor, static_cast<double>(epoch / c.lr_decay_interval));
  if (c.warmup_epochs <= 0) return decayed;
  return decayed * std::min(1.0, (static_cast<double>(epoch) + progress) / c.warmup_epochs);
}

/// `c` run for `epochs` epochs, with the decay interval rescaled so the
/// schedule passes through the same number of decay steps.
inline TrainConfig with_epochs(TrainConfig c, std::size_t epochs) {
  if (c.epochs == 0 || epochs == 0) throw Error("with_epochs: epoch counts must be positive");
  const double interval = static_cast<double>(c.lr_decay_interval) * static_cast<double>(epochs) /
                          static_cast<double>(c.epochs);
  c.lr_decay_interval = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(interval)));
  c.epochs = epochs;
  return c;
}

// ---------------------------------------------------------------------------
// Fit.

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  // Per-scene means.
  double total = 0;
  double scene = 0;
  double coarse = 0;
  double relation = 0;
  double codeword = 0;
  double object = 0;
  double relation_accuracy = 0;
  double object_accuracy = 0;
  double seconds = 0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"lr", r.lr},
          {"loss", {{"total", r.total},
                    {"L_s", r.scene},
                    {"L_p", r.coarse},
                    {"L_rel", r.relation},
                    {"L_d", r.codeword},
                    {"L_obj", r.object}}},
          {"train", {{"relation_accuracy", r.relation_accuracy},
                     {"object_accuracy", r.object_accuracy}}},
          {"seconds", r.seconds}};
}

struct FitResult {
  model::ModelConfig config;
  model::ModelParams<double> params;
  std::vector<EpochRecord> log;
};

/// Thrown when a step loss becomes non-finite; carries the parameters from
/// before that step.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, model::ModelConfig config,
                  model::ModelParams<double> last_good)
      : Error(what), config(std::move(config)), last_good(std::move(last_good)) {}
  model::ModelConfig config;
  model::ModelParams<double> last_good;
};

struct FitHooks {
  /// Called after every epoch with a read-only view of the model.
  std::function<void(const EpochRecord&, const model::Model<double>&)> on_epoch;
};

namespace detail {

// Independent streams so that toggling one module never shifts the random
// draws of another.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

enum : std::uint64_t { kInitStream = 1, kCodebookStream = 2, kPairStream = 3, kOrderStream = 4 };

}  // namespace detail

/// Codebook rows from the triple features of every annotated training pair
/// plus sampled none pairs, under the current parameters.
inline std::vector<double> initial_codebook(const model::Model<double>& m,
                                            const std::vector<data::SceneSample>& scenes,
                                            const TrainConfig& cfg, std::mt19937_64& rng) {
  numerics::NoGradGuard no_grad;
  std::vector<std::vector<double>> features;
  std::vector<std::size_t> labels;
  for (const auto& s : scenes) {
    const auto pairs = training_pairs(s, cfg.none_ratio, cfg.none_cap, rng);
    if (pairs.empty()) continue;
    const auto enc = m.encode_objects(model::object_features(s), s.scene_feature);
    for (const auto& pr : pairs) {
      const auto& a = s.objects[pr.subject];
      const auto& b = s.objects[pr.object];
      auto spatial = geometry::lift_spatial(geometry::relative_spatial(a.box, b.box),
                                            m.params().spatial);
      auto ft = relation::triple_feature(enc.refined[pr.subject],
                                         DiffTensor<double>::vector(s.union_feature(pr.subject, pr.object)),
                                         enc.refined[pr.object], spatial);
      features.emplace_back(ft.value().begin(), ft.value().end());
      labels.push_back(pr.relation);
    }
  }
  return relation::init_codebook(std::span<const std::vector<double>>(features),
                                 std::span<const std::size_t>(labels),
                                 static_cast<std::int64_t>(m.config().n_relations), rng);
}

inline FitResult fit(const data::Dataset& dataset, const TrainConfig& cfg, const FitHooks& hooks = {}) {
  cfg.validate();
  if (dataset.train.empty()) throw Error("fit: the training split is empty");
  const auto mc = cfg.model_config(dataset.meta);
  mc.validate();

  auto init_rng = detail::stream(cfg.seed, detail::kInitStream);
  model::Model<double> m(mc, model::init_params<double>(mc, init_rng));
  auto& params = m.params();

  auto learnable = params.blocks(mc);
  for (const auto& name : cfg.freeze_at_zero) {
    auto it = std::find_if(learnable.begin(), learnable.end(),
                           [&](const auto& b) { return b.name == name; });
    if (it == learnable.end()) {
      throw Error("freeze_at_zero: no block named '" + name + "' under this configuration");
    }
    for (auto& v : it->tensor.mutable_value()) v = 0.0;
    learnable.erase(it);
  }

  if (mc.scene_object) {
    const auto counts = data::object_class_counts(dataset.train, mc.n_object_classes);
    params.class_weights = scene::class_weights(std::span<const std::int64_t>(counts));
  }
  if (mc.frequency_bias) {
    params.prior = model::build_prior(dataset.train, mc.n_object_classes, mc.n_relations);
    params.prior.build_log_table();
  }
  if (mc.knowledge_transfer &&
      std::find(cfg.freeze_at_zero.begin(), cfg.freeze_at_zero.end(), "kt.codebook") ==
          cfg.freeze_at_zero.end()) {
    auto rng = detail::stream(cfg.seed, detail::kCodebookStream);
    const auto cb = initial_codebook(m, dataset.train, cfg, rng);
    std::copy(cb.begin(), cb.end(), params.codebook.mutable_value().begin());
  }

  SgdMomentum opt(learnable, cfg.momentum, cfg.grad_clip);
  auto pair_rng = detail::stream(cfg.seed, detail::kPairStream);
  auto order_rng = detail::stream(cfg.seed, detail::kOrderStream);
  std::vector<std::size_t> order(dataset.train.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;

  FitResult result{mc, {}, {}};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), order_rng);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = learning_rate(cfg, epoch);
    std::size_t n_pairs = 0, n_objects = 0, rel_ok = 0, obj_ok = 0;
    for (std::size_t step = 0; step < order.size(); ++step) {
      const auto& s = dataset.train[order[step]];
      const double lr = learning_rate(cfg, epoch, static_cast<double>(step + 1) /
                                                      static_cast<double>(order.size()));
      const auto pairs = training_pairs(s, cfg.none_ratio, cfg.none_cap, pair_rng);
      // Checked before the update, so the current parameters are the last good ones.
      auto diverged = [&](const std::string& why) {
        return DivergenceError("training diverged at epoch " + std::to_string(epoch + 1) +
                                   " on image '" + s.image_id + "': " + why,
                               mc, params.clone(mc));
      };
      auto loss = [&] {
        try {
          return scene_losses(m, s, std::span<const LabeledPair>(pairs), cfg.epsilon);
        } catch (const NumericError& e) {
          throw diverged(e.what());
        }
      }();
      const double objective = loss.objective.item();
      if (!std::isfinite(objective)) throw diverged("objective is not finite");
      opt.zero_grad();
      numerics::backward(loss.objective);
      if (!opt.step(lr)) throw diverged("non-finite gradient");

      rec.total += objective;
      rec.scene += loss.scene.item();
      rec.coarse += loss.coarse.item();
      rec.relation += loss.relation.item();
      rec.codeword += loss.codeword.item();
      rec.object += loss.object.item();
      n_pairs += pairs.size();
      n_objects += s.objects.size();
      rel_ok += loss.relation_correct;
      obj_ok += loss.object_correct;
    }
    const double n = static_cast<double>(order.size());
    rec.total /= n;
    rec.scene /= n;
    rec.coarse /= n;
    rec.relation /= n;
    rec.codeword /= n;
    rec.object /= n;
    rec.relation_accuracy = n_pairs ? static_cast<double>(rel_ok) / static_cast<double>(n_pairs) : 0;
    rec.object_accuracy = n_objects ? static_cast<double>(obj_ok) / static_cast<double>(n_objects) : 0;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec, m);
  }
  result.params = std::move(params);
  return result;
}

inline void write_log(const std::vector<EpochRecord>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write training log " + path.string());
  for (const auto& r : log) out << to_json(r).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Ablation ladder.

struct Variant {
  std::string name;
  bool scene_object = false;
  bool knowledge_transfer = false;
  bool calibration = false;
};

inline const std::vector<Variant>& ladder() {
  static const std::vector<Variant> v{{"BL", false, false, false},
                                      {"BL+SO", true, false, false},
                                      {"BL+SO+KT", true, true, false},
                                      {"BL+SO+KT+FC", true, true, true}};
  return v;
}

inline TrainConfig with_variant(TrainConfig c, const Variant& v) {
  c.scene_object = v.scene_object;
  c.knowledge_transfer = v.knowledge_transfer;
  c.calibration = v.calibration;
  return c;
}

/// Single ablation score: the average of the constrained and unconstrained means.
inline double headline(const eval::MetricsReport& r) {
  return (r.mean(eval::Mode::constrained) + r.mean(eval::Mode::unconstrained)) / 2;
}

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  eval::MetricsReport report;
  double seconds = 0;
};

inline std::vector<eval::Task> available_tasks(const data::Dataset& d) {
  std::vector<eval::Task> tasks{eval::Task::predcls, eval::Task::sgcls};
  if (!d.test_detections.empty()) tasks.push_back(eval::Task::sgdet);
  return tasks;
}

/// Trains and evaluates every ladder variant with the same seed and epochs.
inline std::vector<AblationRun> ablate(const data::Dataset& d, const TrainConfig& base,
                                       const std::function<void(const AblationRun&)>& on_run = {}) {
  std::vector<AblationRun> runs;
  eval::EvalOptions opts{available_tasks(d), d.test_detections.empty() ? nullptr : &d.test_detections};
  for (const auto& v : ladder()) {
    const auto started = std::chrono::steady_clock::now();
    auto fitted = fit(d, with_variant(base, v));
    model::Model<double> m(fitted.config, std::move(fitted.params));
    AblationRun run{v.name, base.seed, eval::evaluate(m, d.test, opts), 0};
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (on_run) on_run(run);
    runs.push_back(std::move(run));
  }
  return runs;
}

/// Seed-averaged Table-2-style report: per variant and mode, the mean over
/// seeds of every cell and of the row mean, with the population standard
/// deviation of the row mean.
inline std::string ablation_table(const std::vector<AblationRun>& runs) {
  std::vector<std::pair<std::string, eval::MetricsReport>> rows;
  std::vector<std::pair<std::string, std::array<double, 2>>> spread;
  for (const auto& v : ladder()) {
    std::vector<const AblationRun*> mine;
    for (const auto& r : runs) {
      if (r.variant == v.name) mine.push_back(&r);
    }
    if (mine.empty()) continue;
    eval::MetricsReport avg;
    for (const auto* r : mine) {
      for (const auto& [task, modes] : r->report.cells) {
        for (const auto& [mode, row] : modes) {
          auto& dst = avg.cells[task][mode];
          if (!dst.r20) dst.r20 = 0.0;
          *dst.r20 += row.r20.value_or(0.0) / static_cast<double>(mine.size());
          dst.r50 += row.r50 / static_cast<double>(mine.size());
          dst.r100 += row.r100 / static_cast<double>(mine.size());
        }
      }
    }
    std::array<double, 2> sd{};
    for (int mi = 0; mi < 2; ++mi) {
      const auto mode = mi == 0 ? eval::Mode::constrained : eval::Mode::unconstrained;
      double mean = 0, sq = 0;
      for (const auto* r : mine) mean += r->report.mean(mode);
      mean /= static_cast<double>(mine.size());
      for (const auto* r : mine) sq += std::pow(r->report.mean(mode) - mean, 2);
      sd[mi] = std::sqrt(sq / static_cast<double>(mine.size()));
    }
    rows.emplace_back(v.name, std::move(avg));
    spread.emplace_back(v.name, sd);
  }
  std::string out = eval::recall_table(rows);
  out += "headline (mean of the constrained and unconstrained means, points):\n";
  for (const auto& [name, report] : rows) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "  %-14s %.2f\n", name.c_str(), 100 * headline(report));
    out += buf;
  }
  out += "spread of the mean over seeds (std, points):\n";
  for (const auto& [name, sd] : spread) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "  %-14s constrained %.2f  unconstrained %.2f\n", name.c_str(),
                  100 * sd[0], 100 * sd[1]);
    out += buf;
  }
  return out;
}

inline nlohmann::json to_json(const std::vector<AblationRun>& runs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : runs) {
    out.push_back({{"variant", r.variant},
                   {"seed", r.seed},
                   {"seconds", r.seconds},
                   {"metrics", eval::to_json(r.report)}});
  }
  return out;
}

}  // namespace sgg::training
