#pragma once

// Recall@K over ranked (subject, predicate, object) triples for the three
// tasks: predicate classification (labels given), scene-graph classification
// (labels predicted), and detection (boxes, labels and features read from a
// detections file). The none relation is never a candidate.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "sgg/data.hpp"
#include "sgg/error.hpp"
#include "sgg/geometry.hpp"
#include "sgg/model.hpp"

namespace sgg::eval {

enum class Task { predcls, sgcls, sgdet };
enum class Mode { constrained, unconstrained };

inline constexpr std::array<std::size_t, 3> kRecallKs{20, 50, 100};

inline std::string to_string(Task t) {
  switch (t) {
    case Task::predcls: return "predcls";
    case Task::sgcls: return "sgcls";
    case Task::sgdet: return "sgdet";
  }
  return "?";
}

inline std::string to_string(Mode m) {
  return m == Mode::constrained ? "constrained" : "unconstrained";
}

inline Task parse_task(const std::string& s) {
  if (s == "predcls") return Task::predcls;
  if (s == "sgcls") return Task::sgcls;
  if (s == "sgdet") return Task::sgdet;
  throw Error("unknown task '" + s + "' (expected predcls, sgcls or sgdet)");
}

struct RankedTriple {
  std::size_t subject = 0;
  std::size_t relation = 0;
  std::size_t object = 0;
  double score = 0;
  double subject_prob = 1;
  double predicate_prob = 0;
  double object_prob = 1;
  std::size_t subject_label = 0;
  std::size_t object_label = 0;
  /// Position of (subject, object) in the scene's ordered-pair enumeration.
  std::size_t pair_index = 0;
};

/// Candidates for one scene plus the boxes of the objects they refer to.
struct ScoredScene {
  std::vector<RankedTriple> candidates;
  std::vector<geometry::BoundingBox> boxes;
};

/// Scores every ordered pair of a scene's objects (or detections, for sgdet)
/// against every non-none predicate: score = P(subject) * P(pred) * P(object).
template <std::floating_point T>
ScoredScene score_scene(const model::Model<T>& model, const data::SceneSample& scene, Task task,
                        const data::DetectionSet* detections = nullptr) {
  numerics::NoGradGuard no_grad;
  if (task == Task::sgdet && detections == nullptr) {
    throw Error("sgdet evaluation needs a detections file (image '" + scene.image_id + "')");
  }
  const bool det = task == Task::sgdet;
  const auto features = det ? model::object_features(*detections) : model::object_features(scene);
  const std::size_t n = features.size();
  ScoredScene out;
  if (n < 2) return out;

  const auto enc = model.encode_objects(features, scene.scene_feature);
  std::vector<std::size_t> labels(n);
  std::vector<double> probs(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (task == Task::predcls) {
      labels[i] = scene.objects[i].label;
    } else if (task == Task::sgcls) {
      auto dist = model.object_distribution(enc.refined[i]);
      const auto v = dist.value();
      labels[i] = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
      probs[i] = static_cast<double>(v[labels[i]]);
    } else {
      const auto& scores = detections->detections[i].class_scores;
      labels[i] = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) -
                                           scores.begin());
      probs[i] = scores[labels[i]];
    }
    out.boxes.push_back(det ? detections->detections[i].box : scene.objects[i].box);
  }

  const std::size_t n_rel = model.config().n_relations;
  out.candidates.reserve(n * (n - 1) * (n_rel - 1));
  std::size_t pair_index = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const auto u = det ? detections->union_feature(i, j) : scene.union_feature(i, j);
      const auto pair = model.forward_pair(enc, i, j, u, out.boxes[i], out.boxes[j],
                                           relation::ClassPair{labels[i], labels[j]});
      const auto pred = numerics::softmax(pair.logits);
      for (std::size_t r = 1; r < n_rel; ++r) {
        const double pr = static_cast<double>(pred[r]);
        out.candidates.push_back({i, r, j, probs[i] * pr * probs[j], probs[i], pr, probs[j],
                                  labels[i], labels[j], pair_index});
      }
      ++pair_index;
    }
  }
  return out;
}

/// Constrained keeps the best predicate of each ordered pair; both modes then
/// sort by score, breaking ties by (pair index, relation id). With `limit`,
/// only that many leading entries are returned.
inline std::vector<RankedTriple> rank(std::span<const RankedTriple> candidates, Mode mode,
                                      std::optional<std::size_t> limit = std::nullopt) {
  auto before = [](const RankedTriple& a, const RankedTriple& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.pair_index != b.pair_index) return a.pair_index < b.pair_index;
    return a.relation < b.relation;
  };
  std::vector<RankedTriple> out;
  if (mode == Mode::unconstrained) {
    out.assign(candidates.begin(), candidates.end());
  } else {
    std::unordered_map<std::size_t, std::size_t> best;  // pair -> index into out
    for (const auto& c : candidates) {
      auto [it, inserted] = best.try_emplace(c.pair_index, out.size());
      if (inserted) {
        out.push_back(c);
      } else if (before(c, out[it->second])) {
        out[it->second] = c;
      }
    }
  }
  if (limit && *limit < out.size()) {
    std::partial_sort(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(*limit), out.end(), before);
    out.resize(*limit);
  } else {
    std::sort(out.begin(), out.end(), before);
  }
  return out;
}

struct Recall {
  double value = 0;
  /// True when there was no ground truth; value is then 1.
  bool vacuous = false;
};

/// How a candidate object is matched to a ground-truth object.
struct GroundTruth {
  std::vector<data::Triple> triples;
  std::vector<std::size_t> labels;
  std::vector<geometry::BoundingBox> boxes;
  /// Index identity when false; IoU >= 0.5 when true.
  bool match_by_iou = false;
};

inline GroundTruth ground_truth(const data::SceneSample& s, Task task) {
  GroundTruth gt{s.gt_triples, {}, {}, task == Task::sgdet};
  for (const auto& o : s.objects) {
    gt.labels.push_back(o.label);
    gt.boxes.push_back(o.box);
  }
  return gt;
}

inline constexpr double kIouThreshold = 0.5;

/// Per ground-truth triple: is it matched within the top K?
inline std::vector<bool> matched_within(std::span<const RankedTriple> ranked, const GroundTruth& gt,
                                        std::span<const geometry::BoundingBox> candidate_boxes,
                                        std::size_t k) {
  if (k == 0) throw Error("recall_at_k: K must be positive");
  auto object_matches = [&](std::size_t cand, std::size_t cand_label, std::size_t truth) {
    if (cand_label != gt.labels.at(truth)) return false;
    if (!gt.match_by_iou) return cand == truth;
    return geometry::intersection_over_union(candidate_boxes[cand], gt.boxes[truth]) >=
           kIouThreshold;
  };
  std::vector<bool> hit(gt.triples.size(), false);
  const std::size_t top = std::min(k, ranked.size());
  for (std::size_t g = 0; g < gt.triples.size(); ++g) {
    const auto& t = gt.triples[g];
    for (std::size_t c = 0; c < top && !hit[g]; ++c) {
      const auto& r = ranked[c];
      hit[g] = r.relation == t.relation && object_matches(r.subject, r.subject_label, t.subject) &&
               object_matches(r.object, r.object_label, t.object);
    }
  }
  return hit;
}

/// Fraction of ground-truth triples whose (subject, relation, object) indices
/// appear among the first K ranked triples.
inline Recall recall_at_k(std::span<const RankedTriple> ranked, std::span<const data::Triple> gt,
                          std::size_t k) {
  if (k == 0) throw Error("recall_at_k: K must be positive");
  if (gt.empty()) return {1.0, true};
  const std::size_t top = std::min(k, ranked.size());
  std::size_t hits = 0;
  for (const auto& t : gt) {
    for (std::size_t c = 0; c < top; ++c) {
      if (ranked[c].subject == t.subject && ranked[c].relation == t.relation &&
          ranked[c].object == t.object) {
        ++hits;
        break;
      }
    }
  }
  return {static_cast<double>(hits) / static_cast<double>(gt.size()), false};
}

// ---------------------------------------------------------------------------
// Reports.

struct RecallRow {
  /// Absent when a source reports only R@50 and R@100.
  std::optional<double> r20;
  double r50 = 0;
  double r100 = 0;
};

struct MetricsReport {
  std::map<Task, std::map<Mode, RecallRow>> cells;
  std::size_t images = 0;
  /// Predicate classification, unconstrained: per-relation ground-truth and
  /// hit counts pooled over images.
  std::vector<std::int64_t> relation_gt;
  std::vector<std::int64_t> relation_hits50;
  std::vector<std::int64_t> relation_hits100;

  /// Mean over every cell of `mode`; rows without R@20 contribute R@50 and
  /// R@100 only.
  double mean(Mode mode) const {
    double total = 0;
    std::size_t count = 0;
    for (const auto& [task, modes] : cells) {
      auto it = modes.find(mode);
      if (it == modes.end()) continue;
      if (it->second.r20) {
        total += *it->second.r20;
        ++count;
      }
      total += it->second.r50 + it->second.r100;
      count += 2;
    }
    return count ? total / static_cast<double>(count) : 0.0;
  }

  /// Per-relation recall; empty for a relation with no test instances.
  std::optional<double> relation_recall(std::size_t r, std::size_t k) const {
    if (r >= relation_gt.size() || relation_gt[r] == 0) return std::nullopt;
    const auto& hits = k == 50 ? relation_hits50 : relation_hits100;
    return static_cast<double>(hits[r]) / static_cast<double>(relation_gt[r]);
  }
};

struct EvalOptions {
  std::vector<Task> tasks{Task::predcls, Task::sgcls};
  /// Needed for sgdet; looked up by image_id.
  const std::vector<data::DetectionSet>* detections = nullptr;
};

template <std::floating_point T>
MetricsReport evaluate(const model::Model<T>& model, const std::vector<data::SceneSample>& scenes,
                       const EvalOptions& options = {}) {
  const std::size_t n_rel = model.config().n_relations;
  MetricsReport report;
  report.relation_gt.assign(n_rel, 0);
  report.relation_hits50.assign(n_rel, 0);
  report.relation_hits100.assign(n_rel, 0);

  std::unordered_map<std::string, const data::DetectionSet*> by_id;
  if (options.detections) {
    for (const auto& d : *options.detections) by_id[d.image_id] = &d;
  }

  for (Task task : options.tasks) {
    if (task == Task::sgdet && options.detections == nullptr) {
      throw Error("sgdet evaluation needs a detections file");
    }
    std::map<Mode, std::array<double, 3>> sums;
    std::size_t images = 0;
    for (const auto& scene : scenes) {
      if (scene.gt_triples.empty()) continue;
      const data::DetectionSet* det = nullptr;
      if (task == Task::sgdet) {
        auto it = by_id.find(scene.image_id);
        if (it == by_id.end()) throw Error("no detections for image '" + scene.image_id + "'");
        det = it->second;
      }
      const auto scored = score_scene(model, scene, task, det);
      const auto gt = ground_truth(scene, task);
      ++images;
      for (Mode mode : {Mode::constrained, Mode::unconstrained}) {
        const auto ranked = rank(scored.candidates, mode, kRecallKs.back());
        auto& acc = sums[mode];
        for (std::size_t q = 0; q < kRecallKs.size(); ++q) {
          const auto hit = matched_within(ranked, gt, scored.boxes, kRecallKs[q]);
          const auto hits = std::count(hit.begin(), hit.end(), true);
          acc[q] += static_cast<double>(hits) / static_cast<double>(hit.size());
          if (task == Task::predcls && mode == Mode::unconstrained && kRecallKs[q] >= 50) {
            for (std::size_t g = 0; g < hit.size(); ++g) {
              const auto r = gt.triples[g].relation;
              if (kRecallKs[q] == 50) {
                ++report.relation_gt[r];
                report.relation_hits50[r] += hit[g];
              } else {
                report.relation_hits100[r] += hit[g];
              }
            }
          }
        }
      }
    }
    report.images = images;
    for (auto& [mode, acc] : sums) {
      const double n = images ? static_cast<double>(images) : 1.0;
      report.cells[task][mode] = RecallRow{acc[0] / n, acc[1] / n, acc[2] / n};
    }
  }
  return report;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  using Json = nlohmann::json;
  Json tasks = Json::object();
  for (const auto& [task, modes] : r.cells) {
    for (const auto& [mode, row] : modes) {
      Json cell{{"R@50", row.r50}, {"R@100", row.r100}};
      cell["R@20"] = row.r20 ? Json(*row.r20) : Json(nullptr);
      tasks[to_string(task)][to_string(mode)] = cell;
    }
  }
  Json per_relation = Json::array();
  for (std::size_t rel = 1; rel < r.relation_gt.size(); ++rel) {
    auto r50 = r.relation_recall(rel, 50);
    auto r100 = r.relation_recall(rel, 100);
    per_relation.push_back({{"relation", rel},
                            {"test_count", r.relation_gt[rel]},
                            {"R@50", r50 ? Json(*r50) : Json(nullptr)},
                            {"R@100", r100 ? Json(*r100) : Json(nullptr)}});
  }
  return {{"images", r.images},
          {"tasks", tasks},
          {"mean", {{"constrained", r.mean(Mode::constrained)},
                    {"unconstrained", r.mean(Mode::unconstrained)}}},
          {"per_relation", per_relation}};
}

namespace detail {

inline std::string pct(std::optional<double> v, int width = 7) {
  char buf[32];
  if (!v) {
    std::snprintf(buf, sizeof(buf), "%*s", width, "-");
  } else {
    std::snprintf(buf, sizeof(buf), "%*.1f", width, 100.0 * *v);
  }
  return buf;
}

inline std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

}  // namespace detail

/// Rows of `(label, report)` laid out as SGDet | SGCls | PredCls | Mean per mode.
inline std::string recall_table(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                                std::vector<Mode> modes = {Mode::constrained, Mode::unconstrained}) {
  std::ostringstream os;
  std::size_t label_width = 12;
  for (const auto& [label, _] : rows) label_width = std::max(label_width, label.size() + 2);
  const Task order[] = {Task::sgdet, Task::sgcls, Task::predcls};
  for (Mode mode : modes) {
    os << detail::pad(to_string(mode), label_width);
    for (Task t : order) os << detail::pad("| " + to_string(t), 22);
    os << "|   Mean\n";
    os << detail::pad("", label_width);
    for (std::size_t k = 0; k < 3; ++k) os << "|  R@20   R@50  R@100";
    os << "|\n";
    for (const auto& [label, report] : rows) {
      os << detail::pad(label, label_width);
      for (Task t : order) {
        os << '|';
        auto it = report.cells.find(t);
        if (it == report.cells.end() || !it->second.contains(mode)) {
          os << detail::pct(std::nullopt, 6) << detail::pct(std::nullopt) << detail::pct(std::nullopt);
          continue;
        }
        const auto& row = it->second.at(mode);
        os << detail::pct(row.r20, 6) << detail::pct(row.r50) << detail::pct(row.r100);
      }
      os << '|' << detail::pct(report.mean(mode)) << '\n';
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Tail relations.

struct TailRow {
  std::size_t relation = 0;
  std::int64_t train_count = 0;
  std::int64_t test_count = 0;
  std::optional<double> without_r50;
  std::optional<double> with_r50;
  std::optional<double> without_r100;
  std::optional<double> with_r100;
};

/// The `bottom_n` least frequent (in training) non-none relations, ties by id.
inline std::vector<std::size_t> tail_relations(std::span<const std::int64_t> train_histogram,
                                               std::size_t bottom_n) {
  std::vector<std::size_t> ids;
  for (std::size_t r = 1; r < train_histogram.size(); ++r) ids.push_back(r);
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
    return train_histogram[a] < train_histogram[b];
  });
  ids.resize(std::min(bottom_n, ids.size()));
  return ids;
}

/// Unconstrained predicate-classification recall of the tail relations for a
/// model without (first) and with (second) knowledge transfer.
inline std::vector<TailRow> tail_comparison(const MetricsReport& without, const MetricsReport& with,
                                            std::span<const std::int64_t> train_histogram,
                                            std::size_t bottom_n) {
  std::vector<TailRow> rows;
  for (auto r : tail_relations(train_histogram, bottom_n)) {
    rows.push_back({r, train_histogram[r], with.relation_gt.at(r), without.relation_recall(r, 50),
                    with.relation_recall(r, 50), without.relation_recall(r, 100),
                    with.relation_recall(r, 100)});
  }
  return rows;
}

/// Mean R@50 gain over tail rows that have test instances; empty if none do.
inline std::optional<double> mean_tail_gain(const std::vector<TailRow>& rows) {
  double total = 0;
  std::size_t n = 0;
  for (const auto& row : rows) {
    if (row.with_r50 && row.without_r50) {
      total += *row.with_r50 - *row.without_r50;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

inline nlohmann::json to_json(const std::vector<TailRow>& rows) {
  using Json = nlohmann::json;
  auto opt = [](std::optional<double> v) { return v ? Json(*v) : Json(nullptr); };
  Json out = Json::array();
  for (const auto& r : rows) {
    out.push_back({{"relation", r.relation},
                   {"train_count", r.train_count},
                   {"test_count", r.test_count},
                   {"R@50", {{"without_kt", opt(r.without_r50)}, {"with_kt", opt(r.with_r50)}}},
                   {"R@100", {{"without_kt", opt(r.without_r100)}, {"with_kt", opt(r.with_r100)}}}});
  }
  return out;
}

inline std::string tail_table(const std::vector<TailRow>& rows) {
  std::ostringstream os;
  os << "relation  train  test |      R@50       |      R@100\n";
  os << "                      | w/o KT    w KT  | w/o KT    w KT\n";
  for (const auto& r : rows) {
    char head[48];
    std::snprintf(head, sizeof(head), "%8zu %6lld %5lld |", r.relation,
                  static_cast<long long>(r.train_count), static_cast<long long>(r.test_count));
    os << head << detail::pct(r.without_r50) << ' ' << detail::pct(r.with_r50) << "  |"
       << detail::pct(r.without_r100) << ' ' << detail::pct(r.with_r100) << '\n';
  }
  return os.str();
}

}  // namespace sgg::eval
