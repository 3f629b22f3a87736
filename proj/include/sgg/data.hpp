#pragma once

// Scene samples, datasets, and their line-delimited JSON files.
//
// A dataset directory holds:
//   meta.json               class/relation counts and feature width
//   train.jsonl, test.jsonl one SceneSample per line
//   test_detections.jsonl   optional; detector output for the test images
//   stats.json              written by the generator (relation histogram)

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgg/error.hpp"
#include "sgg/geometry.hpp"

namespace sgg::data {

using geometry::BoundingBox;
using Json = nlohmann::json;

/// Relation id reserved for "no relationship".
inline constexpr std::size_t kNoneRelation = 0;

struct SceneObject {
  BoundingBox box;
  std::size_t label = 0;
  std::vector<double> feature;

  bool operator==(const SceneObject&) const = default;
};

struct Triple {
  std::size_t subject = 0;
  std::size_t relation = 0;
  std::size_t object = 0;

  auto operator<=>(const Triple&) const = default;
};

using PairKey = std::pair<std::size_t, std::size_t>;
using UnionFeatures = std::map<PairKey, std::vector<double>>;

inline std::vector<double> mean_feature(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = (a[k] + b[k]) / 2;
  return out;
}

struct SceneSample {
  std::string image_id;
  std::vector<SceneObject> objects;
  /// Absent when the source provides none; the model then derives one.
  std::optional<std::vector<double>> scene_feature;
  /// Only stored pairs; see union_feature() for the rest.
  UnionFeatures union_features;
  std::vector<Triple> gt_triples;

  /// Stored union-region feature, or the mean of the two object features.
  std::vector<double> union_feature(std::size_t i, std::size_t j) const {
    if (auto it = union_features.find({i, j}); it != union_features.end()) return it->second;
    return mean_feature(objects.at(i).feature, objects.at(j).feature);
  }

  /// Binary present-class vector.
  std::vector<double> multilabel_target(std::size_t n_classes) const {
    std::vector<double> t(n_classes, 0.0);
    for (const auto& o : objects) t.at(o.label) = 1.0;
    return t;
  }

  bool operator==(const SceneSample&) const = default;
};

struct DatasetMeta {
  std::size_t n_object_classes = 150;
  std::size_t n_relations = 50;
  std::size_t d_v = 64;

  bool operator==(const DatasetMeta&) const = default;
};

struct Detection {
  BoundingBox box;
  std::vector<double> class_scores;
  std::vector<double> feature;

  bool operator==(const Detection&) const = default;
};

/// Detector output for one image. Union features are optional, keyed by
/// detection indices, with the same mean fallback as SceneSample.
struct DetectionSet {
  std::string image_id;
  std::vector<Detection> detections;
  UnionFeatures union_features;

  std::vector<double> union_feature(std::size_t i, std::size_t j) const {
    if (auto it = union_features.find({i, j}); it != union_features.end()) return it->second;
    return mean_feature(detections.at(i).feature, detections.at(j).feature);
  }

  bool operator==(const DetectionSet&) const = default;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<SceneSample> train;
  std::vector<SceneSample> test;
  std::vector<DetectionSet> test_detections;

  const DetectionSet* detections_for(const std::string& image_id) const {
    for (const auto& d : test_detections) {
      if (d.image_id == image_id) return &d;
    }
    return nullptr;
  }

  bool operator==(const Dataset&) const = default;
};

// ---------------------------------------------------------------------------
// Validation.

inline void validate_scene(const SceneSample& s, const DatasetMeta& meta) {
  const std::string where = "scene '" + s.image_id + "': ";
  if (s.image_id.empty()) throw Error("scene with empty image_id");
  if (s.objects.size() < 2) throw Error(where + "needs at least two objects");
  for (std::size_t i = 0; i < s.objects.size(); ++i) {
    const auto& o = s.objects[i];
    if (!o.box.valid()) throw Error(where + "object " + std::to_string(i) + " has a degenerate box");
    if (o.label >= meta.n_object_classes) {
      throw Error(where + "object " + std::to_string(i) + " label " + std::to_string(o.label) +
                  " >= " + std::to_string(meta.n_object_classes));
    }
    if (o.feature.size() != meta.d_v) {
      throw Error(where + "object " + std::to_string(i) + " feature has width " +
                  std::to_string(o.feature.size()) + ", expected " + std::to_string(meta.d_v));
    }
  }
  if (s.scene_feature && s.scene_feature->size() != meta.d_v) {
    throw Error(where + "scene_feature has width " + std::to_string(s.scene_feature->size()));
  }
  for (const auto& [key, f] : s.union_features) {
    if (key.first >= s.objects.size() || key.second >= s.objects.size() ||
        key.first == key.second) {
      throw Error(where + "union feature for invalid pair (" + std::to_string(key.first) + ", " +
                  std::to_string(key.second) + ")");
    }
    if (f.size() != meta.d_v) throw Error(where + "union feature has wrong width");
  }
  for (const auto& t : s.gt_triples) {
    if (t.subject >= s.objects.size() || t.object >= s.objects.size()) {
      throw Error(where + "triple references a missing object");
    }
    if (t.subject == t.object) throw Error(where + "triple relates an object to itself");
    if (t.relation >= meta.n_relations) {
      throw Error(where + "relation id " + std::to_string(t.relation) + " >= " +
                  std::to_string(meta.n_relations));
    }
    if (t.relation == kNoneRelation) {
      throw Error(where + "relation id 0 is reserved for the none relation");
    }
  }
}

inline void validate_dataset(const Dataset& d) {
  for (const auto& s : d.train) validate_scene(s, d.meta);
  for (const auto& s : d.test) validate_scene(s, d.meta);
  std::vector<std::string> ids;
  for (const auto& s : d.train) ids.push_back(s.image_id);
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw Error("duplicate image_id in the train split");
  }
  for (const auto& s : d.test) {
    if (std::binary_search(ids.begin(), ids.end(), s.image_id)) {
      throw Error("image_id '" + s.image_id + "' appears in both train and test");
    }
  }
}

// ---------------------------------------------------------------------------
// JSON mapping.

namespace detail {

class FieldReader {
 public:
  FieldReader(const Json& j, std::string where) : j_(j), where_(std::move(where)) {}

  const Json& required(const char* field) const {
    if (!j_.is_object() || !j_.contains(field)) {
      throw Error(where_ + ": missing field '" + field + "'");
    }
    return j_.at(field);
  }

  template <class V>
  V get(const char* field) const {
    const Json& v = required(field);
    try {
      return v.get<V>();
    } catch (const nlohmann::json::exception&) {
      throw Error(where_ + ": field '" + field + "' has the wrong type");
    }
  }

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw Error(where_ + ": field '" + field + "' " + what);
  }

  const std::string& where() const { return where_; }

 private:
  const Json& j_;
  std::string where_;
};

inline Json box_to_json(const BoundingBox& b) { return Json::array({b.x_t, b.y_t, b.x_b, b.y_b}); }

inline BoundingBox box_from_json(const FieldReader& r, const char* field) {
  auto v = r.get<std::vector<double>>(field);
  if (v.size() != 4) r.fail(field, "must hold 4 numbers");
  return {v[0], v[1], v[2], v[3]};
}

inline Json unions_to_json(const UnionFeatures& u) {
  Json arr = Json::array();
  for (const auto& [key, f] : u) {
    arr.push_back({{"subject", key.first}, {"object", key.second}, {"feature", f}});
  }
  return arr;
}

inline UnionFeatures unions_from_json(const Json& arr, const std::string& where) {
  UnionFeatures out;
  if (!arr.is_array()) throw Error(where + ": field 'union_features' must be an array");
  for (std::size_t k = 0; k < arr.size(); ++k) {
    FieldReader r(arr[k], where + " union_features[" + std::to_string(k) + "]");
    out[{r.get<std::size_t>("subject"), r.get<std::size_t>("object")}] =
        r.get<std::vector<double>>("feature");
  }
  return out;
}

}  // namespace detail

inline Json to_json(const SceneSample& s) {
  Json objects = Json::array();
  for (const auto& o : s.objects) {
    objects.push_back(
        {{"box", detail::box_to_json(o.box)}, {"label", o.label}, {"feature", o.feature}});
  }
  Json triples = Json::array();
  for (const auto& t : s.gt_triples) triples.push_back({t.subject, t.relation, t.object});
  Json j;
  j["image_id"] = s.image_id;
  j["objects"] = std::move(objects);
  j["scene_feature"] = s.scene_feature ? Json(*s.scene_feature) : Json(nullptr);
  j["union_features"] = detail::unions_to_json(s.union_features);
  j["gt_triples"] = std::move(triples);
  return j;
}

/// `where` prefixes error messages, e.g. "train.jsonl:12".
inline SceneSample scene_from_json(const Json& j, const std::string& where) {
  detail::FieldReader r(j, where);
  SceneSample s;
  s.image_id = r.get<std::string>("image_id");
  const Json& objects = r.required("objects");
  if (!objects.is_array()) r.fail("objects", "must be an array");
  for (std::size_t i = 0; i < objects.size(); ++i) {
    detail::FieldReader o(objects[i], where + " objects[" + std::to_string(i) + "]");
    s.objects.push_back({detail::box_from_json(o, "box"), o.get<std::size_t>("label"),
                         o.get<std::vector<double>>("feature")});
  }
  const Json& sf = r.required("scene_feature");
  if (!sf.is_null()) s.scene_feature = r.get<std::vector<double>>("scene_feature");
  if (j.contains("union_features")) {
    s.union_features = detail::unions_from_json(j.at("union_features"), where);
  }
  const Json& triples = r.required("gt_triples");
  if (!triples.is_array()) r.fail("gt_triples", "must be an array");
  for (const auto& t : triples) {
    if (!t.is_array() || t.size() != 3) r.fail("gt_triples", "entries must be [subject, relation, object]");
    try {
      s.gt_triples.push_back({t[0].get<std::size_t>(), t[1].get<std::size_t>(), t[2].get<std::size_t>()});
    } catch (const nlohmann::json::exception&) {
      r.fail("gt_triples", "entries must be non-negative integers");
    }
  }
  return s;
}

inline Json to_json(const DetectionSet& d) {
  Json dets = Json::array();
  for (const auto& x : d.detections) {
    dets.push_back({{"box", detail::box_to_json(x.box)},
                    {"class_scores", x.class_scores},
                    {"feature", x.feature}});
  }
  Json j;
  j["image_id"] = d.image_id;
  j["detections"] = std::move(dets);
  j["union_features"] = detail::unions_to_json(d.union_features);
  return j;
}

inline DetectionSet detections_from_json(const Json& j, const std::string& where) {
  detail::FieldReader r(j, where);
  DetectionSet d;
  d.image_id = r.get<std::string>("image_id");
  const Json& dets = r.required("detections");
  if (!dets.is_array()) r.fail("detections", "must be an array");
  for (std::size_t i = 0; i < dets.size(); ++i) {
    detail::FieldReader o(dets[i], where + " detections[" + std::to_string(i) + "]");
    d.detections.push_back({detail::box_from_json(o, "box"),
                            o.get<std::vector<double>>("class_scores"),
                            o.get<std::vector<double>>("feature")});
  }
  if (j.contains("union_features")) {
    d.union_features = detail::unions_from_json(j.at("union_features"), where);
  }
  return d;
}

inline void validate_detections(const DetectionSet& d, const DatasetMeta& meta) {
  const std::string where = "detections '" + d.image_id + "': ";
  for (std::size_t i = 0; i < d.detections.size(); ++i) {
    const auto& x = d.detections[i];
    if (!x.box.valid()) throw Error(where + "detection " + std::to_string(i) + " has a degenerate box");
    if (x.class_scores.size() != meta.n_object_classes) {
      throw Error(where + "detection " + std::to_string(i) + " has " +
                  std::to_string(x.class_scores.size()) + " class scores");
    }
    if (x.feature.size() != meta.d_v) throw Error(where + "detection feature has wrong width");
  }
  for (const auto& [key, f] : d.union_features) {
    if (key.first >= d.detections.size() || key.second >= d.detections.size() ||
        key.first == key.second || f.size() != meta.d_v) {
      throw Error(where + "invalid union feature entry");
    }
  }
}

inline Json to_json(const DatasetMeta& m) {
  return {{"n_object_classes", m.n_object_classes}, {"n_relations", m.n_relations}, {"d_v", m.d_v}};
}

inline DatasetMeta meta_from_json(const Json& j, const std::string& where) {
  detail::FieldReader r(j, where);
  return {r.get<std::size_t>("n_object_classes"), r.get<std::size_t>("n_relations"),
          r.get<std::size_t>("d_v")};
}

// ---------------------------------------------------------------------------
// Files.

namespace detail {

template <class Record, class Parse>
std::vector<Record> read_jsonl(const std::filesystem::path& path, Parse parse) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<Record> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.filename().string() + ":" + std::to_string(line_no);
    Json j;
    try {
      j = Json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(where + ": malformed JSON (" + e.what() + ")");
    }
    out.push_back(parse(j, where));
  }
  return out;
}

template <class Record>
void write_jsonl(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<SceneSample> load_scenes(const std::filesystem::path& path,
                                            const DatasetMeta& meta) {
  auto scenes = detail::read_jsonl<SceneSample>(path, [&](const Json& j, const std::string& where) {
    auto s = scene_from_json(j, where);
    try {
      validate_scene(s, meta);
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    }
    return s;
  });
  return scenes;
}

inline std::vector<DetectionSet> load_detections(const std::filesystem::path& path,
                                                 const DatasetMeta& meta) {
  return detail::read_jsonl<DetectionSet>(path, [&](const Json& j, const std::string& where) {
    auto d = detections_from_json(j, where);
    try {
      validate_detections(d, meta);
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    }
    return d;
  });
}

inline void save_scenes(const std::filesystem::path& path, const std::vector<SceneSample>& scenes) {
  detail::write_jsonl(path, scenes);
}

inline void save_detections(const std::filesystem::path& path,
                            const std::vector<DetectionSet>& detections) {
  detail::write_jsonl(path, detections);
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream meta(dir / "meta.json");
    if (!meta) throw Error("cannot write " + (dir / "meta.json").string());
    meta << to_json(d.meta).dump(2) << '\n';
  }
  save_scenes(dir / "train.jsonl", d.train);
  save_scenes(dir / "test.jsonl", d.test);
  if (!d.test_detections.empty()) save_detections(dir / "test_detections.jsonl", d.test_detections);
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  {
    const auto path = dir / "meta.json";
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    Json j;
    try {
      j = Json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error("meta.json: malformed JSON (" + std::string(e.what()) + ")");
    }
    d.meta = meta_from_json(j, "meta.json");
  }
  d.train = load_scenes(dir / "train.jsonl", d.meta);
  d.test = load_scenes(dir / "test.jsonl", d.meta);
  if (std::filesystem::exists(dir / "test_detections.jsonl")) {
    d.test_detections = load_detections(dir / "test_detections.jsonl", d.meta);
  }
  validate_dataset(d);
  return d;
}

/// Triple count per relation id over a split.
inline std::vector<std::int64_t> relation_histogram(const std::vector<SceneSample>& scenes,
                                                    std::size_t n_relations) {
  std::vector<std::int64_t> h(n_relations, 0);
  for (const auto& s : scenes) {
    for (const auto& t : s.gt_triples) ++h.at(t.relation);
  }
  return h;
}

/// Object count per class over a split.
inline std::vector<std::int64_t> object_class_counts(const std::vector<SceneSample>& scenes,
                                                     std::size_t n_classes) {
  std::vector<std::int64_t> h(n_classes, 0);
  for (const auto& s : scenes) {
    for (const auto& o : s.objects) ++h.at(o.label);
  }
  return h;
}

}  // namespace sgg::data
