#pragma once

// Checkpoint file: the first line is a JSON header
//   {"format": "sgg-checkpoint", "version": 1, "config": {...},
//    "config_hash": "...", "blocks": [{"name": ..., "shape": [...]}, ...]}
// and each following line holds one block's values as a JSON array, in header
// order. Doubles are written in shortest round-trip form, so a save/load
// cycle is bit-exact.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgg/error.hpp"
#include "sgg/model.hpp"

namespace sgg::checkpoint {

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kFormatName = "sgg-checkpoint";

struct Checkpoint {
  model::ModelConfig config;
  model::ModelParams<double> params;
};

inline void save_checkpoint(const model::ModelConfig& config,
                            const model::ModelParams<double>& params,
                            const std::filesystem::path& path) {
  using Json = nlohmann::json;
  Json blocks = Json::array();
  std::vector<Json> rows;
  for (const auto& b : params.blocks(config)) {
    blocks.push_back({{"name", b.name}, {"shape", b.tensor.shape()}});
    rows.emplace_back(std::vector<double>(b.tensor.value().begin(), b.tensor.value().end()));
  }
  if (config.scene_object) {
    blocks.push_back({{"name", "scene.class_weights"},
                      {"shape", {params.class_weights.size()}}});
    rows.emplace_back(params.class_weights);
  }
  if (config.frequency_bias) {
    const auto counts = params.prior.counts();
    blocks.push_back({{"name", "relation.prior_counts"},
                      {"shape", {config.n_object_classes, config.n_object_classes,
                                 config.n_relations}}});
    rows.emplace_back(std::vector<std::int64_t>(counts.begin(), counts.end()));
  }
  Json header{{"format", kFormatName},
              {"version", kFormatVersion},
              {"config", model::to_json(config)},
              {"config_hash", model::config_hash(config)},
              {"blocks", blocks}};

  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  for (const auto& r : rows) out << r.dump() << '\n';
  if (!out) throw Error("write failed for checkpoint " + path.string());
}

/// Reads a checkpoint. With `expected`, every block shape is checked against
/// that configuration and mismatches are reported by block name.
inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const std::optional<model::ModelConfig>& expected = std::nullopt) {
  using Json = nlohmann::json;
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error("checkpoint " + path.string() + " is empty");
  Json header;
  try {
    header = Json::parse(line);
  } catch (const Json::parse_error& e) {
    throw Error("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  if (header.value("format", std::string()) != kFormatName) {
    throw Error("not a checkpoint file: " + path.string());
  }
  const int version = header.value("version", -1);
  if (version != kFormatVersion) {
    throw Error("checkpoint format version " + std::to_string(version) +
                " is not supported (expected " + std::to_string(kFormatVersion) + ")");
  }
  const auto config = model::model_config_from_json(header.at("config"));
  if (header.value("config_hash", std::string()) != model::config_hash(config)) {
    throw Error("checkpoint config hash does not match its config");
  }

  const auto& target = expected ? *expected : config;
  std::vector<std::string> mismatched;
  if (expected) {
    const auto want = model::ModelParams<double>::block_shapes(*expected);
    for (const auto& [name, shape] : want) {
      bool found = false;
      for (const auto& b : header.at("blocks")) {
        if (b.at("name") == name) {
          found = true;
          if (b.at("shape").get<numerics::Shape>() != shape) mismatched.push_back(name);
        }
      }
      if (!found) mismatched.push_back(name + " (missing)");
    }
    if (!mismatched.empty()) {
      std::string list;
      for (const auto& m : mismatched) list += (list.empty() ? "" : ", ") + m;
      throw Error("checkpoint does not match the current configuration; offending blocks: " + list);
    }
    if (expected->frequency_bias != config.frequency_bias ||
        expected->scene_object != config.scene_object ||
        expected->knowledge_transfer != config.knowledge_transfer ||
        expected->calibration != config.calibration) {
      throw Error("checkpoint module switches differ from the current configuration");
    }
  }

  Checkpoint ck{target, model::ModelParams<double>::zeros(target)};
  auto blocks = ck.params.blocks(target);
  for (const auto& entry : header.at("blocks")) {
    if (!std::getline(in, line)) throw Error("checkpoint truncated before block " + entry.at("name").get<std::string>());
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<numerics::Shape>();
    Json values;
    try {
      values = Json::parse(line);
    } catch (const Json::parse_error&) {
      throw Error("checkpoint block " + name + " is not valid JSON");
    }
    if (values.size() != numerics::element_count(shape)) {
      throw Error("checkpoint block " + name + " holds " + std::to_string(values.size()) +
                  " values for shape " + numerics::shape_string(shape));
    }
    if (name == "scene.class_weights") {
      ck.params.class_weights = values.get<std::vector<double>>();
      continue;
    }
    if (name == "relation.prior_counts") {
      auto counts = values.get<std::vector<std::int64_t>>();
      auto dst = ck.params.prior.mutable_counts();
      if (dst.size() != counts.size()) throw Error("checkpoint block " + name + " has the wrong size");
      std::copy(counts.begin(), counts.end(), dst.begin());
      continue;
    }
    bool placed = false;
    for (auto& b : blocks) {
      if (b.name != name) continue;
      if (b.tensor.shape() != shape) {
        throw Error("checkpoint does not match the current configuration; offending blocks: " + name);
      }
      auto v = values.get<std::vector<double>>();
      std::copy(v.begin(), v.end(), b.tensor.mutable_value().begin());
      placed = true;
    }
    if (!placed) throw Error("checkpoint has an unexpected block " + name);
  }
  if (target.frequency_bias) ck.params.prior.build_log_table();
  return ck;
}

}  // namespace sgg::checkpoint
