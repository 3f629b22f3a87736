#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "sgg/checkpoint.hpp"
#include "sgg/evaluation.hpp"
#include "sgg/generator.hpp"
#include "sgg/model.hpp"
#include "support.hpp"

namespace model = sgg::model;
namespace ckpt = sgg::checkpoint;
using sgg::testing::TempDir;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.n_object_classes = 7;
  c.n_relations = 5;
  c.d_v = 6;
  c.d_s = 3;
  return c;
}

model::ModelParams<double> random_params(const model::ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = model::init_params<double>(c, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : p.codebook.mutable_value()) v = n(rng);
  for (auto& w : p.class_weights) w = std::abs(n(rng));
  p.prior.add(1, 2, 3, 4);
  p.prior.add(0, 0, 0, 1);
  return p;
}

std::string read_all(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Rewrites the header line of a checkpoint file.
void edit_header(const std::filesystem::path& p, const std::function<void(nlohmann::json&)>& edit) {
  std::istringstream in(read_all(p));
  std::string first, rest, line;
  std::getline(in, first);
  while (std::getline(in, line)) rest += line + '\n';
  auto header = nlohmann::json::parse(first);
  edit(header);
  std::ofstream(p) << header.dump() << '\n' << rest;
}

std::string load_error(const std::filesystem::path& p, const std::optional<model::ModelConfig>& c) {
  try {
    ckpt::load_checkpoint(p, c);
  } catch (const sgg::Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(ModelConfig, CalibrationNeedsTransfer) {
  auto c = small_config();
  c.knowledge_transfer = false;
  EXPECT_THROW(c.validate(), sgg::Error);
  c.calibration = false;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.d_t(), 9u);
}

TEST(ModelParams, BlockShapesMatchAllocation) {
  for (bool so : {false, true}) {
    for (bool kt : {false, true}) {
      auto c = small_config();
      c.scene_object = so;
      c.knowledge_transfer = kt;
      c.calibration = kt;
      const auto p = model::ModelParams<double>::zeros(c);
      const auto blocks = p.blocks(c);
      const auto shapes = model::ModelParams<double>::block_shapes(c);
      ASSERT_EQ(blocks.size(), shapes.size());
      for (std::size_t k = 0; k < blocks.size(); ++k) {
        EXPECT_EQ(blocks[k].name, shapes[k].first);
        EXPECT_EQ(blocks[k].tensor.shape(), shapes[k].second);
      }
    }
  }
}

TEST(ModelParams, InitialGateAndProjection) {
  const auto c = small_config();
  std::mt19937_64 rng(1);
  const auto p = model::init_params<double>(c, rng);
  for (std::size_t i = 0; i < c.d_v; ++i) {
    for (std::size_t j = 0; j < c.d_v; ++j) {
      EXPECT_EQ(p.scene_projection.value()[i * c.d_v + j], i == j ? 1.0 : 0.0);
    }
    EXPECT_GT(p.w_g[i], 0.0);
  }
  for (double v : p.codebook.value()) EXPECT_EQ(v, 0.0);
}

TEST(ModelParams, CloneSharesNoStorage) {
  const auto c = small_config();
  auto p = random_params(c, 2);
  auto q = p.clone(c);
  q.final_head.mutable_value()[0] += 1;
  EXPECT_NE(p.final_head[0], q.final_head[0]);
}

TEST(BuildPrior, CountsUnannotatedPairsAsNone) {
  sgg::data::SceneSample s;
  s.image_id = "x";
  s.objects = {{{0, 0, 1, 1}, 0, {}}, {{0, 0, 1, 1}, 1, {}}, {{0, 0, 1, 1}, 1, {}}};
  s.gt_triples = {{0, 2, 1}};
  const auto prior = model::build_prior({s}, 2, 3);
  const auto counts = prior.counts();
  auto at = [&](std::size_t a, std::size_t b, std::size_t r) { return counts[(a * 2 + b) * 3 + r]; };
  EXPECT_EQ(at(0, 1, 2), 1);
  // (0,2) is unannotated; (1,0), (1,2), (2,0), (2,1) too.
  EXPECT_EQ(at(0, 1, 0), 1);
  EXPECT_EQ(at(1, 0, 0), 2);
  EXPECT_EQ(at(1, 1, 0), 2);
}

TEST(EncodeObjects, RejectsWrongWidthAndDerivesSceneFeature) {
  const auto c = small_config();
  model::Model<double> m(c, random_params(c, 3));
  const std::vector<double> f(c.d_v, 1.0), g(c.d_v + 1, 1.0);
  const std::vector<std::span<const double>> bad{g};
  EXPECT_THROW(m.encode_objects(bad, std::nullopt), sgg::Error);
  const std::vector<double> h(c.d_v, 3.0);
  const std::vector<std::span<const double>> ok{f, h};
  // Without a scene feature the object mean stands in for it.
  const auto derived = m.encode_objects(ok, std::nullopt);
  const auto explicit_mean = m.encode_objects(ok, std::vector<double>(c.d_v, 2.0));
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t k = 0; k < c.d_v; ++k) {
      EXPECT_EQ(derived.refined[i][k], explicit_mean.refined[i][k]);
    }
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto c = small_config();
  const auto p = random_params(c, 4);
  TempDir dir("ckpt");
  ckpt::save_checkpoint(c, p, dir / "a.ckpt");
  const auto loaded = ckpt::load_checkpoint(dir / "a.ckpt", c);
  EXPECT_EQ(loaded.config, c);
  const auto before = p.blocks(c);
  const auto after = loaded.params.blocks(c);
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t k = 0; k < before.size(); ++k) {
    EXPECT_TRUE(std::ranges::equal(before[k].tensor.value(), after[k].tensor.value())) << before[k].name;
  }
  EXPECT_EQ(loaded.params.class_weights, p.class_weights);
  EXPECT_TRUE(std::ranges::equal(loaded.params.prior.counts(), p.prior.counts()));
  ckpt::save_checkpoint(loaded.config, loaded.params, dir / "b.ckpt");
  EXPECT_EQ(read_all(dir / "a.ckpt"), read_all(dir / "b.ckpt"));
}

TEST(Checkpoint, RoundTripGivesIdenticalMetrics) {
  sgg::data::GeneratorConfig g;
  g.n_object_classes = 7;
  g.n_relations = 5;
  g.d_v = 6;
  g.scenes = 20;
  g.detections = false;
  const auto d = sgg::data::generate(g);
  const auto c = small_config();
  auto p = random_params(c, 5);
  p.prior = model::build_prior(d.train, 7, 5);
  TempDir dir("ckpt-metrics");
  ckpt::save_checkpoint(c, p, dir / "m.ckpt");
  auto loaded = ckpt::load_checkpoint(dir / "m.ckpt");
  p.prior.build_log_table();
  loaded.params.prior.build_log_table();
  const model::Model<double> a(c, std::move(p));
  const model::Model<double> b(loaded.config, std::move(loaded.params));
  EXPECT_EQ(sgg::eval::to_json(sgg::eval::evaluate(a, d.test)).dump(),
            sgg::eval::to_json(sgg::eval::evaluate(b, d.test)).dump());
}

TEST(Checkpoint, WrongWidthNamesTheBlock) {
  const auto c = small_config();
  TempDir dir("ckpt-width");
  ckpt::save_checkpoint(c, random_params(c, 6), dir / "a.ckpt");
  auto wider = c;
  wider.d_v = 8;
  const auto err = load_error(dir / "a.ckpt", wider);
  EXPECT_FALSE(err.empty());
  EXPECT_NE(err.find("object.weight"), std::string::npos) << err;
}

TEST(Checkpoint, RefusesOtherVersionsAndCorruptHeaders) {
  const auto c = small_config();
  TempDir dir("ckpt-version");
  const auto path = dir / "a.ckpt";
  ckpt::save_checkpoint(c, random_params(c, 7), path);
  edit_header(path, [](nlohmann::json& h) { h["version"] = ckpt::kFormatVersion + 1; });
  EXPECT_NE(load_error(path, std::nullopt).find("version"), std::string::npos);

  ckpt::save_checkpoint(c, random_params(c, 7), path);
  edit_header(path, [](nlohmann::json& h) { h["config"]["alpha"] = 3.0; });
  EXPECT_FALSE(load_error(path, std::nullopt).empty());

  std::ofstream(dir / "empty.ckpt");
  EXPECT_FALSE(load_error(dir / "empty.ckpt", std::nullopt).empty());
  EXPECT_FALSE(load_error(dir / "absent.ckpt", std::nullopt).empty());
}
