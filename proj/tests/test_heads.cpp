#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "sgg/relation_head.hpp"
#include "sgg/scene_interaction.hpp"
#include "support.hpp"

namespace nx = sgg::numerics;
namespace rel = sgg::relation;
namespace scene = sgg::scene;
using DT = nx::DiffTensor<double>;

namespace {

DT vec(std::vector<double> v, bool grad = false) { return DT::vector(std::move(v), grad); }

std::vector<double> values(const DT& t) { return {t.value().begin(), t.value().end()}; }

std::size_t argmax(const DT& t) {
  const auto v = t.value();
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Scene-object interaction.

TEST(InteractionCoefficient, Examples) {
  EXPECT_EQ(scene::interaction_coefficient(vec({5, -3}), vec({2, 7}), vec({0, 0})).item(), 0.0);
  EXPECT_EQ(scene::interaction_coefficient(vec({2, 0}), vec({1, 1}), vec({1, -1})).item(), 2.0);
  EXPECT_EQ(scene::interaction_coefficient(vec({2, 0}), vec({1, 1}), vec({-1, 1})).item(), 0.0);
  EXPECT_THROW(scene::interaction_coefficient(vec({1}), vec({1, 1}), vec({1, 1})), sgg::Error);
}

TEST(RefineObjectFeature, Examples) {
  EXPECT_EQ(values(scene::refine_object_feature(vec({1, 2}), vec({9, 9}), DT::scalar(0))),
            (std::vector<double>{1, 2}));
  EXPECT_EQ(values(scene::refine_object_feature(vec({0, 0}), vec({3, -4}), DT::scalar(1))),
            (std::vector<double>{3, -4}));
  EXPECT_EQ(values(scene::refine_object_feature(vec({1, 1}), vec({0.5, -0.5}), DT::scalar(2))),
            (std::vector<double>{2, 0}));
  EXPECT_THROW(scene::refine_object_feature(vec({1}), vec({1}), DT::scalar(-1)), sgg::Error);
}

TEST(ClassWeights, Examples) {
  EXPECT_EQ(scene::class_weights(std::vector<std::int64_t>{10, 10}), (std::vector<double>{1, 1}));
  const auto w = scene::class_weights(std::vector<std::int64_t>{90, 10});
  EXPECT_NEAR(w[0], 0.2, 1e-12);
  EXPECT_NEAR(w[1], 1.8, 1e-12);
  EXPECT_THROW(scene::class_weights(std::vector<std::int64_t>{0, 0}), sgg::Error);
}

TEST(ClassWeights, MeanIsOneAndUnseenGetsLargest) {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::int64_t> count(0, 500);
  for (int k = 0; k < 200; ++k) {
    std::vector<std::int64_t> c(20);
    for (auto& v : c) v = count(rng);
    c[0] = 1 + count(rng);
    const auto w = scene::class_weights(c);
    double mean = 0;
    for (double v : w) {
      EXPECT_GT(v, 0);
      mean += v / static_cast<double>(w.size());
    }
    EXPECT_NEAR(mean, 1.0, 1e-9);
  }
  const auto w = scene::class_weights(std::vector<std::int64_t>{4, 1, 0});
  EXPECT_EQ(w[2], w[1]);
  EXPECT_LT(w[0], w[1]);
}

TEST(SceneMultilabelLoss, Examples) {
  auto head = scene::Affine<double>::zeros(2, 3);
  const std::vector<double> ones{1, 1};
  const std::vector<double> target{1, 0};
  EXPECT_NEAR(scene::scene_multilabel_loss(vec({1, 2, 3}), head, std::span<const double>(target),
                                           std::span<const double>(ones))
                  .item(),
              2 * std::log(2.0), 1e-12);
  const std::vector<double> twos{2, 2};
  EXPECT_NEAR(scene::scene_multilabel_loss(vec({1, 2, 3}), head, std::span<const double>(target),
                                           std::span<const double>(twos))
                  .item(),
              4 * std::log(2.0), 1e-12);
  const std::vector<double> bad{0.5, 0};
  EXPECT_THROW(scene::scene_multilabel_loss(vec({1, 2, 3}), head, std::span<const double>(bad),
                                            std::span<const double>(ones)),
               sgg::Error);
}

TEST(SceneMultilabelLoss, DecreasesUnderGradientDescent) {
  std::mt19937_64 rng(2);
  auto head = scene::Affine<double>::zeros(4, 6);
  std::vector<DT> xs;
  std::vector<std::vector<double>> ts;
  std::normal_distribution<double> normal(0, 1);
  for (int k = 0; k < 8; ++k) {
    std::vector<double> x(6), t(4);
    for (auto& v : x) v = normal(rng);
    for (std::size_t c = 0; c < 4; ++c) t[c] = x[c] > 0 ? 1 : 0;
    xs.push_back(vec(x));
    ts.push_back(t);
  }
  const std::vector<double> w{1, 1, 1, 1};
  auto batch_loss = [&] {
    DT total = DT::scalar(0);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      total = nx::add(total, scene::scene_multilabel_loss(xs[k], head, std::span<const double>(ts[k]),
                                                          std::span<const double>(w)));
    }
    return total;
  };
  const double initial = batch_loss().item();
  for (int step = 0; step < 50; ++step) {
    head.weight.zero_grad();
    head.bias.zero_grad();
    auto loss = batch_loss();
    EXPECT_GE(loss.item(), 0);
    nx::backward(loss);
    for (auto* p : {&head.weight, &head.bias}) {
      auto v = p->mutable_value();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.05 * p->grad()[i];
    }
  }
  EXPECT_LT(batch_loss().item(), initial);
}

TEST(ClassifyObjects, ZeroHeadIsUniformAndTrainingSeparates) {
  auto head = scene::Affine<double>::zeros(3, 3);
  const auto uniform = scene::classify_objects(vec({4, 5, 6}), head);
  for (double p : uniform.value()) EXPECT_NEAR(p, 1.0 / 3, 1e-15);

  // Three well-separated classes; plain gradient descent on cross-entropy.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0, 0.3);
  std::vector<std::pair<DT, std::size_t>> data;
  for (int k = 0; k < 60; ++k) {
    const std::size_t c = static_cast<std::size_t>(k % 3);
    std::vector<double> x(3);
    for (std::size_t d = 0; d < 3; ++d) x[d] = (d == c ? 2.0 : 0.0) + noise(rng);
    data.emplace_back(vec(x), c);
  }
  for (int epoch = 0; epoch < 30; ++epoch) {
    for (const auto& [x, c] : data) {
      head.weight.zero_grad();
      head.bias.zero_grad();
      nx::backward(nx::cross_entropy(head(x), c));
      for (auto* p : {&head.weight, &head.bias}) {
        auto v = p->mutable_value();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.1 * p->grad()[i];
      }
    }
  }
  int correct = 0;
  for (const auto& [x, c] : data) {
    const auto p = scene::classify_objects(x, head);
    double total = 0;
    for (double v : p.value()) total += v;
    EXPECT_NEAR(total, 1.0, 1e-12);
    correct += argmax(p) == c;
  }
  EXPECT_GE(correct, 57);
}

// ---------------------------------------------------------------------------
// Relation head.

TEST(TripleFeature, Examples) {
  EXPECT_EQ(values(rel::triple_feature(vec({1, 2}), vec({2, 2}), vec({3, 0.5}), vec({0.1}))),
            (std::vector<double>{6, 2, 0.1}));
  const auto t = rel::triple_feature(vec({0, 0, 0}), vec({1, 2, 3}), vec({4, 5, 6}), vec({7, 8}));
  EXPECT_EQ(values(t), (std::vector<double>{0, 0, 0, 7, 8}));
  EXPECT_THROW(rel::triple_feature(vec({1}), vec({1, 2}), vec({1, 2}), vec({0})), sgg::Error);
}

TEST(InitCodebook, Examples) {
  std::mt19937_64 rng(4);
  const std::vector<std::vector<double>> f{{1, 2}, {3, 4}};
  const std::vector<std::size_t> l{0, 1};
  EXPECT_EQ(rel::init_codebook(std::span(f), std::span(l), 2, rng),
            (std::vector<double>{1, 2, 3, 4}));

  const std::vector<std::vector<double>> g{{0, 0}, {2, 2}, {5, 5}};
  const std::vector<std::size_t> m{1, 1, 2};
  const auto cb = rel::init_codebook(std::span(g), std::span(m), 4, rng);
  EXPECT_EQ(cb[2], 1.0);
  EXPECT_EQ(cb[3], 1.0);
  for (std::size_t r : {0u, 3u}) {
    for (std::size_t d = 0; d < 2; ++d) EXPECT_LT(std::abs(cb[r * 2 + d]), 0.06);
  }
  EXPECT_THROW(rel::init_codebook(std::span(g), std::span(m), 0, rng), sgg::Error);
  EXPECT_THROW(rel::init_codebook(std::span(g), std::span(m), 2, rng), sgg::Error);
}

TEST(InitCodebook, UnseenRelationsFollowSeed) {
  const std::vector<std::vector<double>> f{{1, 1}};
  const std::vector<std::size_t> l{0};
  std::mt19937_64 a(9), b(9);
  EXPECT_EQ(rel::init_codebook(std::span(f), std::span(l), 5, a),
            rel::init_codebook(std::span(f), std::span(l), 5, b));
}

TEST(LloydKmeans, SeparatesTwoClusters) {
  std::mt19937_64 rng(5);
  const std::vector<std::vector<double>> p{{0, 0}, {0, 1}, {10, 10}, {10, 11}};
  const auto km = rel::lloyd_kmeans(std::span<const std::vector<double>>(p), 2, rng);
  EXPECT_EQ(km.assignment[0], km.assignment[1]);
  EXPECT_EQ(km.assignment[2], km.assignment[3]);
  EXPECT_NE(km.assignment[0], km.assignment[2]);
}

TEST(CodewordLoss, Examples) {
  const auto d = DT::matrix(2, 2, {0, 0, 1, 1});
  EXPECT_NEAR(rel::codeword_loss(vec({3, 4}), 0, d, 10.0).item(), 11.0, 1e-12);
  // f on its codeword and the other codeword beyond the margin.
  const auto far = DT::matrix(2, 2, {0, 0, 5, 5});
  EXPECT_EQ(rel::codeword_loss(vec({0, 0}), 0, far, 1.0).item(), 0.0);
  EXPECT_THROW(rel::codeword_loss(vec({0, 0}), 2, far, 1.0), sgg::Error);
  EXPECT_THROW(rel::codeword_loss(vec({0, 0}), 0, far, 0.0), sgg::Error);
}

TEST(CodewordLoss, MonotoneInMarginAndPullsTowardCodeword) {
  std::mt19937_64 rng(6);
  for (int k = 0; k < 100; ++k) {
    auto d = sgg::testing::random_tensor<double>({4, 3}, rng, 2.0, 0.0, false);
    auto f = sgg::testing::random_tensor<double>({3}, rng, 2.0, 1e-3, true);
    double prev = -1;
    for (double m : {0.1, 0.5, 1.0, 2.0, 4.0}) {
      const double l = rel::codeword_loss(f, 1, d, m).item();
      EXPECT_GE(l, prev);
      prev = l;
    }
  }
  for (int k = 0; k < 100; ++k) {
    auto d = sgg::testing::random_tensor<double>({3, 4}, rng, 1.0, 0.0, false);
    auto f = sgg::testing::random_tensor<double>({4}, rng, 3.0, 0.0, true);
    const auto row = vec({d.value().begin() + 8, d.value().end()});
    const double before = nx::l1_distance(f, row).item();
    if (before == 0) continue;
    // The pull term alone: dis(f, d_2).
    nx::backward(nx::l1_distance(f, row));
    auto moved = f.clone();
    auto v = moved.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 1e-3 * f.grad()[i];
    EXPECT_LT(nx::l1_distance(moved, row).item(), before);
  }
}

TEST(CoarsePredict, Examples) {
  const auto p = rel::coarse_predict(vec({1, 2}), DT::zeros({4, 2}), DT::zeros({4}));
  for (double v : p.value()) EXPECT_EQ(v, 0.25);
  std::mt19937_64 rng(7);
  const auto q = rel::coarse_predict(sgg::testing::random_tensor<double>({5}, rng, 3, 0, false),
                                     sgg::testing::random_tensor<double>({6, 5}, rng, 3, 0, false),
                                     sgg::testing::random_tensor<double>({6}, rng, 3, 0, false));
  double total = 0;
  for (double v : q.value()) {
    EXPECT_GT(v, 0);
    total += v;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Hallucinate, Examples) {
  const auto d = DT::matrix(2, 2, {0, 0, 2, 4});
  EXPECT_EQ(values(rel::hallucinate(vec({0.5, 0.5}), d)), (std::vector<double>{1, 2}));
  EXPECT_EQ(values(rel::hallucinate(vec({0, 1}), d)), (std::vector<double>{2, 4}));
  const auto same = DT::matrix(3, 2, {7, -1, 7, -1, 7, -1});
  EXPECT_EQ(values(rel::hallucinate(vec({0.25, 0.25, 0.5}), same)), (std::vector<double>{7, -1}));
  EXPECT_THROW(rel::hallucinate(vec({0.5, 0.6}), d), sgg::Error);
  EXPECT_THROW(rel::hallucinate(vec({1.5, -0.5}), d), sgg::Error);
}

TEST(Hallucinate, StaysInsideCodewordHull) {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 200; ++k) {
    auto d = sgg::testing::random_tensor<double>({6, 5}, rng, 3, 0, false);
    auto p = nx::softmax(sgg::testing::random_tensor<double>({6}, rng, 4, 0, false));
    const auto h = rel::hallucinate(p, d);
    for (std::size_t j = 0; j < 5; ++j) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t r = 0; r < 6; ++r) {
        lo = std::min(lo, d[r * 5 + j]);
        hi = std::max(hi, d[r * 5 + j]);
      }
      EXPECT_GE(h[j], lo - 1e-12);
      EXPECT_LE(h[j], hi + 1e-12);
    }
  }
}

TEST(Fuse, Examples) {
  auto f = rel::fuse(vec({1, 1}), vec({2, 0}), vec({1, 0}));
  EXPECT_EQ(f.coefficient.item(), 3.0);
  EXPECT_EQ(values(f.feature), (std::vector<double>{7, 1}));
  auto id = rel::fuse(vec({1, -2}), vec({5, 5}), vec({0, 0}));
  EXPECT_EQ(values(id.feature), (std::vector<double>{1, -2}));
  // w_f = [0.5, 0] makes a = 1 for f = 0, f_hall = [2, 3].
  auto h = rel::fuse(vec({0, 0}), vec({2, 3}), vec({0.5, 0}));
  EXPECT_EQ(values(h.feature), (std::vector<double>{2, 3}));
}

TEST(Calibrate, Examples) {
  EXPECT_EQ(values(rel::calibrate(vec({1, -1}), vec({0.2, 0.2, 0.2, 0.2, 0.2}), 10.0)),
            (std::vector<double>{2, -2}));
  EXPECT_EQ(values(rel::calibrate(vec({3}), vec({0.25, 0.25, 0.25, 0.25}), 10.0)),
            (std::vector<double>{7.5}));
  EXPECT_EQ(values(rel::calibrate(vec({3}), vec({0, 1, 0}), 10.0)), (std::vector<double>{30}));
  EXPECT_THROW(rel::calibrate(vec({3}), vec({1}), 0.0), sgg::Error);
}

TEST(Calibrate, DetachedConfidencePassesNoGradient) {
  auto logits = vec({0.3, -0.1, 0.7}, true);
  auto f = vec({1, 2}, true);
  nx::backward(nx::sum(rel::calibrate(f, nx::softmax(logits), 10.0, true)));
  for (double g : logits.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_NE(f.grad()[0], 0.0);
}

TEST(Calibrate, ArgmaxInvariantWithoutPrior) {
  std::mt19937_64 rng(9);
  for (int k = 0; k < 300; ++k) {
    auto head = sgg::testing::random_tensor<double>({6, 5}, rng, 1, 0, false);
    auto f = sgg::testing::random_tensor<double>({5}, rng, 2, 0, false);
    auto p = nx::softmax(sgg::testing::random_tensor<double>({6}, rng, 3, 0, false));
    for (double alpha : {0.1, 1.0, 10.0}) {
      EXPECT_EQ(argmax(rel::relation_logits(rel::calibrate(f, p, alpha), head)),
                argmax(rel::relation_logits(f, head)));
    }
  }
}

TEST(RelationPrior, SmoothedLogProbabilities) {
  rel::RelationPrior prior(2, 3);
  prior.add(0, 1, 2, 5);
  prior.add(0, 1, 0);
  const auto lp = prior.log_prior(0, 1);
  EXPECT_NEAR(std::exp(lp[0]), 2.0 / 9.0, 1e-15);
  EXPECT_NEAR(std::exp(lp[1]), 1.0 / 9.0, 1e-15);
  EXPECT_NEAR(std::exp(lp[2]), 6.0 / 9.0, 1e-15);
  for (double v : prior.log_prior(1, 1)) EXPECT_NEAR(std::exp(v), 1.0 / 3.0, 1e-15);
  prior.build_log_table();
  EXPECT_EQ(prior.log_prior(0, 1), lp);
  EXPECT_THROW(prior.log_prior(2, 0), sgg::Error);
  EXPECT_THROW(prior.add(0, 0, 3), sgg::Error);
}

TEST(RelationLogits, Examples) {
  const auto head = DT::zeros({3, 2});
  EXPECT_EQ(values(rel::relation_logits(vec({1, 2}), head)), (std::vector<double>{0, 0, 0}));

  rel::RelationPrior prior(2, 3);
  prior.add(1, 0, 1, 7);
  const auto p = nx::softmax(rel::relation_logits(vec({1, 2}), head, &prior, rel::ClassPair{1, 0}));
  EXPECT_NEAR(p[0], 0.1, 1e-12);
  EXPECT_NEAR(p[1], 0.8, 1e-12);
  EXPECT_NEAR(p[2], 0.1, 1e-12);
  EXPECT_THROW(rel::relation_logits(vec({1, 2}), head, &prior), sgg::Error);
}
