#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "clipflow/scorer_eval.hpp"
#include "clipflow/trainer.hpp"
#include "test_util.hpp"

using namespace clipflow;
using clipflow::testing::close_rel;
using clipflow::testing::random_matrix;

namespace {

Model small_model(std::uint64_t seed, bool randomize) {
  Model m;
  m.adapter = init_adapter(6, 4, seed);
  m.flow = init_flow({4, 2, 5, 1.9}, seed + 1);
  if (randomize) clipflow::testing::randomize_flow(m.flow, seed + 2, 0.4);
  return m;
}

// Central differences of the loss over every parameter, compared with the
// analytic gradient.
void check_gradients(Model model, const Eigen::MatrixXd& nat, const Eigen::MatrixXd& proxy,
                     const ObjectiveOptions& opts) {
  const LossAndGrads lg = gradients(nat, proxy, model, opts);
  EXPECT_NEAR(lg.loss, loss(nat, proxy, model, opts), 1e-12);
  const auto analytic = gradient_blocks(lg.grads);
  auto params = parameter_blocks(model, opts.adapter_trainable);
  ASSERT_EQ(params.size(), analytic.size());
  const double h = 1e-6;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t j = 0; j < params[b].size(); ++j) {
      const double saved = params[b][j];
      params[b][j] = saved + h;
      const double up = loss(nat, proxy, model, opts);
      params[b][j] = saved - h;
      const double down = loss(nat, proxy, model, opts);
      params[b][j] = saved;
      const double fd = (up - down) / (2 * h);
      EXPECT_TRUE(close_rel(analytic[b][j], fd, 1e-4, 1e-8))
          << "block " << b << " index " << j << ": " << analytic[b][j] << " vs " << fd;
    }
  }
}

}  // namespace

TEST(Objective, IdentityFlowUnitFeatureValues) {
  Model m;
  m.adapter = identity_adapter(128);
  m.flow = init_flow({128, 2, 8, 1.9}, 0);
  const Eigen::MatrixXd x = Eigen::MatrixXd::Constant(3, 128, 0.25);
  EXPECT_NEAR(loss(x, {}, m, {TrainMode::natural}), 1.0 / 256.0, 1e-15);
  EXPECT_NEAR(loss({}, x, m, {TrainMode::proxy}), -1.0 / 256.0, 1e-15);
  EXPECT_EQ(loss(x, x, m, {TrainMode::both}), 0.0);
  EXPECT_NEAR(loss(x, {}, m, {TrainMode::natural, true}), -1.0 / 256.0, 1e-15);
}

TEST(Objective, MissingSamplesForMode) {
  const Model m = small_model(1, false);
  const Eigen::MatrixXd x = Eigen::MatrixXd::Ones(2, 6);
  EXPECT_THROW(loss({}, x, m, {TrainMode::natural}), ConfigError);
  EXPECT_THROW(loss(x, {}, m, {TrainMode::proxy}), ConfigError);
  EXPECT_THROW(loss(x, {}, m, {TrainMode::both}), ConfigError);
}

TEST(Objective, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Eigen::MatrixXd nat = random_matrix(5, 6, rng);
  const Eigen::MatrixXd proxy = random_matrix(7, 6, rng, 2.0);
  for (bool randomize : {false, true}) {
    for (TrainMode mode : {TrainMode::natural, TrainMode::proxy, TrainMode::both}) {
      SCOPED_TRACE(std::string(to_string(mode)) + (randomize ? " random" : " identity"));
      check_gradients(small_model(11, randomize), nat, proxy, {mode, false, true});
    }
  }
  check_gradients(small_model(12, true), nat, proxy, {TrainMode::both, true, true});
  check_gradients(small_model(13, true), nat, proxy, {TrainMode::both, false, false});
}

TEST(Objective, IdenticalBatchesCancelExactly) {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd x = random_matrix(9, 6, rng);
  const Model m = small_model(5, true);
  const LossAndGrads lg = gradients(x, x, m, {TrainMode::both});
  EXPECT_EQ(lg.loss, 0.0);
  for (const auto& blk : gradient_blocks(lg.grads))
    for (double g : blk) EXPECT_EQ(g, 0.0);
}

TEST(Objective, FrozenAdapterHasNoGradientBlock) {
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd x = random_matrix(3, 6, rng);
  const Model m = small_model(6, true);
  const auto frozen = gradients(x, {}, m, {TrainMode::natural, false, false});
  EXPECT_FALSE(frozen.grads.adapter.has_value());
  EXPECT_EQ(gradient_blocks(frozen.grads).size(), 4 * m.flow.blocks.size());
  const auto live = gradients(x, {}, m, {TrainMode::natural, false, true});
  EXPECT_EQ(gradient_blocks(live.grads).size(), 4 * m.flow.blocks.size() + 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<double> p{1.0, -2.0, 0.5};
  const std::vector<double> g{0.3, -7.0, 0.0};
  OptimizerState st;
  adam_step({std::span<double>(p)}, {std::span<const double>(g)}, st, {});
  EXPECT_NEAR(p[0], 1.0 - 1e-4, 1e-9);
  EXPECT_NEAR(p[1], -2.0 + 1e-4, 1e-9);
  EXPECT_EQ(p[2], 0.5);
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  std::vector<double> p{1.0, 2.0};
  const std::vector<double> g{0.0, 0.0};
  OptimizerState st;
  for (int i = 0; i < 5; ++i) adam_step({std::span<double>(p)}, {std::span<const double>(g)}, st, {});
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], 2.0);
}

TEST(Adam, ShapeMismatchRejected) {
  std::vector<double> p{1.0, 2.0};
  const std::vector<double> g{0.0};
  OptimizerState st;
  EXPECT_THROW(adam_step({std::span<double>(p)}, {std::span<const double>(g)}, st, {}), ConfigError);
  const std::vector<double> g2{1.0, 1.0};
  adam_step({std::span<double>(p)}, {std::span<const double>(g2)}, st, {});
  std::vector<double> q{1.0, 2.0, 3.0};
  const std::vector<double> g3{1.0, 1.0, 1.0};
  EXPECT_THROW(adam_step({std::span<double>(q)}, {std::span<const double>(g3)}, st, {}), ConfigError);
}

namespace {

// Naturals ~ N(0, I), proxies ~ N((3, 3), I) in two dimensions.
TrainingData clouds(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  TrainingData data;
  data.naturals.resize(static_cast<Eigen::Index>(n), 2);
  data.proxies.resize(static_cast<Eigen::Index>(n), 2);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    data.naturals.row(i) << d(rng), d(rng);
    data.proxies.row(i) << 3.0 + d(rng), 3.0 + d(rng);
  }
  return data;
}

TrainConfig small_config(TrainMode mode) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.use_dr = false;
  cfg.normalize = false;
  cfg.flow = {2, 4, 16, 1.9};
  cfg.adam.learning_rate = 1e-3;
  cfg.batch_size = 64;
  cfg.epochs = 8;
  cfg.seed = 21;
  return cfg;
}

}  // namespace

TEST(Train, ProxyModeWithoutProxiesFails) {
  TrainingData data = clouds(10, 1);
  data.proxies.resize(0, 2);
  EXPECT_THROW(train(data, small_config(TrainMode::proxy)), ConfigError);
  EXPECT_THROW(train(data, small_config(TrainMode::both)), ConfigError);
  EXPECT_NO_THROW(train(data, small_config(TrainMode::natural)));
}

TEST(Train, BitwiseDeterministic) {
  const TrainingData data = clouds(300, 2);
  const auto a = train(data, small_config(TrainMode::both));
  const auto b = train(data, small_config(TrainMode::both));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  EXPECT_EQ(encode_model(a.model), encode_model(b.model));
  auto other = small_config(TrainMode::both);
  other.seed = 22;
  EXPECT_NE(encode_model(train(data, other).model), encode_model(a.model));
}

TEST(Train, NaturalModeReducesLoss) {
  // The shifted cloud is far from the base density, so there is room to learn.
  TrainingData data = clouds(400, 3);
  data.naturals = data.proxies;
  const auto r = train(data, small_config(TrainMode::natural));
  ASSERT_EQ(r.epoch_loss.size(), 8u);
  EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
}

TEST(Train, DefaultEpochsPerMode) {
  EXPECT_EQ(default_epochs(TrainMode::natural), 30u);
  EXPECT_EQ(default_epochs(TrainMode::proxy), 30u);
  EXPECT_EQ(default_epochs(TrainMode::both), 10u);
  TrainingData data = clouds(20, 4);
  auto cfg = small_config(TrainMode::both);
  cfg.epochs = 0;
  EXPECT_EQ(train(data, cfg).epoch_loss.size(), 10u);
}

TEST(Train, SeparatesSyntheticClouds) {
  auto cfg = small_config(TrainMode::both);
  cfg.epochs = 30;
  const auto r = train(clouds(1000, 5), cfg);
  const TrainingData held = clouds(300, 6);
  std::vector<double> nat, prox;
  for (Eigen::Index i = 0; i < held.naturals.rows(); ++i) {
    nat.push_back(anomaly_score(held.naturals.row(i).transpose(), r.model));
    prox.push_back(anomaly_score(held.proxies.row(i).transpose(), r.model));
  }
  double wins = 0;
  for (double p : prox)
    for (double q : nat) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
  EXPECT_GE(wins / static_cast<double>(nat.size() * prox.size()), 0.99);
  const double mean_nat = std::accumulate(nat.begin(), nat.end(), 0.0) / static_cast<double>(nat.size());
  const double mean_prox = std::accumulate(prox.begin(), prox.end(), 0.0) / static_cast<double>(prox.size());
  EXPECT_GT(mean_prox, mean_nat);
}

TEST(Train, ParametersAreFilePrecision) {
  auto cfg = small_config(TrainMode::both);
  cfg.use_dr = true;
  cfg.normalize = true;
  cfg.epochs = 1;
  std::mt19937_64 rng(7);
  TrainingData data{random_matrix(50, 6, rng), random_matrix(50, 6, rng)};
  const auto r = train(data, cfg);
  EXPECT_EQ(encode_model(decode_model(encode_model(r.model))), encode_model(r.model));
  const Model back = decode_model(encode_model(r.model));
  EXPECT_TRUE(back.adapter.weight == r.model.adapter.weight);
  EXPECT_TRUE(back.flow.blocks[0].net.w1 == r.model.flow.blocks[0].net.w1);
}

TEST(Train, NoDimensionReductionNeedsMatchingDim) {
  TrainingData data = clouds(10, 8);
  auto cfg = small_config(TrainMode::both);
  cfg.flow.dim = 4;
  EXPECT_THROW(train(data, cfg), ConfigError);
}
