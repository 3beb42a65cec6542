// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "curvloc/binary_io.hpp"
#include "curvloc/random.hpp"
#include "curvloc/score_model.hpp"
#include "test_support.hpp"

namespace m = curvloc::model;
namespace d = curvloc::diffusion;
using curvloc::Matrix;
using curvloc::Vector;

namespace {

m::MlpConfig small_config(int conditions = 3) {
  m::MlpConfig c;
  c.dim = 2;
  c.hidden = {8, 8};
  c.num_conditions = conditions;
  c.time_embed_dim = 4;
  c.cond_embed_dim = 3;
  return c;
}

Matrix toy_data(curvloc::Rng& rng, Eigen::Index n) { return 0.5 * curvloc::standard_normal(2, n, rng); }

}  // namespace

TEST(ScoreModel, TimeEmbeddingValues) {
  const std::vector<int> ts{0, 5};
  const Matrix e = m::time_embedding(ts, 4);
  ASSERT_EQ(e.rows(), 4);
  EXPECT_DOUBLE_EQ(e(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(e(2, 0), 1.0);
  EXPECT_NEAR(e(0, 1), std::sin(5.0), 1e-15);
  EXPECT_NEAR(e(1, 1), std::sin(5.0 / 100.0), 1e-15);
  EXPECT_NEAR(e(3, 1), std::cos(5.0 / 100.0), 1e-15);
}

TEST(ScoreModel, ParameterCountMatchesLayout) {
  const auto cfg = small_config();
  const auto net = m::init_model(cfg, 1);
  // (2+4+3 -> 8) + (8 -> 8) + (8 -> 2) + embedding 3 x 4
  const std::size_t expected = (9 * 8 + 8) + (8 * 8 + 8) + (8 * 2 + 2) + 3 * 4;
  EXPECT_EQ(cfg.param_count(), expected);
  EXPECT_EQ(net.params().total_size(), expected);
  EXPECT_EQ(net.null_slot(), 3);
}

TEST(ScoreModel, InitIsDeterministicAndSeedDependent) {
  const auto a = m::init_model(small_config(), 7).params().flatten();
  const auto b = m::init_model(small_config(), 7).params().flatten();
  const auto c = m::init_model(small_config(), 8).params().flatten();
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(ScoreModel, ConditionsChangeOutputAndUnknownConditionThrows) {
  const auto net = m::init_model(small_config(), 3);
  Vector x(2);
  x << 0.1, 0.2;
  const Vector e0 = net.predict_eps(x, 10, 0);
  const Vector e1 = net.predict_eps(x, 10, 1);
  const Vector en = net.predict_eps(x, 10, d::kNullCondition);
  EXPECT_GT((e0 - e1).norm(), 0.0);
  EXPECT_GT((e0 - en).norm(), 0.0);
  EXPECT_THROW((void)net.predict_eps(x, 10, 3), std::invalid_argument);
}

TEST(ScoreModel, BatchPredictionMatchesSingle) {
  const auto net = m::init_model(small_config(), 4);
  auto rng = curvloc::make_rng(1, {});
  const Matrix X = curvloc::standard_normal(2, 3, rng);
  const std::vector<int> ts{1, 500, 999};
  const std::vector<d::CondId> cs{0, d::kNullCondition, 2};
  const Matrix E = net.predict_eps_batch(X, ts, cs);
  for (int j = 0; j < 3; ++j) {
    EXPECT_LT((E.col(j) - net.predict_eps(X.col(j), ts[static_cast<std::size_t>(j)], cs[static_cast<std::size_t>(j)])).norm(), 1e-14);
  }
}

TEST(Adam, SingleStepMatchesClosedForm) {
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.5, -0.25};
  m::AdamState st;
  const m::AdamConfig cfg;
  m::adam_step(p, g, st, cfg);
  // After one step the bias-corrected moments are g and g^2.
  for (int i = 0; i < 2; ++i) {
    const double gi = g[static_cast<std::size_t>(i)];
    const double ref = (i == 0 ? 1.0 : -2.0) - cfg.learning_rate * gi / (std::abs(gi) + cfg.epsilon);
    EXPECT_NEAR(p[static_cast<std::size_t>(i)], ref, 1e-15);
  }
  EXPECT_EQ(st.steps, 1U);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto net = m::init_model(small_config(), 5, 0xABCDEFULL);
  m::AdamState adam;
  adam.m.assign(net.params().total_size(), 0.125);
  adam.v.assign(net.params().total_size(), 3e-9);
  adam.steps = 17;
  const auto ckpt = m::make_checkpoint(net, 17, adam);
  const auto dir = curvloc::testing::scratch_dir("ckpt");
  m::save_checkpoint(ckpt, dir / "a.ckpt");
  const auto back = m::load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.step, 17U);
  EXPECT_EQ(back.schedule_fingerprint, 0xABCDEFULL);
  EXPECT_EQ(back.config, ckpt.config);
  ASSERT_EQ(back.params.size(), ckpt.params.size());
  EXPECT_EQ(std::memcmp(back.params.data(), ckpt.params.data(), back.params.size() * sizeof(double)), 0);
  ASSERT_TRUE(back.adam.has_value());
  EXPECT_EQ(back.adam->m, adam.m);
  EXPECT_EQ(back.adam->v, adam.v);
  m::save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(curvloc::testing::file_bytes(dir / "a.ckpt"), curvloc::testing::file_bytes(dir / "b.ckpt"));
  const auto model = back.to_model();
  EXPECT_EQ(model.params().flatten(), net.params().flatten());
}

TEST(Checkpoint, CorruptPayloadsAreRejected) {
  const auto bytes = m::serialize_checkpoint(m::make_checkpoint(m::init_model(small_config(), 6), 1));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  EXPECT_THROW((void)m::deserialize_checkpoint(truncated), curvloc::io::FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW((void)m::deserialize_checkpoint(bad_magic), curvloc::io::FormatError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW((void)m::deserialize_checkpoint(trailing), curvloc::io::FormatError);
  EXPECT_THROW((void)m::load_checkpoint("/nonexistent/curvloc.ckpt"), curvloc::io::MissingInputError);
}

TEST(Checkpoint, BaselinePairRules) {
  const auto net = m::init_model(small_config(), 6, 42);
  const auto theta = m::make_checkpoint(net, 100);
  EXPECT_NO_THROW(m::check_baseline_pair(theta, m::make_checkpoint(net, 50)));
  EXPECT_THROW(m::check_baseline_pair(theta, m::make_checkpoint(net, 100)), m::CheckpointError);
  EXPECT_THROW(m::check_baseline_pair(theta, m::make_checkpoint(net, 150)), m::CheckpointError);
  auto other_schedule = net;
  other_schedule.set_schedule_fingerprint(43);
  EXPECT_THROW(m::check_baseline_pair(theta, m::make_checkpoint(other_schedule, 10)), m::CheckpointError);
  EXPECT_THROW(m::check_baseline_pair(theta, m::make_checkpoint(m::init_model(small_config(2), 6, 42), 10)),
               m::CheckpointError);
}

TEST(Training, LossDecreasesAndLogHasExpectedRows) {
  const auto sched = d::make_linear_schedule(100);
  auto rng = curvloc::make_rng(7, {});
  const Matrix x0 = toy_data(rng, 256);
  const std::vector<d::CondId> conds(256, d::kNullCondition);
  auto net = m::init_model(small_config(0), 1, sched.fingerprint());
  m::TrainOptions opt;
  opt.total_steps = 400;
  opt.checkpoint_steps = {100};
  opt.batch_size = 64;
  opt.log_interval = 20;
  opt.adam.learning_rate = 3e-3;
  const auto r = m::train(net, x0, conds, sched, opt);
  ASSERT_EQ(r.log.size(), 400U / 20U);
  EXPECT_EQ(r.log.front().step, 20U);
  EXPECT_EQ(r.log.back().step, 400U);
  ASSERT_EQ(r.checkpoints.size(), 2U);
  EXPECT_EQ(r.checkpoints[0].step, 100U);
  EXPECT_EQ(r.checkpoints[1].step, 400U);
  double early = 0.0;
  double late = 0.0;
  for (int i = 0; i < 3; ++i) {
    early += r.log[static_cast<std::size_t>(i)].loss;
    late += r.log[r.log.size() - 1 - static_cast<std::size_t>(i)].loss;
  }
  EXPECT_LT(late, early);
}

TEST(Training, ResumeReproducesStraightRunBitwise) {
  const auto sched = d::make_linear_schedule(100);
  auto rng = curvloc::make_rng(8, {});
  const Matrix x0 = toy_data(rng, 128);
  std::vector<d::CondId> conds(128);
  for (std::size_t i = 0; i < conds.size(); ++i) conds[i] = static_cast<d::CondId>(i % 3);
  m::TrainOptions opt;
  opt.total_steps = 60;
  opt.checkpoint_steps = {25};
  opt.batch_size = 16;
  opt.log_interval = 5;
  opt.seed = 99;

  auto straight = m::init_model(small_config(), 2, sched.fingerprint());
  const auto full = m::train(straight, x0, conds, sched, opt);

  auto first = m::init_model(small_config(), 2, sched.fingerprint());
  auto opt_a = opt;
  opt_a.total_steps = 25;
  opt_a.checkpoint_steps.clear();
  const auto part = m::train(first, x0, conds, sched, opt_a);
  // Round-trip through bytes as a resume from disk would.
  const auto mid = m::deserialize_checkpoint(m::serialize_checkpoint(part.checkpoints.back()));
  auto resumed = mid.to_model();
  const auto rest = m::train(resumed, x0, conds, sched, opt, &mid);

  EXPECT_EQ(resumed.params().flatten(), straight.params().flatten());
  EXPECT_EQ(m::serialize_checkpoint(rest.checkpoints.back()), m::serialize_checkpoint(full.checkpoints.back()));
  EXPECT_EQ(m::serialize_checkpoint(full.checkpoints.front()), m::serialize_checkpoint(mid));
}

TEST(Training, ZeroStepsEmitsInitialCheckpoint) {
  const auto sched = d::make_linear_schedule(10);
  auto net = m::init_model(small_config(0), 3, sched.fingerprint());
  m::TrainOptions opt;
  opt.total_steps = 0;
  const auto r = m::train(net, Matrix::Zero(2, 4), std::vector<d::CondId>(4, d::kNullCondition), sched, opt);
  ASSERT_EQ(r.checkpoints.size(), 1U);
  EXPECT_EQ(r.checkpoints[0].step, 0U);
  EXPECT_TRUE(r.log.empty());
}

TEST(Training, DivergenceIsReported) {
  const auto sched = d::make_linear_schedule(10);
  auto net = m::init_model(small_config(0), 3, sched.fingerprint());
  m::TrainOptions opt;
  opt.total_steps = 5;
  opt.batch_size = 4;
  opt.adam.learning_rate = 1e308;
  Matrix x0 = Matrix::Constant(2, 4, 1.0);
  EXPECT_THROW((void)m::train(net, x0, std::vector<d::CondId>(4, d::kNullCondition), sched, opt), m::TrainingDivergence);
}
