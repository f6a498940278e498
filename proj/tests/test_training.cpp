#include <cmath>

#include <gtest/gtest.h>

#include "mmg/denoiser.hpp"
#include "mmg/training.hpp"

using namespace mmg;

namespace {

MlpConfig small_mlp(const TaskSpec& t) {
  MlpConfig m;
  m.input_dim = m.output_dim = t.dim_x;
  m.cond_dim = t.dim_y;
  m.width = 16;
  m.n_blocks = 2;
  m.time_embed_dim = 8;
  return m;
}

TrainConfig small_train(std::int64_t iters, std::uint64_t seed = 3) {
  TrainConfig tc;
  tc.iterations = iters;
  tc.batch_size = 64;
  tc.seed = seed;
  tc.standardize_samples = 2000;
  tc.test_samples = 2000;
  return tc;
}

}  // namespace

TEST(Train, NullRateIsBinomial) {
  const TaskSpec task = parse_task_name("1v1-normal-0.5");
  TrainConfig tc = small_train(50);
  tc.null_prob = 0.3;
  const TrainResult r = train(task, small_mlp(task), tc, OptimizerConfig{});
  const double n = static_cast<double>(r.example_count);
  EXPECT_EQ(r.example_count, 50 * 64);
  const double sd = std::sqrt(n * 0.3 * 0.7);
  EXPECT_LE(std::abs(static_cast<double>(r.null_count) - 0.3 * n), 3.0 * sd);
}

TEST(Train, DeterministicForFixedSeed) {
  const TaskSpec task = parse_task_name("1v1-normal-0.5");
  const TrainResult a = train(task, small_mlp(task), small_train(120), OptimizerConfig{});
  const TrainResult b = train(task, small_mlp(task), small_train(120), OptimizerConfig{});
  EXPECT_EQ(a.state.weights, b.state.weights);
  EXPECT_EQ(a.state.ema_weights, b.state.ema_weights);
  EXPECT_EQ(a.step_losses, b.step_losses);
  const TrainResult c = train(task, small_mlp(task), small_train(120, 4), OptimizerConfig{});
  EXPECT_NE(a.state.weights, c.state.weights);
}

TEST(Train, LogHasOneEntryPerEpoch) {
  const TaskSpec task = parse_task_name("1v1-normal-0.5");
  OptimizerConfig oc;
  oc.steps_per_epoch = 25;
  const TrainResult r = train(task, small_mlp(task), small_train(110), oc);
  ASSERT_EQ(r.log.size(), 5u);
  EXPECT_EQ(r.log.back().step, 110);
  EXPECT_EQ(r.step_losses.size(), 110u);
}

// Per-step losses swing with the sampled SNRs, so compare initial and trained weights on
// one fixed evaluation batch instead.
TEST(Train, LossDecreasesOnAFixedBatch) {
  const TaskSpec task = parse_task_name("multinormal-dense-2-2-0.5");
  const MlpConfig mlp = small_mlp(task);
  const TrainConfig tc = small_train(1500);
  const TrainResult r = train(task, mlp, tc, OptimizerConfig{});
  Rng init_rng = make_rng(tc.seed, {stream::init});
  const ModelState init = ModelState::initial(mlp, init_rng, tc.lr);

  Rng rng = make_rng(99);
  const Batch data = r.standardizer.apply(sample(task, 2000, rng));
  DenoiseBatch b;
  b.x_target = data.xs.transpose();
  b.y = data.ys.transpose();
  b.log_snr = Vector::LinSpaced(2000, -4.0, 4.0);
  b.cond_flag = Vector::NullaryExpr(2000, [&] { return uniform01(rng) < 0.5 ? 0.0 : 1.0; });
  b.z.resize(2, 2000);
  for (Eigen::Index j = 0; j < 2000; ++j) {
    const auto c = channel_coefficients_log(b.log_snr(j));
    for (Eigen::Index i = 0; i < 2; ++i) b.z(i, j) = c.signal * b.x_target(i, j) + c.noise * standard_normal(rng);
  }
  const double before = loss_and_grad(init.weights, mlp, b).loss;
  const double after = loss_and_grad(r.state.weights, mlp, b).loss;
  EXPECT_LT(after, before);
  // Posterior-mean loss on the same batch (standardising is near-identity for this task).
  const LinearGaussianDenoiser oracle(*task.gaussian_spec());
  double best = 0.0;
  for (Eigen::Index j = 0; j < 2000; ++j) {
    const Matrix yj = b.y.col(j);
    const Matrix est = oracle.denoise(b.z.col(j), b.log_snr.segment(j, 1), b.cond_flag(j) ? &yj : nullptr);
    best += (est - b.x_target.col(j)).squaredNorm() / 2000.0;
  }
  EXPECT_LT(after - best, 0.25 * (before - best));
}

TEST(Train, NullRateEndpoints) {
  const TaskSpec task = parse_task_name("1v1-normal-0.75");
  TrainConfig tc = small_train(20);
  tc.null_prob = 1.0;
  const TrainResult all = train(task, small_mlp(task), tc, OptimizerConfig{});
  EXPECT_EQ(all.null_count, all.example_count);
  tc.null_prob = 0.0;
  EXPECT_EQ(train(task, small_mlp(task), tc, OptimizerConfig{}).null_count, 0);
}

TEST(Train, DimensionMismatchIsConfigError) {
  const TaskSpec task = parse_task_name("multinormal-dense-2-2-0.5");
  MlpConfig mlp = small_mlp(task);
  mlp.input_dim = mlp.output_dim = 3;
  EXPECT_THROW(train(task, mlp, small_train(5), OptimizerConfig{}), ConfigError);
  mlp = small_mlp(task);
  mlp.cond_dim = 1;
  EXPECT_THROW(train(task, mlp, small_train(5), OptimizerConfig{}), ConfigError);
}

TEST(Train, InvalidConfigRejected) {
  const TaskSpec task = parse_task_name("1v1-normal-0.5");
  TrainConfig tc = small_train(5);
  tc.null_prob = 1.5;
  EXPECT_THROW(train(task, small_mlp(task), tc, OptimizerConfig{}), ConfigError);
  tc = small_train(0);
  EXPECT_THROW(train(task, small_mlp(task), tc, OptimizerConfig{}), ConfigError);
}

TEST(Train, DivergenceSurfacesAsNumericError) {
  const TaskSpec task = parse_task_name("1v1-normal-0.5");
  TrainConfig tc = small_train(200);
  tc.lr = 1e300;
  EXPECT_THROW(train(task, small_mlp(task), tc, OptimizerConfig{}), NumericError);
}

TEST(Train, StepCallbackSeesEveryStep) {
  const TaskSpec task = parse_task_name("1v1-normal-0.5");
  std::int64_t calls = 0, last_step = 0;
  train(task, small_mlp(task), small_train(30), OptimizerConfig{}, [&](const TrainResult& r) {
    ++calls;
    last_step = r.state.step;
  });
  EXPECT_EQ(calls, 30);
  EXPECT_EQ(last_step, 30);
}

TEST(Train, HeldOutSetIsStandardized) {
  const TaskSpec task = parse_task_name("1v1-normal-0.5");
  const TrainConfig tc = small_train(1);
  const Standardizer s = fit_standardizer(task, tc);
  const Batch b = held_out_set(task, tc, s);
  EXPECT_EQ(b.xs.rows(), 2000);
  EXPECT_NEAR(b.xs.mean(), 0.0, 0.1);
  EXPECT_NEAR(std::sqrt(b.xs.array().square().mean()), 1.0, 0.1);
  // Same seed, same set.
  EXPECT_EQ(held_out_set(task, tc, s).xs, b.xs);
}

TEST(TwoStage, UntrainedCurveFallsBackToDefaults) {
  // After 20 steps the curve may or may not cross; either way the proposal is usable.
  const TaskSpec task = parse_task_name("1v1-normal-0.75");
  CurveSettings cs;
  cs.samples_per_point = 256;
  const TwoStageResult r = two_stage_train(task, small_mlp(task), small_train(20), OptimizerConfig{}, cs);
  EXPECT_EQ(r.preliminary.example_count, r.final.example_count);
  if (r.fit.fallback) EXPECT_EQ(r.fit.config, SamplingConfig{});
  else EXPECT_GE(r.fit.config.scale, kMinAdaptiveScale);
}

TEST(TwoStage, StronglyCorrelatedPairFallsBackUnderTheLiteralRule) {
  // tr Cov[x|y] = 1 - 0.95^2 < 1/2, so the conditional curve never crosses d/2.
  const TaskSpec task = parse_task_name("1v1-normal-0.95");
  CurveSettings cs;
  cs.samples_per_point = 512;
  const TwoStageResult r = two_stage_train(task, small_mlp(task), small_train(3000), OptimizerConfig{}, cs);
  EXPECT_TRUE(r.fit.fallback);
  EXPECT_EQ(r.fit.config, SamplingConfig{});
}
