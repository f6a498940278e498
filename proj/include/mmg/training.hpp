#pragma once

// Shared conditional/unconditional denoiser training with null-conditioning
// dropout, and the two-stage (preliminary -> adaptive fit -> final) procedure.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmg/channel.hpp"
#include "mmg/error.hpp"
#include "mmg/estimator.hpp"
#include "mmg/mlp.hpp"
#include "mmg/optim.hpp"
#include "mmg/rng.hpp"
#include "mmg/tasks.hpp"

namespace mmg {

struct TrainConfig {
  double null_prob = 0.5;  // probability of replacing y by the null value
  std::size_t batch_size = 128;
  std::int64_t iterations = 30000;
  double lr = 1e-3;
  SamplingConfig sampling;
  std::uint64_t seed = 0;
  bool standardize = true;
  std::size_t standardize_samples = 10000;
  std::size_t test_samples = 10000;

  void validate() const {
    if (!(null_prob >= 0.0 && null_prob <= 1.0)) throw ConfigError("train.null_prob must lie in [0, 1]");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (iterations < 1) throw ConfigError("train.iterations must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (standardize && standardize_samples < 2) throw ConfigError("train.standardize_samples must be >= 2");
    if (test_samples < 1) throw ConfigError("train.test_samples must be >= 1");
    sampling.validate();
  }

  bool operator==(const TrainConfig&) const = default;
};

struct LossRecord {
  std::int64_t step;
  double loss;  // mean loss over the epoch ending at `step`
  double lr;
};

struct TrainResult {
  ModelState state;
  Standardizer standardizer;
  std::vector<LossRecord> log;  // one entry per epoch
  std::vector<double> step_losses;
  std::int64_t null_count = 0;  // examples trained with the null condition
  std::int64_t example_count = 0;
};

/// Called after every optimizer step; used for periodic checkpoints.
using StepCallback = std::function<void(const TrainResult&)>;

/// Standardiser fitted on a dedicated training split (identity when disabled).
inline Standardizer fit_standardizer(const TaskSpec& task, const TrainConfig& tc) {
  if (!tc.standardize) return Standardizer::identity(task.dim_x, task.dim_y);
  Rng rng = make_rng(tc.seed, {stream::standardize});
  return Standardizer::fit(sample(task, tc.standardize_samples, rng));
}

/// Held-out evaluation set, already standardised.
inline Batch held_out_set(const TaskSpec& task, const TrainConfig& tc, const Standardizer& s) {
  Rng rng = make_rng(tc.seed, {stream::test_set, static_cast<std::uint32_t>(task.seed)});
  return s.apply(sample(task, tc.test_samples, rng));
}

inline void check_consistent(const TaskSpec& task, const MlpConfig& mlp) {
  mlp.validate();
  if (mlp.input_dim != task.dim_x)
    throw ConfigError("mlp.input_dim (" + std::to_string(mlp.input_dim) + ") must equal task dim_x (" +
                      std::to_string(task.dim_x) + ")");
  if (mlp.cond_dim != task.dim_y)
    throw ConfigError("mlp.cond_dim (" + std::to_string(mlp.cond_dim) + ") must equal task dim_y (" +
                      std::to_string(task.dim_y) + ")");
}

/// Per-step: fresh batch, per-example log-SNR, channel noise, null conditioning with
/// probability null_prob, one Adam step on the mean squared denoising error.
///
/// For the preconditioned parameterisation each example's squared error is weighted by
/// 1 + gamma, so the network output is regressed with unit weight at every SNR. The
/// per-SNR minimiser is unchanged by the weighting.
inline TrainResult train(const TaskSpec& task, const MlpConfig& mlp, const TrainConfig& tc,
                         const OptimizerConfig& oc, const StepCallback& on_step = {}) {
  task.validate();
  check_consistent(task, mlp);
  tc.validate();
  oc.validate();

  TrainResult r;
  r.standardizer = fit_standardizer(task, tc);
  Rng init_rng = make_rng(tc.seed, {stream::init});
  r.state = ModelState::initial(mlp, init_rng, tc.lr);
  Rng rng = make_rng(tc.seed, {stream::train});
  PlateauScheduler scheduler(oc);

  const auto b = static_cast<Eigen::Index>(tc.batch_size);
  const auto dx = static_cast<Eigen::Index>(task.dim_x);
  const auto dy = static_cast<Eigen::Index>(task.dim_y);
  const bool precond = mlp.parameterization == Parameterization::preconditioned;
  std::bernoulli_distribution drop(tc.null_prob);

  DenoiseBatch batch;
  batch.z.resize(dx, b);
  batch.log_snr.resize(b);
  batch.cond_flag.resize(b);
  batch.weight.resize(b);
  double epoch_sum = 0.0;
  std::int64_t epoch_steps = 0;
  r.step_losses.reserve(static_cast<std::size_t>(tc.iterations));

  for (std::int64_t step = 0; step < tc.iterations; ++step) {
    const Batch data = r.standardizer.apply(sample(task, tc.batch_size, rng));
    batch.x_target = data.xs.transpose();
    batch.y = data.ys.transpose();
    for (Eigen::Index j = 0; j < b; ++j) {
      const double t = sample_log_snr(tc.sampling, rng).log_snr;
      const auto c = channel_coefficients_log(t);
      batch.log_snr(j) = t;
      for (Eigen::Index i = 0; i < dx; ++i)
        batch.z(i, j) = c.signal * batch.x_target(i, j) + c.noise * standard_normal(rng);
      const bool null = drop(rng);
      batch.cond_flag(j) = null ? 0.0 : 1.0;
      if (null) batch.y.col(j).setZero();
      r.null_count += null ? 1 : 0;
      batch.weight(j) = precond ? 1.0 / (c.noise * c.noise) : 1.0;
    }
    if (dy == 0) batch.y.resize(0, b);
    r.example_count += b;

    LossGrad lg;
    try {
      lg = loss_and_grad(r.state.weights, mlp, batch);
    } catch (const NumericError& e) {
      throw NumericError(std::string("training diverged: ") + e.what(), step + 1);
    }
    adam_step(r.state, lg.grad, oc);
    r.step_losses.push_back(lg.loss);

    epoch_sum += lg.loss;
    if (++epoch_steps == oc.steps_per_epoch || step + 1 == tc.iterations) {
      const double epoch_loss = epoch_sum / static_cast<double>(epoch_steps);
      r.log.push_back({r.state.step, epoch_loss, r.state.lr});
      if (epoch_steps == oc.steps_per_epoch) r.state.lr = scheduler.update(epoch_loss, r.state.lr);
      epoch_sum = 0.0;
      epoch_steps = 0;
    }
    if (on_step) on_step(r);
  }
  return r;
}

/// Default-sampling grid and budget for the preliminary curve.
struct CurveSettings {
  std::vector<double> grid = default_curve_grid();
  std::size_t samples_per_point = 4096;
  bool rebase_thresholds = false;  // see fit_adaptive
};

/// Sampler over the standardised held-out set of a trained run.
inline Sampler test_sampler(const TaskSpec& task, const TrainConfig& tc, const Standardizer& s) {
  return fixed_set_sampler(held_out_set(task, tc, s));
}

template <Denoiser D>
AdaptiveFit adaptive_fit_for(const D& denoiser, const Sampler& sampler, std::size_t dim_x,
                             const SamplingConfig& defaults, const CurveSettings& cs, Rng& rng) {
  const MmseCurve curve = mmse_curve(denoiser, sampler, cs.grid, cs.samples_per_point, rng);
  return fit_adaptive(curve, dim_x, defaults, cs.rebase_thresholds);
}

struct TwoStageResult {
  TrainResult preliminary;
  TrainResult final;
  AdaptiveFit fit;  // fit.config is the sampling used for the final model
};

/// Preliminary model with tc.sampling, adaptive fit from its conditional curve, final model
/// trained with the fitted proposal. A failed fit keeps tc.sampling (fit.fallback is set).
inline TwoStageResult two_stage_train(const TaskSpec& task, const MlpConfig& mlp, const TrainConfig& tc,
                                      const OptimizerConfig& oc, const CurveSettings& cs = {}) {
  TwoStageResult out;
  out.preliminary = train(task, mlp, tc, oc);
  const NetworkDenoiser prelim(mlp, out.preliminary.state);
  Rng rng = make_rng(tc.seed, {stream::curve});
  out.fit = adaptive_fit_for(prelim, test_sampler(task, tc, out.preliminary.standardizer), task.dim_x,
                             tc.sampling, cs, rng);
  TrainConfig final_tc = tc;
  final_tc.sampling = out.fit.config;
  out.final = train(task, mlp, final_tc, oc);
  return out;
}

}  // namespace mmg
