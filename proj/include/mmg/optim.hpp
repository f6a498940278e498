#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>

#include "mmg/error.hpp"
#include "mmg/mlp.hpp"

namespace mmg {

struct OptimizerConfig {
  double lr = 1e-3;
  std::pair<double, double> betas{0.9, 0.999};
  double eps = 1e-8;
  double ema_decay = 0.999;
  std::int64_t plateau_patience = 200;  // epochs
  double plateau_factor = 0.5;
  std::int64_t steps_per_epoch = 100;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
    auto open01 = [](double v) { return v > 0.0 && v < 1.0; };
    if (!open01(betas.first) || !open01(betas.second))
      throw ConfigError("optimizer.betas must lie in (0, 1)");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0))
      throw ConfigError("optimizer.ema_decay must lie in [0, 1)");
    if (plateau_patience < 0) throw ConfigError("optimizer.plateau_patience must be >= 0");
    if (!open01(plateau_factor)) throw ConfigError("optimizer.plateau_factor must lie in (0, 1)");
    if (steps_per_epoch < 1) throw ConfigError("optimizer.steps_per_epoch must be >= 1");
  }

  bool operator==(const OptimizerConfig&) const = default;
};

/// One bias-corrected Adam update followed by the EMA shadow update. Uses `model.lr`.
inline void adam_step(ModelState& model, std::span<const double> grad, const OptimizerConfig& opt) {
  const std::size_t n = model.weights.size();
  if (grad.size() != n || model.ema_weights.size() != n || model.adam_m.size() != n ||
      model.adam_v.size() != n)
    throw ConfigError("adam_step: gradient and state vectors must share one length");
  for (double g : grad)
    if (!std::isfinite(g)) throw NumericError("non-finite gradient", model.step);

  const auto [b1, b2] = opt.betas;
  const std::int64_t t = model.step + 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double decay = opt.ema_decay;
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grad[i];
    model.adam_m[i] = b1 * model.adam_m[i] + (1.0 - b1) * g;
    model.adam_v[i] = b2 * model.adam_v[i] + (1.0 - b2) * g * g;
    const double m_hat = model.adam_m[i] / c1;
    const double v_hat = model.adam_v[i] / c2;
    model.weights[i] -= model.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
    model.ema_weights[i] = decay * model.ema_weights[i] + (1.0 - decay) * model.weights[i];
  }
  model.step = t;
}

/// Reduce-on-plateau: multiplies the learning rate by `factor` after `patience`
/// consecutive epochs without a strict improvement of the best epoch loss.
class PlateauScheduler {
 public:
  PlateauScheduler(std::int64_t patience, double factor) : patience_(patience), factor_(factor) {
    if (patience < 0) throw ConfigError("plateau patience must be >= 0");
    if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau factor must lie in (0, 1)");
  }
  explicit PlateauScheduler(const OptimizerConfig& c)
      : PlateauScheduler(c.plateau_patience, c.plateau_factor) {}

  double update(double epoch_loss, double lr) {
    if (!std::isfinite(epoch_loss)) throw NumericError("non-finite epoch loss");
    if (epoch_loss < best_) {
      best_ = epoch_loss;
      bad_epochs_ = 0;
      return lr;
    }
    if (++bad_epochs_ >= patience_) {
      bad_epochs_ = 0;
      ++reductions_;
      return lr * factor_;
    }
    return lr;
  }

  double best() const { return best_; }
  std::int64_t bad_epochs() const { return bad_epochs_; }
  std::int64_t reductions() const { return reductions_; }

 private:
  std::int64_t patience_;
  double factor_;
  double best_ = std::numeric_limits<double>::infinity();
  std::int64_t bad_epochs_ = 0;
  std::int64_t reductions_ = 0;
};

}  // namespace mmg
