#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>

#include "mmg/error.hpp"
#include "mmg/mlp.hpp"
#include "mmg/rng.hpp"

namespace mmg {

/// One draw from the Gaussian channel z = sqrt(g/(1+g)) x + sqrt(1/(1+g)) eps.
struct ChannelSample {
  Vector x;
  std::optional<Vector> y;
  double gamma = 1.0;
  Vector noise;
  Vector z;
};

/// Coefficients of the channel at SNR `gamma`.
struct ChannelCoefficients {
  double signal;  // sqrt(gamma / (1 + gamma))
  double noise;   // sqrt(1 / (1 + gamma))
};

inline ChannelCoefficients channel_coefficients(double gamma) {
  if (!(gamma > 0.0)) throw DomainError("channel SNR must be positive");
  return {std::sqrt(gamma / (1.0 + gamma)), std::sqrt(1.0 / (1.0 + gamma))};
}

/// Coefficients from log-SNR; stable for |log_snr| large, and defined at gamma = e^t -> 0.
inline ChannelCoefficients channel_coefficients_log(double log_snr) {
  // gamma/(1+gamma) = sigmoid(t), 1/(1+gamma) = sigmoid(-t)
  const double s = 1.0 / (1.0 + std::exp(-log_snr));
  const double n = 1.0 / (1.0 + std::exp(log_snr));
  return {std::sqrt(s), std::sqrt(n)};
}

inline ChannelSample add_noise(const Vector& x, double gamma, Rng& rng) {
  if (!(gamma > 0.0)) throw DomainError("add_noise: gamma must be positive");
  if (!x.allFinite()) throw DomainError("add_noise: x must be finite");
  const auto c = channel_coefficients(gamma);
  ChannelSample s;
  s.x = x;
  s.gamma = gamma;
  s.noise.resize(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) s.noise(i) = standard_normal(rng);
  s.z = c.signal * x + c.noise * s.noise;
  return s;
}

/// Logistic proposal over log-SNR, truncated to loc +/- clip * scale, plus Monte-Carlo budgets.
struct SamplingConfig {
  double loc = 2.0;
  double scale = 3.0;
  double clip = 4.0;
  std::size_t n_points = 10000;
  std::size_t inference_times = 10;

  void validate() const {
    if (!std::isfinite(loc)) throw ConfigError("sampling.loc must be finite");
    if (!(scale > 0.0)) throw ConfigError("sampling.scale must be positive");
    if (!(clip > 0.0)) throw ConfigError("sampling.clip must be positive");
    if (n_points < 1) throw ConfigError("sampling.n_points must be >= 1");
    if (inference_times < 1) throw ConfigError("sampling.inference_times must be >= 1");
  }

  double lower() const { return loc - clip * scale; }
  double upper() const { return loc + clip * scale; }

  bool operator==(const SamplingConfig&) const = default;
};

namespace detail {
inline double logistic_cdf(double t, double loc, double scale) {
  return 1.0 / (1.0 + std::exp(-(t - loc) / scale));
}
}  // namespace detail

/// Probability mass of the untruncated logistic inside the truncation window.
inline double truncation_mass(const SamplingConfig& c) {
  return detail::logistic_cdf(c.upper(), c.loc, c.scale) -
         detail::logistic_cdf(c.lower(), c.loc, c.scale);
}

/// Untruncated logistic density at `t`.
inline double logistic_pdf(double t, double loc, double scale) {
  const double u = -std::abs(t - loc) / scale;  // symmetric, avoids overflow
  const double e = std::exp(u);
  return e / (scale * (1.0 + e) * (1.0 + e));
}

/// Truncated-logistic density; zero outside the window.
inline double truncated_logistic_pdf(double t, const SamplingConfig& c) {
  if (t < c.lower() || t > c.upper()) return 0.0;
  return logistic_pdf(t, c.loc, c.scale) / truncation_mass(c);
}

struct LogSnrDraw {
  double log_snr;
  double density;
};

/// Inverse-CDF draw restricted to the truncation window.
inline LogSnrDraw sample_log_snr(const SamplingConfig& c, Rng& rng) {
  const double lo = detail::logistic_cdf(c.lower(), c.loc, c.scale);
  const double hi = detail::logistic_cdf(c.upper(), c.loc, c.scale);
  const double p = lo + uniform01(rng) * (hi - lo);
  double t = c.loc + c.scale * std::log(p / (1.0 - p));
  t = std::clamp(t, c.lower(), c.upper());
  return {t, truncated_logistic_pdf(t, c)};
}

/// 1 / q(gamma) for a proposal with log-SNR density `density` at `log_snr`:
/// q(gamma) = f_T(ln gamma) / gamma, so the weight is gamma / f_T(t).
inline double importance_weight(double log_snr, double density) {
  if (!(density > 0.0)) throw DomainError("importance_weight: density must be positive");
  return std::exp(log_snr) / density;
}

}  // namespace mmg
