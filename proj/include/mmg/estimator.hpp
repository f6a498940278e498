#pragma once

// MMSE curves, the importance-sampled MMSE-gap and orthogonal MI estimators,
// the adaptive proposal fit, and pointwise density / pointwise MI.

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mmg/channel.hpp"
#include "mmg/denoiser.hpp"
#include "mmg/error.hpp"
#include "mmg/rng.hpp"
#include "mmg/tasks.hpp"

namespace mmg {

/// Draws `n` joint samples in the denoiser's coordinate frame.
using Sampler = std::function<Batch(std::size_t n, Rng& rng)>;

inline Sampler fresh_sampler(const TaskSpec& task) {
  return [task](std::size_t n, Rng& rng) { return sample(task, n, rng); };
}

inline Sampler fresh_sampler(const JointGaussianSpec& spec) {
  TaskSpec t;
  t.family = Family::gaussian;
  t.dim_x = spec.dim_x;
  t.dim_y = spec.dim_y;
  t.cov = spec.cov;
  return fresh_sampler(t);
}

/// Fixed held-out set: returned whole when n equals its size, otherwise resampled with replacement.
inline Sampler fixed_set_sampler(Batch data) {
  return [data = std::move(data)](std::size_t n, Rng& rng) {
    const auto rows = data.xs.rows();
    if (static_cast<Eigen::Index>(n) == rows) return data;
    std::uniform_int_distribution<Eigen::Index> pick(0, rows - 1);
    Batch out{Matrix(static_cast<Eigen::Index>(n), data.xs.cols()),
              Matrix(static_cast<Eigen::Index>(n), data.ys.cols())};
    for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n); ++r) {
      const Eigen::Index k = pick(rng);
      out.xs.row(r) = data.xs.row(k);
      out.ys.row(r) = data.ys.row(k);
    }
    return out;
  };
}

enum class Variant { gap, gap_adaptive, orthogonal, orthogonal_adaptive };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::gap: return "gap";
    case Variant::gap_adaptive: return "gap-adaptive";
    case Variant::orthogonal: return "orthogonal";
    case Variant::orthogonal_adaptive: return "orthogonal-adaptive";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::gap, Variant::gap_adaptive, Variant::orthogonal, Variant::orthogonal_adaptive})
    if (to_string(v) == s) return v;
  throw ConfigError("variant: unknown estimator variant '" + s + "'");
}

inline bool is_orthogonal(Variant v) { return v == Variant::orthogonal || v == Variant::orthogonal_adaptive; }
inline bool is_adaptive(Variant v) { return v == Variant::gap_adaptive || v == Variant::orthogonal_adaptive; }

// ---------------------------------------------------------------- shared noising

/// One chunk of (x, y, t, eps) with both denoiser passes evaluated on the same z.
struct PairedPasses {
  Matrix x, y, z, uncond, cond;  // dims x n
  Vector log_snr;
};

template <Denoiser D>
PairedPasses paired_passes(const D& denoiser, const Batch& data, const Vector& log_snr, Rng& rng) {
  const Eigen::Index n = data.xs.rows();
  if (static_cast<std::size_t>(data.xs.cols()) != denoiser.dim_x() ||
      static_cast<std::size_t>(data.ys.cols()) != denoiser.dim_y())
    throw ConfigError("sampler and denoiser dimensions differ");
  PairedPasses p;
  p.x = data.xs.transpose();
  p.y = data.ys.transpose();
  p.log_snr = log_snr;
  p.z.resize(p.x.rows(), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto c = channel_coefficients_log(log_snr(j));
    for (Eigen::Index i = 0; i < p.x.rows(); ++i) p.z(i, j) = c.signal * p.x(i, j) + c.noise * standard_normal(rng);
  }
  p.uncond = denoiser.denoise(p.z, log_snr, nullptr);
  p.cond = denoiser.denoise(p.z, log_snr, &p.y);
  return p;
}

// ---------------------------------------------------------------- MMSE curve

struct MmseCurve {
  std::vector<double> grid;    // ascending log-SNR
  std::vector<double> uncond;  // Monte-Carlo E||x - xhat(z)||^2
  std::vector<double> cond;    // Monte-Carlo E||x - xhat(z, y)||^2
  std::vector<double> orth;    // Monte-Carlo E||xhat(z, y) - xhat(z)||^2
  std::vector<double> uncond_se, cond_se, gap_se, orth_se;  // standard errors of the means
  std::size_t samples_per_point = 0;
};

inline std::vector<double> uniform_grid(double lo, double hi, std::size_t n) {
  if (n < 1) throw ConfigError("grid needs at least one point");
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

/// Default curve grid: 64 points over log-SNR [-10, 10].
inline std::vector<double> default_curve_grid() { return uniform_grid(-10.0, 10.0, 64); }

namespace detail {
struct Moments {
  double mean = 0.0, se = 0.0;
};
inline Moments moments(const Eigen::ArrayXd& v) {
  const double n = static_cast<double>(v.size());
  Moments m;
  m.mean = v.mean();
  if (v.size() > 1) m.se = std::sqrt((v - m.mean).square().sum() / (n - 1.0) / n);
  return m;
}
}  // namespace detail

/// Monte-Carlo MMSE curves; the same (x, y, eps) realisation feeds both passes at each point.
template <Denoiser D>
MmseCurve mmse_curve(const D& denoiser, const Sampler& sampler, const std::vector<double>& grid,
                     std::size_t samples_per_point, Rng& rng) {
  if (grid.empty()) throw ConfigError("mmse_curve: grid must be non-empty");
  if (samples_per_point < 1) throw ConfigError("mmse_curve: samples_per_point must be >= 1");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw ConfigError("mmse_curve: grid must be strictly ascending");
  MmseCurve c;
  c.grid = grid;
  c.samples_per_point = samples_per_point;
  const auto n = static_cast<Eigen::Index>(samples_per_point);
  for (double t : grid) {
    const Batch data = sampler(samples_per_point, rng);
    const PairedPasses p = paired_passes(denoiser, data, Vector::Constant(n, t), rng);
    const Eigen::ArrayXd eu = (p.x - p.uncond).colwise().squaredNorm().transpose().array();
    const Eigen::ArrayXd ec = (p.x - p.cond).colwise().squaredNorm().transpose().array();
    const Eigen::ArrayXd eo = (p.cond - p.uncond).colwise().squaredNorm().transpose().array();
    const auto mu = detail::moments(eu), mc = detail::moments(ec), mo = detail::moments(eo);
    const Eigen::ArrayXd gap = eu - ec;
    c.uncond.push_back(mu.mean);
    c.cond.push_back(mc.mean);
    c.orth.push_back(mo.mean);
    c.uncond_se.push_back(mu.se);
    c.cond_se.push_back(mc.se);
    c.orth_se.push_back(mo.se);
    c.gap_se.push_back(detail::moments(gap).se);
  }
  return c;
}

// ---------------------------------------------------------------- MI estimators

struct MiEstimate {
  double mean_nats = 0.0;
  double std_nats = 0.0;  // sample std across repeats (0 with a single repeat)
  Variant variant = Variant::gap;
  std::size_t n_points = 0;
  std::size_t inference_times = 0;
  SamplingConfig sampling;
  std::vector<double> repeats;  // per-repeat estimates
  double min_contribution = std::numeric_limits<double>::infinity();

  double mean_bits() const { return mean_nats / std::log(2.0); }
  double std_bits() const { return std_nats / std::log(2.0); }
};

struct EstimateOptions {
  // Multiplies every importance weight. 1 in normal use; other values exist to
  // check that the estimate responds linearly to the weights.
  double weight_scale = 1.0;
  Eigen::Index chunk = 8192;
};

/// Per-sample contributions 1/2 * integrand * weight for one repeat of n draws.
template <Denoiser D>
Eigen::ArrayXd contributions(const D& denoiser, const Sampler& sampler, const SamplingConfig& cfg,
                             std::size_t n, bool orthogonal, Rng& rng, const EstimateOptions& opt = {}) {
  Eigen::ArrayXd out(static_cast<Eigen::Index>(n));
  Eigen::Index done = 0;
  while (done < static_cast<Eigen::Index>(n)) {
    const Eigen::Index len = std::min<Eigen::Index>(opt.chunk, static_cast<Eigen::Index>(n) - done);
    const Batch data = sampler(static_cast<std::size_t>(len), rng);
    Vector t(len), w(len);
    for (Eigen::Index j = 0; j < len; ++j) {
      const auto draw = sample_log_snr(cfg, rng);
      t(j) = draw.log_snr;
      w(j) = opt.weight_scale * importance_weight(draw.log_snr, draw.density);
    }
    const PairedPasses p = paired_passes(denoiser, data, t, rng);
    Eigen::ArrayXd integrand;
    if (orthogonal) {
      integrand = (p.cond - p.uncond).colwise().squaredNorm().transpose().array();
    } else {
      integrand = (p.x - p.uncond).colwise().squaredNorm().transpose().array() -
                  (p.x - p.cond).colwise().squaredNorm().transpose().array();
    }
    out.segment(done, len) = 0.5 * integrand * w.array();
    done += len;
  }
  return out;
}

namespace detail {
template <Denoiser D>
MiEstimate estimate_impl(const D& denoiser, const Sampler& sampler, const SamplingConfig& cfg, Rng& rng,
                         Variant variant, const EstimateOptions& opt) {
  cfg.validate();
  MiEstimate e;
  e.variant = variant;
  e.n_points = cfg.n_points;
  e.inference_times = cfg.inference_times;
  e.sampling = cfg;
  const bool orth = is_orthogonal(variant);
  for (std::size_t r = 0; r < cfg.inference_times; ++r) {
    const Eigen::ArrayXd c = contributions(denoiser, sampler, cfg, cfg.n_points, orth, rng, opt);
    if (orth && c.size() > 0 && c.minCoeff() < 0.0)
      throw NumericError("orthogonal contribution is negative");
    if (c.size() > 0) e.min_contribution = std::min(e.min_contribution, c.minCoeff());
    e.repeats.push_back(c.mean());
  }
  const double n = static_cast<double>(e.repeats.size());
  e.mean_nats = std::accumulate(e.repeats.begin(), e.repeats.end(), 0.0) / n;
  if (e.repeats.size() > 1) {
    double ss = 0.0;
    for (double v : e.repeats) ss += (v - e.mean_nats) * (v - e.mean_nats);
    e.std_nats = std::sqrt(ss / (n - 1.0));
  }
  return e;
}
}  // namespace detail

/// 1/2 E[(||x - xhat(z)||^2 - ||x - xhat(z, y)||^2) / q(gamma)]; signed, never clamped.
template <Denoiser D>
MiEstimate estimate_gap(const D& denoiser, const Sampler& sampler, const SamplingConfig& cfg, Rng& rng,
                        bool adaptive = false, const EstimateOptions& opt = {}) {
  return detail::estimate_impl(denoiser, sampler, cfg, rng, adaptive ? Variant::gap_adaptive : Variant::gap, opt);
}

/// 1/2 E[||xhat(z, y) - xhat(z)||^2 / q(gamma)]; every contribution is non-negative.
template <Denoiser D>
MiEstimate estimate_orthogonal(const D& denoiser, const Sampler& sampler, const SamplingConfig& cfg, Rng& rng,
                               bool adaptive = false, const EstimateOptions& opt = {}) {
  return detail::estimate_impl(denoiser, sampler, cfg, rng,
                               adaptive ? Variant::orthogonal_adaptive : Variant::orthogonal, opt);
}

template <Denoiser D>
MiEstimate estimate(const D& denoiser, const Sampler& sampler, const SamplingConfig& cfg, Rng& rng,
                    Variant variant, const EstimateOptions& opt = {}) {
  return detail::estimate_impl(denoiser, sampler, cfg, rng, variant, opt);
}

// ---------------------------------------------------------------- adaptive proposal

struct AdaptiveFit {
  SamplingConfig config;
  bool fallback = false;
  bool rebased = false;                    // thresholds taken from the curve's low-SNR value
  double half_level = 0.0, quarter_level = 0.0;
  std::optional<double> half_crossing;     // log-SNR where the curve crosses half_level
  std::optional<double> quarter_crossing;  // log-SNR where the curve crosses quarter_level
};

inline constexpr double kMinAdaptiveScale = 0.5;

namespace detail {
/// First downward crossing of `level` at or after index `from`, linearly interpolated.
inline std::optional<std::pair<double, std::size_t>> first_crossing(const std::vector<double>& grid,
                                                                    const std::vector<double>& v,
                                                                    double level, std::size_t from) {
  for (std::size_t i = from; i + 1 < v.size(); ++i) {
    if (v[i] >= level && v[i + 1] < level) {
      const double f = (v[i] - level) / (v[i] - v[i + 1]);
      return std::make_pair(grid[i] + f * (grid[i + 1] - grid[i]), i);
    }
  }
  return std::nullopt;
}
}  // namespace detail

/// Location at the d/2 crossing of the conditional curve, scale = (d/4 crossing - d/2 crossing)
/// floored at kMinAdaptiveScale. Missing crossings fall back to `defaults`.
///
/// A conditional curve that already starts below d/2 (its zero-SNR error tr(Cov[x|y]) is
/// under half the data dimension, e.g. any strongly correlated pair) can never cross d/2
/// and falls back. With `rebase` set, the two thresholds are instead taken as 1/2 and 1/4
/// of the curve's value at the lowest grid point in that case.
inline AdaptiveFit fit_adaptive(const MmseCurve& curve, std::size_t d, const SamplingConfig& defaults,
                                bool rebase = false) {
  if (curve.cond.size() != curve.grid.size() || curve.grid.empty())
    throw ConfigError("fit_adaptive: conditional curve missing");
  AdaptiveFit fit;
  fit.config = defaults;
  double top = static_cast<double>(d);
  if (rebase && curve.cond.front() < top / 2.0 && curve.cond.front() > 0.0) {
    top = curve.cond.front();
    fit.rebased = true;
  }
  fit.half_level = top / 2.0;
  fit.quarter_level = top / 4.0;
  const auto half = detail::first_crossing(curve.grid, curve.cond, fit.half_level, 0);
  if (half) {
    fit.half_crossing = half->first;
    const auto quarter = detail::first_crossing(curve.grid, curve.cond, fit.quarter_level, half->second);
    if (quarter) fit.quarter_crossing = quarter->first;
  }
  if (!fit.half_crossing || !fit.quarter_crossing) {
    fit.fallback = true;
    return fit;
  }
  fit.config.loc = *fit.half_crossing;
  fit.config.scale = std::max(*fit.quarter_crossing - *fit.half_crossing, kMinAdaptiveScale);
  return fit;
}

// ---------------------------------------------------------------- pointwise quantities

struct PointwiseResult {
  double value = 0.0;
  bool grid_too_narrow = false;  // integrand not decayed at an endpoint
};

inline std::vector<double> default_density_grid() { return uniform_grid(-14.0, 14.0, 281); }

namespace detail {
inline double trapezoid(const std::vector<double>& t, const std::vector<double>& f) {
  double s = 0.0;
  for (std::size_t i = 1; i < t.size(); ++i) s += 0.5 * (f[i] + f[i - 1]) * (t[i] - t[i - 1]);
  return s;
}

inline bool endpoints_decayed(const std::vector<double>& f, double tol) {
  return std::abs(f.front()) <= tol && std::abs(f.back()) <= tol;
}

/// Squared errors of both passes for a fixed x over `mc` channel draws at log-SNR t,
/// plus ||eps||^2 for each draw.
struct PointwiseErrors {
  Eigen::ArrayXd uncond, cond, noise_sq;
};

template <Denoiser D>
PointwiseErrors pointwise_errors(const D& denoiser, const Vector& x, const Matrix* y_col, double t,
                                 std::size_t mc, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(mc);
  const auto c = channel_coefficients_log(t);
  const Matrix xs = x.replicate(1, n);
  Matrix eps(x.size(), n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < x.size(); ++i) eps(i, j) = standard_normal(rng);
  const Matrix z = c.signal * xs + c.noise * eps;
  const Vector tv = Vector::Constant(n, t);
  PointwiseErrors e;
  e.noise_sq = eps.colwise().squaredNorm().transpose().array();
  e.uncond = (xs - denoiser.denoise(z, tv, nullptr)).colwise().squaredNorm().transpose().array();
  if (y_col) {
    const Matrix ys = y_col->replicate(1, n);
    e.cond = (xs - denoiser.denoise(z, tv, &ys)).colwise().squaredNorm().transpose().array();
  }
  return e;
}
}  // namespace detail

inline constexpr double kEndpointTolerance = 1e-3;

/// log p(x) = -d/2 log(2 pi e) + 1/2 int (d/(1+g) - mmse(x|g)) dg, integrated over log-SNR.
template <Denoiser D>
PointwiseResult pointwise_log_density(const D& denoiser, const Vector& x, const std::vector<double>& grid,
                                      std::size_t mc, Rng& rng) {
  if (grid.size() < 2) throw ConfigError("pointwise_log_density: grid needs at least two nodes");
  const double d = static_cast<double>(x.size());
  std::vector<double> f(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double t = grid[i];
    const double gamma = std::exp(t);
    // ||eps||^2 has mean d, so it replaces d in the reference term as a control variate
    // that cancels the channel noise at high SNR.
    const auto e = detail::pointwise_errors(denoiser, x, nullptr, t, mc, rng);
    f[i] = gamma * (e.noise_sq / (1.0 + gamma) - e.uncond).mean();
  }
  PointwiseResult r;
  r.value = -0.5 * d * std::log(2.0 * M_PI * M_E) + 0.5 * detail::trapezoid(grid, f);
  r.grid_too_narrow = !detail::endpoints_decayed(f, kEndpointTolerance);
  return r;
}

/// log p(x|y) - log p(x) = 1/2 int (mmse(x|g) - mmse(x|g,y)) dg.
template <Denoiser D>
PointwiseResult pointwise_mi(const D& denoiser, const Vector& x, const Vector& y, const std::vector<double>& grid,
                             std::size_t mc, Rng& rng) {
  if (grid.size() < 2) throw ConfigError("pointwise_mi: grid needs at least two nodes");
  std::vector<double> f(grid.size());
  const Matrix ycol = y;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto e = detail::pointwise_errors(denoiser, x, &ycol, grid[i], mc, rng);
    f[i] = std::exp(grid[i]) * (e.uncond - e.cond).mean();
  }
  PointwiseResult r;
  r.value = 0.5 * detail::trapezoid(grid, f);
  r.grid_too_narrow = !detail::endpoints_decayed(f, kEndpointTolerance);
  return r;
}

}  // namespace mmg
