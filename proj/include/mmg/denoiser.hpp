#pragma once

// Denoisers usable by the estimators: the trained network and the exact
// posterior-mean estimator of a joint Gaussian.

#include <algorithm>
#include <concepts>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mmg/channel.hpp"
#include "mmg/error.hpp"
#include "mmg/mlp.hpp"
#include "mmg/tasks.hpp"

namespace mmg {

/// `denoise(z, log_snr, y)` maps a dx x n matrix of noised samples to estimates of x.
/// `y == nullptr` requests the unconditional estimate; otherwise y is dy x n.
template <class D>
concept Denoiser = requires(const D& d, const Matrix& z, const Vector& t, const Matrix* y) {
  { d.dim_x() } -> std::convertible_to<std::size_t>;
  { d.dim_y() } -> std::convertible_to<std::size_t>;
  { d.denoise(z, t, y) } -> std::same_as<Matrix>;
};

enum class WeightSource { ema, raw };

/// Trained network. Holds a copy of the chosen weight vector; read-only and thread-safe.
class NetworkDenoiser {
 public:
  NetworkDenoiser(const MlpConfig& config, const ModelState& state,
                  WeightSource source = WeightSource::ema)
      : config_(config), weights_(source == WeightSource::ema ? state.ema_weights : state.weights) {
    config_.validate();
    if (weights_.size() != parameter_count(config_))
      throw ConfigError("checkpoint weights do not match the network configuration");
  }

  std::size_t dim_x() const { return config_.input_dim; }
  std::size_t dim_y() const { return config_.cond_dim; }
  const MlpConfig& config() const { return config_; }

  Matrix denoise(const Matrix& z, const Vector& log_snr, const Matrix* y) const {
    constexpr Eigen::Index chunk = 4096;
    const Eigen::Index n = z.cols();
    Matrix out(z.rows(), n);
    for (Eigen::Index start = 0; start < n; start += chunk) {
      const Eigen::Index len = std::min(chunk, n - start);
      DenoiseBatch b;
      b.z = z.middleCols(start, len);
      b.log_snr = log_snr.segment(start, len);
      const double flag = y ? 1.0 : 0.0;
      b.cond_flag = Vector::Constant(len, flag);
      if (y) {
        if (static_cast<std::size_t>(y->rows()) != config_.cond_dim)
          throw ConfigError("y has the wrong dimension for this network");
        b.y = y->middleCols(start, len);
      } else {
        b.y = Matrix::Zero(static_cast<Eigen::Index>(config_.cond_dim), len);
      }
      out.middleCols(start, len) = forward_batch(weights_, config_, b);
    }
    return out;
  }

 private:
  MlpConfig config_;
  std::vector<double> weights_;
};

/// E[x | z] and E[x | z, y] for a zero-mean joint Gaussian.
///
/// With x | y ~ N(mu, S) and z = a x + s eps, the posterior mean is
/// mu + a S (a^2 S + s^2 I)^-1 (z - a mu); S is diagonalised once.
class LinearGaussianDenoiser {
 public:
  explicit LinearGaussianDenoiser(const JointGaussianSpec& spec) : spec_(spec) {
    spec_.validate();
    auto decompose = [](const Matrix& s, Matrix& q, Vector& lambda) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(s);
      if (es.info() != Eigen::Success || !(es.eigenvalues().minCoeff() > 0.0))
        throw DomainError("linear_denoiser: singular covariance");
      q = es.eigenvectors();
      lambda = es.eigenvalues();
    };
    decompose(spec_.sxx(), q_prior_, l_prior_);
    decompose(spec_.conditional_cov(), q_cond_, l_cond_);
    if (spec_.dim_y > 0) regression_ = spec_.syy().llt().solve(spec_.sxy().transpose()).transpose();
    else regression_ = Matrix::Zero(static_cast<Eigen::Index>(spec_.dim_x), 0);
  }

  std::size_t dim_x() const { return spec_.dim_x; }
  std::size_t dim_y() const { return spec_.dim_y; }

  Matrix denoise(const Matrix& z, const Vector& log_snr, const Matrix* y) const {
    const Eigen::Index n = z.cols();
    if (static_cast<std::size_t>(z.rows()) != spec_.dim_x) throw ConfigError("z has the wrong dimension");
    Matrix mu = Matrix::Zero(z.rows(), n);
    if (y) {
      if (static_cast<std::size_t>(y->rows()) != spec_.dim_y || y->cols() != n)
        throw ConfigError("y has the wrong shape");
      mu = regression_ * *y;
    }
    const Matrix& q = y ? q_cond_ : q_prior_;
    const Vector& lambda = y ? l_cond_ : l_prior_;
    Matrix out(z.rows(), n);
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto c = channel_coefficients_log(log_snr(j));
      const Vector gain = (c.signal * lambda.array() /
                           (c.signal * c.signal * lambda.array() + c.noise * c.noise)).matrix();
      const Vector resid = z.col(j) - c.signal * mu.col(j);
      out.col(j) = mu.col(j) + q * (gain.asDiagonal() * (q.transpose() * resid));
    }
    return out;
  }

 private:
  JointGaussianSpec spec_;
  Matrix q_prior_, q_cond_, regression_;
  Vector l_prior_, l_cond_;
};

/// Single-sample form of the Gaussian posterior mean.
inline Vector linear_denoiser(const JointGaussianSpec& spec, const Vector& z, double gamma,
                              const std::optional<Vector>& y) {
  if (!(gamma >= 0.0)) throw DomainError("linear_denoiser: gamma must be non-negative");
  const LinearGaussianDenoiser d(spec);
  const Vector t = Vector::Constant(1, gamma > 0.0 ? std::log(gamma) : -1e300);
  Matrix ym;
  if (y) ym = *y;
  return d.denoise(z, t, y ? &ym : nullptr).col(0);
}

static_assert(Denoiser<NetworkDenoiser>);
static_assert(Denoiser<LinearGaussianDenoiser>);

}  // namespace mmg
