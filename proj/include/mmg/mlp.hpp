#pragma once

// Residual-MLP denoiser with a hand-written reverse pass.
//
// Layout of one forward pass (samples are columns):
//
//   feat  = [sin(w_k t); cos(w_k t)]                 time_embed_dim x B
//   e     = act(Wt feat + bt)                         time_embed_dim x B
//   in    = [z; e; flag * y; flag]                    (dx + E + dy + 1) x B
//   h_0   = Win in + bin                              width x B
//   h_k+1 = h_k + W2_k act(W1_k h_k + b1_k) + b2_k    (n_blocks times)
//   F     = Wo act(h_n) + bo                          dx x B
//
// and the returned estimate is either F itself (Parameterization::direct) or
// alpha * z + sigma * F (Parameterization::preconditioned), with
// alpha = sqrt(gamma / (1 + gamma)) and sigma = sqrt(1 / (1 + gamma)).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mmg/error.hpp"
#include "mmg/rng.hpp"

namespace mmg {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation : std::uint8_t { silu = 0, gelu = 1 };

enum class Parameterization : std::uint8_t {
  direct = 0,          // network output is the estimate
  preconditioned = 1,  // estimate = alpha * z + sigma * output
};

inline std::string to_string(Activation a) { return a == Activation::silu ? "silu" : "gelu"; }
inline std::string to_string(Parameterization p) {
  return p == Parameterization::direct ? "direct" : "preconditioned";
}

struct MlpConfig {
  std::size_t input_dim = 1;
  std::size_t width = 64;
  std::size_t n_blocks = 3;
  std::size_t time_embed_dim = 64;
  std::size_t cond_dim = 1;
  std::size_t output_dim = 1;
  Activation activation = Activation::silu;
  Parameterization parameterization = Parameterization::preconditioned;
  // Geometric frequency band of the sinusoidal log-SNR features.
  double freq_min = 0.05;
  double freq_max = 2.0;

  void validate() const {
    if (input_dim == 0) throw ConfigError("mlp.input_dim must be positive");
    if (output_dim != input_dim) throw ConfigError("mlp.output_dim must equal mlp.input_dim");
    if (width == 0) throw ConfigError("mlp.width must be positive");
    if (n_blocks < 1) throw ConfigError("mlp.n_blocks must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
      throw ConfigError("mlp.time_embed_dim must be even and >= 2");
    if (!(freq_min > 0.0) || !(freq_max >= freq_min))
      throw ConfigError("mlp frequency band must satisfy 0 < freq_min <= freq_max");
  }

  bool operator==(const MlpConfig&) const = default;
};

/// Offsets of each tensor inside the flat parameter vector. Matrices are column-major.
struct ParamLayout {
  struct Dense {
    std::size_t w = 0, b = 0, rows = 0, cols = 0;
  };
  Dense time, input, output;
  std::vector<Dense> block_in, block_out;
  std::size_t total = 0;

  explicit ParamLayout(const MlpConfig& c) {
    auto add = [this](std::size_t rows, std::size_t cols) {
      Dense d{total, total + rows * cols, rows, cols};
      total += rows * cols + rows;
      return d;
    };
    const std::size_t e = c.time_embed_dim;
    time = add(e, e);
    input = add(c.width, c.input_dim + e + c.cond_dim + 1);
    for (std::size_t k = 0; k < c.n_blocks; ++k) {
      block_in.push_back(add(c.width, c.width));
      block_out.push_back(add(c.width, c.width));
    }
    output = add(c.output_dim, c.width);
  }
};

inline std::size_t parameter_count(const MlpConfig& c) { return ParamLayout(c).total; }

/// Uniform fan-in initialisation, zero biases, zero output layer.
inline std::vector<double> init_weights(const MlpConfig& c, Rng& rng) {
  c.validate();
  const ParamLayout layout(c);
  std::vector<double> w(layout.total, 0.0);
  auto fill = [&](const ParamLayout::Dense& d) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d.cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < d.rows * d.cols; ++i) w[d.w + i] = u(rng);
  };
  fill(layout.time);
  fill(layout.input);
  for (std::size_t k = 0; k < c.n_blocks; ++k) {
    fill(layout.block_in[k]);
    fill(layout.block_out[k]);
  }
  return w;
}

/// Denoiser weights plus optimizer and EMA state.
struct ModelState {
  std::vector<double> weights;
  std::vector<double> ema_weights;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  std::int64_t step = 0;
  double lr = 1e-3;

  static ModelState initial(const MlpConfig& c, Rng& rng, double lr) {
    ModelState s;
    s.weights = init_weights(c, rng);
    s.ema_weights = s.weights;
    s.adam_m.assign(s.weights.size(), 0.0);
    s.adam_v.assign(s.weights.size(), 0.0);
    s.lr = lr;
    return s;
  }

  bool operator==(const ModelState&) const = default;
};

/// Rows of a denoising problem, one sample per column.
struct DenoiseBatch {
  Matrix z;         // dx x B
  Vector log_snr;   // B
  Matrix y;         // dy x B (may have zero rows when cond_dim == 0)
  Vector cond_flag; // B, entries 0 or 1
  Matrix x_target;  // dx x B (only used by loss_and_grad)
  Vector weight;    // B per-row loss weight; empty means 1

  Eigen::Index size() const { return z.cols(); }
};

namespace detail {

inline double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

inline double activate(Activation a, double u) {
  if (a == Activation::silu) return u * sigmoid(u);
  return 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
}

inline double activate_grad(Activation a, double u) {
  if (a == Activation::silu) {
    const double s = sigmoid(u);
    return s * (1.0 + u * (1.0 - s));
  }
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(u / std::sqrt(2.0))) + u * inv_sqrt_2pi * std::exp(-0.5 * u * u);
}

inline Matrix apply(Activation a, const Matrix& u) {
  if (a == Activation::silu) {
    const Eigen::ArrayXXd s = (1.0 + (-u.array()).exp()).inverse();
    return (u.array() * s).matrix();
  }
  return u.unaryExpr([a](double v) { return activate(a, v); });
}

inline Matrix apply_grad(Activation a, const Matrix& u) {
  if (a == Activation::silu) {
    const Eigen::ArrayXXd s = (1.0 + (-u.array()).exp()).inverse();
    return (s * (1.0 + u.array() * (1.0 - s))).matrix();
  }
  return u.unaryExpr([a](double v) { return activate_grad(a, v); });
}

using ConstMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Vector>;
using MutMap = Eigen::Map<Matrix>;
using MutVecMap = Eigen::Map<Vector>;

// Parameters are copied into Eigen-owned storage before use. Eigen picks its vectorised
// summation order from pointer alignment, and a map into a std::vector at an arbitrary offset
// would make results depend on where the allocator put the buffer.
inline Matrix weight(std::span<const double> p, const ParamLayout::Dense& d) {
  return ConstMap(p.data() + d.w, static_cast<Eigen::Index>(d.rows), static_cast<Eigen::Index>(d.cols));
}
inline Vector bias(std::span<const double> p, const ParamLayout::Dense& d) {
  return ConstVecMap(p.data() + d.b, static_cast<Eigen::Index>(d.rows));
}

inline Vector frequencies(const MlpConfig& c) {
  const auto k = static_cast<Eigen::Index>(c.time_embed_dim / 2);
  Vector f(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double r = k == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(k - 1);
    f(i) = c.freq_min * std::pow(c.freq_max / c.freq_min, r);
  }
  return f;
}

/// Intermediate values kept for the reverse pass.
struct Tape {
  Matrix feat, e_pre, in;
  std::vector<Matrix> h, u, a;
  Matrix out_act;
  Vector skip, scale;  // per-sample alpha and sigma (preconditioned) or 0 and 1
  Matrix estimate;
};

inline void check_inputs(const MlpConfig& c, const DenoiseBatch& b) {
  const auto n = b.z.cols();
  if (static_cast<std::size_t>(b.z.rows()) != c.output_dim)
    throw ConfigError("z has " + std::to_string(b.z.rows()) + " rows, expected " +
                      std::to_string(c.output_dim));
  if (b.log_snr.size() != n || b.cond_flag.size() != n)
    throw ConfigError("log_snr and cond_flag must have one entry per sample");
  if (c.cond_dim > 0 && (static_cast<std::size_t>(b.y.rows()) != c.cond_dim || b.y.cols() != n))
    throw ConfigError("y must be cond_dim x batch");
}

inline void forward_tape(std::span<const double> p, const MlpConfig& c, const DenoiseBatch& b,
                         Tape& t) {
  const ParamLayout layout(c);
  if (p.size() != layout.total) throw ConfigError("weight vector length does not match MlpConfig");
  check_inputs(c, b);
  const Eigen::Index n = b.z.cols();
  const auto dx = static_cast<Eigen::Index>(c.input_dim);
  const auto dy = static_cast<Eigen::Index>(c.cond_dim);
  const auto e = static_cast<Eigen::Index>(c.time_embed_dim);
  const Vector freq = frequencies(c);
  const Eigen::Index half = freq.size();

  t.feat.resize(e, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index k = 0; k < half; ++k) {
      const double arg = freq(k) * b.log_snr(j);
      t.feat(k, j) = std::sin(arg);
      t.feat(half + k, j) = std::cos(arg);
    }
  }
  t.e_pre = (weight(p, layout.time) * t.feat).colwise() + bias(p, layout.time);

  t.in.resize(dx + e + dy + 1, n);
  t.in.topRows(dx) = b.z;
  t.in.middleRows(dx, e) = apply(c.activation, t.e_pre);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double flag = b.cond_flag(j);
    if (flag != 0.0 && flag != 1.0) throw ConfigError("cond_flag entries must be 0 or 1");
    if (dy > 0) t.in.block(dx + e, j, dy, 1) = flag * b.y.col(j);
    t.in(dx + e + dy, j) = flag;
  }

  t.h.assign(c.n_blocks + 1, Matrix());
  t.u.assign(c.n_blocks, Matrix());
  t.a.assign(c.n_blocks, Matrix());
  t.h[0] = (weight(p, layout.input) * t.in).colwise() + bias(p, layout.input);
  for (std::size_t k = 0; k < c.n_blocks; ++k) {
    t.u[k] = (weight(p, layout.block_in[k]) * t.h[k]).colwise() + bias(p, layout.block_in[k]);
    t.a[k] = apply(c.activation, t.u[k]);
    t.h[k + 1] = t.h[k] + ((weight(p, layout.block_out[k]) * t.a[k]).colwise() +
                           bias(p, layout.block_out[k]));
  }
  t.out_act = apply(c.activation, t.h[c.n_blocks]);
  Matrix out = (weight(p, layout.output) * t.out_act).colwise() + bias(p, layout.output);

  t.skip.resize(n);
  t.scale.resize(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (c.parameterization == Parameterization::preconditioned) {
      t.skip(j) = std::sqrt(sigmoid(b.log_snr(j)));
      t.scale(j) = std::sqrt(sigmoid(-b.log_snr(j)));
    } else {
      t.skip(j) = 0.0;
      t.scale(j) = 1.0;
    }
  }
  t.estimate = b.z * t.skip.asDiagonal();
  t.estimate.noalias() += out * t.scale.asDiagonal();
  if (!t.estimate.allFinite()) throw NumericError("non-finite activation in denoiser forward pass");
}

}  // namespace detail

/// Batched denoiser evaluation; returns dx x B estimates.
inline Matrix forward_batch(std::span<const double> weights, const MlpConfig& config,
                            const DenoiseBatch& batch) {
  detail::Tape tape;
  detail::forward_tape(weights, config, batch, tape);
  return std::move(tape.estimate);
}

/// Single-sample denoiser evaluation. `y` is ignored when `cond_flag` is false.
inline Vector forward(std::span<const double> weights, const MlpConfig& config,
                      const Vector& z, double log_snr, const std::optional<Vector>& y,
                      bool cond_flag) {
  DenoiseBatch b;
  b.z = z;
  b.log_snr = Vector::Constant(1, log_snr);
  b.cond_flag = Vector::Constant(1, cond_flag ? 1.0 : 0.0);
  b.y = Matrix::Zero(static_cast<Eigen::Index>(config.cond_dim), 1);
  if (cond_flag) {
    if (!y || static_cast<std::size_t>(y->size()) != config.cond_dim)
      throw ConfigError("conditional pass requires y of length cond_dim");
    b.y.col(0) = *y;
  }
  return forward_batch(weights, config, b).col(0);
}

inline Vector forward(const ModelState& model, const MlpConfig& config, const Vector& z,
                      double log_snr, const std::optional<Vector>& y, bool cond_flag) {
  return forward(model.weights, config, z, log_snr, y, cond_flag);
}

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean over the batch of weight_b * ||x_b - xhat_b||^2 and its exact gradient.
inline LossGrad loss_and_grad(std::span<const double> p, const MlpConfig& c,
                              const DenoiseBatch& b) {
  const Eigen::Index n = b.size();
  if (n == 0) throw ConfigError("loss_and_grad requires a non-empty batch");
  if (b.x_target.rows() != b.z.rows() || b.x_target.cols() != n)
    throw ConfigError("x_target must match z in shape");
  if (!b.x_target.allFinite()) throw NumericError("non-finite training target");
  if (b.weight.size() != 0 && b.weight.size() != n)
    throw ConfigError("weight must be empty or have one entry per sample");

  const ParamLayout layout(c);
  detail::Tape t;
  detail::forward_tape(p, c, b, t);

  Vector w = b.weight.size() == 0 ? Vector::Ones(n) : b.weight;
  const Matrix resid = t.estimate - b.x_target;
  const double loss = (resid.colwise().squaredNorm().transpose().array() * w.array()).sum() /
                      static_cast<double>(n);
  if (!std::isfinite(loss)) throw NumericError("non-finite loss");

  LossGrad out;
  out.loss = loss;
  out.grad.assign(layout.total, 0.0);
  // Evaluated into owned temporaries first, then copied; see detail::weight.
  auto set_grad = [&](const ParamLayout::Dense& d, const Matrix& gw, const Vector& gb) {
    detail::MutMap(out.grad.data() + d.w, static_cast<Eigen::Index>(d.rows), static_cast<Eigen::Index>(d.cols)) = gw;
    detail::MutVecMap(out.grad.data() + d.b, static_cast<Eigen::Index>(d.rows)) = gb;
  };

  // d loss / d network output
  const Vector col_scale = (2.0 / static_cast<double>(n)) * (w.array() * t.scale.array()).matrix();
  const Matrix d_out = resid * col_scale.asDiagonal();

  set_grad(layout.output, d_out * t.out_act.transpose(), d_out.rowwise().sum());
  Matrix dh = detail::weight(p, layout.output).transpose() * d_out;
  dh.array() *= detail::apply_grad(c.activation, t.h[c.n_blocks]).array();

  for (std::size_t k = c.n_blocks; k-- > 0;) {
    set_grad(layout.block_out[k], dh * t.a[k].transpose(), dh.rowwise().sum());
    Matrix du = detail::weight(p, layout.block_out[k]).transpose() * dh;
    du.array() *= detail::apply_grad(c.activation, t.u[k]).array();
    set_grad(layout.block_in[k], du * t.h[k].transpose(), du.rowwise().sum());
    dh.noalias() += detail::weight(p, layout.block_in[k]).transpose() * du;
  }

  set_grad(layout.input, dh * t.in.transpose(), dh.rowwise().sum());
  const auto dx = static_cast<Eigen::Index>(c.input_dim);
  const auto e = static_cast<Eigen::Index>(c.time_embed_dim);
  Matrix de = (detail::weight(p, layout.input).transpose() * dh).middleRows(dx, e);
  de.array() *= detail::apply_grad(c.activation, t.e_pre).array();
  set_grad(layout.time, de * t.feat.transpose(), de.rowwise().sum());
  return out;
}

}  // namespace mmg
