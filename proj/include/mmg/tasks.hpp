#pragma once

// Synthetic joint distributions with known mutual information, MI-preserving
// transforms, and closed-form Gaussian MMSE / MI oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <json.hpp>

#include "mmg/error.hpp"
#include "mmg/mlp.hpp"
#include "mmg/rng.hpp"

namespace mmg {

/// Zero-mean joint Gaussian over (x, y).
struct JointGaussianSpec {
  std::size_t dim_x = 1;
  std::size_t dim_y = 1;
  Matrix cov;  // (dim_x + dim_y) square

  void validate() const {
    const auto n = static_cast<Eigen::Index>(dim_x + dim_y);
    if (dim_x == 0) throw DomainError("JointGaussianSpec: dim_x must be positive");
    if (cov.rows() != n || cov.cols() != n)
      throw DomainError("JointGaussianSpec: covariance must be (dim_x + dim_y) square");
    if (!cov.allFinite()) throw DomainError("JointGaussianSpec: covariance must be finite");
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + cov.cwiseAbs().maxCoeff()))
      throw DomainError("JointGaussianSpec: covariance must be symmetric");
    Eigen::LLT<Matrix> llt(cov);
    if (llt.info() != Eigen::Success) throw DomainError("JointGaussianSpec: covariance is not positive definite");
  }

  Matrix sxx() const { return cov.topLeftCorner(dim_x, dim_x); }
  Matrix syy() const { return cov.bottomRightCorner(dim_y, dim_y); }
  Matrix sxy() const { return cov.topRightCorner(dim_x, dim_y); }

  /// Sigma_x|y = Sxx - Sxy Syy^-1 Syx.
  Matrix conditional_cov() const {
    if (dim_y == 0) return sxx();
    const Matrix syy_inv_syx = syy().llt().solve(sxy().transpose());
    return sxx() - sxy() * syy_inv_syx;
  }

  static JointGaussianSpec bivariate(double rho) {
    if (!(rho > -1.0 && rho < 1.0)) throw DomainError("bivariate normal requires rho in (-1, 1)");
    JointGaussianSpec s;
    s.cov = Matrix{{1.0, rho}, {rho, 1.0}};
    return s;
  }

  /// Unit variances, every off-diagonal entry (within and across x and y) equal to `strength`.
  static JointGaussianSpec dense(std::size_t dx, std::size_t dy, double strength) {
    JointGaussianSpec s{dx, dy, Matrix::Constant(dx + dy, dx + dy, strength)};
    s.cov.diagonal().setOnes();
    s.validate();
    return s;
  }

  /// Latent-variable sparse model: the first two coordinates of x and y pair up with
  /// correlation strength^2 / (1 + strength^2); everything else is independent.
  static JointGaussianSpec sparse(std::size_t dx, std::size_t dy, double strength) {
    if (!std::isfinite(strength)) throw DomainError("sparse multinormal strength must be finite");
    JointGaussianSpec s{dx, dy, Matrix::Identity(dx + dy, dx + dy)};
    const double l2 = strength * strength;
    const double rho = l2 / (1.0 + l2);
    const std::size_t pairs = std::min<std::size_t>({2, dx, dy});
    for (std::size_t i = 0; i < pairs; ++i) {
      s.cov(i, dx + i) = rho;
      s.cov(dx + i, i) = rho;
    }
    s.validate();
    return s;
  }

  /// Strength whose two interacting pairs carry `total_mi` nats in total.
  static double sparse_strength_for_mi(double total_mi) {
    if (!(total_mi > 0.0)) throw DomainError("target MI must be positive");
    const double rho = std::sqrt(1.0 - std::exp(-total_mi));  // two pairs, each -1/2 ln(1 - rho^2)
    return std::sqrt(rho / (1.0 - rho));
  }
};

// ---------------------------------------------------------------- oracles

namespace detail {
inline Vector spd_eigenvalues(const Matrix& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success || m.rows() == 0 || !(es.eigenvalues().minCoeff() > 0.0))
    throw DomainError(std::string(what) + ": covariance must be symmetric positive definite");
  return es.eigenvalues();
}
}  // namespace detail

/// trace((cov^-1 + gamma I)^-1): MMSE of a Gaussian vector in the SNR-gamma channel.
inline double gaussian_mmse(const Matrix& cov_x, double gamma) {
  if (!(gamma >= 0.0)) throw DomainError("gaussian_mmse: gamma must be non-negative");
  const Vector ev = detail::spd_eigenvalues(cov_x, "gaussian_mmse");
  return (ev.array() / (1.0 + gamma * ev.array())).sum();
}

inline double gaussian_conditional_mmse(const JointGaussianSpec& spec, double gamma) {
  spec.validate();
  return gaussian_mmse(spec.conditional_cov(), gamma);
}

/// 1/2 (ln det Sxx - ln det Sx|y), nats.
inline double gaussian_mi(const JointGaussianSpec& spec) {
  spec.validate();
  const Vector a = detail::spd_eigenvalues(spec.sxx(), "gaussian_mi");
  const Vector b = detail::spd_eigenvalues(spec.conditional_cov(), "gaussian_mi");
  return 0.5 * (a.array().log().sum() - b.array().log().sum());
}

/// MI of a multivariate Student-t with identity dispersion (dependence only through the
/// shared scale variable).
inline double student_t_identity_mi(std::size_t dx, std::size_t dy, double dof) {
  if (!(dof > 0.0)) throw DomainError("student-t requires dof > 0");
  auto f = [](double k) { return std::lgamma(k / 2.0) - k / 2.0 * boost::math::digamma(k / 2.0); };
  const double x = static_cast<double>(dx), y = static_cast<double>(dy);
  return f(dof) + f(dof + x + y) - f(dof + x) - f(dof + y);
}

/// X ~ U(0,1), Y = X + U(-noise, noise).
inline double uniform_additive_mi(double noise) {
  if (!(noise > 0.0)) throw DomainError("additive noise must be positive");
  if (noise <= 0.5) return noise - std::log(2.0 * noise);
  return 1.0 / (4.0 * noise);
}

// ---------------------------------------------------------------- tasks

enum class Family { bivariate_normal, multinormal_dense, multinormal_sparse, student_t, uniform_additive, gaussian };
enum class Transform { none, half_cube, asinh, spiral, normal_cdf };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::bivariate_normal: return "bivariate-normal";
    case Family::multinormal_dense: return "multinormal-dense";
    case Family::multinormal_sparse: return "multinormal-sparse";
    case Family::student_t: return "student-t";
    case Family::uniform_additive: return "uniform-additive";
    case Family::gaussian: return "gaussian";
  }
  return "?";
}

inline std::string to_string(Transform t) {
  switch (t) {
    case Transform::none: return "none";
    case Transform::half_cube: return "half-cube";
    case Transform::asinh: return "asinh";
    case Transform::spiral: return "spiral";
    case Transform::normal_cdf: return "normal-cdf";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  for (Family f : {Family::bivariate_normal, Family::multinormal_dense, Family::multinormal_sparse,
                   Family::student_t, Family::uniform_additive, Family::gaussian})
    if (to_string(f) == s) return f;
  throw ConfigError("task.family: unknown family '" + s + "'");
}

inline Transform transform_from_string(const std::string& s) {
  for (Transform t : {Transform::none, Transform::half_cube, Transform::asinh, Transform::spiral,
                      Transform::normal_cdf})
    if (to_string(t) == s) return t;
  throw ConfigError("task.transform: unknown transform '" + s + "'");
}

/// Row-aligned joint draws, one sample per row.
struct Batch {
  Matrix xs;  // n x dim_x
  Matrix ys;  // n x dim_y
};

struct TaskSpec {
  Family family = Family::bivariate_normal;
  std::size_t dim_x = 1;
  std::size_t dim_y = 1;
  // rho (bivariate), off-diagonal strength (dense), latent strength (sparse), dof (student-t),
  // noise half-width (uniform-additive). Unused for the explicit-covariance family.
  double param = 0.0;
  Matrix cov;  // Family::gaussian only
  Transform transform = Transform::none;
  double spiral_speed = 0.5;
  std::optional<double> ground_truth_nats;
  std::uint64_t seed = 0;
  std::string label;  // overrides the canonical name when non-empty

  /// Base Gaussian of the Gaussian families, before any transform.
  std::optional<JointGaussianSpec> gaussian_spec() const {
    switch (family) {
      case Family::bivariate_normal: return JointGaussianSpec::bivariate(param);
      case Family::multinormal_dense: return JointGaussianSpec::dense(dim_x, dim_y, param);
      case Family::multinormal_sparse: return JointGaussianSpec::sparse(dim_x, dim_y, param);
      case Family::gaussian: {
        JointGaussianSpec s{dim_x, dim_y, cov};
        s.validate();
        return s;
      }
      default: return std::nullopt;
    }
  }

  /// Analytic MI of the base distribution (transforms leave it unchanged).
  std::optional<double> analytic_mi() const {
    if (auto g = gaussian_spec()) return gaussian_mi(*g);
    if (family == Family::student_t) return student_t_identity_mi(dim_x, dim_y, param);
    if (family == Family::uniform_additive) return uniform_additive_mi(param);
    return std::nullopt;
  }

  void validate() const {
    if (dim_x == 0 || dim_y == 0) throw DomainError("task dimensions must be positive");
    switch (family) {
      case Family::bivariate_normal:
        if (dim_x != 1 || dim_y != 1) throw DomainError("bivariate-normal is 1 x 1");
        if (!(param > -1.0 && param < 1.0)) throw DomainError("bivariate-normal requires rho in (-1, 1)");
        break;
      case Family::uniform_additive:
        if (dim_x != 1 || dim_y != 1) throw DomainError("uniform-additive is 1 x 1");
        if (!(param > 0.0)) throw DomainError("uniform-additive requires noise > 0");
        break;
      case Family::student_t:
        if (!(param > 0.0)) throw DomainError("student-t requires dof > 0");
        break;
      default:
        gaussian_spec();  // throws on non-PD
    }
    if (transform == Transform::spiral && (dim_x < 2 || dim_y < 2))
      throw DomainError("spiral transform needs at least two coordinates per variable");
    if (ground_truth_nats && !std::isfinite(*ground_truth_nats))
      throw DomainError("ground truth must be finite");
  }

  /// Known ground truth: explicit override first, then the analytic value.
  std::optional<double> ground_truth() const {
    if (ground_truth_nats) return ground_truth_nats;
    return analytic_mi();
  }

  std::string name() const;
};

namespace detail {

inline std::string format_param(double v, bool force_decimal) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  std::string s(buf);
  if (force_decimal && s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

inline double half_cube(double v) { return v * std::sqrt(std::abs(v)); }
inline double half_cube_inverse(double v) { return std::copysign(std::cbrt(v * v), v); }

inline double normal_cdf(double v) { return 0.5 * std::erfc(-v / std::sqrt(2.0)); }

/// Rotate coordinate pairs (0,1), (2,3), ... of each row by speed * ||row||.
inline void spiral_rows(Eigen::Ref<Matrix> m, double speed) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double angle = speed * m.row(r).norm();
    const double c = std::cos(angle), s = std::sin(angle);
    for (Eigen::Index k = 0; k + 1 < m.cols(); k += 2) {
      const double a = m(r, k), b = m(r, k + 1);
      m(r, k) = c * a - s * b;
      m(r, k + 1) = s * a + c * b;
    }
  }
}

}  // namespace detail

inline std::string TaskSpec::name() const {
  if (!label.empty()) return label;
  using detail::format_param;
  std::string base;
  const std::string dims = std::to_string(dim_x) + "-" + std::to_string(dim_y);
  switch (family) {
    case Family::bivariate_normal: base = "1v1-normal-" + format_param(param, true); break;
    case Family::multinormal_dense: base = "multinormal-dense-" + dims + "-" + format_param(param, true); break;
    case Family::multinormal_sparse: base = "multinormal-sparse-" + dims + "-" + format_param(param, true); break;
    case Family::student_t: base = "student-identity-" + dims + "-" + format_param(param, false); break;
    case Family::uniform_additive: base = "1v1-additive-" + format_param(param, true); break;
    case Family::gaussian: base = "gaussian-" + dims; break;
  }
  switch (transform) {
    case Transform::none: return base;
    case Transform::half_cube: return "halfcube-" + base;
    case Transform::asinh: return "asinh-" + base;
    case Transform::spiral: return "spiral-" + base;
    case Transform::normal_cdf: return "normalcdf-" + base;
  }
  return base;
}

/// Parse a canonical task name such as "multinormal-dense-25-25-0.5" or
/// "spiral-multinormal-sparse-3-3-2.0".
inline TaskSpec parse_task_name(const std::string& full) {
  TaskSpec t;
  std::string s = full;
  const std::pair<const char*, Transform> prefixes[] = {{"halfcube-", Transform::half_cube},
                                                        {"asinh-", Transform::asinh},
                                                        {"spiral-", Transform::spiral},
                                                        {"normalcdf-", Transform::normal_cdf}};
  for (const auto& [p, tr] : prefixes) {
    if (s.rfind(p, 0) == 0) {
      t.transform = tr;
      s = s.substr(std::string(p).size());
      break;
    }
  }
  static const std::regex one(R"(^1v1-(normal|additive)-(-?[0-9.eE+-]+)$)");
  static const std::regex multi(R"(^(multinormal-dense|multinormal-sparse|student-identity)-([0-9]+)-([0-9]+)-([0-9.eE+-]+)$)");
  std::smatch m;
  try {
    if (std::regex_match(s, m, one)) {
      t.family = m[1] == "normal" ? Family::bivariate_normal : Family::uniform_additive;
      t.param = std::stod(m[2]);
    } else if (std::regex_match(s, m, multi)) {
      const std::string fam = m[1];
      t.family = fam == "multinormal-dense"    ? Family::multinormal_dense
                 : fam == "multinormal-sparse" ? Family::multinormal_sparse
                                               : Family::student_t;
      t.dim_x = std::stoul(m[2]);
      t.dim_y = std::stoul(m[3]);
      t.param = std::stod(m[4]);
    } else {
      throw ConfigError("task name '" + full + "' is not a recognised canonical name");
    }
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ConfigError*>(&e)) throw;
    throw ConfigError("task name '" + full + "' has a malformed parameter");
  }
  t.validate();
  return t;
}

/// Per-coordinate scale used to standardise before the normal-CDF transform.
inline Vector marginal_scales(const TaskSpec& t) {
  const auto n = static_cast<Eigen::Index>(t.dim_x + t.dim_y);
  if (auto g = t.gaussian_spec()) return g->cov.diagonal().cwiseSqrt();
  return Vector::Ones(n);
}

inline void apply_transform(const TaskSpec& t, Batch& b) {
  auto per_coord = [&](auto&& f) {
    b.xs = b.xs.unaryExpr(f);
    b.ys = b.ys.unaryExpr(f);
  };
  switch (t.transform) {
    case Transform::none: return;
    case Transform::half_cube: per_coord([](double v) { return detail::half_cube(v); }); return;
    case Transform::asinh: per_coord([](double v) { return std::asinh(v); }); return;
    case Transform::normal_cdf: {
      const Vector s = marginal_scales(t);
      const auto dx = static_cast<Eigen::Index>(t.dim_x);
      for (Eigen::Index j = 0; j < b.xs.cols(); ++j)
        b.xs.col(j) = b.xs.col(j).unaryExpr([&](double v) { return detail::normal_cdf(v / s(j)); });
      for (Eigen::Index j = 0; j < b.ys.cols(); ++j)
        b.ys.col(j) = b.ys.col(j).unaryExpr([&](double v) { return detail::normal_cdf(v / s(dx + j)); });
      return;
    }
    case Transform::spiral:
      detail::spiral_rows(b.xs, t.spiral_speed);
      detail::spiral_rows(b.ys, t.spiral_speed);
      return;
  }
}

/// Base (untransformed) draws.
inline Batch sample_base(const TaskSpec& t, std::size_t n, Rng& rng) {
  const auto rows = static_cast<Eigen::Index>(n);
  const auto dx = static_cast<Eigen::Index>(t.dim_x);
  const auto dy = static_cast<Eigen::Index>(t.dim_y);
  Batch b{Matrix(rows, dx), Matrix(rows, dy)};
  if (auto g = t.gaussian_spec()) {
    const Matrix l = g->cov.llt().matrixL();
    Vector v(dx + dy);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index k = 0; k < dx + dy; ++k) v(k) = standard_normal(rng);
      const Vector s = l * v;
      b.xs.row(r) = s.head(dx).transpose();
      b.ys.row(r) = s.tail(dy).transpose();
    }
    return b;
  }
  if (t.family == Family::student_t) {
    std::chi_squared_distribution<double> chi(t.param);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const double scale = 1.0 / std::sqrt(chi(rng) / t.param);
      for (Eigen::Index k = 0; k < dx; ++k) b.xs(r, k) = scale * standard_normal(rng);
      for (Eigen::Index k = 0; k < dy; ++k) b.ys(r, k) = scale * standard_normal(rng);
    }
    return b;
  }
  // uniform-additive
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double x = uniform01(rng);
    b.xs(r, 0) = x;
    b.ys(r, 0) = x + t.param * (2.0 * uniform01(rng) - 1.0);
  }
  return b;
}

/// n i.i.d. joint draws with the task's transform applied per variable.
inline Batch sample(const TaskSpec& t, std::size_t n, Rng& rng) {
  if (n < 1) throw DomainError("sample: n must be >= 1");
  t.validate();
  Batch b = sample_base(t, n, rng);
  apply_transform(t, b);
  return b;
}

/// Per-coordinate affine standardisation fitted on a training split.
struct Standardizer {
  Vector x_mean, x_scale, y_mean, y_scale;

  static Standardizer identity(std::size_t dx, std::size_t dy) {
    const auto a = static_cast<Eigen::Index>(dx), b = static_cast<Eigen::Index>(dy);
    return {Vector::Zero(a), Vector::Ones(a), Vector::Zero(b), Vector::Ones(b)};
  }

  static Standardizer fit(const Batch& b) {
    auto moments = [](const Matrix& m, Vector& mean, Vector& scale) {
      mean = m.colwise().mean().transpose();
      scale.resize(m.cols());
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double var = (m.col(j).array() - mean(j)).square().sum() /
                           static_cast<double>(std::max<Eigen::Index>(m.rows() - 1, 1));
        scale(j) = var > 0.0 && std::isfinite(var) ? std::sqrt(var) : 1.0;
      }
    };
    Standardizer s;
    moments(b.xs, s.x_mean, s.x_scale);
    moments(b.ys, s.y_mean, s.y_scale);
    return s;
  }

  Batch apply(const Batch& b) const {
    Batch out;
    out.xs = (b.xs.rowwise() - x_mean.transpose()).array().rowwise() / x_scale.transpose().array();
    out.ys = (b.ys.rowwise() - y_mean.transpose()).array().rowwise() / y_scale.transpose().array();
    return out;
  }

  bool operator==(const Standardizer&) const = default;
};

// ---------------------------------------------------------------- descriptor file

inline nlohmann::json task_to_json(const TaskSpec& t) {
  nlohmann::json j;
  j["schema"] = 1;
  j["name"] = t.name();
  j["family"] = to_string(t.family);
  j["dim_x"] = t.dim_x;
  j["dim_y"] = t.dim_y;
  j["param"] = t.param;
  if (t.family == Family::gaussian) {
    std::vector<std::vector<double>> rows;
    for (Eigen::Index r = 0; r < t.cov.rows(); ++r) {
      rows.emplace_back(t.cov.cols());
      for (Eigen::Index c = 0; c < t.cov.cols(); ++c) rows.back()[c] = t.cov(r, c);
    }
    j["cov"] = rows;
  }
  j["transform"] = to_string(t.transform);
  j["spiral_speed"] = t.spiral_speed;
  if (t.ground_truth_nats) j["ground_truth_nats"] = *t.ground_truth_nats;
  else j["ground_truth_nats"] = nullptr;
  j["seed"] = t.seed;
  return j;
}

/// Accepts either a canonical name string or a descriptor object. Unknown keys are rejected.
inline TaskSpec task_from_json(const nlohmann::json& j) {
  if (j.is_string()) return parse_task_name(j.get<std::string>());
  if (!j.is_object()) throw ConfigError("task: expected a name string or an object");
  static const std::vector<std::string> known = {"schema", "name", "family", "dim_x", "dim_y", "param",
                                                 "cov", "transform", "spiral_speed", "ground_truth_nats",
                                                 "seed", "label"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw ConfigError("task." + k + ": unknown key");
  if (j.contains("schema") && j["schema"] != 1) throw ConfigError("task.schema: unsupported version");
  TaskSpec t;
  try {
    if (j.contains("family")) {
      t.family = family_from_string(j["family"].get<std::string>());
      t.dim_x = j.value("dim_x", std::size_t{1});
      t.dim_y = j.value("dim_y", std::size_t{1});
      t.param = j.value("param", 0.0);
    } else if (j.contains("name")) {
      t = parse_task_name(j["name"].get<std::string>());
    } else {
      throw ConfigError("task.family: missing (or give task.name)");
    }
    if (j.contains("cov")) {
      const auto rows = j["cov"].get<std::vector<std::vector<double>>>();
      t.cov.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.size()) throw ConfigError("task.cov: must be square");
        for (std::size_t c = 0; c < rows.size(); ++c) t.cov(r, c) = rows[r][c];
      }
    }
    if (j.contains("transform")) t.transform = transform_from_string(j["transform"].get<std::string>());
    t.spiral_speed = j.value("spiral_speed", t.spiral_speed);
    if (j.contains("ground_truth_nats") && !j["ground_truth_nats"].is_null())
      t.ground_truth_nats = j["ground_truth_nats"].get<double>();
    t.seed = j.value("seed", std::uint64_t{0});
    t.label = j.value("label", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task: ") + e.what());
  }
  try {
    t.validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("task.param: ") + e.what());
  }
  return t;
}

}  // namespace mmg
