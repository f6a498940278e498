#pragma once

// JSON (de)serialisation of the configuration structs. Readers overlay the keys
// present in a JSON object onto an existing value, so profile defaults can be
// filled first; unknown keys and wrongly typed values are rejected with the
// dotted field name in the message.

#include <algorithm>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "mmg/channel.hpp"
#include "mmg/error.hpp"
#include "mmg/mlp.hpp"
#include "mmg/optim.hpp"
#include "mmg/training.hpp"

namespace mmg {

using nlohmann::json;

namespace detail {

inline void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
}

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
  for (const auto& [k, v] : j.items()) {
    const bool ok = std::any_of(known.begin(), known.end(), [&](const char* n) { return k == n; });
    if (!ok) throw ConfigError(where + "." + k + ": unknown key");
  }
}

template <class T>
void read(const json& j, const std::string& where, const char* key, T& out) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  const std::string field = where + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(field + ": expected true or false");
    out = v.get<bool>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(field + ": expected a number");
    out = v.get<T>();
  } else if constexpr (std::is_unsigned_v<T>) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw ConfigError(field + ": expected a non-negative integer");
    out = v.get<T>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(field + ": expected an integer");
    out = v.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(field + ": expected a string");
    out = v.get<std::string>();
  } else {
    static_assert(sizeof(T) == 0, "unsupported field type");
  }
}

}  // namespace detail

// ---------------------------------------------------------------- sampling

inline json to_json(const SamplingConfig& c) {
  return {{"loc", c.loc}, {"scale", c.scale}, {"clip", c.clip}, {"n_points", c.n_points},
          {"inference_times", c.inference_times}};
}

inline void read_into(const json& j, SamplingConfig& c, const std::string& where = "sampling",
                      bool allow_fit = false) {
  detail::require_object(j, where);
  if (allow_fit) detail::reject_unknown(j, where, {"schema", "kind", "loc", "scale", "clip", "n_points", "inference_times", "fit"});
  else detail::reject_unknown(j, where, {"loc", "scale", "clip", "n_points", "inference_times"});
  detail::read(j, where, "loc", c.loc);
  detail::read(j, where, "scale", c.scale);
  detail::read(j, where, "clip", c.clip);
  detail::read(j, where, "n_points", c.n_points);
  detail::read(j, where, "inference_times", c.inference_times);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

// ---------------------------------------------------------------- network

/// Dimensions come from the task and are not part of the serialised section.
inline json to_json(const MlpConfig& c) {
  return {{"width", c.width},
          {"n_blocks", c.n_blocks},
          {"time_embed_dim", c.time_embed_dim},
          {"activation", to_string(c.activation)},
          {"parameterization", to_string(c.parameterization)},
          {"freq_min", c.freq_min},
          {"freq_max", c.freq_max}};
}

inline void read_into(const json& j, MlpConfig& c, const std::string& where = "mlp") {
  detail::require_object(j, where);
  detail::reject_unknown(j, where, {"width", "n_blocks", "time_embed_dim", "activation", "parameterization", "freq_min", "freq_max"});
  detail::read(j, where, "width", c.width);
  detail::read(j, where, "n_blocks", c.n_blocks);
  detail::read(j, where, "time_embed_dim", c.time_embed_dim);
  std::string s;
  if (j.contains("activation")) {
    detail::read(j, where, "activation", s);
    if (s == "silu") c.activation = Activation::silu;
    else if (s == "gelu") c.activation = Activation::gelu;
    else throw ConfigError(where + ".activation: expected \"silu\" or \"gelu\"");
  }
  if (j.contains("parameterization")) {
    detail::read(j, where, "parameterization", s);
    if (s == "direct") c.parameterization = Parameterization::direct;
    else if (s == "preconditioned") c.parameterization = Parameterization::preconditioned;
    else throw ConfigError(where + ".parameterization: expected \"direct\" or \"preconditioned\"");
  }
  detail::read(j, where, "freq_min", c.freq_min);
  detail::read(j, where, "freq_max", c.freq_max);
}

// ---------------------------------------------------------------- optimiser

/// The learning rate lives in the train section.
inline json to_json(const OptimizerConfig& c) {
  return {{"beta1", c.betas.first},
          {"beta2", c.betas.second},
          {"eps", c.eps},
          {"ema_decay", c.ema_decay},
          {"plateau_patience", c.plateau_patience},
          {"plateau_factor", c.plateau_factor},
          {"steps_per_epoch", c.steps_per_epoch}};
}

inline void read_into(const json& j, OptimizerConfig& c, const std::string& where = "optimizer") {
  detail::require_object(j, where);
  detail::reject_unknown(j, where, {"beta1", "beta2", "eps", "ema_decay", "plateau_patience", "plateau_factor", "steps_per_epoch"});
  detail::read(j, where, "beta1", c.betas.first);
  detail::read(j, where, "beta2", c.betas.second);
  detail::read(j, where, "eps", c.eps);
  detail::read(j, where, "ema_decay", c.ema_decay);
  detail::read(j, where, "plateau_patience", c.plateau_patience);
  detail::read(j, where, "plateau_factor", c.plateau_factor);
  detail::read(j, where, "steps_per_epoch", c.steps_per_epoch);
}

// ---------------------------------------------------------------- training

/// Seed and sampling are carried elsewhere in a manifest (seed list, sampling section).
inline json to_json(const TrainConfig& c) {
  return {{"null_prob", c.null_prob},
          {"batch_size", c.batch_size},
          {"iterations", c.iterations},
          {"lr", c.lr},
          {"standardize", c.standardize},
          {"standardize_samples", c.standardize_samples},
          {"test_samples", c.test_samples}};
}

inline void read_into(const json& j, TrainConfig& c, const std::string& where = "train") {
  detail::require_object(j, where);
  detail::reject_unknown(j, where, {"null_prob", "batch_size", "iterations", "lr", "standardize", "standardize_samples", "test_samples"});
  detail::read(j, where, "null_prob", c.null_prob);
  detail::read(j, where, "batch_size", c.batch_size);
  detail::read(j, where, "iterations", c.iterations);
  detail::read(j, where, "lr", c.lr);
  detail::read(j, where, "standardize", c.standardize);
  detail::read(j, where, "standardize_samples", c.standardize_samples);
  detail::read(j, where, "test_samples", c.test_samples);
}

// ---------------------------------------------------------------- curve

inline json to_json(const CurveSettings& c) {
  return {{"grid_min", c.grid.front()}, {"grid_max", c.grid.back()}, {"grid_points", c.grid.size()},
          {"samples_per_point", c.samples_per_point}, {"rebase_thresholds", c.rebase_thresholds}};
}

inline void read_into(const json& j, CurveSettings& c, const std::string& where = "curve") {
  detail::require_object(j, where);
  detail::reject_unknown(j, where, {"grid_min", "grid_max", "grid_points", "samples_per_point", "rebase_thresholds"});
  double lo = c.grid.front(), hi = c.grid.back();
  std::size_t n = c.grid.size();
  detail::read(j, where, "grid_min", lo);
  detail::read(j, where, "grid_max", hi);
  detail::read(j, where, "grid_points", n);
  detail::read(j, where, "samples_per_point", c.samples_per_point);
  detail::read(j, where, "rebase_thresholds", c.rebase_thresholds);
  if (n < 2 || !(hi > lo)) throw ConfigError(where + ": need grid_points >= 2 and grid_max > grid_min");
  if (c.samples_per_point < 1) throw ConfigError(where + ".samples_per_point must be >= 1");
  c.grid = uniform_grid(lo, hi, n);
}

}  // namespace mmg
