#pragma once

// Run manifests, run directories, and the train / estimate / curve / adaptive-fit /
// benchmark operations behind the command-line tool. File formats are described
// in docs/FORMATS.md.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mmg/checkpoint.hpp"
#include "mmg/config.hpp"
#include "mmg/denoiser.hpp"
#include "mmg/estimator.hpp"
#include "mmg/tasks.hpp"
#include "mmg/training.hpp"

namespace mmg {

namespace fs = std::filesystem;

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

// ---------------------------------------------------------------- profiles

enum class Profile { desk, paper };

inline std::string to_string(Profile p) { return p == Profile::desk ? "desk" : "paper"; }

inline Profile profile_from_string(const std::string& s) {
  if (s == "desk") return Profile::desk;
  if (s == "paper") return Profile::paper;
  throw ConfigError("profile: expected \"desk\" or \"paper\", got \"" + s + "\"");
}

/// Profile defaults. "paper" sizes the network and budget by total dimension dx + dy.
inline void apply_profile(Profile p, const TaskSpec& task, TrainConfig& tc, MlpConfig& mlp, OptimizerConfig& oc,
                          SamplingConfig& sc) {
  tc = TrainConfig{};
  mlp = MlpConfig{};
  oc = OptimizerConfig{};
  sc = SamplingConfig{};
  if (p == Profile::desk) {
    tc.iterations = 30000;
    return;
  }
  const std::size_t dim = task.dim_x + task.dim_y;
  if (dim <= 10) {
    tc.iterations = 390000;
  } else if (dim <= 50) {
    mlp.width = mlp.time_embed_dim = 128;
    tc.batch_size = 256;
    tc.lr = 2e-3;
    tc.iterations = 290000;
  } else {
    mlp.width = mlp.time_embed_dim = 256;
    tc.batch_size = 256;
    tc.lr = 2e-3;
    tc.iterations = 290000;
  }
}

// ---------------------------------------------------------------- manifest

struct RunManifest {
  Profile profile = Profile::desk;
  TaskSpec task;
  Variant variant = Variant::gap;
  TrainConfig train;
  MlpConfig mlp;
  OptimizerConfig optimizer;
  SamplingConfig sampling;  // training proposal and inference proposal
  CurveSettings curve;
  std::vector<std::uint64_t> seeds{0};
  fs::path output_dir = "runs";
  std::int64_t checkpoint_every = 10000;  // 0 disables periodic checkpoints

  void validate() const {
    task.validate();
    check_consistent(task, mlp);
    train.validate();
    optimizer.validate();
    sampling.validate();
    if (seeds.empty()) throw ConfigError("seeds: must list at least one seed");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
      throw ConfigError("seeds: must be distinct");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every: must be >= 0");
    if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
  }
};

/// Command-line values that take precedence over the file.
struct ManifestOverrides {
  std::optional<Profile> profile;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<Variant> variant;
  std::optional<fs::path> output_dir;
  std::optional<SamplingConfig> sampling;
};

inline std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("seeds: '" + s + "' is not a comma-separated list of non-negative integers");
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw ConfigError("seeds: empty list");
  return out;
}

inline TaskSpec task_from_argument(const std::string& arg) {
  if (fs::is_regular_file(arg)) {
    std::ifstream in(arg);
    try {
      return task_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
      throw ConfigError("task file " + arg + ": " + e.what());
    }
  }
  return parse_task_name(arg);
}

inline Variant parse_variant(const json& v, const std::string& where) {
  if (!v.is_string()) throw ConfigError(where + ": expected a string");
  try {
    return variant_from_string(v.get<std::string>());
  } catch (const std::exception&) {
    throw ConfigError(where + ": unknown variant \"" + v.get<std::string>() +
                      "\" (expected gap, gap-adaptive, orthogonal, orthogonal-adaptive)");
  }
}

inline RunManifest parse_manifest(const json& j, const ManifestOverrides& ov = {}) {
  detail::require_object(j, "manifest");
  detail::reject_unknown(j, "manifest", {"schema", "profile", "task", "variant", "seeds", "output_dir", "train", "mlp",
                                         "optimizer", "sampling", "curve", "checkpoint_every"});
  if (j.contains("schema") && j["schema"] != kSchemaVersion)
    throw ConfigError("manifest.schema: unsupported version " + j["schema"].dump());
  if (!j.contains("task")) throw ConfigError("manifest.task: missing");

  RunManifest m;
  try {
    m.task = task_from_json(j["task"]);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    throw ConfigError(msg.rfind("task", 0) == 0 ? "manifest." + msg : "manifest.task: " + msg);
  } catch (const DomainError& e) {
    throw ConfigError(std::string("manifest.task: ") + e.what());
  }

  std::string profile = "desk";
  detail::read(j, "manifest", "profile", profile);
  m.profile = ov.profile ? *ov.profile : profile_from_string(profile);
  apply_profile(m.profile, m.task, m.train, m.mlp, m.optimizer, m.sampling);

  if (j.contains("train")) read_into(j["train"], m.train, "manifest.train");
  if (j.contains("mlp")) read_into(j["mlp"], m.mlp, "manifest.mlp");
  if (j.contains("optimizer")) read_into(j["optimizer"], m.optimizer, "manifest.optimizer");
  if (j.contains("sampling")) read_into(j["sampling"], m.sampling, "manifest.sampling");
  if (j.contains("curve")) read_into(j["curve"], m.curve, "manifest.curve");
  if (ov.sampling) m.sampling = *ov.sampling;
  m.mlp.input_dim = m.mlp.output_dim = m.task.dim_x;
  m.mlp.cond_dim = m.task.dim_y;
  m.optimizer.lr = m.train.lr;
  m.train.sampling = m.sampling;

  if (j.contains("variant")) m.variant = parse_variant(j["variant"], "manifest.variant");
  if (ov.variant) m.variant = *ov.variant;

  if (j.contains("seeds")) {
    const json& s = j["seeds"];
    if (!s.is_array()) throw ConfigError("manifest.seeds: expected an array of integers");
    m.seeds.clear();
    for (const auto& v : s) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError("manifest.seeds: expected non-negative integers");
      m.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  if (ov.seeds) m.seeds = *ov.seeds;

  std::string out = m.output_dir.string();
  detail::read(j, "manifest", "output_dir", out);
  m.output_dir = ov.output_dir ? *ov.output_dir : fs::path(out);
  detail::read(j, "manifest", "checkpoint_every", m.checkpoint_every);

  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  } catch (const DomainError& e) {
    throw ConfigError(std::string("manifest.task: ") + e.what());
  }
  return m;
}

inline json read_json_file(const fs::path& path, const std::string& what) {
  std::ifstream in(path);
  if (!in) throw ConfigError(what + ": cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + " " + path.string() + ": " + e.what());
  }
}

inline RunManifest load_manifest(const fs::path& path, const ManifestOverrides& ov = {}) {
  return parse_manifest(read_json_file(path, "manifest"), ov);
}

/// Every field spelled out, so an archived run directory is self-describing.
inline json manifest_snapshot(const RunManifest& m) {
  json j;
  j["schema"] = kSchemaVersion;
  j["profile"] = to_string(m.profile);
  j["task"] = task_to_json(m.task);
  j["variant"] = to_string(m.variant);
  j["seeds"] = m.seeds;
  j["output_dir"] = m.output_dir.generic_string();
  j["checkpoint_every"] = m.checkpoint_every;
  j["train"] = to_json(m.train);
  j["mlp"] = to_json(m.mlp);
  j["optimizer"] = to_json(m.optimizer);
  j["sampling"] = to_json(m.sampling);
  j["curve"] = to_json(m.curve);
  return j;
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline void ensure_writable_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw ConfigError("output_dir: cannot create " + dir.string());
  const fs::path probe = dir / ".mmg-write-test";
  {
    std::ofstream out(probe);
    if (!out) throw ConfigError("output_dir: " + dir.string() + " is not writable");
  }
  fs::remove(probe, ec);
}

/// Shortest round-trip decimal representation used in every CSV.
inline std::string fmt_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------- checkpoints of a run

inline json checkpoint_metadata(const RunManifest& m, std::uint64_t seed, const std::string& role) {
  json train = to_json(m.train);
  train["seed"] = seed;
  return {{"schema", kSchemaVersion}, {"role", role}, {"task", task_to_json(m.task)}, {"train", train}};
}

inline Checkpoint make_checkpoint(const RunManifest& m, std::uint64_t seed, const std::string& role,
                                  const ModelState& state, const Standardizer& standardizer,
                                  const SamplingConfig& sampling) {
  Checkpoint c;
  c.mlp = m.mlp;
  c.state = state;
  c.standardizer = standardizer;
  c.sampling = sampling;
  c.metadata_json = checkpoint_metadata(m, seed, role).dump();
  return c;
}

/// Task and training settings recorded in a checkpoint's metadata.
struct CheckpointContext {
  TaskSpec task;
  TrainConfig train;
};

inline CheckpointContext checkpoint_context(const Checkpoint& c) {
  json meta;
  try {
    meta = json::parse(c.metadata_json);
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  if (!meta.is_object() || !meta.contains("task") || !meta.contains("train"))
    throw CheckpointError("checkpoint metadata lacks task or train settings");
  CheckpointContext ctx;
  ctx.task = task_from_json(meta["task"]);
  json train = meta["train"];
  const std::uint64_t seed = train.value("seed", std::uint64_t{0});
  train.erase("seed");
  read_into(train, ctx.train, "checkpoint.train");
  ctx.train.seed = seed;
  ctx.train.sampling = c.sampling;
  return ctx;
}

inline std::string loss_csv(const std::vector<LossRecord>& log) {
  std::string s = "step,loss,lr\n";
  for (const auto& r : log) s += std::to_string(r.step) + "," + fmt_real(r.loss) + "," + fmt_real(r.lr) + "\n";
  return s;
}

// ---------------------------------------------------------------- train

inline json fit_to_json(const AdaptiveFit& f, const std::vector<double>& grid) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j = to_json(f.config);
  j["schema"] = kSchemaVersion;
  j["kind"] = "sampling";
  j["fit"] = {{"fallback", f.fallback},
              {"rebased", f.rebased},
              {"half_level", f.half_level},
              {"quarter_level", f.quarter_level},
              {"half_crossing", opt(f.half_crossing)},
              {"quarter_crossing", opt(f.quarter_crossing)},
              {"grid_spacing", grid.size() > 1 ? grid[1] - grid[0] : 0.0}};
  return j;
}

inline SamplingConfig load_sampling(const fs::path& path) {
  SamplingConfig c;
  read_into(read_json_file(path, "sampling file"), c, "sampling", true);
  return c;
}

struct SeedRun {
  std::uint64_t seed = 0;
  fs::path dir;
  fs::path final_checkpoint;
  TrainResult result;
  std::optional<AdaptiveFit> fit;
};

using Logger = std::function<void(const std::string&)>;

namespace detail {
/// One training run written under `dir`: loss.csv, checkpoints/step-*.ckpt, final.ckpt.
inline TrainResult train_into(const RunManifest& m, std::uint64_t seed, const SamplingConfig& sampling,
                              const std::string& role, const fs::path& dir) {
  TrainConfig tc = m.train;
  tc.seed = seed;
  tc.sampling = sampling;
  fs::create_directories(dir);
  StepCallback cb;
  if (m.checkpoint_every > 0) {
    cb = [&](const TrainResult& r) {
      if (r.state.step % m.checkpoint_every != 0 || r.state.step == tc.iterations) return;
      char name[40];
      std::snprintf(name, sizeof name, "step-%08lld.ckpt", static_cast<long long>(r.state.step));
      fs::create_directories(dir / "checkpoints");
      save_checkpoint(dir / "checkpoints" / name, make_checkpoint(m, seed, role, r.state, r.standardizer, sampling));
    };
  }
  TrainResult r = train(m.task, m.mlp, tc, m.optimizer, cb);
  write_text(dir / "loss.csv", loss_csv(r.log));
  save_checkpoint(dir / "final.ckpt", make_checkpoint(m, seed, role, r.state, r.standardizer, sampling));
  return r;
}
}  // namespace detail

/// Train one seed. Adaptive variants train a preliminary model in `preliminary/`,
/// write the fitted proposal to `sampling.json`, then train the final model.
inline SeedRun train_seed(const RunManifest& m, std::uint64_t seed, const Logger& log = {}) {
  SeedRun run;
  run.seed = seed;
  run.dir = m.output_dir / m.task.name() / ("seed-" + std::to_string(seed));
  ensure_writable_dir(run.dir);
  json snap = manifest_snapshot(m);
  snap["seed"] = seed;
  write_text(run.dir / "config.json", snap.dump(2) + "\n");
  if (is_adaptive(m.variant)) {
    if (log) log("seed " + std::to_string(seed) + ": preliminary model");
    const TrainResult pre = detail::train_into(m, seed, m.sampling, "preliminary", run.dir / "preliminary");
    TrainConfig tc = m.train;
    tc.seed = seed;
    Rng rng = make_rng(seed, {stream::curve});
    const NetworkDenoiser den(m.mlp, pre.state);
    run.fit = adaptive_fit_for(den, test_sampler(m.task, tc, pre.standardizer), m.task.dim_x, m.sampling, m.curve, rng);
    write_text(run.dir / "sampling.json", fit_to_json(*run.fit, m.curve.grid).dump(2) + "\n");
    if (log)
      log("seed " + std::to_string(seed) + ": fitted loc " + fmt_real(run.fit->config.loc) + " scale " +
          fmt_real(run.fit->config.scale) + (run.fit->fallback ? " (fallback to defaults)" : ""));
  }
  if (log) log("seed " + std::to_string(seed) + ": training " + std::to_string(m.train.iterations) + " steps");
  run.result = detail::train_into(m, seed, run.fit ? run.fit->config : m.sampling, "final", run.dir);
  run.final_checkpoint = run.dir / "final.ckpt";
  return run;
}

inline std::vector<SeedRun> cmd_train(const RunManifest& m, const Logger& log = {}) {
  std::vector<SeedRun> runs;
  for (std::uint64_t s : m.seeds) runs.push_back(train_seed(m, s, log));
  return runs;
}

// ---------------------------------------------------------------- estimate

struct EstimateRequest {
  fs::path checkpoint;
  std::optional<TaskSpec> task;  // defaults to the checkpoint's task
  Variant variant = Variant::gap;
  std::optional<SamplingConfig> sampling;  // defaults to the checkpoint's training proposal
  std::optional<std::size_t> n_points, inference_times;
  std::uint64_t seed = 0;
  bool bits = false;
  WeightSource weights = WeightSource::ema;
};

struct LoadedModel {
  Checkpoint checkpoint;
  CheckpointContext context;
  TaskSpec task;
};

inline void check_task_matches(const TaskSpec& task, const MlpConfig& mlp) {
  if (task.dim_x != mlp.input_dim || task.dim_y != mlp.cond_dim)
    throw ConfigError("task " + task.name() + " has dims " + std::to_string(task.dim_x) + "x" +
                      std::to_string(task.dim_y) + " but the checkpoint was trained on " +
                      std::to_string(mlp.input_dim) + "x" + std::to_string(mlp.cond_dim));
}

inline LoadedModel load_model(const fs::path& path, const std::optional<TaskSpec>& task) {
  if (!fs::exists(path)) throw ConfigError("checkpoint " + path.string() + " does not exist");
  LoadedModel lm;
  lm.checkpoint = load_checkpoint(path);
  lm.context = checkpoint_context(lm.checkpoint);
  lm.task = task ? *task : lm.context.task;
  check_task_matches(lm.task, lm.checkpoint.mlp);
  return lm;
}

inline json estimate_to_json(const MiEstimate& e, const TaskSpec& task, bool bits,
                             const std::vector<std::uint64_t>& seeds) {
  const double k = bits ? 1.0 / std::log(2.0) : 1.0;
  std::vector<double> reps;
  for (double r : e.repeats) reps.push_back(r * k);
  json j = {{"schema", kSchemaVersion},
            {"kind", "estimate"},
            {"task", task.name()},
            {"variant", to_string(e.variant)},
            {"unit", bits ? "bits" : "nats"},
            {"mean", e.mean_nats * k},
            {"std", e.std_nats * k},
            {"repeats", reps},
            {"mean_nats", e.mean_nats},
            {"std_nats", e.std_nats},
            {"n_points", e.n_points},
            {"inference_times", e.inference_times},
            {"seeds", seeds},
            {"sampling", to_json(e.sampling)}};
  if (auto gt = task.ground_truth()) j["ground_truth"] = *gt * k;
  else j["ground_truth"] = nullptr;
  return j;
}

inline MiEstimate cmd_estimate(const EstimateRequest& req) {
  const LoadedModel lm = load_model(req.checkpoint, req.task);  // dimension check before any compute
  SamplingConfig sc = req.sampling ? *req.sampling : lm.checkpoint.sampling;
  if (req.n_points) sc.n_points = *req.n_points;
  if (req.inference_times) sc.inference_times = *req.inference_times;
  sc.validate();
  const NetworkDenoiser den(lm.checkpoint.mlp, lm.checkpoint.state, req.weights);
  const Sampler smp = test_sampler(lm.task, lm.context.train, lm.checkpoint.standardizer);
  Rng rng = make_rng(req.seed, {stream::estimate});
  return estimate(den, smp, sc, rng, req.variant);
}

// ---------------------------------------------------------------- curves

/// Closed-form curves for untransformed Gaussian tasks, in the standardised coordinates.
inline std::optional<std::pair<std::vector<double>, std::vector<double>>> oracle_curves(
    const TaskSpec& task, const Standardizer& s, const std::vector<double>& grid) {
  if (task.transform != Transform::none) return std::nullopt;
  auto g = task.gaussian_spec();
  if (!g) return std::nullopt;
  Vector scale(static_cast<Eigen::Index>(task.dim_x + task.dim_y));
  scale << s.x_scale, s.y_scale;
  const Vector inv = scale.cwiseInverse();
  g->cov = inv.asDiagonal() * g->cov * inv.asDiagonal();
  std::vector<double> u, c;
  for (double t : grid) {
    u.push_back(gaussian_mmse(g->sxx(), std::exp(t)));
    c.push_back(gaussian_conditional_mmse(*g, std::exp(t)));
  }
  return std::make_pair(u, c);
}

inline const char* kCurveHeader = "log_snr,uncond,cond,gap,orthogonal,oracle_uncond,oracle_cond";

inline std::string curve_csv(const MmseCurve& c,
                             const std::optional<std::pair<std::vector<double>, std::vector<double>>>& oracle) {
  std::string s = std::string(kCurveHeader) + "\n";
  for (std::size_t i = 0; i < c.grid.size(); ++i) {
    s += fmt_real(c.grid[i]) + "," + fmt_real(c.uncond[i]) + "," + fmt_real(c.cond[i]) + "," +
         fmt_real(c.uncond[i] - c.cond[i]) + "," + fmt_real(c.orth[i]) + ",";
    if (oracle) s += fmt_real(oracle->first[i]) + "," + fmt_real(oracle->second[i]);
    else s += ",";
    s += "\n";
  }
  return s;
}

struct CurveRequest {
  fs::path checkpoint;
  std::optional<TaskSpec> task;
  CurveSettings settings;
  std::uint64_t seed = 0;
};

struct CurveOutput {
  MmseCurve curve;
  std::string csv;
  LoadedModel model;
};

inline CurveOutput cmd_curve(const CurveRequest& req) {
  CurveOutput out;
  out.model = load_model(req.checkpoint, req.task);
  const auto& ck = out.model.checkpoint;
  const NetworkDenoiser den(ck.mlp, ck.state);
  Rng rng = make_rng(req.seed, {stream::curve});
  out.curve = mmse_curve(den, test_sampler(out.model.task, out.model.context.train, ck.standardizer),
                         req.settings.grid, req.settings.samples_per_point, rng);
  out.csv = curve_csv(out.curve, oracle_curves(out.model.task, ck.standardizer, req.settings.grid));
  return out;
}

/// Fitted proposal from a preliminary checkpoint. A failed fit returns `defaults` with
/// the fallback flag set.
inline AdaptiveFit cmd_adaptive_fit(const CurveRequest& req, const SamplingConfig& defaults) {
  const CurveOutput c = cmd_curve(req);
  return fit_adaptive(c.curve, c.model.task.dim_x, defaults, req.settings.rebase_thresholds);
}

// ---------------------------------------------------------------- benchmark

struct SuiteSpec {
  std::string name = "suite";
  Profile profile = Profile::desk;
  std::vector<RunManifest> tasks;  // one manifest per task; seeds shared
  std::vector<Variant> variants{Variant::gap, Variant::orthogonal};
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct SuiteOverrides {
  std::optional<Profile> profile;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::vector<Variant>> variants;
};

inline SuiteSpec parse_suite(const json& j, const SuiteOverrides& ov = {}) {
  detail::require_object(j, "suite");
  detail::reject_unknown(j, "suite", {"schema", "name", "profile", "seeds", "variants", "tasks", "defaults"});
  if (j.contains("schema") && j["schema"] != kSchemaVersion)
    throw ConfigError("suite.schema: unsupported version " + j["schema"].dump());
  SuiteSpec s;
  detail::read(j, "suite", "name", s.name);
  std::string profile = "desk";
  detail::read(j, "suite", "profile", profile);
  s.profile = ov.profile ? *ov.profile : profile_from_string(profile);
  if (j.contains("variants")) {
    if (!j["variants"].is_array() || j["variants"].empty())
      throw ConfigError("suite.variants: expected a non-empty array");
    s.variants.clear();
    for (std::size_t i = 0; i < j["variants"].size(); ++i)
      s.variants.push_back(parse_variant(j["variants"][i], "suite.variants[" + std::to_string(i) + "]"));
  }
  if (ov.variants) s.variants = *ov.variants;
  if (std::set<Variant>(s.variants.begin(), s.variants.end()).size() != s.variants.size())
    throw ConfigError("suite.variants: must be distinct");
  if (j.contains("seeds")) {
    if (!j["seeds"].is_array()) throw ConfigError("suite.seeds: expected an array of integers");
    s.seeds.clear();
    for (const auto& v : j["seeds"]) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError("suite.seeds: expected non-negative integers");
      s.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  if (ov.seeds) s.seeds = *ov.seeds;

  if (!j.contains("tasks") || !j["tasks"].is_array() || j["tasks"].empty())
    throw ConfigError("suite.tasks: expected a non-empty array");
  json defaults = j.value("defaults", json::object());
  detail::require_object(defaults, "suite.defaults");
  detail::reject_unknown(defaults, "suite.defaults", {"train", "mlp", "optimizer", "sampling", "curve", "checkpoint_every"});
  std::set<std::string> names;
  for (std::size_t i = 0; i < j["tasks"].size(); ++i) {
    const std::string where = "suite.tasks[" + std::to_string(i) + "]";
    json mj = defaults;
    mj["task"] = j["tasks"][i];
    mj["checkpoint_every"] = defaults.value("checkpoint_every", 0);
    RunManifest m;
    try {
      ManifestOverrides mo;
      mo.profile = s.profile;
      mo.seeds = s.seeds;
      m = parse_manifest(mj, mo);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
    if (!m.task.ground_truth()) throw ConfigError(where + ": task has no known ground truth");
    if (!names.insert(m.task.name()).second) throw ConfigError(where + ": duplicate task " + m.task.name());
    s.tasks.push_back(std::move(m));
  }
  return s;
}

inline SuiteSpec load_suite(const fs::path& path, const SuiteOverrides& ov = {}) {
  return parse_suite(read_json_file(path, "suite"), ov);
}

struct ReportRow {
  std::string task;
  double ground_truth = 0.0;
  Variant variant = Variant::gap;
  double mean = 0.0;
  double std = 0.0;
  double bias = 0.0;  // mean - ground_truth
  std::vector<double> per_seed;
};

struct TaskFailure {
  std::string task;
  std::uint64_t seed = 0;
  std::string message;
};

struct BenchmarkReport {
  std::string suite;
  std::string profile;
  std::string toolkit_version = kToolkitVersion;
  std::string started_at, finished_at;
  std::vector<ReportRow> rows;
  std::vector<TaskFailure> failures;
};

inline const char* kResultsHeader = "task,gt,variant,mean,std,bias";

inline std::string results_csv(const BenchmarkReport& r) {
  std::string s = std::string(kResultsHeader) + "\n";
  for (const auto& row : r.rows)
    s += row.task + "," + fmt_real(row.ground_truth) + "," + to_string(row.variant) + "," + fmt_real(row.mean) +
         "," + fmt_real(row.std) + "," + fmt_real(row.bias) + "\n";
  return s;
}

inline std::string failures_csv(const BenchmarkReport& r) {
  std::string s = "task,seed,message\n";
  for (const auto& f : r.failures) {
    std::string msg = f.message;
    std::replace(msg.begin(), msg.end(), '"', '\'');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    s += f.task + "," + std::to_string(f.seed) + ",\"" + msg + "\"\n";
  }
  return s;
}

inline std::size_t worker_count() {
  if (const char* env = std::getenv("MMG_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("MMG_WORKERS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace detail {

/// Everything one (task, seed) cell produces.
struct CellResult {
  bool ok = false;
  std::string error;
  std::map<Variant, MiEstimate> estimates;
  std::optional<MmseCurve> curve;
  std::optional<std::pair<std::vector<double>, std::vector<double>>> oracle;
};

inline CellResult run_cell(const RunManifest& m, std::uint64_t seed, const std::vector<Variant>& variants,
                           bool want_curve, const fs::path& model_dir) {
  CellResult out;
  TrainConfig tc = m.train;
  tc.seed = seed;
  const bool adaptive = std::any_of(variants.begin(), variants.end(), is_adaptive);
  TrainResult base, fin;
  std::optional<AdaptiveFit> fit;
  if (adaptive) {
    TwoStageResult ts = two_stage_train(m.task, m.mlp, tc, m.optimizer, m.curve);
    base = std::move(ts.preliminary);
    fin = std::move(ts.final);
    fit = ts.fit;
  } else {
    base = train(m.task, m.mlp, tc, m.optimizer);
  }
  fs::create_directories(model_dir);
  save_checkpoint(model_dir / "baseline.ckpt", make_checkpoint(m, seed, "baseline", base.state, base.standardizer, m.sampling));
  write_text(model_dir / "baseline-loss.csv", loss_csv(base.log));
  if (fit) {
    save_checkpoint(model_dir / "adaptive.ckpt", make_checkpoint(m, seed, "final", fin.state, fin.standardizer, fit->config));
    write_text(model_dir / "adaptive-loss.csv", loss_csv(fin.log));
    write_text(model_dir / "sampling.json", fit_to_json(*fit, m.curve.grid).dump(2) + "\n");
  }

  const NetworkDenoiser base_den(m.mlp, base.state);
  const Sampler base_set = test_sampler(m.task, tc, base.standardizer);
  for (Variant v : variants) {
    Rng rng = make_rng(seed, {stream::estimate, static_cast<std::uint32_t>(v)});
    if (is_adaptive(v)) {
      const NetworkDenoiser den(m.mlp, fin.state);
      out.estimates[v] = estimate(den, test_sampler(m.task, tc, fin.standardizer), fit->config, rng, v);
    } else {
      out.estimates[v] = estimate(base_den, base_set, m.sampling, rng, v);
    }
  }
  if (want_curve) {
    Rng rng = make_rng(seed, {stream::curve});
    out.curve = mmse_curve(base_den, base_set, m.curve.grid, m.curve.samples_per_point, rng);
    out.oracle = oracle_curves(m.task, base.standardizer, m.curve.grid);
  }
  out.ok = true;
  return out;
}

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace detail

/// Train -> (adaptive refit) -> estimate for every task x seed, `workers` cells at a time.
/// Writes results.csv, failures.csv, curves/<task>.csv, models/ and report.json under `out_dir`.
/// Each cell is seeded only by its own seed, so the CSVs do not depend on the worker count.
inline BenchmarkReport cmd_benchmark(const SuiteSpec& suite, const fs::path& out_dir, std::size_t workers,
                                     const Logger& log = {}) {
  ensure_writable_dir(out_dir);
  BenchmarkReport report;
  report.suite = suite.name;
  report.profile = to_string(suite.profile);
  report.started_at = utc_now();

  struct Cell {
    std::size_t task, seed;
  };
  std::vector<Cell> cells;
  for (std::size_t t = 0; t < suite.tasks.size(); ++t)
    for (std::size_t s = 0; s < suite.seeds.size(); ++s) cells.push_back({t, s});
  std::vector<detail::CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto say = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard lock(log_mutex);
    log(msg);
  };
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const RunManifest& m = suite.tasks[cells[i].task];
      const std::uint64_t seed = suite.seeds[cells[i].seed];
      const std::string label = m.task.name() + " seed " + std::to_string(seed);
      say("start " + label);
      try {
        results[i] = detail::run_cell(m, seed, suite.variants, cells[i].seed == 0,
                                      out_dir / "models" / m.task.name() / ("seed-" + std::to_string(seed)));
        say("done  " + label);
      } catch (const std::exception& e) {
        results[i].ok = false;
        results[i].error = e.what();
        say("FAILED " + label + ": " + e.what());
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, cells.size()));
  {
    std::vector<std::jthread> pool;
    for (std::size_t k = 1; k < n_threads; ++k) pool.emplace_back(work);
    work();
  }

  for (std::size_t t = 0; t < suite.tasks.size(); ++t) {
    const RunManifest& m = suite.tasks[t];
    const std::string name = m.task.name();
    bool task_ok = true;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].task != t || results[i].ok) continue;
      report.failures.push_back({name, suite.seeds[cells[i].seed], results[i].error});
      task_ok = false;
    }
    if (!task_ok) continue;
    const double gt = *m.task.ground_truth();
    for (Variant v : suite.variants) {
      ReportRow row;
      row.task = name;
      row.ground_truth = gt;
      row.variant = v;
      std::vector<double> repeats;
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].task != t) continue;
        row.per_seed.push_back(results[i].estimates.at(v).mean_nats);
        repeats = results[i].estimates.at(v).repeats;
      }
      double sum = 0.0;
      for (double x : row.per_seed) sum += x;
      row.mean = sum / static_cast<double>(row.per_seed.size());
      // Spread across seeds; with a single seed, across that seed's inference repeats.
      row.std = row.per_seed.size() > 1 ? detail::sample_std(row.per_seed) : detail::sample_std(repeats);
      row.bias = row.mean - gt;
      report.rows.push_back(row);
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].task == t && results[i].curve) {
        write_text(out_dir / "curves" / (name + ".csv"), curve_csv(*results[i].curve, results[i].oracle));
        break;
      }
    }
  }
  report.finished_at = utc_now();

  write_text(out_dir / "results.csv", results_csv(report));
  write_text(out_dir / "failures.csv", failures_csv(report));
  json rows = json::array();
  for (const auto& r : report.rows)
    rows.push_back({{"task", r.task}, {"ground_truth", r.ground_truth}, {"variant", to_string(r.variant)},
                    {"mean", r.mean}, {"std", r.std}, {"bias", r.bias}, {"per_seed", r.per_seed}});
  json failures = json::array();
  for (const auto& f : report.failures)
    failures.push_back({{"task", f.task}, {"seed", f.seed}, {"message", f.message}});
  const json meta = {{"schema", kSchemaVersion},     {"suite", report.suite},
                     {"profile", report.profile},    {"toolkit_version", report.toolkit_version},
                     {"started_at", report.started_at}, {"finished_at", report.finished_at},
                     {"seeds", suite.seeds},         {"workers", n_threads},
                     {"rows", rows},                 {"failures", failures}};
  write_text(out_dir / "report.json", meta.dump(2) + "\n");
  return report;
}

}  // namespace mmg
