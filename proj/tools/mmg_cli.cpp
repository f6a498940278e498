// mmg: train denoisers, estimate mutual information, export curves, run benchmark suites.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mmg/mmg.hpp"

namespace {

using namespace mmg;

enum Exit { ok = 0, failure = 1, config = 2, domain = 3, numeric = 4 };

void log_line(const std::string& s) { std::cerr << "[mmg] " << s << std::endl; }

std::optional<Profile> opt_profile(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return profile_from_string(s);
}

std::vector<Variant> parse_variant_list(const std::string& s) {
  std::vector<Variant> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_variant(json(item), "--variant"));
  if (out.empty()) throw ConfigError("--variant: empty list");
  return out;
}

void emit(const std::string& text, const std::string& output) {
  if (output.empty() || output == "-") std::cout << text;
  else write_text(output, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mutual information estimation from the gap between conditional and unconditional denoisers"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolkitVersion);

  // train
  std::string manifest_path, profile, seeds, variant, output_dir, sampling_path;
  auto* train_cmd = app.add_subcommand("train", "Train one model per seed from a run manifest");
  train_cmd->add_option("manifest", manifest_path, "Run manifest (JSON)")->required();
  train_cmd->add_option("--profile", profile, "Default budget profile")->check(CLI::IsMember({"desk", "paper"}));
  train_cmd->add_option("--seeds", seeds, "Comma-separated seeds (overrides the manifest)");
  train_cmd->add_option("--variant", variant, "Estimator variant; *-adaptive runs the two-stage procedure");
  train_cmd->add_option("--output-dir", output_dir, "Root of the run directories");
  train_cmd->add_option("--sampling", sampling_path, "Sampling file, e.g. from adaptive-fit");

  // estimate
  std::string ckpt, task_arg, output;
  bool bits = false;
  std::size_t n_points = 0, inference_times = 0;
  std::uint64_t seed = 0;
  auto* est_cmd = app.add_subcommand("estimate", "Estimate MI with a trained checkpoint");
  est_cmd->add_option("checkpoint", ckpt, "Checkpoint file")->required();
  est_cmd->add_option("--task", task_arg, "Task name or descriptor file (default: the checkpoint's task)");
  est_cmd->add_option("--variant", variant, "gap, gap-adaptive, orthogonal or orthogonal-adaptive");
  est_cmd->add_option("--sampling", sampling_path, "Sampling file (default: the checkpoint's proposal)");
  est_cmd->add_option("--n-points", n_points, "Monte-Carlo draws per repeat");
  est_cmd->add_option("--inference-times", inference_times, "Number of repeats");
  est_cmd->add_option("--seed", seed, "Estimation seed");
  est_cmd->add_flag("--bits", bits, "Report bits instead of nats");
  std::string weights = "ema";
  est_cmd->add_option("--weights", weights, "Network weights used for inference")
      ->check(CLI::IsMember({"ema", "raw"}));
  est_cmd->add_option("--output", output, "Write the JSON record here instead of stdout");

  // curve / adaptive-fit share options
  double grid_min = -10.0, grid_max = 10.0;
  std::size_t grid_points = 64, samples = 4096;
  bool rebase = false;
  auto add_curve_opts = [&](CLI::App* c) {
    c->add_option("checkpoint", ckpt, "Checkpoint file")->required();
    c->add_option("--task", task_arg, "Task name or descriptor file (default: the checkpoint's task)");
    c->add_option("--grid-min", grid_min, "Lowest log-SNR");
    c->add_option("--grid-max", grid_max, "Highest log-SNR");
    c->add_option("--grid-points", grid_points, "Number of grid points");
    c->add_option("--samples", samples, "Samples per grid point");
    c->add_option("--seed", seed, "Curve seed");
    c->add_option("--output", output, "Output file (default stdout)");
  };
  auto* curve_cmd = app.add_subcommand("curve", "Export MMSE curves as CSV");
  add_curve_opts(curve_cmd);
  auto* fit_cmd = app.add_subcommand("adaptive-fit", "Fit the log-SNR proposal from a preliminary checkpoint");
  add_curve_opts(fit_cmd);
  fit_cmd->add_flag("--rebase-thresholds", rebase,
                    "If the conditional curve starts below d/2, use 1/2 and 1/4 of its low-SNR value");

  // benchmark
  std::string suite_path;
  auto* bench_cmd = app.add_subcommand("benchmark", "Run a benchmark suite");
  bench_cmd->add_option("suite", suite_path, "Suite file (JSON)")->required();
  bench_cmd->add_option("--profile", profile, "Default budget profile")->check(CLI::IsMember({"desk", "paper"}));
  bench_cmd->add_option("--seeds", seeds, "Comma-separated seeds (overrides the suite)");
  bench_cmd->add_option("--variant", variant, "Comma-separated variants (overrides the suite)");
  bench_cmd->add_option("--output-dir", output_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version exit 0; every usage error is a configuration error.
    return app.exit(e) == 0 ? Exit::ok : Exit::config;
  }

  try {
    if (*train_cmd) {
      ManifestOverrides ov;
      ov.profile = opt_profile(profile);
      if (!seeds.empty()) ov.seeds = parse_seed_list(seeds);
      if (!variant.empty()) ov.variant = parse_variant(json(variant), "--variant");
      if (!output_dir.empty()) ov.output_dir = output_dir;
      if (!sampling_path.empty()) ov.sampling = load_sampling(sampling_path);
      const RunManifest m = load_manifest(manifest_path, ov);
      for (const auto& run : cmd_train(m, log_line)) std::cout << run.final_checkpoint.string() << "\n";
    } else if (*est_cmd) {
      EstimateRequest req;
      req.checkpoint = ckpt;
      if (!task_arg.empty()) req.task = task_from_argument(task_arg);
      if (!variant.empty()) req.variant = parse_variant(json(variant), "--variant");
      if (!sampling_path.empty()) req.sampling = load_sampling(sampling_path);
      if (n_points) req.n_points = n_points;
      if (inference_times) req.inference_times = inference_times;
      req.seed = seed;
      req.bits = bits;
      req.weights = weights == "raw" ? WeightSource::raw : WeightSource::ema;
      const MiEstimate e = cmd_estimate(req);
      const TaskSpec task = req.task ? *req.task : checkpoint_context(load_checkpoint(ckpt)).task;
      emit(estimate_to_json(e, task, bits, {seed}).dump(2) + "\n", output);
    } else if (*curve_cmd || *fit_cmd) {
      CurveRequest req;
      req.checkpoint = ckpt;
      if (!task_arg.empty()) req.task = task_from_argument(task_arg);
      if (grid_points < 2 || !(grid_max > grid_min)) throw ConfigError("--grid-*: need at least 2 points and max > min");
      req.settings.grid = uniform_grid(grid_min, grid_max, grid_points);
      req.settings.samples_per_point = samples;
      req.settings.rebase_thresholds = rebase;
      req.seed = seed;
      if (*curve_cmd) {
        emit(cmd_curve(req).csv, output);
      } else {
        const SamplingConfig defaults = load_model(ckpt, req.task).checkpoint.sampling;
        const AdaptiveFit fit = cmd_adaptive_fit(req, defaults);
        if (fit.fallback) log_line("no crossing found; keeping the default proposal (fallback)");
        emit(fit_to_json(fit, req.settings.grid).dump(2) + "\n", output);
      }
    } else if (*bench_cmd) {
      SuiteOverrides ov;
      ov.profile = opt_profile(profile);
      if (!seeds.empty()) ov.seeds = parse_seed_list(seeds);
      if (!variant.empty()) ov.variants = parse_variant_list(variant);
      const SuiteSpec suite = load_suite(suite_path, ov);
      const std::size_t workers = worker_count();
      log_line("suite " + suite.name + ": " + std::to_string(suite.tasks.size()) + " tasks x " +
               std::to_string(suite.seeds.size()) + " seeds on " + std::to_string(workers) + " workers");
      const BenchmarkReport r = cmd_benchmark(suite, output_dir, workers, log_line);
      std::cout << results_csv(r);
      if (!r.failures.empty()) {
        log_line(std::to_string(r.failures.size()) + " cell(s) failed; see failures.csv");
        return Exit::failure;
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::config;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::config;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::domain;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::numeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::failure;
  }
  return Exit::ok;
}
