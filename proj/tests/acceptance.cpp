// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
//
// Trained models are cached under --cache-dir keyed by task, seed and a hash of the full
// configuration, so an interrupted run resumes and a rerun only re-estimates.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "mmg/mmg.hpp"

namespace {

using namespace mmg;

// ---------------------------------------------------------------- tolerances

constexpr double kC1QuadTol = 1e-3;        // nats
constexpr int kC1Specs = 20;
constexpr double kC2Sigmas = 3.0;
constexpr std::size_t kC2Points = 100000;
constexpr double kC3Sigmas = 3.0;
constexpr double kC4RelTol = 1e-4;
constexpr int kC4Coords = 120;
constexpr double kC5BiasTol = 0.05;        // nats
constexpr double kC5StdTol = 0.08;         // nats, across seeds
constexpr double kC6BiasTol = 0.10;        // nats
constexpr double kC7RelTol = 0.10;
constexpr double kC8Spacings = 1.0;
constexpr double kC10RelTol = 0.10;
constexpr double kC11RelTol = 0.15;

constexpr double kRho = 0.75;
const std::vector<std::uint64_t> kSeeds5{0, 1, 2, 3, 4};
const std::vector<std::uint64_t> kSeeds3{0, 1, 2};

// Tasks for the ablation check: the transformed sparse task of the ablation table, its
// untransformed and half-cube versions, and a moderately correlated pair. All have conditional
// curves that start above d/2, so the fitted proposal differs from the default.
const std::vector<std::string> kC9Tasks{"spiral-multinormal-sparse-3-3-2.0", "multinormal-sparse-3-3-2.0",
                                        "halfcube-multinormal-sparse-3-3-2.0", "1v1-normal-0.5"};

fs::path g_cache;

double now_s() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

void note(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

std::string fmt(double v, int digits = 4) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
}

JointGaussianSpec random_spec(std::size_t dx, std::size_t dy, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(dx + dy);
  Matrix a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = standard_normal(rng);
  Matrix c = a * a.transpose() / double(n) + 0.3 * Matrix::Identity(n, n);
  const Vector s = c.diagonal().cwiseSqrt().cwiseInverse();
  c = s.asDiagonal() * c * s.asDiagonal();
  c = 0.5 * (c + c.transpose()).eval();
  return {dx, dy, c};
}

// ---------------------------------------------------------------- trained-model cache

RunManifest desk_manifest(const TaskSpec& task) { return parse_manifest({{"task", task_to_json(task)}}); }

struct Trained {
  RunManifest manifest;
  std::uint64_t seed = 0;
  Checkpoint baseline;                // trained with the default proposal
  std::optional<Checkpoint> adaptive; // trained with the fitted proposal
  bool fallback = false;

  TrainConfig train_config() const {
    TrainConfig tc = manifest.train;
    tc.seed = seed;
    return tc;
  }
};

std::string config_key(const RunManifest& m) {
  json snap = manifest_snapshot(m);
  snap.erase("seeds");
  snap.erase("output_dir");
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016zx", std::hash<std::string>{}(snap.dump()));
  return buf;
}

Checkpoint as_checkpoint(const RunManifest& m, std::uint64_t seed, const std::string& role, const TrainResult& r,
                         const SamplingConfig& s, bool fallback) {
  Checkpoint c = make_checkpoint(m, seed, role, r.state, r.standardizer, s);
  json meta = json::parse(c.metadata_json);
  meta["fallback"] = fallback;
  c.metadata_json = meta.dump();
  return c;
}

Trained trained(const RunManifest& m, std::uint64_t seed, bool two_stage) {
  const fs::path dir = g_cache / m.task.name() / config_key(m) / ("seed-" + std::to_string(seed));
  const fs::path base = dir / "baseline.ckpt", adapt = dir / "adaptive.ckpt";
  Trained t;
  t.manifest = m;
  t.seed = seed;
  if (fs::exists(base) && (!two_stage || fs::exists(adapt))) {
    t.baseline = load_checkpoint(base);
    if (two_stage) {
      t.adaptive = load_checkpoint(adapt);
      t.fallback = json::parse(t.adaptive->metadata_json).value("fallback", false);
    }
    return t;
  }
  fs::create_directories(dir);
  const double t0 = now_s();
  TrainConfig tc = m.train;
  tc.seed = seed;
  if (two_stage) {
    const TwoStageResult r = two_stage_train(m.task, m.mlp, tc, m.optimizer, m.curve);
    t.baseline = as_checkpoint(m, seed, "baseline", r.preliminary, m.sampling, false);
    t.adaptive = as_checkpoint(m, seed, "final", r.final, r.fit.config, r.fit.fallback);
    t.fallback = r.fit.fallback;
    write_text(dir / "sampling.json", fit_to_json(r.fit, m.curve.grid).dump(2) + "\n");
    save_checkpoint(adapt, *t.adaptive);
  } else {
    const TrainResult r = train(m.task, m.mlp, tc, m.optimizer);
    t.baseline = as_checkpoint(m, seed, "baseline", r, m.sampling, false);
  }
  save_checkpoint(base, t.baseline);
  note("trained " + m.task.name() + " seed " + std::to_string(seed) + (two_stage ? " (two-stage)" : "") + " in " +
       fmt(now_s() - t0, 1) + " s");
  return t;
}

/// Estimate with the default proposal (baseline) or the fitted one (adaptive).
double estimate_nats(const Trained& t, Variant v) {
  const Checkpoint& c = is_adaptive(v) ? *t.adaptive : t.baseline;
  const NetworkDenoiser den(c.mlp, c.state);
  Rng rng = make_rng(t.seed, {stream::estimate, static_cast<std::uint32_t>(v)});
  const Sampler smp = test_sampler(t.manifest.task, t.train_config(), c.standardizer);
  return estimate(den, smp, c.sampling, rng, v).mean_nats;
}

std::vector<double> per_seed(const RunManifest& m, const std::vector<std::uint64_t>& seeds, Variant v) {
  std::vector<double> out;
  for (auto s : seeds) out.push_back(estimate_nats(trained(m, s, is_adaptive(v)), v));
  return out;
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(v[i]);
  return s + "]";
}

// ---------------------------------------------------------------- criteria

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome c1() {
  Rng rng = make_rng(101);
  double worst = 0.0;
  for (int k = 0; k < kC1Specs; ++k) {
    const std::size_t dx = 1 + k % 3, dy = 1 + (k / 3) % 2;  // total dimension 2..5
    const JointGaussianSpec s = random_spec(dx, dy, rng);
    const int n = 4001;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      const double t = -14.0 + 28.0 * i / (n - 1);
      const double g = std::exp(t);
      sum += (i == 0 || i == n - 1 ? 0.5 : 1.0) * g * (gaussian_mmse(s.sxx(), g) - gaussian_conditional_mmse(s, g));
    }
    worst = std::max(worst, std::abs(0.5 * sum * 28.0 / (n - 1) - gaussian_mi(s)));
  }
  return {worst <= kC1QuadTol, "max |quadrature - MI| = " + fmt(worst, 6) + " over " + std::to_string(kC1Specs) +
                                   " specs (tol " + fmt(kC1QuadTol, 4) + ")"};
}

Outcome c2() {
  const JointGaussianSpec s = JointGaussianSpec::bivariate(kRho);
  const LinearGaussianDenoiser d(s);
  const double gt = 0.4133;
  std::string detail;
  bool pass = true;
  for (bool orth : {false, true}) {
    Rng rng = make_rng(102 + orth);
    const Eigen::ArrayXd c = contributions(d, fresh_sampler(s), SamplingConfig{}, kC2Points, orth, rng);
    const auto m = detail::moments(c);
    const double se = m.se;
    const bool ok = std::abs(m.mean - gt) <= kC2Sigmas * se;
    pass = pass && ok;
    detail += std::string(orth ? " orthogonal " : "gap ") + fmt(m.mean) + " (SE " + fmt(se, 4) + ")";
  }
  return {pass, detail + "; GT 0.4133, tol " + fmt(kC2Sigmas, 0) + " SE"};
}

Outcome c3() {
  Rng rng = make_rng(103);
  const std::vector<double> ts{-4.0, -2.0, -1.0, 0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0};
  int bad = 0, total = 0;
  double worst = 0.0;
  for (int k = 0; k < 5; ++k) {
    const JointGaussianSpec s = random_spec(1 + k % 3, 1 + k % 2, rng);
    const LinearGaussianDenoiser d(s);
    for (double t : ts) {
      const Batch data = fresh_sampler(s)(50000, rng);
      const PairedPasses p = paired_passes(d, data, Vector::Constant(50000, t), rng);
      const Eigen::ArrayXd gap = ((p.x - p.uncond).colwise().squaredNorm() - (p.x - p.cond).colwise().squaredNorm())
                                     .transpose()
                                     .array();
      const Eigen::ArrayXd orth = (p.cond - p.uncond).colwise().squaredNorm().transpose().array();
      const auto a = detail::moments(gap), b = detail::moments(orth);
      const double se = std::hypot(a.se, b.se);
      const double z = std::abs(a.mean - b.mean) / se;
      worst = std::max(worst, z);
      bad += z > kC3Sigmas;
      ++total;
    }
  }
  return {bad == 0, std::to_string(total - bad) + "/" + std::to_string(total) +
                        " (spec, SNR) cells within 3 combined SE; worst " + fmt(worst, 2) + " SE"};
}

Outcome c4() {
  MlpConfig c;
  c.input_dim = c.output_dim = 4;
  c.cond_dim = 2;
  c.width = 8;
  c.time_embed_dim = 8;
  Rng rng = make_rng(104);
  std::vector<double> w = init_weights(c, rng);
  for (double& v : w) v += 0.1 * standard_normal(rng);  // nonzero output layer
  DenoiseBatch b;
  const Eigen::Index n = 6;
  b.z = Matrix::NullaryExpr(4, n, [&] { return standard_normal(rng); });
  b.x_target = Matrix::NullaryExpr(4, n, [&] { return standard_normal(rng); });
  b.y = Matrix::NullaryExpr(2, n, [&] { return standard_normal(rng); });
  b.log_snr = Vector::NullaryExpr(n, [&] { return 4.0 * standard_normal(rng); });
  b.cond_flag = Vector::NullaryExpr(n, [&] { return uniform01(rng) < 0.5 ? 0.0 : 1.0; });
  b.weight = Vector::NullaryExpr(n, [&] { return 0.5 + uniform01(rng); });
  const LossGrad lg = loss_and_grad(w, c, b);
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  double worst = 0.0;
  const double h = 1e-5;
  for (int k = 0; k < kC4Coords; ++k) {
    const std::size_t i = idx[static_cast<std::size_t>(k)];
    const double keep = w[i];
    w[i] = keep + h;
    const double up = loss_and_grad(w, c, b).loss;
    w[i] = keep - h;
    const double down = loss_and_grad(w, c, b).loss;
    w[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - lg.grad[i]) / std::max({std::abs(fd), std::abs(lg.grad[i]), 1e-6}));
  }
  return {worst <= kC4RelTol, "max relative error " + fmt(worst * 1e6, 3) + "e-6 over " + std::to_string(kC4Coords) +
                                  " of " + std::to_string(w.size()) + " coordinates"};
}

TaskSpec bivariate_task() { return parse_task_name("1v1-normal-0.75"); }

Outcome c5() {
  const RunManifest m = desk_manifest(bivariate_task());
  const auto v = per_seed(m, kSeeds5, Variant::gap);
  const double mean = mean_of(v), sd = std_of(v);
  const double gt = 0.4133;
  return {std::abs(mean - gt) <= kC5BiasTol && sd <= kC5StdTol,
          "gap mean " + fmt(mean) + " std " + fmt(sd) + " over 5 seeds " + list(v) + "; GT 0.4133, tol +-" +
              fmt(kC5BiasTol, 2) + ", std <= " + fmt(kC5StdTol, 2)};
}

Outcome c6() {
  const RunManifest m = desk_manifest(parse_task_name("1v1-additive-0.1"));
  const auto v = per_seed(m, kSeeds3, Variant::gap);
  const double mean = mean_of(v), gt = 1.7094;
  return {std::abs(mean - gt) <= kC6BiasTol,
          "gap mean " + fmt(mean) + " over 3 seeds " + list(v) + "; GT 1.7094, tol +-" + fmt(kC6BiasTol, 2)};
}

Outcome c7() {
  // x ~ N(0, I_3) independent of a scalar y; the unconditional pass is what is measured.
  TaskSpec task;
  task.family = Family::gaussian;
  task.dim_x = 3;
  task.dim_y = 1;
  task.cov = Matrix::Identity(4, 4);
  task.label = "normal-3d-unconditional";
  RunManifest m = desk_manifest(task);
  m.train.standardize = false;  // keep the data exactly standard so d/(1+g) is the reference
  const Trained t = trained(m, 0, false);
  const NetworkDenoiser den(t.baseline.mlp, t.baseline.state);
  Rng rng = make_rng(7, {stream::curve});
  const auto grid = uniform_grid(-4.0, 8.0, 25);
  const MmseCurve c = mmse_curve(den, test_sampler(task, t.train_config(), t.baseline.standardizer), grid, 8192, rng);
  double worst = 0.0, at = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double ref = 3.0 / (1.0 + std::exp(grid[i]));
    const double rel = std::abs(c.uncond[i] - ref) / ref;
    if (rel > worst) {
      worst = rel;
      at = grid[i];
    }
  }
  return {worst <= kC7RelTol, "max relative error " + fmt(100 * worst, 2) + "% at log-SNR " + fmt(at, 1) +
                                  " over 25 points on [-4, 8] (tol " + fmt(100 * kC7RelTol, 0) + "%)"};
}

Outcome c8() {
  const auto grid = default_curve_grid();
  MmseCurve c;
  c.grid = grid;
  for (double t : grid) c.cond.push_back(1.0 / (1.0 + std::exp(t)));
  c.uncond = c.cond;
  const AdaptiveFit f = fit_adaptive(c, 1, SamplingConfig{});
  const double h = grid[1] - grid[0];
  const bool ok = !f.fallback && std::abs(f.config.loc) <= kC8Spacings * h &&
                  std::abs(f.config.scale - std::log(3.0)) <= kC8Spacings * h;
  return {ok, "loc " + fmt(f.config.loc) + " scale " + fmt(f.config.scale) + " (ln 3 = " + fmt(std::log(3.0)) +
                  "), grid spacing " + fmt(h)};
}

Outcome c9() {
  int eligible = 0, wins = 0;
  std::string detail;
  for (const auto& name : kC9Tasks) {
    const RunManifest m = desk_manifest(parse_task_name(name));
    std::vector<double> base, adapt;
    int fallbacks = 0;
    for (auto s : kSeeds3) {
      const Trained t = trained(m, s, true);
      fallbacks += t.fallback;
      base.push_back(estimate_nats(t, Variant::gap));
      adapt.push_back(estimate_nats(t, Variant::gap_adaptive));
    }
    const double sb = std_of(base), sa = std_of(adapt);
    detail += "; " + name + ": adaptive " + fmt(mean_of(adapt)) + "+-" + fmt(sa) + " baseline " + fmt(mean_of(base)) +
              "+-" + fmt(sb);
    if (fallbacks > 0) {
      detail += " (excluded: " + std::to_string(fallbacks) + " seed(s) fell back to the default proposal)";
      continue;
    }
    ++eligible;
    wins += sa <= sb;
  }
  const bool pass = eligible >= 3 && 2 * wins > eligible;
  return {pass, "adaptive std <= baseline std on " + std::to_string(wins) + "/" + std::to_string(eligible) +
                    " eligible tasks (3 seeds each, gap variant)" + detail};
}

Outcome c10() {
  const RunManifest single = desk_manifest(bivariate_task());
  TaskSpec stacked;
  stacked.family = Family::gaussian;
  stacked.dim_x = stacked.dim_y = 2;
  stacked.cov = Matrix::Identity(4, 4);
  stacked.cov(0, 2) = stacked.cov(2, 0) = kRho;  // (x1, y1)
  stacked.cov(1, 3) = stacked.cov(3, 1) = kRho;  // (x2, y2)
  stacked.label = "stacked-2x-1v1-normal-0.75";
  const RunManifest pair = desk_manifest(stacked);
  const double one = mean_of(per_seed(single, kSeeds3, Variant::gap));
  const double two = mean_of(per_seed(pair, kSeeds3, Variant::gap));
  const double rel = std::abs(two - 2.0 * one) / (2.0 * one);
  return {rel <= kC10RelTol, "stacked " + fmt(two) + " vs 2 x single " + fmt(2.0 * one) + " (rel " + fmt(100 * rel, 2) +
                                 "%, tol " + fmt(100 * kC10RelTol, 0) + "%; analytic " + fmt(*stacked.ground_truth()) +
                                 ")"};
}

Outcome c11() {
  TaskSpec task = parse_task_name("multinormal-sparse-3-3-2.0");
  task.param = JointGaussianSpec::sparse_strength_for_mi(5.0);
  const RunManifest m = desk_manifest(task);
  std::vector<double> v;
  int fallbacks = 0;
  for (auto s : kSeeds3) {
    const Trained t = trained(m, s, true);
    fallbacks += t.fallback;
    v.push_back(estimate_nats(t, Variant::gap_adaptive));
  }
  const double mean = mean_of(v), gt = *task.ground_truth();
  const double rel = std::abs(mean - gt) / gt;
  std::string detail = "gap-adaptive mean " + fmt(mean) + " over 3 seeds " + list(v) + "; GT " + fmt(gt, 4) +
                       ", rel error " + fmt(100 * rel, 2) + "% (tol " + fmt(100 * kC11RelTol, 0) + "%)";
  if (fallbacks) detail += "; " + std::to_string(fallbacks) + "/3 fits fell back to the default proposal";
  return {rel <= kC11RelTol, detail};
}

Outcome c12() {
  json d = {{"train", {{"iterations", 400}, {"batch_size", 64}, {"standardize_samples", 2000}, {"test_samples", 2000}}},
            {"mlp", {{"width", 16}, {"time_embed_dim", 8}}},
            {"sampling", {{"n_points", 2000}, {"inference_times", 3}}},
            {"curve", {{"grid_points", 16}, {"samples_per_point", 256}}}};
  const SuiteSpec suite = parse_suite({{"name", "determinism"},
                                       {"seeds", {0, 1}},
                                       {"variants", {"gap", "orthogonal", "gap-adaptive"}},
                                       {"defaults", d},
                                       {"tasks", {"1v1-normal-0.5", "multinormal-sparse-3-3-2.0"}}});
  const fs::path a = g_cache / "c12-run-a", b = g_cache / "c12-run-b";
  fs::remove_all(a);
  fs::remove_all(b);
  cmd_benchmark(suite, a, 1);
  cmd_benchmark(suite, b, 2);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  bool same = true;
  std::string which;
  for (const char* f : {"results.csv", "failures.csv", "curves/1v1-normal-0.5.csv", "curves/multinormal-sparse-3-3-2.0.csv"}) {
    const bool eq = fs::exists(a / f) && slurp(a / f) == slurp(b / f);
    same = same && eq;
    if (!eq) which += std::string(" ") + f;
  }
  return {same, same ? "results, failures and curve CSVs byte-identical across two runs (1 and 2 workers)"
                     : "differs:" + which};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string cache = "acceptance-cache", only, allow;
  app.add_option("--cache-dir", cache, "Trained-model cache");
  app.add_option("--allow-fail", allow, "Criteria whose FAIL does not affect the exit status");
  app.add_option("--only", only, "Comma-separated criterion numbers");
  CLI11_PARSE(app, argc, argv);
  g_cache = cache;
  fs::create_directories(g_cache);

  std::set<int> want;
  if (!only.empty())
    for (auto v : parse_seed_list(only)) want.insert(static_cast<int>(v));
  std::set<int> allowed;
  if (!allow.empty())
    for (auto v : parse_seed_list(allow)) allowed.insert(static_cast<int>(v));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"analytic MMSE-gap identity", c1},
      {"oracle importance sampling, rho = 0.75", c2},
      {"orthogonal identity at fixed SNR", c3},
      {"gradient vs finite differences", c4},
      {"end-to-end bivariate normal, desk", c5},
      {"end-to-end uniform-additive-0.1, desk", c6},
      {"learned unconditional curve vs d/(1+g)", c7},
      {"adaptive fit on closed-form curve", c8},
      {"ablation: adaptive std <= baseline std", c9},
      {"additivity of stacked pairs", c10},
      {"sparse 3x3 at 5 nats, adaptive", c11},
      {"determinism of result CSVs", c12},
  };
  int failed = 0, tolerated = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!want.empty() && !want.count(id)) continue;
    const double t0 = now_s();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++(allowed.count(id) ? tolerated : failed);
    std::cout << (o.pass ? "PASS" : "FAIL") << " C" << id << " " << criteria[i].first << ": " << o.detail << " ["
              << fmt(now_s() - t0, 1) << " s]" << std::endl;
  }
  std::cout << "summary: " << failed + tolerated << " failed";
  if (tolerated) std::cout << " (" << tolerated << " in --allow-fail)";
  std::cout << std::endl;
  return failed == 0 ? 0 : 1;
}
