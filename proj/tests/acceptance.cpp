// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <Eigen/Dense>

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "mxlstm/mxlstm.hpp"
#include "oracles.hpp"

using namespace mxlstm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void criterion(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0.0 && secs > budget_s) {
    o.pass = false;
    o.detail += fmt("; over the %.0f s budget", budget_s);
  }
  if (!o.pass) ++failures;
  std::printf("%s  %2d %-28s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// Shared training setup

ModelConfig small_model(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.embedding_dim = 16;
  c.hidden_dim = 32;
  c.grid = PoolingGrid{8, 2.0};
  return c;
}

std::vector<Window> synthetic_windows(SyntheticKind kind, std::uint64_t seed, std::size_t scenes, std::size_t frames,
                                      std::size_t agents = 3) {
  Rng rng(seed);
  SyntheticParams p;
  p.num_agents = agents;
  p.num_frames = frames;
  std::vector<Window> out;
  for (std::size_t s = 0; s < scenes; ++s) {
    const auto w = extract_windows(generate_synthetic(kind, p, rng), 8, frames - 8, frames);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

double model_mad(const ModelConfig& cfg, const ModelWeights& w, const std::vector<Window>& windows) {
  return mad(forecast_windows(model_forecaster(cfg, w), windows, 8, 12));
}

// ---------------------------------------------------------------------------

Outcome gradient_exactness() {
  double worst = 0.0;
  std::string where;
  for (Variant v : kAllVariants) {
    const ModelConfig cfg = gradient_check_config(v);
    Rng rng(2024);
    const ModelWeights w = ModelWeights::initialize(cfg, rng, 0.5);
    const Window scene = gradient_check_scene(rng, 4, 3);
    const auto rep = gradient_check(cfg, w, scene, 4, 3, 1e-4, 1e-4, 1e-5);
    if (rep.max_rel_error >= worst) {
      worst = rep.max_rel_error;
      where = std::string(variant_name(v)) + "/" + rep.worst_tensor;
    }
  }
  return {worst < 1e-4, fmt("max relative error %.2e at %s (< 1e-4)", worst, where.c_str())};
}

Outcome psd_by_construction() {
  Rng rng(10);
  double min_eig = 1.0, worst_rt = 0.0;
  int over = 0;
  for (int t = 0; t < 10000; ++t) {
    LogCholParams p;
    for (auto& v : p.theta) v = rng.uniform(-3.0, 3.0);
    const Mat4 S = covariance_from_logchol(p);
    Eigen::Matrix4d E;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) E(i, j) = S[i][j];
    min_eig = std::min(min_eig, Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d>(E).eigenvalues().minCoeff());
    const auto back = logchol_from_covariance(S);
    double err = back ? 0.0 : INFINITY;
    if (back)
      for (int k = 0; k < 10; ++k) err = std::max(err, std::fabs(back->theta[k] - p.theta[k]));
    worst_rt = std::max(worst_rt, err);
    over += err >= 1e-8;
  }
  return {min_eig >= -1e-10 && worst_rt < 1e-8,
          fmt("min eigenvalue %.3e (>= -1e-10); worst theta round trip %.2e (< 1e-8), %d/10000 draws over", min_eig,
              worst_rt, over)};
}

Outcome nll_correctness() {
  Rng rng(11);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    LogCholParams p;
    for (auto& v : p.theta) v = rng.uniform(-1.0, 1.0);
    Vec4 x, mu;
    for (int i = 0; i < 4; ++i) x[i] = rng.uniform(-2.0, 2.0), mu[i] = rng.uniform(-2.0, 2.0);
    worst = std::max(worst, std::fabs(gaussian4_nll(x, Gaussian4{mu, p}) - oracle::nll_explicit(x, mu, p.theta)));
  }
  const double standard = std::fabs(gaussian4_nll({0, 0, 0, 0}, Gaussian4{}) - 2.0 * std::log(2.0 * std::numbers::pi));
  return {worst < 1e-8 && standard < 1e-12,
          fmt("max |solve - explicit inverse| %.2e (< 1e-8); standard normal at mean off by %.1e (< 1e-12)", worst,
              standard)};
}

Outcome pooling_oracle() {
  Rng rng(12);
  const std::size_t D = 4;
  const ModelConfig defaults;
  std::size_t mismatched = 0, nonzero = 0;
  for (int scene = 0; scene < 1000; ++scene) {
    const std::size_t n = 1 + rng.index(20);
    const auto agents = oracle::random_agents(rng, n, defaults.grid.half_extent * 1.5);
    std::map<std::size_t, std::vector<double>> hidden;
    for (std::size_t j = 0; j < n; ++j) hidden[j] = sample_std_normal(rng, D);
    const std::size_t obs = rng.index(n);
    const auto lib = pool_social_tensor(obs, agents, hidden, D, defaults.grid, defaults.frustum, PoolingMode::frustum);
    const auto ref = oracle::brute_force_pool(obs, agents, hidden, D, defaults.grid.cells_per_side, defaults.grid.half_extent,
                                              defaults.frustum.aperture, defaults.frustum.depth, PoolingMode::frustum);
    mismatched += lib.values != ref;
    for (double v : ref) nonzero += v != 0.0;
  }
  return {mismatched == 0, fmt("%zu/1000 scenes differ from brute force (%zu nonzero cells pooled)", mismatched, nonzero)};
}

struct ConvergenceRun {
  ModelConfig cfg;
  ModelWeights weights;
};

Outcome synthetic_convergence(ConvergenceRun& run) {
  run.cfg = small_model(Variant::individual);
  const auto windows = synthetic_windows(SyntheticKind::linear, 501, 50, 20);
  TrainConfig tc;
  tc.epochs = 500;
  tc.learning_rate = 0.001;
  run.weights = train(windows, run.cfg, tc).weights;
  const double m = model_mad(run.cfg, run.weights, windows);
  const double held = model_mad(run.cfg, run.weights, synthetic_windows(SyntheticKind::linear, 502, 50, 20));
  return {m < 0.10, fmt("autoregressive MAD %.4f m on the training scenes (< 0.10), %.4f m held out, 500 epochs", m, held)};
}

struct VisletRuns {
  ModelConfig cfg = small_model(Variant::individual);
  std::vector<ModelWeights> individual;
  std::vector<Window> held_out;
};

Outcome vislet_value(VisletRuns& runs) {
  runs.held_out = synthetic_windows(SyntheticKind::turn_with_gaze, 600, 30, 20);
  double sum_ind = 0.0, sum_van = 0.0;
  const std::size_t seeds = 5;
  for (std::size_t s = 0; s < seeds; ++s) {
    const auto windows = synthetic_windows(SyntheticKind::turn_with_gaze, 610 + s, 30, 20);
    TrainConfig tc;
    tc.epochs = 150;
    tc.seed = 620 + s;
    const auto ind = train(windows, runs.cfg, tc).weights;
    const ModelConfig van_cfg = small_model(Variant::vanilla);
    const auto van = train(windows, van_cfg, tc).weights;
    sum_ind += model_mad(runs.cfg, ind, runs.held_out);
    sum_van += model_mad(van_cfg, van, runs.held_out);
    runs.individual.push_back(ind);
  }
  const double a = sum_ind / seeds, b = sum_van / seeds;
  return {a < b, fmt("mean held-out MAD over %zu seeds: individual %.4f m, vanilla %.4f m", seeds, a, b)};
}

Outcome noise_robustness(const VisletRuns& runs) {
  if (runs.individual.empty()) return {false, "no trained models (vislet run failed)"};
  const std::vector<double> sigmas{0, 8, 16, 24, 32};
  std::vector<double> mean(sigmas.size(), 0.0);
  std::size_t count = 0;
  for (const auto& w : runs.individual)
    for (std::uint64_t seed = 700; seed < 710; ++seed, ++count) {
      const auto rows = noise_sweep(model_forecaster(runs.cfg, w), runs.held_out, 8, 12, sigmas, seed);
      for (std::size_t k = 0; k < rows.size(); ++k) mean[k] += rows[k].report.mad;
    }
  std::string table;
  bool monotone = true;
  for (std::size_t k = 0; k < mean.size(); ++k) {
    mean[k] /= static_cast<double>(count);
    if (k > 0 && mean[k] < mean[k - 1]) monotone = false;
    table += fmt("%s%g:%.4f", k ? " " : "", sigmas[k], mean[k]);
  }
  return {monotone, fmt("mean MAD by sigma over %zu runs {%s}", count, table.c_str())};
}

Outcome metric_oracles() {
  AgentForecast a{1, {}, {}};
  // Truth at the origin keeps the difference exactly (0.3, 0.4) in binary.
  for (int k = 0; k < 12; ++k) {
    a.truth.push_back({{0.0, 0.0}, 0.0});
    a.predicted.push_back({{0.3, 0.4}, 0.0});
  }
  const ForecastResult off{{a}, true};
  AgentForecast wrap{2, {{{0, 0}, deg2rad(350.0)}}, {{{0, 0}, deg2rad(10.0)}}};
  const double e = angular_error(ForecastResult{{wrap}, true});
  const std::vector<double> angles{0.1, 1.3, 2.9, 4.0, 5.5, 0.7};
  const double rho = circular_correlation(angles, angles).value_or(NAN);
  const bool ok = mad(off) == 0.5 && fad(off) == 0.5 && std::fabs(e - 20.0) < 1e-9 && std::fabs(rho - 1.0) < 1e-12;
  return {ok, fmt("MAD %.17g, FAD %.17g (= 0.5); wrap %.12g deg (= 20); identity correlation %.17g", mad(off), fad(off), e, rho)};
}

int sh(const std::string& cmd) {
  const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / ("mxlstm_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const std::string cli = MXLSTM_CLI;
  const std::string data = (dir / "scene.tsv").string();
  if (sh(cli + " synth --kind crossing --agents 4 --frames 32 --seed 3 --out " + data) != 0) return {false, "synth failed"};
  const std::string model = " --embedding-dim 8 --hidden-dim 12 --grid-cells 8 --epochs 3 --seed 17";
  for (const char* tag : {"a", "b"}) {
    const std::string ck = (dir / (std::string(tag) + ".ck")).string();
    if (sh(cli + " train --quiet --data " + data + model + " --out " + ck) != 0) return {false, "train failed"};
    if (sh(cli + " eval --checkpoint " + ck + " --data " + data + " --horizon 12 --sigma 0 --sigma 16 --out " +
           (dir / (std::string(tag) + ".csv")).string()) != 0)
      return {false, "eval failed"};
  }
  const std::string cka = slurp(dir / "a.ck"), csva = slurp(dir / "a.csv");
  const bool same = !cka.empty() && !csva.empty() && cka == slurp(dir / "b.ck") && csva == slurp(dir / "b.csv");
  fs::remove_all(dir);
  return {same, fmt("checkpoints (%zu bytes) and metrics CSV (%zu bytes) %s", cka.size(), csva.size(),
                    same ? "bitwise identical" : "differ")};
}

Outcome horizon_monotonicity(const ConvergenceRun& run) {
  if (run.weights.W_o.empty()) return {false, "no trained model (convergence run failed)"};
  const auto windows = synthetic_windows(SyntheticKind::linear, 800, 50, 40);
  const auto rows = horizon_sweep(model_forecaster(run.cfg, run.weights), windows, 8, {12, 16, 20, 24, 28, 32});
  std::string table;
  bool monotone = true;
  double prev = 0.0;
  for (const auto& r : rows) {
    if (!r.report) return {false, "horizon " + std::to_string(r.horizon) + " skipped: " + r.notice};
    if (r.report->mad < prev) monotone = false;
    prev = r.report->mad;
    table += fmt("%s%zu:%.4f", table.empty() ? "" : " ", r.horizon, r.report->mad);
  }
  return {monotone, fmt("MAD by horizon {%s}", table.c_str())};
}

}  // namespace

int main() {
  ConvergenceRun convergence;
  VisletRuns vislet;
  criterion(1, "gradient exactness", 60, gradient_exactness);
  criterion(2, "psd by construction", 10, psd_by_construction);
  criterion(3, "nll correctness", 0, nll_correctness);
  criterion(4, "pooling oracle", 0, pooling_oracle);
  criterion(5, "synthetic convergence", 600, [&] { return synthetic_convergence(convergence); });
  criterion(6, "vislet value", 0, [&] { return vislet_value(vislet); });
  criterion(7, "noise robustness shape", 0, [&] { return noise_robustness(vislet); });
  criterion(8, "metric oracles", 0, metric_oracles);
  criterion(9, "determinism", 0, determinism);
  criterion(10, "horizon monotonicity", 0, [&] { return horizon_monotonicity(convergence); });
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
