// mxlstm: synthesize scenes, train, evaluate, analyze and gradient-check.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "mxlstm/mxlstm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mxlstm;

namespace {

constexpr const char* kToolVersion = "0.1.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

/// Writes through a temporary sibling file and renames it into place.
void write_atomic(const std::string& path, const std::function<void(std::ostream&)>& fill, bool binary = false) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    fill(out);
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, target);
}

struct Manifest {
  std::string command;
  std::uint64_t seed = 0;
  json config = json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::string started = utc_now();

  void write(const std::string& path) const {
    json m;
    m["tool"] = "mxlstm";
    m["version"] = kToolVersion;
    m["command"] = command;
    m["seed"] = seed;
    m["config"] = config;
    m["inputs"] = json::array();
    for (const auto& p : inputs) m["inputs"].push_back({{"path", p}, {"sha256", sha256_file(p)}});
    m["outputs"] = json::array();
    for (const auto& p : outputs) m["outputs"].push_back({{"path", p}, {"sha256", sha256_file(p)}});
    m["started"] = started;
    m["finished"] = utc_now();
    write_atomic(path, [&](std::ostream& o) { o << m.dump(2) << '\n'; });
  }
};

std::string manifest_path(const std::string& output) { return output + ".manifest.json"; }

Scene load_scene(const std::string& path, double source_fps) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open data file " + path);
  ParseResult parsed;
  try {
    parsed = parse_annotations(in);
  } catch (const ParseError& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  for (const auto& w : parsed.warnings) std::cerr << path << ": warning: " << w << '\n';
  return downsample(parsed.records, source_fps);
}

std::vector<Scene> load_scenes(const std::vector<std::string>& paths, double source_fps) {
  std::vector<Scene> out;
  for (const auto& p : paths) out.push_back(load_scene(p, source_fps));
  return out;
}

json config_json(const RunConfig& c) {
  json j = json::object();
  for (const auto& [k, v] : config_values(c)) j[k] = v;
  return j;
}

// Flags mirroring config keys; set flags override the config file.
struct HyperparameterFlags {
  std::map<std::string, std::string> values;

  void add_to(CLI::App* app, bool include_training) {
    static const std::vector<std::pair<std::string, std::string>> model_flags{
        {"variant", "full, block_diagonal, no_frustum, individual, pace, vanilla"},
        {"embedding_dim", "embedding size E"},
        {"hidden_dim", "LSTM hidden size D"},
        {"grid_cells", "pooling grid cells per side"},
        {"grid_half_extent", "pooling grid half side, meters"},
        {"aperture_deg", "view frustum aperture, degrees"},
        {"frustum_depth", "view frustum depth, meters"},
        {"anchor_distance", "vislet anchor distance r, meters"},
        {"frame", "relative or absolute coordinates"}};
    static const std::vector<std::pair<std::string, std::string>> train_flags{
        {"learning_rate", "RMSProp learning rate"},
        {"rmsprop_decay", "RMSProp decay"},
        {"epsilon", "RMSProp epsilon"},
        {"epochs", "training epochs"},
        {"l2_weight", "L2 weight decay"},
        {"grad_clip", "global gradient norm bound, 0 disables"},
        {"obs_len", "observed frames"},
        {"pred_len", "predicted frames"},
        {"window_stride", "training window stride, 0 means pred_len"}};
    auto add = [&](const std::pair<std::string, std::string>& f) {
      std::string flag = "--" + f.first;
      for (auto& ch : flag)
        if (ch == '_') ch = '-';
      app->add_option_function<std::string>(flag, [this, key = f.first](const std::string& v) { values[key] = v; }, f.second);
    };
    for (const auto& f : model_flags) add(f);
    if (include_training)
      for (const auto& f : train_flags) add(f);
    app->add_option_function<std::string>("--lr", [this](const std::string& v) { values["learning_rate"] = v; },
                                          "alias of --learning-rate");
  }

  RunConfig resolve(const std::string& config_path, std::optional<std::uint64_t> seed) const {
    RunConfig c;
    try {
      if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw UsageError("cannot open config " + config_path);
        c = parse_config(in);
      }
      for (const auto& [k, v] : values) apply_config_value(c, k, v);
      if (seed) c.train.seed = *seed;
      c.model.validate();
      c.train.validate();
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string kind;
  std::string out;
  std::uint64_t seed = 42;
  SyntheticParams params;
};

int cmd_synth(const SynthArgs& a) {
  const auto kind = parse_synthetic_kind(a.kind);
  if (!kind) throw UsageError("unknown synthetic kind '" + a.kind + "' (linear, turn_with_gaze, conversational_group, crossing)");
  try {
    a.params.validate(*kind);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  Manifest m;
  m.command = "synth";
  m.seed = a.seed;
  Rng rng(a.seed);
  const Scene scene = generate_synthetic(*kind, a.params, rng);
  const auto records = scene_to_annotations(scene);
  write_atomic(a.out, [&](std::ostream& o) { write_annotations(o, records); });
  m.config = {{"kind", a.kind},
              {"agents", a.params.num_agents},
              {"frames", a.params.num_frames},
              {"timestep", a.params.timestep},
              {"speed_min", a.params.speed_min},
              {"speed_max", a.params.speed_max},
              {"area", a.params.area},
              {"jitter", a.params.position_jitter},
              {"gaze_lead", a.params.gaze_lead}};
  m.outputs = {a.out};
  m.write(manifest_path(a.out));
  std::cout << "wrote " << records.size() << " records to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> data;
  std::string out;
  std::string loss_csv;
  std::optional<std::uint64_t> seed;
  double source_fps = 2.5;
  bool quiet = false;
  HyperparameterFlags flags;
};

int cmd_train(const TrainArgs& a) {
  const RunConfig cfg = a.flags.resolve(a.config, a.seed);
  Manifest m;
  m.command = "train";
  m.seed = cfg.train.seed;
  m.config = config_json(cfg);
  m.inputs = a.data;
  if (!a.config.empty()) m.inputs.push_back(a.config);

  const auto scenes = load_scenes(a.data, a.source_fps);
  const auto windows = training_windows(scenes, cfg.train);
  if (windows.empty())
    throw std::runtime_error("no training window of " + std::to_string(cfg.train.obs_len + cfg.train.pred_len) +
                             " frames with a complete agent");
  if (!a.quiet) std::cerr << "training " << variant_name(cfg.model.variant) << " on " << windows.size() << " windows\n";

  const auto result = train(windows, cfg.model, cfg.train, std::nullopt, [&](std::size_t e, double loss) {
    if (!a.quiet) std::cerr << "epoch " << e + 1 << "/" << cfg.train.epochs << " loss " << loss << '\n';
  });

  Checkpoint ck{cfg.model, result.weights, json::object()};
  ck.meta["training"] = config_json(cfg);
  write_atomic(a.out, [&](std::ostream& o) { write_checkpoint(o, ck); }, true);
  m.outputs = {a.out};
  const std::string loss_path = a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv;
  write_atomic(loss_path, [&](std::ostream& o) {
    o << "epoch,loss\n";
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) o << e + 1 << ',' << format_double(result.epoch_loss[e]) << '\n';
  });
  m.outputs.push_back(loss_path);
  m.write(manifest_path(a.out));
  std::cout << "wrote checkpoint " << a.out << " and loss log " << loss_path << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> data;
  std::string out;
  std::size_t obs = 8;
  std::vector<std::size_t> horizons{12};
  std::vector<double> sigmas{0.0};
  std::string rollout = "mean";
  std::size_t samples = 10;
  std::size_t stride = 1;
  std::uint64_t seed = 42;
  double source_fps = 2.5;
};

int cmd_eval(const EvalArgs& a) {
  if (a.rollout != "mean" && a.rollout != "sample") throw UsageError("--rollout must be 'mean' or 'sample'");
  if (a.obs < 1 || a.stride < 1 || a.samples < 1) throw UsageError("--obs, --stride and --samples must be >= 1");
  for (auto h : a.horizons)
    if (h < 1) throw UsageError("--horizon must be >= 1");
  for (double s : a.sigmas)
    if (!(s >= 0.0)) throw UsageError("--sigma must be >= 0");

  const Checkpoint ck = load_checkpoint(a.checkpoint);
  Manifest m;
  m.command = "eval";
  m.seed = a.seed;
  m.config = {{"checkpoint_variant", std::string(variant_name(ck.config.variant))},
              {"obs", a.obs},
              {"horizons", a.horizons},
              {"sigmas", a.sigmas},
              {"rollout", a.rollout},
              {"samples", a.rollout == "sample" ? a.samples : 0},
              {"stride", a.stride},
              {"source_fps", a.source_fps}};
  m.inputs = a.data;
  m.inputs.insert(m.inputs.begin(), a.checkpoint);

  const auto scenes = load_scenes(a.data, a.source_fps);
  const std::size_t max_h = *std::max_element(a.horizons.begin(), a.horizons.end());
  std::vector<Window> windows;
  for (const auto& s : scenes) {
    auto w = extract_windows(s, a.obs, max_h, a.stride);
    windows.insert(windows.end(), w.begin(), w.end());
  }
  if (windows.empty())
    throw std::runtime_error("data too short: no window of " + std::to_string(a.obs) + " + " + std::to_string(max_h) +
                             " frames with a complete agent");

  const std::string variant(variant_name(ck.config.variant));
  Rng root(a.seed);
  const std::uint64_t noise_seed = root.derive(1);
  std::vector<MetricRow> rows;
  for (double sigma : a.sigmas) {
    Rng noise_rng(noise_seed);
    std::vector<Window> noisy;
    for (const auto& w : windows) noisy.push_back(add_pan_noise(w, sigma, noise_rng, a.obs));

    if (a.rollout == "mean") {
      for (const auto& row : horizon_sweep(model_forecaster(ck.config, ck.weights), noisy, a.obs, a.horizons)) {
        if (!row.report) throw std::runtime_error("horizon " + std::to_string(row.horizon) + ": " + row.notice);
        auto r = metric_rows(*row.report, variant, row.horizon, sigma, a.seed);
        rows.insert(rows.end(), r.begin(), r.end());
      }
    } else {
      std::map<std::size_t, std::vector<MetricReport>> per_h;
      for (std::size_t k = 0; k < a.samples; ++k) {
        const std::uint64_t sample_seed = root.derive(100 + k);
        for (const auto& row : horizon_sweep(model_forecaster(ck.config, ck.weights, sample_seed), noisy, a.obs, a.horizons)) {
          if (!row.report) throw std::runtime_error("horizon " + std::to_string(row.horizon) + ": " + row.notice);
          per_h[row.horizon].push_back(*row.report);
        }
      }
      for (std::size_t h : a.horizons) {
        const auto& reps = per_h[h];
        auto emit = [&](const std::string& name, auto get) {
          double mean = 0.0;
          for (const auto& r : reps) mean += get(r);
          mean /= static_cast<double>(reps.size());
          double var = 0.0;
          for (const auto& r : reps) var += (get(r) - mean) * (get(r) - mean);
          const double sd = reps.size() > 1 ? std::sqrt(var / static_cast<double>(reps.size() - 1)) : 0.0;
          rows.push_back({name + "_mean", variant, h, sigma, a.seed, mean});
          rows.push_back({name + "_std", variant, h, sigma, a.seed, sd});
        };
        emit("mad", [](const MetricReport& r) { return r.mad; });
        emit("fad", [](const MetricReport& r) { return r.fad; });
        emit("e_alpha", [](const MetricReport& r) { return r.e_alpha; });
      }
    }
  }
  if (a.out.empty()) {
    write_metric_csv(std::cout, rows);
  } else {
    write_atomic(a.out, [&](std::ostream& o) { write_metric_csv(o, rows); });
    m.outputs = {a.out};
    m.write(manifest_path(a.out));
    std::cout << "wrote " << rows.size() << " metric rows to " << a.out << '\n';
  }
  return 0;
}

struct AnalyzeArgs {
  std::vector<std::string> data;
  std::string out;
  double speed_floor = 0.45;
  std::size_t bins = 50;
  std::size_t smoothing = 10;
  double source_fps = 2.5;
};

int cmd_analyze(const AnalyzeArgs& a) {
  if (a.bins < 1 || a.smoothing < 1) throw UsageError("--bins and --smoothing must be >= 1");
  Manifest m;
  m.command = "analyze";
  m.config = {{"speed_floor", a.speed_floor}, {"bins", a.bins}, {"smoothing", a.smoothing}, {"source_fps", a.source_fps}};
  m.inputs = a.data;
  const auto scenes = load_scenes(a.data, a.source_fps);

  std::ostringstream csv;
  csv << "record,scene,rank,agent_id,omega_deg,speed,speed_smoothed,tau,samples,correlation\n";
  std::vector<MotionSample> pooled;
  std::size_t profiled = 0;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto profile = discrepancy_profile(scenes[s], a.speed_floor);
    std::vector<double> speeds;
    for (const auto& p : profile) speeds.push_back(p.mean_speed);
    const auto smooth = speeds.empty() ? speeds : moving_average(speeds, a.smoothing);
    for (std::size_t i = 0; i < profile.size(); ++i) {
      csv << "track," << s << ',' << i << ',' << profile[i].agent_id << ',' << format_double(profile[i].mean_omega_deg) << ','
          << format_double(profile[i].mean_speed) << ',' << format_double(smooth[i]) << ",," << profile[i].frames << ",\n";
    }
    profiled += profile.size();
    const auto samples = motion_samples(scenes[s]);
    pooled.insert(pooled.end(), samples.begin(), samples.end());
  }
  if (profiled == 0) std::cerr << "notice: no track moves at or above " << a.speed_floor << " m/s; empty profile\n";

  std::vector<double> alpha, beta;
  for (const auto& s : pooled)
    if (s.speed >= a.speed_floor) {
      alpha.push_back(s.alpha);
      beta.push_back(s.beta);
    }
  std::optional<double> overall;
  if (alpha.size() >= 2) overall = circular_correlation(alpha, beta);
  csv << "correlation,,,,,,,," << alpha.size() << ',' << (overall ? format_double(*overall) : "nan") << '\n';
  const auto bins = velocity_binned_correlation(pooled, a.bins);
  for (std::size_t i = 0; i < bins.size(); ++i) {
    csv << "velocity_bin,," << i << ",,,,," << format_double(bins[i].tau) << ',' << bins[i].count << ','
        << (bins[i].correlation ? format_double(*bins[i].correlation) : "nan") << '\n';
  }

  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    write_atomic(a.out, [&](std::ostream& o) { o << csv.str(); });
    m.outputs = {a.out};
    m.write(manifest_path(a.out));
    std::cout << "wrote analysis of " << profiled << " tracks to " << a.out
              << " (circular correlation " << (overall ? format_double(*overall) : "undefined") << ")\n";
  }
  return 0;
}

struct GradcheckArgs {
  std::string variant = "all";
  std::uint64_t seed = 42;
  double tolerance = 1e-4;
  double step = 1e-5;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::vector<Variant> variants;
  if (a.variant == "all") {
    variants.assign(kAllVariants.begin(), kAllVariants.end());
  } else {
    const auto v = parse_variant(a.variant);
    if (!v) throw UsageError("unknown variant '" + a.variant + "'");
    variants.push_back(*v);
  }
  if (!(a.tolerance > 0.0) || !(a.step > 0.0)) throw UsageError("--tolerance and --step must be positive");
  bool all_pass = true;
  for (Variant v : variants) {
    Rng rng(Rng(a.seed).derive(static_cast<std::uint64_t>(v) + 1));
    const ModelConfig cfg = gradient_check_config(v);
    const ModelWeights w = ModelWeights::initialize(cfg, rng, 0.5);
    const Window win = gradient_check_scene(rng);
    const auto rep = gradient_check(cfg, w, win, 4, 3, 1e-3, a.tolerance, a.step);
    all_pass = all_pass && rep.pass;
    std::printf("%-15s %s max_rel_error=%.3e worst=%s[%zu] analytic=%.9e numeric=%.9e checked=%zu\n",
                std::string(variant_name(v)).c_str(), rep.pass ? "PASS" : "FAIL", rep.max_rel_error,
                rep.worst_tensor.c_str(), rep.worst_index, rep.worst_analytic, rep.worst_numeric, rep.checked);
  }
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MX-LSTM joint trajectory and head-pose forecaster"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic scene TSV");
  s->add_option("--kind", synth.kind, "linear, turn_with_gaze, conversational_group, crossing")->required();
  s->add_option("--out", synth.out, "output TSV path")->required();
  s->add_option("--seed", synth.seed, "random seed");
  s->add_option("--agents", synth.params.num_agents, "number of agents");
  s->add_option("--frames", synth.params.num_frames, "number of frames");
  s->add_option("--timestep", synth.params.timestep, "seconds per frame");
  s->add_option("--speed-min", synth.params.speed_min, "minimum walking speed, m/s");
  s->add_option("--speed-max", synth.params.speed_max, "maximum walking speed, m/s");
  s->add_option("--area", synth.params.area, "side of the start area, meters");
  s->add_option("--jitter", synth.params.position_jitter, "positional noise std, meters");
  s->add_option("--gaze-lead", synth.params.gaze_lead, "turn_with_gaze: steps the pan leads the turn");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model on TSV scenes");
  t->add_option("--config", tr.config, "flat key = value config file");
  t->add_option("--data", tr.data, "scene TSV files")->required();
  t->add_option("--out", tr.out, "checkpoint path")->required();
  t->add_option("--loss-csv", tr.loss_csv, "per-epoch loss CSV (default <out>.loss.csv)");
  t->add_option("--seed", tr.seed, "random seed");
  t->add_option("--source-fps", tr.source_fps, "frame rate of the TSV frames; downsampled to 2.5");
  t->add_flag("--quiet", tr.quiet, "no progress output");
  tr.flags.add_to(t, true);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint path")->required();
  e->add_option("--data", ev.data, "scene TSV files")->required();
  e->add_option("--out", ev.out, "metrics CSV path (stdout if omitted)");
  e->add_option("--obs", ev.obs, "observed frames");
  e->add_option("--horizon", ev.horizons, "predicted frames; repeat for a sweep");
  e->add_option("--sigma", ev.sigmas, "pan noise std in degrees on observed frames; repeat for a sweep");
  e->add_option("--rollout", ev.rollout, "mean or sample");
  e->add_option("--samples", ev.samples, "sampled rollouts per point");
  e->add_option("--stride", ev.stride, "window stride");
  e->add_option("--seed", ev.seed, "random seed");
  e->add_option("--source-fps", ev.source_fps, "frame rate of the TSV frames; downsampled to 2.5");

  AnalyzeArgs an;
  auto* n = app.add_subcommand("analyze", "head pose versus motion statistics");
  n->add_option("--data", an.data, "scene TSV files")->required();
  n->add_option("--out", an.out, "analysis CSV path (stdout if omitted)");
  n->add_option("--speed-floor", an.speed_floor, "frames slower than this (m/s) are ignored");
  n->add_option("--bins", an.bins, "velocity bins");
  n->add_option("--smoothing", an.smoothing, "moving average window of the exported speed curve");
  n->add_option("--source-fps", an.source_fps, "frame rate of the TSV frames; downsampled to 2.5");

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
  g->add_option("--variant", gc.variant, "variant name or 'all'");
  g->add_option("--seed", gc.seed, "random seed");
  g->add_option("--tolerance", gc.tolerance, "maximum relative error");
  g->add_option("--step", gc.step, "finite difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (s->parsed()) return cmd_synth(synth);
    if (t->parsed()) return cmd_train(tr);
    if (e->parsed()) return cmd_eval(ev);
    if (n->parsed()) return cmd_analyze(an);
    if (g->parsed()) return cmd_gradcheck(gc);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 2;
}
