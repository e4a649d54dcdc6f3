#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mxlstm/data.hpp"
#include "mxlstm/model.hpp"

namespace mxlstm {

/// Predicted and true states of one agent over the prediction steps.
struct AgentForecast {
  std::int64_t agent_id = 0;
  std::vector<AgentState> predicted;
  std::vector<AgentState> truth;
};

struct ForecastResult {
  std::vector<AgentForecast> agents;
  /// False when the forecaster does not predict head pose; e_alpha is then NaN.
  bool has_pan = true;

  void validate() const {
    if (agents.empty()) throw std::invalid_argument("forecast: no agents");
    for (const auto& a : agents) {
      if (a.predicted.size() != a.truth.size())
        throw std::invalid_argument("forecast: prediction and truth lengths differ for agent " + std::to_string(a.agent_id));
      if (a.predicted.empty()) throw std::invalid_argument("forecast: empty prediction for agent " + std::to_string(a.agent_id));
    }
  }

  void append(const ForecastResult& other) {
    if (agents.empty()) has_pan = other.has_pan;
    else has_pan = has_pan && other.has_pan;
    agents.insert(agents.end(), other.agents.begin(), other.agents.end());
  }
};

/// Mean Euclidean position error over all agents and prediction steps.
inline double mad(const ForecastResult& r) {
  r.validate();
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& a : r.agents)
    for (std::size_t k = 0; k < a.truth.size(); ++k, ++n) s += (a.predicted[k].position - a.truth[k].position).norm();
  return s / static_cast<double>(n);
}

/// Mean Euclidean position error at the final prediction step.
inline double fad(const ForecastResult& r) {
  r.validate();
  double s = 0.0;
  for (const auto& a : r.agents) s += (a.predicted.back().position - a.truth.back().position).norm();
  return s / static_cast<double>(r.agents.size());
}

/// Mean wrapped absolute pan difference over all agents and steps, in degrees.
inline double angular_error(const ForecastResult& r) {
  r.validate();
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& a : r.agents)
    for (std::size_t k = 0; k < a.truth.size(); ++k, ++n) s += wrapped_difference(a.predicted[k].pan, a.truth[k].pan);
  return rad2deg(s / static_cast<double>(n));
}

struct AgentMetrics {
  std::int64_t agent_id = 0;
  double mad = 0.0;
  double fad = 0.0;
  double e_alpha = 0.0;
};

struct MetricReport {
  double mad = 0.0;            // meters
  double fad = 0.0;            // meters
  double e_alpha = 0.0;        // degrees; NaN without pan forecasts
  std::vector<AgentMetrics> per_agent;
  std::size_t agent_count = 0;
  std::size_t step_count = 0;  // prediction steps per agent
};

inline MetricReport evaluate_metrics(const ForecastResult& r) {
  r.validate();
  MetricReport rep;
  rep.mad = mad(r);
  rep.fad = fad(r);
  rep.e_alpha = r.has_pan ? angular_error(r) : std::numeric_limits<double>::quiet_NaN();
  rep.agent_count = r.agents.size();
  rep.step_count = r.agents.front().truth.size();
  for (const auto& a : r.agents) {
    ForecastResult one{{a}, r.has_pan};
    rep.per_agent.push_back({a.agent_id, mad(one), fad(one), r.has_pan ? angular_error(one) : rep.e_alpha});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Circular statistics

/// Direction of the resultant of unit vectors; none if they cancel exactly.
inline std::optional<double> circular_mean(const std::vector<double>& angles) {
  double s = 0.0, c = 0.0;
  for (double a : angles) {
    s += std::sin(a);
    c += std::cos(a);
  }
  if (s == 0.0 && c == 0.0) return std::nullopt;
  return std::atan2(s, c);
}

/// Jammalamadaka-SenGupta circular correlation; none when either sequence has no spread.
inline std::optional<double> circular_correlation(const std::vector<double>& alpha, const std::vector<double>& beta) {
  if (alpha.size() != beta.size()) throw std::invalid_argument("circular_correlation: length mismatch");
  if (alpha.size() < 2) throw std::invalid_argument("circular_correlation: need at least 2 samples");
  const auto ma = circular_mean(alpha);
  const auto mb = circular_mean(beta);
  if (!ma || !mb) return std::nullopt;
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    const double sa = std::sin(alpha[i] - *ma);
    const double sb = std::sin(beta[i] - *mb);
    num += sa * sb;
    da += sa * sa;
    db += sb * sb;
  }
  // An rms spread below 1e-10 rad is rounding noise around identical angles.
  const double floor = 1e-20 * static_cast<double>(alpha.size());
  if (!(da > floor && db > floor)) return std::nullopt;
  const double den = std::sqrt(da * db);
  return std::clamp(num / den, -1.0, 1.0);
}

/// One frame of walking: head pan alpha, motion angle beta, speed.
struct MotionSample {
  std::int64_t agent_id = 0;
  std::int64_t frame = 0;
  double alpha = 0.0;
  double beta = 0.0;
  double speed = 0.0;  // m/s
};

/// Samples at every frame whose previous frame is also annotated, with a nonzero step.
inline std::vector<MotionSample> motion_samples(const Scene& scene) {
  std::vector<MotionSample> out;
  for (const auto& t : scene.tracks) {
    for (std::size_t k = 1; k < t.points.size(); ++k) {
      const auto& prev = t.points[k - 1];
      const auto& cur = t.points[k];
      if (cur.frame != prev.frame + 1) continue;
      const Vec2 step = cur.state.position - prev.state.position;
      if (step.norm() == 0.0) continue;
      out.push_back({t.agent_id, cur.frame, cur.state.pan, normalize_angle(step.angle()), step.norm() / scene.timestep});
    }
  }
  return out;
}

struct TrackDiscrepancy {
  std::int64_t agent_id = 0;
  double mean_omega_deg = 0.0;
  double mean_speed = 0.0;
  std::size_t frames = 0;
};

/**
 * Per-track mean head/motion discrepancy and mean speed over frames at or
 * above `speed_floor`, sorted ascending by discrepancy (ties by agent id).
 * Tracks with no such frame are left out.
 */
inline std::vector<TrackDiscrepancy> discrepancy_profile(const Scene& scene, double speed_floor = 0.45) {
  std::vector<TrackDiscrepancy> out;
  for (const auto& t : scene.tracks) {
    Scene one{scene.timestep, {t}};
    TrackDiscrepancy d{t.agent_id, 0.0, 0.0, 0};
    for (const auto& s : motion_samples(one)) {
      if (s.speed < speed_floor) continue;
      d.mean_omega_deg += rad2deg(wrapped_difference(s.alpha, s.beta));
      d.mean_speed += s.speed;
      ++d.frames;
    }
    if (d.frames == 0) continue;
    d.mean_omega_deg /= static_cast<double>(d.frames);
    d.mean_speed /= static_cast<double>(d.frames);
    out.push_back(d);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.mean_omega_deg != b.mean_omega_deg ? a.mean_omega_deg < b.mean_omega_deg : a.agent_id < b.agent_id;
  });
  return out;
}

/// Centred moving average; the window is clipped at the ends.
inline std::vector<double> moving_average(const std::vector<double>& v, std::size_t window) {
  if (window == 0) throw std::invalid_argument("moving_average: window must be positive");
  std::vector<double> out(v.size());
  const std::size_t before = window / 2, after = window - before - 1;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t lo = i >= before ? i - before : 0;
    const std::size_t hi = std::min(v.size() - 1, i + after);
    double s = 0.0;
    for (std::size_t k = lo; k <= hi; ++k) s += v[k];
    out[i] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

struct VelocityBin {
  double tau = 0.0;
  std::size_t count = 0;
  std::optional<double> correlation;
};

/**
 * Circular correlation of alpha and beta at `bins` evenly spaced speeds tau
 * across the observed range R, each pooling samples with speed in
 * [tau - radius_fraction R, tau + radius_fraction R].
 */
inline std::vector<VelocityBin> velocity_binned_correlation(const std::vector<MotionSample>& samples, std::size_t bins = 50,
                                                            double radius_fraction = 0.01) {
  std::vector<VelocityBin> out;
  if (samples.empty() || bins == 0) return out;
  auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end(),
                                            [](const auto& a, const auto& b) { return a.speed < b.speed; });
  const double lo = lo_it->speed, hi = hi_it->speed;
  const double R = hi - lo;
  for (std::size_t b = 0; b < bins; ++b) {
    const double tau = bins == 1 ? lo : lo + R * static_cast<double>(b) / static_cast<double>(bins - 1);
    std::vector<double> a, be;
    for (const auto& s : samples) {
      if (std::fabs(s.speed - tau) <= radius_fraction * R) {
        a.push_back(s.alpha);
        be.push_back(s.beta);
      }
    }
    VelocityBin vb{tau, a.size(), std::nullopt};
    if (a.size() >= 2) vb.correlation = circular_correlation(a, be);
    out.push_back(vb);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forecasting protocol

/// Predicts frames [obs, obs + pred) of every complete agent of a window.
using Forecaster = std::function<ForecastResult(const Window&, std::size_t obs, std::size_t pred)>;

/// Autoregressive model rollout; mean feedback unless `sample_seed` is given.
inline Forecaster model_forecaster(ModelConfig cfg, const ModelWeights& weights,
                                   std::optional<std::uint64_t> sample_seed = std::nullopt) {
  return [cfg, &weights, sample_seed](const Window& window, std::size_t obs, std::size_t pred) {
    if (obs < 1 || pred < 1 || obs + pred > window.length)
      throw std::invalid_argument("forecast: window of " + std::to_string(window.length) + " frames cannot hold " +
                                  std::to_string(obs) + " + " + std::to_string(pred));
    Window w = window;
    w.length = obs + pred;
    for (auto& a : w.agents) a.states.resize(w.length);
    std::optional<Rng> rng;
    if (sample_seed) rng.emplace(*sample_seed);
    ForwardOptions opt;
    opt.rollout = Rollout::autoregressive;
    opt.obs_len = obs;
    opt.sample = sample_seed.has_value();
    opt.rng = rng ? &*rng : nullptr;
    const ForwardResult fr = forward_sequence(cfg, weights, w, opt);
    ForecastResult out;
    out.has_pan = cfg.uses_vislet();
    for (std::size_t i = 0; i < w.agents.size(); ++i) {
      const auto& tr = w.agents[i];
      if (!tr.complete) continue;
      AgentForecast af{tr.agent_id, {}, {}};
      for (std::size_t f = obs; f < obs + pred; ++f) {
        af.predicted.push_back(*fr.agents[i].predicted[f]);
        af.truth.push_back(*tr.states[f]);
      }
      out.agents.push_back(std::move(af));
    }
    return out;
  };
}

/// Returns the ground truth; a reference point for the protocol.
inline Forecaster oracle_forecaster() {
  return [](const Window& window, std::size_t obs, std::size_t pred) {
    ForecastResult out;
    for (const auto& tr : window.agents) {
      if (!tr.complete) continue;
      AgentForecast af{tr.agent_id, {}, {}};
      for (std::size_t f = obs; f < obs + pred; ++f) {
        af.predicted.push_back(*tr.states[f]);
        af.truth.push_back(*tr.states[f]);
      }
      out.agents.push_back(std::move(af));
    }
    return out;
  };
}

/// Pools forecasts over windows; windows without complete agents are skipped.
inline ForecastResult forecast_windows(const Forecaster& fc, const std::vector<Window>& windows, std::size_t obs,
                                       std::size_t pred) {
  ForecastResult all;
  for (const auto& w : windows) {
    if (w.complete_count() == 0) continue;
    all.append(fc(w, obs, pred));
  }
  if (all.agents.empty()) throw std::invalid_argument("forecast: no complete agents in the evaluation set");
  return all;
}

struct HorizonRow {
  std::size_t horizon = 0;
  std::optional<MetricReport> report;
  std::string notice;  // reason when the horizon was skipped
};

/**
 * Evaluates each horizon on the same agents: windows are cut to obs + H, but
 * only agents complete over the whole input window are scored, so every
 * horizon shares one observation set.
 */
inline std::vector<HorizonRow> horizon_sweep(const Forecaster& fc, const std::vector<Window>& windows, std::size_t obs,
                                             const std::vector<std::size_t>& horizons) {
  std::vector<HorizonRow> rows;
  for (std::size_t H : horizons) {
    HorizonRow row{H, std::nullopt, {}};
    std::vector<Window> cut;
    for (const auto& w : windows) {
      if (w.length < obs + H) continue;
      Window t = truncate_window(w, obs + H);
      for (std::size_t i = 0, j = 0; i < w.agents.size() && j < t.agents.size(); ++i) {
        if (w.agents[i].agent_id != t.agents[j].agent_id) continue;
        t.agents[j].complete = t.agents[j].complete && w.agents[i].complete;
        ++j;
      }
      cut.push_back(std::move(t));
    }
    if (cut.empty()) {
      row.notice = "no window holds " + std::to_string(obs) + " + " + std::to_string(H) + " frames";
    } else {
      try {
        row.report = evaluate_metrics(forecast_windows(fc, cut, obs, H));
      } catch (const std::invalid_argument& e) {
        row.notice = e.what();
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct NoiseRow {
  double sigma_deg = 0.0;
  MetricReport report;
};

/// Perturbs observation-window pans by N(0, sigma^2) and re-evaluates; every sigma replays the same noise stream.
inline std::vector<NoiseRow> noise_sweep(const Forecaster& fc, const std::vector<Window>& windows, std::size_t obs,
                                         std::size_t pred, const std::vector<double>& sigmas_deg, std::uint64_t seed) {
  std::vector<NoiseRow> rows;
  for (double sigma : sigmas_deg) {
    Rng rng(seed);
    std::vector<Window> noisy;
    noisy.reserve(windows.size());
    for (const auto& w : windows) noisy.push_back(add_pan_noise(w, sigma, rng, obs));
    rows.push_back({sigma, evaluate_metrics(forecast_windows(fc, noisy, obs, pred))});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// CSV output

/// Shortest round-trip decimal; "nan" for undefined values.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct MetricRow {
  std::string metric;
  std::string variant;
  std::optional<std::size_t> horizon;
  std::optional<double> sigma;
  std::uint64_t seed = 0;
  double value = 0.0;
};

inline constexpr std::string_view kMetricCsvHeader = "metric,variant,horizon,sigma,seed,value";

inline void write_metric_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << kMetricCsvHeader << '\n';
  for (const auto& r : rows) {
    out << r.metric << ',' << r.variant << ',' << (r.horizon ? std::to_string(*r.horizon) : std::string()) << ','
        << (r.sigma ? format_double(*r.sigma) : std::string()) << ',' << r.seed << ',' << format_double(r.value) << '\n';
  }
}

/// mad, fad and e_alpha rows of one report.
inline std::vector<MetricRow> metric_rows(const MetricReport& rep, std::string_view variant, std::optional<std::size_t> horizon,
                                          std::optional<double> sigma, std::uint64_t seed) {
  const std::string v(variant);
  return {{"mad", v, horizon, sigma, seed, rep.mad},
          {"fad", v, horizon, sigma, seed, rep.fad},
          {"e_alpha", v, horizon, sigma, seed, rep.e_alpha}};
}

}  // namespace mxlstm
