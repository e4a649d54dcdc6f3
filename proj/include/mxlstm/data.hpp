#pragma once

// Annotation ingestion, temporal downsampling, window extraction and
// synthetic scene generation.
//
// Canonical annotation format: UTF-8 text, one record per line,
//   frame <TAB> agent_id <TAB> x <TAB> y <TAB> pan_deg
// with x, y in meters and pan in degrees (counterclockwise from +x).
// Lines starting with '#' and blank lines are ignored.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <numbers>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "mxlstm/geometry.hpp"
#include "mxlstm/scene.hpp"
#include "mxlstm/tensor.hpp"

namespace mxlstm {

struct RawAnnotation {
  std::int64_t frame = 0;
  std::int64_t agent_id = 0;
  double x = 0.0;
  double y = 0.0;
  double pan_deg = 0.0;

  friend bool operator==(const RawAnnotation&, const RawAnnotation&) = default;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct ParseResult {
  std::vector<RawAnnotation> records;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  while (!s.empty() && (s.front() == ' ')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

}  // namespace detail

/// Parses the canonical TSV. Duplicate (frame, agent_id) pairs and malformed lines throw ParseError.
inline ParseResult parse_annotations(std::istream& in) {
  ParseResult out;
  std::map<std::pair<std::int64_t, std::int64_t>, std::size_t> first_line;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view view(line);
    if (!view.empty() && view.back() == '\r') view.remove_suffix(1);
    if (lineno == 1 && view.starts_with("\xEF\xBB\xBF")) view.remove_prefix(3);
    if (view.empty() || view.front() == '#') continue;
    if (view.find_first_not_of(" \t") == std::string_view::npos) continue;

    const auto fields = detail::split_tabs(view);
    if (fields.size() != 5) {
      throw ParseError(lineno, "expected 5 tab-separated fields, found " + std::to_string(fields.size()));
    }
    const auto frame = detail::parse_number<std::int64_t>(fields[0]);
    const auto id = detail::parse_number<std::int64_t>(fields[1]);
    const auto x = detail::parse_number<double>(fields[2]);
    const auto y = detail::parse_number<double>(fields[3]);
    const auto pan = detail::parse_number<double>(fields[4]);
    if (!frame) throw ParseError(lineno, "frame is not an integer");
    if (!id) throw ParseError(lineno, "agent_id is not an integer");
    if (!x || !y || !pan) throw ParseError(lineno, "x, y and pan must be numbers");
    if (!std::isfinite(*x) || !std::isfinite(*y) || !std::isfinite(*pan)) throw ParseError(lineno, "non-finite value");

    const auto key = std::make_pair(*frame, *id);
    if (auto it = first_line.find(key); it != first_line.end()) {
      throw ParseError(lineno, "duplicate record for frame " + std::to_string(*frame) + ", agent " +
                                   std::to_string(*id) + " (first seen on line " + std::to_string(it->second) + ")");
    }
    first_line.emplace(key, lineno);

    double pan_deg = *pan;
    if (pan_deg < 0.0 || pan_deg >= 360.0) {
      pan_deg = std::fmod(pan_deg, 360.0);
      if (pan_deg < 0.0) pan_deg += 360.0;
      if (pan_deg >= 360.0) pan_deg = 0.0;
      out.warnings.push_back("line " + std::to_string(lineno) + ": pan " + std::string(fields[4]) +
                             " normalized to [0, 360)");
    }
    out.records.push_back({*frame, *id, *x, *y, pan_deg});
  }
  return out;
}

/// Canonical writer: sorted by (frame, agent_id), shortest round-trip decimal formatting.
inline void write_annotations(std::ostream& out, std::span<const RawAnnotation> records) {
  std::vector<RawAnnotation> sorted(records.begin(), records.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    return std::tie(a.frame, a.agent_id) < std::tie(b.frame, b.agent_id);
  });
  out << "# frame\tagent_id\tx\ty\tpan_deg\n";
  char buf[64];
  auto num = [&](double v) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
  };
  for (const auto& r : sorted) {
    out << r.frame << '\t' << r.agent_id << '\t' << num(r.x) << '\t' << num(r.y) << '\t' << num(r.pan_deg) << '\n';
  }
}

inline std::vector<RawAnnotation> scene_to_annotations(const Scene& scene) {
  std::vector<RawAnnotation> out;
  for (const auto& t : scene.tracks) {
    for (const auto& p : t.points) {
      double deg = rad2deg(p.state.pan);
      if (deg >= 360.0) deg = 0.0;
      out.push_back({p.frame, t.agent_id, p.state.position.x, p.state.position.y, deg});
    }
  }
  return out;
}

/**
 * Keeps every (source_fps / target_fps)-th frame counted from the earliest
 * frame and re-indexes kept frames consecutively from 0. Positions are copied
 * untouched; nothing is interpolated.
 */
inline Scene downsample(std::span<const RawAnnotation> records, double source_fps, double target_fps = 2.5) {
  if (!(source_fps > 0.0) || !(target_fps > 0.0)) throw std::invalid_argument("downsample: frame rates must be positive");
  const double ratio = source_fps / target_fps;
  const double rounded = std::round(ratio);
  if (rounded < 1.0 || std::fabs(ratio - rounded) > 1e-9 * ratio) {
    throw std::invalid_argument("downsample: source rate " + std::to_string(source_fps) +
                                " is not an integer multiple of target rate " + std::to_string(target_fps));
  }
  const auto step = static_cast<std::int64_t>(rounded);
  Scene scene;
  scene.timestep = 1.0 / target_fps;
  if (records.empty()) return scene;
  std::int64_t first = records.front().frame;
  for (const auto& r : records) first = std::min(first, r.frame);

  std::map<std::int64_t, AgentTrack> tracks;
  for (const auto& r : records) {
    if ((r.frame - first) % step != 0) continue;
    auto& t = tracks[r.agent_id];
    t.agent_id = r.agent_id;
    t.points.push_back({(r.frame - first) / step, {{r.x, r.y}, normalize_angle(deg2rad(r.pan_deg))}});
  }
  for (auto& [id, t] : tracks) {
    std::sort(t.points.begin(), t.points.end(), [](const auto& a, const auto& b) { return a.frame < b.frame; });
    scene.tracks.push_back(std::move(t));
  }
  return scene;
}

/**
 * Every slice of T_obs + T_pred consecutive frames starting at the first frame
 * and advancing by `stride`. A window is emitted iff at least one agent is
 * present in all of its frames.
 */
inline std::vector<Window> extract_windows(const Scene& scene, std::size_t obs_len, std::size_t pred_len, std::size_t stride) {
  if (stride < 1) throw std::invalid_argument("extract_windows: stride must be >= 1");
  if (obs_len < 1 || pred_len < 1) throw std::invalid_argument("extract_windows: lengths must be >= 1");
  std::vector<Window> out;
  const auto first = scene.first_frame();
  const auto last = scene.last_frame();
  if (!first) return out;
  const auto len = static_cast<std::int64_t>(obs_len + pred_len);
  for (std::int64_t start = *first; start + len - 1 <= *last; start += static_cast<std::int64_t>(stride)) {
    Window w{start, static_cast<std::size_t>(len), {}};
    for (const auto& t : scene.tracks) {
      WindowTrack wt{t.agent_id, std::vector<std::optional<AgentState>>(w.length), true};
      bool any = false;
      for (std::int64_t f = 0; f < len; ++f) {
        if (const AgentState* s = t.at(start + f)) {
          wt.states[static_cast<std::size_t>(f)] = *s;
          any = true;
        } else {
          wt.complete = false;
        }
      }
      if (any) w.agents.push_back(std::move(wt));
    }
    if (w.complete_count() > 0) out.push_back(std::move(w));
  }
  return out;
}

enum class SyntheticKind { linear, turn_with_gaze, conversational_group, crossing };

inline std::optional<SyntheticKind> parse_synthetic_kind(std::string_view s) {
  if (s == "linear") return SyntheticKind::linear;
  if (s == "turn_with_gaze") return SyntheticKind::turn_with_gaze;
  if (s == "conversational_group") return SyntheticKind::conversational_group;
  if (s == "crossing") return SyntheticKind::crossing;
  return std::nullopt;
}

struct SyntheticParams {
  std::size_t num_agents = 3;
  std::size_t num_frames = 20;
  double timestep = 0.4;
  double speed_min = 0.8;  // m/s
  double speed_max = 1.6;
  double area = 10.0;             // start positions uniform in [-area/2, area/2]^2
  double position_jitter = 0.0;   // std of additive positional noise, meters
  std::size_t gaze_lead = 3;      // turn_with_gaze: pan anticipates motion by this many steps
  std::size_t turn_frame_min = 8; // turn_with_gaze: first step with the new heading
  std::size_t turn_frame_max = 10;
  double turn_angle_min_deg = 45.0;
  double turn_angle_max_deg = 90.0;
  double group_radius = 0.8;          // conversational_group
  double group_drift = 0.03;          // m/s
  double pan_oscillation_deg = 30.0;  // amplitude around the group centre direction
  double pan_period_frames = 10.0;
  double lane_spread = 1.0;  // crossing: lateral offset range, meters

  void validate(SyntheticKind kind) const {
    if (num_agents == 0 || num_frames == 0) throw std::invalid_argument("synthetic: need at least one agent and frame");
    if (!(timestep > 0.0)) throw std::invalid_argument("synthetic: timestep must be positive");
    if (!(speed_min >= 0.0 && speed_max >= speed_min)) throw std::invalid_argument("synthetic: bad speed range");
    if (!(area >= 0.0) || !(position_jitter >= 0.0)) throw std::invalid_argument("synthetic: area and jitter must be >= 0");
    if (kind == SyntheticKind::turn_with_gaze && turn_frame_max < turn_frame_min)
      throw std::invalid_argument("synthetic: bad turn frame range");
    if (kind == SyntheticKind::conversational_group && !(pan_period_frames > 0.0))
      throw std::invalid_argument("synthetic: pan period must be positive");
  }
};

/// Deterministic under a fixed rng state.
inline Scene generate_synthetic(SyntheticKind kind, const SyntheticParams& p, Rng& rng) {
  p.validate(kind);
  Scene scene;
  scene.timestep = p.timestep;
  const auto T = p.num_frames;
  auto random_start = [&] { return Vec2{rng.uniform(-0.5, 0.5) * p.area, rng.uniform(-0.5, 0.5) * p.area}; };

  const Vec2 centre = kind == SyntheticKind::conversational_group ? random_start() : Vec2{};

  for (std::size_t a = 0; a < p.num_agents; ++a) {
    AgentTrack track;
    track.agent_id = static_cast<std::int64_t>(a + 1);
    std::vector<Vec2> pos(T);
    std::vector<double> pan(T);

    switch (kind) {
      case SyntheticKind::linear: {
        const double heading = rng.uniform(0.0, kTwoPi);
        const double speed = rng.uniform(p.speed_min, p.speed_max);
        const Vec2 start = random_start();
        for (std::size_t t = 0; t < T; ++t) {
          pos[t] = start + (static_cast<double>(t) * speed * p.timestep) * unit_vector(heading);
          pan[t] = heading;
        }
        break;
      }
      case SyntheticKind::turn_with_gaze: {
        const double h0 = rng.uniform(0.0, kTwoPi);
        const double speed = rng.uniform(p.speed_min, p.speed_max);
        const auto turn = p.turn_frame_min + rng.index(p.turn_frame_max - p.turn_frame_min + 1);
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        const double h1 = h0 + sign * deg2rad(rng.uniform(p.turn_angle_min_deg, p.turn_angle_max_deg));
        // heading(t): direction of the step from frame t to t + 1
        auto heading = [&](std::size_t t) { return t < turn ? h0 : h1; };
        pos[0] = random_start();
        for (std::size_t t = 1; t < T; ++t) pos[t] = pos[t - 1] + (speed * p.timestep) * unit_vector(heading(t - 1));
        for (std::size_t t = 0; t < T; ++t) pan[t] = heading(t + p.gaze_lead);
        break;
      }
      case SyntheticKind::conversational_group: {
        const double slot = kTwoPi * static_cast<double>(a) / static_cast<double>(p.num_agents);
        const Vec2 home = centre + p.group_radius * unit_vector(slot);
        const Vec2 drift = (rng.uniform(0.0, p.group_drift) * p.timestep) * unit_vector(rng.uniform(0.0, kTwoPi));
        const double phase = rng.uniform(0.0, kTwoPi);
        for (std::size_t t = 0; t < T; ++t) {
          pos[t] = home + static_cast<double>(t) * drift;
          const double to_centre = (centre - pos[t]).angle();
          pan[t] = to_centre + deg2rad(p.pan_oscillation_deg) *
                                   std::sin(kTwoPi * static_cast<double>(t) / p.pan_period_frames + phase);
        }
        break;
      }
      case SyntheticKind::crossing: {
        const bool eastbound = a % 2 == 0;
        const double heading = eastbound ? 0.0 : 0.5 * std::numbers::pi;
        const double speed = rng.uniform(p.speed_min, p.speed_max);
        const double lane = rng.uniform(-0.5, 0.5) * p.lane_spread;
        const double half_path = 0.5 * speed * p.timestep * static_cast<double>(T - 1);
        const Vec2 start = eastbound ? Vec2{-half_path, lane} : Vec2{lane, -half_path};
        for (std::size_t t = 0; t < T; ++t) {
          pos[t] = start + (static_cast<double>(t) * speed * p.timestep) * unit_vector(heading);
          pan[t] = heading;
        }
        break;
      }
    }

    for (std::size_t t = 0; t < T; ++t) {
      Vec2 q = pos[t];
      if (p.position_jitter > 0.0) q = q + Vec2{p.position_jitter * rng.normal(), p.position_jitter * rng.normal()};
      track.points.push_back({static_cast<std::int64_t>(t), {q, normalize_angle(pan[t])}});
    }
    scene.tracks.push_back(std::move(track));
  }
  return scene;
}

/// Adds N(0, sigma_deg^2) to every pan; positions are untouched.
inline Scene add_pan_noise(const Scene& scene, double sigma_deg, Rng& rng) {
  if (!(sigma_deg >= 0.0)) throw std::invalid_argument("add_pan_noise: sigma must be >= 0");
  Scene out = scene;
  const double sigma = deg2rad(sigma_deg);
  for (auto& t : out.tracks)
    for (auto& p : t.points) p.state.pan = normalize_angle(p.state.pan + sigma * rng.normal());
  return out;
}

/// Window flavour: perturbs pans only within the first `frames` frames (the observation period).
inline Window add_pan_noise(const Window& window, double sigma_deg, Rng& rng, std::size_t frames) {
  if (!(sigma_deg >= 0.0)) throw std::invalid_argument("add_pan_noise: sigma must be >= 0");
  Window out = window;
  const double sigma = deg2rad(sigma_deg);
  for (auto& a : out.agents)
    for (std::size_t f = 0; f < std::min(frames, a.states.size()); ++f)
      if (a.states[f]) a.states[f]->pan = normalize_angle(a.states[f]->pan + sigma * rng.normal());
  return out;
}

}  // namespace mxlstm
