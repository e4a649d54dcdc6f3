#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "mxlstm/geometry.hpp"

namespace mxlstm {

struct TrackPoint {
  std::int64_t frame = 0;
  AgentState state;

  friend bool operator==(const TrackPoint&, const TrackPoint&) = default;
};

/// One pedestrian's tracklet and pan over time, frames strictly increasing.
/// Frames missing from the annotation are simply absent (no interpolation).
struct AgentTrack {
  std::int64_t agent_id = 0;
  std::vector<TrackPoint> points;

  const AgentState* at(std::int64_t frame) const {
    auto it = std::lower_bound(points.begin(), points.end(), frame,
                               [](const TrackPoint& p, std::int64_t f) { return p.frame < f; });
    return (it != points.end() && it->frame == frame) ? &it->state : nullptr;
  }

  friend bool operator==(const AgentTrack&, const AgentTrack&) = default;
};

/// All tracks of one recording on a common frame grid of period `timestep` seconds.
struct Scene {
  double timestep = 0.4;
  std::vector<AgentTrack> tracks;

  std::optional<std::int64_t> first_frame() const {
    std::optional<std::int64_t> f;
    for (const auto& t : tracks)
      if (!t.points.empty()) f = f ? std::min(*f, t.points.front().frame) : t.points.front().frame;
    return f;
  }
  std::optional<std::int64_t> last_frame() const {
    std::optional<std::int64_t> f;
    for (const auto& t : tracks)
      if (!t.points.empty()) f = f ? std::max(*f, t.points.back().frame) : t.points.back().frame;
    return f;
  }

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// One agent's states over a window; `complete` iff present at every frame.
struct WindowTrack {
  std::int64_t agent_id = 0;
  std::vector<std::optional<AgentState>> states;
  bool complete = false;
};

/**
 * A slice of a scene. Incomplete agents stay in the window as pooling
 * context but never contribute to a loss or a metric.
 */
struct Window {
  std::int64_t start_frame = 0;
  std::size_t length = 0;
  std::vector<WindowTrack> agents;

  std::size_t complete_count() const {
    return static_cast<std::size_t>(std::count_if(agents.begin(), agents.end(), [](const auto& a) { return a.complete; }));
  }
};

/// First `length` frames of `w`, with completeness recomputed.
inline Window truncate_window(const Window& w, std::size_t length) {
  Window out{w.start_frame, std::min(length, w.length), {}};
  for (const auto& a : w.agents) {
    WindowTrack t{a.agent_id, {a.states.begin(), a.states.begin() + static_cast<std::ptrdiff_t>(out.length)}, false};
    t.complete = std::all_of(t.states.begin(), t.states.end(), [](const auto& s) { return s.has_value(); });
    if (std::any_of(t.states.begin(), t.states.end(), [](const auto& s) { return s.has_value(); }))
      out.agents.push_back(std::move(t));
  }
  return out;
}

}  // namespace mxlstm
