#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mxlstm {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline double deg2rad(double deg) { return deg * std::numbers::pi / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// Maps any angle to [0, 2*pi). Identity on values already in range.
inline double normalize_angle(double a) {
  if (a >= 0.0 && a < kTwoPi) return a;
  double r = std::fmod(a, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  if (r >= kTwoPi) r = 0.0;  // -tiny + 2pi rounds up to 2pi
  return r;
}

/// Absolute angular difference on the circle, in [0, pi].
inline double wrapped_difference(double a, double b) {
  double d = std::fmod(std::fabs(a - b), kTwoPi);
  return d > std::numbers::pi ? kTwoPi - d : d;
}

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2, Vec2) = default;

  double norm() const { return std::hypot(x, y); }
  double angle() const { return std::atan2(y, x); }
};

inline Vec2 unit_vector(double angle) { return {std::cos(angle), std::sin(angle)}; }

/// Ground-plane position plus head pan (radians, counterclockwise from +x, in [0, 2*pi)).
struct AgentState {
  Vec2 position;
  double pan = 0.0;

  friend bool operator==(const AgentState&, const AgentState&) = default;
};

/// Vislet anchor: the point at distance r along the head orientation.
inline Vec2 vislet_anchor(const AgentState& s, double r) {
  if (!(r > 0.0)) throw std::invalid_argument("vislet_anchor: anchor distance must be positive");
  return {s.position.x + r * std::cos(s.pan), s.position.y + r * std::sin(s.pan)};
}

/// Circular sector of full aperture `aperture` (radians) and radius `depth` (meters).
struct FrustumSpec {
  double aperture = deg2rad(40.0);
  double depth = 2.0;

  void validate() const {
    // A full 2*pi aperture is allowed: it degenerates to a disc.
    if (!(aperture > 0.0 && aperture <= kTwoPi)) throw std::invalid_argument("FrustumSpec: aperture must be in (0, 2*pi]");
    if (!(depth > 0.0)) throw std::invalid_argument("FrustumSpec: depth must be positive");
  }
};

/// True iff `other` lies in the observer's view frustum. The observer's own position is excluded.
inline bool in_frustum(const AgentState& observer, Vec2 other, const FrustumSpec& spec) {
  const Vec2 v = other - observer.position;
  const double dist = v.norm();
  if (dist == 0.0 || dist > spec.depth) return false;
  return wrapped_difference(v.angle(), observer.pan) <= 0.5 * spec.aperture;
}

/**
 * Square neighbourhood of side 2*half_extent centred on the agent, split into
 * cells_per_side^2 uniform cells. Displacements in [-h, h)^2 map to
 * floor((d + h) / cell) per axis; a point on an inner cell boundary lands in
 * the higher-index cell and anything at +h or beyond is dropped.
 */
struct PoolingGrid {
  std::size_t cells_per_side = 32;
  double half_extent = 2.0;

  void validate() const {
    if (cells_per_side == 0) throw std::invalid_argument("PoolingGrid: cells_per_side must be positive");
    if (!(half_extent > 0.0)) throw std::invalid_argument("PoolingGrid: half_extent must be positive");
  }

  double side_length() const { return 2.0 * half_extent; }
  double cell_size() const { return side_length() / static_cast<double>(cells_per_side); }
  std::size_t cell_count() const { return cells_per_side * cells_per_side; }

  std::optional<std::size_t> axis_index(double delta) const {
    if (!(delta >= -half_extent && delta < half_extent)) return std::nullopt;
    auto idx = static_cast<std::size_t>(std::floor((delta + half_extent) / cell_size()));
    if (idx >= cells_per_side) idx = cells_per_side - 1;
    return idx;
  }

  /// Flattened cell index m * N + n, where m indexes x and n indexes y.
  std::optional<std::size_t> cell_of(Vec2 displacement) const {
    auto m = axis_index(displacement.x);
    auto n = axis_index(displacement.y);
    if (!m || !n) return std::nullopt;
    return *m * cells_per_side + *n;
  }
};

enum class PoolingMode { frustum, all, none };

struct PoolingAssignment {
  std::size_t agent = 0;
  std::size_t cell = 0;
};

/// Neighbours of `observer` that contribute to its social tensor, in index order.
inline std::vector<PoolingAssignment> pooling_assignments(std::size_t observer, std::span<const AgentState> agents,
                                                          const PoolingGrid& grid, const FrustumSpec& spec,
                                                          PoolingMode mode) {
  if (observer >= agents.size()) throw std::out_of_range("pooling_assignments: observer index out of range");
  std::vector<PoolingAssignment> out;
  if (mode == PoolingMode::none) return out;
  const AgentState& self = agents[observer];
  for (std::size_t j = 0; j < agents.size(); ++j) {
    if (j == observer) continue;
    if (mode == PoolingMode::frustum && !in_frustum(self, agents[j].position, spec)) continue;
    if (auto cell = grid.cell_of(agents[j].position - self.position)) out.push_back({j, *cell});
  }
  return out;
}

/// N_o x N_o x D tensor of summed neighbour hidden states, stored flat as [(m * N_o + n) * D + k].
struct SocialTensor {
  std::size_t cells_per_side = 0;
  std::size_t depth = 0;
  std::vector<double> values;

  double at(std::size_t m, std::size_t n, std::size_t k) const {
    return values[(m * cells_per_side + n) * depth + k];
  }
  bool is_zero() const {
    for (double v : values)
      if (v != 0.0) return false;
    return true;
  }
};

inline SocialTensor pool_social_tensor(std::size_t observer, std::span<const AgentState> agents,
                                       const std::map<std::size_t, std::vector<double>>& hidden_states,
                                       std::size_t hidden_dim, const PoolingGrid& grid, const FrustumSpec& spec,
                                       PoolingMode mode) {
  grid.validate();
  SocialTensor out{grid.cells_per_side, hidden_dim, std::vector<double>(grid.cell_count() * hidden_dim, 0.0)};
  for (const auto& a : pooling_assignments(observer, agents, grid, spec, mode)) {
    auto it = hidden_states.find(a.agent);
    if (it == hidden_states.end()) {
      throw std::invalid_argument("pool_social_tensor: no hidden state for eligible agent " + std::to_string(a.agent));
    }
    if (it->second.size() != hidden_dim) throw std::invalid_argument("pool_social_tensor: hidden state has wrong length");
    double* cell = &out.values[a.cell * hidden_dim];
    for (std::size_t k = 0; k < hidden_dim; ++k) cell[k] += it->second[k];
  }
  return out;
}

}  // namespace mxlstm
