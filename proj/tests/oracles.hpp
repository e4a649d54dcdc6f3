#pragma once

// Independent reference computations used by the unit and acceptance tests.
// They deliberately take different routes from the library code.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <numbers>
#include <vector>

#include "mxlstm/mxlstm.hpp"

namespace oracle {

using namespace mxlstm;

/// Membership via the arc cosine of the normalized dot product.
inline bool in_sector(Vec2 observer, double pan, Vec2 other, double aperture, double depth) {
  const double dx = other.x - observer.x, dy = other.y - observer.y;
  const double dist = std::sqrt(dx * dx + dy * dy);
  if (dist == 0.0 || dist > depth) return false;
  const double c = std::clamp((dx * std::cos(pan) + dy * std::sin(pan)) / dist, -1.0, 1.0);
  return std::acos(c) <= aperture / 2.0;
}

/// Scans every cell interval instead of dividing.
inline std::vector<double> brute_force_pool(std::size_t observer, const std::vector<AgentState>& agents,
                                            const std::map<std::size_t, std::vector<double>>& hidden, std::size_t D,
                                            std::size_t N, double half, double aperture, double depth, PoolingMode mode) {
  std::vector<double> out(N * N * D, 0.0);
  if (mode == PoolingMode::none) return out;
  const double cell = 2.0 * half / static_cast<double>(N);
  for (std::size_t j = 0; j < agents.size(); ++j) {
    if (j == observer) continue;
    const Vec2 o = agents[observer].position, p = agents[j].position;
    if (mode == PoolingMode::frustum && !in_sector(o, agents[observer].pan, p, aperture, depth)) continue;
    const double dx = p.x - o.x, dy = p.y - o.y;
    for (std::size_t m = 0; m < N; ++m) {
      const double x0 = -half + cell * static_cast<double>(m);
      if (!(dx >= x0 && dx < x0 + cell) && !(m == N - 1 && dx >= x0 && dx < half)) continue;
      for (std::size_t n = 0; n < N; ++n) {
        const double y0 = -half + cell * static_cast<double>(n);
        if (!(dy >= y0 && dy < y0 + cell) && !(n == N - 1 && dy >= y0 && dy < half)) continue;
        const auto& h = hidden.at(j);
        for (std::size_t k = 0; k < D; ++k) out[(m * N + n) * D + k] += h[k];
      }
    }
  }
  return out;
}

/// Sigma = L^T L built entry by entry from theta.
inline Eigen::Matrix4d covariance(const std::array<double, 10>& theta) {
  Eigen::Matrix4d L = Eigen::Matrix4d::Zero();
  int k = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j, ++k) L(i, j) = i == j ? std::exp(theta[k]) : theta[k];
  return L.transpose() * L;
}

/// -log N(x; mu, Sigma) with an explicit inverse and determinant.
inline double nll_explicit(const Vec4& x, const Vec4& mu, const std::array<double, 10>& theta) {
  const Eigen::Matrix4d S = covariance(theta);
  Eigen::Vector4d d;
  for (int i = 0; i < 4; ++i) d(i) = x[i] - mu[i];
  const double m = d.dot(S.inverse() * d);
  return 0.5 * (4.0 * std::log(2.0 * std::numbers::pi) + std::log(S.determinant()) + m);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Textbook LSTM cell with gate blocks i, f, g, o over [input; h].
inline LstmState lstm_cell(const LstmState& s, const Matrix& input, const Matrix& W, const Matrix& b) {
  const std::size_t D = s.h.rows(), I = input.rows();
  std::vector<double> z(4 * D);
  for (std::size_t r = 0; r < 4 * D; ++r) {
    double acc = b[r];
    for (std::size_t c = 0; c < I; ++c) acc += W(r, c) * input[c];
    for (std::size_t c = 0; c < D; ++c) acc += W(r, I + c) * s.h[c];
    z[r] = acc;
  }
  LstmState out{Matrix(D, 1), Matrix(D, 1)};
  for (std::size_t k = 0; k < D; ++k) {
    const double i = sigmoid(z[k]), f = sigmoid(z[D + k]), g = std::tanh(z[2 * D + k]), o = sigmoid(z[3 * D + k]);
    out.c[k] = f * s.c[k] + i * g;
    out.h[k] = o * std::tanh(out.c[k]);
  }
  return out;
}

/// Random scene of `n` agents scattered around the origin.
inline std::vector<AgentState> random_agents(Rng& rng, std::size_t n, double spread) {
  std::vector<AgentState> a(n);
  for (auto& s : a) s = {{rng.uniform(-spread, spread), rng.uniform(-spread, spread)}, rng.uniform(0.0, kTwoPi)};
  return a;
}

}  // namespace oracle
