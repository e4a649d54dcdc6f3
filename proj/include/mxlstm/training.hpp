#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mxlstm/data.hpp"
#include "mxlstm/model.hpp"

namespace mxlstm {

struct TrainConfig {
  double learning_rate = 0.005;
  double rmsprop_decay = 0.95;
  double epsilon = 1e-8;
  std::size_t epochs = 50;
  double l2_weight = 1e-4;
  double grad_clip = 10.0;  // global-norm bound; 0 disables clipping
  std::uint64_t seed = 42;
  std::size_t obs_len = 8;
  std::size_t pred_len = 12;
  std::size_t window_stride = 0;  // 0 means pred_len (non-overlapping prediction spans)

  void validate() const {
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
    if (!(rmsprop_decay > 0.0 && rmsprop_decay < 1.0)) throw std::invalid_argument("TrainConfig: rmsprop_decay must be in (0, 1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("TrainConfig: epsilon must be positive");
    if (!(l2_weight >= 0.0)) throw std::invalid_argument("TrainConfig: l2_weight must be >= 0");
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("TrainConfig: grad_clip must be >= 0");
    if (obs_len < 1 || pred_len < 1) throw std::invalid_argument("TrainConfig: obs_len and pred_len must be >= 1");
  }

  std::size_t stride() const { return window_stride == 0 ? pred_len : window_stride; }
};

/// Running mean of squared gradients, one entry per weight.
struct OptimizerState {
  ModelWeights mean_square;

  static OptimizerState for_weights(const ModelWeights& w) { return {w.zeros_like()}; }
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& tensor)
      : std::runtime_error("non-finite gradient in tensor " + tensor), tensor_(tensor) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

inline double global_norm(const Gradients& g) { return std::sqrt(g.squared_norm()); }

/// Rescales `g` so its global L2 norm is at most `max_norm`; returns the norm before clipping.
inline double clip_global_norm(Gradients& g, double max_norm) {
  const double norm = global_norm(g);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    g.for_each([s](std::string_view, Matrix& m) { m *= s; });
  }
  return norm;
}

/// s <- rho s + (1 - rho) g^2;  w <- w - lr g / sqrt(s + eps), after optional global-norm clipping.
inline void rmsprop_step(ModelWeights& weights, Gradients grads, OptimizerState& state, const TrainConfig& cfg) {
  grads.for_each([](std::string_view name, const Matrix& m) {
    if (!all_finite(m)) throw NonFiniteGradient(std::string(name));
  });
  clip_global_norm(grads, cfg.grad_clip);

  std::vector<Matrix*> ws, ss;
  weights.for_each([&](std::string_view, Matrix& m) { ws.push_back(&m); });
  state.mean_square.for_each([&](std::string_view, Matrix& m) { ss.push_back(&m); });
  std::size_t k = 0;
  const double rho = cfg.rmsprop_decay;
  grads.for_each([&](std::string_view name, const Matrix& g) {
    Matrix& w = *ws[k];
    Matrix& s = *ss[k];
    ++k;
    if (!w.same_shape(g) || !s.same_shape(g)) throw ShapeError("rmsprop_step: shape mismatch in " + std::string(name));
    for (std::size_t i = 0; i < g.size(); ++i) {
      s[i] = rho * s[i] + (1.0 - rho) * g[i] * g[i];
      w[i] -= cfg.learning_rate * g[i] / std::sqrt(s[i] + cfg.epsilon);
    }
  });
}

/// Training windows of every scene, with the configured stride.
inline std::vector<Window> training_windows(const std::vector<Scene>& scenes, const TrainConfig& cfg) {
  std::vector<Window> out;
  for (const auto& s : scenes) {
    auto w = extract_windows(s, cfg.obs_len, cfg.pred_len, cfg.stride());
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

struct TrainResult {
  ModelWeights weights;
  std::vector<double> epoch_loss;  // mean window loss seen during each epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

/**
 * RMSProp over windows, one window per update, visiting order reshuffled every
 * epoch from the run seed. Deterministic for a fixed seed.
 */
inline TrainResult train(const std::vector<Window>& windows, const ModelConfig& model_cfg, const TrainConfig& cfg,
                         std::optional<ModelWeights> initial = std::nullopt, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  model_cfg.validate();
  if (windows.empty()) throw std::invalid_argument("train: empty dataset");

  Rng root(cfg.seed);
  TrainResult result;
  if (initial) {
    initial->check_shapes(model_cfg);
    result.weights = std::move(*initial);
  } else {
    Rng init_rng(root.derive(1));
    result.weights = ModelWeights::initialize(model_cfg, init_rng);
  }
  OptimizerState opt = OptimizerState::for_weights(result.weights);
  Rng shuffle_rng(root.derive(2));

  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double total = 0.0;
    for (std::size_t idx : order) {
      auto lg = loss_and_gradient(model_cfg, result.weights, windows[idx], cfg.obs_len, cfg.pred_len, cfg.l2_weight);
      total += lg.loss;
      rmsprop_step(result.weights, std::move(lg.grad), opt, cfg);
    }
    const double mean = total / static_cast<double>(windows.size());
    result.epoch_loss.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  return result;
}

/// Loss of one window evaluated from decoded outputs (no tape gradients).
inline double window_loss(const ModelConfig& cfg, const ModelWeights& w, const Window& window, std::size_t obs,
                          std::size_t pred, double l2_weight, Rollout rollout = Rollout::teacher_forced) {
  const Window trimmed = truncate_window(window, obs + pred);
  ForwardOptions opt;
  opt.rollout = rollout;
  opt.obs_len = obs;
  const ForwardResult r = forward_sequence(cfg, w, trimmed, opt);
  return sequence_loss(cfg, r, trimmed, obs, pred, l2_weight, w);
}

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  double tolerance = 0.0;
  bool pass = false;
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps exactly-zero gradients from dividing by zero.
inline double gradient_relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

/**
 * Compares the tape gradient of the window loss against central differences
 * (step h) of the independently evaluated loss, over every weight entry.
 * `corrupt` adds 1 to one analytic entry, as a negative control.
 */
inline GradCheckReport gradient_check(const ModelConfig& cfg, const ModelWeights& weights, const Window& window,
                                      std::size_t obs, std::size_t pred, double l2_weight, double tolerance,
                                      double h = 1e-5, bool corrupt = false) {
  auto lg = loss_and_gradient(cfg, weights, window, obs, pred, l2_weight);
  if (corrupt) {
    bool done = false;
    lg.grad.for_each([&](std::string_view, Matrix& m) {
      if (!done && !m.empty()) {
        m[0] += 1.0;
        done = true;
      }
    });
  }
  GradCheckReport rep;
  rep.tolerance = tolerance;
  ModelWeights probe = weights;
  std::vector<std::pair<std::string, Matrix*>> probes;
  probe.for_each([&](std::string_view n, Matrix& m) { probes.emplace_back(std::string(n), &m); });
  std::size_t k = 0;
  lg.grad.for_each([&](std::string_view, const Matrix& g) {
    auto& [name, m] = probes[k++];
    for (std::size_t i = 0; i < m->size(); ++i) {
      const double orig = (*m)[i];
      (*m)[i] = orig + h;
      const double up = window_loss(cfg, probe, window, obs, pred, l2_weight);
      (*m)[i] = orig - h;
      const double down = window_loss(cfg, probe, window, obs, pred, l2_weight);
      (*m)[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = gradient_relative_error(g[i], numeric);
      ++rep.checked;
      if (rep.worst_tensor.empty() || err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_tensor = name;
        rep.worst_index = i;
        rep.worst_analytic = g[i];
        rep.worst_numeric = numeric;
      }
    }
  });
  rep.pass = rep.max_rel_error < tolerance;
  return rep;
}

/// Small configuration used by gradient checks: every tensor present, cheap to difference.
inline ModelConfig gradient_check_config(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.embedding_dim = 4;
  c.hidden_dim = 5;
  c.grid = PoolingGrid{4, 2.0};
  c.frustum = FrustumSpec{deg2rad(90.0), 2.0};
  return c;
}

/**
 * Two agents walking towards each other so each sits in the other's frustum
 * and pooling grid; small seeded jitter keeps the scene generic.
 */
inline Window gradient_check_scene(Rng& rng, std::size_t obs = 4, std::size_t pred = 3) {
  const std::size_t T = obs + pred;
  Window w{0, T, {}};
  for (int a = 0; a < 2; ++a) {
    WindowTrack tr{a + 1, std::vector<std::optional<AgentState>>(T), true};
    const double dir = a == 0 ? 1.0 : -1.0;
    for (std::size_t t = 0; t < T; ++t) {
      const double x = (a == 0 ? -0.9 : 0.9) + dir * 0.12 * static_cast<double>(t) + 0.05 * rng.normal();
      const double y = (a == 0 ? -0.2 : 0.2) + 0.05 * rng.normal();
      const double pan = (a == 0 ? 0.0 : std::numbers::pi) + 0.2 * rng.normal();
      tr.states[t] = AgentState{{x, y}, normalize_angle(pan)};
    }
    w.agents.push_back(std::move(tr));
  }
  return w;
}

}  // namespace mxlstm
