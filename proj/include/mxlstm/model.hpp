#pragma once

// The joint tracklet/vislet forecaster.
//
// Per agent and frame t the network consumes
//   e_x = ReLU(W_x u_x + b_x)    position input
//   e_a = ReLU(W_a u_a + b_a)    vislet input (all variants but vanilla)
//   e_H = ReLU(W_H H + b_H)      social tensor built from neighbours' h_{t-1}
// concatenated with the previous hidden state into one LSTM step (gate order
// i, f, g, o). The head W_o h_t + b_o parameterises the distribution of the
// agent's position and anchor at frame t+1.
//
// Coordinate frames. In the relative frame (default) u_x is the last
// displacement x_t - x_{t-1} (zero on an agent's first frame), u_a is the
// anchor offset a_t - x_t, and predicted means are offsets from x_t. In the
// absolute frame u_x = x_t, u_a = a_t and the head emits absolute means.
// Both describe the same distribution over absolute coordinates.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "mxlstm/autodiff.hpp"
#include "mxlstm/gaussian.hpp"
#include "mxlstm/geometry.hpp"
#include "mxlstm/scene.hpp"
#include "mxlstm/tensor.hpp"

namespace mxlstm {

enum class Variant { full, block_diagonal, no_frustum, individual, pace, vanilla };

inline constexpr std::array<Variant, 6> kAllVariants{Variant::full,       Variant::block_diagonal, Variant::no_frustum,
                                                     Variant::individual, Variant::pace,           Variant::vanilla};

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::block_diagonal: return "block_diagonal";
    case Variant::no_frustum: return "no_frustum";
    case Variant::individual: return "individual";
    case Variant::pace: return "pace";
    case Variant::vanilla: return "vanilla";
  }
  return "unknown";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  for (Variant v : kAllVariants)
    if (s == variant_name(v)) return v;
  if (s == "bd" || s == "blockdiagonal") return Variant::block_diagonal;
  if (s == "nofrustum") return Variant::no_frustum;
  return std::nullopt;
}

enum class CoordinateFrame { relative, absolute };

struct ModelConfig {
  Variant variant = Variant::full;
  std::size_t embedding_dim = 64;
  std::size_t hidden_dim = 128;
  PoolingGrid grid{32, 2.0};
  FrustumSpec frustum{deg2rad(40.0), 2.0};
  double anchor_distance = 0.5;
  CoordinateFrame frame = CoordinateFrame::relative;

  void validate() const {
    if (embedding_dim == 0 || hidden_dim == 0) throw std::invalid_argument("ModelConfig: dimensions must be positive");
    if (!(anchor_distance > 0.0)) throw std::invalid_argument("ModelConfig: anchor distance must be positive");
    grid.validate();
    frustum.validate();
  }

  bool uses_vislet() const { return variant != Variant::vanilla; }
  bool uses_pooling() const { return variant != Variant::individual && variant != Variant::vanilla; }

  PoolingMode pooling_mode() const {
    if (!uses_pooling()) return PoolingMode::none;
    return variant == Variant::no_frustum ? PoolingMode::all : PoolingMode::frustum;
  }

  std::size_t lstm_input_dim() const {
    return embedding_dim * (1 + (uses_vislet() ? 1 : 0) + (uses_pooling() ? 1 : 0));
  }
  std::size_t pooled_dim() const { return grid.cell_count() * hidden_dim; }

  /// Head width: 4 means + 10 theta, 2 x (2 means, 2 log-sigmas, 1 raw rho), or one bivariate.
  std::size_t head_dim() const {
    switch (variant) {
      case Variant::block_diagonal: return 10;
      case Variant::vanilla: return 5;
      default: return 14;
    }
  }
};

/// Every trainable tensor. Tensors a variant does not use are 0x0.
struct ModelWeights {
  Matrix W_x, b_x;
  Matrix W_a, b_a;
  Matrix W_H, b_H;
  Matrix W_lstm, b_lstm;
  Matrix W_o, b_o;

  template <typename F>
  void for_each(F&& f) {
    f("W_x", W_x), f("b_x", b_x), f("W_a", W_a), f("b_a", b_a), f("W_H", W_H), f("b_H", b_H);
    f("W_lstm", W_lstm), f("b_lstm", b_lstm), f("W_o", W_o), f("b_o", b_o);
  }
  template <typename F>
  void for_each(F&& f) const {
    f("W_x", W_x), f("b_x", b_x), f("W_a", W_a), f("b_a", b_a), f("W_H", W_H), f("b_H", b_H);
    f("W_lstm", W_lstm), f("b_lstm", b_lstm), f("W_o", W_o), f("b_o", b_o);
  }

  Matrix* find(std::string_view name) {
    Matrix* out = nullptr;
    for_each([&](std::string_view n, Matrix& m) {
      if (n == name) out = &m;
    });
    return out;
  }

  /// (rows, cols) of every tensor in visiting order.
  static std::array<std::pair<std::size_t, std::size_t>, 10> shapes(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t E = cfg.embedding_dim;
    const std::size_t D = cfg.hidden_dim;
    const std::size_t ea = cfg.uses_vislet() ? E : 0;
    const std::size_t eh = cfg.uses_pooling() ? E : 0;
    return {{{E, 2},
             {E, 1},
             {ea, ea ? 2 : 0},
             {ea, ea ? 1 : 0},
             {eh, eh ? cfg.pooled_dim() : 0},
             {eh, eh ? 1 : 0},
             {4 * D, cfg.lstm_input_dim() + D},
             {4 * D, 1},
             {cfg.head_dim(), D},
             {cfg.head_dim(), 1}}};
  }

  static ModelWeights zeros(const ModelConfig& cfg) {
    const auto sh = shapes(cfg);
    ModelWeights w;
    std::size_t k = 0;
    w.for_each([&](std::string_view, Matrix& m) {
      m = Matrix(sh[k].first, sh[k].second);
      ++k;
    });
    return w;
  }

  /// Uniform(-scale, scale) everywhere, forget-gate bias set to `forget_bias`.
  static ModelWeights initialize(const ModelConfig& cfg, Rng& rng, double scale = 0.08, double forget_bias = 1.0) {
    ModelWeights w = zeros(cfg);
    w.for_each([&](std::string_view, Matrix& m) {
      for (auto& v : m.values()) v = rng.uniform(-scale, scale);
    });
    const std::size_t D = cfg.hidden_dim;
    for (std::size_t k = D; k < 2 * D; ++k) w.b_lstm[k] = forget_bias;
    return w;
  }

  ModelWeights zeros_like() const {
    ModelWeights z = *this;
    z.for_each([](std::string_view, Matrix& m) { m.fill(0.0); });
    return z;
  }

  double squared_norm() const {
    double s = 0.0;
    for_each([&](std::string_view, const Matrix& m) { s += mxlstm::squared_norm(m); });
    return s;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](std::string_view, const Matrix& m) { n += m.size(); });
    return n;
  }

  /// Throws if any tensor shape disagrees with what `cfg` requires.
  void check_shapes(const ModelConfig& cfg) const {
    const auto sh = shapes(cfg);
    std::size_t k = 0;
    for_each([&](std::string_view n, const Matrix& m) {
      if (m.rows() != sh[k].first || m.cols() != sh[k].second) {
        throw ShapeError("ModelWeights: tensor " + std::string(n) + " is " + m.shape_string() +
                         ", configuration requires " + Matrix::shape_string(sh[k].first, sh[k].second));
      }
      ++k;
    });
  }

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

using Gradients = ModelWeights;

struct LstmState {
  Matrix h;
  Matrix c;
};

namespace ad {

/// ReLU(W x + b).
inline Var embed(Var w, Var b, Var input) { return relu(affine(w, input, b)); }

struct LstmVars {
  Var h;
  Var c;
};

/// One LSTM cell update; `c_prev` may be unbound, meaning a zero cell state.
inline LstmVars lstm_step(Var w, Var b, Var input_and_h, std::optional<Var> c_prev, std::size_t hidden) {
  Var z = affine(w, input_and_h, b);
  Var in_gate = sigmoid(slice(z, 0, hidden));
  Var forget_gate = sigmoid(slice(z, hidden, hidden));
  Var candidate = tanh(slice(z, 2 * hidden, hidden));
  Var out_gate = sigmoid(slice(z, 3 * hidden, hidden));
  Var c = mul(in_gate, candidate);
  if (c_prev) c = add(mul(forget_gate, *c_prev), c);
  return {mul(out_gate, tanh(c)), c};
}

/**
 * b + W_H * vec(H) for a sparse social tensor, where H holds the listed hidden
 * states summed per cell. Only the touched column blocks of W_H are read.
 */
inline Var pooled_embedding(Var w, Var b, const std::vector<std::pair<std::size_t, Var>>& contributions,
                            std::size_t hidden) {
  Tape& t = tape_of(w);
  const Matrix& W = t.value(w);
  Matrix out = t.value(b);
  bool rg = t.requires_grad(w) || t.requires_grad(b);
  for (const auto& [cell, h] : contributions) {
    const Matrix& hv = t.value(h);
    if (hv.rows() != hidden || (cell + 1) * hidden > W.cols()) throw ShapeError("pooled_embedding: bad contribution");
    rg = rg || t.requires_grad(h);
    for (std::size_t i = 0; i < W.rows(); ++i) {
      const double* row = &W.values()[i * W.cols() + cell * hidden];
      double s = 0.0;
      for (std::size_t k = 0; k < hidden; ++k) s += row[k] * hv[k];
      out[i] += s;
    }
  }
  return t.push(std::move(out), rg, [w, b, contributions, hidden](Tape& tp, const Matrix& g) {
    const Matrix& Wm = tp.value(w);
    for (const auto& [cell, h] : contributions) {
      const Matrix& hv = tp.value(h);
      if (tp.requires_grad(w)) {
        Matrix& gw = tp.grad(w);
        for (std::size_t i = 0; i < Wm.rows(); ++i) {
          double* row = &gw.values()[i * Wm.cols() + cell * hidden];
          for (std::size_t k = 0; k < hidden; ++k) row[k] += g[i] * hv[k];
        }
      }
      if (tp.requires_grad(h)) {
        Matrix& gh = tp.grad(h);
        for (std::size_t i = 0; i < Wm.rows(); ++i) {
          const double* row = &Wm.values()[i * Wm.cols() + cell * hidden];
          for (std::size_t k = 0; k < hidden; ++k) gh[k] += g[i] * row[k];
        }
      }
    }
    if (tp.requires_grad(b)) tp.grad(b) += g;
  });
}

}  // namespace ad

/// ReLU(W input + b).
inline Matrix embed(const Matrix& w, const Matrix& b, const Matrix& input) {
  Tape t;
  return t.value(ad::embed(t.reference(w), t.reference(b), t.reference(input)));
}

/// One LSTM step on plain values; `input` excludes the recurrent part.
inline LstmState lstm_step(const LstmState& state, const Matrix& input, const Matrix& w, const Matrix& b) {
  Tape t;
  Var h_prev = t.reference(state.h);
  Var x = ad::concat({t.reference(input), h_prev});
  auto r = ad::lstm_step(t.reference(w), t.reference(b), x, t.reference(state.c), state.h.rows());
  return {t.value(r.h), t.value(r.c)};
}

struct ProjectedOutput {
  Vec4 mu{};
  LogCholParams theta;
};

/// Full-head projection: first 4 rows are the means, the rest fill theta in layout order.
inline ProjectedOutput project_output(const Matrix& h, const Matrix& w_o, const Matrix& b_o) {
  if (w_o.rows() != 14) throw ShapeError("project_output: expected a 14-row projection");
  Tape t;
  const Matrix& out = t.value(ad::affine(t.reference(w_o), t.reference(h), t.reference(b_o)));
  ProjectedOutput p;
  for (int i = 0; i < 4; ++i) p.mu[i] = out[i];
  for (int k = 0; k < 10; ++k) p.theta.theta[k] = out[4 + k];
  return p;
}

/// Gaussian4 for full/no_frustum/individual/pace, BdGaussianPair for block_diagonal, Bivariate for vanilla.
using StepOutput = std::variant<Gaussian4, BdGaussianPair, Bivariate>;

/// (x, y, a_x, a_y) means; for position-only output the anchor mean repeats the position.
inline Vec4 output_means(const StepOutput& out) {
  return std::visit(
      [](const auto& g) -> Vec4 {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, Gaussian4>) {
          return g.mu;
        } else if constexpr (std::is_same_v<T, BdGaussianPair>) {
          return {g.position.mu1, g.position.mu2, g.anchor.mu1, g.anchor.mu2};
        } else {
          return {g.mu1, g.mu2, g.mu1, g.mu2};
        }
      },
      out);
}

enum class Rollout { teacher_forced, autoregressive };

struct ForwardOptions {
  Rollout rollout = Rollout::teacher_forced;
  std::size_t obs_len = 8;
  /// Autoregressive feedback draws from the predicted distribution instead of using its mean.
  bool sample = false;
  Rng* rng = nullptr;
};

struct AgentForward {
  /// outputs[t] is the distribution predicted at frame t for frame t + 1.
  std::vector<std::optional<StepOutput>> outputs;
  /// -log p(ground truth at t + 1); only for complete agents.
  std::vector<std::optional<double>> nll;
  /// Tape handles of `nll`; valid only while the tape lives.
  std::vector<std::optional<Var>> nll_vars;
  /// predicted[f]: state produced by the model for frame f (f >= 1).
  std::vector<std::optional<AgentState>> predicted;
};

struct ForwardResult {
  std::vector<AgentForward> agents;
};

namespace detail {

/// Unit step direction from `prev` to `cur`; undefined for a zero step.
inline std::optional<double> step_direction(Vec2 prev, Vec2 cur) {
  const Vec2 d = cur - prev;
  if (d.x == 0.0 && d.y == 0.0) return std::nullopt;
  return normalize_angle(d.angle());
}

/// Anchor target for ground-truth frame f: vislet anchor, or the step-direction anchor for pace.
inline Vec2 target_anchor(const ModelConfig& cfg, const WindowTrack& track, std::size_t f) {
  const AgentState& s = *track.states[f];
  if (cfg.variant != Variant::pace) return vislet_anchor(s, cfg.anchor_distance);
  if (f == 0 || !track.states[f - 1]) return s.position;
  auto dir = step_direction(track.states[f - 1]->position, s.position);
  return dir ? s.position + cfg.anchor_distance * unit_vector(*dir) : s.position;
}

struct FedState {
  Vec2 position;
  std::optional<double> gaze;  // direction of the vislet input; none means zero offset
  double pan = 0.0;            // reported pan
};

}  // namespace detail

/**
 * Joint rollout over every agent of `window`.
 *
 * Frames [0, obs_len) are always fed from the ground truth. Teacher forcing
 * feeds ground truth everywhere and ignores obs_len; autoregressive rollout feeds each
 * complete agent its own prediction and drops incomplete agents from the
 * scene. The social tensor at frame t pools neighbours present at t with their
 * hidden state from t - 1. If `grad_sink` is given, weights are bound as
 * parameters whose gradients accumulate there on `tape.backward`.
 */
inline ForwardResult forward_sequence(Tape& tape, const ModelConfig& cfg, const ModelWeights& weights,
                                      ModelWeights* grad_sink, const Window& window, const ForwardOptions& opt) {
  cfg.validate();
  weights.check_shapes(cfg);
  if (grad_sink != nullptr) grad_sink->check_shapes(cfg);
  if (window.agents.empty()) throw std::invalid_argument("forward_sequence: empty scene");
  const std::size_t T = window.length;
  if (opt.rollout == Rollout::autoregressive && (opt.obs_len < 1 || opt.obs_len > T)) throw std::invalid_argument("forward_sequence: observation length must be in [1, window length]");
  if (opt.sample && opt.rng == nullptr) throw std::invalid_argument("forward_sequence: sampling requires an rng");

  const std::size_t D = cfg.hidden_dim;
  const bool relative = cfg.frame == CoordinateFrame::relative;
  const std::size_t N = window.agents.size();

  auto bind = [&](const Matrix& m, Matrix* sink) { return sink ? tape.parameter(m, *sink) : tape.reference(m); };
  ModelWeights* gs = grad_sink;
  const Var Wx = bind(weights.W_x, gs ? &gs->W_x : nullptr);
  const Var bx = bind(weights.b_x, gs ? &gs->b_x : nullptr);
  std::optional<Var> Wa, ba, WH, bH;
  if (cfg.uses_vislet()) {
    Wa = bind(weights.W_a, gs ? &gs->W_a : nullptr);
    ba = bind(weights.b_a, gs ? &gs->b_a : nullptr);
  }
  if (cfg.uses_pooling()) {
    WH = bind(weights.W_H, gs ? &gs->W_H : nullptr);
    bH = bind(weights.b_H, gs ? &gs->b_H : nullptr);
  }
  const Var Wl = bind(weights.W_lstm, gs ? &gs->W_lstm : nullptr);
  const Var bl = bind(weights.b_lstm, gs ? &gs->b_lstm : nullptr);
  const Var Wo = bind(weights.W_o, gs ? &gs->W_o : nullptr);
  const Var bo = bind(weights.b_o, gs ? &gs->b_o : nullptr);
  const Var zero_hidden = tape.constant(Matrix(D, 1));

  // Inputs the network actually sees, per agent and frame.
  std::vector<std::vector<std::optional<detail::FedState>>> fed(N, std::vector<std::optional<detail::FedState>>(T));
  for (std::size_t i = 0; i < N; ++i) {
    const auto& tr = window.agents[i];
    if (tr.states.size() != T) throw std::invalid_argument("forward_sequence: track length differs from window length");
    const bool feed_truth_all = opt.rollout == Rollout::teacher_forced;
    for (std::size_t f = 0; f < T; ++f) {
      if (!tr.states[f] || (!feed_truth_all && f >= opt.obs_len)) continue;
      const AgentState& s = *tr.states[f];
      detail::FedState fs{s.position, s.pan, s.pan};
      if (cfg.variant == Variant::pace) {
        fs.gaze = (f > 0 && fed[i][f - 1]) ? detail::step_direction(fed[i][f - 1]->position, s.position) : std::nullopt;
      }
      fed[i][f] = fs;
    }
  }

  ForwardResult result;
  result.agents.resize(N);
  for (auto& a : result.agents) {
    a.outputs.resize(T > 0 ? T - 1 : 0);
    a.nll.resize(a.outputs.size());
    a.nll_vars.resize(a.outputs.size());
    a.predicted.resize(T);
  }

  std::vector<std::optional<Var>> h(N), c(N);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    std::vector<std::size_t> present;
    for (std::size_t i = 0; i < N; ++i)
      if (fed[i][t]) present.push_back(i);

    std::vector<AgentState> pool_states;
    pool_states.reserve(present.size());
    for (std::size_t i : present) pool_states.push_back({fed[i][t]->position, fed[i][t]->gaze.value_or(0.0)});

    std::vector<std::optional<Var>> h_next(N), c_next(N);
    for (std::size_t k = 0; k < present.size(); ++k) {
      const std::size_t i = present[k];
      const detail::FedState& cur = *fed[i][t];
      const std::optional<detail::FedState>& prev = t > 0 ? fed[i][t - 1] : std::nullopt;

      Matrix u_x(2, 1);
      if (relative) {
        if (prev) u_x = Matrix::column({cur.position.x - prev->position.x, cur.position.y - prev->position.y});
      } else {
        u_x = Matrix::column({cur.position.x, cur.position.y});
      }
      std::vector<Var> parts{ad::embed(Wx, bx, tape.constant(std::move(u_x)))};

      if (cfg.uses_vislet()) {
        Vec2 offset{};
        if (cur.gaze) offset = cfg.anchor_distance * unit_vector(*cur.gaze);
        const Vec2 u_a = relative ? offset : cur.position + offset;
        parts.push_back(ad::embed(*Wa, *ba, tape.constant(Matrix::column({u_a.x, u_a.y}))));
      }

      if (cfg.uses_pooling()) {
        std::vector<std::pair<std::size_t, Var>> contributions;
        const PoolingMode mode = cur.gaze || cfg.pooling_mode() == PoolingMode::all ? cfg.pooling_mode() : PoolingMode::none;
        for (const auto& a : pooling_assignments(k, pool_states, cfg.grid, cfg.frustum, mode)) {
          const std::size_t j = present[a.agent];
          if (h[j]) contributions.emplace_back(a.cell, *h[j]);
        }
        parts.push_back(ad::relu(ad::pooled_embedding(*WH, *bH, contributions, D)));
      }

      parts.push_back(h[i] ? *h[i] : zero_hidden);
      const auto cell = ad::lstm_step(Wl, bl, ad::concat(parts), c[i], D);
      h_next[i] = cell.h;
      c_next[i] = cell.c;

      const Var head = ad::affine(Wo, cell.h, bo);
      const Matrix& hv = tape.value(head);
      const Vec2 ref = relative ? cur.position : Vec2{};

      StepOutput out;
      switch (cfg.variant) {
        case Variant::block_diagonal:
          out = BdGaussianPair{Bivariate::from_raw(ref.x + hv[0], ref.y + hv[1], hv[2], hv[3], hv[4]),
                               Bivariate::from_raw(ref.x + hv[5], ref.y + hv[6], hv[7], hv[8], hv[9])};
          break;
        case Variant::vanilla:
          out = Bivariate::from_raw(ref.x + hv[0], ref.y + hv[1], hv[2], hv[3], hv[4]);
          break;
        default: {
          Gaussian4 g;
          for (int q = 0; q < 4; ++q) g.mu[q] = (q % 2 == 0 ? ref.x : ref.y) + hv[q];
          for (int q = 0; q < 10; ++q) g.theta.theta[q] = hv[4 + q];
          out = g;
        }
      }

      const WindowTrack& truth = window.agents[i];
      if (truth.complete && truth.states[t + 1]) {
        const Vec2 p = truth.states[t + 1]->position;
        const Vec2 a = detail::target_anchor(cfg, truth, t + 1);
        Var nll;
        switch (cfg.variant) {
          case Variant::block_diagonal:
            nll = ad::add(ad::bivariate_nll(head, 0, {ref.x, ref.y}, {p.x, p.y}),
                          ad::bivariate_nll(head, 5, {ref.x, ref.y}, {a.x, a.y}));
            break;
          case Variant::vanilla:
            nll = ad::bivariate_nll(head, 0, {ref.x, ref.y}, {p.x, p.y});
            break;
          default:
            nll = ad::gaussian4_nll(head, {ref.x, ref.y, ref.x, ref.y}, {p.x, p.y, a.x, a.y});
        }
        result.agents[i].nll[t] = tape.value(nll)[0];
        result.agents[i].nll_vars[t] = nll;
      }

      // Point forecast for frame t + 1.
      Vec4 m = output_means(out);
      if (opt.sample && opt.rollout == Rollout::autoregressive) {
        if (const auto* g4 = std::get_if<Gaussian4>(&out)) {
          m = sample_gaussian4(*g4, *opt.rng);
        } else if (const auto* bd = std::get_if<BdGaussianPair>(&out)) {
          const auto p = sample_bivariate(bd->position, *opt.rng);
          const auto a = sample_bivariate(bd->anchor, *opt.rng);
          m = {p[0], p[1], a[0], a[1]};
        } else {
          const auto p = sample_bivariate(std::get<Bivariate>(out), *opt.rng);
          m = {p[0], p[1], p[0], p[1]};
        }
      }
      detail::FedState next{{m[0], m[1]}, cur.gaze, cur.pan};
      if (cfg.uses_vislet()) {
        const Vec2 dir{m[2] - m[0], m[3] - m[1]};
        if (dir.norm() > 1e-12) next.gaze = normalize_angle(dir.angle());
        if (next.gaze) next.pan = *next.gaze;
      }
      result.agents[i].outputs[t] = out;
      result.agents[i].predicted[t + 1] = AgentState{next.position, normalize_angle(next.pan)};

      if (opt.rollout == Rollout::autoregressive && truth.complete && t + 1 >= opt.obs_len) fed[i][t + 1] = next;
    }
    h = std::move(h_next);
    c = std::move(c_next);
  }
  return result;
}

/// Forward pass without gradients.
inline ForwardResult forward_sequence(const ModelConfig& cfg, const ModelWeights& weights, const Window& window,
                                      const ForwardOptions& opt) {
  Tape tape;
  ForwardResult r = forward_sequence(tape, cfg, weights, nullptr, window, opt);
  for (auto& a : r.agents)
    for (auto& v : a.nll_vars) v.reset();
  return r;
}

namespace detail {

inline void require_window_fits(const Window& w, std::size_t obs, std::size_t pred) {
  if (obs < 1 || pred < 1) throw std::invalid_argument("loss: observation and prediction lengths must be positive");
  if (obs + pred > w.length) {
    throw std::invalid_argument("loss: window of " + std::to_string(w.length) + " frames cannot hold " +
                                std::to_string(obs) + " observed + " + std::to_string(pred) + " predicted frames");
  }
}

}  // namespace detail

/**
 * Sum over complete agents and prediction frames [obs, obs + pred) of the
 * negative log-likelihood of the ground truth, plus l2_weight * |w|^2.
 * Evaluated from the decoded outputs, independently of any tape.
 */
inline double sequence_loss(const ModelConfig& cfg, const ForwardResult& outputs, const Window& truth, std::size_t obs,
                            std::size_t pred, double l2_weight, const ModelWeights& weights) {
  detail::require_window_fits(truth, obs, pred);
  if (outputs.agents.size() != truth.agents.size()) throw std::invalid_argument("sequence_loss: agent count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < truth.agents.size(); ++i) {
    const WindowTrack& tr = truth.agents[i];
    if (!std::all_of(tr.states.begin(), tr.states.begin() + static_cast<std::ptrdiff_t>(obs + pred),
                     [](const auto& s) { return s.has_value(); }))
      continue;
    for (std::size_t f = obs; f < obs + pred; ++f) {
      const auto& out = outputs.agents[i].outputs.at(f - 1);
      if (!out) throw std::invalid_argument("sequence_loss: missing output for a prediction step");
      const Vec2 p = tr.states[f]->position;
      const Vec2 a = detail::target_anchor(cfg, tr, f);
      if (const auto* g4 = std::get_if<Gaussian4>(&*out)) {
        total += gaussian4_nll({p.x, p.y, a.x, a.y}, *g4);
      } else if (const auto* bd = std::get_if<BdGaussianPair>(&*out)) {
        total += bd_nll({p.x, p.y}, {a.x, a.y}, *bd);
      } else {
        total += bivariate_nll(p.x, p.y, std::get<Bivariate>(*out));
      }
    }
  }
  return total + l2_weight * weights.squared_norm();
}

struct LossGradient {
  double loss = 0.0;
  double data_term = 0.0;
  Gradients grad;
};

/// Window loss and its exact gradient with respect to every weight.
inline LossGradient loss_and_gradient(const ModelConfig& cfg, const ModelWeights& weights, const Window& window,
                                      std::size_t obs, std::size_t pred, double l2_weight,
                                      Rollout rollout = Rollout::teacher_forced) {
  detail::require_window_fits(window, obs, pred);
  const Window w = truncate_window(window, obs + pred);
  LossGradient out;
  out.grad = weights.zeros_like();
  Tape tape;
  ForwardOptions opt;
  opt.rollout = rollout;
  opt.obs_len = obs;
  const ForwardResult r = forward_sequence(tape, cfg, weights, &out.grad, w, opt);
  std::vector<Var> terms;
  for (std::size_t i = 0; i < w.agents.size(); ++i) {
    if (!w.agents[i].complete) continue;
    for (std::size_t f = obs; f < obs + pred; ++f)
      if (r.agents[i].nll_vars[f - 1]) terms.push_back(*r.agents[i].nll_vars[f - 1]);
  }
  if (terms.empty()) throw std::invalid_argument("loss_and_gradient: window has no complete agent");
  const Var data = ad::sum(terms);
  tape.backward(data);
  out.data_term = tape.value(data)[0];
  out.loss = out.data_term + l2_weight * weights.squared_norm();
  if (l2_weight != 0.0) {
    std::vector<Matrix*> gm;
    out.grad.for_each([&](std::string_view, Matrix& m) { gm.push_back(&m); });
    std::size_t k = 0;
    weights.for_each([&](std::string_view, const Matrix& m) {
      Matrix& g = *gm[k++];
      for (std::size_t q = 0; q < m.size(); ++q) g[q] += 2.0 * l2_weight * m[q];
    });
  }
  return out;
}

}  // namespace mxlstm
