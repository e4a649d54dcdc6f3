#pragma once

// Flat `key = value` run configuration shared by the CLI and tests.
// Blank lines and lines starting with '#' are ignored; unknown keys are errors.

#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

#include "mxlstm/evaluation.hpp"
#include "mxlstm/model.hpp"
#include "mxlstm/training.hpp"

namespace mxlstm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size())
    throw ConfigError("config: invalid value '" + std::string(text) + "' for " + std::string(key));
  return v;
}

}  // namespace detail

inline const std::vector<std::string_view>& config_keys() {
  static const std::vector<std::string_view> keys{
      "variant",      "embedding_dim", "hidden_dim",    "grid_cells", "grid_half_extent", "aperture_deg",
      "frustum_depth", "anchor_distance", "frame",      "learning_rate", "rmsprop_decay",  "epsilon",
      "epochs",       "l2_weight",     "grad_clip",     "seed",       "obs_len",          "pred_len",
      "window_stride"};
  return keys;
}

/// Sets one key; throws ConfigError on an unknown key or malformed value.
inline void apply_config_value(RunConfig& c, std::string_view key, std::string_view value) {
  using detail::parse_number;
  if (key == "variant") {
    auto v = parse_variant(value);
    if (!v) throw ConfigError("config: unknown variant '" + std::string(value) + "'");
    c.model.variant = *v;
  } else if (key == "embedding_dim") c.model.embedding_dim = parse_number<std::size_t>(key, value);
  else if (key == "hidden_dim") c.model.hidden_dim = parse_number<std::size_t>(key, value);
  else if (key == "grid_cells") c.model.grid.cells_per_side = parse_number<std::size_t>(key, value);
  else if (key == "grid_half_extent") c.model.grid.half_extent = parse_number<double>(key, value);
  else if (key == "aperture_deg") c.model.frustum.aperture = deg2rad(parse_number<double>(key, value));
  else if (key == "frustum_depth") c.model.frustum.depth = parse_number<double>(key, value);
  else if (key == "anchor_distance") c.model.anchor_distance = parse_number<double>(key, value);
  else if (key == "frame") {
    if (value == "relative") c.model.frame = CoordinateFrame::relative;
    else if (value == "absolute") c.model.frame = CoordinateFrame::absolute;
    else throw ConfigError("config: frame must be 'relative' or 'absolute'");
  } else if (key == "learning_rate") c.train.learning_rate = parse_number<double>(key, value);
  else if (key == "rmsprop_decay") c.train.rmsprop_decay = parse_number<double>(key, value);
  else if (key == "epsilon") c.train.epsilon = parse_number<double>(key, value);
  else if (key == "epochs") c.train.epochs = parse_number<std::size_t>(key, value);
  else if (key == "l2_weight") c.train.l2_weight = parse_number<double>(key, value);
  else if (key == "grad_clip") c.train.grad_clip = parse_number<double>(key, value);
  else if (key == "seed") c.train.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "obs_len") c.train.obs_len = parse_number<std::size_t>(key, value);
  else if (key == "pred_len") c.train.pred_len = parse_number<std::size_t>(key, value);
  else if (key == "window_stride") c.train.window_stride = parse_number<std::size_t>(key, value);
  else throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
    try {
      apply_config_value(base, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(n) + ": " + e.what());
    }
  }
  base.model.validate();
  base.train.validate();
  return base;
}

/// Every key with its resolved value, in `config_keys()` order.
inline std::map<std::string, std::string> config_values(const RunConfig& c) {
  const auto& m = c.model;
  const auto& t = c.train;
  return {{"variant", std::string(variant_name(m.variant))},
          {"embedding_dim", std::to_string(m.embedding_dim)},
          {"hidden_dim", std::to_string(m.hidden_dim)},
          {"grid_cells", std::to_string(m.grid.cells_per_side)},
          {"grid_half_extent", format_double(m.grid.half_extent)},
          {"aperture_deg", format_double(rad2deg(m.frustum.aperture))},
          {"frustum_depth", format_double(m.frustum.depth)},
          {"anchor_distance", format_double(m.anchor_distance)},
          {"frame", m.frame == CoordinateFrame::relative ? "relative" : "absolute"},
          {"learning_rate", format_double(t.learning_rate)},
          {"rmsprop_decay", format_double(t.rmsprop_decay)},
          {"epsilon", format_double(t.epsilon)},
          {"epochs", std::to_string(t.epochs)},
          {"l2_weight", format_double(t.l2_weight)},
          {"grad_clip", format_double(t.grad_clip)},
          {"seed", std::to_string(t.seed)},
          {"obs_len", std::to_string(t.obs_len)},
          {"pred_len", std::to_string(t.pred_len)},
          {"window_stride", std::to_string(t.window_stride)}};
}

inline void write_config(std::ostream& out, const RunConfig& c) {
  const auto vals = config_values(c);
  for (auto k : config_keys()) out << k << " = " << vals.at(std::string(k)) << '\n';
}

}  // namespace mxlstm
