#pragma once

// Checkpoint layout:
//   8 bytes   magic "MXLSTMCK"
//   8 bytes   header length n, unsigned little-endian
//   n bytes   UTF-8 JSON header
//   payload   float64 little-endian values, tensors back to back
//
// Header fields: format_version, variant, model {embedding_dim, hidden_dim,
// grid_cells, grid_half_extent, aperture, frustum_depth, anchor_distance,
// frame}, head_layout, tensors [{name, rows, cols, offset}] with offset
// counted in values from the start of the payload, and an optional free-form
// "meta" object. Angles are stored in radians.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mxlstm/model.hpp"

namespace mxlstm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'X', 'L', 'S', 'T', 'M', 'C', 'K'};
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelWeights weights;
  nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

inline void put_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64_le(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::string head_layout(Variant v) {
  switch (v) {
    case Variant::block_diagonal: return "mu_x[2],log_sigma_x[2],rho_x_raw,mu_a[2],log_sigma_a[2],rho_a_raw";
    case Variant::vanilla: return "mu_x[2],log_sigma_x[2],rho_x_raw";
    default: return "mu[4],theta[10] upper-triangular row-major, diagonal as log";
  }
}

}  // namespace detail

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"embedding_dim", c.embedding_dim},
          {"hidden_dim", c.hidden_dim},
          {"grid_cells", c.grid.cells_per_side},
          {"grid_half_extent", c.grid.half_extent},
          {"aperture", c.frustum.aperture},
          {"frustum_depth", c.frustum.depth},
          {"anchor_distance", c.anchor_distance},
          {"frame", c.frame == CoordinateFrame::relative ? "relative" : "absolute"}};
}

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  ck.weights.check_shapes(ck.config);
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["variant"] = std::string(variant_name(ck.config.variant));
  header["model"] = model_config_json(ck.config);
  header["head_layout"] = detail::head_layout(ck.config.variant);
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  ck.weights.for_each([&](std::string_view name, const Matrix& m) {
    header["tensors"].push_back({{"name", std::string(name)}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += m.size();
  });
  header["meta"] = ck.meta;
  const std::string text = header.dump();
  out.write(kCheckpointMagic, 8);
  detail::put_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  ck.weights.for_each([&](std::string_view, const Matrix& m) {
    for (double v : m.values()) detail::put_u64_le(out, std::bit_cast<std::uint64_t>(v));
  });
  if (!out) throw CheckpointError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("checkpoint: bad magic, not an MX-LSTM checkpoint");
  const std::uint64_t n = detail::get_u64_le(in);
  if (n > (std::uint64_t{1} << 30)) throw CheckpointError("checkpoint: implausible header length");
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw CheckpointError("checkpoint: truncated header");

  Checkpoint ck;
  try {
    const auto h = nlohmann::json::parse(text);
    if (h.at("format_version").get<int>() != kCheckpointVersion) throw CheckpointError("checkpoint: unsupported format version");
    const auto v = parse_variant(h.at("variant").get<std::string>());
    if (!v) throw CheckpointError("checkpoint: unknown variant");
    auto& c = ck.config;
    const auto& m = h.at("model");
    c.variant = *v;
    c.embedding_dim = m.at("embedding_dim").get<std::size_t>();
    c.hidden_dim = m.at("hidden_dim").get<std::size_t>();
    c.grid.cells_per_side = m.at("grid_cells").get<std::size_t>();
    c.grid.half_extent = m.at("grid_half_extent").get<double>();
    c.frustum.aperture = m.at("aperture").get<double>();
    c.frustum.depth = m.at("frustum_depth").get<double>();
    c.anchor_distance = m.at("anchor_distance").get<double>();
    const auto frame = m.at("frame").get<std::string>();
    if (frame != "relative" && frame != "absolute") throw CheckpointError("checkpoint: unknown coordinate frame");
    c.frame = frame == "relative" ? CoordinateFrame::relative : CoordinateFrame::absolute;
    c.validate();
    if (h.contains("meta")) ck.meta = h.at("meta");

    const auto& tensors = h.at("tensors");
    std::uint64_t expected_offset = 0;
    std::size_t k = 0;
    ck.weights.for_each([&](std::string_view name, Matrix& mat) {
      if (k >= tensors.size()) throw CheckpointError("checkpoint: missing tensor " + std::string(name));
      const auto& t = tensors[k++];
      if (t.at("name").get<std::string>() != name) throw CheckpointError("checkpoint: expected tensor " + std::string(name));
      if (t.at("offset").get<std::uint64_t>() != expected_offset) throw CheckpointError("checkpoint: bad offset for " + std::string(name));
      mat = Matrix(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
      expected_offset += mat.size();
    });
    if (k != tensors.size()) throw CheckpointError("checkpoint: unexpected extra tensors");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  try {
    ck.weights.check_shapes(ck.config);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: tensor shapes do not match the model: ") + e.what());
  }
  ck.weights.for_each([&](std::string_view name, Matrix& mat) {
    for (double& v : mat.values()) {
      unsigned char b[8];
      if (!in.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("checkpoint: truncated payload in " + std::string(name));
      std::uint64_t u = 0;
      for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
      v = std::bit_cast<double>(u);
    }
  });
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes after payload");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
  write_checkpoint(out, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace mxlstm
