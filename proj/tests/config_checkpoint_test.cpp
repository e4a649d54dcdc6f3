#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <sstream>

#include "mxlstm/mxlstm.hpp"

using namespace mxlstm;

namespace {

RunConfig parse(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  return parse_config(in, base);
}

std::string serialize(const Checkpoint& ck) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, ck);
  return out.str();
}

Checkpoint deserialize(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_checkpoint(in);
}

Checkpoint sample_checkpoint(Variant v, std::uint64_t seed) {
  Checkpoint ck;
  ck.config.variant = v;
  ck.config.embedding_dim = 5;
  ck.config.hidden_dim = 7;
  ck.config.grid = PoolingGrid{6, 1.5};
  Rng rng(seed);
  ck.weights = ModelWeights::initialize(ck.config, rng, 3.0);
  ck.meta = {{"epochs", 3}};
  return ck;
}

}  // namespace

TEST(Config, DefaultsMatchDocumentedValues) {
  const RunConfig c;
  EXPECT_EQ(c.model.embedding_dim, 64u);
  EXPECT_EQ(c.model.hidden_dim, 128u);
  EXPECT_EQ(c.model.grid.cells_per_side, 32u);
  EXPECT_NEAR(rad2deg(c.model.frustum.aperture), 40.0, 1e-12);
  EXPECT_EQ(c.train.learning_rate, 0.005);
  EXPECT_EQ(c.train.obs_len, 8u);
  EXPECT_EQ(c.train.pred_len, 12u);
}

TEST(Config, ParsesKeysCommentsAndWhitespace) {
  const auto c = parse("# run\n\n variant = block_diagonal \nhidden_dim=32\naperture_deg = 60\nframe = absolute\nlearning_rate = 1e-3\nseed = 7\r\n");
  EXPECT_EQ(c.model.variant, Variant::block_diagonal);
  EXPECT_EQ(c.model.hidden_dim, 32u);
  EXPECT_NEAR(c.model.frustum.aperture, deg2rad(60.0), 1e-15);
  EXPECT_EQ(c.model.frame, CoordinateFrame::absolute);
  EXPECT_EQ(c.train.learning_rate, 1e-3);
  EXPECT_EQ(c.train.seed, 7u);
  EXPECT_EQ(c.model.embedding_dim, 64u);  // untouched keys keep their defaults
}

TEST(Config, ErrorsNameTheLine) {
  auto expect_error = [](const std::string& text, const std::string& fragment) {
    try {
      parse(text);
      FAIL() << "accepted: " << text;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
  };
  expect_error("hidden_dim = 8\nwidth = 3\n", "line 2");
  expect_error("width = 3\n", "unknown key");
  expect_error("hidden_dim = eight\n", "invalid value");
  expect_error("variant = social\n", "unknown variant");
  expect_error("just text\n", "key = value");
  expect_error("frame = polar\n", "frame");
  EXPECT_THROW(parse("rmsprop_decay = 1.5\n"), std::invalid_argument);
}

TEST(Config, WriteThenParseRoundTrips) {
  RunConfig c = parse("variant = pace\nembedding_dim = 12\ngrid_half_extent = 2.5\nl2_weight = 0\nwindow_stride = 3\n");
  std::ostringstream out;
  write_config(out, c);
  const RunConfig back = parse(out.str());
  EXPECT_EQ(config_values(back), config_values(c));
  for (auto k : config_keys()) EXPECT_NE(out.str().find(std::string(k) + " = "), std::string::npos);
}

TEST(Checkpoint, BitwiseRoundTripForEveryVariant) {
  for (Variant v : kAllVariants) {
    const Checkpoint ck = sample_checkpoint(v, 11);
    const std::string bytes = serialize(ck);
    const Checkpoint back = deserialize(bytes);
    EXPECT_EQ(back.config.variant, v);
    EXPECT_EQ(back.config.hidden_dim, 7u);
    EXPECT_EQ(back.config.frustum.aperture, ck.config.frustum.aperture);
    EXPECT_EQ(back.meta, ck.meta);
    std::vector<const Matrix*> a;
    ck.weights.for_each([&](std::string_view, const Matrix& m) { a.push_back(&m); });
    std::size_t k = 0;
    back.weights.for_each([&](std::string_view, const Matrix& m) {
      const Matrix& o = *a[k++];
      ASSERT_TRUE(m.same_shape(o));
      for (std::size_t i = 0; i < m.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(m[i]), std::bit_cast<std::uint64_t>(o[i]));
    });
    EXPECT_EQ(serialize(back), bytes);
  }
}

TEST(Checkpoint, SpecialValuesSurvive) {
  Checkpoint ck = sample_checkpoint(Variant::individual, 12);
  ck.weights.b_o[0] = -0.0;
  ck.weights.b_o[1] = 5e-324;
  ck.weights.b_o[2] = std::nextafter(1.0, 2.0);
  const Checkpoint back = deserialize(serialize(ck));
  EXPECT_TRUE(std::signbit(back.weights.b_o[0]));
  EXPECT_EQ(back.weights.b_o[1], 5e-324);
  EXPECT_EQ(back.weights.b_o[2], std::nextafter(1.0, 2.0));
}

TEST(Checkpoint, LayoutIsLittleEndianWithJsonHeader) {
  const std::string bytes = serialize(sample_checkpoint(Variant::vanilla, 13));
  ASSERT_GT(bytes.size(), 16u);
  EXPECT_EQ(bytes.substr(0, 8), "MXLSTMCK");
  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const auto header = nlohmann::json::parse(bytes.substr(16, n));
  EXPECT_EQ(header.at("variant"), "vanilla");
  EXPECT_EQ(header.at("tensors").size(), 10u);
  std::size_t values = 0;
  for (const auto& t : header.at("tensors")) values += t.at("rows").get<std::size_t>() * t.at("cols").get<std::size_t>();
  EXPECT_EQ(bytes.size(), 16 + n + 8 * values);
}

TEST(Checkpoint, CorruptInputsRejected) {
  const std::string bytes = serialize(sample_checkpoint(Variant::full, 14));
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize(bad_magic), CheckpointError);
  EXPECT_THROW(deserialize(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  EXPECT_THROW(deserialize(bytes.substr(0, 12)), CheckpointError);
  EXPECT_THROW(deserialize(bytes + "x"), CheckpointError);
  EXPECT_THROW(deserialize(""), CheckpointError);

  std::uint64_t n = 0;
  for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  std::string header = bytes.substr(16, n);
  const auto pos = header.find("\"W_lstm\"");
  ASSERT_NE(pos, std::string::npos);
  std::string renamed = bytes;
  renamed.replace(16 + pos, 8, "\"W_lstX\"");
  EXPECT_THROW(deserialize(renamed), CheckpointError);
}

TEST(Checkpoint, MismatchedShapesRejectedOnWrite) {
  Checkpoint ck = sample_checkpoint(Variant::full, 15);
  ck.config.hidden_dim = 8;
  std::ostringstream out;
  EXPECT_THROW(write_checkpoint(out, ck), ShapeError);
}

TEST(Checkpoint, FileRoundTrip) {
  const std::string path = ::testing::TempDir() + "/mxlstm_ck_test.bin";
  const Checkpoint ck = sample_checkpoint(Variant::pace, 16);
  save_checkpoint(path, ck);
  EXPECT_EQ(load_checkpoint(path).weights, ck.weights);
  EXPECT_THROW(load_checkpoint(path + ".missing"), CheckpointError);
}
