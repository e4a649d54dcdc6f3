#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "mxlstm/mxlstm.hpp"

using namespace mxlstm;

namespace {

ParseResult parse(const std::string& text) {
  std::istringstream in(text);
  return parse_annotations(in);
}

Scene straight_track(std::size_t frames, std::int64_t id = 1) {
  Scene s;
  AgentTrack t{id, {}};
  for (std::size_t f = 0; f < frames; ++f) t.points.push_back({static_cast<std::int64_t>(f), {{0.4 * static_cast<double>(f), 0.0}, 0.0}});
  s.tracks.push_back(t);
  return s;
}

}  // namespace

TEST(Parse, SingleRecord) {
  const auto r = parse("0\t1\t0.0\t0.0\t90.0\n");
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0], (RawAnnotation{0, 1, 0.0, 0.0, 90.0}));
  EXPECT_TRUE(r.warnings.empty());
  const Scene s = downsample(r.records, 2.5);
  EXPECT_NEAR(s.tracks[0].points[0].state.pan, std::numbers::pi / 2, 1e-15);
}

TEST(Parse, CommentsBlanksAndCrlf) {
  const auto r = parse("#comment\n\n0\t1\t1.5\t-2\t10\r\n# another\n1\t1\t1.6\t-2\t11\n");
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.records[0].pan_deg, 10.0);
  EXPECT_EQ(r.records[1].x, 1.6);
}

TEST(Parse, DuplicateNamesLine) {
  try {
    parse("0\t1\t0\t0\t0\n1\t1\t0\t0\t0\n0\t1\t5\t5\t5\n");
    FAIL() << "duplicate accepted";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
}

TEST(Parse, MalformedLinesRejectedWithLineNumber) {
  for (const std::string bad : {"0\t1\t0\t0\n", "0\t1\tx\t0\t0\n", "0.5\t1\t0\t0\t0\n", "0\t1\t0\t0\t0\t7\n", "0\t1\tnan\t0\t0\n"}) {
    try {
      parse("# header\n" + bad);
      FAIL() << "accepted: " << bad;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.line(), 2u) << bad;
    }
  }
}

TEST(Parse, PanOutsideRangeNormalizedWithWarning) {
  const auto r = parse("0\t1\t0\t0\t-90\n0\t2\t0\t0\t360\n0\t3\t0\t0\t725\n");
  EXPECT_EQ(r.records[0].pan_deg, 270.0);
  EXPECT_EQ(r.records[1].pan_deg, 0.0);
  EXPECT_EQ(r.records[2].pan_deg, 5.0);
  EXPECT_EQ(r.warnings.size(), 3u);
}

TEST(Parse, SerializeRoundTripIsIdempotent) {
  Rng rng(3);
  SyntheticParams p;
  p.num_agents = 5;
  p.position_jitter = 0.05;
  const Scene s = generate_synthetic(SyntheticKind::crossing, p, rng);
  std::ostringstream a;
  write_annotations(a, scene_to_annotations(s));
  const auto first = parse(a.str());
  std::ostringstream b;
  write_annotations(b, first.records);
  EXPECT_EQ(a.str(), b.str());
  const auto second = parse(b.str());
  EXPECT_EQ(first.records, second.records);
  // Scene -> TSV -> Scene keeps positions bit-exact.
  const Scene back = downsample(second.records, 2.5);
  ASSERT_EQ(back.tracks.size(), s.tracks.size());
  for (std::size_t i = 0; i < s.tracks.size(); ++i)
    for (std::size_t k = 0; k < s.tracks[i].points.size(); ++k)
      EXPECT_EQ(back.tracks[i].points[k].state.position, s.tracks[i].points[k].state.position);
}

TEST(Downsample, KeepsEveryTenthFrameAt25Fps) {
  std::vector<RawAnnotation> recs;
  for (std::int64_t f = 3; f < 53; ++f) recs.push_back({f, 1, 0.01 * static_cast<double>(f), 0.0, 0.0});
  const Scene s = downsample(recs, 25.0);
  EXPECT_DOUBLE_EQ(s.timestep, 0.4);
  ASSERT_EQ(s.tracks[0].points.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) {
    EXPECT_EQ(s.tracks[0].points[k].frame, static_cast<std::int64_t>(k));
    EXPECT_EQ(s.tracks[0].points[k].state.position.x, 0.01 * static_cast<double>(3 + 10 * k));  // copied, not interpolated
  }
}

TEST(Downsample, IdentityAtTargetRate) {
  std::vector<RawAnnotation> recs{{0, 1, 1, 2, 30}, {1, 1, 2, 3, 40}, {1, 2, 5, 5, 50}};
  const Scene s = downsample(recs, 2.5);
  ASSERT_EQ(s.tracks.size(), 2u);
  EXPECT_EQ(s.tracks[0].points.size(), 2u);
  EXPECT_EQ(s.tracks[1].points[0].frame, 1);
  EXPECT_EQ(scene_to_annotations(s).size(), 3u);
}

TEST(Downsample, AgentOnlyOnDroppedFramesDisappears) {
  std::vector<RawAnnotation> recs{{0, 1, 0, 0, 0}, {10, 1, 1, 0, 0}, {5, 2, 3, 3, 0}, {7, 2, 3, 3, 0}};
  const Scene s = downsample(recs, 25.0);
  ASSERT_EQ(s.tracks.size(), 1u);
  EXPECT_EQ(s.tracks[0].agent_id, 1);
}

TEST(Downsample, RejectsNonIntegralRatio) {
  EXPECT_THROW(downsample({}, 7.0), std::invalid_argument);
  EXPECT_THROW(downsample({}, 1.0), std::invalid_argument);
  EXPECT_NO_THROW(downsample({}, 30.0, 10.0));
}

TEST(Windows, CountArithmetic) {
  EXPECT_EQ(extract_windows(straight_track(20), 8, 12, 1).size(), 1u);
  EXPECT_EQ(extract_windows(straight_track(19), 8, 12, 1).size(), 0u);
  const auto w = extract_windows(straight_track(32), 8, 12, 4);
  ASSERT_EQ(w.size(), 4u);
  EXPECT_EQ(w[3].start_frame, 12);
  EXPECT_THROW(extract_windows(straight_track(32), 8, 12, 0), std::invalid_argument);
  EXPECT_TRUE(extract_windows(Scene{}, 8, 12, 1).empty());
}

TEST(Windows, PartialAgentsKeptAsContextAndFlagged) {
  Scene s = straight_track(20, 1);
  AgentTrack late{2, {}};
  for (std::int64_t f = 5; f < 20; ++f) late.points.push_back({f, {{0, 1}, 0}});
  s.tracks.push_back(late);
  AgentTrack gone{3, {{40, {{0, 0}, 0}}}};
  s.tracks.push_back(gone);
  const auto w = extract_windows(s, 8, 12, 1);
  ASSERT_EQ(w.size(), 1u);
  ASSERT_EQ(w[0].agents.size(), 2u);  // agent 3 never appears in the window
  EXPECT_TRUE(w[0].agents[0].complete);
  EXPECT_FALSE(w[0].agents[1].complete);
  EXPECT_FALSE(w[0].agents[1].states[4].has_value());
  EXPECT_TRUE(w[0].agents[1].states[5].has_value());
  EXPECT_EQ(w[0].complete_count(), 1u);
}

TEST(Windows, NeverFabricateStates) {
  Rng rng(4);
  SyntheticParams p;
  p.num_agents = 6;
  p.num_frames = 40;
  Scene s = generate_synthetic(SyntheticKind::linear, p, rng);
  // Punch random holes.
  for (auto& t : s.tracks)
    std::erase_if(t.points, [&](const TrackPoint&) { return rng.uniform() < 0.1; });
  for (const auto& w : extract_windows(s, 8, 12, 3)) {
    for (const auto& a : w.agents) {
      const auto* track = &*std::find_if(s.tracks.begin(), s.tracks.end(), [&](const auto& t) { return t.agent_id == a.agent_id; });
      bool all = true;
      for (std::size_t f = 0; f < w.length; ++f) {
        const AgentState* truth = track->at(w.start_frame + static_cast<std::int64_t>(f));
        ASSERT_EQ(a.states[f].has_value(), truth != nullptr);
        if (truth) {
          EXPECT_EQ(*a.states[f], *truth);
        }
        all = all && truth;
      }
      EXPECT_EQ(a.complete, all);
    }
    EXPECT_GE(w.complete_count(), 1u);
  }
}

TEST(Synthetic, LinearStepLength) {
  Rng rng(5);
  SyntheticParams p;
  p.speed_min = p.speed_max = 1.2;
  const Scene s = generate_synthetic(SyntheticKind::linear, p, rng);
  for (const auto& t : s.tracks)
    for (std::size_t k = 1; k < t.points.size(); ++k) {
      const Vec2 d = t.points[k].state.position - t.points[k - 1].state.position;
      EXPECT_NEAR(d.norm(), 0.48, 1e-12);
      EXPECT_NEAR(std::fabs(wrapped_difference(d.angle(), t.points[k - 1].state.pan)), 0.0, 1e-9);
    }
}

TEST(Synthetic, GazeLeadsTurnByK) {
  Rng rng(6);
  SyntheticParams p;
  p.num_agents = 10;
  p.gaze_lead = 3;
  const Scene s = generate_synthetic(SyntheticKind::turn_with_gaze, p, rng);
  for (const auto& t : s.tracks) {
    bool turned = false;
    for (std::size_t k = 0; k + 4 < t.points.size(); ++k) {
      const Vec2 d = t.points[k + 4].state.position - t.points[k + 3].state.position;
      EXPECT_NEAR(std::fabs(wrapped_difference(d.angle(), t.points[k].state.pan)), 0.0, 1e-9);
      turned = turned || std::fabs(wrapped_difference(t.points[k].state.pan, t.points[0].state.pan)) > 0.5;
    }
    EXPECT_TRUE(turned);
  }
}

TEST(Synthetic, ConversationalGroupIsNearlyStatic) {
  Rng rng(7);
  SyntheticParams p;
  p.num_agents = 4;
  p.num_frames = 40;
  const Scene s = generate_synthetic(SyntheticKind::conversational_group, p, rng);
  double dist = 0.0;
  std::size_t steps = 0;
  double pan_range = 0.0;
  for (const auto& t : s.tracks)
    for (std::size_t k = 1; k < t.points.size(); ++k) {
      dist += (t.points[k].state.position - t.points[k - 1].state.position).norm();
      ++steps;
      pan_range = std::max(pan_range, std::fabs(wrapped_difference(t.points[k].state.pan, t.points[0].state.pan)));
    }
  EXPECT_LT(dist / (static_cast<double>(steps) * p.timestep), 0.1);
  EXPECT_GT(rad2deg(pan_range), 20.0);
}

TEST(Synthetic, CrossingStreamsShareRegion) {
  Rng rng(8);
  SyntheticParams p;
  p.num_agents = 4;
  const Scene s = generate_synthetic(SyntheticKind::crossing, p, rng);
  for (const auto& t : s.tracks) {
    const Vec2 mid = t.points[t.points.size() / 2].state.position;
    EXPECT_LT(mid.norm(), 1.5);
  }
}

TEST(Synthetic, DeterministicUnderSeedAndJitterHonoured) {
  SyntheticParams p;
  p.position_jitter = 0.1;
  for (auto kind : {SyntheticKind::linear, SyntheticKind::turn_with_gaze, SyntheticKind::conversational_group, SyntheticKind::crossing}) {
    Rng a(9), b(9), c(10);
    EXPECT_EQ(generate_synthetic(kind, p, a), generate_synthetic(kind, p, b));
    EXPECT_FALSE(generate_synthetic(kind, p, a) == generate_synthetic(kind, p, c));
  }
  p.num_agents = 0;
  Rng r(1);
  EXPECT_THROW(generate_synthetic(SyntheticKind::linear, p, r), std::invalid_argument);
  EXPECT_EQ(parse_synthetic_kind("crossing"), SyntheticKind::crossing);
  EXPECT_FALSE(parse_synthetic_kind("spiral").has_value());
}

TEST(PanNoise, ZeroSigmaIsIdentity) {
  Rng g(11), r(12);
  const Scene s = generate_synthetic(SyntheticKind::linear, {}, g);
  EXPECT_EQ(add_pan_noise(s, 0.0, r), s);
  EXPECT_THROW(add_pan_noise(s, -1.0, r), std::invalid_argument);
}

TEST(PanNoise, CircularStdMatchesSigma) {
  Rng g(13), r(14);
  SyntheticParams p;
  p.num_agents = 500;
  p.num_frames = 20;
  const Scene s = generate_synthetic(SyntheticKind::turn_with_gaze, p, g);
  const Scene n = add_pan_noise(s, 24.0, r);
  double cs = 0.0, sn = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < s.tracks.size(); ++i)
    for (std::size_t k = 0; k < s.tracks[i].points.size(); ++k) {
      const double d = n.tracks[i].points[k].state.pan - s.tracks[i].points[k].state.pan;
      cs += std::cos(d);
      sn += std::sin(d);
      EXPECT_EQ(n.tracks[i].points[k].state.position, s.tracks[i].points[k].state.position);
      const double pan = n.tracks[i].points[k].state.pan;
      EXPECT_TRUE(pan >= 0.0 && pan < kTwoPi);
      ++count;
    }
  ASSERT_EQ(count, 10000u);
  const double R = std::hypot(cs, sn) / static_cast<double>(count);
  EXPECT_NEAR(rad2deg(std::sqrt(-2.0 * std::log(R))), 24.0, 2.0);
}

TEST(PanNoise, WrapsAroundZero) {
  const double noisy = normalize_angle(deg2rad(359.0) + deg2rad(2.0));
  EXPECT_NEAR(rad2deg(noisy), 1.0, 1e-9);
  // Window flavour only touches the observation frames.
  Rng g(15), r(16);
  const Scene s = generate_synthetic(SyntheticKind::linear, {}, g);
  const Window w = extract_windows(s, 8, 12, 1).at(0);
  const Window n = add_pan_noise(w, 10.0, r, 8);
  for (std::size_t a = 0; a < w.agents.size(); ++a) {
    EXPECT_NE(n.agents[a].states[3]->pan, w.agents[a].states[3]->pan);
    for (std::size_t f = 8; f < 20; ++f) EXPECT_EQ(n.agents[a].states[f], w.agents[a].states[f]);
  }
}
