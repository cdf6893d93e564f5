#include "softtrack/sim.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace softtrack;
using namespace softtrack::sim;

namespace {

SimConfig quiet(Flavor f = Flavor::Basic)
{
  SimConfig c;
  c.flavor = f;
  c.force_sigma = 0.0;
  c.detection_noise_sigma = 0.0;
  return c;
}

Particle particle(double x, double y, double vx, double vy, double depth = 0.5, int id = 0)
{
  Particle p;
  p.p = {x, y};
  p.v = {vx, vy};
  p.depth = depth;
  p.identity = id;
  return p;
}

}  // namespace

TEST(Bounce, ReversesOffendingComponent)
{
  auto q = particle(1.02, 0.5, 0.05, 0.0);
  bounce(q);
  EXPECT_EQ(q.v.x, -0.05);
  EXPECT_EQ(q.v.y, 0.0);
}

TEST(Bounce, InwardMotionOutsideIsKept)
{
  auto q = particle(-0.01, 1.01, 0.02, -0.03);
  bounce(q);
  EXPECT_EQ(q.v.x, 0.02);
  EXPECT_EQ(q.v.y, -0.03);
}

TEST(Simulate, NoiseFreeMotionIsStraight)
{
  auto cfg = quiet();
  cfg.num_particles = 1;
  cfg.num_frames = 20;
  Rng rng(1);
  const auto seq = simulate(cfg, {particle(0.3, 0.4, 0.01, 0.015)}, rng);
  ASSERT_EQ(seq.num_frames(), 20);
  for (int t = 0; t < 20; ++t) {
    const auto& d = seq.frames[static_cast<std::size_t>(t)].at(0);
    EXPECT_NEAR(d.box.cx(), 0.3 + 0.01 * t, 1e-12);
    EXPECT_NEAR(d.box.cy(), 0.4 + 0.015 * t, 1e-12);
  }
}

TEST(Simulate, MutualOcclusionKeepsNearerParticle)
{
  auto cfg = quiet(Flavor::Occlusion);
  cfg.num_particles = 2;
  cfg.num_frames = 1;
  cfg.block_size_lo = cfg.block_size_hi = 0.0;  // no environmental block
  Rng rng(2);
  const auto seq = simulate(cfg, {particle(0.5, 0.5, 0, 0, 0.8, 0), particle(0.5, 0.5, 0, 0, 0.2, 1)}, rng);
  ASSERT_EQ(seq.frames[0].size(), 1u);
  EXPECT_EQ(seq.frames[0][0].gt_identity, 1);
  EXPECT_EQ(seq.gt_tracks.size(), 2u);
}

TEST(Simulate, EnvironmentalBlockHidesOverlappingParticles)
{
  auto cfg = quiet(Flavor::Occlusion);
  cfg.num_particles = 2;
  cfg.num_frames = 1;
  cfg.block_center_lo = cfg.block_center_hi = 0.5;
  cfg.block_size_lo = cfg.block_size_hi = 0.2;
  Rng rng(3);
  const auto seq = simulate(cfg, {particle(0.5, 0.5, 0, 0, 0.1, 0), particle(0.1, 0.1, 0, 0, 0.9, 1)}, rng);
  ASSERT_EQ(seq.frames[0].size(), 1u);
  EXPECT_EQ(seq.frames[0][0].gt_identity, 1);
}

TEST(SocialForce, EmptyNeighbourhood)
{
  const auto f = social_force(particle(0.5, 0.5, 0, 0), {}, 1.0, 0.5);
  EXPECT_EQ(f.x, 0.0);
  EXPECT_EQ(f.y, 0.0);
}

TEST(SocialForce, Antisymmetric)
{
  const auto a = particle(0.2, 0.3, 0, 0), b = particle(0.6, 0.45, 0, 0);
  const auto fa = social_force(a, {b}, 0.7, 0.2), fb = social_force(b, {a}, 0.7, 0.2);
  EXPECT_DOUBLE_EQ(fa.x, -fb.x);
  EXPECT_DOUBLE_EQ(fa.y, -fb.y);
}

TEST(SocialForce, HandEvaluated)
{
  const auto f = social_force(particle(0, 0, 0, 0), {particle(0.5, 0, 0, 0)}, 1.0, 0.5);
  EXPECT_NEAR(f.x, -std::exp(-1.0), 1e-15);
  EXPECT_EQ(f.y, 0.0);
}

TEST(SocialForce, CoincidentPairContributesNothing)
{
  const auto f = social_force(particle(0.4, 0.4, 0, 0), {particle(0.4, 0.4, 0, 0)}, 1.0, 0.1);
  EXPECT_EQ(f.x, 0.0);
  EXPECT_EQ(f.y, 0.0);
}

TEST(Generate, SameSeedSameSequence)
{
  SimConfig c;
  c.flavor = Flavor::Occlusion;
  c.num_frames = 50;
  c.seed = 99;
  EXPECT_EQ(dump_sequence(generate_sequence(c)), dump_sequence(generate_sequence(c)));
  auto d = c;
  d.seed = 100;
  EXPECT_NE(dump_sequence(generate_sequence(c)), dump_sequence(generate_sequence(d)));
}

TEST(Generate, DetectionNoiseMatchesSigma)
{
  SimConfig c;
  c.num_particles = 10;
  c.num_frames = 1500;
  c.seed = 5;
  const auto seq = generate_sequence(c);
  double sx = 0, sy = 0, sxx = 0, syy = 0;
  std::size_t n = 0;
  for (const auto& f : seq.frames) {
    for (const auto& d : f) {
      const auto& states = seq.gt_tracks.at(*d.gt_identity);
      const auto& gt = states.at(static_cast<std::size_t>(d.frame)).box;
      const double ex = d.box.cx() - gt.cx(), ey = d.box.cy() - gt.cy();
      sx += ex;
      sy += ey;
      sxx += ex * ex;
      syy += ey * ey;
      ++n;
    }
  }
  ASSERT_GE(n, 10000u);
  const double N = static_cast<double>(n);
  const double sd_x = std::sqrt(sxx / N - (sx / N) * (sx / N)), sd_y = std::sqrt(syy / N - (sy / N) * (sy / N));
  const double sigma = c.sigma_scale * c.detection_noise_sigma;
  EXPECT_NEAR(sd_x, sigma, 0.1 * sigma);
  EXPECT_NEAR(sd_y, sigma, 0.1 * sigma);
}

TEST(Generate, SpeedConservedWithoutForces)
{
  auto c = quiet();
  c.num_particles = 4;
  c.num_frames = 400;
  c.seed = 8;
  const auto seq = generate_sequence(c);
  for (const auto& [id, states] : seq.gt_tracks) {
    double lo = 1e9, hi = -1e9;
    for (std::size_t t = 1; t < states.size(); ++t) {
      const double dx = states[t].box.cx() - states[t - 1].box.cx();
      const double dy = states[t].box.cy() - states[t - 1].box.cy();
      lo = std::min(lo, std::hypot(dx, dy));
      hi = std::max(hi, std::hypot(dx, dy));
    }
    EXPECT_LT(hi - lo, 1e-12) << "identity " << id;
  }
}

TEST(Generate, EveryDetectionBelongsToAPresentParticle)
{
  SimConfig c;
  c.flavor = Flavor::Social;
  c.num_particles = 10;
  c.num_frames = 80;
  c.seed = 4;
  const auto seq = generate_sequence(c);
  std::set<int> ids;
  for (const auto& f : seq.frames) {
    for (const auto& d : f) {
      ASSERT_TRUE(d.gt_identity.has_value());
      EXPECT_TRUE(ids.insert(d.detection_id).second);
      const auto present = seq.gt_at(d.frame);
      EXPECT_TRUE(std::any_of(present.begin(), present.end(), [&](const auto& p) { return p.first == *d.gt_identity; }));
    }
  }
}

TEST(Generate, HeaderDeclaresParticleCount)
{
  SimConfig c;
  c.flavor = Flavor::Social;
  c.num_particles = 10;
  c.num_frames = 5;
  const auto seq = generate_sequence(c);
  EXPECT_EQ(seq.meta.config.at("num_particles").get<int>(), 10);
  EXPECT_EQ(seq.meta.flavor, "social");
}

TEST(Config, RejectsInvalidValues)
{
  SimConfig c;
  c.num_particles = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.detection_noise_sigma = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.mutual_occlusion_iou = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(flavor_from_string("windy"), std::invalid_argument);
}

TEST(Config, JsonRoundTrip)
{
  SimConfig c;
  c.flavor = Flavor::Occlusion;
  c.sigma_scale = 0.3;
  c.seed = 77;
  const auto back = sim_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

// ---- drop noise ----------------------------------------------------------------

namespace {

Sequence clean_sequence(int frames, std::uint64_t seed, int particles = 5)
{
  auto c = quiet();
  c.num_frames = frames;
  c.num_particles = particles;
  c.seed = seed;
  return generate_sequence(c);
}

}  // namespace

TEST(Drop, ZeroProbabilityIsIdentity)
{
  const auto seq = clean_sequence(60, 1);
  DropConfig d;
  EXPECT_EQ(apply_drop_noise(seq, d).frames, seq.frames);
}

TEST(Drop, CertainDropOnTenFramesLeavesOneGap)
{
  for (std::uint64_t s = 0; s < 30; ++s) {
    const auto seq = clean_sequence(10, 100 + s);
    DropConfig d;
    d.p_drop = 1.0;
    d.seed = s;
    const auto out = apply_drop_noise(seq, d);
    for (const auto& [id, states] : seq.gt_tracks) {
      std::vector<int> present;
      for (const auto& f : out.frames)
        for (const auto& det : f)
          if (det.gt_identity == id) present.push_back(det.frame);
      const int missing = 10 - static_cast<int>(present.size());
      EXPECT_GE(missing, 1);
      EXPECT_LE(missing, 5);
      // The missing frames are consecutive: one gap.
      std::vector<int> gone;
      for (int t = 0; t < 10; ++t)
        if (std::find(present.begin(), present.end(), t) == present.end()) gone.push_back(t);
      EXPECT_EQ(gone.back() - gone.front() + 1, missing);
    }
  }
}

TEST(Drop, DeletionOnly)
{
  const auto seq = clean_sequence(200, 3, 8);
  DropConfig d;
  d.p_drop = 0.4;
  d.seed = 12;
  const auto out = apply_drop_noise(seq, d);
  EXPECT_EQ(out.gt_tracks, seq.gt_tracks);
  ASSERT_EQ(out.frames.size(), seq.frames.size());
  std::size_t kept = 0;
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    std::size_t j = 0;
    for (const auto& det : out.frames[t]) {
      while (j < seq.frames[t].size() && !(seq.frames[t][j] == det)) ++j;
      ASSERT_LT(j, seq.frames[t].size()) << "surviving detection altered or reordered at frame " << t;
      ++kept;
    }
  }
  EXPECT_LT(kept, seq.num_detections());
}

TEST(Drop, RejectsInvalidConfig)
{
  DropConfig d;
  d.min_drop = 6;
  EXPECT_THROW(d.validate(), std::invalid_argument);
  d = {};
  d.p_drop = 1.2;
  EXPECT_THROW(d.validate(), std::invalid_argument);
}
