// sim.hpp: particle-world sequence generator.
//
// Particles live in the unit box. Each step adds a force to the velocity
// (Gaussian for basic/occlusion, pairwise repulsion for social), reverses any velocity
// component whose center lies outside [0,1] and still points outward, then
// moves the particle by its velocity. Detections are GT centers plus Gaussian
// noise, with occlusion-flavor deletions.

#pragma once

#include "softtrack/random.hpp"
#include "softtrack/sequence.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace softtrack::sim {

enum class Flavor
{
  Basic,
  Occlusion,
  Social,
};

inline std::string to_string(Flavor f)
{
  switch (f) {
    case Flavor::Basic: return "basic";
    case Flavor::Occlusion: return "occlusion";
    case Flavor::Social: return "social";
  }
  return "basic";
}

inline Flavor flavor_from_string(const std::string& s)
{
  if (s == "basic") return Flavor::Basic;
  if (s == "occlusion") return Flavor::Occlusion;
  if (s == "social") return Flavor::Social;
  throw std::invalid_argument("unknown simulation flavor '" + s + "'");
}

struct SimConfig
{
  Flavor flavor = Flavor::Basic;
  int num_particles = 5;
  int num_frames = 600;
  double particle_radius = 0.05;
  double initial_velocity_sigma = 0.1;
  double force_sigma = 0.01;
  double detection_noise_sigma = 0.05;
  double sigma_scale = 1.0;  // multiplies the three sigmas above
  double mutual_occlusion_iou = 0.3;
  double social_F0 = 0.02;
  double social_R = 0.1;
  // Environmental occluder: center ~ U(lo, hi)^2, width and height ~ U(lo, hi).
  double block_center_lo = 0.2;
  double block_center_hi = 0.8;
  double block_size_lo = 0.1;
  double block_size_hi = 0.3;
  std::uint64_t seed = 0;

  void validate() const
  {
    if (num_particles < 1) throw std::invalid_argument("SimConfig: num_particles must be >= 1");
    if (num_frames < 1) throw std::invalid_argument("SimConfig: num_frames must be >= 1");
    if (particle_radius < 0.0 || initial_velocity_sigma < 0.0 || force_sigma < 0.0 ||
        detection_noise_sigma < 0.0 || sigma_scale < 0.0) {
      throw std::invalid_argument("SimConfig: radius and sigmas must be non-negative");
    }
    if (mutual_occlusion_iou < 0.0 || mutual_occlusion_iou > 1.0) {
      throw std::invalid_argument("SimConfig: mutual_occlusion_iou must lie in [0,1]");
    }
    if (social_R <= 0.0) throw std::invalid_argument("SimConfig: social_R must be positive");
  }
};

inline nlohmann::json to_json(const SimConfig& c)
{
  return {
    {"flavor", to_string(c.flavor)},
    {"num_particles", c.num_particles},
    {"num_frames", c.num_frames},
    {"particle_radius", c.particle_radius},
    {"initial_velocity_sigma", c.initial_velocity_sigma},
    {"force_sigma", c.force_sigma},
    {"detection_noise_sigma", c.detection_noise_sigma},
    {"sigma_scale", c.sigma_scale},
    {"mutual_occlusion_iou", c.mutual_occlusion_iou},
    {"social_F0", c.social_F0},
    {"social_R", c.social_R},
    {"block_center", {c.block_center_lo, c.block_center_hi}},
    {"block_size", {c.block_size_lo, c.block_size_hi}},
    {"seed", c.seed},
  };
}

/// Reads a config; missing keys keep their defaults.
inline SimConfig sim_config_from_json(const nlohmann::json& j, SimConfig c = {})
{
  if (j.contains("flavor")) c.flavor = flavor_from_string(j.at("flavor").get<std::string>());
  c.num_particles = j.value("num_particles", c.num_particles);
  c.num_frames = j.value("num_frames", c.num_frames);
  c.particle_radius = j.value("particle_radius", c.particle_radius);
  c.initial_velocity_sigma = j.value("initial_velocity_sigma", c.initial_velocity_sigma);
  c.force_sigma = j.value("force_sigma", c.force_sigma);
  c.detection_noise_sigma = j.value("detection_noise_sigma", c.detection_noise_sigma);
  c.sigma_scale = j.value("sigma_scale", c.sigma_scale);
  c.mutual_occlusion_iou = j.value("mutual_occlusion_iou", c.mutual_occlusion_iou);
  c.social_F0 = j.value("social_F0", c.social_F0);
  c.social_R = j.value("social_R", c.social_R);
  if (j.contains("block_center")) {
    c.block_center_lo = j.at("block_center").at(0).get<double>();
    c.block_center_hi = j.at("block_center").at(1).get<double>();
  }
  if (j.contains("block_size")) {
    c.block_size_lo = j.at("block_size").at(0).get<double>();
    c.block_size_hi = j.at("block_size").at(1).get<double>();
  }
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

struct Vec2
{
  double x = 0.0;
  double y = 0.0;
};

struct Particle
{
  Vec2 p;
  Vec2 v;
  double depth = 0.0;
  int identity = 0;
};

/// Σ_j F0·exp(−|p_i − p_j|/R)·unit(p_i − p_j); coincident pairs contribute nothing.
inline Vec2 social_force(const Particle& target, const std::vector<Particle>& others, double F0,
                         double R)
{
  Vec2 f;
  for (const auto& o : others) {
    const double dx = target.p.x - o.p.x;
    const double dy = target.p.y - o.p.y;
    const double d = std::hypot(dx, dy);
    if (d == 0.0) {
      continue;
    }
    const double mag = F0 * std::exp(-d / R);
    f.x += mag * dx / d;
    f.y += mag * dy / d;
  }
  return f;
}

/// Reverses velocity components whose center is outside [0,1] and moving outward.
inline void bounce(Particle& q)
{
  if ((q.p.x > 1.0 && q.v.x > 0.0) || (q.p.x < 0.0 && q.v.x < 0.0)) {
    q.v.x = -q.v.x;
  }
  if ((q.p.y > 1.0 && q.v.y > 0.0) || (q.p.y < 0.0 && q.v.y < 0.0)) {
    q.v.y = -q.v.y;
  }
}

inline BoundingBox particle_box(const Vec2& c, double radius)
{
  return BoundingBox::from_center(c.x, c.y, radius, radius);
}

/// Indices of particles whose detection is suppressed at this instant.
inline std::vector<bool> occluded_mask(const std::vector<Particle>& ps, const SimConfig& cfg,
                                       const BoundingBox* block)
{
  std::vector<bool> hidden(ps.size(), false);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto bi = particle_box(ps[i].p, cfg.particle_radius);
    for (std::size_t j = 0; j < ps.size() && !hidden[i]; ++j) {
      if (i == j) continue;
      const auto bj = particle_box(ps[j].p, cfg.particle_radius);
      const bool behind = ps[i].depth > ps[j].depth || (ps[i].depth == ps[j].depth && i > j);
      if (behind && iou(bi, bj) > cfg.mutual_occlusion_iou) {
        hidden[i] = true;
      }
    }
    if (block && !hidden[i]) {
      const double iw = std::min(bi.x2, block->x2) - std::max(bi.x1, block->x1);
      const double ih = std::min(bi.y2, block->y2) - std::max(bi.y1, block->y1);
      hidden[i] = iw > 0.0 && ih > 0.0;
    }
  }
  return hidden;
}

/// Sequence from explicit initial particles; randomness (noise, forces, block) from rng.
inline Sequence simulate(const SimConfig& cfg, std::vector<Particle> ps, Rng& rng)
{
  cfg.validate();
  Sequence seq;
  seq.meta.flavor = to_string(cfg.flavor);
  seq.meta.seed = cfg.seed;
  seq.meta.config = to_json(cfg);

  std::optional<BoundingBox> block;
  if (cfg.flavor == Flavor::Occlusion) {
    const double cx = rng.uniform(cfg.block_center_lo, cfg.block_center_hi);
    const double cy = rng.uniform(cfg.block_center_lo, cfg.block_center_hi);
    const double w = rng.uniform(cfg.block_size_lo, cfg.block_size_hi);
    const double h = rng.uniform(cfg.block_size_lo, cfg.block_size_hi);
    block = BoundingBox::from_center(cx, cy, 0.5 * w, 0.5 * h);
    seq.meta.config["block"] = {block->x1, block->y1, block->x2, block->y2};
  }

  const double r = cfg.particle_radius;
  int next_detection = 0;
  seq.frames.resize(static_cast<std::size_t>(cfg.num_frames));
  for (int t = 0; t < cfg.num_frames; ++t) {
    std::vector<bool> hidden(ps.size(), false);
    if (cfg.flavor == Flavor::Occlusion) {
      hidden = occluded_mask(ps, cfg, block ? &*block : nullptr);
    }
    auto& dets = seq.frames[static_cast<std::size_t>(t)];
    for (std::size_t i = 0; i < ps.size(); ++i) {
      seq.gt_tracks[ps[i].identity].push_back({t, particle_box(ps[i].p, r)});
      // Noise is drawn even for hidden particles so the stream layout is flavor-independent.
      const double nx = rng.normal(0.0, cfg.sigma_scale * cfg.detection_noise_sigma);
      const double ny = rng.normal(0.0, cfg.sigma_scale * cfg.detection_noise_sigma);
      if (hidden[i]) continue;
      Detection d;
      d.frame = t;
      d.box = particle_box({ps[i].p.x + nx, ps[i].p.y + ny}, r);
      d.gt_identity = ps[i].identity;
      d.detection_id = next_detection++;
      dets.push_back(d);
    }

    // Advance to t + 1.
    std::vector<Vec2> force(ps.size());
    if (cfg.flavor != Flavor::Social) {
      for (auto& f : force) {
        f.x = rng.normal(0.0, cfg.sigma_scale * cfg.force_sigma);
        f.y = rng.normal(0.0, cfg.sigma_scale * cfg.force_sigma);
      }
    } else {
      for (std::size_t i = 0; i < ps.size(); ++i) {
        std::vector<Particle> others;
        others.reserve(ps.size() - 1);
        for (std::size_t j = 0; j < ps.size(); ++j) {
          if (j != i) others.push_back(ps[j]);
        }
        force[i] = social_force(ps[i], others, cfg.social_F0, cfg.social_R);
      }
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
      ps[i].v.x += force[i].x;
      ps[i].v.y += force[i].y;
      bounce(ps[i]);
      ps[i].p.x += ps[i].v.x;
      ps[i].p.y += ps[i].v.y;
    }
  }
  return seq;
}

/// p ~ U(0,1)², v ~ N(0, σ_v)², depth ~ U(0,1).
inline std::vector<Particle> sample_particles(const SimConfig& cfg, Rng& rng)
{
  std::vector<Particle> ps(static_cast<std::size_t>(cfg.num_particles));
  for (int i = 0; i < cfg.num_particles; ++i) {
    auto& q = ps[static_cast<std::size_t>(i)];
    q.identity = i;
    q.p = {rng.uniform(), rng.uniform()};
    q.v = {rng.normal(0.0, cfg.sigma_scale * cfg.initial_velocity_sigma), rng.normal(0.0, cfg.sigma_scale * cfg.initial_velocity_sigma)};
    q.depth = rng.uniform();
  }
  return ps;
}

inline Sequence generate_sequence(const SimConfig& cfg)
{
  cfg.validate();
  Rng rng(cfg.seed);
  auto ps = sample_particles(cfg, rng);
  return simulate(cfg, std::move(ps), rng);
}

struct DropConfig
{
  double p_drop = 0.0;
  int block_period = 10;
  int min_drop = 1;
  int max_drop = 5;
  std::uint64_t seed = 0;

  void validate() const
  {
    if (p_drop < 0.0 || p_drop > 1.0) throw std::invalid_argument("DropConfig: p_drop outside [0,1]");
    if (!(1 <= min_drop && min_drop <= max_drop && max_drop <= block_period)) {
      throw std::invalid_argument("DropConfig: need 1 <= min_drop <= max_drop <= block_period");
    }
  }
};

/// Per identity and per block of block_period consecutive GT frames, with
/// probability p_drop deletes U{min_drop..max_drop} consecutive detections at
/// a uniform offset that keeps the gap inside the block.
inline Sequence apply_drop_noise(const Sequence& in, const DropConfig& drop)
{
  drop.validate();
  Sequence out = in;
  if (drop.p_drop == 0.0) {
    return out;
  }
  Rng rng(drop.seed);
  std::map<int, std::vector<int>> dropped;  // identity -> frames
  for (const auto& [id, states] : in.gt_tracks) {
    const int n = static_cast<int>(states.size());
    for (int start = 0; start < n; start += drop.block_period) {
      const int len = std::min(drop.block_period, n - start);
      if (!rng.bernoulli(drop.p_drop)) continue;
      const int count = std::min(len, static_cast<int>(rng.uniform_int(drop.min_drop, drop.max_drop)));
      const int offset = static_cast<int>(rng.uniform_int(0, len - count));
      for (int k = 0; k < count; ++k) {
        dropped[id].push_back(states[static_cast<std::size_t>(start + offset + k)].frame);
      }
    }
  }
  for (auto& frame : out.frames) {
    std::erase_if(frame, [&](const Detection& d) {
      if (!d.gt_identity) return false;
      auto it = dropped.find(*d.gt_identity);
      return it != dropped.end() &&
             std::find(it->second.begin(), it->second.end(), d.frame) != it->second.end();
    });
  }
  out.meta.config["drop"] = {{"p_drop", drop.p_drop}, {"block_period", drop.block_period},
                             {"min_drop", drop.min_drop}, {"max_drop", drop.max_drop},
                             {"seed", drop.seed}};
  return out;
}

}  // namespace softtrack::sim
