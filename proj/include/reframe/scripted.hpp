// Scripted data-collection policies in four quality tiers, and dataset
// generation. A PD controller steers toward the goal (detouring around the
// penalty disc when one is present); tiers differ in gains and noise.
//
// Gain presets were chosen with tools/calibrate so that, on both envs,
// expert lands >= 90% of the best constant-gain return and medium lands
// near one third of the expert-random gap. Do not tweak casually: the
// normalization anchors in env.hpp were measured under these presets.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "reframe/common.hpp"
#include "reframe/env.hpp"
#include "reframe/rng.hpp"
#include "reframe/trajectory.hpp"

namespace reframe {

enum class Tier { kExpert, kMedium, kMediumReplay, kRandom };

inline const char* tier_name(Tier t) {
  switch (t) {
    case Tier::kExpert: return "expert";
    case Tier::kMedium: return "medium";
    case Tier::kMediumReplay: return "medium_replay";
    case Tier::kRandom: return "random";
  }
  return "?";
}

inline Tier tier_from_name(const std::string& s) {
  if (s == "expert") return Tier::kExpert;
  if (s == "medium") return Tier::kMedium;
  if (s == "medium_replay") return Tier::kMediumReplay;
  if (s == "random") return Tier::kRandom;
  throw ConfigError("unknown tier '" + s + "'");
}

struct PolicyTier {
  Tier tier = Tier::kRandom;
  double kp = 0.0;
  double kd = 0.0;
  double noise = 0.0;  // stddev of per-dim Gaussian action noise
};

// Medium gains differ per environment: the obstacle course needs a slightly
// stronger controller to land at the same ~1/3 normalized level.
inline PolicyTier tier_preset(Tier t, const EnvSpec& spec) {
  bool hard = spec.has_obstacle;
  PolicyTier p;
  p.tier = t;
  switch (t) {
    case Tier::kExpert:
      p.kp = 1.8;
      p.kd = 1.9;
      p.noise = 0.02;
      break;
    case Tier::kMedium:
    case Tier::kMediumReplay:  // endpoint gains; annealed per episode
      p.kp = hard ? 0.052 : 0.030;
      p.kd = hard ? 0.099 : 0.057;
      p.noise = 0.60;
      break;
    case Tier::kRandom:
      break;
  }
  return p;
}

// Where the controller aims. Normally the goal; when the straight segment
// from the current position to the goal cuts through the penalty disc, a
// detour waypoint offset sideways from the disc.
inline std::array<double, 2> steering_target(const EnvSpec& spec,
                                             const std::array<double, 2>& pos) {
  if (!spec.has_obstacle) return spec.goal;
  double dx = spec.goal[0] - pos[0];
  double dy = spec.goal[1] - pos[1];
  double len = std::sqrt(dx * dx + dy * dy);
  if (len < 1e-9) return spec.goal;
  double ux = dx / len, uy = dy / len;
  double cx = spec.obstacle_center[0] - pos[0];
  double cy = spec.obstacle_center[1] - pos[1];
  double proj = cx * ux + cy * uy;
  if (proj <= 0.0 || proj >= len) return spec.goal;  // disc not in between
  double perp_x = cx - proj * ux;
  double perp_y = cy - proj * uy;
  double dist = std::sqrt(perp_x * perp_x + perp_y * perp_y);
  double clearance = spec.obstacle_radius + 0.15;
  if (dist >= clearance) return spec.goal;
  // offset sideways, away from the disc center; break the symmetric case
  // with a fixed left turn
  double off_x, off_y;
  if (dist < 1e-9) {
    off_x = -uy;
    off_y = ux;
  } else {
    off_x = -perp_x / dist;
    off_y = -perp_y / dist;
  }
  return {spec.obstacle_center[0] + off_x * (clearance + 0.25),
          spec.obstacle_center[1] + off_y * (clearance + 0.25)};
}

// PD rule: u = -kp*(pos - target) - kd*vel + noise, clamped to bounds.
inline std::vector<double> scripted_action(const EnvSpec& spec,
                                           const PolicyTier& tier,
                                           const std::vector<double>& obs,
                                           Rng& rng) {
  if (static_cast<int>(obs.size()) != spec.obs_dim)
    throw DimensionError("scripted_action: obs dim " + std::to_string(obs.size()));
  std::vector<double> a(static_cast<std::size_t>(spec.act_dim), 0.0);
  if (tier.tier == Tier::kRandom) {
    for (double& v : a) v = rng.uniform(spec.act_lo, spec.act_hi);
    return a;
  }
  std::array<double, 2> target = steering_target(spec, {obs[0], obs[1]});
  for (int i = 0; i < 2; ++i) {
    std::size_t ui = static_cast<std::size_t>(i);
    double u = -tier.kp * (obs[ui] - target[ui]) - tier.kd * obs[ui + 2];
    if (tier.noise > 0.0) u += tier.noise * rng.normal();
    a[ui] = std::min(spec.act_hi, std::max(spec.act_lo, u));
  }
  return a;
}

inline Trajectory rollout_scripted(const EnvSpec& spec, const PolicyTier& tier,
                                   std::uint64_t episode_seed) {
  EnvState st = env_reset(spec, episode_seed);
  Rng noise_rng(episode_seed, streams::kPolicyNoise);
  Trajectory traj;
  traj.episode_seed = episode_seed;
  traj.obs = Tensor({spec.horizon, spec.obs_dim});
  traj.act = Tensor({spec.horizon, spec.act_dim});
  traj.rew.resize(static_cast<std::size_t>(spec.horizon));
  for (int t = 0; t < spec.horizon; ++t) {
    std::vector<double> obs = observe(st);
    std::vector<double> a = scripted_action(spec, tier, obs, noise_rng);
    for (int j = 0; j < spec.obs_dim; ++j) traj.obs.at(t, j) = obs[static_cast<std::size_t>(j)];
    for (int j = 0; j < spec.act_dim; ++j) traj.act.at(t, j) = a[static_cast<std::size_t>(j)];
    traj.rew[static_cast<std::size_t>(t)] = env_step(spec, st, a);
  }
  traj.finalize();
  return traj;
}

// medium_replay anneals gains from a weak controller toward the medium
// preset across the dataset, imitating a replay buffer captured while an
// agent improves. All other tiers use the fixed preset per episode.
inline PolicyTier tier_for_episode(const EnvSpec& spec, Tier tier,
                                   std::int64_t episode, std::int64_t n_traj) {
  PolicyTier p = tier_preset(tier, spec);
  if (tier != Tier::kMediumReplay) return p;
  double frac = n_traj > 1
                    ? static_cast<double>(episode) / static_cast<double>(n_traj - 1)
                    : 1.0;
  PolicyTier weak;
  weak.kp = 0.004;
  weak.kd = 0.008;
  weak.noise = 0.85;
  p.tier = Tier::kMediumReplay;
  p.kp = weak.kp + frac * (p.kp - weak.kp);
  p.kd = weak.kd + frac * (p.kd - weak.kd);
  p.noise = weak.noise + frac * (p.noise - weak.noise);
  return p;
}

inline std::uint64_t gen_config_hash(const EnvSpec& spec, Tier tier,
                                     std::int64_t n_traj, std::uint64_t seed) {
  PolicyTier p = tier_preset(tier, spec);
  std::string canon = "env=" + spec.name + ";tier=" + tier_name(tier) +
                      ";n=" + std::to_string(n_traj) +
                      ";seed=" + std::to_string(seed) + ";kp=" + format_f64(p.kp) +
                      ";kd=" + format_f64(p.kd) + ";noise=" + format_f64(p.noise);
  return fnv1a64(canon);
}

inline TrajectoryDataset generate_dataset(const EnvSpec& spec, Tier tier,
                                          std::int64_t n_traj,
                                          std::uint64_t seed) {
  if (n_traj < 1) throw ArgumentError("generate_dataset: n_traj must be >= 1");
  spec.validate();
  TrajectoryDataset ds;
  ds.spec = spec;
  ds.tier = tier_name(tier);
  ds.gen_config_hash = gen_config_hash(spec, tier, n_traj, seed);
  ds.trajectories.reserve(static_cast<std::size_t>(n_traj));
  for (std::int64_t i = 0; i < n_traj; ++i) {
    PolicyTier p = tier_for_episode(spec, tier, i, n_traj);
    std::uint64_t episode_seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    ds.trajectories.push_back(rollout_scripted(spec, p, episode_seed));
  }
  ds.stats = compute_stats(ds);
  return ds;
}

}  // namespace reframe
