// Toy continuous control: a 2-D point mass steered toward a goal.
//
// Dynamics are a discrete double integrator, deterministic given (state,
// action). The "hard" variant adds a penalty disc between start and goal.
// Rewards are snapped to a 2^-20 grid so that undiscounted suffix sums stay
// exactly representable in f64 (episode sums use at most ~50 mantissa bits);
// this is what makes the return bookkeeping exact rather than approximate.
#pragma once

#include <array>
#include <cmath>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "reframe/common.hpp"
#include "reframe/rng.hpp"

namespace reframe {

constexpr double kRewardGrid = 1.0 / 1048576.0;  // 2^-20

inline double quantize_reward(double r) {
  return std::nearbyint(r / kRewardGrid) * kRewardGrid;
}

struct EnvSpec {
  std::string name;
  int obs_dim = 4;  // [px, py, vx, vy]
  int act_dim = 2;
  int horizon = 100;
  double dt = 0.1;
  double action_cost = 0.01;
  double act_lo = -1.0;
  double act_hi = 1.0;
  std::array<double, 2> goal = {1.0, 1.0};
  std::array<double, 2> start_center = {-1.0, -1.0};
  double start_spread = 0.25;  // uniform half-width around start_center
  bool has_obstacle = false;
  std::array<double, 2> obstacle_center = {0.0, 0.0};
  double obstacle_radius = 0.4;
  double obstacle_penalty = 5.0;
  // Mean episode returns of the scripted random/expert policies, measured
  // once over 1000 episodes and frozen here as scoring anchors.
  double random_anchor = 0.0;
  double expert_anchor = 0.0;

  void validate() const {
    if (obs_dim < 1 || act_dim < 1 || horizon < 1)
      throw ConfigError("env '" + name + "': dims and horizon must be >= 1");
    if (act_lo >= act_hi)
      throw ConfigError("env '" + name + "': action bounds must satisfy lo < hi");
  }
};

// Anchor values come from tools/calibrate; see that tool for the protocol.
inline EnvSpec make_env(const std::string& name) {
  EnvSpec s;
  s.name = name;
  if (name == "pointmass_easy") {
    s.random_anchor = -340.44795423221586;
    s.expert_anchor = -41.41959230709076;
  } else if (name == "pointmass_hard") {
    s.has_obstacle = true;
    s.random_anchor = -347.83295423221585;
    s.expert_anchor = -62.681866278648378;
  } else {
    throw ConfigError("unknown environment '" + name + "'");
  }
  return s;
}

inline double normalized_score(const EnvSpec& spec, double episode_return) {
  return 100.0 * (episode_return - spec.random_anchor) /
         (spec.expert_anchor - spec.random_anchor);
}

struct EnvState {
  std::array<double, 2> pos = {0.0, 0.0};
  std::array<double, 2> vel = {0.0, 0.0};
  int step = 0;
};

inline std::vector<double> observe(const EnvState& s) {
  return {s.pos[0], s.pos[1], s.vel[0], s.vel[1]};
}

inline EnvState env_reset(const EnvSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed, streams::kEnvInit);
  EnvState s;
  for (int i = 0; i < 2; ++i)
    s.pos[static_cast<std::size_t>(i)] =
        spec.start_center[static_cast<std::size_t>(i)] +
        rng.uniform(-spec.start_spread, spec.start_spread);
  return s;
}

inline double env_step(const EnvSpec& spec, EnvState& s,
                       const std::vector<double>& action) {
  if (s.step >= spec.horizon)
    throw StateError("env_step on terminal state (step " +
                     std::to_string(s.step) + " of " +
                     std::to_string(spec.horizon) + ")");
  if (static_cast<int>(action.size()) != spec.act_dim)
    throw DimensionError("env_step: action dim " + std::to_string(action.size()));
  double cost = 0.0;
  for (int i = 0; i < 2; ++i) {
    double a = std::min(spec.act_hi, std::max(spec.act_lo, action[static_cast<std::size_t>(i)]));
    cost += a * a;
    s.vel[static_cast<std::size_t>(i)] += spec.dt * a;
    s.pos[static_cast<std::size_t>(i)] += spec.dt * s.vel[static_cast<std::size_t>(i)];
  }
  double dx = s.pos[0] - spec.goal[0];
  double dy = s.pos[1] - spec.goal[1];
  double reward = -std::sqrt(dx * dx + dy * dy) - spec.action_cost * cost;
  if (spec.has_obstacle) {
    double ox = s.pos[0] - spec.obstacle_center[0];
    double oy = s.pos[1] - spec.obstacle_center[1];
    if (std::sqrt(ox * ox + oy * oy) < spec.obstacle_radius)
      reward -= spec.obstacle_penalty;
  }
  ++s.step;
  return quantize_reward(reward);
}

// ----------------------------------------------------------- serialization

inline void write_env_spec(std::ostream& os, const EnvSpec& s) {
  io::write_string(os, s.name);
  io::write_u32(os, static_cast<std::uint32_t>(s.obs_dim));
  io::write_u32(os, static_cast<std::uint32_t>(s.act_dim));
  io::write_u32(os, static_cast<std::uint32_t>(s.horizon));
  io::write_f64(os, s.dt);
  io::write_f64(os, s.action_cost);
  io::write_f64(os, s.act_lo);
  io::write_f64(os, s.act_hi);
  io::write_f64(os, s.goal[0]);
  io::write_f64(os, s.goal[1]);
  io::write_f64(os, s.start_center[0]);
  io::write_f64(os, s.start_center[1]);
  io::write_f64(os, s.start_spread);
  io::write_u32(os, s.has_obstacle ? 1 : 0);
  io::write_f64(os, s.obstacle_center[0]);
  io::write_f64(os, s.obstacle_center[1]);
  io::write_f64(os, s.obstacle_radius);
  io::write_f64(os, s.obstacle_penalty);
  io::write_f64(os, s.random_anchor);
  io::write_f64(os, s.expert_anchor);
}

inline EnvSpec read_env_spec(std::istream& is) {
  EnvSpec s;
  s.name = io::read_string(is);
  s.obs_dim = static_cast<int>(io::read_u32(is));
  s.act_dim = static_cast<int>(io::read_u32(is));
  s.horizon = static_cast<int>(io::read_u32(is));
  s.dt = io::read_f64(is);
  s.action_cost = io::read_f64(is);
  s.act_lo = io::read_f64(is);
  s.act_hi = io::read_f64(is);
  s.goal[0] = io::read_f64(is);
  s.goal[1] = io::read_f64(is);
  s.start_center[0] = io::read_f64(is);
  s.start_center[1] = io::read_f64(is);
  s.start_spread = io::read_f64(is);
  s.has_obstacle = io::read_u32(is) != 0;
  s.obstacle_center[0] = io::read_f64(is);
  s.obstacle_center[1] = io::read_f64(is);
  s.obstacle_radius = io::read_f64(is);
  s.obstacle_penalty = io::read_f64(is);
  s.random_anchor = io::read_f64(is);
  s.expert_anchor = io::read_f64(is);
  s.validate();
  return s;
}

}  // namespace reframe
