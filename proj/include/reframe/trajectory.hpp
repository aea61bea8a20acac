// Trajectories, datasets, normalization statistics, and the RFDS file
// format. Returns-to-go are derived on construction and on load, never
// serialized: the rewards are the single source of truth.
#pragma once

#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "reframe/common.hpp"
#include "reframe/env.hpp"
#include "reframe/tensor.hpp"

namespace reframe {

// Undiscounted suffix sums, accumulated back-to-front. Exact for rewards on
// the env's quantization grid (all partial sums representable).
inline std::vector<double> compute_returns_to_go(const std::vector<double>& rewards) {
  if (rewards.empty())
    throw ArgumentError("compute_returns_to_go: empty reward sequence");
  std::vector<double> rtg(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    rtg[i] = acc;
  }
  return rtg;
}

struct Trajectory {
  Tensor obs;                        // [T x obs_dim]
  Tensor act;                        // [T x act_dim]
  std::vector<double> rew;           // length T
  std::vector<double> returns_to_go; // derived from rew
  std::uint64_t episode_seed = 0;

  std::int64_t length() const { return static_cast<std::int64_t>(rew.size()); }

  double episode_return() const {
    return returns_to_go.empty() ? 0.0 : returns_to_go[0];
  }

  void finalize() {
    returns_to_go = compute_returns_to_go(rew);
    if (obs.shape[0] != length() || act.shape[0] != length())
      throw DimensionError("trajectory fields disagree on length");
  }
};

struct NormStats {
  std::vector<double> obs_mean;
  std::vector<double> obs_std;   // zero-variance dims keep std 1
  double return_scale = 1.0;     // divisor applied to returns-to-go
};

struct TrajectoryDataset {
  EnvSpec spec;
  std::string tier;
  std::uint64_t gen_config_hash = 0;
  NormStats stats;
  std::vector<Trajectory> trajectories;

  std::int64_t total_steps() const {
    std::int64_t n = 0;
    for (const Trajectory& t : trajectories) n += t.length();
    return n;
  }

  double mean_return() const {
    if (trajectories.empty()) return 0.0;
    double s = 0.0;
    for (const Trajectory& t : trajectories) s += t.episode_return();
    return s / static_cast<double>(trajectories.size());
  }
};

// Per-dim observation mean/std over every timestep. The return scale is the
// environment's expert anchor, so a scaled return of 1.0 means expert-level;
// suboptimal (more negative) returns scale to values above 1.
inline NormStats compute_stats(const TrajectoryDataset& ds) {
  NormStats st;
  std::int64_t d = ds.spec.obs_dim;
  st.obs_mean.assign(static_cast<std::size_t>(d), 0.0);
  st.obs_std.assign(static_cast<std::size_t>(d), 1.0);
  std::int64_t n = ds.total_steps();
  if (n == 0) return st;
  for (const Trajectory& t : ds.trajectories)
    for (std::int64_t i = 0; i < t.length(); ++i)
      for (std::int64_t j = 0; j < d; ++j)
        st.obs_mean[static_cast<std::size_t>(j)] += t.obs.at(i, j);
  for (std::int64_t j = 0; j < d; ++j)
    st.obs_mean[static_cast<std::size_t>(j)] /= static_cast<double>(n);
  std::vector<double> var(static_cast<std::size_t>(d), 0.0);
  for (const Trajectory& t : ds.trajectories)
    for (std::int64_t i = 0; i < t.length(); ++i)
      for (std::int64_t j = 0; j < d; ++j) {
        double dev = t.obs.at(i, j) - st.obs_mean[static_cast<std::size_t>(j)];
        var[static_cast<std::size_t>(j)] += dev * dev;
      }
  for (std::int64_t j = 0; j < d; ++j) {
    double v = var[static_cast<std::size_t>(j)] / static_cast<double>(n);
    if (v > 0.0) st.obs_std[static_cast<std::size_t>(j)] = std::sqrt(v);
  }
  st.return_scale = ds.spec.expert_anchor != 0.0 ? ds.spec.expert_anchor : 1.0;
  return st;
}

// ----------------------------------------------------------- RFDS format
//
//   magic "RFDS" | version u32 | env-spec block | stats block
//   | tier string | gen-config hash u64 | trajectory count u64
//   | per trajectory: T u32 | episode seed u64 | obs f64[T*obs_dim]
//                   | act f64[T*act_dim] | rew f64[T]

constexpr std::uint32_t kDatasetVersion = 1;

inline void write_stats(std::ostream& os, const NormStats& st) {
  io::write_u32(os, static_cast<std::uint32_t>(st.obs_mean.size()));
  io::write_f64_array(os, st.obs_mean.data(), st.obs_mean.size());
  io::write_f64_array(os, st.obs_std.data(), st.obs_std.size());
  io::write_f64(os, st.return_scale);
}

inline NormStats read_stats(std::istream& is) {
  NormStats st;
  std::uint32_t d = io::read_u32(is);
  if (d > (1u << 16)) throw FormatError("implausible stats width", io::tell(is));
  st.obs_mean.resize(d);
  st.obs_std.resize(d);
  io::read_f64_array(is, st.obs_mean.data(), d);
  io::read_f64_array(is, st.obs_std.data(), d);
  st.return_scale = io::read_f64(is);
  return st;
}

inline void save_dataset(std::ostream& os, const TrajectoryDataset& ds) {
  io::write_magic(os, "RFDS", kDatasetVersion);
  write_env_spec(os, ds.spec);
  write_stats(os, ds.stats);
  io::write_string(os, ds.tier);
  io::write_u64(os, ds.gen_config_hash);
  io::write_u64(os, static_cast<std::uint64_t>(ds.trajectories.size()));
  for (const Trajectory& t : ds.trajectories) {
    io::write_u32(os, static_cast<std::uint32_t>(t.length()));
    io::write_u64(os, t.episode_seed);
    io::write_f64_array(os, t.obs.data.data(), t.obs.data.size());
    io::write_f64_array(os, t.act.data.data(), t.act.data.size());
    io::write_f64_array(os, t.rew.data(), t.rew.size());
  }
}

inline TrajectoryDataset load_dataset(std::istream& is) {
  io::expect_magic(is, "RFDS", kDatasetVersion);
  TrajectoryDataset ds;
  ds.spec = read_env_spec(is);
  ds.stats = read_stats(is);
  ds.tier = io::read_string(is);
  ds.gen_config_hash = io::read_u64(is);
  std::uint64_t count = io::read_u64(is);
  ds.trajectories.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t T = io::read_u32(is);
    if (T == 0 || T > static_cast<std::uint32_t>(ds.spec.horizon))
      throw FormatError("trajectory length " + std::to_string(T) +
                            " outside [1, horizon]",
                        io::tell(is));
    Trajectory t;
    t.episode_seed = io::read_u64(is);
    t.obs = Tensor({static_cast<std::int64_t>(T), ds.spec.obs_dim});
    t.act = Tensor({static_cast<std::int64_t>(T), ds.spec.act_dim});
    t.rew.resize(T);
    io::read_f64_array(is, t.obs.data.data(), t.obs.data.size());
    io::read_f64_array(is, t.act.data.data(), t.act.data.size());
    io::read_f64_array(is, t.rew.data(), t.rew.size());
    t.finalize();
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

inline void save_dataset_file(const std::string& path, const TrajectoryDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot open '" + path + "' for writing");
  save_dataset(os, ds);
  os.flush();
  if (!os) throw StateError("write failed for '" + path + "'");
}

inline TrajectoryDataset load_dataset_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot open '" + path + "' for reading");
  return load_dataset(is);
}

inline std::uint64_t dataset_bytes_hash(const TrajectoryDataset& ds) {
  std::ostringstream os(std::ios::binary);
  save_dataset(os, ds);
  std::string s = os.str();
  return fnv1a64(s.data(), s.size());
}

}  // namespace reframe
