// Context windows: the (return-to-go, observation, action) slices that feed
// the sequence model, left-padded to a fixed K with a validity mask.
//
// Batches carry both normalized fields (policy tokens) and raw fields; the
// retrieval path re-normalizes raw values with the buffer's own statistics,
// which may come from a different dataset than the policy's.
#pragma once

#include <algorithm>
#include <vector>

#include "reframe/common.hpp"
#include "reframe/rng.hpp"
#include "reframe/tensor.hpp"
#include "reframe/trajectory.hpp"

namespace reframe {

struct ContextBatch {
  std::int64_t B = 0;
  std::int64_t K = 0;
  Tensor rtg;       // [B*K x 1], divided by return scale
  Tensor obs;       // [B*K x obs_dim], standardized
  Tensor act;       // [B*K x act_dim], native units (also the loss target)
  Tensor raw_rtg;   // [B*K x 1], unscaled
  Tensor raw_obs;   // [B*K x obs_dim], unstandardized
  std::vector<std::int64_t> timesteps;  // absolute episode step, 0 when padded
  std::vector<std::uint8_t> mask;       // 1 = real data, 0 = padding
};

namespace detail {

inline void fill_context_row(ContextBatch& cb, std::int64_t row,
                             const Trajectory& traj, std::int64_t t,
                             const NormStats& stats) {
  std::int64_t od = cb.obs.shape[1], ad = cb.act.shape[1];
  cb.raw_rtg.at(row, 0) = traj.returns_to_go[static_cast<std::size_t>(t)];
  cb.rtg.at(row, 0) = traj.returns_to_go[static_cast<std::size_t>(t)] / stats.return_scale;
  for (std::int64_t j = 0; j < od; ++j) {
    double v = traj.obs.at(t, j);
    cb.raw_obs.at(row, j) = v;
    cb.obs.at(row, j) = (v - stats.obs_mean[static_cast<std::size_t>(j)]) /
                        stats.obs_std[static_cast<std::size_t>(j)];
  }
  for (std::int64_t j = 0; j < ad; ++j) cb.act.at(row, j) = traj.act.at(t, j);
  cb.timesteps[static_cast<std::size_t>(row)] = t;
  cb.mask[static_cast<std::size_t>(row)] = 1;
}

}  // namespace detail

inline ContextBatch make_empty_context(std::int64_t B, std::int64_t K,
                                       std::int64_t obs_dim, std::int64_t act_dim) {
  if (B < 1 || K < 1)
    throw ArgumentError("context: batch size and K must be >= 1");
  ContextBatch cb;
  cb.B = B;
  cb.K = K;
  cb.rtg = Tensor({B * K, 1});
  cb.obs = Tensor({B * K, obs_dim});
  cb.act = Tensor({B * K, act_dim});
  cb.raw_rtg = Tensor({B * K, 1});
  cb.raw_obs = Tensor({B * K, obs_dim});
  cb.timesteps.assign(static_cast<std::size_t>(B * K), 0);
  cb.mask.assign(static_cast<std::size_t>(B * K), 0);
  return cb;
}

// Samples windows uniformly over timesteps: a trajectory is chosen with
// probability proportional to its length, then the window ends at a uniform
// step and covers the last <= K steps before it.
inline ContextBatch sample_context_batch(const TrajectoryDataset& ds,
                                         std::int64_t batch_size, std::int64_t K,
                                         Rng& rng) {
  if (ds.trajectories.empty())
    throw ArgumentError("sample_context_batch: empty dataset");
  ContextBatch cb = make_empty_context(batch_size, K, ds.spec.obs_dim,
                                       ds.spec.act_dim);
  std::vector<std::int64_t> cum;
  cum.reserve(ds.trajectories.size());
  std::int64_t total = 0;
  for (const Trajectory& t : ds.trajectories) {
    total += t.length();
    cum.push_back(total);
  }
  for (std::int64_t b = 0; b < batch_size; ++b) {
    std::int64_t flat = static_cast<std::int64_t>(
        rng.uniform_index(static_cast<std::uint64_t>(total)));
    std::size_t ti = static_cast<std::size_t>(
        std::upper_bound(cum.begin(), cum.end(), flat) - cum.begin());
    const Trajectory& traj = ds.trajectories[ti];
    std::int64_t end = flat - (ti > 0 ? cum[ti - 1] : 0);
    std::int64_t start = std::max<std::int64_t>(0, end - K + 1);
    std::int64_t len = end - start + 1;
    std::int64_t pad = K - len;
    for (std::int64_t l = 0; l < len; ++l)
      detail::fill_context_row(cb, b * K + pad + l, traj, start + l, ds.stats);
  }
  return cb;
}

// One rollout step as the policy sees it; act is zero for the current step,
// whose action has not been chosen yet.
struct StepRecord {
  double rtg = 0.0;  // commanded target minus realized rewards so far
  std::vector<double> obs;
  std::vector<double> act;
  std::int64_t t = 0;
};

// B=1 context holding the last <= K live steps, left-padded.
inline ContextBatch make_eval_context(const std::vector<StepRecord>& history,
                                      std::int64_t K, const NormStats& stats,
                                      std::int64_t obs_dim, std::int64_t act_dim) {
  if (history.empty()) throw ArgumentError("make_eval_context: empty history");
  ContextBatch cb = make_empty_context(1, K, obs_dim, act_dim);
  std::int64_t n = static_cast<std::int64_t>(history.size());
  std::int64_t take = std::min(n, K);
  std::int64_t pad = K - take;
  for (std::int64_t l = 0; l < take; ++l) {
    const StepRecord& sr = history[static_cast<std::size_t>(n - take + l)];
    std::int64_t row = pad + l;
    cb.raw_rtg.at(row, 0) = sr.rtg;
    cb.rtg.at(row, 0) = sr.rtg / stats.return_scale;
    for (std::int64_t j = 0; j < obs_dim; ++j) {
      double v = sr.obs[static_cast<std::size_t>(j)];
      cb.raw_obs.at(row, j) = v;
      cb.obs.at(row, j) = (v - stats.obs_mean[static_cast<std::size_t>(j)]) /
                          stats.obs_std[static_cast<std::size_t>(j)];
    }
    for (std::int64_t j = 0; j < act_dim; ++j)
      cb.act.at(row, j) = sr.act[static_cast<std::size_t>(j)];
    cb.timesteps[static_cast<std::size_t>(row)] = sr.t;
    cb.mask[static_cast<std::size_t>(row)] = 1;
  }
  return cb;
}

}  // namespace reframe
