#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>
#include <vector>

#include "reframe/context.hpp"
#include "reframe/scripted.hpp"
#include "reframe/trajectory.hpp"

using namespace reframe;

namespace {

// Synthetic trajectory with recognizable per-step values.
Trajectory make_traj(std::int64_t T, double base, std::uint64_t seed) {
  Trajectory t;
  t.obs = Tensor({T, 4});
  t.act = Tensor({T, 2});
  t.rew.resize(static_cast<std::size_t>(T));
  Rng rng(seed);
  for (std::int64_t i = 0; i < T; ++i) {
    for (std::int64_t j = 0; j < 4; ++j)
      t.obs.at(i, j) = base + rng.normal();
    for (std::int64_t j = 0; j < 2; ++j) t.act.at(i, j) = rng.uniform(-1, 1);
    t.rew[static_cast<std::size_t>(i)] = quantize_reward(-rng.uniform());
  }
  t.episode_seed = seed;
  t.finalize();
  return t;
}

TrajectoryDataset make_dataset(std::vector<Trajectory> trajs) {
  TrajectoryDataset ds;
  ds.spec = make_env("pointmass_easy");
  ds.tier = "medium";
  ds.trajectories = std::move(trajs);
  ds.stats = compute_stats(ds);
  return ds;
}

}  // namespace

TEST_CASE("returns-to-go are suffix sums") {
  REQUIRE(compute_returns_to_go({1.0, 2.0, 3.0}) ==
          std::vector<double>{6.0, 5.0, 3.0});
  REQUIRE(compute_returns_to_go({0.0, 0.0}) == std::vector<double>{0.0, 0.0});
  REQUIRE_THROWS_AS(compute_returns_to_go({}), ArgumentError);

  // length-50 random sequence against an independent double loop, summed in
  // the same back-to-front order so equality is exact
  Rng rng(204);
  std::vector<double> rew(50);
  for (double& r : rew) r = rng.uniform(-3.0, 3.0);
  std::vector<double> rtg = compute_returns_to_go(rew);
  for (std::size_t t = 0; t < rew.size(); ++t) {
    double acc = 0.0;
    for (std::size_t k = rew.size(); k-- > t;) acc += rew[k];
    REQUIRE(rtg[t] == acc);
  }
}

TEST_CASE("suffix identity holds exactly on generated episodes") {
  EnvSpec spec = make_env("pointmass_hard");
  Trajectory t =
      rollout_scripted(spec, tier_preset(Tier::kMedium, spec), 31337);
  REQUIRE(t.length() == spec.horizon);
  for (std::int64_t i = 0; i + 1 < t.length(); ++i) {
    REQUIRE(t.returns_to_go[static_cast<std::size_t>(i)] -
                t.returns_to_go[static_cast<std::size_t>(i + 1)] ==
            t.rew[static_cast<std::size_t>(i)]);
  }
  REQUIRE(t.returns_to_go.back() == t.rew.back());
}

TEST_CASE("dataset round-trips through the binary format") {
  TrajectoryDataset ds = make_dataset(
      {make_traj(10, 0.5, 1), make_traj(30, -1.0, 2), make_traj(7, 2.0, 3)});
  ds.gen_config_hash = 0xDEADBEEFCAFEF00Dull;

  std::ostringstream os(std::ios::binary);
  save_dataset(os, ds);
  std::istringstream is(os.str(), std::ios::binary);
  TrajectoryDataset back = load_dataset(is);

  REQUIRE(back.spec.name == ds.spec.name);
  REQUIRE(back.tier == ds.tier);
  REQUIRE(back.gen_config_hash == ds.gen_config_hash);
  REQUIRE(back.stats.obs_mean == ds.stats.obs_mean);
  REQUIRE(back.stats.obs_std == ds.stats.obs_std);
  REQUIRE(back.stats.return_scale == ds.stats.return_scale);
  REQUIRE(back.trajectories.size() == ds.trajectories.size());
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    REQUIRE(back.trajectories[i].obs.data == ds.trajectories[i].obs.data);
    REQUIRE(back.trajectories[i].act.data == ds.trajectories[i].act.data);
    REQUIRE(back.trajectories[i].rew == ds.trajectories[i].rew);
    REQUIRE(back.trajectories[i].returns_to_go ==
            ds.trajectories[i].returns_to_go);
    REQUIRE(back.trajectories[i].episode_seed ==
            ds.trajectories[i].episode_seed);
  }
  REQUIRE(dataset_bytes_hash(back) == dataset_bytes_hash(ds));
}

TEST_CASE("dataset loader rejects corrupt input") {
  TrajectoryDataset ds = make_dataset({make_traj(5, 0.0, 9)});
  std::ostringstream os(std::ios::binary);
  save_dataset(os, ds);
  std::string bytes = os.str();

  SECTION("wrong magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    std::istringstream is(bad, std::ios::binary);
    REQUIRE_THROWS_AS(load_dataset(is), FormatError);
  }
  SECTION("truncated payload") {
    std::istringstream is(bytes.substr(0, bytes.size() - 7), std::ios::binary);
    REQUIRE_THROWS_AS(load_dataset(is), FormatError);
  }
  SECTION("length outside the horizon") {
    // trajectory count is a u64 immediately before the first T u32; patch T
    std::string bad = bytes;
    std::size_t t_off = bad.size() - (8 + 5 * (4 + 2 + 1) * 8) - 4;
    bad[t_off] = static_cast<char>(0xFF);
    bad[t_off + 1] = static_cast<char>(0xFF);
    std::istringstream is(bad, std::ios::binary);
    REQUIRE_THROWS_AS(load_dataset(is), FormatError);
  }
}

TEST_CASE("large generated dataset survives a save/load cycle unchanged") {
  EnvSpec spec = make_env("pointmass_easy");
  TrajectoryDataset ds = generate_dataset(spec, Tier::kRandom, 600, 77);
  REQUIRE(ds.trajectories.size() == 600);
  REQUIRE(ds.total_steps() == 600 * spec.horizon);
  std::uint64_t h1 = dataset_bytes_hash(ds);

  std::ostringstream os(std::ios::binary);
  save_dataset(os, ds);
  std::istringstream is(os.str(), std::ios::binary);
  TrajectoryDataset back = load_dataset(is);
  REQUIRE(dataset_bytes_hash(back) == h1);

  // same generator inputs, same bytes
  TrajectoryDataset again = generate_dataset(spec, Tier::kRandom, 600, 77);
  REQUIRE(dataset_bytes_hash(again) == h1);
  TrajectoryDataset other = generate_dataset(spec, Tier::kRandom, 600, 78);
  REQUIRE(dataset_bytes_hash(other) != h1);
}

TEST_CASE("stats standardize the dataset that produced them") {
  EnvSpec spec = make_env("pointmass_hard");
  TrajectoryDataset ds = generate_dataset(spec, Tier::kMedium, 40, 5);
  std::int64_t n = ds.total_steps();
  for (std::int64_t j = 0; j < spec.obs_dim; ++j) {
    double m = 0, v = 0;
    for (const Trajectory& t : ds.trajectories)
      for (std::int64_t i = 0; i < t.length(); ++i)
        m += (t.obs.at(i, j) - ds.stats.obs_mean[static_cast<std::size_t>(j)]) /
             ds.stats.obs_std[static_cast<std::size_t>(j)];
    m /= static_cast<double>(n);
    for (const Trajectory& t : ds.trajectories)
      for (std::int64_t i = 0; i < t.length(); ++i) {
        double z = (t.obs.at(i, j) -
                    ds.stats.obs_mean[static_cast<std::size_t>(j)]) /
                   ds.stats.obs_std[static_cast<std::size_t>(j)];
        v += (z - m) * (z - m);
      }
    v /= static_cast<double>(n);
    REQUIRE(std::fabs(m) < 1e-10);
    REQUIRE(std::fabs(std::sqrt(v) - 1.0) < 1e-8);
  }
  REQUIRE(ds.stats.return_scale == spec.expert_anchor);
}

TEST_CASE("zero-variance observation dims keep unit std") {
  Trajectory t = make_traj(12, 0.0, 4);
  for (std::int64_t i = 0; i < t.length(); ++i) t.obs.at(i, 2) = 3.25;
  TrajectoryDataset ds = make_dataset({std::move(t)});
  REQUIRE(ds.stats.obs_mean[2] == 3.25);
  REQUIRE(ds.stats.obs_std[2] == 1.0);
}

TEST_CASE("short trajectories sample left-padded windows") {
  TrajectoryDataset ds = make_dataset({make_traj(5, 1.0, 21)});
  Rng rng(3, streams::kSampler);
  ContextBatch cb = sample_context_batch(ds, 4, 60, rng);
  REQUIRE(cb.B == 4);
  REQUIRE(cb.K == 60);
  for (std::int64_t b = 0; b < 4; ++b) {
    int valid = 0;
    for (std::int64_t k = 0; k < 60; ++k)
      valid += cb.mask[static_cast<std::size_t>(b * 60 + k)];
    REQUIRE(valid >= 1);
    REQUIRE(valid <= 5);
    // padding is a strict prefix: once valid, valid until the end
    bool seen = false;
    for (std::int64_t k = 0; k < 60; ++k) {
      bool m = cb.mask[static_cast<std::size_t>(b * 60 + k)] != 0;
      if (seen) REQUIRE(m);
      seen = seen || m;
      if (!m) {
        REQUIRE(cb.obs.at(b * 60 + k, 0) == 0.0);
        REQUIRE(cb.act.at(b * 60 + k, 0) == 0.0);
        REQUIRE(cb.rtg.at(b * 60 + k, 0) == 0.0);
      }
    }
    // last row is always the freshest real step
    REQUIRE(cb.mask[static_cast<std::size_t>(b * 60 + 59)] == 1);
  }
}

TEST_CASE("window timesteps are consecutive episode steps") {
  TrajectoryDataset ds =
      make_dataset({make_traj(80, 0.0, 31), make_traj(50, 1.0, 32)});
  Rng rng(11, streams::kSampler);
  ContextBatch cb = sample_context_batch(ds, 16, 20, rng);
  for (std::int64_t b = 0; b < 16; ++b) {
    for (std::int64_t k = 1; k < 20; ++k) {
      std::size_t row = static_cast<std::size_t>(b * 20 + k);
      if (cb.mask[row] && cb.mask[row - 1])
        REQUIRE(cb.timesteps[row] == cb.timesteps[row - 1] + 1);
    }
  }
}

TEST_CASE("sampling weight is proportional to trajectory length") {
  // 10-step and 30-step trajectories: windows land in the longer one with
  // probability 0.75
  TrajectoryDataset ds =
      make_dataset({make_traj(10, 0.0, 41), make_traj(30, 100.0, 42)});
  Rng rng(7, streams::kSampler);
  int hits = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    ContextBatch cb = sample_context_batch(ds, 1, 4, rng);
    // raw obs values identify the source trajectory
    if (cb.raw_obs.at(3, 0) > 50.0) ++hits;
  }
  double frac = static_cast<double>(hits) / n;
  REQUIRE(std::fabs(frac - 0.75) < 0.02);
}

TEST_CASE("normalization applies dataset statistics") {
  TrajectoryDataset ds = make_dataset({make_traj(40, -0.5, 51)});
  Rng rng(13, streams::kSampler);
  ContextBatch cb = sample_context_batch(ds, 8, 10, rng);
  for (std::int64_t r = 0; r < 80; ++r) {
    if (!cb.mask[static_cast<std::size_t>(r)]) continue;
    for (std::int64_t j = 0; j < 4; ++j) {
      double z = (cb.raw_obs.at(r, j) -
                  ds.stats.obs_mean[static_cast<std::size_t>(j)]) /
                 ds.stats.obs_std[static_cast<std::size_t>(j)];
      REQUIRE(cb.obs.at(r, j) == z);
    }
    REQUIRE(cb.rtg.at(r, 0) == cb.raw_rtg.at(r, 0) / ds.stats.return_scale);
  }
}

TEST_CASE("degenerate and invalid context shapes") {
  TrajectoryDataset ds = make_dataset({make_traj(6, 0.0, 61)});
  Rng rng(1, streams::kSampler);
  ContextBatch cb = sample_context_batch(ds, 2, 1, rng);
  REQUIRE(cb.mask == std::vector<std::uint8_t>{1, 1});

  REQUIRE_THROWS_AS(make_empty_context(0, 5, 4, 2), ArgumentError);
  REQUIRE_THROWS_AS(make_empty_context(5, 0, 4, 2), ArgumentError);
  TrajectoryDataset empty = make_dataset({});
  REQUIRE_THROWS_AS(sample_context_batch(empty, 1, 4, rng), ArgumentError);
}

TEST_CASE("rollout contexts keep the most recent steps") {
  NormStats stats;
  stats.obs_mean = {0, 0, 0, 0};
  stats.obs_std = {1, 1, 1, 1};
  stats.return_scale = -42.0;

  std::vector<StepRecord> hist;
  for (int t = 0; t < 7; ++t) {
    StepRecord sr;
    sr.rtg = -10.0 + t;
    sr.obs = {double(t), 0, 0, 0};
    sr.act = {t < 6 ? 0.5 : 0.0, 0.0};  // current step has no action yet
    sr.t = t;
    hist.push_back(sr);
  }

  ContextBatch shortctx = make_eval_context(hist, 4, stats, 4, 2);
  REQUIRE(shortctx.mask == std::vector<std::uint8_t>{1, 1, 1, 1});
  REQUIRE(shortctx.timesteps == std::vector<std::int64_t>{3, 4, 5, 6});
  REQUIRE(shortctx.obs.at(3, 0) == 6.0);
  REQUIRE(shortctx.rtg.at(3, 0) == -4.0 / -42.0);

  ContextBatch padded = make_eval_context(hist, 10, stats, 4, 2);
  REQUIRE(padded.mask ==
          std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1, 1, 1, 1, 1});
  REQUIRE(padded.timesteps[3] == 0);
  REQUIRE(padded.timesteps[9] == 6);
  REQUIRE(padded.act.at(9, 0) == 0.0);

  REQUIRE_THROWS_AS(make_eval_context({}, 4, stats, 4, 2), ArgumentError);
}
