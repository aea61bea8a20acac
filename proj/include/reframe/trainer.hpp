// Stage drivers: stage-1 autoencoder + buffer construction, stage-2 policy
// optimization with periodic evaluation, autoregressive rollouts, and the
// fine-tuning control arm. Everything here is in-memory; file placement
// lives in pipeline.hpp.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "reframe/config.hpp"
#include "reframe/context.hpp"
#include "reframe/policy.hpp"
#include "reframe/scripted.hpp"

namespace reframe {

// Reconstruction quality bar for the stage-1 warning status: any holdout
// component at or above this fraction of its variance marks the run.
constexpr double kReconBudgetRatio = 0.05;

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

}  // namespace detail

// --------------------------------------------------------- buffer source

// The trajectories the buffer (and its autoencoder) are built from: either
// freshly generated expert episodes, or a uniform draw without replacement
// from the training dataset, matched in count. The draw re-derives its own
// normalization statistics, which then travel with the buffer.
inline TrajectoryDataset buffer_source_dataset(const RunConfig& cfg,
                                               const EnvSpec& spec,
                                               const TrajectoryDataset& main_ds) {
  if (cfg.buffer_source == "expert")
    return generate_dataset(spec, Tier::kExpert, cfg.amb_size, cfg.buffer_seed);
  if (cfg.amb_size > static_cast<std::int64_t>(main_ds.trajectories.size()))
    throw ArgumentError("buffer draw larger than the dataset");
  std::vector<std::size_t> idx(main_ds.trajectories.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(cfg.buffer_seed, streams::kSampler);
  for (std::int64_t k = 0; k < cfg.amb_size; ++k) {
    std::size_t j = static_cast<std::size_t>(k) +
                    static_cast<std::size_t>(rng.uniform_index(
                        static_cast<std::uint64_t>(idx.size() - static_cast<std::size_t>(k))));
    std::swap(idx[static_cast<std::size_t>(k)], idx[j]);
  }
  idx.resize(static_cast<std::size_t>(cfg.amb_size));
  std::sort(idx.begin(), idx.end());
  TrajectoryDataset out;
  out.spec = main_ds.spec;
  out.tier = "dataset_draw";
  out.gen_config_hash = fnv1a64("draw;" + std::to_string(main_ds.gen_config_hash) +
                                ";" + std::to_string(cfg.amb_size) + ";" +
                                std::to_string(cfg.buffer_seed));
  for (std::size_t i : idx) out.trajectories.push_back(main_ds.trajectories[i]);
  out.stats = compute_stats(out);
  return out;
}

// ---------------------------------------------------------------- stage 1

struct Stage1Result {
  AutoencoderModel model;  // frozen
  MemoryBuffer buffer;
  AeTrainResult train;
  bool recon_warning = false;  // reconstruction budget unmet; run continues
  double wall_seconds = 0.0;
};

inline Stage1Result run_stage1(const RunConfig& cfg, const EnvSpec& spec,
                               const TrajectoryDataset& source) {
  auto t0 = std::chrono::steady_clock::now();
  AutoencoderModel model(autoencoder_config(cfg, spec), cfg.run_seed);
  AeTrainResult train = train_autoencoder(model, source, cfg.run_seed);
  bool warn = train.holdout.rtg.ratio() >= kReconBudgetRatio ||
              train.holdout.obs.ratio() >= kReconBudgetRatio ||
              train.holdout.act.ratio() >= kReconBudgetRatio;
  MemoryBuffer buffer = build_buffer(source, model, cfg.buffer_source);
  return {std::move(model), std::move(buffer), std::move(train), warn,
          detail::seconds_since(t0)};
}

// -------------------------------------------------------------- rollout

// One autoregressive episode. The actor sees the step history (the current
// step's action still zero) and answers with an action; the return token
// starts at the commanded target and is decremented by each realized reward.
// Per-step hook: called with each step's newest-position retrieval trace
// entry (null when the actor has none).
using ContextActor =
    std::function<ActionResult(const ContextBatch&, const std::vector<StepRecord>&)>;

inline double episode_rollout(const ContextActor& actor, const EnvSpec& spec,
                              const NormStats& stats, std::int64_t context_k,
                              std::uint64_t env_seed, double target,
                              const std::function<void(const TraceEntry&)>& on_trace = {}) {
  EnvState st = env_reset(spec, env_seed);
  std::vector<double> obs = observe(st);
  std::vector<StepRecord> hist;
  double rtg = target, total = 0.0;
  for (int t = 0; t < spec.horizon; ++t) {
    StepRecord sr;
    sr.rtg = rtg;
    sr.obs = obs;
    sr.act.assign(static_cast<std::size_t>(spec.act_dim), 0.0);
    sr.t = t;
    hist.push_back(std::move(sr));
    ContextBatch cb =
        make_eval_context(hist, context_k, stats, spec.obs_dim, spec.act_dim);
    ActionResult res = actor(cb, hist);
    hist.back().act = res.action;
    if (on_trace && !res.trace.entries.empty())
      on_trace(res.trace.entries.back());  // newest step decides the action
    double r = env_step(spec, st, res.action);
    total += r;
    rtg -= r;
    obs = observe(st);
  }
  return total;
}

inline ContextActor policy_actor(PolicyModel& model, const MemoryBuffer* buffer) {
  return [&model, buffer](const ContextBatch& cb,
                          const std::vector<StepRecord>&) {
    return policy_act(model, cb, buffer);
  };
}

// ------------------------------------------------------------- metrics

struct MetricsRecord {
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> returns;  // [seed][episode]
  std::vector<double> seed_scores;           // per-seed mean normalized score
  double mean_score = 0.0;
  double std_score = 0.0;  // sample std over seed means, not episodes
  // newest-step retrieval distances pooled over all episodes
  double dist_q10 = 0.0, dist_q50 = 0.0, dist_q90 = 0.0;
  std::vector<std::pair<std::int64_t, std::int64_t>> row_usage;  // row, hits
  std::int64_t trace_steps = 0;
  double wall_seconds = 0.0;
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v), s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// (checkpoint, buffer, seed list) -> bit-identical record; each seed runs
// `episodes` rollouts with per-episode seeds derived from it.
inline MetricsRecord evaluate_actor(const ContextActor& actor, const EnvSpec& spec,
                                    const NormStats& stats, std::int64_t context_k,
                                    std::int64_t episodes,
                                    const std::vector<std::uint64_t>& seeds,
                                    double target) {
  if (episodes < 1) throw ArgumentError("evaluate: episodes must be >= 1");
  if (seeds.empty()) throw ArgumentError("evaluate: seed list is empty");
  auto t0 = std::chrono::steady_clock::now();
  MetricsRecord rec;
  rec.seeds = seeds;
  std::vector<double> dists;
  std::map<std::int64_t, std::int64_t> usage;
  auto on_trace = [&](const TraceEntry& e) {
    dists.push_back(e.dist_sq);
    ++usage[e.row];
  };
  for (std::uint64_t seed : seeds) {
    std::vector<double> rets;
    std::vector<double> scores;
    for (std::int64_t ep = 0; ep < episodes; ++ep) {
      double ret =
          episode_rollout(actor, spec, stats, context_k,
                          mix_seed(seed, static_cast<std::uint64_t>(ep)), target,
                          on_trace);
      rets.push_back(ret);
      scores.push_back(normalized_score(spec, ret));
    }
    rec.returns.push_back(std::move(rets));
    rec.seed_scores.push_back(mean_of(scores));
  }
  rec.mean_score = mean_of(rec.seed_scores);
  rec.std_score = sample_std(rec.seed_scores);
  rec.trace_steps = static_cast<std::int64_t>(dists.size());
  if (!dists.empty()) {
    std::sort(dists.begin(), dists.end());
    auto q = [&dists](double p) {
      std::size_t i = static_cast<std::size_t>(
          p * static_cast<double>(dists.size() - 1) + 0.5);
      return dists[i];
    };
    rec.dist_q10 = q(0.10);
    rec.dist_q50 = q(0.50);
    rec.dist_q90 = q(0.90);
  }
  for (const auto& [row, hits] : usage) rec.row_usage.emplace_back(row, hits);
  rec.wall_seconds = detail::seconds_since(t0);
  return rec;
}

inline MetricsRecord evaluate_policy(PolicyModel& model, const MemoryBuffer* buffer,
                                     const EnvSpec& spec, const NormStats& stats,
                                     std::int64_t episodes,
                                     const std::vector<std::uint64_t>& seeds,
                                     double target_multiplier) {
  return evaluate_actor(policy_actor(model, buffer), spec, stats,
                        model.config().context_k, episodes, seeds,
                        spec.expert_anchor * target_multiplier);
}

inline std::vector<std::uint64_t> eval_seed_list(const RunConfig& cfg) {
  std::vector<std::uint64_t> out;
  for (std::int64_t j = 0; j < cfg.eval_seeds; ++j)
    out.push_back(mix_seed(cfg.run_seed, 0xE7A1 + static_cast<std::uint64_t>(j)));
  return out;
}

// ---------------------------------------------------------------- stage 2

struct EvalSnapshot {
  std::int64_t step = 0;  // steps completed when the snapshot ran
  MetricsRecord metrics;
};

struct Stage2Result {
  PolicyModel model;
  std::vector<double> losses;  // one per optimization step
  std::vector<EvalSnapshot> snapshots;
  std::uint64_t retrieval_lookups = 0;
  double wall_seconds = 0.0;
};

// Policy optimization on the main dataset. In retrieval mode the buffer is
// queried for every context position each step; in baseline mode a supplied
// buffer is ignored outright. Snapshots run at every 10% of the budget and
// always at the end.
inline Stage2Result run_stage2(const RunConfig& cfg, const EnvSpec& spec,
                               const TrajectoryDataset& main_ds,
                               const MemoryBuffer* buffer) {
  auto t0 = std::chrono::steady_clock::now();
  PolicyConfig pc = policy_config(cfg, spec);
  if (pc.mode == PolicyMode::kReframe && buffer == nullptr)
    throw ConfigError("stage 2 in retrieval mode needs the stage-1 buffer");
  const MemoryBuffer* use = pc.mode == PolicyMode::kReframe ? buffer : nullptr;
  std::uint64_t lookups0 = use != nullptr ? use->lookup_count() : 0;

  PolicyModel model(pc, cfg.run_seed);
  AdamW opt(optimizer_config(cfg), model.trainable_param_names());
  Rng sampler(cfg.run_seed, streams::kSampler);
  Rng dropout(cfg.run_seed, streams::kDropout);
  std::vector<std::uint64_t> seeds = eval_seed_list(cfg);

  std::int64_t steps = scaled_budget(cfg.train_steps, cfg.budget_scale);
  std::int64_t eval_every = steps / 10;
  bool pin = cfg.pin_correction != 0;

  Stage2Result res{std::move(model), {}, {}, 0, 0.0};
  for (std::int64_t step = 0; step < steps; ++step) {
    ContextBatch cb =
        sample_context_batch(main_ds, cfg.train_batch, pc.context_k, sampler);
    Tape t;
    PolicyForward fw = policy_forward(t, res.model, cb, use, dropout, true);
    NodeId loss = policy_loss(t, fw, cb, cfg.lambda_align);
    double lv = t.val(loss).data[0];
    if (!std::isfinite(lv))
      throw NumericError("policy loss diverged at step " + std::to_string(step) +
                         " (" + format_f64(lv) + ")");
    res.losses.push_back(lv);
    res.model.params().zero_grads();
    t.backward(loss);
    t.accumulate_param_grads(res.model.params());
    if (pin) {
      for (double& g : res.model.params().grad("corr.w").data) g = 0.0;
      for (double& g : res.model.params().grad("corr.b").data) g = 0.0;
    }
    opt.step(res.model.params());

    bool periodic = eval_every > 0 && (step + 1) % eval_every == 0;
    bool last = step + 1 == steps;
    if (periodic || last) {
      EvalSnapshot snap;
      snap.step = step + 1;
      snap.metrics =
          evaluate_policy(res.model, use, spec, main_ds.stats, cfg.eval_episodes,
                          seeds, cfg.target_multiplier);
      res.snapshots.push_back(std::move(snap));
      if (last) break;  // never snapshot the final step twice
    }
  }
  res.retrieval_lookups = use != nullptr ? use->lookup_count() - lookups0 : 0;
  res.wall_seconds = detail::seconds_since(t0);
  return res;
}

// ---------------------------------------------------------------- finetune

// Deterministic probe loss: a fixed resample of contexts, eval-mode forward,
// action MSE only. Used to measure drift on the original dataset.
inline double probe_loss(PolicyModel& model, const TrajectoryDataset& ds,
                         std::int64_t batch, std::uint64_t seed) {
  Rng r(seed, streams::kSampler);
  ContextBatch cb = sample_context_batch(ds, batch, model.config().context_k, r);
  Tape t;
  Rng unused(0);
  PolicyForward fw = policy_forward(t, model, cb, nullptr, unused, false);
  return t.val(policy_loss(t, fw, cb, 0.0)).data[0];
}

struct FinetuneResult {
  PolicyModel model;
  std::vector<double> losses;
  double main_loss_before = 0.0;  // on the original dataset, same probe
  double main_loss_after = 0.0;   // measured and reported, never gated
  double wall_seconds = 0.0;
};

// Continues action-MSE training of a converged baseline checkpoint on the
// expert set alone, same optimizer settings, fresh moments. The expert
// contexts are normalized with the ORIGINAL dataset's statistics: the
// checkpoint's input scaling is part of the model.
inline FinetuneResult finetune_dt(const PolicyCheckpoint& base, const RunConfig& cfg,
                                  const TrajectoryDataset& expert_ds,
                                  const TrajectoryDataset& main_ds) {
  if (expert_ds.trajectories.empty())
    throw ArgumentError("finetune: expert set is empty");
  if (base.cfg.mode != PolicyMode::kBaseline)
    throw ConfigError("finetune continues a baseline checkpoint");
  auto t0 = std::chrono::steady_clock::now();

  TrajectoryDataset expert = expert_ds;
  expert.stats = main_ds.stats;

  FinetuneResult res{PolicyModel(base.cfg, base.params), {}, 0.0, 0.0, 0.0};
  std::int64_t probe_batch = std::min<std::int64_t>(256, cfg.train_batch * 4);
  res.main_loss_before = probe_loss(res.model, main_ds, probe_batch,
                                    mix_seed(cfg.run_seed, 0xED));

  AdamW opt(optimizer_config(cfg), res.model.trainable_param_names());
  Rng sampler(mix_seed(cfg.run_seed, 0xF7), streams::kSampler);
  Rng dropout(mix_seed(cfg.run_seed, 0xF7), streams::kDropout);
  std::int64_t steps = scaled_budget(cfg.finetune_steps, cfg.budget_scale);
  for (std::int64_t step = 0; step < steps; ++step) {
    ContextBatch cb = sample_context_batch(expert, cfg.train_batch,
                                           base.cfg.context_k, sampler);
    Tape t;
    PolicyForward fw = policy_forward(t, res.model, cb, nullptr, dropout, true);
    NodeId loss = policy_loss(t, fw, cb, 0.0);
    double lv = t.val(loss).data[0];
    if (!std::isfinite(lv))
      throw NumericError("finetune loss diverged at step " + std::to_string(step));
    res.losses.push_back(lv);
    res.model.params().zero_grads();
    t.backward(loss);
    t.accumulate_param_grads(res.model.params());
    opt.step(res.model.params());
  }
  res.main_loss_after = probe_loss(res.model, main_ds, probe_batch,
                                   mix_seed(cfg.run_seed, 0xED));
  res.wall_seconds = detail::seconds_since(t0);
  return res;
}

}  // namespace reframe
