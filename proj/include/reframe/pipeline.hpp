// File-level pipeline. Every resolved config owns one run directory,
// <root>/<config-hash>/{config, artifacts/, metrics.csv, summary.json}, and
// each op reads the artifacts it needs, writes the ones it produces, and
// records completion in summary.json. metrics.csv is regenerated wholesale
// from that state, so reruns of the same config are byte-identical; wall
// clock readings stay in summary.json.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "reframe/trainer.hpp"

namespace reframe {

using Json = nlohmann::ordered_json;

// A dependency some op was supposed to produce first. The command line maps
// this to its own exit code; the message names the file.
struct MissingArtifactError : StateError {
  explicit MissingArtifactError(const std::string& file)
      : StateError("missing artifact: " + file), file(file) {}
  std::string file;
};

// ------------------------------------------------------------------ layout

struct RunPaths {
  std::filesystem::path dir;

  std::filesystem::path config_file() const { return dir / "config"; }
  std::filesystem::path artifacts() const { return dir / "artifacts"; }
  std::filesystem::path metrics_csv() const { return dir / "metrics.csv"; }
  std::filesystem::path summary_json() const { return dir / "summary.json"; }

  std::filesystem::path data_main() const { return artifacts() / "data_main.rfds"; }
  std::filesystem::path data_buffer() const {
    return artifacts() / "data_buffer.rfds";
  }
  std::filesystem::path ae_params() const { return artifacts() / "ae.rfnn"; }
  std::filesystem::path buffer() const { return artifacts() / "buffer.rfmb"; }
  std::filesystem::path buffer_eval() const {
    return artifacts() / "buffer_eval.rfmb";
  }
  std::filesystem::path policy() const { return artifacts() / "policy.rfpc"; }
  std::filesystem::path policy_finetuned() const {
    return artifacts() / "policy_finetuned.rfpc";
  }
};

inline std::filesystem::path default_out_root() {
  const char* env = std::getenv("RF_OUT_DIR");
  if (env != nullptr && *env != '\0') return std::filesystem::path(env);
  return std::filesystem::path("out");
}

inline RunPaths run_paths(const RunConfig& cfg,
                          const std::filesystem::path& root) {
  return {root / config_hash_hex(cfg)};
}

// ------------------------------------------------------------------ helpers

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot write '" + path.string() + "'");
  os << text;
  if (!os) throw StateError("short write to '" + path.string() + "'");
}

inline std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError(path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return fnv1a64(ss.str());
}

inline TrajectoryDataset require_dataset(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError(path.string());
  return load_dataset_file(path.string());
}

inline MemoryBuffer require_buffer(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError(path.string());
  return load_buffer_file(path.string());
}

inline PolicyCheckpoint require_policy(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path))
    throw MissingArtifactError(path.string());
  return load_policy_file(path.string());
}

// ------------------------------------------------------------------ run dir

struct RunDir {
  RunConfig cfg;
  std::uint64_t hash = 0;
  RunPaths paths;
  Json summary;
};

inline std::string render_metrics_csv(const RunDir& run) {
  std::string out =
      "run,arm,phase,step,eval_seed,episodes,mean_return,min_return,"
      "max_return,mean_score\n";
  if (!run.summary.contains("evals")) return out;
  std::string prefix = hash_hex(run.hash) + "," + run.cfg.arm + ",";
  for (const Json& row : run.summary["evals"]) {
    out += prefix;
    out += row["phase"].get<std::string>();
    out += "," + std::to_string(row["step"].get<std::int64_t>());
    out += "," + std::to_string(row["eval_seed"].get<std::uint64_t>());
    out += "," + std::to_string(row["episodes"].get<std::int64_t>());
    out += "," + format_f64(row["mean_return"].get<double>());
    out += "," + format_f64(row["min_return"].get<double>());
    out += "," + format_f64(row["max_return"].get<double>());
    out += "," + format_f64(row["mean_score"].get<double>());
    out += "\n";
  }
  return out;
}

inline void save_run_state(RunDir& run) {
  write_text_file(run.paths.summary_json(), run.summary.dump(2) + "\n");
  write_text_file(run.paths.metrics_csv(), render_metrics_csv(run));
}

// Creates (or re-enters) the directory keyed by the resolved config's hash.
// The config file is written on first touch; afterwards it must parse back
// to the same hash, or the directory holds someone else's run.
inline RunDir open_run(const RunConfig& cfg,
                       const std::filesystem::path& out_root) {
  validate(cfg);
  RunDir run{cfg, config_hash(cfg), run_paths(cfg, out_root), Json::object()};
  std::filesystem::create_directories(run.paths.artifacts());
  std::filesystem::path cf = run.paths.config_file();
  if (std::filesystem::exists(cf)) {
    RunConfig prior;
    apply_config_file(prior, cf.string());
    if (config_hash(prior) != run.hash)
      throw StateError("run directory " + run.paths.dir.string() +
                       " holds a different resolved config");
  } else {
    write_text_file(cf, render_config(cfg));
  }
  if (std::filesystem::exists(run.paths.summary_json())) {
    std::ifstream is(run.paths.summary_json());
    run.summary = Json::parse(is);
  }
  if (!run.summary.contains("config_hash"))
    run.summary["config_hash"] = hash_hex(run.hash);
  if (!run.summary.contains("arm")) run.summary["arm"] = cfg.arm;
  if (!run.summary.contains("ops")) run.summary["ops"] = Json::object();
  if (!run.summary.contains("evals")) run.summary["evals"] = Json::array();
  return run;
}

inline RunDir open_run(const RunConfig& cfg) {
  return open_run(cfg, default_out_root());
}

// Ops in pipeline order; recording one wipes everything downstream, since a
// redone stage invalidates what was built on top of it.
inline const std::vector<std::string>& op_order() {
  static const std::vector<std::string> order = {
      "gen_data", "train_ae", "build_amb", "train_policy", "finetune", "eval"};
  return order;
}

inline void record_op(RunDir& run, const std::string& op, Json rec) {
  bool downstream = false;
  for (const std::string& name : op_order()) {
    if (name == op) {
      downstream = true;
      continue;
    }
    if (downstream && run.summary["ops"].contains(name))
      run.summary["ops"].erase(name);
  }
  rec["completed"] = true;
  run.summary["ops"][op] = std::move(rec);
  save_run_state(run);
}

inline std::vector<std::filesystem::path> op_artifacts(const RunDir& run,
                                                       const std::string& op) {
  const RunPaths& p = run.paths;
  if (op == "gen_data") return {p.data_main(), p.data_buffer()};
  if (op == "train_ae") return {p.ae_params()};
  if (op == "build_amb") return {p.buffer()};
  if (op == "train_policy") return {p.policy()};
  if (op == "finetune") return {p.policy_finetuned()};
  return {};  // eval writes only metrics
}

// Completed per the summary AND every artifact still on disk; a recorded op
// whose files were deleted is not done.
inline bool op_done(const RunDir& run, const std::string& op) {
  if (!run.summary.contains("ops") || !run.summary["ops"].contains(op))
    return false;
  const Json& rec = run.summary["ops"][op];
  if (!rec.contains("completed") || !rec["completed"].get<bool>()) return false;
  for (const std::filesystem::path& f : op_artifacts(run, op))
    if (!std::filesystem::exists(f)) return false;
  return true;
}

namespace detail {

// Loss traces run to tens of thousands of points; the summary keeps a
// windowed mean capped at 200 entries per curve.
inline Json downsample_curve(const std::vector<double>& losses) {
  Json curve = Json::array();
  if (losses.empty()) return curve;
  std::size_t window = (losses.size() + 199) / 200;
  for (std::size_t lo = 0; lo < losses.size(); lo += window) {
    std::size_t hi = std::min(lo + window, losses.size());
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += losses[i];
    curve.push_back(Json::array(
        {static_cast<std::int64_t>(hi), s / static_cast<double>(hi - lo)}));
  }
  return curve;
}

inline double window_mean(const std::vector<double>& v, bool tail) {
  if (v.empty()) return 0.0;
  std::size_t n = std::min<std::size_t>(1000, v.size());
  std::size_t lo = tail ? v.size() - n : 0;
  double s = 0.0;
  for (std::size_t i = lo; i < lo + n; ++i) s += v[i];
  return s / static_cast<double>(n);
}

inline Json metric_rows(const std::string& phase, std::int64_t step,
                        const MetricsRecord& rec) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < rec.seeds.size(); ++i) {
    const std::vector<double>& rets = rec.returns[i];
    auto [lo, hi] = std::minmax_element(rets.begin(), rets.end());
    Json row;
    row["phase"] = phase;
    row["step"] = step;
    row["eval_seed"] = rec.seeds[i];
    row["episodes"] = static_cast<std::int64_t>(rets.size());
    row["mean_return"] = mean_of(rets);
    row["min_return"] = *lo;
    row["max_return"] = *hi;
    row["mean_score"] = rec.seed_scores[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Json record_summary(const MetricsRecord& m) {
  Json j;
  j["mean_score"] = m.mean_score;
  j["std_score"] = m.std_score;
  j["trace_steps"] = m.trace_steps;
  j["dist_q10"] = m.dist_q10;
  j["dist_q50"] = m.dist_q50;
  j["dist_q90"] = m.dist_q90;
  Json usage = Json::array();
  for (const auto& [row, hits] : m.row_usage)
    usage.push_back(Json::array({row, hits}));
  j["row_usage"] = std::move(usage);
  return j;
}

}  // namespace detail

// --------------------------------------------------------------------- ops

// Main dataset plus the buffer-source set (expert episodes or a matched
// dataset draw). Both are always written: the buffer set doubles as the
// fine-tuning corpus.
inline void op_gen_data(RunDir& run) {
  auto t0 = std::chrono::steady_clock::now();
  EnvSpec spec = make_env(run.cfg.env_name);
  TrajectoryDataset main_ds =
      generate_dataset(spec, tier_from_name(run.cfg.data_tier), run.cfg.n_traj,
                       run.cfg.data_seed);
  save_dataset_file(run.paths.data_main().string(), main_ds);
  TrajectoryDataset buf_ds = buffer_source_dataset(run.cfg, spec, main_ds);
  save_dataset_file(run.paths.data_buffer().string(), buf_ds);

  Json rec;
  rec["main_trajectories"] =
      static_cast<std::int64_t>(main_ds.trajectories.size());
  rec["buffer_trajectories"] =
      static_cast<std::int64_t>(buf_ds.trajectories.size());
  rec["data_main_hash"] = hash_hex(file_hash(run.paths.data_main()));
  rec["data_buffer_hash"] = hash_hex(file_hash(run.paths.data_buffer()));
  rec["wall_seconds"] = detail::seconds_since(t0);
  record_op(run, "gen_data", std::move(rec));
}

// Stage-1 autoencoder on the buffer-source set. A missed reconstruction
// budget is recorded as a warning, never an abort.
inline void op_train_ae(RunDir& run) {
  auto t0 = std::chrono::steady_clock::now();
  TrajectoryDataset src = require_dataset(run.paths.data_buffer());
  EnvSpec spec = make_env(run.cfg.env_name);
  AutoencoderModel model(autoencoder_config(run.cfg, spec), run.cfg.run_seed);
  AeTrainResult tr = train_autoencoder(model, src, run.cfg.run_seed);
  save_params_file(run.paths.ae_params().string(), model.params());

  Json rec;
  rec["steps"] = scaled_budget(run.cfg.ae_steps, run.cfg.budget_scale);
  auto component = [](const ComponentRecon& c) {
    Json j;
    j["mse"] = c.mse;
    j["variance"] = c.variance;
    j["ratio"] = c.ratio();
    return j;
  };
  rec["holdout_rtg"] = component(tr.holdout.rtg);
  rec["holdout_obs"] = component(tr.holdout.obs);
  rec["holdout_act"] = component(tr.holdout.act);
  bool warn = tr.holdout.rtg.ratio() >= kReconBudgetRatio ||
              tr.holdout.obs.ratio() >= kReconBudgetRatio ||
              tr.holdout.act.ratio() >= kReconBudgetRatio;
  rec["recon_warning"] = warn;
  Json warnings = Json::array();
  if (warn) {
    char msg[96];
    std::snprintf(msg, sizeof(msg),
                  "holdout reconstruction above %g of component variance at "
                  "budget end",
                  kReconBudgetRatio);
    warnings.push_back(msg);
  }
  rec["warnings"] = std::move(warnings);
  rec["ae_hash"] = hash_hex(file_hash(run.paths.ae_params()));
  rec["wall_seconds"] = detail::seconds_since(t0);
  record_op(run, "train_ae", std::move(rec));
}

// Encodes the buffer-source set through the frozen autoencoder.
inline void op_build_amb(RunDir& run) {
  auto t0 = std::chrono::steady_clock::now();
  TrajectoryDataset src = require_dataset(run.paths.data_buffer());
  if (!std::filesystem::exists(run.paths.ae_params()))
    throw MissingArtifactError(run.paths.ae_params().string());
  AutoencoderModel model(load_params_file(run.paths.ae_params().string()));
  MemoryBuffer buf = build_buffer(src, model, run.cfg.buffer_source);
  save_buffer_file(run.paths.buffer().string(), buf);

  Json rec;
  rec["rows"] = buf.size();
  rec["latent_dim"] = buf.latent_dim();
  rec["buffer_hash"] = hash_hex(file_hash(run.paths.buffer()));
  rec["wall_seconds"] = detail::seconds_since(t0);
  record_op(run, "build_amb", std::move(rec));
}

// Stage-2 policy optimization. The checkpoint embeds this run's config hash
// and the hash of the buffer file it trained against (zero in baseline
// mode). Snapshot evaluations become the metrics file's train-phase rows.
inline void op_train_policy(RunDir& run) {
  auto t0 = std::chrono::steady_clock::now();
  TrajectoryDataset main_ds = require_dataset(run.paths.data_main());
  EnvSpec spec = make_env(run.cfg.env_name);
  std::optional<MemoryBuffer> buf;
  std::uint64_t buf_hash = 0;
  if (mode_from_name(run.cfg.policy_mode) == PolicyMode::kReframe) {
    buf = require_buffer(run.paths.buffer());
    buf_hash = file_hash(run.paths.buffer());
  }
  Stage2Result s2 =
      run_stage2(run.cfg, spec, main_ds, buf ? &*buf : nullptr);
  save_policy_file(run.paths.policy().string(), s2.model, run.hash, buf_hash);

  Json rows = Json::array();
  for (const EvalSnapshot& snap : s2.snapshots)
    for (Json& row : detail::metric_rows("train", snap.step, snap.metrics))
      rows.push_back(std::move(row));
  run.summary["evals"] = std::move(rows);

  Json rec;
  rec["steps"] = static_cast<std::int64_t>(s2.losses.size());
  rec["loss_first_1k_mean"] = detail::window_mean(s2.losses, false);
  rec["loss_last_1k_mean"] = detail::window_mean(s2.losses, true);
  rec["loss_curve"] = detail::downsample_curve(s2.losses);
  rec["retrieval_lookups"] = s2.retrieval_lookups;
  rec["trained_buffer_hash"] = hash_hex(buf_hash);
  rec["policy_hash"] = hash_hex(file_hash(run.paths.policy()));
  rec["wall_seconds"] = detail::seconds_since(t0);
  record_op(run, "train_policy", std::move(rec));
}

// Continues the baseline checkpoint on the buffer-source expert set alone;
// drift on the original dataset is measured and reported, never gated.
inline void op_finetune(RunDir& run) {
  auto t0 = std::chrono::steady_clock::now();
  if (run.cfg.buffer_source != "expert")
    throw ConfigError("fine-tuning wants data.buffer_source = expert");
  TrajectoryDataset main_ds = require_dataset(run.paths.data_main());
  TrajectoryDataset expert_ds = require_dataset(run.paths.data_buffer());
  PolicyCheckpoint base = require_policy(run.paths.policy());
  FinetuneResult fr = finetune_dt(base, run.cfg, expert_ds, main_ds);
  save_policy_file(run.paths.policy_finetuned().string(), fr.model, run.hash, 0);

  Json rec;
  rec["steps"] = static_cast<std::int64_t>(fr.losses.size());
  rec["expert_loss_first_1k_mean"] = detail::window_mean(fr.losses, false);
  rec["expert_loss_last_1k_mean"] = detail::window_mean(fr.losses, true);
  rec["loss_curve"] = detail::downsample_curve(fr.losses);
  rec["main_loss_before"] = fr.main_loss_before;
  rec["main_loss_after"] = fr.main_loss_after;
  rec["policy_hash"] = hash_hex(file_hash(run.paths.policy_finetuned()));
  rec["wall_seconds"] = detail::seconds_since(t0);
  record_op(run, "finetune", std::move(rec));
}

namespace detail {

// The buffer the checkpoint is evaluated against. "train" reuses the stage-1
// file; "expert" and "dataset" rebuild one from scratch by the same recipe
// (source set, autoencoder training, encoding) so the result is bit-identical
// to what a run configured with that buffer source would have trained with.
inline std::optional<MemoryBuffer> resolve_eval_buffer(
    RunDir& run, const EnvSpec& spec, const TrajectoryDataset& main_ds,
    std::uint64_t& out_hash) {
  if (run.cfg.eval_buffer_source == "train") {
    MemoryBuffer buf = require_buffer(run.paths.buffer());
    out_hash = file_hash(run.paths.buffer());
    return buf;
  }
  RunConfig ecfg = run.cfg;
  ecfg.buffer_source = run.cfg.eval_buffer_source;
  TrajectoryDataset src = buffer_source_dataset(ecfg, spec, main_ds);
  Stage1Result s1 = run_stage1(ecfg, spec, src);
  save_buffer_file(run.paths.buffer_eval().string(), s1.buffer);
  out_hash = file_hash(run.paths.buffer_eval());
  return std::move(s1.buffer);
}

}  // namespace detail

// Final evaluation of the arm's checkpoint: the fine-tuned one for the
// fine-tuning arm, the stage-2 policy otherwise. Re-running replaces the
// final-phase metric rows and leaves the train-phase history alone.
inline void op_eval(RunDir& run) {
  auto t0 = std::chrono::steady_clock::now();
  TrajectoryDataset main_ds = require_dataset(run.paths.data_main());
  EnvSpec spec = make_env(run.cfg.env_name);
  bool finetuned = run.cfg.arm == "finetuned_dt";
  PolicyCheckpoint ck = require_policy(
      finetuned ? run.paths.policy_finetuned() : run.paths.policy());
  PolicyModel model(ck.cfg, std::move(ck.params));

  std::optional<MemoryBuffer> buf;
  std::uint64_t buf_hash = 0;
  bool mismatch = false;
  if (ck.cfg.mode == PolicyMode::kReframe) {
    buf = detail::resolve_eval_buffer(run, spec, main_ds, buf_hash);
    mismatch = buf_hash != ck.buffer_hash;
  }
  MetricsRecord m =
      evaluate_policy(model, buf ? &*buf : nullptr, spec, main_ds.stats,
                      run.cfg.eval_episodes, eval_seed_list(run.cfg),
                      run.cfg.target_multiplier);

  std::int64_t final_step =
      scaled_budget(run.cfg.train_steps, run.cfg.budget_scale) +
      (finetuned ? scaled_budget(run.cfg.finetune_steps, run.cfg.budget_scale)
                 : 0);
  Json rows = Json::array();
  for (Json& row : run.summary["evals"])
    if (row["phase"].get<std::string>() != "final")
      rows.push_back(std::move(row));
  for (Json& row : detail::metric_rows("final", final_step, m))
    rows.push_back(std::move(row));
  run.summary["evals"] = std::move(rows);

  Json rec = detail::record_summary(m);
  rec["checkpoint"] = finetuned ? "policy_finetuned.rfpc" : "policy.rfpc";
  rec["eval_buffer_source"] = run.cfg.eval_buffer_source;
  rec["eval_buffer_hash"] = hash_hex(buf_hash);
  rec["buffer_mismatch"] = mismatch;
  Json warnings = Json::array();
  if (mismatch)
    warnings.push_back(
        "evaluation buffer differs from the one the checkpoint trained "
        "against (intentional for the swap arm)");
  rec["warnings"] = std::move(warnings);
  rec["target_return"] = spec.expert_anchor * run.cfg.target_multiplier;
  rec["episodes"] = run.cfg.eval_episodes;
  rec["wall_seconds"] = detail::seconds_since(t0);
  record_op(run, "eval", std::move(rec));
}

// ------------------------------------------------------------------ driver

// The op sequence an arm needs, in execution order.
inline std::vector<std::string> arm_ops(const RunConfig& cfg) {
  std::vector<std::string> ops = {"gen_data"};
  if (mode_from_name(cfg.policy_mode) == PolicyMode::kReframe) {
    ops.push_back("train_ae");
    ops.push_back("build_amb");
  }
  ops.push_back("train_policy");
  if (cfg.arm == "finetuned_dt") ops.push_back("finetune");
  ops.push_back("eval");
  return ops;
}

inline void run_op(RunDir& run, const std::string& op) {
  if (op == "gen_data") return op_gen_data(run);
  if (op == "train_ae") return op_train_ae(run);
  if (op == "build_amb") return op_build_amb(run);
  if (op == "train_policy") return op_train_policy(run);
  if (op == "finetune") return op_finetune(run);
  if (op == "eval") return op_eval(run);
  throw ArgumentError("unknown pipeline op '" + op + "'");
}

// Executes the arm's remaining ops. Completed ones (recorded AND with their
// artifacts intact) are skipped, so an interrupted run resumes where it
// stopped and a finished one is a no-op.
inline void run_full(RunDir& run) {
  for (const std::string& op : arm_ops(run.cfg)) {
    if (op_done(run, op)) continue;
    run_op(run, op);
  }
}

}  // namespace reframe
