// Run configuration: one flat key=value namespace, grouped into sections for
// the on-disk file. A single binding table drives parsing, override
// application, canonical serialization, and hashing, so a config hash covers
// every resolved field by construction.
#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "reframe/adamw.hpp"
#include "reframe/autoencoder.hpp"
#include "reframe/common.hpp"
#include "reframe/env.hpp"
#include "reframe/policy.hpp"
#include "reframe/scripted.hpp"

namespace reframe {

struct RunConfig {
  // environment
  std::string env_name = "pointmass_easy";
  // datasets
  std::string data_tier = "medium";
  std::int64_t n_traj = 6000;
  std::uint64_t data_seed = 1;
  std::string buffer_source = "expert";  // expert | dataset
  std::int64_t amb_size = 60;            // trajectories in the memory buffer
  std::uint64_t buffer_seed = 2;
  // stage-1 autoencoder
  std::int64_t ae_e_rtg = 8;
  std::int64_t ae_e_obs = 32;
  std::int64_t ae_e_act = 16;
  std::int64_t ae_n_latent = 16;
  std::int64_t ae_hidden = 64;
  std::int64_t ae_steps = 20000;
  std::int64_t ae_batch = 256;
  double ae_lr = 1e-3;
  double ae_weight_decay = 1e-4;
  double ae_holdout_frac = 0.1;
  // policy shape
  std::string policy_mode = "baseline_dt";  // baseline_dt | reframe
  std::int64_t d_model = 128;
  std::int64_t n_layers = 3;
  std::int64_t n_heads = 1;
  std::int64_t context_k = 60;
  double dropout_embed = 0.2;
  double dropout_resid = 0.2;
  double dropout_attn = 0.05;
  // stage-2 optimization
  std::int64_t train_steps = 50000;
  std::int64_t train_batch = 50;
  double train_lr = 6e-5;
  double train_weight_decay = 0.1;
  double train_clip_norm = 1.0;
  std::int64_t train_warmup = 100;
  double train_beta1 = 0.9;
  double train_beta2 = 0.95;
  double lambda_align = 0.1;
  std::int64_t pin_correction = 0;  // hold the correction at zero (diagnostic)
  // Multiplies every step budget at materialization; full-scale runs set it
  // above 1 instead of editing each budget.
  double budget_scale = 1.0;
  // evaluation
  std::int64_t eval_episodes = 20;
  std::int64_t eval_seeds = 3;
  double target_multiplier = 1.0;
  std::string eval_buffer_source = "train";  // train | expert | dataset
  // fine-tuning
  std::int64_t finetune_steps = 5000;
  // run identity
  std::uint64_t run_seed = 1;
  std::string arm = "baseline_dt";
};

namespace detail {

inline std::int64_t parse_int_value(const std::string& key, const std::string& s) {
  char* end = nullptr;
  errno = 0;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || end == s.c_str() || *end != '\0')
    throw ConfigError("config: '" + key + "' wants an integer, got '" + s + "'");
  return static_cast<std::int64_t>(v);
}

inline std::uint64_t parse_u64_value(const std::string& key, const std::string& s) {
  char* end = nullptr;
  errno = 0;
  unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (errno != 0 || end == s.c_str() || *end != '\0' || s.find('-') != std::string::npos)
    throw ConfigError("config: '" + key + "' wants a non-negative integer, got '" +
                      s + "'");
  return static_cast<std::uint64_t>(v);
}

inline double parse_double_value(const std::string& key, const std::string& s) {
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(s.c_str(), &end);
  if (errno != 0 || end == s.c_str() || *end != '\0')
    throw ConfigError("config: '" + key + "' wants a number, got '" + s + "'");
  return v;
}

struct ConfigField {
  std::string key;  // section.name
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField>* fields = [] {
    auto* v = new std::vector<ConfigField>;
    auto add_str = [v](const char* key, std::string RunConfig::* f) {
      v->push_back({key, [f](RunConfig& c, const std::string& s) { c.*f = s; },
                    [f](const RunConfig& c) { return c.*f; }});
    };
    auto add_int = [v](const char* key, std::int64_t RunConfig::* f) {
      v->push_back({key,
                    [key, f](RunConfig& c, const std::string& s) {
                      c.*f = parse_int_value(key, s);
                    },
                    [f](const RunConfig& c) { return std::to_string(c.*f); }});
    };
    auto add_u64 = [v](const char* key, std::uint64_t RunConfig::* f) {
      v->push_back({key,
                    [key, f](RunConfig& c, const std::string& s) {
                      c.*f = parse_u64_value(key, s);
                    },
                    [f](const RunConfig& c) { return std::to_string(c.*f); }});
    };
    auto add_f64 = [v](const char* key, double RunConfig::* f) {
      v->push_back({key,
                    [key, f](RunConfig& c, const std::string& s) {
                      c.*f = parse_double_value(key, s);
                    },
                    [f](const RunConfig& c) { return format_f64(c.*f); }});
    };
    add_str("env.name", &RunConfig::env_name);
    add_str("data.tier", &RunConfig::data_tier);
    add_int("data.n_traj", &RunConfig::n_traj);
    add_u64("data.seed", &RunConfig::data_seed);
    add_str("data.buffer_source", &RunConfig::buffer_source);
    add_int("data.amb_size", &RunConfig::amb_size);
    add_u64("data.buffer_seed", &RunConfig::buffer_seed);
    add_int("ae.e_rtg", &RunConfig::ae_e_rtg);
    add_int("ae.e_obs", &RunConfig::ae_e_obs);
    add_int("ae.e_act", &RunConfig::ae_e_act);
    add_int("ae.n_latent", &RunConfig::ae_n_latent);
    add_int("ae.hidden", &RunConfig::ae_hidden);
    add_int("ae.steps", &RunConfig::ae_steps);
    add_int("ae.batch", &RunConfig::ae_batch);
    add_f64("ae.lr", &RunConfig::ae_lr);
    add_f64("ae.weight_decay", &RunConfig::ae_weight_decay);
    add_f64("ae.holdout_frac", &RunConfig::ae_holdout_frac);
    add_str("policy.mode", &RunConfig::policy_mode);
    add_int("policy.d_model", &RunConfig::d_model);
    add_int("policy.n_layers", &RunConfig::n_layers);
    add_int("policy.n_heads", &RunConfig::n_heads);
    add_int("policy.context_k", &RunConfig::context_k);
    add_f64("policy.dropout_embed", &RunConfig::dropout_embed);
    add_f64("policy.dropout_resid", &RunConfig::dropout_resid);
    add_f64("policy.dropout_attn", &RunConfig::dropout_attn);
    add_int("train.steps", &RunConfig::train_steps);
    add_int("train.batch", &RunConfig::train_batch);
    add_f64("train.lr", &RunConfig::train_lr);
    add_f64("train.weight_decay", &RunConfig::train_weight_decay);
    add_f64("train.clip_norm", &RunConfig::train_clip_norm);
    add_int("train.warmup", &RunConfig::train_warmup);
    add_f64("train.beta1", &RunConfig::train_beta1);
    add_f64("train.beta2", &RunConfig::train_beta2);
    add_f64("train.lambda", &RunConfig::lambda_align);
    add_int("train.pin_correction", &RunConfig::pin_correction);
    add_f64("train.budget_scale", &RunConfig::budget_scale);
    add_int("eval.episodes", &RunConfig::eval_episodes);
    add_int("eval.seeds", &RunConfig::eval_seeds);
    add_f64("eval.target_multiplier", &RunConfig::target_multiplier);
    add_str("eval.buffer_source", &RunConfig::eval_buffer_source);
    add_int("finetune.steps", &RunConfig::finetune_steps);
    add_u64("run.seed", &RunConfig::run_seed);
    add_str("run.arm", &RunConfig::arm);
    return v;
  }();
  return *fields;
}

inline const ConfigField* find_field(const std::string& key) {
  for (const ConfigField& f : config_fields())
    if (f.key == key) return &f;
  return nullptr;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const detail::ConfigField& f : detail::config_fields()) out.push_back(f.key);
  return out;
}

inline std::string unknown_key_message(const std::string& key) {
  std::string msg = "unknown config key '" + key + "'; valid keys:";
  for (const std::string& k : config_keys()) msg += " " + k;
  return msg;
}

// A key that is not in the binding table. Distinct from other config errors
// because the command line maps it to its own exit code.
struct UnknownKeyError : ConfigError {
  explicit UnknownKeyError(const std::string& msg) : ConfigError(msg) {}
};

namespace detail {

inline std::string strip(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail

// "section.name=value"; the error for a bad key lists every valid one.
inline void apply_override(RunConfig& cfg, const std::string& kv) {
  std::size_t eq = kv.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + kv + "' is not KEY=VALUE");
  std::string key = detail::strip(kv.substr(0, eq));
  std::string value = detail::strip(kv.substr(eq + 1));
  const detail::ConfigField* f = detail::find_field(key);
  if (f == nullptr) throw UnknownKeyError(unknown_key_message(key));
  f->set(cfg, value);
}

// Sectioned key=value text: [section] headers, name = value lines, '#'
// comments. Every name is looked up as section.name in the binding table.
inline void apply_config_stream(RunConfig& cfg, std::istream& is) {
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string s = detail::strip(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']' || s.size() < 3)
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": malformed section header '" + s + "'");
      section = detail::strip(s.substr(1, s.size() - 2));
      continue;
    }
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected name = value, got '" + s + "'");
    std::string name = detail::strip(s.substr(0, eq));
    std::string value = detail::strip(s.substr(eq + 1));
    if (section.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": '" + name + "' appears before any [section]");
    std::string key = section + "." + name;
    const detail::ConfigField* f = detail::find_field(key);
    if (f == nullptr)
      throw UnknownKeyError("config line " + std::to_string(lineno) + ": " +
                            unknown_key_message(key));
    f->set(cfg, value);
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw StateError("cannot open config file '" + path + "'");
  apply_config_stream(cfg, is);
}

// Every field in binding order; doubles in round-trippable decimal. This is
// the hashing pre-image, so two configs differing in any resolved field hash
// apart.
inline std::string canonical_config(const RunConfig& cfg) {
  std::string out;
  for (const detail::ConfigField& f : detail::config_fields())
    out += f.key + "=" + f.get(cfg) + "\n";
  return out;
}

inline std::uint64_t config_hash(const RunConfig& cfg) {
  return fnv1a64(canonical_config(cfg));
}

inline std::string config_hash_hex(const RunConfig& cfg) {
  return hash_hex(config_hash(cfg));
}

// Resolved config as sectioned text; parsing it back reproduces the hash.
inline std::string render_config(const RunConfig& cfg) {
  std::string out, section;
  for (const detail::ConfigField& f : detail::config_fields()) {
    std::string sec = f.key.substr(0, f.key.find('.'));
    std::string name = f.key.substr(f.key.find('.') + 1);
    if (sec != section) {
      if (!section.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += name + " = " + f.get(cfg) + "\n";
  }
  return out;
}

// ------------------------------------------------------- materialization

inline std::int64_t scaled_budget(std::int64_t steps, double scale) {
  double v = static_cast<double>(steps) * scale;
  return v < 0.5 ? 0 : static_cast<std::int64_t>(v + 0.5);
}

inline AutoencoderConfig autoencoder_config(const RunConfig& cfg,
                                            const EnvSpec& spec) {
  AutoencoderConfig a;
  a.obs_dim = spec.obs_dim;
  a.act_dim = spec.act_dim;
  a.e_rtg = cfg.ae_e_rtg;
  a.e_obs = cfg.ae_e_obs;
  a.e_act = cfg.ae_e_act;
  a.n_latent = cfg.ae_n_latent;
  a.hidden = cfg.ae_hidden;
  a.steps = scaled_budget(cfg.ae_steps, cfg.budget_scale);
  a.batch = cfg.ae_batch;
  a.lr = cfg.ae_lr;
  a.weight_decay = cfg.ae_weight_decay;
  a.holdout_frac = cfg.ae_holdout_frac;
  return a;
}

inline PolicyConfig policy_config(const RunConfig& cfg, const EnvSpec& spec) {
  PolicyConfig p;
  p.obs_dim = spec.obs_dim;
  p.act_dim = spec.act_dim;
  p.d_model = cfg.d_model;
  p.n_layers = cfg.n_layers;
  p.n_heads = cfg.n_heads;
  p.context_k = cfg.context_k;
  p.max_timestep = spec.horizon;
  p.dropout_embed = cfg.dropout_embed;
  p.dropout_resid = cfg.dropout_resid;
  p.dropout_attn = cfg.dropout_attn;
  p.e_rtg = cfg.ae_e_rtg;
  p.e_obs = cfg.ae_e_obs;
  p.n_latent = cfg.ae_n_latent;
  p.mode = mode_from_name(cfg.policy_mode);
  return p;
}

inline AdamWConfig optimizer_config(const RunConfig& cfg) {
  AdamWConfig o;
  o.lr = cfg.train_lr;
  o.beta1 = cfg.train_beta1;
  o.beta2 = cfg.train_beta2;
  o.weight_decay = cfg.train_weight_decay;
  o.clip_norm = cfg.train_clip_norm;
  o.warmup_steps = cfg.train_warmup;
  return o;
}

inline void validate(const RunConfig& cfg) {
  make_env(cfg.env_name);          // throws for unknown names
  tier_from_name(cfg.data_tier);   // likewise
  if (cfg.buffer_source != "expert" && cfg.buffer_source != "dataset")
    throw ConfigError("data.buffer_source must be expert or dataset");
  if (cfg.eval_buffer_source != "train" && cfg.eval_buffer_source != "expert" &&
      cfg.eval_buffer_source != "dataset")
    throw ConfigError("eval.buffer_source must be train, expert, or dataset");
  mode_from_name(cfg.policy_mode);
  if (cfg.arm != "baseline_dt" && cfg.arm != "finetuned_dt" &&
      cfg.arm != "reframe_expert" && cfg.arm != "reframe_swap_eval" &&
      cfg.arm != "reframe_dataset_amb")
    throw ConfigError(
        "run.arm must be one of baseline_dt, finetuned_dt, reframe_expert, "
        "reframe_swap_eval, reframe_dataset_amb");
  bool reframe_arm = cfg.arm.rfind("reframe_", 0) == 0;
  if (reframe_arm != (cfg.policy_mode == "reframe"))
    throw ConfigError("run.arm '" + cfg.arm + "' disagrees with policy.mode '" +
                      cfg.policy_mode + "'");
  if (cfg.arm == "reframe_swap_eval" &&
      (cfg.eval_buffer_source == "train" ||
       cfg.eval_buffer_source == cfg.buffer_source))
    throw ConfigError(
        "the swap arm evaluates against a buffer it was not trained with; "
        "eval.buffer_source must differ from data.buffer_source");
  if (cfg.n_traj < 1) throw ConfigError("data.n_traj must be >= 1");
  if (cfg.amb_size < 1) throw ConfigError("data.amb_size must be >= 1");
  if (cfg.amb_size > cfg.n_traj && cfg.buffer_source == "dataset")
    throw ConfigError("dataset-drawn buffer cannot exceed data.n_traj");
  if (cfg.ae_steps < 0 || cfg.train_steps < 0 || cfg.finetune_steps < 0)
    throw ConfigError("step budgets must be >= 0");
  if (cfg.ae_batch < 1 || cfg.train_batch < 1)
    throw ConfigError("batch sizes must be >= 1");
  if (cfg.eval_episodes < 1 || cfg.eval_seeds < 1)
    throw ConfigError("eval.episodes and eval.seeds must be >= 1");
  if (cfg.lambda_align < 0.0) throw ConfigError("train.lambda must be >= 0");
  if (cfg.pin_correction != 0 && cfg.pin_correction != 1)
    throw ConfigError("train.pin_correction must be 0 or 1");
  if (cfg.budget_scale <= 0.0) throw ConfigError("train.budget_scale must be > 0");
  if (cfg.target_multiplier <= 0.0)
    throw ConfigError("eval.target_multiplier must be > 0");
  // the module configs run their own shape checks
  EnvSpec spec = make_env(cfg.env_name);
  autoencoder_config(cfg, spec).validate();
  policy_config(cfg, spec).validate();
}

// Convenience for the command line: base file (optional) + overrides, then
// validation.
inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (!path.empty()) apply_config_file(cfg, path);
  for (const std::string& kv : overrides) apply_override(cfg, kv);
  validate(cfg);
  return cfg;
}

}  // namespace reframe
