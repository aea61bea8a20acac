// Sequence-model policy over (return, observation, action) token triples,
// with an optional retrieval path: encode the current return/observation
// through the frozen stage-1 encoders, project into buffer space, look up the
// nearest stored latent, decode a candidate action, lift it to model width,
// and add it to the backbone's hidden state before the action head.
//
// The lookup is a hard argmin with no gradient; the query projection learns
// through an auxiliary alignment loss instead (see policy_loss). Correction
// weights start at zero, so a fresh retrieval-mode model is the exact
// baseline until training moves them.
#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "reframe/checkpoint.hpp"
#include "reframe/common.hpp"
#include "reframe/context.hpp"
#include "reframe/graph.hpp"
#include "reframe/memory_buffer.hpp"
#include "reframe/param_store.hpp"
#include "reframe/rng.hpp"
#include "reframe/tensor.hpp"

namespace reframe {

enum class PolicyMode : std::uint32_t { kBaseline = 0, kReframe = 1 };

inline const char* mode_name(PolicyMode m) {
  return m == PolicyMode::kBaseline ? "baseline_dt" : "reframe";
}

inline PolicyMode mode_from_name(const std::string& s) {
  if (s == "baseline_dt") return PolicyMode::kBaseline;
  if (s == "reframe") return PolicyMode::kReframe;
  throw ConfigError("unknown policy mode '" + s + "'");
}

struct PolicyConfig {
  std::int64_t obs_dim = 4;
  std::int64_t act_dim = 2;
  std::int64_t d_model = 128;
  std::int64_t n_layers = 3;
  std::int64_t n_heads = 1;
  std::int64_t context_k = 60;
  std::int64_t max_timestep = 100;  // timestep-embedding table rows
  double dropout_embed = 0.2;
  double dropout_resid = 0.2;
  double dropout_attn = 0.05;
  // retrieval interface; must match the paired buffer's autoencoder
  std::int64_t e_rtg = 8;
  std::int64_t e_obs = 32;
  std::int64_t n_latent = 16;
  PolicyMode mode = PolicyMode::kBaseline;

  std::int64_t query_in() const { return e_rtg + e_obs; }
  std::int64_t ff_width() const { return 4 * d_model; }

  void validate() const {
    if (obs_dim < 1 || act_dim < 1)
      throw ConfigError("policy: component dims must be >= 1");
    if (d_model < 1 || n_layers < 1 || n_heads < 1)
      throw ConfigError("policy: model shape fields must be >= 1");
    if (d_model % n_heads != 0)
      throw ConfigError("policy: width must divide evenly into heads");
    if (context_k < 1 || max_timestep < 1)
      throw ConfigError("policy: context and timestep range must be >= 1");
    for (double p : {dropout_embed, dropout_resid, dropout_attn})
      if (p < 0.0 || p >= 1.0)
        throw ConfigError("policy: dropout rates must lie in [0, 1)");
    if (e_rtg < 1 || e_obs < 1 || n_latent < 1)
      throw ConfigError("policy: retrieval interface dims must be >= 1");
  }
};

namespace detail {

enum class PInit { kAffine, kZeros, kOnes, kEmbedding, kReframeAffine, kReframeZeros };

struct ParamSpec {
  std::string name;
  std::vector<std::int64_t> shape;
  PInit init;
};

// Single source of truth for parameter names, shapes, and init recipes.
// Shared backbone parameters come first and draw from the main init stream;
// retrieval-path parameters follow from a separate stream, so the backbone
// init is identical whether or not the retrieval path exists.
inline std::vector<ParamSpec> policy_param_layout(const PolicyConfig& cfg) {
  std::vector<ParamSpec> specs;
  auto affine = [&](const std::string& n, std::int64_t in, std::int64_t out) {
    specs.push_back({n + ".w", {in, out}, PInit::kAffine});
    specs.push_back({n + ".b", {out}, PInit::kZeros});
  };
  auto ln = [&](const std::string& n) {
    specs.push_back({n + ".g", {cfg.d_model}, PInit::kOnes});
    specs.push_back({n + ".b", {cfg.d_model}, PInit::kZeros});
  };
  affine("tok_rtg", 1, cfg.d_model);
  affine("tok_obs", cfg.obs_dim, cfg.d_model);
  affine("tok_act", cfg.act_dim, cfg.d_model);
  specs.push_back({"tok_time", {cfg.max_timestep, cfg.d_model}, PInit::kEmbedding});
  ln("embed_ln");
  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string blk = "blk" + std::to_string(i);
    ln(blk + ".ln1");
    affine(blk + ".attn.q", cfg.d_model, cfg.d_model);
    affine(blk + ".attn.k", cfg.d_model, cfg.d_model);
    affine(blk + ".attn.v", cfg.d_model, cfg.d_model);
    affine(blk + ".attn.o", cfg.d_model, cfg.d_model);
    ln(blk + ".ln2");
    affine(blk + ".ff.fc", cfg.d_model, cfg.ff_width());
    affine(blk + ".ff.proj", cfg.ff_width(), cfg.d_model);
  }
  ln("final_ln");
  affine("head", cfg.d_model, cfg.act_dim);
  // retrieval path
  specs.push_back({"query.w", {cfg.query_in(), cfg.n_latent}, PInit::kReframeAffine});
  specs.push_back({"query.b", {cfg.n_latent}, PInit::kReframeZeros});
  specs.push_back({"corr.w", {cfg.act_dim, cfg.d_model}, PInit::kReframeZeros});
  specs.push_back({"corr.b", {cfg.d_model}, PInit::kReframeZeros});
  return specs;
}

inline bool is_reframe_param(const std::string& name) {
  return name.rfind("query.", 0) == 0 || name.rfind("corr.", 0) == 0;
}

}  // namespace detail

class PolicyModel {
 public:
  PolicyModel(const PolicyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng init(seed, streams::kParamInit);
    Rng rinit(seed, streams::kReframeInit);
    for (const detail::ParamSpec& s : detail::policy_param_layout(cfg_)) {
      switch (s.init) {
        case detail::PInit::kAffine:
          params_.add(s.name, init_affine_weight(s.shape[0], s.shape[1], init));
          break;
        case detail::PInit::kZeros:
        case detail::PInit::kReframeZeros:
          params_.add(s.name, Tensor(s.shape));
          break;
        case detail::PInit::kOnes:
          params_.add(s.name, Tensor::full(s.shape, 1.0));
          break;
        case detail::PInit::kEmbedding:
          params_.add(s.name, init_embedding(s.shape[0], s.shape[1], init));
          break;
        case detail::PInit::kReframeAffine:
          params_.add(s.name, init_affine_weight(s.shape[0], s.shape[1], rinit));
          break;
      }
    }
  }

  // Rebuild from checkpoint contents; shapes must match the layout exactly.
  PolicyModel(const PolicyConfig& cfg, ParamStore params)
      : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    std::vector<detail::ParamSpec> layout = detail::policy_param_layout(cfg_);
    if (params_.size() != layout.size())
      throw FormatError("policy checkpoint has wrong parameter count", 0);
    for (const detail::ParamSpec& s : layout) {
      if (!params_.has(s.name))
        throw FormatError("policy checkpoint missing " + s.name, 0);
      if (params_.value(s.name).shape != s.shape)
        throw FormatError("policy checkpoint shape mismatch for " + s.name, 0);
    }
  }

  const PolicyConfig& config() const { return cfg_; }
  PolicyMode mode() const { return cfg_.mode; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::uint64_t content_hash() const { return params_.content_hash(); }

  // Optimizer partition for the current mode: the retrieval-path parameters
  // exist in both modes but are trainable only in retrieval mode.
  std::vector<std::string> trainable_param_names() const {
    std::vector<std::string> out;
    for (const std::string& n : params_.names())
      if (cfg_.mode == PolicyMode::kReframe || !detail::is_reframe_param(n))
        out.push_back(n);
    return out;
  }

 private:
  PolicyConfig cfg_;
  ParamStore params_;
};

// --------------------------------------------------------------- forward

// Backbone pass: interleave (R, o, a) tokens, add timestep embeddings, run
// the causal blocks, and read the hidden state at each observation position.
// Returns [B*K x D]; the prediction at step t sees R_t, o_t and the past,
// never a_t.
inline NodeId dt_forward(Tape& t, PolicyModel& model, const ContextBatch& cb,
                         Rng& dropout_rng, bool training) {
  const PolicyConfig& cfg = model.config();
  if (cb.K != cfg.context_k)
    throw DimensionError("dt_forward: context K " + std::to_string(cb.K) +
                         " vs configured " + std::to_string(cfg.context_k));
  if (cb.obs.shape[1] != cfg.obs_dim || cb.act.shape[1] != cfg.act_dim)
    throw DimensionError("dt_forward: batch dims disagree with policy config");
  for (std::int64_t ts : cb.timesteps)
    if (ts < 0 || ts >= cfg.max_timestep)
      throw ArgumentError("dt_forward: timestep " + std::to_string(ts) +
                          " outside embedding table");

  ParamStore& ps = model.params();
  std::int64_t B = cb.B, K = cb.K;

  NodeId r = linear(t, t.leaf(cb.rtg), t.param(ps, "tok_rtg.w"),
                    t.param(ps, "tok_rtg.b"));
  NodeId o = linear(t, t.leaf(cb.obs), t.param(ps, "tok_obs.w"),
                    t.param(ps, "tok_obs.b"));
  NodeId a = linear(t, t.leaf(cb.act), t.param(ps, "tok_act.w"),
                    t.param(ps, "tok_act.b"));
  NodeId te = t.embedding_rows(t.param(ps, "tok_time"), cb.timesteps);
  r = t.add(r, te);
  o = t.add(o, te);
  a = t.add(a, te);

  NodeId x = t.interleave3(r, o, a, B, K);  // [B*3K x D]
  x = t.layer_norm(x, t.param(ps, "embed_ln.g"), t.param(ps, "embed_ln.b"));
  x = t.dropout(x, cfg.dropout_embed, dropout_rng, training);

  // each step's three tokens share the step's validity
  std::vector<std::uint8_t> key_valid(static_cast<std::size_t>(B * 3 * K));
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t k = 0; k < K; ++k) {
      std::uint8_t m = cb.mask[static_cast<std::size_t>(b * K + k)];
      for (int j = 0; j < 3; ++j)
        key_valid[static_cast<std::size_t>(b * 3 * K + 3 * k + j)] = m;
    }

  for (std::int64_t i = 0; i < cfg.n_layers; ++i) {
    std::string blk = "blk" + std::to_string(i);
    NodeId h = t.layer_norm(x, t.param(ps, blk + ".ln1.g"),
                            t.param(ps, blk + ".ln1.b"));
    NodeId q = linear(t, h, t.param(ps, blk + ".attn.q.w"),
                      t.param(ps, blk + ".attn.q.b"));
    NodeId k = linear(t, h, t.param(ps, blk + ".attn.k.w"),
                      t.param(ps, blk + ".attn.k.b"));
    NodeId v = linear(t, h, t.param(ps, blk + ".attn.v.w"),
                      t.param(ps, blk + ".attn.v.b"));
    NodeId att = t.attention_core(q, k, v, B, 3 * K,
                                  static_cast<int>(cfg.n_heads), key_valid,
                                  cfg.dropout_attn, dropout_rng, training);
    att = linear(t, att, t.param(ps, blk + ".attn.o.w"),
                 t.param(ps, blk + ".attn.o.b"));
    att = t.dropout(att, cfg.dropout_resid, dropout_rng, training);
    x = t.add(x, att);

    NodeId f = t.layer_norm(x, t.param(ps, blk + ".ln2.g"),
                            t.param(ps, blk + ".ln2.b"));
    f = linear(t, f, t.param(ps, blk + ".ff.fc.w"), t.param(ps, blk + ".ff.fc.b"));
    f = t.gelu(f);
    f = linear(t, f, t.param(ps, blk + ".ff.proj.w"),
               t.param(ps, blk + ".ff.proj.b"));
    f = t.dropout(f, cfg.dropout_resid, dropout_rng, training);
    x = t.add(x, f);
  }

  x = t.layer_norm(x, t.param(ps, "final_ln.g"), t.param(ps, "final_ln.b"));
  return t.pick_token(x, B, K, 1);  // offset 1 = observation token
}

// Frozen-encoder features for query construction: re-normalize the raw
// return/observation with the BUFFER's statistics (its dataset may differ
// from the policy's) and run the stage-1 rtg/obs encoders. No action leaks
// into the query. Constant with respect to the tape.
inline Tensor query_encoder_inputs(const ContextBatch& cb, const MemoryBuffer& buf) {
  const AutoencoderConfig& acfg = buf.model().config();
  if (cb.obs.shape[1] != acfg.obs_dim)
    throw DimensionError("query inputs: obs width disagrees with buffer model");
  const NormStats& st = buf.stats();
  std::int64_t n = cb.B * cb.K;
  Tensor r({n, 1}), o({n, acfg.obs_dim});
  for (std::int64_t i = 0; i < n; ++i) {
    r.at(i, 0) = cb.raw_rtg.at(i, 0) / st.return_scale;
    for (std::int64_t j = 0; j < acfg.obs_dim; ++j)
      o.at(i, j) = (cb.raw_obs.at(i, j) - st.obs_mean[static_cast<std::size_t>(j)]) /
                   st.obs_std[static_cast<std::size_t>(j)];
  }
  Tensor er = buf.model().encode_rtg(r);
  Tensor eo = buf.model().encode_obs(o);
  Tensor cat({n, acfg.e_rtg + acfg.e_obs});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < acfg.e_rtg; ++j) cat.at(i, j) = er.at(i, j);
    for (std::int64_t j = 0; j < acfg.e_obs; ++j)
      cat.at(i, acfg.e_rtg + j) = eo.at(i, j);
  }
  return cat;
}

struct PolicyForward {
  NodeId a_hat = -1;       // [B*K x act_dim]
  NodeId query = -1;       // [B*K x n_latent], retrieval mode only
  NodeId correction = -1;  // [B*K x D], retrieval mode only
  Tensor retrieved_rows;            // [B*K x n_latent], zero on padded rows
  Tensor decoded_actions;           // [B*K x act_dim], zero on padded rows
  std::vector<std::int64_t> row_indices;  // -1 on padded rows
  std::vector<double> dist_sq;            // 0 on padded rows
};

// Full policy pass. In baseline mode the buffer must be null and the
// retrieval path never runs; in retrieval mode it must be present and
// dimensionally compatible.
inline PolicyForward policy_forward(Tape& t, PolicyModel& model,
                                    const ContextBatch& cb,
                                    const MemoryBuffer* buffer,
                                    Rng& dropout_rng, bool training) {
  const PolicyConfig& cfg = model.config();
  if (cfg.mode == PolicyMode::kBaseline && buffer != nullptr)
    throw ConfigError("baseline mode takes no memory buffer");
  if (cfg.mode == PolicyMode::kReframe && buffer == nullptr)
    throw ConfigError("retrieval mode requires a memory buffer");
  if (buffer != nullptr) {
    const AutoencoderConfig& acfg = buffer->model().config();
    if (buffer->latent_dim() != cfg.n_latent || acfg.e_rtg != cfg.e_rtg ||
        acfg.e_obs != cfg.e_obs || acfg.act_dim != cfg.act_dim ||
        acfg.obs_dim != cfg.obs_dim)
      throw ConfigError("policy and buffer disagree on retrieval dims");
  }

  ParamStore& ps = model.params();
  NodeId a_star = dt_forward(t, model, cb, dropout_rng, training);

  PolicyForward fw;
  if (cfg.mode == PolicyMode::kBaseline) {
    fw.a_hat = linear(t, a_star, t.param(ps, "head.w"), t.param(ps, "head.b"));
    return fw;
  }

  std::int64_t n = cb.B * cb.K;
  fw.query = linear(t, t.leaf(query_encoder_inputs(cb, *buffer)),
                    t.param(ps, "query.w"), t.param(ps, "query.b"));

  // hard lookup on the query values; no gradient crosses this boundary
  const Tensor& qv = t.val(fw.query);
  fw.retrieved_rows = Tensor({n, cfg.n_latent});
  fw.row_indices.assign(static_cast<std::size_t>(n), -1);
  fw.dist_sq.assign(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (!cb.mask[static_cast<std::size_t>(i)]) continue;
    RetrievalHit hit =
        buffer->retrieve_nearest(qv.data.data() + i * cfg.n_latent, cfg.n_latent);
    fw.row_indices[static_cast<std::size_t>(i)] = hit.index;
    fw.dist_sq[static_cast<std::size_t>(i)] = hit.dist_sq;
    const double* src = buffer->rows().data.data() + hit.index * cfg.n_latent;
    for (std::int64_t j = 0; j < cfg.n_latent; ++j)
      fw.retrieved_rows.at(i, j) = src[j];
  }

  fw.decoded_actions = buffer->decode_action(fw.retrieved_rows);
  for (std::int64_t i = 0; i < n; ++i)
    if (!cb.mask[static_cast<std::size_t>(i)])
      for (std::int64_t j = 0; j < cfg.act_dim; ++j)
        fw.decoded_actions.at(i, j) = 0.0;

  fw.correction = linear(t, t.leaf(fw.decoded_actions), t.param(ps, "corr.w"),
                         t.param(ps, "corr.b"));
  NodeId fused = t.add(a_star, fw.correction);
  fw.a_hat = linear(t, fused, t.param(ps, "head.w"), t.param(ps, "head.b"));
  return fw;
}

// Masked action MSE, plus (in retrieval mode, when enabled) the alignment
// term that pulls queries toward the latents they retrieved: the argmin
// itself passes no gradient, so this is the only signal the query projection
// gets. With lambda = 0 the loss value and every gradient match baseline
// arithmetic exactly.
inline NodeId policy_loss(Tape& t, const PolicyForward& fw,
                          const ContextBatch& cb, double lambda) {
  NodeId mse = t.mse_masked(fw.a_hat, cb.act, cb.mask);
  if (fw.query >= 0 && lambda != 0.0) {
    NodeId align = t.row_sqdist_masked(fw.query, fw.retrieved_rows, cb.mask);
    return t.axpy_scalar(mse, align, 1.0, lambda);
  }
  return mse;
}

// --------------------------------------------------------------- rollout

struct TraceEntry {
  std::vector<double> query;       // h* for this step
  std::int64_t row = -1;           // chosen buffer row
  double dist_sq = 0.0;
  std::vector<double> decoded;     // candidate action from the buffer
  std::vector<double> correction;  // lifted correction, width D
};

struct RetrievalTrace {
  std::vector<TraceEntry> entries;  // one per valid context step
};

struct ActionResult {
  std::vector<double> action;
  RetrievalTrace trace;
};

// Deterministic eval-mode action for the newest step of a B=1 context.
inline ActionResult policy_act(PolicyModel& model, const ContextBatch& cb,
                               const MemoryBuffer* buffer) {
  if (cb.B != 1) throw ArgumentError("policy_act: wants a B=1 context");
  if (!cb.mask.back())
    throw ArgumentError("policy_act: newest context row must be valid");
  Tape t;
  Rng unused(0);
  PolicyForward fw = policy_forward(t, model, cb, buffer, unused, false);

  ActionResult res;
  const Tensor& ah = t.val(fw.a_hat);
  std::int64_t last = cb.K - 1;
  res.action.resize(static_cast<std::size_t>(model.config().act_dim));
  for (std::int64_t j = 0; j < model.config().act_dim; ++j)
    res.action[static_cast<std::size_t>(j)] = ah.at(last, j);

  if (fw.query >= 0) {
    const Tensor& qv = t.val(fw.query);
    const Tensor& cv = t.val(fw.correction);
    for (std::int64_t i = 0; i < cb.K; ++i) {
      if (!cb.mask[static_cast<std::size_t>(i)]) continue;
      TraceEntry e;
      e.row = fw.row_indices[static_cast<std::size_t>(i)];
      e.dist_sq = fw.dist_sq[static_cast<std::size_t>(i)];
      for (std::int64_t j = 0; j < qv.shape[1]; ++j)
        e.query.push_back(qv.at(i, j));
      for (std::int64_t j = 0; j < fw.decoded_actions.shape[1]; ++j)
        e.decoded.push_back(fw.decoded_actions.at(i, j));
      for (std::int64_t j = 0; j < cv.shape[1]; ++j)
        e.correction.push_back(cv.at(i, j));
      res.trace.entries.push_back(std::move(e));
    }
  }
  return res;
}

// ----------------------------------------------------------- RFPC format
//
//   magic "RFPC" | version u32 | mode u32 | run-config hash u64
//   | training buffer hash u64 (0 when none) | policy dims block
//   | embedded "RFNN" parameter container

constexpr std::uint32_t kPolicyVersion = 1;

struct PolicyCheckpoint {
  PolicyConfig cfg;
  std::uint64_t run_config_hash = 0;
  std::uint64_t buffer_hash = 0;  // hash of the buffer file trained against
  ParamStore params;
};

inline void save_policy(std::ostream& os, const PolicyModel& model,
                        std::uint64_t run_config_hash, std::uint64_t buffer_hash) {
  const PolicyConfig& c = model.config();
  io::write_magic(os, "RFPC", kPolicyVersion);
  io::write_u32(os, static_cast<std::uint32_t>(c.mode));
  io::write_u64(os, run_config_hash);
  io::write_u64(os, buffer_hash);
  for (std::int64_t v : {c.obs_dim, c.act_dim, c.d_model, c.n_layers, c.n_heads,
                         c.context_k, c.max_timestep, c.e_rtg, c.e_obs, c.n_latent})
    io::write_u64(os, static_cast<std::uint64_t>(v));
  io::write_f64(os, c.dropout_embed);
  io::write_f64(os, c.dropout_resid);
  io::write_f64(os, c.dropout_attn);
  save_params(os, model.params());
}

inline PolicyCheckpoint load_policy(std::istream& is) {
  io::expect_magic(is, "RFPC", kPolicyVersion);
  PolicyCheckpoint ck;
  std::uint32_t mode = io::read_u32(is);
  if (mode > 1) throw FormatError("unknown policy mode flag", io::tell(is));
  ck.cfg.mode = static_cast<PolicyMode>(mode);
  ck.run_config_hash = io::read_u64(is);
  ck.buffer_hash = io::read_u64(is);
  for (std::int64_t* f : {&ck.cfg.obs_dim, &ck.cfg.act_dim, &ck.cfg.d_model,
                          &ck.cfg.n_layers, &ck.cfg.n_heads, &ck.cfg.context_k,
                          &ck.cfg.max_timestep, &ck.cfg.e_rtg, &ck.cfg.e_obs,
                          &ck.cfg.n_latent}) {
    std::uint64_t v = io::read_u64(is);
    if (v == 0 || v > (1ull << 32))
      throw FormatError("implausible policy dimension", io::tell(is));
    *f = static_cast<std::int64_t>(v);
  }
  ck.cfg.dropout_embed = io::read_f64(is);
  ck.cfg.dropout_resid = io::read_f64(is);
  ck.cfg.dropout_attn = io::read_f64(is);
  ck.params = load_params(is);
  return ck;
}

inline void save_policy_file(const std::string& path, const PolicyModel& model,
                             std::uint64_t run_config_hash,
                             std::uint64_t buffer_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot open '" + path + "' for writing");
  save_policy(os, model, run_config_hash, buffer_hash);
  os.flush();
  if (!os) throw StateError("write failed for '" + path + "'");
}

inline PolicyCheckpoint load_policy_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot open '" + path + "' for reading");
  return load_policy(is);
}

}  // namespace reframe
