// Stage-1 model: three component encoders feeding a shared linear bottleneck,
// three decoders reading it back out. Trained with per-component losses and
// one optimizer per decoder (the shared trunk gets the summed gradient), then
// frozen for good: the memory buffer and the policy's retrieval path both
// assume these weights never move again.
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "reframe/adamw.hpp"
#include "reframe/common.hpp"
#include "reframe/context.hpp"
#include "reframe/graph.hpp"
#include "reframe/param_store.hpp"
#include "reframe/rng.hpp"
#include "reframe/tensor.hpp"
#include "reframe/trajectory.hpp"

namespace reframe {

struct AutoencoderConfig {
  std::int64_t obs_dim = 4;
  std::int64_t act_dim = 2;
  std::int64_t e_rtg = 8;
  std::int64_t e_obs = 32;
  std::int64_t e_act = 16;
  std::int64_t n_latent = 16;
  std::int64_t hidden = 64;
  std::int64_t steps = 20000;
  std::int64_t batch = 256;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  std::int64_t warmup_steps = 100;
  double holdout_frac = 0.1;

  std::int64_t concat_width() const { return e_rtg + e_obs + e_act; }

  void validate() const {
    if (obs_dim < 1 || act_dim < 1)
      throw ConfigError("autoencoder: component dims must be >= 1");
    if (e_rtg < 1 || e_obs < 1 || e_act < 1 || hidden < 1)
      throw ConfigError("autoencoder: embedding widths must be >= 1");
    if (n_latent < 1 || n_latent >= concat_width())
      throw ConfigError("autoencoder: latent width must compress the concat");
    if (steps < 0 || batch < 1)
      throw ConfigError("autoencoder: bad step/batch budget");
    if (lr <= 0.0 || clip_norm <= 0.0 || weight_decay < 0.0 || warmup_steps < 0)
      throw ConfigError("autoencoder: bad optimizer settings");
    if (holdout_frac < 0.0 || holdout_frac >= 1.0)
      throw ConfigError("autoencoder: holdout fraction must lie in [0, 1)");
  }
};

namespace detail {

// y = x*W + b, then optional ReLU; identical arithmetic to the tape ops so
// inference and training forwards agree bitwise.
inline Tensor affine_eval(const Tensor& x, const Tensor& w, const Tensor& b,
                          bool relu) {
  if (x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[0])
    throw DimensionError("affine_eval: " + x.shape_str() + " vs " + w.shape_str());
  Tensor out({x.shape[0], w.shape[1]});
  kernels::matmul(x.data.data(), w.data.data(), out.data.data(), x.shape[0],
                  x.shape[1], w.shape[1], false);
  std::int64_t n = w.shape[1];
  for (std::int64_t i = 0; i < x.shape[0]; ++i)
    for (std::int64_t j = 0; j < n; ++j) {
      double v = out.data[i * n + j] + b.data[static_cast<std::size_t>(j)];
      out.data[i * n + j] = relu && v <= 0.0 ? 0.0 : v;
    }
  return out;
}

inline void add_mlp_params(ParamStore& ps, const std::string& prefix,
                           std::int64_t in, std::int64_t hidden,
                           std::int64_t out, Rng& rng) {
  ps.add(prefix + ".w0", init_affine_weight(in, hidden, rng));
  ps.add(prefix + ".b0", Tensor({hidden}));
  ps.add(prefix + ".w1", init_affine_weight(hidden, hidden, rng));
  ps.add(prefix + ".b1", Tensor({hidden}));
  ps.add(prefix + ".w2", init_affine_weight(hidden, out, rng));
  ps.add(prefix + ".b2", Tensor({out}));
}

inline Tensor mlp_eval(const ParamStore& ps, const std::string& prefix,
                       const Tensor& x) {
  Tensor h = affine_eval(x, ps.value(prefix + ".w0"), ps.value(prefix + ".b0"), true);
  h = affine_eval(h, ps.value(prefix + ".w1"), ps.value(prefix + ".b1"), true);
  return affine_eval(h, ps.value(prefix + ".w2"), ps.value(prefix + ".b2"), false);
}

inline NodeId mlp_tape(Tape& t, ParamStore& ps, const std::string& prefix,
                       NodeId x) {
  NodeId h = t.relu(linear(t, x, t.param(ps, prefix + ".w0"),
                           t.param(ps, prefix + ".b0")));
  h = t.relu(linear(t, h, t.param(ps, prefix + ".w1"),
                    t.param(ps, prefix + ".b1")));
  return linear(t, h, t.param(ps, prefix + ".w2"), t.param(ps, prefix + ".b2"));
}

}  // namespace detail

class AutoencoderModel {
 public:
  AutoencoderModel(const AutoencoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed, streams::kParamInit);
    detail::add_mlp_params(params_, "enc_rtg", 1, cfg_.hidden, cfg_.e_rtg, rng);
    detail::add_mlp_params(params_, "enc_obs", cfg_.obs_dim, cfg_.hidden, cfg_.e_obs, rng);
    detail::add_mlp_params(params_, "enc_act", cfg_.act_dim, cfg_.hidden, cfg_.e_act, rng);
    params_.add("bottleneck.w",
                init_affine_weight(cfg_.concat_width(), cfg_.n_latent, rng));
    params_.add("bottleneck.b", Tensor({cfg_.n_latent}));
    detail::add_mlp_params(params_, "dec_rtg", cfg_.n_latent, cfg_.hidden, 1, rng);
    detail::add_mlp_params(params_, "dec_obs", cfg_.n_latent, cfg_.hidden, cfg_.obs_dim, rng);
    detail::add_mlp_params(params_, "dec_act", cfg_.n_latent, cfg_.hidden, cfg_.act_dim, rng);
  }

  // Rebuild from a parameter set (a loaded checkpoint); every dimension is
  // recovered from tensor shapes. The result is frozen: checkpoints are
  // artifacts of finished stage-1 runs.
  explicit AutoencoderModel(ParamStore params)
      : params_(std::move(params)), frozen_(true) {
    for (const char* p : {"enc_rtg", "enc_obs", "enc_act", "dec_rtg",
                          "dec_obs", "dec_act"})
      for (const char* s : {".w0", ".b0", ".w1", ".b1", ".w2", ".b2"})
        if (!params_.has(std::string(p) + s))
          throw FormatError("autoencoder checkpoint missing " + std::string(p) + s, 0);
    if (!params_.has("bottleneck.w") || !params_.has("bottleneck.b"))
      throw FormatError("autoencoder checkpoint missing bottleneck", 0);
    cfg_.obs_dim = params_.value("enc_obs.w0").shape[0];
    cfg_.act_dim = params_.value("enc_act.w0").shape[0];
    cfg_.hidden = params_.value("enc_rtg.w0").shape[1];
    cfg_.e_rtg = params_.value("enc_rtg.w2").shape[1];
    cfg_.e_obs = params_.value("enc_obs.w2").shape[1];
    cfg_.e_act = params_.value("enc_act.w2").shape[1];
    cfg_.n_latent = params_.value("bottleneck.w").shape[1];
    cfg_.validate();
    if (params_.value("bottleneck.w").shape[0] != cfg_.concat_width() ||
        params_.value("dec_rtg.w0").shape[0] != cfg_.n_latent ||
        params_.value("dec_obs.w0").shape[0] != cfg_.n_latent ||
        params_.value("dec_act.w0").shape[0] != cfg_.n_latent ||
        params_.value("dec_rtg.w2").shape[1] != 1 ||
        params_.value("dec_obs.w2").shape[1] != cfg_.obs_dim ||
        params_.value("dec_act.w2").shape[1] != cfg_.act_dim)
      throw FormatError("autoencoder checkpoint has inconsistent shapes", 0);
  }

  const AutoencoderConfig& config() const { return cfg_; }
  const ParamStore& params() const { return params_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  ParamStore& mutable_params() {
    if (frozen_) throw StateError("autoencoder is frozen");
    return params_;
  }

  std::uint64_t content_hash() const { return params_.content_hash(); }

  // ---- eval-mode forwards; inputs are [n x dim] batches

  Tensor encode_rtg(const Tensor& r) const { return encode("enc_rtg", r, 1); }
  Tensor encode_obs(const Tensor& o) const { return encode("enc_obs", o, cfg_.obs_dim); }
  Tensor encode_act(const Tensor& a) const { return encode("enc_act", a, cfg_.act_dim); }

  Tensor bottleneck_of(const Tensor& cat) const {
    if (cat.rank() != 2 || cat.shape[1] != cfg_.concat_width())
      throw DimensionError("bottleneck: want width " +
                           std::to_string(cfg_.concat_width()) + ", got " +
                           cat.shape_str());
    return detail::affine_eval(cat, params_.value("bottleneck.w"),
                               params_.value("bottleneck.b"), false);
  }

  // Full encode path: (scaled rtg, standardized obs, raw act) -> latent.
  Tensor latent_of(const Tensor& rtg, const Tensor& obs, const Tensor& act) const {
    Tensor er = encode_rtg(rtg), eo = encode_obs(obs), ea = encode_act(act);
    std::int64_t n = er.shape[0];
    Tensor cat({n, cfg_.concat_width()});
    for (std::int64_t i = 0; i < n; ++i) {
      double* row = cat.data.data() + i * cfg_.concat_width();
      for (std::int64_t j = 0; j < cfg_.e_rtg; ++j) row[j] = er.at(i, j);
      for (std::int64_t j = 0; j < cfg_.e_obs; ++j) row[cfg_.e_rtg + j] = eo.at(i, j);
      for (std::int64_t j = 0; j < cfg_.e_act; ++j)
        row[cfg_.e_rtg + cfg_.e_obs + j] = ea.at(i, j);
    }
    return bottleneck_of(cat);
  }

  Tensor decode_rtg(const Tensor& z) const { return decode("dec_rtg", z); }
  Tensor decode_obs(const Tensor& z) const { return decode("dec_obs", z); }
  Tensor decode_act(const Tensor& z) const { return decode("dec_act", z); }

 private:
  Tensor encode(const std::string& prefix, const Tensor& x, std::int64_t want) const {
    if (x.rank() != 2 || x.shape[1] != want)
      throw DimensionError(prefix + ": want [n x " + std::to_string(want) +
                           "], got " + x.shape_str());
    return detail::mlp_eval(params_, prefix, x);
  }

  Tensor decode(const std::string& prefix, const Tensor& z) const {
    if (z.rank() != 2 || z.shape[1] != cfg_.n_latent)
      throw DimensionError(prefix + ": want latent width " +
                           std::to_string(cfg_.n_latent) + ", got " +
                           z.shape_str());
    return detail::mlp_eval(params_, prefix, z);
  }

  AutoencoderConfig cfg_;
  ParamStore params_;
  bool frozen_ = false;
};

// ------------------------------------------------------------- training

struct AeTrainLog {
  std::int64_t step = 0;
  double loss_rtg = 0.0;
  double loss_obs = 0.0;
  double loss_act = 0.0;
};

struct ComponentRecon {
  double mse = 0.0;
  double variance = 0.0;
  double ratio() const { return mse / (variance > 0.0 ? variance : 1.0); }
};

struct ReconReport {
  ComponentRecon rtg, obs, act;
};

struct AeTrainResult {
  std::vector<AeTrainLog> curve;
  ReconReport holdout;
};

namespace detail {

// Flat (trajectory, timestep) list over a subset of trajectories.
struct TransitionIndex {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> items;
};

inline TransitionIndex index_transitions(const TrajectoryDataset& ds,
                                         std::size_t lo, std::size_t hi) {
  TransitionIndex ix;
  for (std::size_t ti = lo; ti < hi; ++ti) {
    std::int64_t T = ds.trajectories[ti].length();
    for (std::int64_t t = 0; t < T; ++t)
      ix.items.emplace_back(static_cast<std::uint32_t>(ti),
                            static_cast<std::uint32_t>(t));
  }
  return ix;
}

// Normalized component batches for the rows ix[rows[..]]; rtg is divided by
// the return scale, obs standardized, actions kept in native units.
struct ComponentBatch {
  Tensor rtg, obs, act;
};

inline ComponentBatch gather_components(const TrajectoryDataset& ds,
                                        const TransitionIndex& ix,
                                        const std::vector<std::size_t>& rows) {
  std::int64_t n = static_cast<std::int64_t>(rows.size());
  std::int64_t od = ds.spec.obs_dim, ad = ds.spec.act_dim;
  ComponentBatch cb{Tensor({n, 1}), Tensor({n, od}), Tensor({n, ad})};
  for (std::int64_t i = 0; i < n; ++i) {
    auto [ti, t] = ix.items[rows[static_cast<std::size_t>(i)]];
    const Trajectory& traj = ds.trajectories[ti];
    cb.rtg.at(i, 0) = traj.returns_to_go[t] / ds.stats.return_scale;
    for (std::int64_t j = 0; j < od; ++j)
      cb.obs.at(i, j) = (traj.obs.at(t, j) - ds.stats.obs_mean[static_cast<std::size_t>(j)]) /
                        ds.stats.obs_std[static_cast<std::size_t>(j)];
    for (std::int64_t j = 0; j < ad; ++j) cb.act.at(i, j) = traj.act.at(t, j);
  }
  return cb;
}

}  // namespace detail

// Holdout = trailing holdout_frac of the trajectory list (at least one
// trajectory, and the whole set when there is only one to go around).
inline std::pair<std::size_t, std::size_t> holdout_range(std::size_t n_traj,
                                                         double frac) {
  if (n_traj == 0) throw ArgumentError("holdout_range: empty dataset");
  std::size_t n_hold = static_cast<std::size_t>(
      std::ceil(frac * static_cast<double>(n_traj)));
  if (n_hold == 0) n_hold = 1;
  if (n_hold >= n_traj) return {0, n_traj};
  return {n_traj - n_hold, n_traj};
}

inline ReconReport reconstruction_report(const AutoencoderModel& model,
                                         const TrajectoryDataset& ds,
                                         std::size_t lo, std::size_t hi) {
  detail::TransitionIndex ix = detail::index_transitions(ds, lo, hi);
  if (ix.items.empty()) throw ArgumentError("reconstruction_report: no rows");
  std::vector<std::size_t> rows(ix.items.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  detail::ComponentBatch cb = detail::gather_components(ds, ix, rows);
  Tensor z = model.latent_of(cb.rtg, cb.obs, cb.act);

  auto component = [](const Tensor& pred, const Tensor& truth) {
    ComponentRecon r;
    std::int64_t n = truth.shape[0], d = truth.shape[1];
    for (std::int64_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (std::int64_t i = 0; i < n; ++i) mean += truth.at(i, j);
      mean /= static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        double dev = truth.at(i, j) - mean;
        r.variance += dev * dev;
        double err = pred.at(i, j) - truth.at(i, j);
        r.mse += err * err;
      }
    }
    r.mse /= static_cast<double>(n * d);
    r.variance /= static_cast<double>(n * d);
    return r;
  };
  ReconReport rep;
  rep.rtg = component(model.decode_rtg(z), cb.rtg);
  rep.obs = component(model.decode_obs(z), cb.obs);
  rep.act = component(model.decode_act(z), cb.act);
  return rep;
}

// Trains in place and freezes the model. Four optimizers share the store:
// one per decoder, one for the encoders plus bottleneck. A single backward
// pass through the summed loss routes each decoder only its own gradient;
// the trunk naturally receives all three.
inline AeTrainResult train_autoencoder(AutoencoderModel& model,
                                       const TrajectoryDataset& ds,
                                       std::uint64_t seed) {
  if (model.frozen()) throw StateError("train_autoencoder: model is frozen");
  if (ds.trajectories.empty())
    throw ArgumentError("train_autoencoder: empty dataset");
  const AutoencoderConfig& cfg = model.config();
  if (ds.spec.obs_dim != cfg.obs_dim || ds.spec.act_dim != cfg.act_dim)
    throw DimensionError("train_autoencoder: dataset dims disagree with model");

  auto [hold_lo, hold_hi] = holdout_range(ds.trajectories.size(), cfg.holdout_frac);
  std::size_t train_hi = hold_lo > 0 ? hold_lo : ds.trajectories.size();
  detail::TransitionIndex ix = detail::index_transitions(ds, 0, train_hi);

  AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = cfg.weight_decay;
  oc.clip_norm = cfg.clip_norm;
  oc.warmup_steps = cfg.warmup_steps;
  auto with_prefix = [&](std::initializer_list<const char*> prefixes) {
    std::vector<std::string> names;
    for (const char* p : prefixes)
      for (const char* s : {".w0", ".b0", ".w1", ".b1", ".w2", ".b2"})
        names.push_back(std::string(p) + s);
    return names;
  };
  AdamW opt_rtg(oc, with_prefix({"dec_rtg"}));
  AdamW opt_obs(oc, with_prefix({"dec_obs"}));
  AdamW opt_act(oc, with_prefix({"dec_act"}));
  std::vector<std::string> trunk = with_prefix({"enc_rtg", "enc_obs", "enc_act"});
  trunk.push_back("bottleneck.w");
  trunk.push_back("bottleneck.b");
  AdamW opt_trunk(oc, std::move(trunk));

  Rng sampler(seed, streams::kSampler);
  AeTrainResult res;
  std::int64_t log_every = cfg.steps > 100 ? cfg.steps / 100 : 1;

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> rows(static_cast<std::size_t>(cfg.batch));
    for (std::size_t& r : rows)
      r = static_cast<std::size_t>(sampler.uniform_index(ix.items.size()));
    detail::ComponentBatch cb = detail::gather_components(ds, ix, rows);

    Tape tape;
    ParamStore& ps = model.mutable_params();
    NodeId er = detail::mlp_tape(tape, ps, "enc_rtg", tape.leaf(cb.rtg));
    NodeId eo = detail::mlp_tape(tape, ps, "enc_obs", tape.leaf(cb.obs));
    NodeId ea = detail::mlp_tape(tape, ps, "enc_act", tape.leaf(cb.act));
    NodeId cat = tape.concat_cols(tape.concat_cols(er, eo), ea);
    NodeId z = linear(tape, cat, tape.param(ps, "bottleneck.w"),
                      tape.param(ps, "bottleneck.b"));
    NodeId l_rtg = tape.mse(detail::mlp_tape(tape, ps, "dec_rtg", z), cb.rtg);
    NodeId l_obs = tape.mse(detail::mlp_tape(tape, ps, "dec_obs", z), cb.obs);
    NodeId l_act = tape.mse(detail::mlp_tape(tape, ps, "dec_act", z), cb.act);
    NodeId total = tape.add(tape.add(l_rtg, l_obs), l_act);

    double lr_v = tape.val(l_rtg).data[0], lo_v = tape.val(l_obs).data[0],
           la_v = tape.val(l_act).data[0];
    if (!std::isfinite(lr_v + lo_v + la_v))
      throw NumericError("autoencoder loss diverged at step " +
                         std::to_string(step));

    ps.zero_grads();
    tape.backward(total);
    tape.accumulate_param_grads(ps);
    opt_rtg.step(ps);
    opt_obs.step(ps);
    opt_act.step(ps);
    opt_trunk.step(ps);

    if (step % log_every == 0 || step + 1 == cfg.steps)
      res.curve.push_back({step, lr_v, lo_v, la_v});
  }

  model.freeze();
  res.holdout = reconstruction_report(model, ds, hold_lo, hold_hi);
  return res;
}

}  // namespace reframe
