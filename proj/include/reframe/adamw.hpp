// AdamW over a named slice of a ParamStore.
//
// Several optimizers may own disjoint partitions of one store (the
// autoencoder trains this way); each keeps its own moments and step count.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "reframe/common.hpp"
#include "reframe/param_store.hpp"
#include "reframe/tensor.hpp"

namespace reframe {

struct AdamWConfig {
  double lr = 6e-5;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;   // global L2 norm over this partition
  std::int64_t warmup_steps = 100;
};

class AdamW {
 public:
  AdamW(AdamWConfig cfg, std::vector<std::string> params)
      : cfg_(cfg), params_(std::move(params)) {
    if (cfg_.lr <= 0.0) throw ConfigError("adamw: lr must be > 0");
    if (cfg_.beta1 <= 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 <= 0.0 ||
        cfg_.beta2 >= 1.0)
      throw ConfigError("adamw: betas must lie in (0, 1)");
    if (cfg_.weight_decay < 0.0) throw ConfigError("adamw: weight decay must be >= 0");
    if (cfg_.clip_norm <= 0.0) throw ConfigError("adamw: clip norm must be > 0");
    if (cfg_.warmup_steps < 0) throw ConfigError("adamw: warmup must be >= 0");
  }

  const std::vector<std::string>& params() const { return params_; }
  std::int64_t step_count() const { return step_; }

  // Linear warmup from 0, flat afterwards (no decay schedule).
  double effective_lr(std::int64_t step) const {
    if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
      return cfg_.lr * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
    return cfg_.lr;
  }

  // Consumes the store's current gradients for this partition. Gradients are
  // validated finite, clipped by global norm, then applied with decoupled
  // weight decay. Does not zero the gradients.
  void step(ParamStore& store) {
    if (moments_m_.empty()) {
      for (const std::string& name : params_) {
        moments_m_.push_back(Tensor::zeros(store.value(name).shape));
        moments_v_.push_back(Tensor::zeros(store.value(name).shape));
      }
    }
    double sq = 0.0;
    for (const std::string& name : params_) {
      const Tensor& g = store.grad(name);
      for (double v : g.data) {
        if (!std::isfinite(v))
          throw NumericError("nonfinite gradient in parameter '" + name + "'");
        sq += v * v;
      }
    }
    double norm = std::sqrt(sq);
    double clip_scale = norm > cfg_.clip_norm ? cfg_.clip_norm / norm : 1.0;

    ++step_;
    double lr = effective_lr(step_);
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));

    for (std::size_t p = 0; p < params_.size(); ++p) {
      Tensor& theta = store.value(params_[p]);
      const Tensor& g = store.grad(params_[p]);
      Tensor& m = moments_m_[p];
      Tensor& v = moments_v_[p];
      for (std::size_t i = 0; i < theta.data.size(); ++i) {
        double gi = g.data[i] * clip_scale;
        m.data[i] = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * gi;
        v.data[i] = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * gi * gi;
        double mhat = m.data[i] / bc1;
        double vhat = v.data[i] / bc2;
        theta.data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                               cfg_.weight_decay * theta.data[i]);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  std::vector<std::string> params_;
  std::vector<Tensor> moments_m_;
  std::vector<Tensor> moments_v_;
  std::int64_t step_ = 0;
};

}  // namespace reframe
