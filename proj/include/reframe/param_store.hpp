// Named parameter tensors with matching gradient accumulators.
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "reframe/common.hpp"
#include "reframe/rng.hpp"
#include "reframe/tensor.hpp"

namespace reframe {

// Insertion order is preserved; every iteration over parameters is
// deterministic because of it.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor init) {
    if (index_.count(name))
      throw ArgumentError("duplicate parameter name: " + name);
    index_[name] = names_.size();
    names_.push_back(name);
    grads_.push_back(Tensor::zeros(init.shape));
    values_.push_back(std::move(init));
    return values_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }

  Tensor& value(const std::string& name) { return values_[find(name)]; }
  const Tensor& value(const std::string& name) const { return values_[find(name)]; }
  Tensor& grad(const std::string& name) { return grads_[find(name)]; }
  const Tensor& grad(const std::string& name) const { return grads_[find(name)]; }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return names_.size(); }

  void zero_grads() {
    for (Tensor& g : grads_) g.fill(0.0);
  }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const Tensor& v : values_) n += v.numel();
    return n;
  }

  // Fingerprint of all parameter values, order-sensitive. Used to verify that
  // frozen models never drift.
  std::uint64_t content_hash() const {
    std::uint64_t h = 14695981039346656037ull;
    for (std::size_t i = 0; i < names_.size(); ++i) {
      h = fnv1a64(names_[i].data(), names_[i].size(), h);
      h = fnv1a64(values_[i].data.data(), values_[i].data.size() * sizeof(double), h);
    }
    return h;
  }

 private:
  std::size_t find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ArgumentError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
};

// ------------------------------------------------------------ initializers

// Affine weights: uniform(+-1/sqrt(fan_in)); biases zero;
// embedding tables: normal(0, 0.02).
inline Tensor init_affine_weight(std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
  Tensor w({fan_in, fan_out});
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : w.data) x = rng.uniform(-bound, bound);
  return w;
}

inline Tensor init_embedding(std::int64_t rows, std::int64_t dim, Rng& rng) {
  Tensor e({rows, dim});
  for (double& x : e.data) x = rng.normal(0.0, 0.02);
  return e;
}

}  // namespace reframe
