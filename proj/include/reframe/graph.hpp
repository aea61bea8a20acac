// Reverse-mode autodiff over a dynamic tape.
//
// Each training step records a fresh tape. Ops are tensor-granular; every
// reduction runs in a fixed sequential order, so results are bit-reproducible
// for a given seed and op sequence.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "reframe/common.hpp"
#include "reframe/param_store.hpp"
#include "reframe/rng.hpp"
#include "reframe/tensor.hpp"

namespace reframe {

// ------------------------------------------------------------ raw kernels

namespace kernels {

// C[m x n] (+)= A[m x k] * B[k x n]
inline void matmul(const double* A, const double* B, double* C, std::int64_t m,
                   std::int64_t k, std::int64_t n, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    if (!accumulate)
      for (std::int64_t j = 0; j < n; ++j) c[j] = 0.0;
    const double* a = A + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      double av = a[kk];
      const double* b = B + kk * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m x k] (+)= A[m x n] * B^T where B is [k x n]
inline void matmul_nt(const double* A, const double* B, double* C, std::int64_t m,
                      std::int64_t n, std::int64_t k, bool accumulate) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* a = A + i * n;
    double* c = C + i * k;
    for (std::int64_t j = 0; j < k; ++j) {
      const double* b = B + j * n;
      double s = 0.0;
      for (std::int64_t l = 0; l < n; ++l) s += a[l] * b[l];
      if (accumulate)
        c[j] += s;
      else
        c[j] = s;
    }
  }
}

// C[k x n] += A^T * B where A is [m x k], B is [m x n]
inline void matmul_tn_acc(const double* A, const double* B, double* C,
                          std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    const double* b = B + i * n;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      double av = a[kk];
      double* c = C + kk * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace kernels

// ------------------------------------------------------------------- tape

using NodeId = std::int32_t;

class Tape {
 public:
  static constexpr double kLayerNormEps = 1e-5;

  // ---- leaves

  NodeId leaf(Tensor value, bool requires_grad = false) {
    return push(std::move(value), requires_grad, {});
  }

  // Leaf bound to a store parameter; value is copied in, gradients are copied
  // back by accumulate_param_grads().
  NodeId param(ParamStore& store, const std::string& name) {
    NodeId id = push(store.value(name), true, {});
    nodes_[id].param_name = name;
    return id;
  }

  const Tensor& val(NodeId id) const { return nodes_[id].value; }
  Tensor& grad(NodeId id) { return nodes_[id].grad; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // ---- ops

  // [m x k] * [k x n] -> [m x n]
  NodeId matmul(NodeId a, NodeId b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
      throw DimensionError("matmul: incompatible shapes " + A.shape_str() +
                           " and " + B.shape_str());
    std::int64_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor out({m, n});
    kernels::matmul(A.data.data(), B.data.data(), out.data.data(), m, k, n, false);
    NodeId id = push(std::move(out), requires_grad(a) || requires_grad(b), {a, b});
    nodes_[id].backward = [a, b, m, k, n](Tape& t, const Node& self) {
      if (t.requires_grad(a))
        kernels::matmul_nt(self.grad.data.data(), t.val(b).data.data(),
                           t.grad(a).data.data(), m, n, k, true);
      if (t.requires_grad(b))
        kernels::matmul_tn_acc(t.val(a).data.data(), self.grad.data.data(),
                               t.grad(b).data.data(), m, k, n);
    };
    return id;
  }

  // x [m x n] + b [n] broadcast over rows
  NodeId add_row_bias(NodeId x, NodeId b) {
    const Tensor& X = val(x);
    const Tensor& B = val(b);
    if (X.rank() != 2 || B.numel() != X.shape[1])
      throw DimensionError("add_row_bias: " + X.shape_str() + " vs bias " +
                           B.shape_str());
    Tensor out = X;
    std::int64_t m = X.shape[0], n = X.shape[1];
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) out.data[i * n + j] += B.data[j];
    NodeId id = push(std::move(out), requires_grad(x) || requires_grad(b), {x, b});
    nodes_[id].backward = [x, b, m, n](Tape& t, const Node& self) {
      if (t.requires_grad(x)) {
        Tensor& gx = t.grad(x);
        for (std::int64_t i = 0; i < m * n; ++i) gx.data[i] += self.grad.data[i];
      }
      if (t.requires_grad(b)) {
        Tensor& gb = t.grad(b);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j)
            gb.data[j] += self.grad.data[i * n + j];
      }
    };
    return id;
  }

  NodeId add(NodeId a, NodeId b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_same_shape(A, B, "add");
    Tensor out = A;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
    NodeId id = push(std::move(out), requires_grad(a) || requires_grad(b), {a, b});
    nodes_[id].backward = [a, b](Tape& t, const Node& self) {
      for (NodeId p : {a, b}) {
        if (!t.requires_grad(p)) continue;
        Tensor& g = t.grad(p);
        for (std::size_t i = 0; i < g.data.size(); ++i)
          g.data[i] += self.grad.data[i];
      }
    };
    return id;
  }

  NodeId scale(NodeId a, double s) {
    Tensor out = val(a);
    for (double& v : out.data) v *= s;
    NodeId id = push(std::move(out), requires_grad(a), {a});
    nodes_[id].backward = [a, s](Tape& t, const Node& self) {
      if (!t.requires_grad(a)) return;
      Tensor& g = t.grad(a);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        g.data[i] += s * self.grad.data[i];
    };
    return id;
  }

  NodeId relu(NodeId a) {
    Tensor out = val(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    NodeId id = push(std::move(out), requires_grad(a), {a});
    nodes_[id].backward = [a](Tape& t, const Node& self) {
      if (!t.requires_grad(a)) return;
      Tensor& g = t.grad(a);
      const Tensor& in = t.val(a);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        if (in.data[i] > 0.0) g.data[i] += self.grad.data[i];
    };
    return id;
  }

  // tanh-approximation GELU, as used in GPT-style blocks
  NodeId gelu(NodeId a) {
    static constexpr double kC = 0.7978845608028653559;  // sqrt(2/pi)
    Tensor out = val(a);
    for (double& v : out.data) {
      double u = kC * (v + 0.044715 * v * v * v);
      v = 0.5 * v * (1.0 + std::tanh(u));
    }
    NodeId id = push(std::move(out), requires_grad(a), {a});
    nodes_[id].backward = [a](Tape& t, const Node& self) {
      if (!t.requires_grad(a)) return;
      Tensor& g = t.grad(a);
      const Tensor& in = t.val(a);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        double x = in.data[i];
        double u = kC * (x + 0.044715 * x * x * x);
        double th = std::tanh(u);
        double du = kC * (1.0 + 3.0 * 0.044715 * x * x);
        double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        g.data[i] += d * self.grad.data[i];
      }
    };
    return id;
  }

  NodeId tanh_op(NodeId a) {
    Tensor out = val(a);
    for (double& v : out.data) v = std::tanh(v);
    NodeId id = push(std::move(out), requires_grad(a), {a});
    nodes_[id].backward = [a](Tape& t, const Node& self) {
      if (!t.requires_grad(a)) return;
      Tensor& g = t.grad(a);
      const Tensor& y = self.value;
      for (std::size_t i = 0; i < g.data.size(); ++i)
        g.data[i] += (1.0 - y.data[i] * y.data[i]) * self.grad.data[i];
    };
    return id;
  }

  // Per-row layer norm with affine parameters gamma, beta (each [n]).
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta) {
    const Tensor& X = val(x);
    if (X.rank() != 2) throw DimensionError("layer_norm expects 2-D input");
    std::int64_t m = X.shape[0], n = X.shape[1];
    if (val(gamma).numel() != n || val(beta).numel() != n)
      throw DimensionError("layer_norm: affine params must match feature dim");
    Tensor out({m, n});
    auto rstd = std::make_shared<std::vector<double>>(m);
    auto xhat = std::make_shared<std::vector<double>>(m * n);
    const double* g = val(gamma).data.data();
    const double* be = val(beta).data.data();
    for (std::int64_t i = 0; i < m; ++i) {
      const double* xr = X.data.data() + i * n;
      double mean = 0.0;
      for (std::int64_t j = 0; j < n; ++j) mean += xr[j];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        double d = xr[j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      double rs = 1.0 / std::sqrt(var + kLayerNormEps);
      (*rstd)[i] = rs;
      for (std::int64_t j = 0; j < n; ++j) {
        double xh = (xr[j] - mean) * rs;
        (*xhat)[i * n + j] = xh;
        out.data[i * n + j] = g[j] * xh + be[j];
      }
    }
    NodeId id = push(std::move(out),
                     requires_grad(x) || requires_grad(gamma) || requires_grad(beta),
                     {x, gamma, beta});
    nodes_[id].backward = [x, gamma, beta, m, n, rstd, xhat](Tape& t,
                                                             const Node& self) {
      const double* g = t.val(gamma).data.data();
      for (std::int64_t i = 0; i < m; ++i) {
        const double* dy = self.grad.data.data() + i * n;
        const double* xh = xhat->data() + i * n;
        if (t.requires_grad(gamma)) {
          Tensor& gg = t.grad(gamma);
          for (std::int64_t j = 0; j < n; ++j) gg.data[j] += dy[j] * xh[j];
        }
        if (t.requires_grad(beta)) {
          Tensor& gb = t.grad(beta);
          for (std::int64_t j = 0; j < n; ++j) gb.data[j] += dy[j];
        }
        if (t.requires_grad(x)) {
          double sum1 = 0.0, sum2 = 0.0;
          for (std::int64_t j = 0; j < n; ++j) {
            double gd = g[j] * dy[j];
            sum1 += gd;
            sum2 += gd * xh[j];
          }
          sum1 /= static_cast<double>(n);
          sum2 /= static_cast<double>(n);
          Tensor& gx = t.grad(x);
          double rs = (*rstd)[i];
          for (std::int64_t j = 0; j < n; ++j) {
            double gd = g[j] * dy[j];
            gx.data[i * n + j] += (gd - sum1 - xh[j] * sum2) * rs;
          }
        }
      }
    };
    return id;
  }

  // Inverted dropout. No-op (identity node) when training is off or p == 0,
  // consuming no RNG draws.
  NodeId dropout(NodeId x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    const Tensor& X = val(x);
    auto mask = std::make_shared<std::vector<double>>(X.data.size());
    double keep = 1.0 - p;
    Tensor out = X;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      double m = rng.uniform() < p ? 0.0 : 1.0 / keep;
      (*mask)[i] = m;
      out.data[i] *= m;
    }
    NodeId id = push(std::move(out), requires_grad(x), {x});
    nodes_[id].backward = [x, mask](Tape& t, const Node& self) {
      if (!t.requires_grad(x)) return;
      Tensor& g = t.grad(x);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        g.data[i] += (*mask)[i] * self.grad.data[i];
    };
    return id;
  }

  // [m x p] , [m x q] -> [m x (p+q)]
  NodeId concat_cols(NodeId a, NodeId b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape[0] != B.shape[0])
      throw DimensionError("concat_cols: row counts differ");
    std::int64_t m = A.shape[0], p = A.shape[1], q = B.shape[1];
    Tensor out({m, p + q});
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < p; ++j) out.at(i, j) = A.at(i, j);
      for (std::int64_t j = 0; j < q; ++j) out.at(i, p + j) = B.at(i, j);
    }
    NodeId id = push(std::move(out), requires_grad(a) || requires_grad(b), {a, b});
    nodes_[id].backward = [a, b, m, p, q](Tape& t, const Node& self) {
      if (t.requires_grad(a)) {
        Tensor& g = t.grad(a);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < p; ++j)
            g.at(i, j) += self.grad.at(i, j);
      }
      if (t.requires_grad(b)) {
        Tensor& g = t.grad(b);
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < q; ++j)
            g.at(i, j) += self.grad.at(i, p + j);
      }
    };
    return id;
  }

  // Three [B*K x d] tensors -> [B*3K x d], rows ordered (a, b, c) per step.
  NodeId interleave3(NodeId a, NodeId b, NodeId c, std::int64_t batch,
                     std::int64_t steps) {
    const Tensor& A = val(a);
    std::int64_t d = A.shape[1];
    for (NodeId src : {a, b, c})
      if (val(src).shape[0] != batch * steps || val(src).shape[1] != d)
        throw DimensionError("interleave3: inputs must all be [B*K x d]");
    Tensor out({batch * steps * 3, d});
    const NodeId srcs[3] = {a, b, c};
    for (std::int64_t bi = 0; bi < batch; ++bi)
      for (std::int64_t k = 0; k < steps; ++k)
        for (int s = 0; s < 3; ++s) {
          const double* in = val(srcs[s]).data.data() + (bi * steps + k) * d;
          double* o = out.data.data() + ((bi * steps + k) * 3 + s) * d;
          for (std::int64_t j = 0; j < d; ++j) o[j] = in[j];
        }
    bool rg = requires_grad(a) || requires_grad(b) || requires_grad(c);
    NodeId id = push(std::move(out), rg, {a, b, c});
    nodes_[id].backward = [a, b, c, batch, steps, d](Tape& t, const Node& self) {
      const NodeId srcs[3] = {a, b, c};
      for (int s = 0; s < 3; ++s) {
        if (!t.requires_grad(srcs[s])) continue;
        Tensor& g = t.grad(srcs[s]);
        for (std::int64_t bi = 0; bi < batch; ++bi)
          for (std::int64_t k = 0; k < steps; ++k) {
            const double* dy =
                self.grad.data.data() + ((bi * steps + k) * 3 + s) * d;
            double* gp = g.data.data() + (bi * steps + k) * d;
            for (std::int64_t j = 0; j < d; ++j) gp[j] += dy[j];
          }
      }
    };
    return id;
  }

  // Inverse selection: rows at token offset `offset` (0..2) from [B*3K x d].
  NodeId pick_token(NodeId x, std::int64_t batch, std::int64_t steps, int offset) {
    const Tensor& X = val(x);
    std::int64_t d = X.shape[1];
    if (X.shape[0] != batch * steps * 3)
      throw DimensionError("pick_token: input rows must equal B*3K");
    Tensor out({batch * steps, d});
    for (std::int64_t bi = 0; bi < batch; ++bi)
      for (std::int64_t k = 0; k < steps; ++k) {
        const double* in =
            X.data.data() + ((bi * steps + k) * 3 + offset) * d;
        double* o = out.data.data() + (bi * steps + k) * d;
        for (std::int64_t j = 0; j < d; ++j) o[j] = in[j];
      }
    NodeId id = push(std::move(out), requires_grad(x), {x});
    nodes_[id].backward = [x, batch, steps, offset, d](Tape& t, const Node& self) {
      if (!t.requires_grad(x)) return;
      Tensor& g = t.grad(x);
      for (std::int64_t bi = 0; bi < batch; ++bi)
        for (std::int64_t k = 0; k < steps; ++k) {
          const double* dy = self.grad.data.data() + (bi * steps + k) * d;
          double* gp = g.data.data() + ((bi * steps + k) * 3 + offset) * d;
          for (std::int64_t j = 0; j < d; ++j) gp[j] += dy[j];
        }
    };
    return id;
  }

  // Row lookup into an embedding table. ids may repeat.
  NodeId embedding_rows(NodeId table, std::vector<std::int64_t> ids) {
    const Tensor& T = val(table);
    if (T.rank() != 2) throw DimensionError("embedding_rows expects 2-D table");
    std::int64_t v = T.shape[0], d = T.shape[1];
    std::int64_t m = static_cast<std::int64_t>(ids.size());
    Tensor out({m, d});
    for (std::int64_t i = 0; i < m; ++i) {
      if (ids[static_cast<std::size_t>(i)] < 0 || ids[static_cast<std::size_t>(i)] >= v)
        throw DimensionError("embedding id out of range");
      const double* row = T.data.data() + ids[static_cast<std::size_t>(i)] * d;
      double* o = out.data.data() + i * d;
      for (std::int64_t j = 0; j < d; ++j) o[j] = row[j];
    }
    auto ids_ptr = std::make_shared<std::vector<std::int64_t>>(std::move(ids));
    NodeId id = push(std::move(out), requires_grad(table), {table});
    nodes_[id].backward = [table, ids_ptr, d](Tape& t, const Node& self) {
      if (!t.requires_grad(table)) return;
      Tensor& g = t.grad(table);
      for (std::size_t i = 0; i < ids_ptr->size(); ++i) {
        double* gp = g.data.data() + (*ids_ptr)[i] * d;
        const double* dy = self.grad.data.data() + static_cast<std::int64_t>(i) * d;
        for (std::int64_t j = 0; j < d; ++j) gp[j] += dy[j];
      }
    };
    return id;
  }

  // Causal multi-head self-attention over already-projected q, k, v.
  // Rows are (batch, position) in row-major order; key_valid marks real
  // (non-padded) positions. A position can always attend to itself, so padded
  // query rows stay finite without affecting valid ones.
  NodeId attention_core(NodeId q, NodeId k, NodeId v, std::int64_t batch,
                        std::int64_t seq, int heads,
                        const std::vector<std::uint8_t>& key_valid,
                        double attn_dropout, Rng& rng, bool training) {
    const Tensor& Q = val(q);
    std::int64_t dmodel = Q.shape[1];
    if (dmodel % heads != 0)
      throw ConfigError("attention: model width " + std::to_string(dmodel) +
                        " not divisible by " + std::to_string(heads) + " heads");
    if (Q.shape[0] != batch * seq || !val(k).same_shape(Q) || !val(v).same_shape(Q))
      throw DimensionError("attention: q/k/v must be [B*T x D]");
    if (key_valid.size() != static_cast<std::size_t>(batch * seq))
      throw DimensionError("attention: key_valid size mismatch");
    std::int64_t dh = dmodel / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    // Effective attention weights (post-softmax, post-dropout) are kept for
    // the backward pass, along with the raw softmax probabilities.
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(batch * heads * seq * seq), 0.0);
    auto keep = std::make_shared<std::vector<double>>();
    bool use_dropout = training && attn_dropout > 0.0;
    if (use_dropout)
      keep->assign(static_cast<std::size_t>(batch * heads * seq * seq), 1.0);
    double keep_scale = use_dropout ? 1.0 / (1.0 - attn_dropout) : 1.0;

    Tensor out({batch * seq, dmodel});
    std::vector<double> scores(static_cast<std::size_t>(seq));
    for (std::int64_t b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        for (std::int64_t t = 0; t < seq; ++t) {
          const double* qv = Q.data.data() + (b * seq + t) * dmodel + h * dh;
          double maxs = -1e300;
          for (std::int64_t s = 0; s <= t; ++s) {
            if (!key_valid[static_cast<std::size_t>(b * seq + s)] && s != t) continue;
            const double* kv = val(k).data.data() + (b * seq + s) * dmodel + h * dh;
            double dot = 0.0;
            for (std::int64_t j = 0; j < dh; ++j) dot += qv[j] * kv[j];
            scores[static_cast<std::size_t>(s)] = dot * scale;
            if (scores[static_cast<std::size_t>(s)] > maxs)
              maxs = scores[static_cast<std::size_t>(s)];
          }
          double denom = 0.0;
          for (std::int64_t s = 0; s <= t; ++s) {
            if (!key_valid[static_cast<std::size_t>(b * seq + s)] && s != t) continue;
            double e = std::exp(scores[static_cast<std::size_t>(s)] - maxs);
            scores[static_cast<std::size_t>(s)] = e;
            denom += e;
          }
          double* pr = probs->data() + ((b * heads + h) * seq + t) * seq;
          double* kp = use_dropout
                           ? keep->data() + ((b * heads + h) * seq + t) * seq
                           : nullptr;
          double* ov = out.data.data() + (b * seq + t) * dmodel + h * dh;
          for (std::int64_t j = 0; j < dh; ++j) ov[j] = 0.0;
          for (std::int64_t s = 0; s <= t; ++s) {
            if (!key_valid[static_cast<std::size_t>(b * seq + s)] && s != t) continue;
            double p = scores[static_cast<std::size_t>(s)] / denom;
            pr[s] = p;
            double w = p;
            if (use_dropout) {
              double m = rng.uniform() < attn_dropout ? 0.0 : keep_scale;
              kp[s] = m;
              w *= m;
            }
            const double* vv = val(v).data.data() + (b * seq + s) * dmodel + h * dh;
            for (std::int64_t j = 0; j < dh; ++j) ov[j] += w * vv[j];
          }
        }
      }
    }

    bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
    auto kv_copy = std::make_shared<std::vector<std::uint8_t>>(key_valid);
    NodeId id = push(std::move(out), rg, {q, k, v});
    nodes_[id].backward = [q, k, v, batch, seq, heads, dh, dmodel, scale, probs,
                           keep, kv_copy, keep_scale,
                           use_dropout](Tape& t, const Node& self) {
      std::vector<double> dp(static_cast<std::size_t>(seq));
      std::vector<double> dscore(static_cast<std::size_t>(seq));
      Tensor& gq = t.grad(q);
      Tensor& gk = t.grad(k);
      Tensor& gv = t.grad(v);
      const Tensor& Q = t.val(q);
      const Tensor& K = t.val(k);
      const Tensor& V = t.val(v);
      for (std::int64_t b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
          for (std::int64_t tt = 0; tt < seq; ++tt) {
            const double* dy = self.grad.data.data() + (b * seq + tt) * dmodel + h * dh;
            const double* pr = probs->data() + ((b * heads + h) * seq + tt) * seq;
            const double* kp =
                use_dropout ? keep->data() + ((b * heads + h) * seq + tt) * seq
                            : nullptr;
            // dV and d(prob)
            double dot_dp_p = 0.0;
            for (std::int64_t s = 0; s <= tt; ++s) {
              if (!(*kv_copy)[static_cast<std::size_t>(b * seq + s)] && s != tt) {
                dp[static_cast<std::size_t>(s)] = 0.0;
                continue;
              }
              const double* vv = V.data.data() + (b * seq + s) * dmodel + h * dh;
              double dw = 0.0;
              for (std::int64_t j = 0; j < dh; ++j) dw += dy[j] * vv[j];
              double eff = use_dropout ? kp[s] : 1.0;
              // grad wrt softmax prob
              dp[static_cast<std::size_t>(s)] = dw * eff;
              double w = pr[s] * eff;
              double* gvp = gv.data.data() + (b * seq + s) * dmodel + h * dh;
              for (std::int64_t j = 0; j < dh; ++j) gvp[j] += w * dy[j];
              dot_dp_p += dp[static_cast<std::size_t>(s)] * pr[s];
            }
            // softmax backward, then into q and k
            const double* qv = Q.data.data() + (b * seq + tt) * dmodel + h * dh;
            double* gqp = gq.data.data() + (b * seq + tt) * dmodel + h * dh;
            for (std::int64_t s = 0; s <= tt; ++s) {
              if (!(*kv_copy)[static_cast<std::size_t>(b * seq + s)] && s != tt)
                continue;
              double ds = pr[s] * (dp[static_cast<std::size_t>(s)] - dot_dp_p) * scale;
              const double* kv = K.data.data() + (b * seq + s) * dmodel + h * dh;
              double* gkp = gk.data.data() + (b * seq + s) * dmodel + h * dh;
              for (std::int64_t j = 0; j < dh; ++j) {
                gqp[j] += ds * kv[j];
                gkp[j] += ds * qv[j];
              }
            }
          }
        }
      }
    };
    return id;
  }

  // Mean squared error over elements of rows where mask is set. target is a
  // plain tensor (never differentiated). Empty mask yields loss 0.
  NodeId mse_masked(NodeId pred, Tensor target, std::vector<std::uint8_t> mask) {
    const Tensor& P = val(pred);
    require_same_shape(P, target, "mse");
    if (P.rank() != 2 || mask.size() != static_cast<std::size_t>(P.shape[0]))
      throw DimensionError("mse_masked: mask must have one entry per row");
    std::int64_t m = P.shape[0], n = P.shape[1];
    std::int64_t valid = 0;
    for (std::uint8_t u : mask) valid += u ? 1 : 0;
    double denom = static_cast<double>(valid * n);
    double loss = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      for (std::int64_t j = 0; j < n; ++j) {
        double d = P.at(i, j) - target.at(i, j);
        loss += d * d;
      }
    }
    if (valid > 0) loss /= denom;
    auto tgt = std::make_shared<Tensor>(std::move(target));
    auto msk = std::make_shared<std::vector<std::uint8_t>>(std::move(mask));
    NodeId id = push(Tensor::scalar(loss), requires_grad(pred), {pred});
    nodes_[id].backward = [pred, tgt, msk, m, n, denom](Tape& t, const Node& self) {
      if (!t.requires_grad(pred) || denom == 0.0) return;
      double up = self.grad.data[0] * 2.0 / denom;
      Tensor& g = t.grad(pred);
      const Tensor& P = t.val(pred);
      for (std::int64_t i = 0; i < m; ++i) {
        if (!(*msk)[static_cast<std::size_t>(i)]) continue;
        for (std::int64_t j = 0; j < n; ++j)
          g.at(i, j) += up * (P.at(i, j) - tgt->at(i, j));
      }
    };
    return id;
  }

  NodeId mse(NodeId pred, Tensor target) {
    if (val(pred).rank() != 2) {
      std::int64_t n = val(pred).numel();
      pred = reshape(pred, {n, 1});
      target = Tensor({n, 1}, std::move(target.data));
    }
    std::int64_t rows = val(pred).shape[0];
    return mse_masked(pred, std::move(target),
                      std::vector<std::uint8_t>(static_cast<std::size_t>(rows), 1));
  }

  // Mean over masked rows of the squared L2 distance to a constant target row.
  NodeId row_sqdist_masked(NodeId x, Tensor target, std::vector<std::uint8_t> mask) {
    const Tensor& X = val(x);
    require_same_shape(X, target, "row_sqdist");
    std::int64_t m = X.shape[0], n = X.shape[1];
    if (mask.size() != static_cast<std::size_t>(m))
      throw DimensionError("row_sqdist_masked: mask size mismatch");
    std::int64_t valid = 0;
    for (std::uint8_t u : mask) valid += u ? 1 : 0;
    double loss = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
      if (!mask[static_cast<std::size_t>(i)]) continue;
      for (std::int64_t j = 0; j < n; ++j) {
        double d = X.at(i, j) - target.at(i, j);
        loss += d * d;
      }
    }
    if (valid > 0) loss /= static_cast<double>(valid);
    auto tgt = std::make_shared<Tensor>(std::move(target));
    auto msk = std::make_shared<std::vector<std::uint8_t>>(std::move(mask));
    double denom = static_cast<double>(valid);
    NodeId id = push(Tensor::scalar(loss), requires_grad(x), {x});
    nodes_[id].backward = [x, tgt, msk, m, n, denom](Tape& t, const Node& self) {
      if (!t.requires_grad(x) || denom == 0.0) return;
      double up = self.grad.data[0] * 2.0 / denom;
      Tensor& g = t.grad(x);
      const Tensor& X = t.val(x);
      for (std::int64_t i = 0; i < m; ++i) {
        if (!(*msk)[static_cast<std::size_t>(i)]) continue;
        for (std::int64_t j = 0; j < n; ++j)
          g.at(i, j) += up * (X.at(i, j) - tgt->at(i, j));
      }
    };
    return id;
  }

  // alpha*a + beta*b for scalar nodes.
  NodeId axpy_scalar(NodeId a, NodeId b, double alpha, double beta) {
    if (val(a).numel() != 1 || val(b).numel() != 1)
      throw DimensionError("axpy_scalar expects scalar nodes");
    Tensor out = Tensor::scalar(alpha * val(a).data[0] + beta * val(b).data[0]);
    NodeId id = push(std::move(out), requires_grad(a) || requires_grad(b), {a, b});
    nodes_[id].backward = [a, b, alpha, beta](Tape& t, const Node& self) {
      if (t.requires_grad(a)) t.grad(a).data[0] += alpha * self.grad.data[0];
      if (t.requires_grad(b)) t.grad(b).data[0] += beta * self.grad.data[0];
    };
    return id;
  }

  NodeId reshape(NodeId x, std::vector<std::int64_t> shape) {
    Tensor out(std::move(shape), val(x).data);
    NodeId id = push(std::move(out), requires_grad(x), {x});
    nodes_[id].backward = [x](Tape& t, const Node& self) {
      if (!t.requires_grad(x)) return;
      Tensor& g = t.grad(x);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        g.data[i] += self.grad.data[i];
    };
    return id;
  }

  // ---- backward

  void backward(NodeId root) {
    if (nodes_.empty()) throw StateError("backward called on empty tape");
    if (val(root).numel() != 1)
      throw ArgumentError("backward root must be scalar");
    if (!nodes_[root].requires_grad)
      throw StateError("backward root does not depend on any parameter");
    for (Node& n : nodes_) n.grad = Tensor::zeros(n.value.shape);
    nodes_[root].grad.data[0] = 1.0;
    for (NodeId id = root; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.requires_grad && n.backward) n.backward(*this, n);
    }
    ran_backward_ = true;
  }

  // Adds the gradients of parameter-bound leaves into the store.
  void accumulate_param_grads(ParamStore& store) {
    if (!ran_backward_)
      throw StateError("accumulate_param_grads before backward");
    for (Node& n : nodes_) {
      if (n.param_name.empty()) continue;
      Tensor& g = store.grad(n.param_name);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        g.data[i] += n.grad.data[i];
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::string param_name;
    std::function<void(Tape&, const Node&)> backward;
  };

  NodeId push(Tensor value, bool requires_grad, std::vector<NodeId> parents) {
    (void)parents;
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// Affine map y = x*W + b as one call; the building block for every MLP.
inline NodeId linear(Tape& t, NodeId x, NodeId w, NodeId b) {
  return t.add_row_bias(t.matmul(x, w), b);
}

}  // namespace reframe
