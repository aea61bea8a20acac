#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "reframe/graph.hpp"
#include "reframe/param_store.hpp"
#include "reframe/rng.hpp"
#include "reframe/tensor.hpp"
#include "support.hpp"

using namespace reframe;
using test_support::fd_check;
using test_support::rel_err;

namespace {

Tensor randn(Rng& rng, std::vector<std::int64_t> shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.normal() * scale;
  return t;
}

// keeps relu inputs away from the kink so finite differences stay valid
Tensor randn_away_from_zero(Rng& rng, std::vector<std::int64_t> shape) {
  Tensor t = randn(rng, std::move(shape));
  for (double& v : t.data)
    if (std::fabs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
  return t;
}

}  // namespace

TEST_CASE("closed-form gradient of scalar linear MSE") {
  // loss = (w*x - y)^2, dL/dw = 2*x*(w*x - y)
  ParamStore ps;
  ps.add("w", Tensor::scalar(1.5));
  double x = 3.0, y = 2.0;

  Tape t;
  NodeId w = t.param(ps, "w");
  NodeId pred = t.scale(w, x);
  NodeId loss = t.mse(pred, Tensor::scalar(y));
  t.backward(loss);
  t.accumulate_param_grads(ps);

  double want = 2.0 * x * (1.5 * x - y);
  REQUIRE(rel_err(ps.grad("w").data[0], want) < 1e-12);
}

TEST_CASE("zero upstream gradient yields zero parameter gradients") {
  ParamStore ps;
  Rng rng(1);
  ps.add("w", randn(rng, {4, 3}));
  Tape t;
  NodeId w = t.param(ps, "w");
  NodeId x = t.leaf(randn(rng, {2, 4}));
  NodeId loss = t.mse(t.matmul(x, w), randn(rng, {2, 3}));
  NodeId zeroed = t.scale(loss, 0.0);
  t.backward(zeroed);
  t.accumulate_param_grads(ps);
  for (double g : ps.grad("w").data) REQUIRE(g == 0.0);
}

TEST_CASE("finite differences: affine chain") {
  Rng rng(11);
  ParamStore ps;
  ps.add("w1", randn(rng, {5, 4}, 0.5));
  ps.add("b1", randn(rng, {4}, 0.1));
  ps.add("w2", randn(rng, {4, 3}, 0.5));
  ps.add("b2", randn(rng, {3}, 0.1));
  Tensor x = randn(rng, {6, 5});
  Tensor y = randn(rng, {6, 3});

  auto loss_fn = [&](ParamStore& s, bool with_grad) {
    Tape t;
    NodeId h = linear(t, t.leaf(x), t.param(s, "w1"), t.param(s, "b1"));
    NodeId out = linear(t, t.tanh_op(h), t.param(s, "w2"), t.param(s, "b2"));
    NodeId l = t.mse(out, y);
    if (with_grad) {
      t.backward(l);
      t.accumulate_param_grads(s);
    }
    return t.val(l).data[0];
  };
  auto rep = fd_check(ps, loss_fn);
  INFO("worst " << rep.worst_param << "[" << rep.worst_index << "] analytic "
                << rep.analytic << " numeric " << rep.numeric);
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("finite differences: activations") {
  Rng rng(12);
  ParamStore ps;
  ps.add("w", randn_away_from_zero(rng, {4, 6}));
  Tensor y = randn(rng, {4, 6});

  SECTION("relu") {
    auto loss_fn = [&](ParamStore& s, bool with_grad) {
      Tape t;
      NodeId l = t.mse(t.relu(t.param(s, "w")), y);
      if (with_grad) {
        t.backward(l);
        t.accumulate_param_grads(s);
      }
      return t.val(l).data[0];
    };
    REQUIRE(fd_check(ps, loss_fn).max_rel_err < 1e-4);
  }
  SECTION("gelu") {
    auto loss_fn = [&](ParamStore& s, bool with_grad) {
      Tape t;
      NodeId l = t.mse(t.gelu(t.param(s, "w")), y);
      if (with_grad) {
        t.backward(l);
        t.accumulate_param_grads(s);
      }
      return t.val(l).data[0];
    };
    REQUIRE(fd_check(ps, loss_fn).max_rel_err < 1e-4);
  }
  SECTION("tanh") {
    auto loss_fn = [&](ParamStore& s, bool with_grad) {
      Tape t;
      NodeId l = t.mse(t.tanh_op(t.param(s, "w")), y);
      if (with_grad) {
        t.backward(l);
        t.accumulate_param_grads(s);
      }
      return t.val(l).data[0];
    };
    REQUIRE(fd_check(ps, loss_fn).max_rel_err < 1e-4);
  }
}

TEST_CASE("finite differences: layer norm") {
  Rng rng(13);
  ParamStore ps;
  ps.add("x", randn(rng, {5, 7}));
  ps.add("gamma", randn(rng, {7}, 0.5));
  ps.add("beta", randn(rng, {7}, 0.5));
  Tensor y = randn(rng, {5, 7});
  auto loss_fn = [&](ParamStore& s, bool with_grad) {
    Tape t;
    NodeId l = t.mse(
        t.layer_norm(t.param(s, "x"), t.param(s, "gamma"), t.param(s, "beta")), y);
    if (with_grad) {
      t.backward(l);
      t.accumulate_param_grads(s);
    }
    return t.val(l).data[0];
  };
  REQUIRE(fd_check(ps, loss_fn).max_rel_err < 1e-4);
}

TEST_CASE("finite differences: attention with padded rows") {
  Rng rng(14);
  const std::int64_t B = 2, T = 5, D = 8;
  const int heads = 2;
  ParamStore ps;
  ps.add("wq", randn(rng, {D, D}, 0.4));
  ps.add("wk", randn(rng, {D, D}, 0.4));
  ps.add("wv", randn(rng, {D, D}, 0.4));
  Tensor x = randn(rng, {B * T, D});
  Tensor y = randn(rng, {B * T, D});
  // first batch row fully valid, second batch left-padded by 2
  std::vector<std::uint8_t> valid(B * T, 1);
  valid[T + 0] = 0;
  valid[T + 1] = 0;

  auto loss_fn = [&](ParamStore& s, bool with_grad) {
    Tape t;
    Rng drng(0);
    NodeId xs = t.leaf(x);
    NodeId att = t.attention_core(
        t.matmul(xs, t.param(s, "wq")), t.matmul(xs, t.param(s, "wk")),
        t.matmul(xs, t.param(s, "wv")), B, T, heads, valid, 0.0, drng, false);
    NodeId l = t.mse(att, y);
    if (with_grad) {
      t.backward(l);
      t.accumulate_param_grads(s);
    }
    return t.val(l).data[0];
  };
  auto rep = fd_check(ps, loss_fn);
  INFO("worst " << rep.worst_param << "[" << rep.worst_index << "] analytic "
                << rep.analytic << " numeric " << rep.numeric);
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("finite differences: embedding lookup with repeated ids") {
  Rng rng(15);
  ParamStore ps;
  ps.add("table", randn(rng, {6, 4}));
  std::vector<std::int64_t> ids = {0, 3, 3, 5, 0};
  Tensor y = randn(rng, {5, 4});
  auto loss_fn = [&](ParamStore& s, bool with_grad) {
    Tape t;
    NodeId l = t.mse(t.embedding_rows(t.param(s, "table"), ids), y);
    if (with_grad) {
      t.backward(l);
      t.accumulate_param_grads(s);
    }
    return t.val(l).data[0];
  };
  REQUIRE(fd_check(ps, loss_fn).max_rel_err < 1e-4);
}

TEST_CASE("finite differences: interleave, pick, concat, masked losses") {
  Rng rng(16);
  const std::int64_t B = 2, K = 3, d = 4;
  ParamStore ps;
  ps.add("r", randn(rng, {B * K, d}));
  ps.add("o", randn(rng, {B * K, d}));
  ps.add("a", randn(rng, {B * K, d}));
  Tensor y = randn(rng, {B * K, 2 * d});
  Tensor tgt = randn(rng, {B * K, d});
  std::vector<std::uint8_t> mask = {1, 0, 1, 1, 1, 0};

  auto loss_fn = [&](ParamStore& s, bool with_grad) {
    Tape t;
    NodeId inter = t.interleave3(t.param(s, "r"), t.param(s, "o"),
                                 t.param(s, "a"), B, K);
    NodeId ro = t.concat_cols(t.pick_token(inter, B, K, 0),
                              t.pick_token(inter, B, K, 1));
    NodeId l1 = t.mse_masked(ro, y, mask);
    NodeId l2 = t.row_sqdist_masked(t.pick_token(inter, B, K, 2), tgt, mask);
    NodeId l = t.axpy_scalar(l1, l2, 1.0, 0.37);
    if (with_grad) {
      t.backward(l);
      t.accumulate_param_grads(s);
    }
    return t.val(l).data[0];
  };
  auto rep = fd_check(ps, loss_fn);
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("masked losses match double-loop oracles") {
  Rng rng(17);
  const std::int64_t m = 6, n = 3;
  Tensor pred = randn(rng, {m, n});
  Tensor tgt = randn(rng, {m, n});
  std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0, 1};

  Tape t;
  NodeId p = t.leaf(pred, true);
  NodeId l = t.mse_masked(p, tgt, mask);

  double want = 0.0;
  std::int64_t valid = 0;
  for (std::int64_t i = 0; i < m; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    ++valid;
    for (std::int64_t j = 0; j < n; ++j) {
      double d = pred.at(i, j) - tgt.at(i, j);
      want += d * d;
    }
  }
  want /= static_cast<double>(valid * n);
  REQUIRE(rel_err(t.val(l).data[0], want) < 1e-12);

  Tape t2;
  NodeId p2 = t2.leaf(pred, true);
  NodeId l2 = t2.row_sqdist_masked(p2, tgt, mask);
  double want2 = 0.0;
  for (std::int64_t i = 0; i < m; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    double row = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      double d = pred.at(i, j) - tgt.at(i, j);
      row += d * d;
    }
    want2 += row;
  }
  want2 /= static_cast<double>(valid);
  REQUIRE(rel_err(t2.val(l2).data[0], want2) < 1e-12);

  // all-masked edge: loss is exactly zero, no division by zero
  Tape t3;
  NodeId l3 = t3.mse_masked(t3.leaf(pred, true), tgt,
                            std::vector<std::uint8_t>(m, 0));
  REQUIRE(t3.val(l3).data[0] == 0.0);
}

TEST_CASE("attention causality: future inputs cannot reach past outputs") {
  Rng rng(18);
  const std::int64_t B = 1, T = 6, D = 4;
  Tensor q = randn(rng, {T, D}), k = randn(rng, {T, D}), v = randn(rng, {T, D});
  std::vector<std::uint8_t> valid(T, 1);
  Rng drng(0);

  Tape t1;
  NodeId o1 = t1.attention_core(t1.leaf(q), t1.leaf(k), t1.leaf(v), B, T, 2,
                                valid, 0.0, drng, false);
  // perturb strictly after position 2
  Tensor q2 = q, k2 = k, v2 = v;
  for (std::int64_t p = 3; p < T; ++p)
    for (std::int64_t j = 0; j < D; ++j) {
      q2.at(p, j) += 10.0;
      k2.at(p, j) -= 5.0;
      v2.at(p, j) *= -2.0;
    }
  Tape t2;
  NodeId o2 = t2.attention_core(t2.leaf(q2), t2.leaf(k2), t2.leaf(v2), B, T, 2,
                                valid, 0.0, drng, false);
  for (std::int64_t p = 0; p <= 2; ++p)
    for (std::int64_t j = 0; j < D; ++j)
      REQUIRE(t1.val(o1).at(p, j) == t2.val(o2).at(p, j));
}

TEST_CASE("attention mask soundness and softmax normalization") {
  Rng rng(19);
  const std::int64_t B = 2, T = 5, D = 6;
  Tensor q = randn(rng, {B * T, D}), k = randn(rng, {B * T, D});
  std::vector<std::uint8_t> valid(B * T, 1);
  valid[0] = valid[1] = 0;  // batch 0 left-padded by 2
  Rng drng(0);

  // constant-one values: each output element equals the sum of attention
  // weights, which must be exactly a probability distribution
  Tensor ones = Tensor::full({B * T, D}, 1.0);
  Tape t;
  NodeId o = t.attention_core(t.leaf(q), t.leaf(k), t.leaf(ones), B, T, 3,
                              valid, 0.0, drng, false);
  for (std::int64_t r = 0; r < B * T; ++r)
    for (std::int64_t j = 0; j < D; ++j)
      REQUIRE(std::fabs(t.val(o).at(r, j) - 1.0) < 1e-12);

  // changing values at invalid positions never affects valid outputs
  Tensor v1 = randn(rng, {B * T, D});
  Tensor v2 = v1;
  for (std::int64_t j = 0; j < D; ++j) {
    v2.at(0, j) = 99.0;
    v2.at(1, j) = -99.0;
  }
  Tape ta, tb;
  NodeId oa = ta.attention_core(ta.leaf(q), ta.leaf(k), ta.leaf(v1), B, T, 3,
                                valid, 0.0, drng, false);
  NodeId ob = tb.attention_core(tb.leaf(q), tb.leaf(k), tb.leaf(v2), B, T, 3,
                                valid, 0.0, drng, false);
  for (std::int64_t r = 2; r < B * T; ++r)
    for (std::int64_t j = 0; j < D; ++j)
      REQUIRE(ta.val(oa).at(r, j) == tb.val(ob).at(r, j));

  // padded query rows still produce finite output (self-only fallback)
  for (std::int64_t r = 0; r < 2; ++r)
    for (std::int64_t j = 0; j < D; ++j)
      REQUIRE(std::isfinite(ta.val(oa).at(r, j)));
}

TEST_CASE("layer norm output statistics") {
  Rng rng(20);
  const std::int64_t m = 8, n = 16;
  Tensor x = randn(rng, {m, n}, 5.0);
  Tape t;
  NodeId o = t.layer_norm(t.leaf(x), t.leaf(Tensor::full({n}, 1.0)),
                          t.leaf(Tensor::zeros({n})));
  for (std::int64_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::int64_t j = 0; j < n; ++j) mean += t.val(o).at(i, j);
    mean /= static_cast<double>(n);
    REQUIRE(std::fabs(mean) < 1e-10);
    double var = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      double d = t.val(o).at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    REQUIRE(std::fabs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("dropout semantics") {
  Rng rng(21);
  Tensor x = randn(rng, {50, 20});
  Rng drng(5);

  Tape t;
  NodeId in = t.leaf(x, true);
  // identity when disabled: same node returned, no RNG consumed
  std::uint64_t before = drng.next_u64();
  Rng probe(5);
  REQUIRE(probe.next_u64() == before);
  Rng drng2(5);
  REQUIRE(t.dropout(in, 0.0, drng2, true) == in);
  REQUIRE(t.dropout(in, 0.5, drng2, false) == in);
  REQUIRE(drng2.next_u64() == before);

  const double p = 0.3;
  Rng drng3(6);
  Tape t2;
  NodeId in2 = t2.leaf(x, true);
  NodeId out = t2.dropout(in2, p, drng3, true);
  std::int64_t zeros = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    double o = t2.val(out).data[i];
    bool dropped = o == 0.0;
    bool scaled = rel_err(o, x.data[i] / (1.0 - p)) < 1e-12;
    REQUIRE((dropped || scaled));
    if (dropped) ++zeros;
  }
  double frac = static_cast<double>(zeros) / static_cast<double>(x.numel());
  REQUIRE(std::fabs(frac - p) < 0.05);

  // backward routes gradient only through kept elements, scaled
  NodeId l = t2.mse(out, Tensor::zeros({50, 20}));
  t2.backward(l);
  const Tensor& g = t2.grad(in2);
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    if (t2.val(out).data[i] == 0.0)
      REQUIRE(g.data[i] == 0.0);
    else
      REQUIRE(g.data[i] != 0.0);
  }
}

TEST_CASE("tape state errors") {
  Tape t;
  REQUIRE_THROWS_AS(t.backward(0), StateError);

  ParamStore ps;
  ps.add("w", Tensor::scalar(1.0));
  Tape t2;
  NodeId w = t2.param(ps, "w");
  REQUIRE_THROWS_AS(t2.accumulate_param_grads(ps), StateError);

  NodeId vec = t2.leaf(Tensor({3}), true);
  REQUIRE_THROWS_AS(t2.backward(vec), ArgumentError);

  // root with no parameter dependency
  Tape t3;
  NodeId c = t3.leaf(Tensor::scalar(2.0));
  REQUIRE_THROWS_AS(t3.backward(c), StateError);
  (void)w;
}

TEST_CASE("backward is deterministic across runs") {
  Rng rng(22);
  Tensor x = randn(rng, {4, 6});
  Tensor y = randn(rng, {4, 2});
  Tensor w0 = randn(rng, {6, 2});

  auto run = [&](std::uint64_t seed) {
    ParamStore ps;
    ps.add("w", w0);
    Rng drng(seed);
    Tape t;
    NodeId h = t.dropout(t.matmul(t.leaf(x), t.param(ps, "w")), 0.2, drng, true);
    NodeId l = t.mse(h, y);
    t.backward(l);
    t.accumulate_param_grads(ps);
    return ps.grad("w");
  };
  Tensor g1 = run(77), g2 = run(77), g3 = run(78);
  for (std::int64_t i = 0; i < g1.numel(); ++i) REQUIRE(g1.data[i] == g2.data[i]);
  bool any_diff = false;
  for (std::int64_t i = 0; i < g1.numel(); ++i)
    if (g1.data[i] != g3.data[i]) any_diff = true;
  REQUIRE(any_diff);
}
