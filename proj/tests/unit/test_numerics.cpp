#include <cmath>

#include "doctest.h"
#include "hps/numerics.hpp"
#include "hps/rng.hpp"

using namespace hps;

namespace {

Tensor<double> random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.normal(0.0, scale);
  return t;
}

AttentionWeights<double> identity_weights(std::size_t d) {
  Tensor<double> eye({d, d});
  for (std::size_t i = 0; i < d; ++i) eye.at(i, i) = 1;
  auto w = make_var(eye);
  return {w, nullptr, w, nullptr, w, nullptr, w, nullptr};
}

}  // namespace

TEST_CASE("linear_forward examples") {
  auto y = linear_forward(Tensor<double>({2}, {1, 0}),
                          Tensor<double>({2, 2}, {1, 0, 0, 1}),
                          Tensor<double>({2}, {0, 0}));
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 0.0);

  auto z = linear_forward(Tensor<double>({2}, {1, 1}),
                          Tensor<double>({1, 2}, {2, 3}),
                          Tensor<double>({1}, {1}));
  CHECK(z.size() == 1);
  CHECK(z[0] == 6.0);

  CHECK_THROWS_AS(linear_forward(Tensor<double>({5, 3}), Tensor<double>({4, 2}),
                                 Tensor<double>({4})),
                  ShapeError);
}

TEST_CASE("softmax examples and row sums") {
  auto a = softmax(Tensor<double>({2}, {0, 0}));
  CHECK(a[0] == doctest::Approx(0.5));
  CHECK(a[1] == doctest::Approx(0.5));

  auto b = softmax(Tensor<double>({2}, {1000, 0}));
  CHECK(std::abs(b[0] - 1.0) < 1e-12);
  CHECK(std::abs(b[1]) < 1e-12);

  auto c = softmax(Tensor<double>({2}, {std::log(2.0), 0}));
  CHECK(c[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(c[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_tensor(rng, {4, 7}, 30.0).cast<float>();
    auto y = softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) {
        CHECK(y.at(r, k) >= 0.0f);
        s += y.at(r, k);
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("layer_norm examples") {
  Tensor<double> g1({3}, {1, 1, 1}), b1({3}, {0, 0, 0});
  auto y = layer_norm(Tensor<double>({3}, {1, 1, 1}), g1, b1);
  for (double v : y.values()) CHECK(v == 0.0);

  auto z = layer_norm(Tensor<double>({2}, {1, -1}), Tensor<double>({2}, {1, 1}),
                      Tensor<double>({2}, {0, 0}));
  CHECK(std::abs(z[0] - 1.0) < 1e-4);
  CHECK(std::abs(z[1] + 1.0) < 1e-4);

  auto w = layer_norm(Tensor<double>({3}, {4, -2, 9}), Tensor<double>({3}),
                      Tensor<double>({3}, {0.5, 1.5, -2}));
  CHECK(w[0] == 0.5);
  CHECK(w[1] == 1.5);
  CHECK(w[2] == -2.0);
}

TEST_CASE("multi_head_attention examples") {
  Rng rng(11);
  Graph<double> g(false);
  const std::size_t d = 4;
  AttentionWeights<double> w{
      make_var(random_tensor(rng, {d, d})), make_var(random_tensor(rng, {d})),
      make_var(random_tensor(rng, {d, d})), make_var(random_tensor(rng, {d})),
      make_var(random_tensor(rng, {d, d})), make_var(random_tensor(rng, {d})),
      make_var(random_tensor(rng, {d, d})), make_var(random_tensor(rng, {d}))};

  SUBCASE("single key returns the projected value for any query") {
    auto v = g.constant(random_tensor(rng, {1, d}));
    auto k = g.constant(random_tensor(rng, {1, d}));
    auto q = g.constant(random_tensor(rng, {3, d}));
    auto out = multi_head_attention(g, q, k, v, 2, w);
    auto vp = linear_forward(v->value, w.v_w->value, w.v_b->value);
    auto expect = linear_forward(vp, w.o_w->value, w.o_b->value);
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        CHECK(out->value.at(r, c) == doctest::Approx(expect.at(0, c)).epsilon(1e-12));
      }
    }
  }

  SUBCASE("identical query rows give identical outputs") {
    Tensor<double> q({2, d});
    auto row = random_tensor(rng, {d});
    for (std::size_t c = 0; c < d; ++c) q.at(0, c) = q.at(1, c) = row[c];
    auto kv = g.constant(random_tensor(rng, {5, d}));
    auto out = multi_head_attention(g, g.constant(q), kv, kv, 2, w);
    for (std::size_t c = 0; c < d; ++c) CHECK(out->value.at(0, c) == out->value.at(1, c));
  }

  SUBCASE("hand instance with identity projections") {
    const std::size_t dd = 2;
    Tensor<double> q({2, dd}, {1, 0, 0, 2}), k({2, dd}, {0.5, 1, -1, 0.25});
    Tensor<double> v({2, dd}, {3, -1, 2, 5});
    auto out = multi_head_attention(g, g.constant(q), g.constant(k),
                                    g.constant(v), 1, identity_weights(dd));
    for (std::size_t r = 0; r < 2; ++r) {
      double s[2];
      for (std::size_t j = 0; j < 2; ++j) {
        s[j] = (q.at(r, 0) * k.at(j, 0) + q.at(r, 1) * k.at(j, 1)) / std::sqrt(2.0);
      }
      const double m = std::max(s[0], s[1]);
      const double e0 = std::exp(s[0] - m), e1 = std::exp(s[1] - m);
      const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
      for (std::size_t c = 0; c < dd; ++c) {
        CHECK(out->value.at(r, c) ==
              doctest::Approx(a0 * v.at(0, c) + a1 * v.at(1, c)).epsilon(1e-12));
      }
    }
  }

  SUBCASE("uniform mask is bitwise identical to no mask") {
    auto q = g.constant(random_tensor(rng, {3, d}));
    auto kv = g.constant(random_tensor(rng, {6, d}));
    AttentionMask all(3, 6, 1);
    auto a = multi_head_attention(g, q, kv, kv, 2, w);
    auto b = multi_head_attention(g, q, kv, kv, 2, w, &all);
    CHECK(a->value == b->value);
  }

  SUBCASE("empty mask rows fall back to full attention") {
    auto q = g.constant(random_tensor(rng, {2, d}));
    auto kv = g.constant(random_tensor(rng, {4, d}));
    AttentionMask mask(2, 4, 0);
    mask.allow[1 * 4 + 2] = 1;
    auto full = multi_head_attention(g, q, kv, kv, 2, w);
    auto masked = multi_head_attention(g, q, kv, kv, 2, w, &mask);
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(masked->value.at(0, c) == full->value.at(0, c));
    }
    auto vp = linear_forward(kv->value, w.v_w->value, w.v_b->value);
    auto only = linear_forward(vp, w.o_w->value, w.o_b->value);
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(masked->value.at(1, c) == doctest::Approx(only.at(2, c)).epsilon(1e-12));
    }
  }

  SUBCASE("width not divisible by heads") {
    auto q = g.constant(random_tensor(rng, {2, d}));
    CHECK_THROWS_AS(multi_head_attention(g, q, q, q, 3, w), ConfigError);
  }
}

TEST_CASE("finite_diff_check on a quadratic") {
  ParameterSet<double> params;
  auto& p = params.add("theta", Tensor<double>({3}, {0.5, -1.25, 2.0}));
  auto loss = [&](bool grad) {
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double t = p.value()[i];
      s += t * t;
      if (grad) p.gradient()[i] += 2 * t;
    }
    return s;
  };
  auto report = finite_diff_check(loss, params);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-8);

  auto corrupted = [&](bool grad) {
    double s = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double t = p.value()[i];
      s += t * t;
      if (grad) p.gradient()[i] += 2 * 2 * t;
    }
    return s;
  };
  CHECK_FALSE(finite_diff_check(corrupted, params).passed);

  auto broken = [&](bool) { return std::nan(""); };
  CHECK_THROWS_AS(finite_diff_check(broken, params), NumericError);
}

TEST_CASE("every learnable op passes the gradient check") {
  ParameterSet<double> params;
  Rng rng(21);
  auto& x = params.add("x", random_tensor(rng, {3, 4}));
  auto& w = params.add("w", random_tensor(rng, {4, 4}));
  auto& b = params.add("b", random_tensor(rng, {4}));
  auto& gain = params.add("gain", random_tensor(rng, {4}));
  auto& img = params.add("img", random_tensor(rng, {2, 4, 4}));
  auto& kernel = params.add("kernel", random_tensor(rng, {3, 2, 3, 3}));
  auto& kb = params.add("kb", random_tensor(rng, {3}));
  auto& pw = params.add("pw", random_tensor(rng, {2, 2, 1, 1}));
  Tensor<double> targets({3, 4});
  for (auto& v : targets.values()) v = rng.uniform();
  AttentionMask mask(3, 3, 1);
  mask.allow[1] = 0;
  mask.allow[3 * 2 + 0] = mask.allow[3 * 2 + 1] = mask.allow[3 * 2 + 2] = 0;

  auto run = [&](bool grad) {
    Graph<double> g(grad);
    auto lin = ops::linear(g, x.var, w.var, b.var);
    auto ln = ops::layer_norm(g, lin, gain.var, b.var);
    AttentionWeights<double> aw{w.var, b.var, w.var, nullptr,
                                w.var, b.var, w.var, b.var};
    auto att = multi_head_attention(g, ln, ln, lin, 2, aw, &mask);
    auto act = ops::relu(g, ops::add(g, att, ops::scale(g, x.var, 0.5)));
    auto sm = ops::softmax_rows(g, act);
    auto tr = ops::transpose(g, ops::add_row(g, sm, b.var));
    auto cat = ops::concat_cols(g, {ops::slice_cols(g, tr, 1, 2),
                                    ops::slice_rows(g, tr, 0, 4)});
    auto gathered = ops::gather_rows(g, ops::transpose(g, cat), {4, 0, 2});
    auto conv = ops::conv2d(g, img.var, kernel.var, kb.var, 2);
    auto conv1 = ops::conv2d(g, img.var, pw.var, Var<double>{}, 1);
    auto up = ops::resize_bilinear(g, conv, 3, 5);
    auto up1 = ops::resize_bilinear(g, conv1, 2, 2);
    auto bce = ops::sigmoid_bce_mean(g, gathered, targets);
    auto dice = ops::dice_rows_mean(g, gathered, targets);
    auto ce = ops::cross_entropy(g, gathered, {0, 3, 1}, std::vector<double>{1.0, 0.1, 0.7});
    auto spatial = ops::matmul(g, ops::reshape(g, up, {3, 15}),
                               g.constant(Tensor<double>({15, 1}, 0.1)));
    auto spatial1 = ops::matmul(g, ops::reshape(g, up1, {1, 8}),
                                g.constant(Tensor<double>({8, 1}, -0.2)));
    auto pooled = ops::matmul(g, g.constant(Tensor<double>({1, 3}, 1.0)),
                              spatial);
    auto all = ops::weighted_sum(g, std::vector<Var<double>>{bce, dice, ce, pooled, spatial1},
                                 std::vector<double>{1.0, 2.5, 0.3, 0.05, 1.0});
    if (grad) g.backward(all);
    return all->value[0];
  };
  auto report = finite_diff_check(run, params);
  INFO("worst parameter: " << report.worst_param);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.passed);
}

TEST_CASE("ops are deterministic") {
  Rng rng(5);
  auto x = random_tensor(rng, {4, 6});
  auto w = random_tensor(rng, {6, 6});
  Graph<double> g(false);
  auto a = ops::softmax_rows(g, ops::matmul(g, g.constant(x), g.constant(w)));
  auto b = ops::softmax_rows(g, ops::matmul(g, g.constant(x), g.constant(w)));
  CHECK(a->value == b->value);
}
