// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "tensor.hpp"
#include "test_util.hpp"

using ks::Tensor;
using ks::Tape;

TEST_CASE("matmul basics") {
  Tensor eye = Tensor::of({{1, 0}, {0, 1}});
  Tensor b = Tensor::of({{3, 4}, {5, 6}});
  CHECK(tutil::bit_equal(ks::matmul(eye, b), b));

  Tensor z = ks::matmul(Tensor::of({{1, 2}}), Tensor::of({{0}, {0}}));
  CHECK(z.rows() == 1);
  CHECK(z.at(0, 0) == 0.0);

  Tensor c = ks::matmul(Tensor::of({{1, 2}, {3, 4}}), Tensor::of({{5, 6}, {7, 8}}));
  CHECK(c.at(0, 0) == doctest::Approx(19).epsilon(1e-14));
  CHECK(c.at(0, 1) == doctest::Approx(22).epsilon(1e-14));
  CHECK(c.at(1, 0) == doctest::Approx(43).epsilon(1e-14));
  CHECK(c.at(1, 1) == doctest::Approx(50).epsilon(1e-14));
}

TEST_CASE("matmul matches scalar-loop oracle on random inputs") {
  std::mt19937_64 rng(7);
  for (int it = 0; it < 20; ++it) {
    int64_t m = 1 + static_cast<int64_t>(rng() % 6);
    int64_t k = 1 + static_cast<int64_t>(rng() % 6);
    int64_t n = 1 + static_cast<int64_t>(rng() % 6);
    Tensor a = tutil::rand_uniform(rng, {m, k});
    Tensor b = tutil::rand_uniform(rng, {k, n});
    CHECK(tutil::max_abs_diff(ks::matmul(a, b), tutil::matmul_oracle(a, b)) < 1e-12);
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::of({{1, 2, 3}});
  Tensor b = Tensor::of({{1, 2}});
  try {
    ks::matmul(a, b);
    FAIL("expected shape error");
  } catch (const ks::Error& e) {
    std::string msg = e.what();
    CHECK(msg.find("[1x3]") != std::string::npos);
    CHECK(msg.find("[1x2]") != std::string::npos);
  }
}

TEST_CASE("matmul_nt equals matmul with explicit transpose") {
  std::mt19937_64 rng(8);
  Tensor a = tutil::rand_uniform(rng, {3, 5});
  Tensor b = tutil::rand_uniform(rng, {4, 5});
  Tensor bt({5, 4});
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 5; ++j) bt.at(j, i) = b.at(i, j);
  CHECK(tutil::max_abs_diff(ks::matmul_nt(a, b), tutil::matmul_oracle(a, bt)) < 1e-12);
}

TEST_CASE("softmax_rows examples") {
  Tensor s = ks::softmax_rows(Tensor::of({{0, 0}}));
  CHECK(s.at(0, 0) == 0.5);
  CHECK(s.at(0, 1) == 0.5);

  // constant rows give uniform thirds
  Tensor u = ks::softmax_rows(Tensor::of({{3.7, 3.7, 3.7}}));
  for (int j = 0; j < 3; ++j) CHECK(u.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-14));

  // independent exp/normalize oracle
  Tensor x = Tensor::of({{std::log(1.0), std::log(3.0)}});
  Tensor got = ks::softmax_rows(x);
  double e0 = std::exp(x.at(0, 0)), e1 = std::exp(x.at(0, 1));
  CHECK(got.at(0, 0) == doctest::Approx(e0 / (e0 + e1)).epsilon(1e-14));
  CHECK(got.at(0, 1) == doctest::Approx(e1 / (e0 + e1)).epsilon(1e-14));
  CHECK(got.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(got.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax_rows rows sum to one and shifts cancel") {
  std::mt19937_64 rng(11);
  for (int it = 0; it < 100; ++it) {
    Tensor x = tutil::rand_uniform(rng, {3, 5}, -30.0, 30.0);
    Tensor s = ks::softmax_rows(x);
    for (int64_t r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (int64_t c = 0; c < 5; ++c) sum += s.at(r, c);
      CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
    double c = (it % 2 ? 17.0 : -41.5);
    Tensor shifted = ks::softmax_rows(ks::add_scalar(x, c));
    CHECK(tutil::max_abs_diff(s, shifted) < 1e-12);
  }
}

TEST_CASE("softmax_rows rejects NaN") {
  Tensor x = Tensor::of({{0.0, std::nan("")}});
  CHECK_THROWS_AS(ks::softmax_rows(x), ks::Error);
}

TEST_CASE("layer_norm examples") {
  Tensor g1 = Tensor::vec({1, 1});
  Tensor b0 = Tensor::vec({0, 0});

  // constant row: zero variance absorbed by eps
  Tensor y = ks::layer_norm(Tensor::of({{4, 4}}), g1, b0, 1e-5);
  CHECK(y.at(0, 0) == 0.0);
  CHECK(y.at(0, 1) == 0.0);

  // already normalized row survives as eps -> 0
  Tensor z = ks::layer_norm(Tensor::of({{-1, 1}}), g1, b0, 1e-12);
  CHECK(z.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(z.at(0, 1) == doctest::Approx(1.0).epsilon(1e-9));

  // independent mean/var oracle for row [1,3], gamma=2, beta=1
  double eps = 1e-5;
  Tensor w = ks::layer_norm(Tensor::of({{1, 3}}), Tensor::vec({2, 2}),
                            Tensor::vec({1, 1}), eps);
  double mean = 2.0, var = 1.0;
  double xh0 = (1.0 - mean) / std::sqrt(var + eps);
  double xh1 = (3.0 - mean) / std::sqrt(var + eps);
  CHECK(w.at(0, 0) == doctest::Approx(2 * xh0 + 1).epsilon(1e-14));
  CHECK(w.at(0, 1) == doctest::Approx(2 * xh1 + 1).epsilon(1e-14));
}

TEST_CASE("elementwise primitives") {
  Tensor r = ks::relu(Tensor::of({{-2, 0, 5}}));
  CHECK(r.at(0, 0) == 0.0);
  CHECK(r.at(0, 1) == 0.0);
  CHECK(r.at(0, 2) == 5.0);

  std::mt19937_64 rng(3);
  Tensor x = tutil::rand_uniform(rng, {2, 3});
  CHECK(tutil::bit_equal(ks::add(x, Tensor::zeros({2, 3})), x));

  Tensor m = ks::mul(Tensor::of({{1, 2}}), Tensor::of({{3, 4}}));
  CHECK(m.at(0, 0) == 3.0);  // scalar loop: 1*3
  CHECK(m.at(0, 1) == 8.0);  // 2*4
}

TEST_CASE("concat and slice round trip") {
  std::mt19937_64 rng(5);
  Tensor a = tutil::rand_uniform(rng, {2, 4});
  Tensor b = tutil::rand_uniform(rng, {3, 4});
  Tensor cat = ks::concat_rows({a, b});
  CHECK(tutil::bit_equal(ks::slice_rows(cat, 0, 2), a));
  CHECK(tutil::bit_equal(ks::slice_rows(cat, 2, 5), b));

  Tensor c = tutil::rand_uniform(rng, {2, 3});
  Tensor wide = ks::concat_cols({a, c});
  CHECK(tutil::bit_equal(ks::slice_cols(wide, 0, 4), a));
  CHECK(tutil::bit_equal(ks::slice_cols(wide, 4, 7), c));
}

TEST_CASE("backward basics") {
  {
    Tape tape;
    Tensor w = tape.leaf(Tensor::vec({0.3, -1.0, 2.0}));
    tape.backward(ks::sum_all(w));
    Tensor g = tape.grad(w);
    for (int64_t i = 0; i < 3; ++i) CHECK(g.data()[i] == 1.0);
  }
  {
    Tape tape;
    Tensor w = tape.leaf(Tensor::vec({1, 2}));
    tape.backward(ks::sum_all(ks::mul(w, w)));
    Tensor g = tape.grad(w);
    CHECK(g.data()[0] == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(g.data()[1] == doctest::Approx(4.0).epsilon(1e-14));
  }
  {
    // rows of softmax always sum to 1, so the gradient vanishes
    Tape tape;
    Tensor w = tape.leaf(Tensor::of({{0.2, -1.4, 3.0}}));
    tape.backward(ks::sum_all(ks::softmax_rows(w)));
    Tensor g = tape.grad(w);
    for (int64_t i = 0; i < 3; ++i) CHECK(std::fabs(g.data()[i]) < 1e-12);
  }
}

TEST_CASE("backward rejects non-scalar loss") {
  Tape tape;
  Tensor w = tape.leaf(Tensor::vec({1, 2}));
  Tensor y = ks::mul(w, w);
  CHECK_THROWS_AS(tape.backward(y), ks::Error);
}

TEST_CASE("unreached parameters get zero gradients") {
  Tape tape;
  Tensor used = tape.leaf(Tensor::vec({1, 2}));
  Tensor unused = tape.leaf(Tensor::vec({5, 6}));
  tape.backward(ks::sum_all(used));
  Tensor g = tape.grad(unused);
  CHECK(g.data()[0] == 0.0);
  CHECK(g.data()[1] == 0.0);
}

TEST_CASE("backprop linearity") {
  std::mt19937_64 rng(13);
  for (int it = 0; it < 20; ++it) {
    Tensor x0 = tutil::rand_uniform(rng, {3, 4});
    Tape tape;
    Tensor x = tape.leaf(x0);
    Tensor l1 = ks::sum_all(ks::mul(x, x));
    Tensor l2 = ks::sum_all(ks::softmax_rows(x));
    Tensor l12 = ks::add(l1, l2);

    tape.backward(l12);
    Tensor g12 = tape.grad(x);
    tape.backward(l1);
    Tensor g1 = tape.grad(x);
    tape.backward(l2);
    Tensor g2 = tape.grad(x);

    for (int64_t i = 0; i < x0.numel(); ++i)
      CHECK(std::fabs(g12.data()[i] - (g1.data()[i] + g2.data()[i])) < 1e-10);
  }
}

TEST_CASE("tape replay reproduces recorded outputs exactly") {
  std::mt19937_64 rng(17);
  Tensor x0 = tutil::rand_uniform(rng, {4, 6});
  Tensor w0 = tutil::rand_uniform(rng, {6, 6});
  Tape tape;
  Tensor x = tape.leaf(x0);
  Tensor w = tape.leaf(w0);
  Tensor y = ks::softmax_rows(ks::matmul(ks::relu(x), w));
  Tensor snapshot = y.clone();
  tape.replay();
  CHECK(tutil::bit_equal(y.detached(), snapshot));
}

TEST_CASE("forward passes are bit-deterministic") {
  std::mt19937_64 rng(19);
  Tensor x = tutil::rand_uniform(rng, {5, 8});
  Tensor w = tutil::rand_uniform(rng, {8, 8});
  Tensor a = ks::layer_norm(ks::matmul(ks::softmax_rows(x), w),
                            Tensor::full({8}, 1.0), Tensor::zeros({8}));
  Tensor b = ks::layer_norm(ks::matmul(ks::softmax_rows(x), w),
                            Tensor::full({8}, 1.0), Tensor::zeros({8}));
  CHECK(tutil::bit_equal(a, b));
}

TEST_CASE("finite_difference_check endpoints") {
  // sum of squares: analytic gradient is 2x, error should be tiny
  std::mt19937_64 rng(23);
  Tensor x = tutil::rand_uniform(rng, {3, 3});
  double err = tutil::grad_check(
      [](const Tensor& t) { return ks::sum_all(ks::mul(t, t)); }, x, 1e-5);
  CHECK(err < 1e-8);

  // constant function: both sides zero
  auto const_fn = [](const Tensor&) { return 5.0; };
  Tensor zero_grad = Tensor::zeros({3, 3});
  CHECK(ks::finite_difference_check(const_fn, zero_grad, x, 1e-5) == 0.0);

  // h outside the contract range
  CHECK_THROWS_AS(tutil::grad_check(
                      [](const Tensor& t) { return ks::sum_all(t); }, x, 1e-2),
                  ks::Error);
}

TEST_CASE("gradients of every primitive pass the central-difference oracle") {
  std::mt19937_64 rng(29);
  auto weights = tutil::rand_uniform(rng, {3, 4});
  for (int it = 0; it < 10; ++it) {
    Tensor x = tutil::rand_uniform(rng, {3, 4});
    Tensor xpos = tutil::rand_uniform(rng, {3, 4}, 0.3, 2.0);
    Tensor other = tutil::rand_uniform(rng, {3, 4}, 0.5, 1.5);
    Tensor w = tutil::rand_uniform(rng, {4, 5});

    auto weighted = [&](const Tensor& y) { return ks::sum_all(ks::mul(y, weights)); };

    CHECK(tutil::grad_check([&](const Tensor& t) {
            return ks::sum_all(ks::mul(ks::matmul(t, w), ks::matmul(t, w)));
          }, x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return weighted(ks::softmax_rows(t));
          }, x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return weighted(ks::log_softmax_rows(t));
          }, x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return weighted(ks::layer_norm(t, Tensor::full({4}, 1.3),
                                           Tensor::full({4}, -0.2)));
          }, x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) { return weighted(ks::relu(t)); },
                            x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) { return weighted(ks::abs_elem(t)); },
                            x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) { return weighted(ks::sigmoid(t)); },
                            x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) { return weighted(ks::log_elem(t)); },
                            xpos) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return weighted(ks::div_elem(t, other));
          }, x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return weighted(ks::minimum(t, other));
          }, x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return weighted(ks::maximum(t, other));
          }, x) < 1e-4);
    Tensor gather_w = tutil::rand_uniform(rng, {3, 4});
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return ks::sum_all(ks::mul(ks::gather_rows(t, {2, 0, 0}), gather_w));
          }, x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return ks::sum_all(ks::gather_entries(t, {{0, 1}, {2, 3}, {0, 1}}));
          }, x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return weighted(ks::add_rowvec(t, Tensor::vec({1, -2, 0.5, 3})));
          }, x) < 1e-4);
    CHECK(tutil::grad_check([&](const Tensor& t) {
            return ks::sum_all(ks::concat_cols({ks::slice_cols(t, 1, 3), t}));
          }, x) < 1e-4);
  }
}
