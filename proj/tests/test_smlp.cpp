// SPDX-License-Identifier: Apache-2.0

#include "smlp.hpp"

#include <cmath>
#include <random>

#include "doctest.h"
#include "tensor.hpp"
#include "test_util.hpp"

using ks::Tensor;

namespace {

ks::SmlpParams rand_smlp(std::mt19937_64& rng, int64_t d) {
  return {tutil::rand_uniform(rng, {d, d}), tutil::rand_uniform(rng, {d})};
}

Tensor identity(int64_t d) {
  Tensor w = Tensor::zeros({d, d});
  for (int64_t i = 0; i < d; ++i) w.at(i, i) = 1.0;
  return w;
}

}  // namespace

TEST_CASE("zero mask passes tokens through bit-identically") {
  std::mt19937_64 rng(53);
  Tensor x = tutil::rand_uniform(rng, {5, 4}, -2.0, 2.0);
  x.at(0, 0) = -0.0;  // sign bit must survive the copy
  x.at(2, 3) = 0.0;
  Tensor out = ks::smlp(x, Tensor::zeros({5, 1}), rand_smlp(rng, 4));
  CHECK(tutil::bit_equal(out, x));
}

TEST_CASE("identity weights on nonnegative tokens are a no-op") {
  std::mt19937_64 rng(59);
  Tensor x = tutil::rand_uniform(rng, {4, 3}, 0.0, 2.0);
  Tensor out =
      ks::smlp(x, Tensor::full({4, 1}, 1.0), {identity(3), Tensor::zeros({3})});
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(out.data()[i] == x.data()[i]);
}

TEST_CASE("foreground tokens are clamped by the ReLU") {
  Tensor out = ks::smlp(Tensor::of({{-1, 2}}), Tensor::full({1, 1}, 1.0),
                        {identity(2), Tensor::zeros({2})});
  CHECK(out.at(0, 0) == 0.0);
  CHECK(out.at(0, 1) == 2.0);
}

TEST_CASE("mixed mask: foreground nonnegative, background untouched") {
  std::mt19937_64 rng(61);
  for (int it = 0; it < 10; ++it) {
    Tensor x = tutil::rand_uniform(rng, {6, 5}, -3.0, 3.0);
    ks::SmlpParams p = rand_smlp(rng, 5);
    Tensor m = Tensor::zeros({6, 1});
    for (int64_t i = 0; i < 6; ++i) m.at(i, 0) = static_cast<double>(rng() % 2);
    Tensor out = ks::smlp(x, m, p);
    for (int64_t i = 0; i < 6; ++i)
      for (int64_t j = 0; j < 5; ++j) {
        if (m.at(i, 0) == 0.0) {
          CHECK(out.at(i, j) == x.at(i, j));
        } else {
          CHECK(out.at(i, j) >= 0.0);
        }
      }
  }
}

TEST_CASE("fractional mask blends token and projection") {
  std::mt19937_64 rng(67);
  Tensor x = tutil::rand_uniform(rng, {3, 4});
  ks::SmlpParams p = rand_smlp(rng, 4);
  Tensor m = Tensor::of({{0.25}, {0.0}, {1.0}});
  Tensor proj = ks::relu(ks::linear(x, p.w_x, p.b_x));
  Tensor out = ks::smlp(x, m, p);
  for (int64_t j = 0; j < 4; ++j) {
    CHECK(out.at(0, j) ==
          doctest::Approx(0.75 * x.at(0, j) + 0.25 * proj.at(0, j))
              .epsilon(1e-15));
    CHECK(out.at(1, j) == x.at(1, j));
    CHECK(out.at(2, j) == proj.at(2, j));
  }
}

TEST_CASE("parameter count is d weights per channel plus bias") {
  CHECK(ks::smlp_param_count(1) == 2);
  CHECK(ks::smlp_param_count(8) == 72);
  CHECK(ks::smlp_param_count(64) == 4160);
  CHECK(ks::smlp_param_count(256) == 65792);
  std::mt19937_64 rng(71);
  for (int64_t d : {1, 8, 64, 256}) {
    ks::SmlpParams p = ks::smlp_init(d, rng);
    CHECK(p.w_x.numel() + p.b_x.numel() == ks::smlp_param_count(d));
  }
}

TEST_CASE("initialization starts near a scaled identity") {
  std::mt19937_64 rng(73);
  ks::SmlpParams p = ks::smlp_init(16, rng);
  for (int64_t i = 0; i < 16; ++i)
    for (int64_t j = 0; j < 16; ++j)
      CHECK(std::fabs(p.w_x.at(i, j) - (i == j ? 1.0 : 0.0)) < 0.08);
  for (double v : p.b_x.span()) CHECK(v == 0.0);
  std::mt19937_64 rng2(73);
  CHECK(tutil::bit_equal(p.w_x, ks::smlp_init(16, rng2).w_x));

  ks::SmlpParams amp = ks::smlp_init(16, rng, 2.0);
  for (int64_t i = 0; i < 16; ++i)
    for (int64_t j = 0; j < 16; ++j)
      CHECK(std::fabs(amp.w_x.at(i, j) - (i == j ? 2.0 : 0.0)) < 0.08);
}

TEST_CASE("all-background mask cuts the gradient to the fusion weights") {
  std::mt19937_64 rng(79);
  Tensor x0 = tutil::rand_uniform(rng, {4, 3});
  ks::SmlpParams p = rand_smlp(rng, 3);
  ks::Tape tape;
  Tensor x = tape.leaf(x0);
  Tensor w = tape.leaf(p.w_x);
  Tensor b = tape.leaf(p.b_x);
  Tensor loss = ks::sum_all(ks::smlp(x, Tensor::zeros({4, 1}), {w, b}));
  tape.backward(loss);
  Tensor gw = tape.grad(w), gb = tape.grad(b), gx = tape.grad(x);
  for (double v : gw.span()) CHECK(v == 0.0);
  for (double v : gb.span()) CHECK(v == 0.0);
  for (double v : gx.span()) CHECK(v == 1.0);
}

TEST_CASE("fusion gradients agree with finite differences") {
  std::mt19937_64 rng(83);
  Tensor x = tutil::rand_uniform(rng, {5, 4});
  ks::SmlpParams p = rand_smlp(rng, 4);
  Tensor m = Tensor::of({{0.0}, {1.0}, {0.3}, {1.0}, {0.7}});
  auto loss = [&](const Tensor& xx, const ks::SmlpParams& pp) {
    Tensor y = ks::smlp(xx, m, pp);
    return ks::sum_all(ks::mul(y, y));
  };
  CHECK(tutil::grad_check([&](const Tensor& t) { return loss(t, p); }, x) <
        1e-4);
  CHECK(tutil::grad_check(
            [&](const Tensor& t) { return loss(x, {t, p.b_x}); }, p.w_x) <
        1e-4);
  CHECK(tutil::grad_check(
            [&](const Tensor& t) { return loss(x, {p.w_x, t}); }, p.b_x) <
        1e-4);
}

TEST_CASE("fusion shape errors") {
  std::mt19937_64 rng(89);
  Tensor x = tutil::rand_uniform(rng, {4, 3});
  CHECK_THROWS_AS(ks::smlp(x, Tensor::zeros({5, 1}), rand_smlp(rng, 3)),
                  ks::Error);
  CHECK_THROWS_AS(ks::smlp(x, Tensor::zeros({4, 1}), rand_smlp(rng, 4)),
                  ks::Error);
}
