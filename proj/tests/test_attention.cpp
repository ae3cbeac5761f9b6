// SPDX-License-Identifier: Apache-2.0

#include "attention.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "tensor.hpp"
#include "test_util.hpp"

using ks::Tensor;

namespace {

constexpr double kLnEps = 1e-5;

std::vector<double> softmax_oracle(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// Plain-loop attention: softmax(q k^T / sqrt(d_k)) v.
ks::SdpaResult sdpa_oracle(const Tensor& q, const Tensor& k, const Tensor& v) {
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor a({q.rows(), k.rows()});
  for (int64_t i = 0; i < q.rows(); ++i) {
    std::vector<double> logits(static_cast<size_t>(k.rows()));
    for (int64_t j = 0; j < k.rows(); ++j) {
      double dot = 0.0;
      for (int64_t c = 0; c < q.cols(); ++c) dot += q.at(i, c) * k.at(j, c);
      logits[static_cast<size_t>(j)] = dot * s;
    }
    auto row = softmax_oracle(logits);
    for (int64_t j = 0; j < k.rows(); ++j)
      a.at(i, j) = row[static_cast<size_t>(j)];
  }
  return {a, tutil::matmul_oracle(a, v)};
}

Tensor layer_norm_oracle(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < x.cols(); ++j) mean += x.at(i, j);
    mean /= static_cast<double>(x.cols());
    double var = 0.0;
    for (int64_t j = 0; j < x.cols(); ++j) {
      double c = x.at(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(x.cols());
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    for (int64_t j = 0; j < x.cols(); ++j)
      out.at(i, j) = (x.at(i, j) - mean) * inv * gamma.at(0, j) + beta.at(0, j);
  }
  return out;
}

Tensor linear_oracle(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor out = tutil::matmul_oracle(x, w);
  for (int64_t i = 0; i < out.rows(); ++i)
    for (int64_t j = 0; j < out.cols(); ++j) out.at(i, j) += b.at(0, j);
  return out;
}

Tensor mha_oracle(const Tensor& x_q, const Tensor& x_kv, const Tensor& pe_q,
                  const Tensor& pe_kv, const ks::AttentionParams& p) {
  Tensor q_in(x_q.shape()), kv_in(x_kv.shape());
  for (int64_t i = 0; i < x_q.numel(); ++i)
    q_in.data()[i] = x_q.data()[i] + pe_q.data()[i];
  for (int64_t i = 0; i < x_kv.numel(); ++i)
    kv_in.data()[i] = x_kv.data()[i] + pe_kv.data()[i];
  Tensor q = linear_oracle(q_in, p.qkv.wq, p.qkv.bq);
  Tensor k = linear_oracle(kv_in, p.qkv.wk, p.qkv.bk);
  Tensor v = linear_oracle(x_kv, p.qkv.wv, p.qkv.bv);

  const int64_t dh = q.cols() / p.heads;
  Tensor mixed({x_q.rows(), q.cols()});
  for (int64_t h = 0; h < p.heads; ++h) {
    Tensor qh({q.rows(), dh}), kh({k.rows(), dh}), vh({v.rows(), dh});
    for (int64_t i = 0; i < q.rows(); ++i)
      for (int64_t j = 0; j < dh; ++j) qh.at(i, j) = q.at(i, h * dh + j);
    for (int64_t i = 0; i < k.rows(); ++i)
      for (int64_t j = 0; j < dh; ++j) {
        kh.at(i, j) = k.at(i, h * dh + j);
        vh.at(i, j) = v.at(i, h * dh + j);
      }
    Tensor head = sdpa_oracle(qh, kh, vh).output;
    for (int64_t i = 0; i < head.rows(); ++i)
      for (int64_t j = 0; j < dh; ++j) mixed.at(i, h * dh + j) = head.at(i, j);
  }
  return linear_oracle(mixed, p.wo, p.bo);
}

ks::AttentionParams rand_attn(std::mt19937_64& rng, int64_t d, int64_t heads) {
  ks::AttentionParams p;
  p.qkv.wq = tutil::rand_uniform(rng, {d, d});
  p.qkv.bq = tutil::rand_uniform(rng, {d});
  p.qkv.wk = tutil::rand_uniform(rng, {d, d});
  p.qkv.bk = tutil::rand_uniform(rng, {d});
  p.qkv.wv = tutil::rand_uniform(rng, {d, d});
  p.qkv.bv = tutil::rand_uniform(rng, {d});
  p.wo = tutil::rand_uniform(rng, {d, d});
  p.bo = tutil::rand_uniform(rng, {d});
  p.heads = heads;
  return p;
}

ks::EncoderLayerParams rand_layer(std::mt19937_64& rng, int64_t d,
                                  int64_t d_ff, int64_t heads) {
  ks::EncoderLayerParams p;
  p.attn = rand_attn(rng, d, heads);
  p.ln_attn = {Tensor::full({d}, 1.0), Tensor::zeros({d})};
  p.ln_ffn = {tutil::rand_uniform(rng, {d}, 0.5, 1.5),
              tutil::rand_uniform(rng, {d}, -0.2, 0.2)};
  p.ffn.w1 = tutil::rand_uniform(rng, {d, d_ff});
  p.ffn.b1 = tutil::rand_uniform(rng, {d_ff});
  p.ffn.w2 = tutil::rand_uniform(rng, {d_ff, d});
  p.ffn.b2 = tutil::rand_uniform(rng, {d});
  return p;
}

Tensor encoder_layer_oracle(const Tensor& x, const Tensor& pe,
                            const ks::EncoderLayerParams& p,
                            ks::NormScheme scheme) {
  Tensor attn = mha_oracle(x, x, pe, pe, p.attn);
  auto add_o = [](const Tensor& a, const Tensor& b) {
    Tensor out(a.shape());
    for (int64_t i = 0; i < a.numel(); ++i)
      out.data()[i] = a.data()[i] + b.data()[i];
    return out;
  };
  auto ffn_o = [&](const Tensor& z) {
    Tensor hdn = linear_oracle(z, p.ffn.w1, p.ffn.b1);
    for (double& v : hdn.span()) v = v > 0.0 ? v : 0.0;
    return linear_oracle(hdn, p.ffn.w2, p.ffn.b2);
  };
  if (scheme == ks::NormScheme::kBranchLn) {
    Tensor z1 =
        add_o(x, layer_norm_oracle(attn, p.ln_attn.gamma, p.ln_attn.beta));
    return add_o(z1,
                 layer_norm_oracle(ffn_o(z1), p.ln_ffn.gamma, p.ln_ffn.beta));
  }
  Tensor z1 = layer_norm_oracle(add_o(x, attn), p.ln_attn.gamma, p.ln_attn.beta);
  return layer_norm_oracle(add_o(z1, ffn_o(z1)), p.ln_ffn.gamma, p.ln_ffn.beta);
}

}  // namespace

TEST_CASE("single-key attention collapses onto the value row") {
  auto r = ks::scaled_dot_product_attention(
      Tensor::of({{1, 2}}), Tensor::of({{3, 4}}), Tensor::of({{5, 6}}));
  CHECK(r.attention_map.at(0, 0) == 1.0);
  CHECK(r.output.at(0, 0) == 5.0);
  CHECK(r.output.at(0, 1) == 6.0);
}

TEST_CASE("zero queries average the values uniformly") {
  Tensor q = Tensor::zeros({1, 2});
  Tensor k = Tensor::of({{1, 0}, {0, 1}, {2, 2}});
  Tensor v = Tensor::of({{3, 0}, {0, 6}, {9, 3}});
  auto r = ks::scaled_dot_product_attention(q, k, v);
  for (int64_t j = 0; j < 3; ++j)
    CHECK(r.attention_map.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(r.output.at(0, 0) == doctest::Approx(4.0).epsilon(1e-15));
  CHECK(r.output.at(0, 1) == doctest::Approx(3.0).epsilon(1e-15));
}

TEST_CASE("attention matches a scalar recomputation") {
  std::mt19937_64 rng(2025);
  for (int it = 0; it < 20; ++it) {
    Tensor q = tutil::rand_uniform(rng, {3, 5});
    Tensor k = tutil::rand_uniform(rng, {4, 5});
    Tensor v = tutil::rand_uniform(rng, {4, 6});
    auto got = ks::scaled_dot_product_attention(q, k, v);
    auto want = sdpa_oracle(q, k, v);
    CHECK(tutil::max_abs_diff(got.attention_map, want.attention_map) < 1e-13);
    CHECK(tutil::max_abs_diff(got.output, want.output) < 1e-12);
  }
}

TEST_CASE("attention rows are probability distributions") {
  std::mt19937_64 rng(7);
  Tensor x = tutil::rand_uniform(rng, {6, 8}, -2.0, 2.0);
  Tensor pe = tutil::rand_uniform(rng, {6, 8});
  auto heads = ks::attention_heads(x, x, pe, pe, rand_attn(rng, 8, 4).qkv, 4);
  REQUIRE(heads.maps.size() == 4);
  for (const Tensor& a : heads.maps) {
    for (int64_t i = 0; i < a.rows(); ++i) {
      double sum = 0.0;
      for (int64_t j = 0; j < a.cols(); ++j) {
        CHECK(a.at(i, j) >= 0.0);
        sum += a.at(i, j);
      }
      CHECK(std::fabs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("permuting key/value rows permutes map columns, not the output") {
  std::mt19937_64 rng(11);
  Tensor q = tutil::rand_uniform(rng, {5, 4});
  Tensor k = tutil::rand_uniform(rng, {6, 4});
  Tensor v = tutil::rand_uniform(rng, {6, 3});
  std::vector<int64_t> perm = {4, 0, 5, 2, 1, 3};
  Tensor kp({6, 4}), vp({6, 3});
  for (int64_t j = 0; j < 6; ++j) {
    for (int64_t c = 0; c < 4; ++c) kp.at(j, c) = k.at(perm[j], c);
    for (int64_t c = 0; c < 3; ++c) vp.at(j, c) = v.at(perm[j], c);
  }
  auto base = ks::scaled_dot_product_attention(q, k, v);
  auto permuted = ks::scaled_dot_product_attention(q, kp, vp);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 6; ++j)
      CHECK(permuted.attention_map.at(i, j) ==
            doctest::Approx(base.attention_map.at(i, perm[j])).epsilon(1e-13));
  CHECK(tutil::max_abs_diff(permuted.output, base.output) < 1e-13);
}

TEST_CASE("joint query/key scaling keeps each row's argmax") {
  std::mt19937_64 rng(13);
  Tensor q = tutil::rand_uniform(rng, {6, 8});
  Tensor k = tutil::rand_uniform(rng, {7, 8});
  Tensor v = tutil::rand_uniform(rng, {7, 8});
  auto argmax_rows = [](const Tensor& a) {
    std::vector<int64_t> idx(static_cast<size_t>(a.rows()));
    for (int64_t i = 0; i < a.rows(); ++i) {
      int64_t best = 0;
      for (int64_t j = 1; j < a.cols(); ++j)
        if (a.at(i, j) > a.at(i, best)) best = j;
      idx[static_cast<size_t>(i)] = best;
    }
    return idx;
  };
  auto base = argmax_rows(ks::scaled_dot_product_attention(q, k, v).attention_map);
  for (double c : {0.25, 3.0, 11.0}) {
    auto scaled = argmax_rows(
        ks::scaled_dot_product_attention(ks::scale(q, c), ks::scale(k, c), v)
            .attention_map);
    CHECK(scaled == base);
  }
}

TEST_CASE("positional encoding layout and bounds") {
  Tensor pe = ks::sinusoidal_pe(2, 2, 8);
  REQUIRE(pe.shape() == ks::Shape{4, 8});
  // token (y=1, x=0) sits at row 2; frequencies are 1 and 10000^(-1/2)
  const double w1 = std::pow(10000.0, -0.5);
  CHECK(pe.at(2, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK(pe.at(2, 1) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  CHECK(pe.at(2, 2) == doctest::Approx(std::sin(w1)).epsilon(1e-15));
  CHECK(pe.at(2, 3) == doctest::Approx(std::cos(w1)).epsilon(1e-15));
  CHECK(pe.at(2, 4) == 0.0);  // x = 0
  CHECK(pe.at(2, 5) == 1.0);
  for (double vv : pe.span()) {
    CHECK(vv <= 1.0);
    CHECK(vv >= -1.0);
  }
  CHECK(tutil::bit_equal(pe, ks::sinusoidal_pe(2, 2, 8)));
  // all four grid positions are distinguishable
  for (int64_t a = 0; a < 4; ++a)
    for (int64_t b = a + 1; b < 4; ++b) {
      double diff = 0.0;
      for (int64_t c = 0; c < 8; ++c)
        diff = std::max(diff, std::fabs(pe.at(a, c) - pe.at(b, c)));
      CHECK(diff > 1e-6);
    }
  CHECK_THROWS_AS(ks::sinusoidal_pe(2, 2, 6), ks::Error);
}

TEST_CASE("one head reduces to plain attention plus output projection") {
  std::mt19937_64 rng(17);
  const int64_t d = 4;
  ks::AttentionParams p = rand_attn(rng, d, 1);
  Tensor x = tutil::rand_uniform(rng, {5, d});
  Tensor pe = tutil::rand_uniform(rng, {5, d});
  Tensor got = ks::multi_head_attention(x, x, pe, pe, p);
  Tensor xin = ks::add(x, pe);
  auto sd = ks::scaled_dot_product_attention(
      ks::linear(xin, p.qkv.wq, p.qkv.bq), ks::linear(xin, p.qkv.wk, p.qkv.bk),
      ks::linear(x, p.qkv.wv, p.qkv.bv));
  CHECK(tutil::bit_equal(got, ks::linear(sd.output, p.wo, p.bo)));
}

TEST_CASE("multi-head attention matches per-head recomputation") {
  std::mt19937_64 rng(19);
  for (int64_t heads : {2, 4}) {
    ks::AttentionParams p = rand_attn(rng, 8, heads);
    Tensor xq = tutil::rand_uniform(rng, {3, 8});
    Tensor xkv = tutil::rand_uniform(rng, {6, 8});
    Tensor peq = tutil::rand_uniform(rng, {3, 8});
    Tensor pekv = tutil::rand_uniform(rng, {6, 8});
    Tensor got = ks::multi_head_attention(xq, xkv, peq, pekv, p);
    REQUIRE(got.shape() == ks::Shape{3, 8});
    CHECK(tutil::max_abs_diff(got, mha_oracle(xq, xkv, peq, pekv, p)) < 1e-11);
  }
}

TEST_CASE("zero output projection silences attention") {
  std::mt19937_64 rng(23);
  ks::AttentionParams p = rand_attn(rng, 8, 2);
  p.wo = Tensor::zeros({8, 8});
  p.bo = Tensor::zeros({8});
  Tensor x = tutil::rand_uniform(rng, {4, 8});
  Tensor out = ks::multi_head_attention(x, x, Tensor::zeros({4, 8}),
                                        Tensor::zeros({4, 8}), p);
  for (double v : out.span()) CHECK(v == 0.0);
}

TEST_CASE("encoder layer with zero weights is the identity") {
  const int64_t d = 8;
  ks::EncoderLayerParams p;
  p.attn.qkv = {Tensor::zeros({d, d}), Tensor::zeros({d}),
                Tensor::zeros({d, d}), Tensor::zeros({d}),
                Tensor::zeros({d, d}), Tensor::zeros({d})};
  p.attn.wo = Tensor::zeros({d, d});
  p.attn.bo = Tensor::zeros({d});
  p.attn.heads = 2;
  p.ln_attn = {Tensor::full({d}, 1.0), Tensor::zeros({d})};
  p.ln_ffn = {Tensor::full({d}, 1.0), Tensor::zeros({d})};
  p.ffn = {Tensor::zeros({d, 16}), Tensor::zeros({16}), Tensor::zeros({16, d}),
           Tensor::zeros({d})};
  std::mt19937_64 rng(29);
  Tensor x = tutil::rand_uniform(rng, {5, d});
  Tensor pe = tutil::rand_uniform(rng, {5, d});
  for (auto scheme : {ks::NormScheme::kBranchLn, ks::NormScheme::kPostAddLn}) {
    Tensor out = ks::encoder_layer_forward(x, pe, p, scheme);
    if (scheme == ks::NormScheme::kBranchLn) {
      for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(out.data()[i] == x.data()[i]);
    } else {
      // post-add scheme normalizes the residual stream itself
      CHECK(tutil::max_abs_diff(
                out, layer_norm_oracle(layer_norm_oracle(x, p.ln_attn.gamma,
                                                         p.ln_attn.beta),
                                       p.ln_ffn.gamma, p.ln_ffn.beta)) < 1e-12);
    }
  }
}

TEST_CASE("encoder layer matches a scalar recomputation") {
  std::mt19937_64 rng(31);
  for (auto scheme : {ks::NormScheme::kBranchLn, ks::NormScheme::kPostAddLn}) {
    ks::EncoderLayerParams p = rand_layer(rng, 8, 16, 4);
    Tensor x = tutil::rand_uniform(rng, {6, 8});
    Tensor pe = tutil::rand_uniform(rng, {6, 8});
    Tensor got = ks::encoder_layer_forward(x, pe, p, scheme);
    CHECK(tutil::max_abs_diff(got, encoder_layer_oracle(x, pe, p, scheme)) <
          1e-10);
  }
}

TEST_CASE("head substitution seam feeds the mix exactly") {
  std::mt19937_64 rng(37);
  ks::EncoderLayerParams p = rand_layer(rng, 8, 16, 2);
  ks::AttentionParams other = rand_attn(rng, 8, 2);
  Tensor x = tutil::rand_uniform(rng, {5, 8});
  Tensor pe = tutil::rand_uniform(rng, {5, 8});

  auto own = ks::attention_heads(x, x, pe, pe, p.attn.qkv, 2);
  auto donor = ks::attention_heads(x, x, pe, pe, other.qkv, 2);

  ks::AttentionOverride ov;
  ov.maps = &donor.maps;
  Tensor got = ks::encoder_layer_forward(x, pe, p, ks::NormScheme::kBranchLn, &ov);
  Tensor want = ks::encoder_layer_post(
      x, ks::attention_mix(donor.maps, own.values, p.attn.wo, p.attn.bo), p,
      ks::NormScheme::kBranchLn);
  CHECK(tutil::bit_equal(got, want));

  ov = {};
  ov.values = &donor.values;
  got = ks::encoder_layer_forward(x, pe, p, ks::NormScheme::kBranchLn, &ov);
  want = ks::encoder_layer_post(
      x, ks::attention_mix(own.maps, donor.values, p.attn.wo, p.attn.bo), p,
      ks::NormScheme::kBranchLn);
  CHECK(tutil::bit_equal(got, want));
}

TEST_CASE("attention gradients agree with finite differences") {
  std::mt19937_64 rng(41);
  const int64_t d = 8;
  ks::AttentionParams p = rand_attn(rng, d, 2);
  Tensor x = tutil::rand_uniform(rng, {4, d});
  Tensor pe = tutil::rand_uniform(rng, {4, d});

  auto wrt = [&](auto mutate) {
    return [&, mutate](const Tensor& t) {
      ks::AttentionParams q = p;
      Tensor xx = x;
      mutate(q, xx, t);
      return ks::sum_all(
          ks::mul(ks::multi_head_attention(xx, xx, pe, pe, q),
                  ks::multi_head_attention(xx, xx, pe, pe, q)));
    };
  };

  CHECK(tutil::grad_check(wrt([](ks::AttentionParams& q, Tensor&,
                                 const Tensor& t) { q.qkv.wq = t; }),
                          p.qkv.wq) < 1e-4);
  CHECK(tutil::grad_check(wrt([](ks::AttentionParams& q, Tensor&,
                                 const Tensor& t) { q.qkv.wk = t; }),
                          p.qkv.wk) < 1e-4);
  CHECK(tutil::grad_check(wrt([](ks::AttentionParams& q, Tensor&,
                                 const Tensor& t) { q.qkv.wv = t; }),
                          p.qkv.wv) < 1e-4);
  CHECK(tutil::grad_check(wrt([](ks::AttentionParams& q, Tensor&,
                                 const Tensor& t) { q.wo = t; }),
                          p.wo) < 1e-4);
  CHECK(tutil::grad_check(wrt([](ks::AttentionParams& q, Tensor&,
                                 const Tensor& t) { q.qkv.bq = t; }),
                          p.qkv.bq) < 1e-4);
  CHECK(tutil::grad_check(wrt([](ks::AttentionParams&, Tensor& xx,
                                 const Tensor& t) { xx = t; }),
                          x) < 1e-4);
}

TEST_CASE("encoder layer gradients agree with finite differences") {
  std::mt19937_64 rng(43);
  ks::EncoderLayerParams p = rand_layer(rng, 8, 16, 2);
  Tensor x = tutil::rand_uniform(rng, {4, 8});
  Tensor pe = tutil::rand_uniform(rng, {4, 8});
  for (auto scheme : {ks::NormScheme::kBranchLn, ks::NormScheme::kPostAddLn}) {
    auto wrt_x = [&](const Tensor& t) {
      return ks::sum_all(
          ks::mul(ks::encoder_layer_forward(t, pe, p, scheme),
                  ks::encoder_layer_forward(t, pe, p, scheme)));
    };
    CHECK(tutil::grad_check(wrt_x, x) < 1e-4);
    auto wrt_w1 = [&](const Tensor& t) {
      ks::EncoderLayerParams q = p;
      q.ffn.w1 = t;
      return ks::sum_all(ks::encoder_layer_forward(x, pe, q, scheme));
    };
    CHECK(tutil::grad_check(wrt_w1, p.ffn.w1) < 1e-4);
  }
}

TEST_CASE("attention shape and scheme-name errors") {
  CHECK_THROWS_AS(ks::scaled_dot_product_attention(Tensor::zeros({2, 3}),
                                                   Tensor::zeros({2, 4}),
                                                   Tensor::zeros({2, 4})),
                  ks::Error);
  CHECK_THROWS_AS(ks::scaled_dot_product_attention(Tensor::zeros({2, 3}),
                                                   Tensor::zeros({4, 3}),
                                                   Tensor::zeros({3, 4})),
                  ks::Error);
  std::mt19937_64 rng(47);
  CHECK_THROWS_AS(ks::attention_heads(Tensor::zeros({2, 6}),
                                      Tensor::zeros({2, 6}),
                                      Tensor::zeros({2, 6}),
                                      Tensor::zeros({2, 6}),
                                      rand_attn(rng, 6, 1).qkv, 4),
                  ks::Error);
  CHECK(ks::norm_scheme_from_string("paper_eq2") == ks::NormScheme::kBranchLn);
  CHECK(ks::norm_scheme_from_string("post_add") == ks::NormScheme::kPostAddLn);
  CHECK(ks::to_string(ks::NormScheme::kBranchLn) == "paper_eq2");
  CHECK_THROWS_AS(ks::norm_scheme_from_string("pre_ln"), ks::Error);
}
