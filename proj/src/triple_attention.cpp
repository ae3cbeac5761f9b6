// SPDX-License-Identifier: Apache-2.0

#include "triple_attention.hpp"

#include <algorithm>
#include <cmath>

#include "common.hpp"

namespace ks {

AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "triple") return AttentionMode::kTrain;
  if (s == "baseline") return AttentionMode::kInfer;
  if (s == "dual_share_a") return AttentionMode::kDualShareA;
  if (s == "dual_share_v") return AttentionMode::kDualShareV;
  fail(ErrorKind::kUsage,
       "unknown mode '" + s +
           "' (expected baseline, dual_share_a, dual_share_v or triple)");
}

std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::kTrain: return "triple";
    case AttentionMode::kInfer: return "baseline";
    case AttentionMode::kDualShareA: return "dual_share_a";
    case AttentionMode::kDualShareV: return "dual_share_v";
  }
  fail(ErrorKind::kUsage, "bad attention mode");
}

TeacherProjections teacher_projections(const Tensor& x_t, const Tensor& pe,
                                       const TeacherAttentionParams& p) {
  Tensor with_pe = add(x_t, pe);
  return {linear(with_pe, p.w_qt, p.b_qt), linear(with_pe, p.w_kt, p.b_kt),
          linear(x_t, p.w_vt, p.b_vt)};
}

namespace {

Tensor noisy_copy(const Tensor& src, std::mt19937_64& rng, double sigma) {
  Tensor out = src.clone();
  if (sigma != 0.0)
    for (double& v : out.span()) v += sigma * rand_normal(rng);
  return out;
}

}  // namespace

TeacherAttentionParams teacher_attention_init(const QkvParams& student,
                                              std::mt19937_64& rng,
                                              double sigma) {
  return {noisy_copy(student.wq, rng, sigma), noisy_copy(student.bq, rng, sigma),
          noisy_copy(student.wk, rng, sigma), noisy_copy(student.bk, rng, sigma),
          noisy_copy(student.wv, rng, sigma), noisy_copy(student.bv, rng, sigma)};
}

namespace {

Tensor xavier_uniform(std::mt19937_64& rng, int64_t rows, int64_t cols) {
  Tensor t({rows, cols});
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  for (double& v : t.span()) v = s * (2.0 * uniform01(rng) - 1.0);
  return t;
}

}  // namespace

TeacherAttentionParams teacher_attention_similarity_init(int64_t d,
                                                         std::mt19937_64& rng) {
  Tensor wq = xavier_uniform(rng, d, d);
  Tensor wk = wq.clone();
  return {std::move(wq), Tensor::zeros({d}), std::move(wk), Tensor::zeros({d}),
          xavier_uniform(rng, d, d), Tensor::zeros({d})};
}

TripleOutputs triple_attention_forward(const Tensor& x, const FgBgMask* mask,
                                       const Tensor& pe,
                                       const EncoderLayerParams& student,
                                       const TeacherParams* teacher,
                                       AttentionMode mode, NormScheme scheme) {
  TripleOutputs out;
  const int64_t heads = student.attn.heads;
  AttentionHeads s = attention_heads(x, x, pe, pe, student.attn.qkv, heads);
  out.a1 = s.maps;
  out.v1 = s.values;
  out.z1 = encoder_layer_post(
      x, attention_mix(s.maps, s.values, student.attn.wo, student.attn.bo),
      student, scheme);
  if (mode == AttentionMode::kInfer) return out;

  if (mask == nullptr || teacher == nullptr)
    fail(ErrorKind::kContract,
         "triple attention: training modes need a mask and teacher params");
  if (mask->m.numel() != x.rows())
    fail(ErrorKind::kShape, "triple attention: mask length does not match tokens");

  Tensor x_t = smlp(x, mask->m, teacher->smlp);

  if (mode != AttentionMode::kDualShareV) {
    // branch 2 reuses the student maps on teacher values
    Tensor vt_full = linear(x_t, teacher->attn.w_vt, teacher->attn.b_vt);
    const int64_t dh = x.cols() / heads;
    for (int64_t i = 0; i < heads; ++i)
      out.v_t.push_back(slice_cols(vt_full, i * dh, (i + 1) * dh));
    out.z2 = encoder_layer_post(
        x, attention_mix(s.maps, out.v_t, student.attn.wo, student.attn.bo),
        student, scheme);
  }
  if (mode != AttentionMode::kDualShareA) {
    // branch 3 reuses the student values under the teacher maps
    Tensor with_pe = add(x_t, pe);
    Tensor qt = linear(with_pe, teacher->attn.w_qt, teacher->attn.b_qt);
    Tensor kt = linear(with_pe, teacher->attn.w_kt, teacher->attn.b_kt);
    const int64_t dh = x.cols() / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int64_t i = 0; i < heads; ++i) {
      Tensor qi = slice_cols(qt, i * dh, (i + 1) * dh);
      Tensor ki = slice_cols(kt, i * dh, (i + 1) * dh);
      out.a_t.push_back(softmax_rows(scale(matmul_nt(qi, ki), inv_sqrt_dh)));
    }
    out.z3 = encoder_layer_post(
        x, attention_mix(out.a_t, s.values, student.attn.wo, student.attn.bo),
        student, scheme);
  }
  return out;
}

namespace {

double max_abs(const Tensor& t) {
  double m = 0.0;
  for (double v : t.span()) m = std::max(m, std::fabs(v));
  return m;
}

double max_abs_residual(const Tensor& total, const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < total.numel(); ++i)
    m = std::max(m, std::fabs(total.data()[i] - a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

bool SharedGradReport::within(double tol) const {
  for (const SharedGradChannel* c : {&wq, &wk, &wv})
    if (c->residual > tol || c->forbidden > tol) return false;
  return true;
}

SharedGradReport shared_gradient_decomposition(Tape& tape, const Tensor& l1,
                                               const Tensor& l2,
                                               const Tensor& l3,
                                               const Tensor& wq,
                                               const Tensor& wk,
                                               const Tensor& wv) {
  Tensor total = add(add(l1, l2), l3);
  struct Grabs {
    Tensor q, k, v;
  };
  auto grab = [&](const Tensor& loss) {
    tape.backward(loss);
    return Grabs{tape.grad(wq), tape.grad(wk), tape.grad(wv)};
  };
  Grabs all = grab(total);
  Grabs g1 = grab(l1);
  Grabs g2 = grab(l2);
  Grabs g3 = grab(l3);

  SharedGradReport r;
  // student map (q,k) feeds branches 1 and 2; branch 3 runs the teacher map
  r.wq = {max_abs_residual(all.q, g1.q, g2.q), max_abs(g3.q),
          std::min(max_abs(g1.q), max_abs(g2.q))};
  r.wk = {max_abs_residual(all.k, g1.k, g2.k), max_abs(g3.k),
          std::min(max_abs(g1.k), max_abs(g2.k))};
  // student values feed branches 1 and 3; branch 2 runs the teacher values
  r.wv = {max_abs_residual(all.v, g1.v, g3.v), max_abs(g2.v),
          std::min(max_abs(g1.v), max_abs(g3.v))};
  return r;
}

}  // namespace ks
