// SPDX-License-Identifier: Apache-2.0

#include "attention.hpp"

#include <cmath>
#include <string>

#include "common.hpp"

namespace ks {

NormScheme norm_scheme_from_string(const std::string& s) {
  if (s == "paper_eq2") return NormScheme::kBranchLn;
  if (s == "post_add") return NormScheme::kPostAddLn;
  fail(ErrorKind::kUsage, "unknown norm_scheme '" + s +
                              "' (expected paper_eq2 or post_add)");
}

std::string to_string(NormScheme s) {
  return s == NormScheme::kBranchLn ? "paper_eq2" : "post_add";
}

SdpaResult scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                        const Tensor& v) {
  if (q.cols() != k.cols())
    fail(ErrorKind::kShape, "attention: q/k width mismatch");
  if (k.rows() != v.rows())
    fail(ErrorKind::kShape, "attention: k/v length mismatch");
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor logits = scale(matmul_nt(q, k), inv_sqrt_dk);
  Tensor a = softmax_rows(logits);
  return {a, matmul(a, v)};
}

Tensor sinusoidal_pe(int64_t h_feat, int64_t w_feat, int64_t d) {
  if (d % 4 != 0)
    fail(ErrorKind::kUsage,
         "sinusoidal_pe: model width must be divisible by 4, got " +
             std::to_string(d));
  const int64_t half = d / 2;
  Tensor pe = Tensor::zeros({h_feat * w_feat, d});
  double* out = pe.data();
  for (int64_t y = 0; y < h_feat; ++y) {
    for (int64_t x = 0; x < w_feat; ++x) {
      double* row = out + (y * w_feat + x) * d;
      for (int64_t t = 0; t < half / 2; ++t) {
        const double omega =
            std::pow(10000.0, -2.0 * static_cast<double>(t) /
                                  static_cast<double>(half));
        row[2 * t] = std::sin(static_cast<double>(y) * omega);
        row[2 * t + 1] = std::cos(static_cast<double>(y) * omega);
        row[half + 2 * t] = std::sin(static_cast<double>(x) * omega);
        row[half + 2 * t + 1] = std::cos(static_cast<double>(x) * omega);
      }
    }
  }
  return pe;
}

AttentionHeads heads_from_projections(const Tensor& q, const Tensor& k,
                                      const Tensor& v, int64_t heads) {
  const int64_t d = q.cols();
  if (heads < 1 || d % heads != 0)
    fail(ErrorKind::kUsage, "attention: width " + std::to_string(d) +
                                " not divisible by " + std::to_string(heads) +
                                " heads");
  AttentionHeads out;
  const int64_t dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int64_t i = 0; i < heads; ++i) {
    Tensor qi = slice_cols(q, i * dh, (i + 1) * dh);
    Tensor ki = slice_cols(k, i * dh, (i + 1) * dh);
    out.maps.push_back(softmax_rows(scale(matmul_nt(qi, ki), inv_sqrt_dh)));
    out.values.push_back(slice_cols(v, i * dh, (i + 1) * dh));
  }
  return out;
}

AttentionHeads attention_heads(const Tensor& x_q, const Tensor& x_kv,
                               const Tensor& pe_q, const Tensor& pe_kv,
                               const QkvParams& p, int64_t heads) {
  Tensor q = linear(add(x_q, pe_q), p.wq, p.bq);
  Tensor k = linear(add(x_kv, pe_kv), p.wk, p.bk);
  Tensor v = linear(x_kv, p.wv, p.bv);  // values never carry PE
  return heads_from_projections(q, k, v, heads);
}

Tensor attention_mix(const std::vector<Tensor>& maps,
                     const std::vector<Tensor>& values, const Tensor& wo,
                     const Tensor& bo) {
  if (maps.size() != values.size() || maps.empty())
    fail(ErrorKind::kShape, "attention: head count mismatch in mix");
  std::vector<Tensor> heads;
  heads.reserve(maps.size());
  for (size_t i = 0; i < maps.size(); ++i)
    heads.push_back(matmul(maps[i], values[i]));
  return linear(heads.size() == 1 ? heads[0] : concat_cols(heads), wo, bo);
}

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                            const Tensor& pe_q, const Tensor& pe_kv,
                            const AttentionParams& p) {
  AttentionHeads h = attention_heads(x_q, x_kv, pe_q, pe_kv, p.qkv, p.heads);
  return attention_mix(h.maps, h.values, p.wo, p.bo);
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Tensor encoder_layer_post(const Tensor& x, const Tensor& attn_out,
                          const EncoderLayerParams& p, NormScheme scheme) {
  if (scheme == NormScheme::kBranchLn) {
    Tensor z1 = add(x, layer_norm(attn_out, p.ln_attn.gamma, p.ln_attn.beta));
    return add(z1, layer_norm(ffn_forward(z1, p.ffn), p.ln_ffn.gamma,
                              p.ln_ffn.beta));
  }
  Tensor z1 = layer_norm(add(x, attn_out), p.ln_attn.gamma, p.ln_attn.beta);
  return layer_norm(add(z1, ffn_forward(z1, p.ffn)), p.ln_ffn.gamma,
                    p.ln_ffn.beta);
}

Tensor encoder_layer_forward(const Tensor& x, const Tensor& pe,
                             const EncoderLayerParams& p, NormScheme scheme,
                             const AttentionOverride* override_heads) {
  AttentionHeads h = attention_heads(x, x, pe, pe, p.attn.qkv, p.attn.heads);
  const std::vector<Tensor>* maps = &h.maps;
  const std::vector<Tensor>* values = &h.values;
  if (override_heads != nullptr) {
    if (override_heads->maps != nullptr) maps = override_heads->maps;
    if (override_heads->values != nullptr) values = override_heads->values;
  }
  Tensor attn_out = attention_mix(*maps, *values, p.attn.wo, p.attn.bo);
  return encoder_layer_post(x, attn_out, p, scheme);
}

}  // namespace ks
