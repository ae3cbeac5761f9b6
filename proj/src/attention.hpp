// SPDX-License-Identifier: Apache-2.0
//
// Scaled dot-product attention, multi-head attention and the encoder layer.
//
// The layer is split into two halves so callers can substitute per-head
// attention maps or value projections between the projection step and the
// output mix: the knowledge-sharing triple attention reuses exactly this seam.

#pragma once

#include <vector>

#include "tensor.hpp"

namespace ks {

// Placement of layer norm around the residual adds.
//   kBranchLn:  Z' = X + LN(MHA),  Z = Z' + LN(FFN(Z'))
//   kPostAddLn: Z' = LN(X + MHA),  Z = LN(Z' + FFN(Z'))
enum class NormScheme { kBranchLn, kPostAddLn };

NormScheme norm_scheme_from_string(const std::string& s);
std::string to_string(NormScheme s);

struct QkvParams {
  Tensor wq, bq, wk, bk, wv, bv;  // each w is [d,d], each b is [d]
};

struct AttentionParams {
  QkvParams qkv;
  Tensor wo, bo;
  int64_t heads = 1;
};

struct LayerNormParams {
  Tensor gamma, beta;
};

struct FfnParams {
  Tensor w1, b1, w2, b2;  // d -> d_ff -> d
};

struct EncoderLayerParams {
  AttentionParams attn;
  LayerNormParams ln_attn, ln_ffn;
  FfnParams ffn;
};

struct SdpaResult {
  Tensor attention_map;  // [L_q, L_k], rows sum to 1
  Tensor output;         // [L_q, d_v]
};

// softmax(q k^T / sqrt(d_k)) v; both the map and the mixed output are
// returned so callers can reuse either.
SdpaResult scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                        const Tensor& v);

// Fixed 2-D sinusoidal positional encoding for an h_feat x w_feat token grid,
// flattened row-major. First d/2 channels encode the row index, the rest the
// column index, sin/cos interleaved at geometric frequencies. d % 4 == 0.
Tensor sinusoidal_pe(int64_t h_feat, int64_t w_feat, int64_t d);

// Per-head attention maps and per-head value projections for one projection
// set. PE is added for queries and keys, not for values.
struct AttentionHeads {
  std::vector<Tensor> maps;    // [L_q, L_k] each
  std::vector<Tensor> values;  // [L_k, d/h] each
};

AttentionHeads attention_heads(const Tensor& x_q, const Tensor& x_kv,
                               const Tensor& pe_q, const Tensor& pe_kv,
                               const QkvParams& p, int64_t heads);

// Same split/softmax step on already-projected q/k/v.
AttentionHeads heads_from_projections(const Tensor& q, const Tensor& k,
                                      const Tensor& v, int64_t heads);

// Concat(head_1, ..., head_h) W^O + b^O with head_i = maps[i] values[i].
Tensor attention_mix(const std::vector<Tensor>& maps,
                     const std::vector<Tensor>& values, const Tensor& wo,
                     const Tensor& bo);

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv,
                            const Tensor& pe_q, const Tensor& pe_kv,
                            const AttentionParams& p);

Tensor ffn_forward(const Tensor& x, const FfnParams& p);

// Residual / layer-norm / FFN tail applied to one attention branch output.
Tensor encoder_layer_post(const Tensor& x, const Tensor& attn_out,
                          const EncoderLayerParams& p, NormScheme scheme);

// Substitute the given per-head maps and/or values before the output mix.
struct AttentionOverride {
  const std::vector<Tensor>* maps = nullptr;
  const std::vector<Tensor>* values = nullptr;
};

Tensor encoder_layer_forward(const Tensor& x, const Tensor& pe,
                             const EncoderLayerParams& p,
                             NormScheme scheme = NormScheme::kBranchLn,
                             const AttentionOverride* override_heads = nullptr);

}  // namespace ks
