// SPDX-License-Identifier: Apache-2.0
//
// Toy detection transformer: patch backbone -> encoder stack whose last
// layer is the knowledge-sharing triple attention -> query decoder ->
// classification/box head. Teacher parameters are carried alongside the
// student model and can be stripped without changing inference output.

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "attention.hpp"
#include "mask.hpp"
#include "matching.hpp"
#include "tensor.hpp"
#include "triple_attention.hpp"

namespace ks {

struct ModelConfig {
  int64_t image_size = 32;  // square grayscale canvas
  int64_t patch = 4;
  int64_t d = 64;
  int64_t heads = 4;
  int64_t d_ff = 256;
  int64_t enc_layers = 3;
  int64_t dec_layers = 2;
  int64_t queries = 10;
  int64_t classes = 3;  // real classes; the head adds a no-object slot
  NormScheme norm = NormScheme::kBranchLn;
  std::optional<double> theta = 0.5;  // mask binarization; nullopt = fractional

  int64_t grid() const { return image_size / patch; }
  int64_t tokens() const { return grid() * grid(); }
};

void validate_config(const ModelConfig& c);

struct DecoderLayerParams {
  AttentionParams self_attn;
  LayerNormParams ln_self;
  AttentionParams cross_attn;
  LayerNormParams ln_cross;
  FfnParams ffn;
  LayerNormParams ln_ffn;
};

struct HeadParams {
  Tensor w_cls, b_cls;            // d -> classes+1
  Tensor w1, b1, w2, b2, w3, b3;  // box MLP d -> d -> d -> 4, sigmoid output
};

struct ModelParams {
  ModelConfig config;
  Tensor patch_w, patch_b;  // [p*p, d], [d]
  Tensor query_embed;       // [N, d], doubles as the query positional term
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  HeadParams head;
  TeacherParams teacher;
  bool has_teacher = false;
};

// Zero-filled tensors of the right shapes (checkpoint loading target).
ModelParams allocate_model(const ModelConfig& c);
// Xavier-style init; teacher starts as a noisy copy of the student's last
// encoder layer projections.
ModelParams init_model(const ModelConfig& c, uint64_t seed);

// Calls fn(name, tensor) over every parameter in a fixed order. Teacher
// entries come last under the "teacher/" prefix.
void visit_params(ModelParams& p,
                  const std::function<void(const std::string&, Tensor&)>& fn,
                  bool include_teacher = true);

void strip_teacher(ModelParams& p);

struct SceneTokens {
  Tensor x;  // [HW, d]
  int64_t h_feat = 0, w_feat = 0;
};

// Non-overlapping patch x patch blocks, flattened row-major and projected.
SceneTokens patch_backbone(const Tensor& image, const ModelParams& p);

struct EncoderResult {
  Tensor z1, z2, z3;             // streams; z2/z3 only in training modes
  std::vector<Tensor> a1, a_t;   // last-layer per-head maps
};

EncoderResult encoder_forward(const SceneTokens& tokens, const FgBgMask* mask,
                              const ModelParams& p, AttentionMode mode,
                              const Tensor& pe);

Tensor decoder_forward(const Tensor& memory, const ModelParams& p,
                       const Tensor& mem_pe);

DetectionSet detection_head(const Tensor& f_d, const HeadParams& head);

struct PredictOutputs {
  std::vector<DetectionSet> streams;
  std::vector<int> stream_ids;  // 1 = student, 2 = (A,V^t), 3 = (A^t,V)
  EncoderResult enc;
};

// gt_boxes feeds only the mask and is required in training modes; the
// inference path never reads it.
PredictOutputs predict(const Tensor& image, const std::vector<GtBox>* gt_boxes,
                       const ModelParams& p, AttentionMode mode);

}  // namespace ks
