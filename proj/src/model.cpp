// SPDX-License-Identifier: Apache-2.0

#include "model.hpp"

#include <cmath>
#include <string>

#include "common.hpp"
#include "smlp.hpp"

namespace ks {

void validate_config(const ModelConfig& c) {
  if (c.image_size < 1 || c.patch < 1 || c.image_size % c.patch != 0)
    fail(ErrorKind::kUsage, "config: image size must be a multiple of patch");
  if (c.d < 4 || c.d % 4 != 0)
    fail(ErrorKind::kUsage, "config: model width must be a multiple of 4");
  if (c.heads < 1 || c.d % c.heads != 0)
    fail(ErrorKind::kUsage, "config: width must divide into heads");
  if (c.d_ff < 1 || c.enc_layers < 1 || c.dec_layers < 1 || c.queries < 1 ||
      c.classes < 1)
    fail(ErrorKind::kUsage, "config: layer/query/class counts must be >= 1");
  if (c.theta && !(*c.theta > 0.0 && *c.theta < 1.0))
    fail(ErrorKind::kUsage, "config: theta must lie in (0,1)");
}

namespace {

Tensor xavier(std::mt19937_64& rng, int64_t fan_in, int64_t fan_out) {
  Tensor t({fan_in, fan_out});
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.span()) v = s * (2.0 * uniform01(rng) - 1.0);
  return t;
}

AttentionParams alloc_attn(int64_t d, int64_t heads) {
  return {{Tensor::zeros({d, d}), Tensor::zeros({d}), Tensor::zeros({d, d}),
           Tensor::zeros({d}), Tensor::zeros({d, d}), Tensor::zeros({d})},
          Tensor::zeros({d, d}),
          Tensor::zeros({d}),
          heads};
}

LayerNormParams alloc_ln(int64_t d) {
  return {Tensor::zeros({d}), Tensor::zeros({d})};
}

void init_attn(AttentionParams& a, std::mt19937_64& rng, int64_t d) {
  a.qkv.wq = xavier(rng, d, d);
  a.qkv.wk = xavier(rng, d, d);
  a.qkv.wv = xavier(rng, d, d);
  a.wo = xavier(rng, d, d);
}

void init_ln(LayerNormParams& ln) {
  for (double& v : ln.gamma.span()) v = 1.0;
}

}  // namespace

ModelParams allocate_model(const ModelConfig& c) {
  validate_config(c);
  ModelParams p;
  p.config = c;
  const int64_t d = c.d, pp = c.patch * c.patch;
  p.patch_w = Tensor::zeros({pp, d});
  p.patch_b = Tensor::zeros({d});
  p.query_embed = Tensor::zeros({c.queries, d});
  for (int64_t i = 0; i < c.enc_layers; ++i)
    p.encoder.push_back({alloc_attn(d, c.heads), alloc_ln(d), alloc_ln(d),
                         {Tensor::zeros({d, c.d_ff}), Tensor::zeros({c.d_ff}),
                          Tensor::zeros({c.d_ff, d}), Tensor::zeros({d})}});
  for (int64_t i = 0; i < c.dec_layers; ++i)
    p.decoder.push_back({alloc_attn(d, c.heads),
                         alloc_ln(d),
                         alloc_attn(d, c.heads),
                         alloc_ln(d),
                         {Tensor::zeros({d, c.d_ff}), Tensor::zeros({c.d_ff}),
                          Tensor::zeros({c.d_ff, d}), Tensor::zeros({d})},
                         alloc_ln(d)});
  p.head.w_cls = Tensor::zeros({d, c.classes + 1});
  p.head.b_cls = Tensor::zeros({c.classes + 1});
  p.head.w1 = Tensor::zeros({d, d});
  p.head.b1 = Tensor::zeros({d});
  p.head.w2 = Tensor::zeros({d, d});
  p.head.b2 = Tensor::zeros({d});
  p.head.w3 = Tensor::zeros({d, 4});
  p.head.b3 = Tensor::zeros({4});
  p.teacher.smlp = {Tensor::zeros({d, d}), Tensor::zeros({d})};
  p.teacher.attn = {Tensor::zeros({d, d}), Tensor::zeros({d}),
                    Tensor::zeros({d, d}), Tensor::zeros({d}),
                    Tensor::zeros({d, d}), Tensor::zeros({d})};
  p.has_teacher = true;
  return p;
}

ModelParams init_model(const ModelConfig& c, uint64_t seed) {
  ModelParams p = allocate_model(c);
  std::mt19937_64 rng(mix_seed(0x1417u, seed));
  const int64_t d = c.d;
  // Scaled by sqrt(d) (the usual embedding scaling) so patch tokens enter at
  // unit magnitude; otherwise the unit-variance normalized attention branches
  // swamp the raw patch identity early in training.
  p.patch_w = xavier(rng, c.patch * c.patch, d);
  for (double& v : p.patch_w.span()) v *= std::sqrt(static_cast<double>(d));
  for (double& v : p.query_embed.span()) v = rand_normal(rng);
  for (auto& layer : p.encoder) {
    init_attn(layer.attn, rng, d);
    init_ln(layer.ln_attn);
    init_ln(layer.ln_ffn);
    layer.ffn.w1 = xavier(rng, d, c.d_ff);
    layer.ffn.w2 = xavier(rng, c.d_ff, d);
  }
  for (auto& layer : p.decoder) {
    init_attn(layer.self_attn, rng, d);
    init_attn(layer.cross_attn, rng, d);
    init_ln(layer.ln_self);
    init_ln(layer.ln_cross);
    init_ln(layer.ln_ffn);
    layer.ffn.w1 = xavier(rng, d, c.d_ff);
    layer.ffn.w2 = xavier(rng, c.d_ff, d);
  }
  p.head.w_cls = xavier(rng, d, c.classes + 1);
  p.head.w1 = xavier(rng, d, d);
  p.head.w2 = xavier(rng, d, d);
  p.head.w3 = xavier(rng, d, 4);
  // Foreground tokens start amplified (x2) and the teacher's query/key
  // projections start tied, so the teacher attention begins as a
  // locality-times-similarity kernel over mask-amplified tokens: nearby
  // same-object foreground tokens pool together from the first step.  A plain
  // noisy copy of the student leaves the teacher statistically equal to the
  // student for most of a short training budget.
  p.teacher.smlp = smlp_init(d, rng, 2.0);
  p.teacher.attn = teacher_attention_similarity_init(d, rng);
  return p;
}

namespace {

void visit_attn(const std::string& prefix, AttentionParams& a,
                const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + "/wq", a.qkv.wq);
  fn(prefix + "/bq", a.qkv.bq);
  fn(prefix + "/wk", a.qkv.wk);
  fn(prefix + "/bk", a.qkv.bk);
  fn(prefix + "/wv", a.qkv.wv);
  fn(prefix + "/bv", a.qkv.bv);
  fn(prefix + "/wo", a.wo);
  fn(prefix + "/bo", a.bo);
}

void visit_ln(const std::string& prefix, LayerNormParams& ln,
              const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + "/gamma", ln.gamma);
  fn(prefix + "/beta", ln.beta);
}

void visit_ffn(const std::string& prefix, FfnParams& f,
               const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + "/w1", f.w1);
  fn(prefix + "/b1", f.b1);
  fn(prefix + "/w2", f.w2);
  fn(prefix + "/b2", f.b2);
}

}  // namespace

void visit_params(ModelParams& p,
                  const std::function<void(const std::string&, Tensor&)>& fn,
                  bool include_teacher) {
  fn("backbone/w", p.patch_w);
  fn("backbone/b", p.patch_b);
  fn("query_embed", p.query_embed);
  for (size_t i = 0; i < p.encoder.size(); ++i) {
    const std::string base = "enc" + std::to_string(i);
    visit_attn(base + "/attn", p.encoder[i].attn, fn);
    visit_ln(base + "/ln_attn", p.encoder[i].ln_attn, fn);
    visit_ln(base + "/ln_ffn", p.encoder[i].ln_ffn, fn);
    visit_ffn(base + "/ffn", p.encoder[i].ffn, fn);
  }
  for (size_t i = 0; i < p.decoder.size(); ++i) {
    const std::string base = "dec" + std::to_string(i);
    visit_attn(base + "/self", p.decoder[i].self_attn, fn);
    visit_ln(base + "/ln_self", p.decoder[i].ln_self, fn);
    visit_attn(base + "/cross", p.decoder[i].cross_attn, fn);
    visit_ln(base + "/ln_cross", p.decoder[i].ln_cross, fn);
    visit_ffn(base + "/ffn", p.decoder[i].ffn, fn);
    visit_ln(base + "/ln_ffn", p.decoder[i].ln_ffn, fn);
  }
  fn("head/cls/w", p.head.w_cls);
  fn("head/cls/b", p.head.b_cls);
  fn("head/box/w1", p.head.w1);
  fn("head/box/b1", p.head.b1);
  fn("head/box/w2", p.head.w2);
  fn("head/box/b2", p.head.b2);
  fn("head/box/w3", p.head.w3);
  fn("head/box/b3", p.head.b3);
  if (!include_teacher || !p.has_teacher) return;
  fn("teacher/smlp/w", p.teacher.smlp.w_x);
  fn("teacher/smlp/b", p.teacher.smlp.b_x);
  fn("teacher/attn/wq", p.teacher.attn.w_qt);
  fn("teacher/attn/bq", p.teacher.attn.b_qt);
  fn("teacher/attn/wk", p.teacher.attn.w_kt);
  fn("teacher/attn/bk", p.teacher.attn.b_kt);
  fn("teacher/attn/wv", p.teacher.attn.w_vt);
  fn("teacher/attn/bv", p.teacher.attn.b_vt);
}

void strip_teacher(ModelParams& p) {
  p.teacher = TeacherParams{};
  p.has_teacher = false;
}

SceneTokens patch_backbone(const Tensor& image, const ModelParams& p) {
  const ModelConfig& c = p.config;
  if (image.rows() != c.image_size || image.cols() != c.image_size)
    fail(ErrorKind::kShape,
         "backbone: image must be " + std::to_string(c.image_size) + "x" +
             std::to_string(c.image_size));
  const int64_t g = c.grid(), ps = c.patch;
  Tensor patches({g * g, ps * ps});
  for (int64_t ty = 0; ty < g; ++ty)
    for (int64_t tx = 0; tx < g; ++tx) {
      double* row = patches.data() + (ty * g + tx) * ps * ps;
      for (int64_t py = 0; py < ps; ++py)
        for (int64_t px = 0; px < ps; ++px)
          row[py * ps + px] = image.at(ty * ps + py, tx * ps + px);
    }
  return {linear(patches, p.patch_w, p.patch_b), g, g};
}

EncoderResult encoder_forward(const SceneTokens& tokens, const FgBgMask* mask,
                              const ModelParams& p, AttentionMode mode,
                              const Tensor& pe) {
  if (mode != AttentionMode::kInfer && !p.has_teacher)
    fail(ErrorKind::kContract,
         "encoder: training modes need teacher parameters");
  Tensor x = tokens.x;
  for (size_t i = 0; i + 1 < p.encoder.size(); ++i)
    x = encoder_layer_forward(x, pe, p.encoder[i], p.config.norm);
  TripleOutputs t = triple_attention_forward(
      x, mask, pe, p.encoder.back(),
      mode == AttentionMode::kInfer ? nullptr : &p.teacher, mode,
      p.config.norm);
  return {t.z1, t.z2, t.z3, t.a1, t.a_t};
}

namespace {

Tensor residual_block(const Tensor& y, const Tensor& branch,
                      const LayerNormParams& ln, NormScheme scheme) {
  if (scheme == NormScheme::kBranchLn)
    return add(y, layer_norm(branch, ln.gamma, ln.beta));
  return layer_norm(add(y, branch), ln.gamma, ln.beta);
}

}  // namespace

Tensor decoder_forward(const Tensor& memory, const ModelParams& p,
                       const Tensor& mem_pe) {
  const Tensor& qpe = p.query_embed;
  Tensor y = Tensor::zeros({p.config.queries, p.config.d});
  for (const DecoderLayerParams& layer : p.decoder) {
    Tensor self_out = multi_head_attention(y, y, qpe, qpe, layer.self_attn);
    y = residual_block(y, self_out, layer.ln_self, p.config.norm);
    Tensor cross_out =
        multi_head_attention(y, memory, qpe, mem_pe, layer.cross_attn);
    y = residual_block(y, cross_out, layer.ln_cross, p.config.norm);
    y = residual_block(y, ffn_forward(y, layer.ffn), layer.ln_ffn,
                       p.config.norm);
  }
  return y;
}

DetectionSet detection_head(const Tensor& f_d, const HeadParams& head) {
  Tensor hidden = relu(linear(f_d, head.w1, head.b1));
  hidden = relu(linear(hidden, head.w2, head.b2));
  return {linear(f_d, head.w_cls, head.b_cls),
          sigmoid(linear(hidden, head.w3, head.b3))};
}

PredictOutputs predict(const Tensor& image, const std::vector<GtBox>* gt_boxes,
                       const ModelParams& p, AttentionMode mode) {
  SceneTokens tokens = patch_backbone(image, p);
  Tensor pe = sinusoidal_pe(tokens.h_feat, tokens.w_feat, p.config.d);

  FgBgMask mask;
  const FgBgMask* mask_ptr = nullptr;
  if (mode != AttentionMode::kInfer) {
    if (gt_boxes == nullptr)
      fail(ErrorKind::kContract,
           "predict: training modes need ground-truth boxes for the mask");
    mask = make_fg_bg_mask(*gt_boxes, p.config.image_size, p.config.image_size,
                           tokens.h_feat, tokens.w_feat, p.config.theta);
    mask_ptr = &mask;
  }

  PredictOutputs out;
  out.enc = encoder_forward(tokens, mask_ptr, p, mode, pe);
  auto run_stream = [&](const Tensor& z, int id) {
    out.streams.push_back(detection_head(decoder_forward(z, p, pe), p.head));
    out.stream_ids.push_back(id);
  };
  run_stream(out.enc.z1, 1);
  if (out.enc.z2.defined()) run_stream(out.enc.z2, 2);
  if (out.enc.z3.defined()) run_stream(out.enc.z3, 3);
  return out;
}

}  // namespace ks
