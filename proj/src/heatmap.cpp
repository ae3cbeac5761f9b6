// SPDX-License-Identifier: Apache-2.0

#include "heatmap.hpp"

#include <cmath>
#include <fstream>

#include "common.hpp"
#include "smlp.hpp"
#include "triple_attention.hpp"

namespace ks {

HeatmapSource heatmap_source_from_string(const std::string& name) {
  if (name == "student") return HeatmapSource::kStudent;
  if (name == "teacher") return HeatmapSource::kTeacher;
  fail(ErrorKind::kUsage, "unknown heatmap source: " + name);
}

Tensor attention_heatmap(ModelParams& params, const SceneSpec& scene, int64_t layer,
                         int64_t head, int64_t row, HeatmapSource source) {
  const ModelConfig& c = params.config;
  if (layer < 0 || layer >= c.enc_layers)
    fail(ErrorKind::kUsage, "encoder layer out of range: " + std::to_string(layer));
  if (head < 0 || head >= c.heads)
    fail(ErrorKind::kUsage, "head out of range: " + std::to_string(head));

  SceneTokens tok = patch_backbone(scene.image, params);
  Tensor pe = sinusoidal_pe(tok.h_feat, tok.w_feat, c.d);
  if (row >= tok.x.rows())
    fail(ErrorKind::kUsage, "query row out of range: " + std::to_string(row));

  Tensor x = tok.x;
  for (int64_t i = 0; i < layer; ++i)
    x = encoder_layer_forward(x, pe, params.encoder[static_cast<size_t>(i)], c.norm);

  const EncoderLayerParams& lp = params.encoder[static_cast<size_t>(layer)];
  std::vector<Tensor> maps;
  if (source == HeatmapSource::kStudent) {
    maps = attention_heads(x, x, pe, pe, lp.attn.qkv, c.heads).maps;
  } else {
    if (layer != c.enc_layers - 1)
      fail(ErrorKind::kUsage, "teacher maps exist only at the last encoder layer");
    if (!params.has_teacher) fail(ErrorKind::kUsage, "checkpoint has no teacher params");
    FgBgMask mask = make_fg_bg_mask(scene.gt, scene.image.rows(), scene.image.cols(),
                                    tok.h_feat, tok.w_feat, c.theta);
    Tensor x_t = smlp(x, mask.m, params.teacher.smlp);
    TeacherProjections tp = teacher_projections(x_t, pe, params.teacher.attn);
    maps = heads_from_projections(tp.q_t, tp.k_t, tp.v_t, c.heads).maps;
  }

  const Tensor& map = maps[static_cast<size_t>(head)];
  const int64_t hw = map.cols();
  Tensor grid = Tensor::zeros({tok.h_feat, tok.w_feat});
  for (int64_t t = 0; t < hw; ++t) {
    double v;
    if (row >= 0) {
      v = map.at(row, t);
    } else {
      v = 0.0;
      for (int64_t q = 0; q < map.rows(); ++q) v += map.at(q, t);
      v /= static_cast<double>(map.rows());
    }
    grid.at(t / tok.w_feat, t % tok.w_feat) = v;
  }
  return grid;
}

void write_pgm(const Tensor& image, const std::string& path) {
  const int64_t h = image.rows(), w = image.cols();
  double mn = image.at(0, 0), mx = image.at(0, 0);
  for (double v : image.span()) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::kIo, "cannot write " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      int byte = 128;  // constant image -> mid-gray
      if (mx > mn)
        byte = static_cast<int>(std::lround(255.0 * (image.at(i, j) - mn) / (mx - mn)));
      os.put(static_cast<char>(byte));
    }
  if (!os) fail(ErrorKind::kIo, "short write to " + path);
}

void export_attention_heatmap(ModelParams& params, const SceneSpec& scene, int64_t layer,
                              int64_t head, int64_t row, HeatmapSource source,
                              const std::string& path) {
  write_pgm(attention_heatmap(params, scene, layer, head, row, source), path);
}

}  // namespace ks
