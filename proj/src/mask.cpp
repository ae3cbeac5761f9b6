// SPDX-License-Identifier: Apache-2.0

#include "mask.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "common.hpp"

namespace ks {

Tensor rasterize_boxes(const std::vector<GtBox>& boxes, int64_t h0,
                       int64_t w0) {
  for (const GtBox& b : boxes) {
    if (!(b.x1 >= 0 && b.x1 < b.x2 && b.x2 <= static_cast<double>(w0)) ||
        !(b.y1 >= 0 && b.y1 < b.y2 && b.y2 <= static_cast<double>(h0)))
      fail(ErrorKind::kContract,
           "rasterize_boxes: box (" + std::to_string(b.x1) + "," +
               std::to_string(b.y1) + "," + std::to_string(b.x2) + "," +
               std::to_string(b.y2) + ") outside " + std::to_string(w0) + "x" +
               std::to_string(h0) + " image");
  }
  Tensor out = Tensor::zeros({h0, w0});
  for (int64_t i = 0; i < h0; ++i) {
    const double cy = static_cast<double>(i) + 0.5;
    for (int64_t j = 0; j < w0; ++j) {
      const double cx = static_cast<double>(j) + 0.5;
      for (const GtBox& b : boxes) {
        if (cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2) {
          out.at(i, j) = 1.0;
          break;
        }
      }
    }
  }
  return out;
}

Tensor bilinear_resize(const Tensor& mask, int64_t h_feat, int64_t w_feat) {
  if (h_feat < 1 || w_feat < 1)
    fail(ErrorKind::kUsage, "bilinear_resize: target dims must be positive");
  const int64_t h0 = mask.rows(), w0 = mask.cols();
  Tensor out({h_feat, w_feat});
  for (int64_t r = 0; r < h_feat; ++r) {
    double sy = (static_cast<double>(r) + 0.5) * static_cast<double>(h0) /
                    static_cast<double>(h_feat) -
                0.5;
    sy = std::clamp(sy, 0.0, static_cast<double>(h0 - 1));
    const int64_t y0 = static_cast<int64_t>(std::floor(sy));
    const int64_t y1 = std::min(y0 + 1, h0 - 1);
    const double fy = sy - static_cast<double>(y0);
    for (int64_t c = 0; c < w_feat; ++c) {
      double sx = (static_cast<double>(c) + 0.5) * static_cast<double>(w0) /
                      static_cast<double>(w_feat) -
                  0.5;
      sx = std::clamp(sx, 0.0, static_cast<double>(w0 - 1));
      const int64_t x0 = static_cast<int64_t>(std::floor(sx));
      const int64_t x1 = std::min(x0 + 1, w0 - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top =
          mask.at(y0, x0) * (1.0 - fx) + mask.at(y0, x1) * fx;
      const double bot =
          mask.at(y1, x0) * (1.0 - fx) + mask.at(y1, x1) * fx;
      out.at(r, c) = top * (1.0 - fy) + bot * fy;
    }
  }
  return out;
}

FgBgMask binarize_flatten(const Tensor& mask, std::optional<double> theta) {
  if (theta && !(*theta > 0.0 && *theta < 1.0))
    fail(ErrorKind::kUsage, "binarize_flatten: theta must lie in (0,1)");
  FgBgMask out;
  out.h_feat = mask.rows();
  out.w_feat = mask.cols();
  out.m = Tensor({mask.rows() * mask.cols(), 1},
                 {mask.data(), mask.data() + mask.numel()});
  if (theta)
    for (double& v : out.m.span()) v = v > *theta ? 1.0 : 0.0;
  return out;
}

Tensor unflatten(const FgBgMask& mask) {
  return Tensor({mask.h_feat, mask.w_feat},
                {mask.m.data(), mask.m.data() + mask.m.numel()});
}

FgBgMask make_fg_bg_mask(const std::vector<GtBox>& boxes, int64_t h0,
                         int64_t w0, int64_t h_feat, int64_t w_feat,
                         std::optional<double> theta) {
  return binarize_flatten(
      bilinear_resize(rasterize_boxes(boxes, h0, w0), h_feat, w_feat), theta);
}

}  // namespace ks
