// SPDX-License-Identifier: Apache-2.0
//
// Foreground/background mask pipeline: rasterize ground-truth boxes at image
// resolution, bilinearly resize to the token grid, threshold, flatten.

#pragma once

#include <optional>
#include <vector>

#include "tensor.hpp"

namespace ks {

struct GtBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // image-space corners, x2/y2 exclusive edge
  int class_id = 0;
};

struct FgBgMask {
  Tensor m;  // [h_feat*w_feat, 1], row-major over the grid
  int64_t h_feat = 0, w_feat = 0;
};

// Pixel (i,j) is foreground iff its center (j+0.5, i+0.5) falls strictly
// inside any box. Boxes must satisfy 0 <= x1 < x2 <= w0 and likewise for y.
Tensor rasterize_boxes(const std::vector<GtBox>& boxes, int64_t h0, int64_t w0);

// Align-corners-false bilinear sampling; up- or downscale.
Tensor bilinear_resize(const Tensor& mask, int64_t h_feat, int64_t w_feat);

// Entries become 1 when strictly above theta; theta == nullopt keeps the
// fractional values and only flattens.
FgBgMask binarize_flatten(const Tensor& mask, std::optional<double> theta);

Tensor unflatten(const FgBgMask& mask);  // back to [h_feat, w_feat]

// rasterize -> resize -> binarize_flatten in one call.
FgBgMask make_fg_bg_mask(const std::vector<GtBox>& boxes, int64_t h0,
                         int64_t w0, int64_t h_feat, int64_t w_feat,
                         std::optional<double> theta);

}  // namespace ks
