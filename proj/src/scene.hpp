// SPDX-License-Identifier: Apache-2.0
//
// Synthetic detection scenes: up to four filled rectangles of three
// intensity classes on a noisy 32x32 canvas.  Everything is a pure
// function of the seed.
#pragma once

#include <cstdint>
#include <vector>

#include "mask.hpp"
#include "tensor.hpp"

namespace ks {

struct SceneSpec {
  Tensor image;             // [H0, W0]
  std::vector<GtBox> gt;    // 0..4 boxes, class_id in {0,1,2}
};

constexpr int64_t kSceneSize = 32;
constexpr int kSceneClasses = 3;

SceneSpec gen_scene(uint64_t seed);

// FNV-1a over the image bytes and the box fields; regression anchor.
uint64_t scene_digest(const SceneSpec& scene);

}  // namespace ks
