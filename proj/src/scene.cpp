// SPDX-License-Identifier: Apache-2.0

#include "scene.hpp"

#include <cstring>

#include "common.hpp"

namespace ks {
namespace {

constexpr uint64_t kSceneTag = 0x5ce9e5;
constexpr int64_t kMinSide = 6;
constexpr int64_t kMaxSide = 16;
constexpr double kNoiseSigma = 0.1;
// Foreground pixels are heavily textured (sigma 0.2) and the class
// intensities sit close together, so a single pixel or 4x4 patch carries
// weak class evidence (~2 sigma between neighbouring classes per patch);
// reliable classification needs pooling over the object's full extent.
// Presence detection stays easy: the object MEAN is far above the zero-mean
// background, so boxes and matching ignite regardless of class difficulty.
constexpr double kFgNoiseSigma = 0.2;
constexpr double kClassBase = 0.45;
constexpr double kClassStep = 0.10;

int64_t uniform_int(std::mt19937_64& rng, int64_t lo, int64_t hi) {
  return lo + static_cast<int64_t>(uniform01(rng) * static_cast<double>(hi - lo + 1));
}

double rect_iou(const GtBox& a, const GtBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return inter / ua;
}

}  // namespace

SceneSpec gen_scene(uint64_t seed) {
  std::mt19937_64 rng(mix_seed(kSceneTag, seed));
  SceneSpec scene;
  scene.image = Tensor::zeros({kSceneSize, kSceneSize});
  for (double& v : scene.image.span()) v = kNoiseSigma * rand_normal(rng);

  const int64_t count = uniform_int(rng, 0, 4);
  for (int64_t k = 0; k < count; ++k) {
    GtBox box{};
    // Resample heavily overlapping boxes a few times; keep the last draw
    // regardless so the scene stays a total function of the seed.
    for (int attempt = 0; attempt < 20; ++attempt) {
      const int64_t w = uniform_int(rng, kMinSide, kMaxSide);
      const int64_t h = uniform_int(rng, kMinSide, kMaxSide);
      const int64_t x1 = uniform_int(rng, 0, kSceneSize - w);
      const int64_t y1 = uniform_int(rng, 0, kSceneSize - h);
      const int cls = static_cast<int>(uniform_int(rng, 0, kSceneClasses - 1));
      box = GtBox{static_cast<double>(x1), static_cast<double>(y1),
                  static_cast<double>(x1 + w), static_cast<double>(y1 + h), cls};
      bool crowded = false;
      for (const GtBox& prev : scene.gt)
        if (rect_iou(box, prev) > 0.3) crowded = true;
      if (!crowded) break;
    }
    scene.gt.push_back(box);
  }
  // Paint in draw order; the mean intensity encodes the class and foreground
  // pixels carry strong texture noise on top of it.
  for (const GtBox& b : scene.gt) {
    const double intensity = kClassBase + kClassStep * b.class_id;
    for (int64_t i = static_cast<int64_t>(b.y1); i < static_cast<int64_t>(b.y2); ++i)
      for (int64_t j = static_cast<int64_t>(b.x1); j < static_cast<int64_t>(b.x2); ++j)
        scene.image.at(i, j) = intensity + kFgNoiseSigma * rand_normal(rng);
  }
  return scene;
}

uint64_t scene_digest(const SceneSpec& scene) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (double v : scene.image.span()) mix(&v, sizeof v);
  for (const GtBox& b : scene.gt) {
    mix(&b.x1, sizeof b.x1);
    mix(&b.y1, sizeof b.y1);
    mix(&b.x2, sizeof b.x2);
    mix(&b.y2, sizeof b.y2);
    mix(&b.class_id, sizeof b.class_id);
  }
  return h;
}

}  // namespace ks
