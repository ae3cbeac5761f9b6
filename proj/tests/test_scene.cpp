// SPDX-License-Identifier: Apache-2.0

#include "scene.hpp"

#include <cmath>
#include <set>

#include "doctest.h"
#include "test_util.hpp"

TEST_CASE("scenes are a pure function of the seed") {
  for (uint64_t seed : {0ull, 7ull, 123456789ull}) {
    ks::SceneSpec a = ks::gen_scene(seed);
    ks::SceneSpec b = ks::gen_scene(seed);
    CHECK(tutil::bit_equal(a.image, b.image));
    REQUIRE(a.gt.size() == b.gt.size());
    for (size_t i = 0; i < a.gt.size(); ++i) {
      CHECK(a.gt[i].x1 == b.gt[i].x1);
      CHECK(a.gt[i].y2 == b.gt[i].y2);
      CHECK(a.gt[i].class_id == b.gt[i].class_id);
    }
    CHECK(ks::scene_digest(a) == ks::scene_digest(b));
  }
}

TEST_CASE("every generated box is in bounds with legal sides and classes") {
  std::set<size_t> counts;
  for (uint64_t seed = 0; seed < 200; ++seed) {
    ks::SceneSpec s = ks::gen_scene(seed);
    REQUIRE(s.image.shape() == ks::Shape{32, 32});
    CHECK(s.gt.size() <= 4);
    counts.insert(s.gt.size());
    for (const ks::GtBox& b : s.gt) {
      CHECK(b.x1 >= 0.0);
      CHECK(b.y1 >= 0.0);
      CHECK(b.x2 <= 32.0);
      CHECK(b.y2 <= 32.0);
      CHECK(b.x2 - b.x1 >= 6.0);
      CHECK(b.x2 - b.x1 <= 16.0);
      CHECK(b.y2 - b.y1 >= 6.0);
      CHECK(b.y2 - b.y1 <= 16.0);
      CHECK(b.class_id >= 0);
      CHECK(b.class_id < 3);
    }
  }
  // all object counts 0..4 occur over 200 seeds
  CHECK(counts.size() == 5);
}

TEST_CASE("rectangles carry their class intensity over a noisy background") {
  // seed 2 has two non-overlapping boxes (classes 2 and 0)
  ks::SceneSpec s = ks::gen_scene(2);
  REQUIRE(s.gt.size() == 2);
  for (const ks::GtBox& b : s.gt) {
    const double want = 0.45 + 0.10 * b.class_id;
    double sum = 0.0, mn = 1e300, mx = -1e300;
    int64_t n = 0;
    for (int64_t i = static_cast<int64_t>(b.y1); i < static_cast<int64_t>(b.y2); ++i)
      for (int64_t j = static_cast<int64_t>(b.x1); j < static_cast<int64_t>(b.x2); ++j) {
        const double v = s.image.at(i, j);
        sum += v;
        mn = std::min(mn, v);
        mx = std::max(mx, v);
        ++n;
      }
    // The rectangle mean recovers the class value (4 sigma of the mean of n
    // iid sigma-0.2 pixels), but individual pixels are noisy.
    CHECK(std::abs(sum / static_cast<double>(n) - want) <
          4.0 * 0.2 / std::sqrt(static_cast<double>(n)));
    CHECK(mx - mn > 0.1);
  }
  // the background is noise, not a constant
  ks::SceneSpec empty = ks::gen_scene(1);
  REQUIRE(empty.gt.empty());
  double mn = 1e300, mx = -1e300;
  for (double v : empty.image.span()) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  CHECK(mx - mn > 0.1);
  CHECK(mx < 1.0);  // sigma 0.1 noise stays well under object intensities
}

TEST_CASE("seed-0 digest anchor") {
  // Recorded from the first verified generation; any change to the scene
  // sampler must be deliberate and update this constant.
  CHECK(ks::scene_digest(ks::gen_scene(0)) == 9779883397985451939ull);
  CHECK(ks::scene_digest(ks::gen_scene(1)) == 15874290112177190288ull);
  CHECK(ks::scene_digest(ks::gen_scene(0)) != ks::scene_digest(ks::gen_scene(1)));
}
