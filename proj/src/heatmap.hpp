// SPDX-License-Identifier: Apache-2.0
//
// Attention-map inspection: pick an encoder layer and head, take one query
// row (or the mean over rows), reshape to the feature grid, min-max
// normalize and write a binary PGM.

#pragma once

#include <string>

#include "model.hpp"
#include "scene.hpp"

namespace ks {

enum class HeatmapSource { kStudent, kTeacher };

HeatmapSource heatmap_source_from_string(const std::string& name);

// `row` indexes the query token; pass -1 for the row mean. The teacher map
// only exists at the last encoder layer and needs teacher params.
Tensor attention_heatmap(ModelParams& params, const SceneSpec& scene, int64_t layer,
                         int64_t head, int64_t row, HeatmapSource source);

// Min-max normalize to [0,255]; a constant map becomes mid-gray.
void write_pgm(const Tensor& image, const std::string& path);

void export_attention_heatmap(ModelParams& params, const SceneSpec& scene, int64_t layer,
                              int64_t head, int64_t row, HeatmapSource source,
                              const std::string& path);

}  // namespace ks
