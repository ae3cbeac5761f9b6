// SPDX-License-Identifier: Apache-2.0
//
// Bipartite set-prediction loss: Hungarian matching over a class/L1/GIoU
// cost, per-query cross-entropy with a down-weighted no-object class, box
// losses over the matched pairs, the summed multi-stream loss, and a KL
// divergence between attention maps.

#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "mask.hpp"
#include "tensor.hpp"

namespace ks {

// What the detection head emits for one stream: logits over C real classes
// plus a trailing no-object class, and sigmoid-squashed (cx,cy,w,h) boxes.
struct DetectionSet {
  Tensor class_logits;  // [N, C+1]
  Tensor boxes;         // [N, 4], entries in (0,1)
};

struct GtObjects {
  Tensor boxes;              // [G, 4] normalized (cx,cy,w,h); G may be 0
  std::vector<int> classes;  // size G, values in [0, C)
};

// Corner-form image-space boxes to normalized center form.
GtObjects normalize_gt(const std::vector<GtBox>& boxes, int64_t h0, int64_t w0);

struct MatchResult {
  std::vector<std::pair<int64_t, int64_t>> assignment;  // (query, gt) pairs
  double total_cost = 0.0;
};

// Minimum-cost injective assignment of every column (ground truth) to a
// distinct row (query); G <= N. Jonker-Volgenant on a zero-padded square.
MatchResult hungarian_match(const Tensor& cost);

// Plain-double box overlap helpers on (cx,cy,w,h).
double iou_cxcywh(const double* a, const double* b);
double giou_cxcywh(const double* a, const double* b);  // in (-1, 1]

struct LossWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double no_object = 0.1;  // CE weight for unmatched queries
};

struct LossBreakdown {
  Tensor class_loss, l1_loss, giou_loss, total;  // scalars
  LossWeights weights;
  MatchResult match;
};

// Match, then score: weighted-mean cross-entropy over all queries (unmatched
// queries target the no-object class), L1 and (1 - GIoU) means over matched
// pairs. Differentiable w.r.t. the predictions; the matching itself is
// recomputed from detached values and frozen.
LossBreakdown set_criterion(const DetectionSet& pred, const GtObjects& gt,
                            const LossWeights& weights);

// Same scoring under a caller-fixed assignment (used by gradient checks).
LossBreakdown set_criterion_with_assignment(const DetectionSet& pred,
                                            const GtObjects& gt,
                                            const LossWeights& weights,
                                            const MatchResult& match);

// Sum of independently matched per-stream totals.
Tensor combined_stream_loss(const std::vector<DetectionSet>& streams,
                            const GtObjects& gt, const LossWeights& weights);

// Mean over H maps of the row-mean KL(teacher row || student row). The
// teacher is treated as a constant; 0 ln 0 counts as 0. Rows of both inputs
// must sum to 1 within 1e-6.
Tensor attention_distill_loss(const std::vector<Tensor>& a_teacher,
                              const std::vector<Tensor>& a_student);

}  // namespace ks
