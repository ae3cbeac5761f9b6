// SPDX-License-Identifier: Apache-2.0
//
// Detection quality on synthetic scenes: 11-point interpolated AP at
// IoU > 0.5 averaged over classes, the fraction of ground-truth objects
// whose matched query classifies them correctly with IoU > 0.5, and the
// mean L1 box error over matched pairs.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "matching.hpp"
#include "model.hpp"

namespace ks {

struct EvalReport {
  int stream_id = 1;
  double map50 = 0.0;      // in [0,1]
  double match_acc = 0.0;  // in [0,1]
  double mean_l1 = 0.0;    // >= 0
};

// Streams scored by evaluate(): the plain inference path, or every stream
// the training mode produces (teacher streams then consume ground-truth
// masks at eval time as well — see README).
enum class StreamSelection { kInfer, kAllTrainStreams };

StreamSelection stream_selection_from_string(const std::string& name);

// One detection's score and whether it claimed an unclaimed ground truth.
struct ScoredHit {
  double score;
  bool tp;
};

// 11-point interpolated average precision (recall grid 0, 0.1, ..., 1).
double ap_11point(std::vector<ScoredHit> hits, int64_t n_positive);

// Streaming accumulator so many scenes can share one AP pool per class.
class EvalAccumulator {
 public:
  explicit EvalAccumulator(int classes, LossWeights weights = {});
  void add_scene(const DetectionSet& det, const GtObjects& gt);
  EvalReport finalize() const;

 private:
  int classes_;
  LossWeights weights_;
  std::vector<std::vector<ScoredHit>> pool_;  // per class
  std::vector<int64_t> gt_count_;             // per class
  int64_t matched_correct_ = 0;
  int64_t total_gt_ = 0;
  double l1_sum_ = 0.0;
  int64_t l1_pairs_ = 0;
};

// Scores `n_scenes` seeded scenes. Scene i derives from (eval_seed, i), a
// stream disjoint from training scenes. Returns one report per stream, in
// stream order.
std::vector<EvalReport> evaluate(ModelParams& params, AttentionMode mode,
                                 StreamSelection selection, int64_t n_scenes,
                                 uint64_t eval_seed,
                                 const LossWeights& weights = {});

}  // namespace ks
