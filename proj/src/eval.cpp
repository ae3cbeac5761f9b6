// SPDX-License-Identifier: Apache-2.0

#include "eval.hpp"

#include <algorithm>
#include <cmath>

#include "common.hpp"
#include "scene.hpp"

namespace ks {
namespace {

constexpr uint64_t kEvalSceneTag = 0xe7a1;

std::vector<double> softmax_row(const Tensor& logits, int64_t row) {
  const int64_t c = logits.cols();
  std::vector<double> p(static_cast<size_t>(c));
  double mx = logits.at(row, 0);
  for (int64_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(row, j));
  double sum = 0.0;
  for (int64_t j = 0; j < c; ++j) {
    p[static_cast<size_t>(j)] = std::exp(logits.at(row, j) - mx);
    sum += p[static_cast<size_t>(j)];
  }
  for (double& v : p) v /= sum;
  return p;
}

int64_t argmax_row(const Tensor& logits, int64_t row) {
  int64_t best = 0;
  for (int64_t j = 1; j < logits.cols(); ++j)
    if (logits.at(row, j) > logits.at(row, best)) best = j;
  return best;
}

}  // namespace

StreamSelection stream_selection_from_string(const std::string& name) {
  if (name == "infer") return StreamSelection::kInfer;
  if (name == "all_train_streams") return StreamSelection::kAllTrainStreams;
  fail(ErrorKind::kUsage, "unknown stream selection: " + name);
}

double ap_11point(std::vector<ScoredHit> hits, int64_t n_positive) {
  if (n_positive <= 0) return 0.0;
  std::stable_sort(hits.begin(), hits.end(),
                   [](const ScoredHit& a, const ScoredHit& b) { return a.score > b.score; });
  std::vector<double> precision, recall;
  int64_t tp = 0, seen = 0;
  for (const ScoredHit& h : hits) {
    ++seen;
    if (h.tp) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_positive));
  }
  double ap = 0.0;
  for (int k = 0; k <= 10; ++k) {
    const double r = 0.1 * k;
    double best = 0.0;
    for (size_t i = 0; i < recall.size(); ++i)
      if (recall[i] >= r - 1e-12) best = std::max(best, precision[i]);
    ap += best / 11.0;
  }
  return ap;
}

EvalAccumulator::EvalAccumulator(int classes, LossWeights weights)
    : classes_(classes),
      weights_(weights),
      pool_(static_cast<size_t>(classes)),
      gt_count_(static_cast<size_t>(classes), 0) {}

void EvalAccumulator::add_scene(const DetectionSet& det, const GtObjects& gt) {
  const int64_t n = det.class_logits.rows();
  const int64_t g = gt.boxes.rows();
  for (int c : gt.classes) ++gt_count_[static_cast<size_t>(c)];

  // AP pool: one detection per query -- its argmax foreground class, scored
  // by that class's softmax probability (the no-object mass suppresses
  // queries that predict nothing).  Greedy claim by descending score against
  // this scene's ground truth of the same class.
  struct Det {
    double score;
    int cls;
    int64_t query;
  };
  std::vector<Det> dets;
  for (int64_t q = 0; q < n; ++q) {
    const std::vector<double> p = softmax_row(det.class_logits, q);
    int best = 0;
    for (int c = 1; c < classes_; ++c)
      if (p[static_cast<size_t>(c)] > p[static_cast<size_t>(best)]) best = c;
    dets.push_back({p[static_cast<size_t>(best)], best, q});
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Det& a, const Det& b) { return a.score > b.score; });
  std::vector<bool> claimed(static_cast<size_t>(g), false);
  for (const Det& dd : dets) {
    int64_t best_gt = -1;
    double best_iou = 0.5;  // strict threshold
    for (int64_t j = 0; j < g; ++j) {
      if (gt.classes[static_cast<size_t>(j)] != dd.cls || claimed[static_cast<size_t>(j)])
        continue;
      const double iou = iou_cxcywh(det.boxes.data() + 4 * dd.query, gt.boxes.data() + 4 * j);
      if (iou > best_iou) {
        best_iou = iou;
        best_gt = j;
      }
    }
    if (best_gt >= 0) claimed[static_cast<size_t>(best_gt)] = true;
    pool_[static_cast<size_t>(dd.cls)].push_back({dd.score, best_gt >= 0});
  }

  if (g == 0) return;
  total_gt_ += g;
  LossBreakdown loss = set_criterion(det, gt, weights_);
  for (const auto& [q, j] : loss.match.assignment) {
    const double iou = iou_cxcywh(det.boxes.data() + 4 * q, gt.boxes.data() + 4 * j);
    if (argmax_row(det.class_logits, q) == gt.classes[static_cast<size_t>(j)] && iou > 0.5)
      ++matched_correct_;
    double l1 = 0.0;
    for (int64_t k = 0; k < 4; ++k)
      l1 += std::fabs(det.boxes.at(q, k) - gt.boxes.at(j, k));
    l1_sum_ += l1;
    ++l1_pairs_;
  }
}

EvalReport EvalAccumulator::finalize() const {
  EvalReport r;
  double ap_sum = 0.0;
  int ap_classes = 0;
  for (int c = 0; c < classes_; ++c) {
    if (gt_count_[static_cast<size_t>(c)] == 0) continue;
    ap_sum += ap_11point(pool_[static_cast<size_t>(c)], gt_count_[static_cast<size_t>(c)]);
    ++ap_classes;
  }
  r.map50 = ap_classes > 0 ? ap_sum / ap_classes : 0.0;
  r.match_acc =
      total_gt_ > 0 ? static_cast<double>(matched_correct_) / static_cast<double>(total_gt_) : 0.0;
  r.mean_l1 = l1_pairs_ > 0 ? l1_sum_ / static_cast<double>(l1_pairs_) : 0.0;
  return r;
}

std::vector<EvalReport> evaluate(ModelParams& params, AttentionMode mode,
                                 StreamSelection selection, int64_t n_scenes,
                                 uint64_t eval_seed, const LossWeights& weights) {
  const AttentionMode run_mode =
      selection == StreamSelection::kInfer ? AttentionMode::kInfer : mode;
  std::vector<EvalAccumulator> acc;
  std::vector<int> ids;
  for (int64_t i = 0; i < n_scenes; ++i) {
    SceneSpec scene = gen_scene(mix_seed(kEvalSceneTag, eval_seed, static_cast<uint64_t>(i)));
    PredictOutputs out =
        predict(scene.image, run_mode == AttentionMode::kInfer ? nullptr : &scene.gt, params,
                run_mode);
    if (acc.empty()) {
      ids = out.stream_ids;
      acc.assign(out.streams.size(), EvalAccumulator(params.config.classes, weights));
    }
    GtObjects gt = normalize_gt(scene.gt, params.config.image_size, params.config.image_size);
    for (size_t s = 0; s < out.streams.size(); ++s) acc[s].add_scene(out.streams[s], gt);
  }
  std::vector<EvalReport> reports;
  for (size_t s = 0; s < acc.size(); ++s) {
    EvalReport r = acc[s].finalize();
    r.stream_id = ids[s];
    reports.push_back(r);
  }
  return reports;
}

}  // namespace ks
