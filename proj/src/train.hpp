// SPDX-License-Identifier: Apache-2.0
//
// Seeded training runs over synthetic scenes: Adam/SGD on the summed
// per-stream set losses, a fixed-format metrics CSV, checkpointing, and
// the four-way mode comparison.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eval.hpp"
#include "model.hpp"

namespace ks {

struct TrainConfig {
  uint64_t seed = 0;
  int64_t steps = 2000;
  int64_t batch_size = 4;
  double lr = 1e-3;
  std::string optimizer = "adam";  // adam | sgd
  AttentionMode mode = AttentionMode::kTrain;
  ModelConfig model;
  LossWeights weights;
  int64_t log_every = 50;
  int64_t eval_every = 500;
  int64_t eval_scenes = 200;
  uint64_t eval_seed = 9000;
  int64_t train_pool = 512;   // distinct training scenes cycled; 0 = unbounded stream
  double clip_norm = 1.0;     // global-norm clip; 0 disables
  int64_t decay_every = 0;    // multiply lr by decay_factor this often; 0 = constant
  double decay_factor = 0.5;
};

// Strict parse: unknown keys, wrong types, and out-of-range values are
// usage errors. Every field is optional and defaults as above.
TrainConfig config_from_json(const std::string& text);
std::string config_to_json(const TrainConfig& cfg);
void validate_train_config(const TrainConfig& cfg);

extern const char kMetricsHeader[];  // "step,stream,..."

struct TrainResult {
  ModelParams params;
  std::string metrics_csv;
  std::vector<EvalReport> final_reports;  // per-stream, from the last step
};

// Runs the loop; when out_dir is non-empty writes metrics.csv, config.json
// and model.ksat there. A non-finite loss aborts with a numeric error.
TrainResult train(const TrainConfig& cfg, const std::string& out_dir = "");

struct AblationRow {
  std::string mode;
  EvalReport report;  // stream-1 inference-path metrics
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::string table_csv;
};

// Trains baseline, dual_share_a, dual_share_v and triple with identical
// seed/budget and tabulates final stream-1 metrics.
AblationResult ablate(const TrainConfig& base, const std::string& out_dir = "");

}  // namespace ks
