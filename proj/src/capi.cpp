// SPDX-License-Identifier: Apache-2.0

#include "ksattn/ksattn.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include "checkpoint.hpp"
#include "common.hpp"
#include "gradcheck.hpp"
#include "heatmap.hpp"
#include "json.hpp"
#include "scene.hpp"
#include "train.hpp"

struct ks_ctx {
  std::string last_error;
};

namespace {

ks_status status_of(ks::ErrorKind kind) {
  switch (kind) {
    case ks::ErrorKind::kUsage: return KS_ERR_USAGE;
    case ks::ErrorKind::kShape: return KS_ERR_SHAPE;
    case ks::ErrorKind::kContract: return KS_ERR_CONTRACT;
    case ks::ErrorKind::kNumeric: return KS_ERR_NUMERIC;
    case ks::ErrorKind::kIo: return KS_ERR_IO;
    case ks::ErrorKind::kGradcheck: return KS_ERR_GRADCHECK;
  }
  return KS_ERR_INTERNAL;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

template <typename Fn>
ks_status guarded(ks_ctx* ctx, Fn&& fn) {
  if (ctx == nullptr) return KS_ERR_USAGE;
  ctx->last_error.clear();
  try {
    return fn();
  } catch (const ks::Error& e) {
    ctx->last_error = e.what();
    return status_of(e.kind());
  } catch (const std::exception& e) {
    ctx->last_error = e.what();
    return KS_ERR_INTERNAL;
  }
}

const char* require(ks_ctx* ctx, const char* arg, const char* name) {
  if (arg == nullptr) ks::fail(ks::ErrorKind::kUsage, std::string(name) + " must not be null");
  return arg;
}

}  // namespace

extern "C" {

ks_ctx* ks_ctx_new(void) { return new (std::nothrow) ks_ctx; }

void ks_ctx_free(ks_ctx* ctx) { delete ctx; }

const char* ks_last_error(const ks_ctx* ctx) {
  return ctx == nullptr ? "" : ctx->last_error.c_str();
}

int ks_status_exit_code(ks_status s) {
  switch (s) {
    case KS_OK: return 0;
    case KS_ERR_NUMERIC: return 2;
    case KS_ERR_GRADCHECK: return 3;
    default: return 1;
  }
}

ks_status ks_train(ks_ctx* ctx, const char* config_json, const char* out_dir) {
  return guarded(ctx, [&] {
    ks::TrainConfig cfg = ks::config_from_json(require(ctx, config_json, "config_json"));
    const std::string dir = require(ctx, out_dir, "out_dir");
    if (dir.empty()) ks::fail(ks::ErrorKind::kUsage, "out_dir must not be empty");
    ks::train(cfg, dir);
    return KS_OK;
  });
}

ks_status ks_eval(ks_ctx* ctx, const char* checkpoint_path, long long n_scenes,
                  const char* selection, const char* mode, unsigned long long eval_seed,
                  char** report_json) {
  return guarded(ctx, [&] {
    if (n_scenes < 1) ks::fail(ks::ErrorKind::kUsage, "n_scenes must be >= 1");
    ks::ModelParams params =
        ks::load_checkpoint(require(ctx, checkpoint_path, "checkpoint_path"));
    const ks::StreamSelection sel =
        ks::stream_selection_from_string(require(ctx, selection, "selection"));
    const ks::AttentionMode m = ks::attention_mode_from_string(require(ctx, mode, "mode"));
    std::vector<ks::EvalReport> reports = ks::evaluate(params, m, sel, n_scenes, eval_seed);
    nlohmann::json j;
    j["scenes"] = n_scenes;
    j["eval_seed"] = eval_seed;
    j["selection"] = selection;
    j["streams"] = nlohmann::json::array();
    for (const ks::EvalReport& r : reports)
      j["streams"].push_back({{"stream", r.stream_id},
                              {"map50", r.map50},
                              {"match_acc", r.match_acc},
                              {"mean_l1", r.mean_l1}});
    if (report_json != nullptr) *report_json = dup_string(j.dump(2) + "\n");
    return KS_OK;
  });
}

ks_status ks_ablate(ks_ctx* ctx, const char* config_json, const char* out_dir,
                    char** table_csv) {
  return guarded(ctx, [&] {
    ks::TrainConfig cfg = ks::config_from_json(require(ctx, config_json, "config_json"));
    const std::string dir = require(ctx, out_dir, "out_dir");
    if (dir.empty()) ks::fail(ks::ErrorKind::kUsage, "out_dir must not be empty");
    ks::AblationResult res = ks::ablate(cfg, dir);
    if (table_csv != nullptr) *table_csv = dup_string(res.table_csv);
    return KS_OK;
  });
}

ks_status ks_gradcheck(ks_ctx* ctx, int instances_per_op, char** report) {
  return guarded(ctx, [&] {
    if (instances_per_op < 1)
      ks::fail(ks::ErrorKind::kUsage, "instances_per_op must be >= 1");
    ks::GradCheckReport rep = ks::gradcheck_suite(0, instances_per_op);
    if (report != nullptr) *report = dup_string(ks::format_report(rep));
    if (!rep.all_pass) {
      ctx->last_error = "gradient checks failed";
      return KS_ERR_GRADCHECK;
    }
    return KS_OK;
  });
}

ks_status ks_inspect(ks_ctx* ctx, const char* checkpoint_path, unsigned long long scene_seed,
                     long long layer, long long head, long long row, const char* source,
                     const char* out_pgm) {
  return guarded(ctx, [&] {
    ks::ModelParams params =
        ks::load_checkpoint(require(ctx, checkpoint_path, "checkpoint_path"));
    ks::SceneSpec scene = ks::gen_scene(scene_seed);
    ks::export_attention_heatmap(params, scene, layer, head, row,
                                 ks::heatmap_source_from_string(require(ctx, source, "source")),
                                 require(ctx, out_pgm, "out_pgm"));
    return KS_OK;
  });
}

ks_status ks_strip(ks_ctx* ctx, const char* checkpoint_path, const char* out_path) {
  return guarded(ctx, [&] {
    ks::strip_checkpoint(require(ctx, checkpoint_path, "checkpoint_path"),
                         require(ctx, out_path, "out_path"));
    return KS_OK;
  });
}

void ks_string_free(char* s) { std::free(s); }

const char* ks_version(void) { return "0.1.0"; }

}  // extern "C"
