// SPDX-License-Identifier: Apache-2.0
//
// ksattn command line: train / eval / ablate / gradcheck / inspect / strip.
// Everything goes through the C API; exit codes follow its convention
// (0 ok, 1 usage or I/O, 2 numeric failure, 3 failed gradcheck).

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "ksattn/ksattn.h"

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    std::fprintf(stderr, "error: cannot read %s\n", path.c_str());
    std::exit(1);
  }
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int finish(ks_ctx* ctx, ks_status status) {
  if (status != KS_OK) std::fprintf(stderr, "error: %s\n", ks_last_error(ctx));
  const int code = ks_status_exit_code(status);
  ks_ctx_free(ctx);
  return code;
}

// --seed/--mode/--steps/--theta beat the values in --config.
std::string merged_config(const std::string& config_path,
                          const std::optional<unsigned long long>& seed,
                          const std::optional<std::string>& mode,
                          const std::optional<long long>& steps,
                          const std::optional<double>& theta) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty()) {
    try {
      j = nlohmann::json::parse(read_file(config_path));
    } catch (const nlohmann::json::exception& e) {
      std::fprintf(stderr, "error: %s is not valid JSON: %s\n", config_path.c_str(), e.what());
      std::exit(1);
    }
  }
  if (seed) j["seed"] = *seed;
  if (mode) j["mode"] = *mode;
  if (steps) j["steps"] = *steps;
  if (theta) j["theta"] = *theta;
  return j.dump();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-sharing triple attention on synthetic scenes"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, out, mode = "triple", selection = "infer";
  std::string which = "student";
  std::optional<unsigned long long> seed_opt;
  std::optional<std::string> mode_opt;
  std::optional<long long> steps_opt;
  std::optional<double> theta_opt;
  unsigned long long eval_seed = 9000, scene_seed = 0;
  long long scenes = 200, layer = 0, head = 0, row = -1;
  int instances = 100;

  CLI::App* tr = app.add_subcommand("train", "run a training loop");
  tr->add_option("--config", config_path, "JSON config file");
  tr->add_option("--seed", seed_opt, "override config seed");
  tr->add_option("--mode", mode_opt, "baseline|dual_share_a|dual_share_v|triple");
  tr->add_option("--steps", steps_opt, "override config steps");
  tr->add_option("--theta", theta_opt, "mask binarization threshold in (0,1)");
  tr->add_option("--out", out, "output directory")->required();

  CLI::App* ev = app.add_subcommand("eval", "score a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "model file")->required();
  ev->add_option("--scenes", scenes, "number of eval scenes");
  ev->add_option("--selection", selection, "infer|all_train_streams");
  ev->add_option("--mode", mode, "stream set for all_train_streams");
  ev->add_option("--seed", eval_seed, "eval scene seed");
  ev->add_option("--out", out, "also write the JSON report here");

  CLI::App* ab = app.add_subcommand("ablate", "compare the four modes");
  ab->add_option("--config", config_path, "JSON config file");
  ab->add_option("--seed", seed_opt, "override config seed");
  ab->add_option("--steps", steps_opt, "override config steps");
  ab->add_option("--theta", theta_opt, "mask binarization threshold in (0,1)");
  ab->add_option("--out", out, "output directory")->required();

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference audit");
  gc->add_option("--instances", instances, "random instances per op");

  CLI::App* in = app.add_subcommand("inspect", "export an attention heatmap");
  in->add_option("--checkpoint", checkpoint, "model file")->required();
  in->add_option("--seed", scene_seed, "scene seed");
  in->add_option("--layer", layer, "encoder layer");
  in->add_option("--head", head, "attention head");
  in->add_option("--row", row, "query token row; -1 for row mean");
  in->add_option("--which", which, "student|teacher");
  in->add_option("--out", out, "output PGM path")->required();

  CLI::App* st = app.add_subcommand("strip", "drop teacher params from a checkpoint");
  st->add_option("--checkpoint", checkpoint, "model file")->required();
  st->add_option("--out", out, "stripped model path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  ks_ctx* ctx = ks_ctx_new();
  if (ctx == nullptr) return 1;

  if (tr->parsed())
    return finish(ctx, ks_train(ctx, merged_config(config_path, seed_opt, mode_opt, steps_opt,
                                                   theta_opt)
                                         .c_str(),
                                out.c_str()));
  if (ev->parsed()) {
    char* report = nullptr;
    const ks_status status = ks_eval(ctx, checkpoint.c_str(), scenes, selection.c_str(),
                                     mode.c_str(), eval_seed, &report);
    if (report != nullptr) {
      std::fputs(report, stdout);
      if (!out.empty()) {
        std::ofstream os(out, std::ios::binary);
        os << report;
      }
      ks_string_free(report);
    }
    return finish(ctx, status);
  }
  if (ab->parsed()) {
    char* table = nullptr;
    const ks_status status = ks_ablate(
        ctx, merged_config(config_path, seed_opt, mode_opt, steps_opt, theta_opt).c_str(),
        out.c_str(), &table);
    if (table != nullptr) {
      std::fputs(table, stdout);
      ks_string_free(table);
    }
    return finish(ctx, status);
  }
  if (gc->parsed()) {
    char* report = nullptr;
    const ks_status status = ks_gradcheck(ctx, instances, &report);
    if (report != nullptr) {
      std::fputs(report, stdout);
      ks_string_free(report);
    }
    return finish(ctx, status);
  }
  if (in->parsed())
    return finish(ctx, ks_inspect(ctx, checkpoint.c_str(), scene_seed, layer, head, row,
                                  which.c_str(), out.c_str()));
  if (st->parsed()) return finish(ctx, ks_strip(ctx, checkpoint.c_str(), out.c_str()));

  ks_ctx_free(ctx);
  return 1;
}
