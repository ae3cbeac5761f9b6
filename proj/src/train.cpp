// SPDX-License-Identifier: Apache-2.0

#include "train.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "checkpoint.hpp"
#include "common.hpp"
#include "json.hpp"
#include "scene.hpp"

namespace ks {
namespace {

using nlohmann::json;

constexpr uint64_t kTrainSceneTag = 0x7a11;

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "seed",       "steps",      "batch_size",  "lr",          "optimizer",
      "mode",       "norm_scheme", "theta",      "image_size",  "patch",
      "d",          "heads",      "d_ff",        "enc_layers",  "dec_layers",
      "queries",    "classes",    "loss_weights", "log_every",  "eval_every",
      "eval_scenes", "eval_seed", "clip_norm",   "decay_every", "decay_factor",
      "train_pool"};
  return keys;
}

std::string fmt(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.9g", v);
  return b;
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::kIo, "cannot write " + path);
  os << text;
}

}  // namespace

const char kMetricsHeader[] = "step,stream,loss_total,loss_cls,loss_l1,loss_giou,map50,match_acc";

TrainConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::kUsage, std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorKind::kUsage, "config root must be a JSON object");
  for (const auto& item : j.items())
    if (known_keys().find(item.key()) == known_keys().end())
      fail(ErrorKind::kUsage, "unknown config key: " + item.key());

  TrainConfig cfg;
  try {
    if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
    if (j.contains("steps")) cfg.steps = j.at("steps").get<int64_t>();
    if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int64_t>();
    if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
    if (j.contains("optimizer")) cfg.optimizer = j.at("optimizer").get<std::string>();
    if (j.contains("mode"))
      cfg.mode = attention_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("norm_scheme"))
      cfg.model.norm = norm_scheme_from_string(j.at("norm_scheme").get<std::string>());
    if (j.contains("theta")) {
      if (j.at("theta").is_null())
        cfg.model.theta.reset();
      else
        cfg.model.theta = j.at("theta").get<double>();
    }
    if (j.contains("image_size")) cfg.model.image_size = j.at("image_size").get<int64_t>();
    if (j.contains("patch")) cfg.model.patch = j.at("patch").get<int64_t>();
    if (j.contains("d")) cfg.model.d = j.at("d").get<int64_t>();
    if (j.contains("heads")) cfg.model.heads = j.at("heads").get<int64_t>();
    if (j.contains("d_ff")) cfg.model.d_ff = j.at("d_ff").get<int64_t>();
    if (j.contains("enc_layers")) cfg.model.enc_layers = j.at("enc_layers").get<int64_t>();
    if (j.contains("dec_layers")) cfg.model.dec_layers = j.at("dec_layers").get<int64_t>();
    if (j.contains("queries")) cfg.model.queries = j.at("queries").get<int64_t>();
    if (j.contains("classes")) cfg.model.classes = j.at("classes").get<int64_t>();
    if (j.contains("loss_weights")) {
      const json& w = j.at("loss_weights");
      if (!w.is_object()) fail(ErrorKind::kUsage, "loss_weights must be an object");
      for (const auto& item : w.items())
        if (item.key() != "cls" && item.key() != "l1" && item.key() != "giou" &&
            item.key() != "no_object")
          fail(ErrorKind::kUsage, "unknown loss weight: " + item.key());
      if (w.contains("cls")) cfg.weights.cls = w.at("cls").get<double>();
      if (w.contains("l1")) cfg.weights.l1 = w.at("l1").get<double>();
      if (w.contains("giou")) cfg.weights.giou = w.at("giou").get<double>();
      if (w.contains("no_object")) cfg.weights.no_object = w.at("no_object").get<double>();
    }
    if (j.contains("log_every")) cfg.log_every = j.at("log_every").get<int64_t>();
    if (j.contains("eval_every")) cfg.eval_every = j.at("eval_every").get<int64_t>();
    if (j.contains("eval_scenes")) cfg.eval_scenes = j.at("eval_scenes").get<int64_t>();
    if (j.contains("eval_seed")) cfg.eval_seed = j.at("eval_seed").get<uint64_t>();
    if (j.contains("train_pool")) cfg.train_pool = j.at("train_pool").get<int64_t>();
    if (j.contains("clip_norm")) cfg.clip_norm = j.at("clip_norm").get<double>();
    if (j.contains("decay_every")) cfg.decay_every = j.at("decay_every").get<int64_t>();
    if (j.contains("decay_factor")) cfg.decay_factor = j.at("decay_factor").get<double>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kUsage, std::string("bad config value: ") + e.what());
  }
  validate_train_config(cfg);
  return cfg;
}

std::string config_to_json(const TrainConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["steps"] = cfg.steps;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["optimizer"] = cfg.optimizer;
  j["mode"] = to_string(cfg.mode);
  j["norm_scheme"] = to_string(cfg.model.norm);
  j["theta"] = cfg.model.theta ? json(*cfg.model.theta) : json(nullptr);
  j["image_size"] = cfg.model.image_size;
  j["patch"] = cfg.model.patch;
  j["d"] = cfg.model.d;
  j["heads"] = cfg.model.heads;
  j["d_ff"] = cfg.model.d_ff;
  j["enc_layers"] = cfg.model.enc_layers;
  j["dec_layers"] = cfg.model.dec_layers;
  j["queries"] = cfg.model.queries;
  j["classes"] = cfg.model.classes;
  j["loss_weights"] = {{"cls", cfg.weights.cls},
                       {"l1", cfg.weights.l1},
                       {"giou", cfg.weights.giou},
                       {"no_object", cfg.weights.no_object}};
  j["log_every"] = cfg.log_every;
  j["eval_every"] = cfg.eval_every;
  j["eval_scenes"] = cfg.eval_scenes;
  j["eval_seed"] = cfg.eval_seed;
  j["train_pool"] = cfg.train_pool;
  j["clip_norm"] = cfg.clip_norm;
  j["decay_every"] = cfg.decay_every;
  j["decay_factor"] = cfg.decay_factor;
  return j.dump(2) + "\n";
}

void validate_train_config(const TrainConfig& cfg) {
  validate_config(cfg.model);
  if (cfg.model.image_size != kSceneSize)
    fail(ErrorKind::kUsage, "training scenes are " + std::to_string(kSceneSize) +
                                "x" + std::to_string(kSceneSize) +
                                "; image_size must match");
  if (cfg.steps < 0) fail(ErrorKind::kUsage, "steps must be >= 0");
  if (cfg.batch_size < 1) fail(ErrorKind::kUsage, "batch_size must be >= 1");
  if (!(cfg.lr > 0.0)) fail(ErrorKind::kUsage, "lr must be positive");
  if (cfg.optimizer != "adam" && cfg.optimizer != "sgd")
    fail(ErrorKind::kUsage, "optimizer must be adam or sgd");
  if (cfg.log_every < 1 || cfg.eval_every < 1)
    fail(ErrorKind::kUsage, "log_every and eval_every must be >= 1");
  if (cfg.eval_scenes < 1) fail(ErrorKind::kUsage, "eval_scenes must be >= 1");
  if (cfg.train_pool < 0) fail(ErrorKind::kUsage, "train_pool must be >= 0");
  if (cfg.clip_norm < 0.0) fail(ErrorKind::kUsage, "clip_norm must be >= 0");
  if (cfg.decay_every < 0) fail(ErrorKind::kUsage, "decay_every must be >= 0");
  if (!(cfg.decay_factor > 0.0 && cfg.decay_factor <= 1.0))
    fail(ErrorKind::kUsage, "decay_factor must lie in (0, 1]");
  if (cfg.weights.cls < 0 || cfg.weights.l1 < 0 || cfg.weights.giou < 0 ||
      cfg.weights.no_object < 0)
    fail(ErrorKind::kUsage, "loss weights must be >= 0");
}

TrainResult train(const TrainConfig& cfg, const std::string& out_dir) {
  validate_train_config(cfg);
  ModelParams params = init_model(cfg.model, cfg.seed);
  const bool with_teacher = cfg.mode != AttentionMode::kInfer;

  const bool adam = cfg.optimizer == "adam";
  std::vector<Tensor> opt_m, opt_v;
  int64_t adam_t = 0;
  double lr = cfg.lr;

  std::string csv = std::string(kMetricsHeader) + "\n";
  std::vector<EvalReport> last_reports;

  for (int64_t step = 0; step < cfg.steps; ++step) {
    Tape tape;
    std::vector<Tensor*> slots;
    visit_params(
        params,
        [&](const std::string&, Tensor& t) {
          t = tape.leaf(t);
          slots.push_back(&t);
        },
        with_teacher);

    Tensor batch_loss;
    struct StreamStat {
      double total = 0, cls = 0, l1 = 0, giou = 0;
    };
    std::vector<StreamStat> stats;
    std::vector<int> ids;
    for (int64_t b = 0; b < cfg.batch_size; ++b) {
      int64_t index = step * cfg.batch_size + b;
      if (cfg.train_pool > 0) index %= cfg.train_pool;
      SceneSpec scene =
          gen_scene(mix_seed(kTrainSceneTag, cfg.seed, static_cast<uint64_t>(index)));
      PredictOutputs out =
          predict(scene.image, with_teacher ? &scene.gt : nullptr, params, cfg.mode);
      GtObjects gt = normalize_gt(scene.gt, cfg.model.image_size, cfg.model.image_size);
      if (stats.empty()) {
        ids = out.stream_ids;
        stats.resize(out.streams.size());
      }
      for (size_t s = 0; s < out.streams.size(); ++s) {
        LossBreakdown lb = set_criterion(out.streams[s], gt, cfg.weights);
        batch_loss = batch_loss.defined() ? add(batch_loss, lb.total) : lb.total;
        stats[s].total += lb.total.value();
        stats[s].cls += lb.class_loss.value();
        stats[s].l1 += lb.l1_loss.value();
        stats[s].giou += lb.giou_loss.value();
      }
    }
    batch_loss = scale(batch_loss, 1.0 / static_cast<double>(cfg.batch_size));
    if (!std::isfinite(batch_loss.value()))
      fail(ErrorKind::kNumeric,
           "loss diverged at step " + std::to_string(step + 1) + "; try a lower lr");
    tape.backward(batch_loss);

    std::vector<Tensor> grads;
    grads.reserve(slots.size());
    double norm_sq = 0.0;
    for (Tensor* t : slots) {
      Tensor g = tape.grad(*t);
      for (double x : g.span()) norm_sq += x * x;
      grads.push_back(g);
    }
    if (!std::isfinite(norm_sq))
      fail(ErrorKind::kNumeric, "non-finite gradient at step " + std::to_string(step + 1));
    double gscale = 1.0;
    if (cfg.clip_norm > 0.0 && std::sqrt(norm_sq) > cfg.clip_norm)
      gscale = cfg.clip_norm / std::sqrt(norm_sq);

    if (adam && opt_m.empty())
      for (Tensor* t : slots) {
        opt_m.push_back(Tensor::zeros(t->shape()));
        opt_v.push_back(Tensor::zeros(t->shape()));
      }
    ++adam_t;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(adam_t));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(adam_t));
    for (size_t i = 0; i < slots.size(); ++i) {
      Tensor next = slots[i]->clone();
      auto ns = next.span();
      auto gs = grads[i].span();
      if (adam) {
        auto ms = opt_m[i].span();
        auto vs = opt_v[i].span();
        for (size_t k = 0; k < ns.size(); ++k) {
          const double g = gs[k] * gscale;
          ms[k] = 0.9 * ms[k] + 0.1 * g;
          vs[k] = 0.999 * vs[k] + 0.001 * g * g;
          ns[k] -= lr * (ms[k] / bc1) / (std::sqrt(vs[k] / bc2) + 1e-8);
        }
      } else {
        for (size_t k = 0; k < ns.size(); ++k) ns[k] -= lr * gs[k] * gscale;
      }
      *slots[i] = next;
    }
    if (cfg.decay_every > 0 && (step + 1) % cfg.decay_every == 0) lr *= cfg.decay_factor;

    const bool eval_row = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
    const bool log_row = (step + 1) % cfg.log_every == 0;
    if (log_row || eval_row) {
      std::vector<EvalReport> reports;
      if (eval_row) {
        reports = evaluate(params, cfg.mode, StreamSelection::kAllTrainStreams, cfg.eval_scenes,
                           cfg.eval_seed, cfg.weights);
        last_reports = reports;
      }
      for (size_t s = 0; s < stats.size(); ++s) {
        const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
        csv += std::to_string(step + 1) + "," + std::to_string(ids[s]) + "," +
               fmt(stats[s].total * inv_b) + "," + fmt(stats[s].cls * inv_b) + "," +
               fmt(stats[s].l1 * inv_b) + "," + fmt(stats[s].giou * inv_b) + ",";
        if (eval_row)
          csv += fmt(reports[s].map50) + "," + fmt(reports[s].match_acc);
        else
          csv += ",";
        csv += "\n";
      }
    }
  }

  TrainResult result{std::move(params), std::move(csv), std::move(last_reports)};
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/metrics.csv", result.metrics_csv);
    write_file(out_dir + "/config.json", config_to_json(cfg));
    save_checkpoint(out_dir + "/model.ksat", result.params);
  }
  return result;
}

AblationResult ablate(const TrainConfig& base, const std::string& out_dir) {
  static const char* kModes[] = {"baseline", "dual_share_a", "dual_share_v", "triple"};
  AblationResult res;
  res.table_csv = "mode,seed,steps,lr,batch_size,map50,match_acc,mean_l1\n";
  for (const char* mode : kModes) {
    TrainConfig cfg = base;
    cfg.mode = attention_mode_from_string(mode);
    TrainResult tr = train(cfg, out_dir.empty() ? "" : out_dir + "/" + mode);
    EvalReport rep = evaluate(tr.params, AttentionMode::kInfer, StreamSelection::kInfer,
                              cfg.eval_scenes, cfg.eval_seed, cfg.weights)[0];
    res.rows.push_back({mode, rep});
    res.table_csv += std::string(mode) + "," + std::to_string(cfg.seed) + "," +
                     std::to_string(cfg.steps) + "," + fmt(cfg.lr) + "," +
                     std::to_string(cfg.batch_size) + "," + fmt(rep.map50) + "," +
                     fmt(rep.match_acc) + "," + fmt(rep.mean_l1) + "\n";
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/ablation.csv", res.table_csv);
  }
  return res;
}

}  // namespace ks
