// SPDX-License-Identifier: Apache-2.0

#include "gradcheck.hpp"

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>

#include "common.hpp"
#include "matching.hpp"
#include "smlp.hpp"
#include "triple_attention.hpp"

namespace ks {
namespace {

constexpr uint64_t kGradTag = 0x9cad;
constexpr double kFdTol = 1e-4;
constexpr double kDecompTol = 1e-10;

Tensor ru(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.span()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

// One randomized check: every tensor in `base` becomes a leaf, `forward`
// assembles a scalar from them (it also runs untracked for the central
// differences), and the gradient w.r.t. base[target] is compared.
struct FdInstance {
  std::vector<Tensor> base;
  size_t target = 0;
  std::function<Tensor(const std::vector<Tensor>&)> forward;
};

double run_fd(const FdInstance& fi) {
  Tape tape;
  std::vector<Tensor> leaves;
  leaves.reserve(fi.base.size());
  for (const Tensor& t : fi.base) leaves.push_back(tape.leaf(t));
  Tensor loss = fi.forward(leaves);
  tape.backward(loss);
  Tensor analytic = tape.grad(leaves[fi.target]);
  auto value = [&fi](const Tensor& x) {
    std::vector<Tensor> args = fi.base;
    args[fi.target] = x;
    return fi.forward(args).value();
  };
  return finite_difference_check(value, analytic, fi.base[fi.target]);
}

// Parameter-vector layouts so instances can rotate the FD target across
// every weight of a composite op.
AttentionParams attn_from(const std::vector<Tensor>& t, size_t off, int64_t heads) {
  AttentionParams p;
  p.qkv = QkvParams{t[off], t[off + 1], t[off + 2], t[off + 3], t[off + 4], t[off + 5]};
  p.wo = t[off + 6];
  p.bo = t[off + 7];
  p.heads = heads;
  return p;
}

EncoderLayerParams layer_from(const std::vector<Tensor>& t, size_t off, int64_t heads) {
  EncoderLayerParams p;
  p.attn = attn_from(t, off, heads);
  p.ln_attn = LayerNormParams{t[off + 8], t[off + 9]};
  p.ln_ffn = LayerNormParams{t[off + 10], t[off + 11]};
  p.ffn = FfnParams{t[off + 12], t[off + 13], t[off + 14], t[off + 15]};
  return p;
}

TeacherParams teacher_from(const std::vector<Tensor>& t, size_t off) {
  TeacherParams p;
  p.smlp = SmlpParams{t[off], t[off + 1]};
  p.attn = TeacherAttentionParams{t[off + 2], t[off + 3], t[off + 4],
                                  t[off + 5], t[off + 6], t[off + 7]};
  return p;
}

std::vector<Tensor> rand_layer_tensors(std::mt19937_64& rng, int64_t d, int64_t d_ff) {
  std::vector<Tensor> t;
  for (int i = 0; i < 3; ++i) {  // wq,bq,wk,bk,wv,bv
    t.push_back(ru(rng, {d, d}));
    t.push_back(ru(rng, {d}));
  }
  t.push_back(ru(rng, {d, d}));  // wo
  t.push_back(ru(rng, {d}));     // bo
  for (int i = 0; i < 2; ++i) {  // two LN pairs
    t.push_back(ru(rng, {d}, 0.5, 1.5));
    t.push_back(ru(rng, {d}, -0.2, 0.2));
  }
  t.push_back(ru(rng, {d, d_ff}));
  t.push_back(ru(rng, {d_ff}));
  t.push_back(ru(rng, {d_ff, d}));
  t.push_back(ru(rng, {d}));
  return t;
}

std::vector<Tensor> rand_teacher_tensors(std::mt19937_64& rng, int64_t d) {
  std::vector<Tensor> t;
  t.push_back(ru(rng, {d, d}, -0.3, 0.3));  // smlp weight
  t.push_back(ru(rng, {d}, -0.1, 0.1));
  for (int i = 0; i < 3; ++i) {
    t.push_back(ru(rng, {d, d}));
    t.push_back(ru(rng, {d}));
  }
  return t;
}

FgBgMask mixed_mask(std::mt19937_64& rng, int64_t n) {
  FgBgMask mask;
  mask.h_feat = n;
  mask.w_feat = 1;
  mask.m = Tensor::zeros({n, 1});
  for (int64_t i = 0; i < n; ++i) mask.m.at(i, 0) = uniform01(rng) < 0.5 ? 1.0 : 0.0;
  mask.m.at(0, 0) = 1.0;  // keep both regions populated
  mask.m.at(1, 0) = 0.0;
  return mask;
}

}  // namespace

GradCheckReport gradcheck_suite(uint64_t seed, int instances_per_op,
                                const std::string& corrupt_op) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckReport report;
  uint64_t op_index = 0;

  auto run_op = [&](const std::string& name, double tol,
                    const std::function<double(std::mt19937_64&, int)>& one) {
    std::mt19937_64 rng(mix_seed(kGradTag, seed, op_index++));
    GradCheckEntry e;
    e.op = name;
    e.tolerance = tol;
    for (int i = 0; i < instances_per_op; ++i) {
      e.max_rel_err = std::max(e.max_rel_err, one(rng, i));
      ++e.instances;
    }
    if (name == corrupt_op) e.max_rel_err = std::max(e.max_rel_err, tol * 10.0);
    e.pass = e.max_rel_err < tol;
    report.entries.push_back(e);
  };

  run_op("matmul", kFdTol, [](std::mt19937_64& rng, int inst) {
    Tensor r = ru(rng, {3, 2});
    FdInstance fi;
    fi.base = {ru(rng, {3, 4}), ru(rng, {4, 2})};
    fi.target = static_cast<size_t>(inst % 2);
    fi.forward = [r](const std::vector<Tensor>& t) {
      return sum_all(mul(matmul(t[0], t[1]), r));
    };
    return run_fd(fi);
  });

  run_op("linear", kFdTol, [](std::mt19937_64& rng, int inst) {
    Tensor r = ru(rng, {3, 2});
    FdInstance fi;
    fi.base = {ru(rng, {3, 4}), ru(rng, {4, 2}), ru(rng, {2})};
    fi.target = static_cast<size_t>(inst % 3);
    fi.forward = [r](const std::vector<Tensor>& t) {
      return sum_all(mul(linear(t[0], t[1], t[2]), r));
    };
    return run_fd(fi);
  });

  run_op("softmax_rows", kFdTol, [](std::mt19937_64& rng, int) {
    Tensor r = ru(rng, {4, 5});
    FdInstance fi;
    fi.base = {ru(rng, {4, 5}, -2.0, 2.0)};
    fi.forward = [r](const std::vector<Tensor>& t) {
      return sum_all(mul(softmax_rows(t[0]), r));
    };
    return run_fd(fi);
  });

  run_op("layer_norm", kFdTol, [](std::mt19937_64& rng, int inst) {
    Tensor r = ru(rng, {4, 6});
    FdInstance fi;
    fi.base = {ru(rng, {4, 6}), ru(rng, {6}, 0.5, 1.5), ru(rng, {6}, -0.2, 0.2)};
    fi.target = static_cast<size_t>(inst % 3);
    fi.forward = [r](const std::vector<Tensor>& t) {
      return sum_all(mul(layer_norm(t[0], t[1], t[2]), r));
    };
    return run_fd(fi);
  });

  run_op("attention_sdpa", kFdTol, [](std::mt19937_64& rng, int inst) {
    Tensor r_out = ru(rng, {3, 4}), r_map = ru(rng, {3, 5});
    FdInstance fi;
    fi.base = {ru(rng, {3, 4}), ru(rng, {5, 4}), ru(rng, {5, 4})};
    fi.target = static_cast<size_t>(inst % 3);
    fi.forward = [r_out, r_map](const std::vector<Tensor>& t) {
      SdpaResult s = scaled_dot_product_attention(t[0], t[1], t[2]);
      return add(sum_all(mul(s.output, r_out)), sum_all(mul(s.attention_map, r_map)));
    };
    return run_fd(fi);
  });

  run_op("multi_head_attention", kFdTol, [](std::mt19937_64& rng, int inst) {
    const int64_t d = 4;
    Tensor r = ru(rng, {3, d});
    Tensor pe_q = ru(rng, {3, d}, -0.5, 0.5), pe_kv = ru(rng, {5, d}, -0.5, 0.5);
    FdInstance fi;
    fi.base = {ru(rng, {3, d}), ru(rng, {5, d})};
    for (int i = 0; i < 3; ++i) {
      fi.base.push_back(ru(rng, {d, d}));
      fi.base.push_back(ru(rng, {d}));
    }
    fi.base.push_back(ru(rng, {d, d}));
    fi.base.push_back(ru(rng, {d}));
    fi.target = static_cast<size_t>(inst % 10);
    fi.forward = [r, pe_q, pe_kv](const std::vector<Tensor>& t) {
      return sum_all(mul(multi_head_attention(t[0], t[1], pe_q, pe_kv, attn_from(t, 2, 2)), r));
    };
    return run_fd(fi);
  });

  run_op("encoder_layer", kFdTol, [](std::mt19937_64& rng, int inst) {
    const int64_t d = 4, d_ff = 6, n = 3;
    Tensor r = ru(rng, {n, d});
    Tensor pe = ru(rng, {n, d}, -0.5, 0.5);
    const NormScheme scheme = inst % 2 == 0 ? NormScheme::kBranchLn : NormScheme::kPostAddLn;
    FdInstance fi;
    fi.base = {ru(rng, {n, d})};
    for (Tensor& t : rand_layer_tensors(rng, d, d_ff)) fi.base.push_back(t);
    fi.target = static_cast<size_t>(inst) % fi.base.size();
    fi.forward = [r, pe, scheme](const std::vector<Tensor>& t) {
      return sum_all(mul(encoder_layer_forward(t[0], pe, layer_from(t, 1, 2), scheme), r));
    };
    return run_fd(fi);
  });

  run_op("smlp", kFdTol, [](std::mt19937_64& rng, int inst) {
    const int64_t n = 4, d = 5;
    Tensor r = ru(rng, {n, d});
    Tensor m = Tensor::zeros({n, 1});
    for (int64_t i = 0; i < n; ++i) {
      const double u = uniform01(rng);
      m.at(i, 0) = u < 0.4 ? 0.0 : (u < 0.8 ? 1.0 : 0.5);
    }
    FdInstance fi;
    fi.base = {ru(rng, {n, d}), ru(rng, {d, d}), ru(rng, {d})};
    fi.target = static_cast<size_t>(inst % 3);
    fi.forward = [r, m](const std::vector<Tensor>& t) {
      return sum_all(mul(smlp(t[0], m, SmlpParams{t[1], t[2]}), r));
    };
    return run_fd(fi);
  });

  run_op("triple_attention", kFdTol, [](std::mt19937_64& rng, int inst) {
    const int64_t d = 4, d_ff = 6, n = 4;
    Tensor r1 = ru(rng, {n, d}), r2 = ru(rng, {n, d}), r3 = ru(rng, {n, d});
    Tensor pe = ru(rng, {n, d}, -0.5, 0.5);
    FgBgMask mask = mixed_mask(rng, n);
    const NormScheme scheme = inst % 2 == 0 ? NormScheme::kBranchLn : NormScheme::kPostAddLn;
    FdInstance fi;
    fi.base = {ru(rng, {n, d})};
    for (Tensor& t : rand_layer_tensors(rng, d, d_ff)) fi.base.push_back(t);
    for (Tensor& t : rand_teacher_tensors(rng, d)) fi.base.push_back(t);
    fi.target = static_cast<size_t>(inst) % fi.base.size();
    fi.forward = [r1, r2, r3, pe, mask, scheme](const std::vector<Tensor>& t) {
      EncoderLayerParams student = layer_from(t, 1, 2);
      TeacherParams teacher = teacher_from(t, 17);
      TripleOutputs out = triple_attention_forward(t[0], &mask, pe, student, &teacher,
                                                   AttentionMode::kTrain, scheme);
      return add(add(sum_all(mul(out.z1, r1)), sum_all(mul(out.z2, r2))),
                 sum_all(mul(out.z3, r3)));
    };
    return run_fd(fi);
  });

  auto criterion_instance = [](std::mt19937_64& rng, int inst, bool wrt_logits) {
    const int64_t n = 5, c = 3;
    // The empty-scene case only exercises the logits: with no ground truth
    // the box terms are constant zero and the boxes carry no gradient.
    const int64_t g = wrt_logits ? inst % 4 : 1 + inst % 3;
    GtObjects gt;
    gt.boxes = Tensor::zeros({g, 4});
    for (int64_t j = 0; j < g; ++j) {
      gt.boxes.at(j, 0) = 0.3 + 0.4 * uniform01(rng);
      gt.boxes.at(j, 1) = 0.3 + 0.4 * uniform01(rng);
      gt.boxes.at(j, 2) = 0.15 + 0.25 * uniform01(rng);
      gt.boxes.at(j, 3) = 0.15 + 0.25 * uniform01(rng);
      gt.classes.push_back(static_cast<int>(uniform01(rng) * c));
    }
    Tensor logits0 = ru(rng, {n, c + 1}, -1.5, 1.5);
    Tensor boxes0 = ru(rng, {n, 4}, 0.2, 0.8);
    const LossWeights weights;
    const MatchResult match = set_criterion(DetectionSet{logits0, boxes0}, gt, weights).match;
    FdInstance fi;
    fi.base = {wrt_logits ? logits0 : boxes0};
    fi.forward = [logits0, boxes0, gt, weights, match, wrt_logits](const std::vector<Tensor>& t) {
      DetectionSet det{wrt_logits ? t[0] : logits0, wrt_logits ? boxes0 : t[0]};
      return set_criterion_with_assignment(det, gt, weights, match).total;
    };
    return run_fd(fi);
  };
  run_op("set_criterion_logits", kFdTol,
         [&](std::mt19937_64& rng, int inst) { return criterion_instance(rng, inst, true); });
  run_op("set_criterion_boxes", kFdTol,
         [&](std::mt19937_64& rng, int inst) { return criterion_instance(rng, inst, false); });

  run_op("kl_distill", kFdTol, [](std::mt19937_64& rng, int inst) {
    const int64_t n = 3, k = 4;
    std::vector<Tensor> p;
    for (int h = 0; h < 2; ++h) p.push_back(softmax_rows(ru(rng, {n, k}, -1.5, 1.5)));
    FdInstance fi;
    fi.base = {ru(rng, {n, k}, -1.5, 1.5), ru(rng, {n, k}, -1.5, 1.5)};
    fi.target = static_cast<size_t>(inst % 2);
    fi.forward = [p](const std::vector<Tensor>& t) {
      return attention_distill_loss(p, {softmax_rows(t[0]), softmax_rows(t[1])});
    };
    return run_fd(fi);
  });

  run_op("shared_grad_decomposition", kDecompTol, [&](std::mt19937_64& rng, int inst) {
    const int64_t d = 4, d_ff = 6, n = 4;
    Tensor r1 = ru(rng, {n, d}), r2 = ru(rng, {n, d}), r3 = ru(rng, {n, d});
    Tensor pe = ru(rng, {n, d}, -0.5, 0.5);
    FgBgMask mask = mixed_mask(rng, n);
    const NormScheme scheme = inst % 2 == 0 ? NormScheme::kBranchLn : NormScheme::kPostAddLn;
    std::vector<Tensor> base = {ru(rng, {n, d})};
    for (Tensor& t : rand_layer_tensors(rng, d, d_ff)) base.push_back(t);
    for (Tensor& t : rand_teacher_tensors(rng, d)) base.push_back(t);
    Tape tape;
    std::vector<Tensor> leaves;
    for (const Tensor& t : base) leaves.push_back(tape.leaf(t));
    EncoderLayerParams student = layer_from(leaves, 1, 2);
    TeacherParams teacher = teacher_from(leaves, 17);
    TripleOutputs out = triple_attention_forward(leaves[0], &mask, pe, student, &teacher,
                                                 AttentionMode::kTrain, scheme);
    SharedGradReport rep = shared_gradient_decomposition(
        tape, sum_all(mul(out.z1, r1)), sum_all(mul(out.z2, r2)), sum_all(mul(out.z3, r3)),
        leaves[1], leaves[3], leaves[5]);
    if (!rep.within(kDecompTol)) return 1.0;  // covers the min-contribution guard
    double worst = 0.0;
    for (const SharedGradChannel* ch : {&rep.wq, &rep.wk, &rep.wv})
      worst = std::max({worst, ch->residual, ch->forbidden});
    return worst;
  });

  report.all_pass = true;
  for (const GradCheckEntry& e : report.entries) report.all_pass = report.all_pass && e.pass;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string format_report(const GradCheckReport& report) {
  std::string out = "op                         instances   max_rel_err  status\n";
  char line[128];
  for (const GradCheckEntry& e : report.entries) {
    std::snprintf(line, sizeof line, "%-26s %9d  %12.3e  %s\n", e.op.c_str(), e.instances,
                  e.max_rel_err, e.pass ? "ok" : "FAIL");
    out += line;
  }
  std::snprintf(line, sizeof line, "overall: %s (%.2f s)\n", report.all_pass ? "PASS" : "FAIL",
                report.seconds);
  out += line;
  return out;
}

}  // namespace ks
