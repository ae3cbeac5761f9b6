// SPDX-License-Identifier: Apache-2.0
//
// Knowledge-sharing triple attention. A teacher feature (mask-fused tokens)
// contributes two extra attention branches to the last encoder layer:
//
//   branch 1: (A,   V)    the student attention, kept at inference
//   branch 2: (A,   V^t)  student map shared into teacher values
//   branch 3: (A^t, V)    teacher map shared into student values
//
// Sharing is literal: branch 2 consumes the same attention-map nodes branch 1
// produced, branch 3 the same value nodes, so gradients from every branch
// accumulate on the shared projections. All branches run through the one
// output projection / layer-norm / FFN tail; only activations are per-branch.

#pragma once

#include <random>
#include <vector>

#include "attention.hpp"
#include "mask.hpp"
#include "smlp.hpp"
#include "tensor.hpp"

namespace ks {

struct TeacherAttentionParams {
  Tensor w_qt, b_qt, w_kt, b_kt, w_vt, b_vt;
};

struct TeacherParams {
  SmlpParams smlp;
  TeacherAttentionParams attn;
};

// kTrain runs all three branches, the duals drop one teacher branch, kInfer
// is the plain student layer and never touches teacher parameters.
enum class AttentionMode { kTrain, kInfer, kDualShareA, kDualShareV };

AttentionMode attention_mode_from_string(const std::string& s);
std::string to_string(AttentionMode m);

struct TripleOutputs {
  Tensor z1, z2, z3;  // z2/z3 stay undefined in modes that drop their branch
  std::vector<Tensor> a1, v1;   // student per-head maps / values
  std::vector<Tensor> a_t, v_t; // teacher per-head maps / values (when built)
};

struct TeacherProjections {
  Tensor q_t, k_t, v_t;  // full-width; PE enters q_t and k_t only
};

TeacherProjections teacher_projections(const Tensor& x_t, const Tensor& pe,
                                       const TeacherAttentionParams& p);

// Student copy plus N(0, sigma^2) noise; sigma = 0 gives exact copies.
TeacherAttentionParams teacher_attention_init(const QkvParams& student,
                                              std::mt19937_64& rng,
                                              double sigma = 0.01);

// Fresh projections whose query and key matrices start EQUAL, making the
// teacher's logits a Gram form: approximately the inner product of
// (token + PE) pairs.  The positional encodings contribute a locality kernel
// and the mask-amplified content a similarity kernel, so nearby same-object
// foreground tokens pool together from the first step -- the mask helps per
// object, not just per scene.  Values are an independent draw; biases zero.
TeacherAttentionParams teacher_attention_similarity_init(int64_t d,
                                                         std::mt19937_64& rng);

// mask/teacher may be null in kInfer mode only.
TripleOutputs triple_attention_forward(const Tensor& x, const FgBgMask* mask,
                                       const Tensor& pe,
                                       const EncoderLayerParams& student,
                                       const TeacherParams* teacher,
                                       AttentionMode mode, NormScheme scheme);

// Residuals of the gradient decomposition across branch losses for one shared
// projection: combined-loss gradient minus the sum of the per-branch
// gradients that reach the parameter, plus the gradient magnitude of the
// branch that must not reach it.
struct SharedGradChannel {
  double residual = 0;          // |grad(l1+l2+l3) - sum of expected parts|
  double forbidden = 0;         // |grad from the non-contributing branch|
  double min_contribution = 0;  // smaller of the two expected-branch grads
};

struct SharedGradReport {
  SharedGradChannel wq, wk, wv;
  bool within(double tol) const;
};

// l1/l2/l3 are scalar branch losses recorded on `tape`; wq/wk/wv the tracked
// student projection weights. Runs four backward passes.
SharedGradReport shared_gradient_decomposition(Tape& tape, const Tensor& l1,
                                               const Tensor& l2,
                                               const Tensor& l3,
                                               const Tensor& wq,
                                               const Tensor& wk,
                                               const Tensor& wv);

}  // namespace ks
