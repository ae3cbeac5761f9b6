// SPDX-License-Identifier: Apache-2.0
//
// Sparse-MLP teacher fusion: background tokens pass through untouched,
// foreground tokens are replaced by ReLU(x W + b).

#pragma once

#include <random>

#include "tensor.hpp"

namespace ks {

struct SmlpParams {
  Tensor w_x;  // [d, d]
  Tensor b_x;  // [d]
};

// out = x (1 - m) + ReLU(x w_x + b_x) m, rowwise in the mask. Rows with
// m == 0 are copied bit-for-bit; fractional m blends. Differentiable in
// x and the params; the mask is a constant.
Tensor smlp(const Tensor& x, const Tensor& m, const SmlpParams& p);

int64_t smlp_param_count(int64_t d);  // d weights per row plus a bias: d(d+1)

// Scaled-identity start: w_x = diag*I + N(0, 0.01), b_x = 0. A diag above 1
// makes the fusion amplify foreground tokens from the first step instead of
// waiting for the optimizer to discover that the mask is worth using.
SmlpParams smlp_init(int64_t d, std::mt19937_64& rng, double diag = 1.0);

}  // namespace ks
