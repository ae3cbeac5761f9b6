// SPDX-License-Identifier: Apache-2.0

#include "smlp.hpp"

#include "common.hpp"

namespace ks {

namespace {

// Rowwise mask blend, fused so that m == 0 rows are byte-for-byte copies of
// x (a composed x*(1-m) + r*m would already lose -0.0 payloads).
Tensor mask_blend(const Tensor& x, const Tensor& r, const Tensor& m) {
  const int64_t n = x.numel(), cols = x.cols();
  Tensor xs = x, rs = r, ms = m;
  auto compute = [xs, rs, ms, n, cols](double* out) {
    const double* xd = xs.data();
    const double* rd = rs.data();
    const double* md = ms.data();
    for (int64_t i = 0; i < n; ++i) {
      const double mi = md[i / cols];
      if (mi == 0.0)
        out[i] = xd[i];
      else if (mi == 1.0)
        out[i] = rd[i];
      else
        out[i] = xd[i] * (1.0 - mi) + rd[i] * mi;
    }
  };
  Tape* tape = common_tape({&x, &r});
  if (tape == nullptr) {
    Tensor out(x.shape());
    compute(out.data());
    return out;
  }
  return tape->record(
      x.shape(), compute, [xs, rs, ms, n, cols, tape](const double* g) {
        const double* md = ms.data();
        double* gx = tape->grad_buffer(xs);
        double* gr = tape->grad_buffer(rs);
        for (int64_t i = 0; i < n; ++i) {
          const double mi = md[i / cols];
          if (gx != nullptr) gx[i] += g[i] * (1.0 - mi);
          if (gr != nullptr) gr[i] += g[i] * mi;
        }
      });
}

}  // namespace

Tensor smlp(const Tensor& x, const Tensor& m, const SmlpParams& p) {
  if (m.numel() != x.rows())
    fail(ErrorKind::kShape,
         "smlp: mask length " + std::to_string(m.numel()) +
             " does not match " + std::to_string(x.rows()) + " tokens");
  if (p.w_x.rows() != x.cols() || p.w_x.cols() != x.cols())
    fail(ErrorKind::kShape, "smlp: weight shape does not match token width");
  return mask_blend(x, relu(linear(x, p.w_x, p.b_x)), m);
}

int64_t smlp_param_count(int64_t d) { return d * (d + 1); }

SmlpParams smlp_init(int64_t d, std::mt19937_64& rng, double diag) {
  SmlpParams p;
  p.w_x = Tensor::zeros({d, d});
  for (int64_t i = 0; i < d; ++i)
    for (int64_t j = 0; j < d; ++j)
      p.w_x.at(i, j) = (i == j ? diag : 0.0) + 0.01 * rand_normal(rng);
  p.b_x = Tensor::zeros({d});
  return p;
}

}  // namespace ks
