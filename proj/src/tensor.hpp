// SPDX-License-Identifier: Apache-2.0
//
// Dense tensor with reverse-mode autodiff over a define-by-run tape.
//
// A Tensor is a shape plus shared row-major double storage. Results of ops on
// tracked tensors are recorded on the tape that tracks their inputs; calling
// Tape::backward on a scalar then accumulates gradients for every tracked
// tensor on a path to it. Tensors without tracking are plain immutable values
// and the same op functions compute them with zero tape overhead, so forward
// (inference) and training share one code path.

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"

namespace ks {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);

class Tape;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double v);
  // 2-D literal, mostly for tests: Tensor::of({{1,2},{3,4}})
  static Tensor of(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vec(std::initializer_list<double> v);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t numel() const;
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  // 2-D view: rank-1 tensors read as a single row.
  int64_t rows() const;
  int64_t cols() const;

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  std::span<double> span() { return {data_->data(), data_->size()}; }
  std::span<const double> span() const { return {data_->data(), data_->size()}; }
  double& at(int64_t r, int64_t c) { return (*data_)[static_cast<size_t>(r * cols() + c)]; }
  double at(int64_t r, int64_t c) const { return (*data_)[static_cast<size_t>(r * cols() + c)]; }
  double value() const;  // numel()==1 only

  bool tracked() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Same storage, no tape association. Use before letting a tensor outlive
  // the tape that produced it.
  Tensor detached() const;
  // Deep copy of the data, untracked.
  Tensor clone() const;

 private:
  friend class Tape;
  std::shared_ptr<std::vector<double>> data_;
  Shape shape_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Reverse-mode tape. Rebuilt each forward pass; single-threaded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Marks `value` (untracked) as a differentiable leaf. The returned tensor
  // shares storage with `value`, so in-place parameter updates through the
  // original remain visible.
  Tensor leaf(const Tensor& value);

  // Extension point used by every op: allocate the output, run `compute`
  // into it, and register `backprop` which receives d(loss)/d(out) and must
  // accumulate into input gradients via grad_buffer().
  Tensor record(Shape shape, std::function<void(double*)> compute,
                std::function<void(const double*)> backprop);

  // Clears any previous gradient state, then backpropagates from `loss`
  // (a scalar recorded on this tape).
  void backward(const Tensor& loss);

  // Gradient of the last backward() w.r.t. `t`; zeros if `t` was not on any
  // path to the loss. `t` must be tracked on this tape.
  Tensor grad(const Tensor& t) const;

  // For backprop closures: gradient accumulation buffer of `t`, allocated
  // zero-filled on first use. Null if `t` is untracked or foreign.
  double* grad_buffer(const Tensor& t);

  // Re-executes every recorded computation in order, writing into the
  // original output buffers.
  void replay();

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<std::vector<double>> out;
    Shape shape;
    std::function<void(double*)> compute;        // null for leaves
    std::function<void(const double*)> backprop; // null for leaves
    std::unique_ptr<std::vector<double>> grad;
  };
  std::vector<Node> nodes_;
};

// Common tape of the tracked operands; error if two operands disagree.
Tape* common_tape(std::initializer_list<const Tensor*> ts);

// ---- differentiable ops -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materializing the transpose (q k^T in attention).
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor div_elem(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);  // ties keep a
Tensor maximum(const Tensor& a, const Tensor& b);  // ties keep a
Tensor scale(const Tensor& x, double k);
Tensor add_scalar(const Tensor& x, double c);
Tensor add_rowvec(const Tensor& x, const Tensor& b);  // [m,n] + [n]

Tensor relu(const Tensor& x);      // derivative at 0 is 0
Tensor abs_elem(const Tensor& x);  // derivative at 0 is 0
Tensor log_elem(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1);
Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1);
Tensor gather_rows(const Tensor& x, std::vector<int64_t> idx);
// Entries (r,c) as a [k,1] column.
Tensor gather_entries(const Tensor& x, std::vector<std::pair<int64_t, int64_t>> idx);

Tensor sum_all(const Tensor& x);  // scalar [1]
// x w + b row-broadcast; w [in,out], b [out] (pass undefined b to skip).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- gradient oracle --------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// `value_fn` must be a pure function of x; `analytic` is d value / d x at x.
// h must lie in [1e-7, 1e-3].
double finite_difference_check(const std::function<double(const Tensor&)>& value_fn,
                               const Tensor& analytic, const Tensor& x,
                               double h = 1e-5);

}  // namespace ks
