// SPDX-License-Identifier: Apache-2.0

#include "tensor.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <sstream>

namespace ks {

namespace {

using EMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                            Eigen::RowMajor>>;
using EMapMut = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                         Eigen::RowMajor>>;

EMap emap(const double* p, int64_t r, int64_t c) { return EMap(p, r, c); }
EMapMut emap(double* p, int64_t r, int64_t c) { return EMapMut(p, r, c); }

void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    fail(ErrorKind::kShape, std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_finite(const Tensor& x, const char* op) {
  for (double v : x.span())
    if (std::isnan(v)) fail(ErrorKind::kNumeric, std::string(op) + ": NaN input");
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape)
    : data_(std::make_shared<std::vector<double>>(static_cast<size_t>(numel_of(shape)), 0.0)),
      shape_(std::move(shape)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (numel_of(shape_) != static_cast<int64_t>(values.size()))
    fail(ErrorKind::kShape, "tensor data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape_));
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  for (double& x : *t.data_) x = v;
  return t;
}

Tensor Tensor::of(std::initializer_list<std::initializer_list<double>> rows) {
  int64_t r = static_cast<int64_t>(rows.size());
  int64_t c = r ? static_cast<int64_t>(rows.begin()->size()) : 0;
  std::vector<double> v;
  v.reserve(static_cast<size_t>(r * c));
  for (const auto& row : rows) {
    if (static_cast<int64_t>(row.size()) != c)
      fail(ErrorKind::kShape, "ragged rows in tensor literal");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::vec(std::initializer_list<double> v) {
  return Tensor({static_cast<int64_t>(v.size())}, std::vector<double>(v));
}

int64_t Tensor::numel() const { return numel_of(shape_); }

int64_t Tensor::rows() const {
  if (rank() == 1) return 1;
  require(rank() == 2, ErrorKind::kShape, "rows(): tensor is not 2-D");
  return shape_[0];
}

int64_t Tensor::cols() const {
  if (rank() == 1) return shape_[0];
  require(rank() == 2, ErrorKind::kShape, "cols(): tensor is not 2-D");
  return shape_[1];
}

double Tensor::value() const {
  require(numel() == 1, ErrorKind::kContract,
          "value(): tensor has " + std::to_string(numel()) + " elements");
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  return t;
}

// ---- Tape -------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& value) {
  require(value.defined(), ErrorKind::kContract, "leaf(): undefined tensor");
  require(!value.tracked(), ErrorKind::kContract, "leaf(): tensor already tracked");
  Tensor t = value;
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{value.data_, value.shape_, nullptr, nullptr, nullptr});
  return t;
}

Tensor Tape::record(Shape shape, std::function<void(double*)> compute,
                    std::function<void(const double*)> backprop) {
  Tensor out(shape);
  compute(out.data());
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{out.data_, std::move(shape), std::move(compute),
                        std::move(backprop), nullptr});
  return out;
}

void Tape::backward(const Tensor& loss) {
  require(loss.tracked() && loss.tape() == this, ErrorKind::kContract,
          "backward(): loss was not produced on this tape");
  require(loss.numel() == 1, ErrorKind::kContract, "backward(): loss must be scalar");
  for (Node& n : nodes_) n.grad.reset();
  Node& ln = nodes_[static_cast<size_t>(loss.node())];
  ln.grad = std::make_unique<std::vector<double>>(1, 1.0);
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad && n.backprop) n.backprop(n.grad->data());
  }
}

Tensor Tape::grad(const Tensor& t) const {
  require(t.tracked() && t.tape() == this, ErrorKind::kContract,
          "grad(): tensor not tracked on this tape");
  const Node& n = nodes_[static_cast<size_t>(t.node())];
  if (!n.grad) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), *n.grad);
}

double* Tape::grad_buffer(const Tensor& t) {
  if (!t.tracked() || t.tape() != this) return nullptr;
  Node& n = nodes_[static_cast<size_t>(t.node())];
  if (!n.grad)
    n.grad = std::make_unique<std::vector<double>>(n.out->size(), 0.0);
  return n.grad->data();
}

void Tape::replay() {
  for (Node& n : nodes_)
    if (n.compute) n.compute(n.out->data());
}

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->tracked()) continue;
    if (tape && t->tape() != tape)
      fail(ErrorKind::kContract, "operands tracked on different tapes");
    tape = t->tape();
  }
  return tape;
}

// ---- op helpers -------------------------------------------------------------

namespace {

// Untracked fast path / tracked record in one place.
Tensor make_op(Tape* tape, Shape shape, std::function<void(double*)> compute,
               const std::function<void(const double*)>& backprop) {
  if (!tape) {
    Tensor out(std::move(shape));
    compute(out.data());
    return out;
  }
  return tape->record(std::move(shape), std::move(compute), backprop);
}

using BinKernel = void (*)(const double*, const double*, double*, int64_t);
using BinGrad = void (*)(const double* a, const double* b, const double* g,
                         double* ga, double* gb, int64_t n);

Tensor binary_op(const char* name, const Tensor& a, const Tensor& b,
                 BinKernel fwd, BinGrad bwd) {
  check_same_shape(a, b, name);
  Tape* tp = common_tape({&a, &b});
  int64_t n = a.numel();
  return make_op(
      tp, a.shape(), [a, b, fwd, n](double* out) { fwd(a.data(), b.data(), out, n); },
      [a, b, bwd, n, tp](const double* g) {
        bwd(a.data(), b.data(), g, tp->grad_buffer(a), tp->grad_buffer(b), n);
      });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::kShape, "matmul: need 2-D operands");
  require(a.cols() == b.rows(), ErrorKind::kShape,
          "matmul: inner dimensions disagree: " + shape_str(a.shape()) + " * " +
              shape_str(b.shape()));
  int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tape* tp = common_tape({&a, &b});
  return make_op(
      tp, {m, n},
      [a, b, m, k, n](double* out) {
        emap(out, m, n).noalias() = emap(a.data(), m, k) * emap(b.data(), k, n);
      },
      [a, b, m, k, n, tp](const double* g) {
        if (double* ga = tp->grad_buffer(a))
          emap(ga, m, k).noalias() += emap(g, m, n) * emap(b.data(), k, n).transpose();
        if (double* gb = tp->grad_buffer(b))
          emap(gb, k, n).noalias() += emap(a.data(), m, k).transpose() * emap(g, m, n);
      });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorKind::kShape, "matmul_nt: need 2-D operands");
  require(a.cols() == b.cols(), ErrorKind::kShape,
          "matmul_nt: column dimensions disagree: " + shape_str(a.shape()) + " * " +
              shape_str(b.shape()) + "^T");
  int64_t m = a.rows(), k = a.cols(), n = b.rows();
  Tape* tp = common_tape({&a, &b});
  return make_op(
      tp, {m, n},
      [a, b, m, k, n](double* out) {
        emap(out, m, n).noalias() =
            emap(a.data(), m, k) * emap(b.data(), n, k).transpose();
      },
      [a, b, m, k, n, tp](const double* g) {
        if (double* ga = tp->grad_buffer(a))
          emap(ga, m, k).noalias() += emap(g, m, n) * emap(b.data(), n, k);
        if (double* gb = tp->grad_buffer(b))
          emap(gb, n, k).noalias() += emap(g, m, n).transpose() * emap(a.data(), m, k);
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b,
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] + y[i];
      },
      [](const double*, const double*, const double* g, double* ga, double* gb,
         int64_t n) {
        if (ga)
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        if (gb)
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b,
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] - y[i];
      },
      [](const double*, const double*, const double* g, double* ga, double* gb,
         int64_t n) {
        if (ga)
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        if (gb)
          for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b,
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] * y[i];
      },
      [](const double* x, const double* y, const double* g, double* ga, double* gb,
         int64_t n) {
        if (ga)
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
        if (gb)
          for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * x[i];
      });
}

Tensor div_elem(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b,
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] / y[i];
      },
      [](const double* x, const double* y, const double* g, double* ga, double* gb,
         int64_t n) {
        if (ga)
          for (int64_t i = 0; i < n; ++i) ga[i] += g[i] / y[i];
        if (gb)
          for (int64_t i = 0; i < n; ++i) gb[i] -= g[i] * x[i] / (y[i] * y[i]);
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "minimum", a, b,
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] <= y[i] ? x[i] : y[i];
      },
      [](const double* x, const double* y, const double* g, double* ga, double* gb,
         int64_t n) {
        for (int64_t i = 0; i < n; ++i) {
          if (x[i] <= y[i]) {
            if (ga) ga[i] += g[i];
          } else if (gb) {
            gb[i] += g[i];
          }
        }
      });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary_op(
      "maximum", a, b,
      [](const double* x, const double* y, double* o, int64_t n) {
        for (int64_t i = 0; i < n; ++i) o[i] = x[i] >= y[i] ? x[i] : y[i];
      },
      [](const double* x, const double* y, const double* g, double* ga, double* gb,
         int64_t n) {
        for (int64_t i = 0; i < n; ++i) {
          if (x[i] >= y[i]) {
            if (ga) ga[i] += g[i];
          } else if (gb) {
            gb[i] += g[i];
          }
        }
      });
}

Tensor scale(const Tensor& x, double k) {
  Tape* tp = common_tape({&x});
  int64_t n = x.numel();
  return make_op(
      tp, x.shape(),
      [x, k, n](double* o) {
        const double* p = x.data();
        for (int64_t i = 0; i < n; ++i) o[i] = k * p[i];
      },
      [x, k, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x))
          for (int64_t i = 0; i < n; ++i) gx[i] += k * g[i];
      });
}

Tensor add_scalar(const Tensor& x, double c) {
  Tape* tp = common_tape({&x});
  int64_t n = x.numel();
  return make_op(
      tp, x.shape(),
      [x, c, n](double* o) {
        const double* p = x.data();
        for (int64_t i = 0; i < n; ++i) o[i] = p[i] + c;
      },
      [x, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x))
          for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
      });
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  require(x.rank() == 2, ErrorKind::kShape, "add_rowvec: x must be 2-D");
  require(b.numel() == x.cols(), ErrorKind::kShape,
          "add_rowvec: bias length " + std::to_string(b.numel()) +
              " does not match columns of " + shape_str(x.shape()));
  int64_t m = x.rows(), n = x.cols();
  Tape* tp = common_tape({&x, &b});
  return make_op(
      tp, x.shape(),
      [x, b, m, n](double* o) {
        const double* px = x.data();
        const double* pb = b.data();
        for (int64_t r = 0; r < m; ++r)
          for (int64_t c = 0; c < n; ++c) o[r * n + c] = px[r * n + c] + pb[c];
      },
      [x, b, m, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x))
          for (int64_t i = 0; i < m * n; ++i) gx[i] += g[i];
        if (double* gb = tp->grad_buffer(b))
          for (int64_t r = 0; r < m; ++r)
            for (int64_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
      });
}

Tensor relu(const Tensor& x) {
  Tape* tp = common_tape({&x});
  int64_t n = x.numel();
  return make_op(
      tp, x.shape(),
      [x, n](double* o) {
        const double* p = x.data();
        for (int64_t i = 0; i < n; ++i) o[i] = p[i] > 0.0 ? p[i] : 0.0;
      },
      [x, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x)) {
          const double* p = x.data();
          for (int64_t i = 0; i < n; ++i)
            if (p[i] > 0.0) gx[i] += g[i];
        }
      });
}

Tensor abs_elem(const Tensor& x) {
  Tape* tp = common_tape({&x});
  int64_t n = x.numel();
  return make_op(
      tp, x.shape(),
      [x, n](double* o) {
        const double* p = x.data();
        for (int64_t i = 0; i < n; ++i) o[i] = std::fabs(p[i]);
      },
      [x, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x)) {
          const double* p = x.data();
          for (int64_t i = 0; i < n; ++i) {
            if (p[i] > 0.0)
              gx[i] += g[i];
            else if (p[i] < 0.0)
              gx[i] -= g[i];
          }
        }
      });
}

Tensor log_elem(const Tensor& x) {
  Tape* tp = common_tape({&x});
  int64_t n = x.numel();
  return make_op(
      tp, x.shape(),
      [x, n](double* o) {
        const double* p = x.data();
        for (int64_t i = 0; i < n; ++i) o[i] = std::log(p[i]);
      },
      [x, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x)) {
          const double* p = x.data();
          for (int64_t i = 0; i < n; ++i) gx[i] += g[i] / p[i];
        }
      });
}

Tensor sigmoid(const Tensor& x) {
  Tape* tp = common_tape({&x});
  int64_t n = x.numel();
  auto fwd = [x, n](double* o) {
    const double* p = x.data();
    for (int64_t i = 0; i < n; ++i) o[i] = 1.0 / (1.0 + std::exp(-p[i]));
  };
  if (!tp) {
    Tensor out(x.shape());
    fwd(out.data());
    return out;
  }
  // sigmoid' = s (1 - s); recompute s in backward from the input
  return tp->record(x.shape(), fwd, [x, n, tp](const double* g) {
    if (double* gx = tp->grad_buffer(x)) {
      const double* p = x.data();
      for (int64_t i = 0; i < n; ++i) {
        double s = 1.0 / (1.0 + std::exp(-p[i]));
        gx[i] += g[i] * s * (1.0 - s);
      }
    }
  });
}

namespace {

void softmax_rows_into(const double* p, double* o, int64_t m, int64_t n) {
  for (int64_t r = 0; r < m; ++r) {
    const double* row = p + r * n;
    double* out = o + r * n;
    double mx = row[0];
    for (int64_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    double s = 0.0;
    for (int64_t c = 0; c < n; ++c) {
      out[c] = std::exp(row[c] - mx);
      s += out[c];
    }
    double inv = 1.0 / s;
    for (int64_t c = 0; c < n; ++c) out[c] *= inv;
  }
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  require(x.rank() == 2, ErrorKind::kShape, "softmax_rows: x must be 2-D");
  check_finite(x, "softmax_rows");
  int64_t m = x.rows(), n = x.cols();
  Tape* tp = common_tape({&x});
  return make_op(
      tp, x.shape(),
      [x, m, n](double* o) { softmax_rows_into(x.data(), o, m, n); },
      [x, m, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x)) {
          // ds_i = s_i (g_i - sum_j g_j s_j); recompute s from x
          std::vector<double> s(static_cast<size_t>(m * n));
          softmax_rows_into(x.data(), s.data(), m, n);
          for (int64_t r = 0; r < m; ++r) {
            const double* sr = s.data() + r * n;
            const double* gr = g + r * n;
            double dot = 0.0;
            for (int64_t c = 0; c < n; ++c) dot += gr[c] * sr[c];
            double* gxr = gx + r * n;
            for (int64_t c = 0; c < n; ++c) gxr[c] += sr[c] * (gr[c] - dot);
          }
        }
      });
}

Tensor log_softmax_rows(const Tensor& x) {
  require(x.rank() == 2, ErrorKind::kShape, "log_softmax_rows: x must be 2-D");
  check_finite(x, "log_softmax_rows");
  int64_t m = x.rows(), n = x.cols();
  Tape* tp = common_tape({&x});
  return make_op(
      tp, x.shape(),
      [x, m, n](double* o) {
        const double* p = x.data();
        for (int64_t r = 0; r < m; ++r) {
          const double* row = p + r * n;
          double* out = o + r * n;
          double mx = row[0];
          for (int64_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
          double s = 0.0;
          for (int64_t c = 0; c < n; ++c) s += std::exp(row[c] - mx);
          double lse = mx + std::log(s);
          for (int64_t c = 0; c < n; ++c) out[c] = row[c] - lse;
        }
      },
      [x, m, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x)) {
          std::vector<double> s(static_cast<size_t>(m * n));
          softmax_rows_into(x.data(), s.data(), m, n);
          for (int64_t r = 0; r < m; ++r) {
            const double* sr = s.data() + r * n;
            const double* gr = g + r * n;
            double gsum = 0.0;
            for (int64_t c = 0; c < n; ++c) gsum += gr[c];
            double* gxr = gx + r * n;
            for (int64_t c = 0; c < n; ++c) gxr[c] += gr[c] - sr[c] * gsum;
          }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  require(x.rank() == 2, ErrorKind::kShape, "layer_norm: x must be 2-D");
  int64_t m = x.rows(), d = x.cols();
  require(d >= 2, ErrorKind::kShape, "layer_norm: needs at least 2 features");
  require(gamma.numel() == d && beta.numel() == d, ErrorKind::kShape,
          "layer_norm: affine parameters must have length " + std::to_string(d));
  Tape* tp = common_tape({&x, &gamma, &beta});
  return make_op(
      tp, x.shape(),
      [x, gamma, beta, m, d, eps](double* o) {
        const double* px = x.data();
        const double* pg = gamma.data();
        const double* pb = beta.data();
        for (int64_t r = 0; r < m; ++r) {
          const double* row = px + r * d;
          double* out = o + r * d;
          double mean = 0.0;
          for (int64_t c = 0; c < d; ++c) mean += row[c];
          mean /= static_cast<double>(d);
          double var = 0.0;
          for (int64_t c = 0; c < d; ++c) {
            double t = row[c] - mean;
            var += t * t;
          }
          var /= static_cast<double>(d);
          double inv = 1.0 / std::sqrt(var + eps);
          for (int64_t c = 0; c < d; ++c)
            out[c] = pg[c] * ((row[c] - mean) * inv) + pb[c];
        }
      },
      [x, gamma, beta, m, d, eps, tp](const double* g) {
        double* gx = tp->grad_buffer(x);
        double* gg = tp->grad_buffer(gamma);
        double* gb = tp->grad_buffer(beta);
        const double* px = x.data();
        const double* pg = gamma.data();
        for (int64_t r = 0; r < m; ++r) {
          const double* row = px + r * d;
          const double* gr = g + r * d;
          double mean = 0.0;
          for (int64_t c = 0; c < d; ++c) mean += row[c];
          mean /= static_cast<double>(d);
          double var = 0.0;
          for (int64_t c = 0; c < d; ++c) {
            double t = row[c] - mean;
            var += t * t;
          }
          var /= static_cast<double>(d);
          double inv = 1.0 / std::sqrt(var + eps);
          // xhat, then the standard layer-norm backward per row
          double sum_gy = 0.0, sum_gyx = 0.0;
          for (int64_t c = 0; c < d; ++c) {
            double xhat = (row[c] - mean) * inv;
            double gy = gr[c] * pg[c];
            sum_gy += gy;
            sum_gyx += gy * xhat;
            if (gg) gg[c] += gr[c] * xhat;
            if (gb) gb[c] += gr[c];
          }
          if (gx) {
            double* gxr = gx + r * d;
            double nd = static_cast<double>(d);
            for (int64_t c = 0; c < d; ++c) {
              double xhat = (row[c] - mean) * inv;
              double gy = gr[c] * pg[c];
              gxr[c] += inv * (gy - sum_gy / nd - xhat * sum_gyx / nd);
            }
          }
        }
      });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorKind::kShape, "concat_rows: no parts");
  int64_t cols = parts[0].cols(), rows = 0;
  Tape* tp = nullptr;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.cols() == cols, ErrorKind::kShape,
            "concat_rows: column counts differ");
    rows += p.rows();
    if (p.tracked()) {
      if (tp && p.tape() != tp)
        fail(ErrorKind::kContract, "operands tracked on different tapes");
      tp = p.tape();
    }
  }
  auto ps = parts;  // own copies in the closures
  return make_op(
      tp, {rows, cols},
      [ps, cols](double* o) {
        int64_t off = 0;
        for (const Tensor& p : ps) {
          std::memcpy(o + off, p.data(), sizeof(double) * static_cast<size_t>(p.numel()));
          off += p.numel();
        }
      },
      [ps, tp](const double* g) {
        int64_t off = 0;
        for (const Tensor& p : ps) {
          if (double* gp = tp->grad_buffer(p))
            for (int64_t i = 0; i < p.numel(); ++i) gp[i] += g[off + i];
          off += p.numel();
        }
      });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorKind::kShape, "concat_cols: no parts");
  int64_t rows = parts[0].rows(), cols = 0;
  Tape* tp = nullptr;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.rows() == rows, ErrorKind::kShape,
            "concat_cols: row counts differ");
    cols += p.cols();
    if (p.tracked()) {
      if (tp && p.tape() != tp)
        fail(ErrorKind::kContract, "operands tracked on different tapes");
      tp = p.tape();
    }
  }
  auto ps = parts;
  return make_op(
      tp, {rows, cols},
      [ps, rows, cols](double* o) {
        int64_t coff = 0;
        for (const Tensor& p : ps) {
          int64_t pc = p.cols();
          const double* src = p.data();
          for (int64_t r = 0; r < rows; ++r)
            std::memcpy(o + r * cols + coff, src + r * pc,
                        sizeof(double) * static_cast<size_t>(pc));
          coff += pc;
        }
      },
      [ps, rows, cols, tp](const double* g) {
        int64_t coff = 0;
        for (const Tensor& p : ps) {
          int64_t pc = p.cols();
          if (double* gp = tp->grad_buffer(p))
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t c = 0; c < pc; ++c)
                gp[r * pc + c] += g[r * cols + coff + c];
          coff += pc;
        }
      });
}

Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1) {
  require(x.rank() == 2, ErrorKind::kShape, "slice_rows: x must be 2-D");
  require(0 <= r0 && r0 <= r1 && r1 <= x.rows(), ErrorKind::kShape,
          "slice_rows: range out of bounds");
  int64_t n = x.cols(), m = r1 - r0;
  Tape* tp = common_tape({&x});
  return make_op(
      tp, {m, n},
      [x, r0, m, n](double* o) {
        std::memcpy(o, x.data() + r0 * n, sizeof(double) * static_cast<size_t>(m * n));
      },
      [x, r0, m, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x))
          for (int64_t i = 0; i < m * n; ++i) gx[r0 * n + i] += g[i];
      });
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  require(x.rank() == 2, ErrorKind::kShape, "slice_cols: x must be 2-D");
  require(0 <= c0 && c0 <= c1 && c1 <= x.cols(), ErrorKind::kShape,
          "slice_cols: range out of bounds");
  int64_t m = x.rows(), n = x.cols(), w = c1 - c0;
  Tape* tp = common_tape({&x});
  return make_op(
      tp, {m, w},
      [x, c0, m, n, w](double* o) {
        const double* p = x.data();
        for (int64_t r = 0; r < m; ++r)
          std::memcpy(o + r * w, p + r * n + c0, sizeof(double) * static_cast<size_t>(w));
      },
      [x, c0, m, n, w, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x))
          for (int64_t r = 0; r < m; ++r)
            for (int64_t c = 0; c < w; ++c) gx[r * n + c0 + c] += g[r * w + c];
      });
}

Tensor gather_rows(const Tensor& x, std::vector<int64_t> idx) {
  require(x.rank() == 2, ErrorKind::kShape, "gather_rows: x must be 2-D");
  for (int64_t i : idx)
    require(0 <= i && i < x.rows(), ErrorKind::kShape, "gather_rows: index out of range");
  int64_t n = x.cols(), k = static_cast<int64_t>(idx.size());
  Tape* tp = common_tape({&x});
  auto ix = std::make_shared<std::vector<int64_t>>(std::move(idx));
  return make_op(
      tp, {k, n},
      [x, ix, n](double* o) {
        const double* p = x.data();
        for (size_t r = 0; r < ix->size(); ++r)
          std::memcpy(o + static_cast<int64_t>(r) * n, p + (*ix)[r] * n,
                      sizeof(double) * static_cast<size_t>(n));
      },
      [x, ix, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x))
          for (size_t r = 0; r < ix->size(); ++r)
            for (int64_t c = 0; c < n; ++c)
              gx[(*ix)[r] * n + c] += g[static_cast<int64_t>(r) * n + c];
      });
}

Tensor gather_entries(const Tensor& x, std::vector<std::pair<int64_t, int64_t>> idx) {
  require(x.rank() == 2, ErrorKind::kShape, "gather_entries: x must be 2-D");
  for (auto [r, c] : idx)
    require(0 <= r && r < x.rows() && 0 <= c && c < x.cols(), ErrorKind::kShape,
            "gather_entries: index out of range");
  int64_t n = x.cols(), k = static_cast<int64_t>(idx.size());
  Tape* tp = common_tape({&x});
  auto ix = std::make_shared<std::vector<std::pair<int64_t, int64_t>>>(std::move(idx));
  return make_op(
      tp, {k, 1},
      [x, ix, n](double* o) {
        const double* p = x.data();
        for (size_t i = 0; i < ix->size(); ++i)
          o[i] = p[(*ix)[i].first * n + (*ix)[i].second];
      },
      [x, ix, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x))
          for (size_t i = 0; i < ix->size(); ++i)
            gx[(*ix)[i].first * n + (*ix)[i].second] += g[i];
      });
}

Tensor sum_all(const Tensor& x) {
  Tape* tp = common_tape({&x});
  int64_t n = x.numel();
  return make_op(
      tp, {1},
      [x, n](double* o) {
        const double* p = x.data();
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += p[i];
        o[0] = s;
      },
      [x, n, tp](const double* g) {
        if (double* gx = tp->grad_buffer(x))
          for (int64_t i = 0; i < n; ++i) gx[i] += g[0];
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (!b.defined()) return y;
  return add_rowvec(y, b);
}

double finite_difference_check(const std::function<double(const Tensor&)>& value_fn,
                               const Tensor& analytic, const Tensor& x, double h) {
  require(h >= 1e-7 && h <= 1e-3, ErrorKind::kContract,
          "finite_difference_check: h outside [1e-7, 1e-3]");
  require(analytic.shape() == x.shape(), ErrorKind::kShape,
          "finite_difference_check: gradient shape mismatch");
  Tensor probe = x.clone();
  double max_err = 0.0;
  for (int64_t i = 0; i < probe.numel(); ++i) {
    double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    double fp = value_fn(probe);
    probe.data()[i] = orig - h;
    double fm = value_fn(probe);
    probe.data()[i] = orig;
    double central = (fp - fm) / (2.0 * h);
    double a = analytic.data()[i];
    double err = std::fabs(a - central) / std::max(1.0, std::fabs(a));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace ks
