// SPDX-License-Identifier: Apache-2.0

#include "matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "common.hpp"

namespace ks {

GtObjects normalize_gt(const std::vector<GtBox>& boxes, int64_t h0,
                       int64_t w0) {
  GtObjects out;
  const auto g = static_cast<int64_t>(boxes.size());
  out.boxes = Tensor::zeros({g, 4});
  out.classes.reserve(boxes.size());
  const double w = static_cast<double>(w0), h = static_cast<double>(h0);
  for (int64_t i = 0; i < g; ++i) {
    const GtBox& b = boxes[static_cast<size_t>(i)];
    out.boxes.at(i, 0) = (b.x1 + b.x2) / (2.0 * w);
    out.boxes.at(i, 1) = (b.y1 + b.y2) / (2.0 * h);
    out.boxes.at(i, 2) = (b.x2 - b.x1) / w;
    out.boxes.at(i, 3) = (b.y2 - b.y1) / h;
    out.classes.push_back(b.class_id);
  }
  return out;
}

MatchResult hungarian_match(const Tensor& cost) {
  const int64_t n_rows = cost.rows(), n_cols = cost.cols();
  if (n_cols > n_rows)
    fail(ErrorKind::kContract, "hungarian_match: more ground truths (" +
                                   std::to_string(n_cols) + ") than queries (" +
                                   std::to_string(n_rows) + ")");
  for (double v : cost.span())
    if (!std::isfinite(v))
      fail(ErrorKind::kNumeric, "hungarian_match: non-finite cost entry");

  // Jonker-Volgenant shortest augmenting paths on an n x n matrix padded
  // with zero-cost dummy columns; the padding never changes which real
  // assignment is optimal.
  const int64_t n = n_rows;
  auto a = [&](int64_t i, int64_t j) {
    return j < n_cols ? cost.at(i, j) : 0.0;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<size_t>(n) + 1, 0.0);
  std::vector<int64_t> p(static_cast<size_t>(n) + 1, 0);  // row held by column
  std::vector<int64_t> way(static_cast<size_t>(n) + 1, 0);
  for (int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    int64_t j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<size_t>(n) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int64_t i0 = p[static_cast<size_t>(j0)];
      double delta = inf;
      int64_t j1 = -1;
      for (int64_t j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = a(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] -
                           v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int64_t j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int64_t j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }

  MatchResult out;
  for (int64_t j = 1; j <= n_cols; ++j) {
    const int64_t qi = p[static_cast<size_t>(j)] - 1;
    out.assignment.emplace_back(qi, j - 1);
    out.total_cost += cost.at(qi, j - 1);
  }
  return out;
}

namespace {

struct Corners {
  double x1, y1, x2, y2, area;
};

Corners corners_of(const double* b) {
  for (int i = 0; i < 4; ++i)
    if (!std::isfinite(b[i]))
      fail(ErrorKind::kNumeric, "giou: box coordinate is not finite");
  // Zero-size boxes are allowed (a saturated sigmoid can underflow to exactly
  // 0); they have zero area and overlap nothing.
  if (b[2] < 0.0 || b[3] < 0.0)
    fail(ErrorKind::kContract, "giou: negative box size");
  return {b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2,
          b[2] * b[3]};
}

}  // namespace

double iou_cxcywh(const double* a, const double* b) {
  const Corners ca = corners_of(a), cb = corners_of(b);
  const double iw =
      std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
  const double ih =
      std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
  const double inter = iw * ih;
  return inter / (ca.area + cb.area - inter);
}

double giou_cxcywh(const double* a, const double* b) {
  const Corners ca = corners_of(a), cb = corners_of(b);
  const double iw =
      std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
  const double ih =
      std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
  const double inter = iw * ih;
  const double uni = ca.area + cb.area - inter;
  const double hull = (std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1)) *
                      (std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1));
  return inter / uni - (hull - uni) / hull;
}

namespace {

// Differentiable GIoU column for matched (pred, gt) box rows.
Tensor giou_rows(const Tensor& pred, const Tensor& gt) {
  auto col = [](const Tensor& t, int64_t c) { return slice_cols(t, c, c + 1); };
  Tensor pw = col(pred, 2), ph = col(pred, 3);
  Tensor px1 = sub(col(pred, 0), scale(pw, 0.5));
  Tensor px2 = add(col(pred, 0), scale(pw, 0.5));
  Tensor py1 = sub(col(pred, 1), scale(ph, 0.5));
  Tensor py2 = add(col(pred, 1), scale(ph, 0.5));
  Tensor gw = col(gt, 2), gh = col(gt, 3);
  Tensor gx1 = sub(col(gt, 0), scale(gw, 0.5));
  Tensor gx2 = add(col(gt, 0), scale(gw, 0.5));
  Tensor gy1 = sub(col(gt, 1), scale(gh, 0.5));
  Tensor gy2 = add(col(gt, 1), scale(gh, 0.5));

  Tensor iw = relu(sub(minimum(px2, gx2), maximum(px1, gx1)));
  Tensor ih = relu(sub(minimum(py2, gy2), maximum(py1, gy1)));
  Tensor inter = mul(iw, ih);
  Tensor uni = sub(add(mul(pw, ph), mul(gw, gh)), inter);
  Tensor hull = mul(sub(maximum(px2, gx2), minimum(px1, gx1)),
                    sub(maximum(py2, gy2), minimum(py1, gy1)));
  return sub(div_elem(inter, uni), div_elem(sub(hull, uni), hull));
}

}  // namespace

LossBreakdown set_criterion_with_assignment(const DetectionSet& pred,
                                            const GtObjects& gt,
                                            const LossWeights& weights,
                                            const MatchResult& match) {
  const int64_t n = pred.class_logits.rows();
  const int64_t classes = pred.class_logits.cols();  // C + 1
  const auto g = static_cast<int64_t>(gt.classes.size());
  if (n < 1) fail(ErrorKind::kContract, "set_criterion: empty prediction set");
  if (pred.boxes.rows() != n || pred.boxes.cols() != 4)
    fail(ErrorKind::kShape, "set_criterion: box tensor must be [N,4]");
  for (int c : gt.classes)
    if (c < 0 || c >= static_cast<int>(classes) - 1)
      fail(ErrorKind::kContract, "set_criterion: class id out of range");

  // targets: matched queries take their ground-truth class, the rest no-object
  std::vector<int64_t> target(static_cast<size_t>(n), classes - 1);
  std::vector<int64_t> q_of_gt(static_cast<size_t>(g), -1);
  for (auto [qi, gj] : match.assignment) {
    target[static_cast<size_t>(qi)] = gt.classes[static_cast<size_t>(gj)];
    q_of_gt[static_cast<size_t>(gj)] = qi;
  }

  Tensor logp = log_softmax_rows(pred.class_logits);
  std::vector<std::pair<int64_t, int64_t>> picks;
  picks.reserve(static_cast<size_t>(n));
  Tensor ce_w({n, 1});
  double w_sum = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    picks.emplace_back(i, target[static_cast<size_t>(i)]);
    const double w =
        target[static_cast<size_t>(i)] == classes - 1 ? weights.no_object : 1.0;
    ce_w.at(i, 0) = w;
    w_sum += w;
  }
  LossBreakdown out;
  out.weights = weights;
  out.match = match;
  out.class_loss =
      scale(sum_all(mul(gather_entries(logp, picks), ce_w)), -1.0 / w_sum);

  if (g > 0) {
    std::vector<int64_t> qidx(q_of_gt.begin(), q_of_gt.end());
    Tensor matched = gather_rows(pred.boxes, qidx);
    Tensor gt_boxes = gt.boxes;  // rows already in gt order
    out.l1_loss = scale(sum_all(abs_elem(sub(matched, gt_boxes))),
                        1.0 / static_cast<double>(g));
    out.giou_loss =
        scale(sum_all(sub(Tensor::full({g, 1}, 1.0), giou_rows(matched, gt_boxes))),
              1.0 / static_cast<double>(g));
  } else {
    out.l1_loss = Tensor::zeros({1});
    out.giou_loss = Tensor::zeros({1});
  }
  out.total = add(scale(out.class_loss, weights.cls),
                  add(scale(out.l1_loss, weights.l1),
                      scale(out.giou_loss, weights.giou)));
  return out;
}

LossBreakdown set_criterion(const DetectionSet& pred, const GtObjects& gt,
                            const LossWeights& weights) {
  const int64_t n = pred.class_logits.rows();
  const auto g = static_cast<int64_t>(gt.classes.size());
  if (n < 1) fail(ErrorKind::kContract, "set_criterion: empty prediction set");

  MatchResult match;
  if (g > 0) {
    // cost from detached values; the assignment is frozen for the gradients
    Tensor probs = softmax_rows(pred.class_logits.detached());
    Tensor cost({n, g});
    for (int64_t i = 0; i < n; ++i) {
      const double* pb = pred.boxes.data() + i * 4;
      for (int64_t j = 0; j < g; ++j) {
        const double* gb = gt.boxes.data() + j * 4;
        double l1 = 0.0;
        for (int k = 0; k < 4; ++k) l1 += std::fabs(pb[k] - gb[k]);
        cost.at(i, j) =
            weights.cls * -probs.at(i, gt.classes[static_cast<size_t>(j)]) +
            weights.l1 * l1 + weights.giou * (1.0 - giou_cxcywh(pb, gb));
      }
    }
    match = hungarian_match(cost);
  }
  return set_criterion_with_assignment(pred, gt, weights, match);
}

Tensor combined_stream_loss(const std::vector<DetectionSet>& streams,
                            const GtObjects& gt, const LossWeights& weights) {
  if (streams.empty())
    fail(ErrorKind::kContract, "combined_stream_loss: no streams");
  Tensor total;
  for (const DetectionSet& s : streams) {
    Tensor t = set_criterion(s, gt, weights).total;
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

namespace {

void check_stochastic(const Tensor& t, const char* who) {
  for (int64_t i = 0; i < t.rows(); ++i) {
    double sum = 0.0;
    for (int64_t j = 0; j < t.cols(); ++j) {
      const double v = t.at(i, j);
      if (v < 0.0)
        fail(ErrorKind::kContract,
             std::string(who) + " attention map has a negative entry");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-6)
      fail(ErrorKind::kContract,
           std::string(who) + " attention row sums to " + std::to_string(sum));
  }
}

// Row-mean KL(p || q) with p constant; 0 ln 0 contributes nothing.
Tensor kl_rowmean(const Tensor& p, const Tensor& q) {
  const int64_t rows = p.rows(), n = p.numel();
  Tensor ps = p.detached(), qs = q;
  auto compute = [ps, qs, rows, n](double* out) {
    const double* pd = ps.data();
    const double* qd = qs.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i)
      if (pd[i] != 0.0) acc += pd[i] * (std::log(pd[i]) - std::log(qd[i]));
    out[0] = acc / static_cast<double>(rows);
  };
  Tape* tape = common_tape({&q});
  if (tape == nullptr) {
    Tensor out({1});
    compute(out.data());
    return out;
  }
  return tape->record({1}, compute, [ps, qs, rows, n, tape](const double* g) {
    double* gq = tape->grad_buffer(qs);
    if (gq == nullptr) return;
    const double* pd = ps.data();
    const double* qd = qs.data();
    const double k = g[0] / static_cast<double>(rows);
    for (int64_t i = 0; i < n; ++i)
      if (pd[i] != 0.0) gq[i] -= k * pd[i] / qd[i];
  });
}

}  // namespace

Tensor attention_distill_loss(const std::vector<Tensor>& a_teacher,
                              const std::vector<Tensor>& a_student) {
  if (a_teacher.size() != a_student.size() || a_teacher.empty())
    fail(ErrorKind::kShape, "attention distillation: map count mismatch");
  Tensor total;
  for (size_t h = 0; h < a_teacher.size(); ++h) {
    const Tensor& p = a_teacher[h];
    const Tensor& q = a_student[h];
    if (p.shape() != q.shape())
      fail(ErrorKind::kShape, "attention distillation: map shape mismatch");
    check_stochastic(p, "teacher");
    check_stochastic(q, "student");
    Tensor term = kl_rowmean(p, q);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(a_teacher.size()));
}

}  // namespace ks
