#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <string_view>

#include "lors/errors.hpp"
#include "lors/graph.hpp"
#include "lors/itc_model.hpp"
#include "lors/tensor.hpp"

namespace lors {

// Batch contrastive losses over a (possibly continuous) ground-truth
// similarity matrix S, in three forms:
//   * eager values with cached softmax probabilities,
//   * anchor weights W, the closed-form gradient dL/du_n = sum_j W_nj v_j
//     taken at unit-norm representations,
//   * graph builders for the loss value and for dL/dlogits, the latter used
//     to express an SGD step inside a differentiable graph.

enum class LossKind { Nce, Ence, Bce, Wbce };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::Nce:
      return "nce";
    case LossKind::Ence:
      return "ence";
    case LossKind::Bce:
      return "bce";
    case LossKind::Wbce:
      return "wbce";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "nce") return LossKind::Nce;
  if (s == "ence") return LossKind::Ence;
  if (s == "bce") return LossKind::Bce;
  if (s == "wbce") return LossKind::Wbce;
  throw ConfigError("unknown loss kind '" + std::string(s) + "' (expected nce|ence|bce|wbce)");
}

inline constexpr double kDefaultBeta = 0.5;

/// Ground-truth similarity for one batch. Values are not restricted to [0, 1].
struct GtSimilarity {
  Tensor s;
  double beta = kDefaultBeta;

  static GtSimilarity identity(std::size_t m) { return {Tensor::identity(m), kDefaultBeta}; }
};

struct LossValue {
  double loss = 0.0;
  Tensor pv;  // row softmax of the logits (image -> text)
  Tensor pt;  // column softmax of the logits (text -> image)
};

namespace detail {

inline Tensor log_softmax_rows(const Tensor& z) {
  Tensor out(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double x : row) total += std::exp(x - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < z.cols(); ++j) out(i, j) = row[j] - lse;
  }
  return out;
}

inline Tensor log_softmax_cols(const Tensor& z) { return transpose(log_softmax_rows(transpose(z))); }

inline Tensor exp_of(const Tensor& t) {
  Tensor out(t.rows(), t.cols());
  for (std::size_t k = 0; k < t.size(); ++k) out[k] = std::exp(t[k]);
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// l(y, sigmoid(x)) = log(1 + e^-x) + (1 - y) x, evaluated without overflow.
inline double bce_cell(double y, double x) {
  const double softplus_neg = x > 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
  return softplus_neg + (1.0 - y) * x;
}

inline void check_square(const Tensor& logits) {
  if (logits.rows() != logits.cols()) throw ShapeError("logits must be square, got " + logits.shape_string());
}

inline void check_gt(const Tensor& logits, const GtSimilarity& gt) {
  check_square(logits);
  if (gt.s.shape() != logits.shape()) {
    throw ShapeError("similarity " + gt.s.shape_string() + " does not match logits " + logits.shape_string());
  }
}

inline LossValue with_probabilities(double loss, const Tensor& lr, const Tensor& lc) {
  return {loss, exp_of(lr), exp_of(lc)};
}

/// Positive/negative group sizes for the weighted BCE.
inline std::pair<std::size_t, std::size_t> wbce_groups(const GtSimilarity& gt) {
  std::size_t pos = 0;
  for (double s : gt.s.values()) pos += s > gt.beta ? 1 : 0;
  return {pos, gt.s.size() - pos};
}

}  // namespace detail

/// -(1/m) sum_i [log P^V_ii + log P^T_ii]
inline LossValue nce_loss(const Tensor& logits) {
  detail::check_square(logits);
  const std::size_t m = logits.rows();
  const Tensor lr = detail::log_softmax_rows(logits);
  const Tensor lc = detail::log_softmax_cols(logits);
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) acc += lr(i, i) + lc(i, i);
  return detail::with_probabilities(-(acc / static_cast<double>(m)), lr, lc);
}

/// -(1/m) sum_ij s_ij [log P^V_ij + log P^T_ij]
inline LossValue ence_loss(const Tensor& logits, const GtSimilarity& gt) {
  detail::check_gt(logits, gt);
  const std::size_t m = logits.rows();
  const Tensor lr = detail::log_softmax_rows(logits);
  const Tensor lc = detail::log_softmax_cols(logits);
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) acc += gt.s(i, j) * (lr(i, j) + lc(i, j));
  }
  return detail::with_probabilities(-(acc / static_cast<double>(m)), lr, lc);
}

/// (1/m) sum_ij l(s_ij, sigmoid(logit_ij))
inline LossValue bce_loss(const Tensor& logits, const GtSimilarity& gt) {
  detail::check_gt(logits, gt);
  double acc = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) acc += detail::bce_cell(gt.s[k], logits[k]);
  return detail::with_probabilities(acc / static_cast<double>(logits.rows()), detail::log_softmax_rows(logits),
                                    detail::log_softmax_cols(logits));
}

/// Mean BCE over cells with s > beta plus mean BCE over the rest; an empty group adds 0.
inline LossValue wbce_loss(const Tensor& logits, const GtSimilarity& gt) {
  detail::check_gt(logits, gt);
  double pos = 0.0, neg = 0.0;
  std::size_t npos = 0, nneg = 0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    const double l = detail::bce_cell(gt.s[k], logits[k]);
    if (gt.s[k] > gt.beta) {
      pos += l;
      ++npos;
    } else {
      neg += l;
      ++nneg;
    }
  }
  double loss = 0.0;
  if (npos > 0) loss += pos / static_cast<double>(npos);
  if (nneg > 0) loss += neg / static_cast<double>(nneg);
  return detail::with_probabilities(loss, detail::log_softmax_rows(logits), detail::log_softmax_cols(logits));
}

inline LossValue contrastive_loss(LossKind kind, const Tensor& logits, const GtSimilarity& gt) {
  switch (kind) {
    case LossKind::Nce:
      return nce_loss(logits);
    case LossKind::Ence:
      return ence_loss(logits, gt);
    case LossKind::Bce:
      return bce_loss(logits, gt);
    case LossKind::Wbce:
      return wbce_loss(logits, gt);
  }
  throw ConfigError("invalid loss kind");
}

/// Anchor-weight matrix W: row n holds the coefficients with which each text
/// embedding v_j enters dL/du_n. -lr * W gives the attraction (W < 0) and
/// repulsion (W > 0) rates of the training dynamics of u_n.
inline Tensor anchor_weights(LossKind kind, const Tensor& u, const Tensor& v, const GtSimilarity& gt, double tau) {
  const Tensor logits = similarity_logits(u, v, tau);
  const std::size_t m = logits.rows();
  const double mt = static_cast<double>(m) * tau;
  Tensor w(m, m);
  switch (kind) {
    case LossKind::Nce: {
      const auto lv = nce_loss(logits);
      for (std::size_t n = 0; n < m; ++n) {
        for (std::size_t j = 0; j < m; ++j) w(n, j) = (lv.pv(n, j) + lv.pt(n, j) - (j == n ? 2.0 : 0.0)) / mt;
      }
      break;
    }
    case LossKind::Ence: {
      const auto lv = ence_loss(logits, gt);
      std::vector<double> row_marg(m, 0.0), col_marg(m, 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          row_marg[i] += gt.s(i, j);
          col_marg[j] += gt.s(i, j);
        }
      }
      for (std::size_t n = 0; n < m; ++n) {
        for (std::size_t j = 0; j < m; ++j) {
          w(n, j) = (row_marg[n] * lv.pv(n, j) + col_marg[j] * lv.pt(n, j) - 2.0 * gt.s(n, j)) / mt;
        }
      }
      break;
    }
    case LossKind::Bce: {
      detail::check_gt(logits, gt);
      for (std::size_t n = 0; n < m; ++n) {
        for (std::size_t j = 0; j < m; ++j) w(n, j) = (detail::sigmoid(logits(n, j)) - gt.s(n, j)) / mt;
      }
      break;
    }
    case LossKind::Wbce: {
      detail::check_gt(logits, gt);
      const auto [npos, nneg] = detail::wbce_groups(gt);
      for (std::size_t n = 0; n < m; ++n) {
        for (std::size_t j = 0; j < m; ++j) {
          const double group = static_cast<double>(gt.s(n, j) > gt.beta ? npos : nneg);
          w(n, j) = (detail::sigmoid(logits(n, j)) - gt.s(n, j)) / (group * tau);
        }
      }
      break;
    }
  }
  return w;
}

/// dL/du_n (1 x d) at unit-norm u, v.
inline Tensor analytic_grad_u(LossKind kind, std::size_t n, const Tensor& u, const Tensor& v, const GtSimilarity& gt,
                              double tau) {
  if (n >= u.rows()) throw ShapeError("anchor index " + std::to_string(n) + " out of range");
  const Tensor w = anchor_weights(kind, u, v, gt, tau);
  Tensor out(1, v.cols());
  for (std::size_t j = 0; j < v.rows(); ++j) {
    for (std::size_t k = 0; k < v.cols(); ++k) out(0, k) += w(n, j) * v(j, k);
  }
  return out;
}

// ---- graph builders ---------------------------------------------------------

namespace detail {

/// Per-cell weights 1/|{s > beta}| or 1/|{s <= beta}|; constant w.r.t. S (masks carry no gradient).
inline Var wbce_cell_weights(Graph& g, Var s, double beta) {
  Var pos = g.greater(s, beta);
  Var neg = g.add_scalar(g.neg(pos), 1.0);
  auto safe_count = [&](Var mask) {
    Var count = g.sum(mask);
    // count + [count == 0], so an empty group divides 0 by 1
    return g.add(count, g.greater(g.neg(count), -0.5));
  };
  return g.add(g.div(pos, safe_count(pos)), g.div(neg, safe_count(neg)));
}

}  // namespace detail

/// Scalar loss node for logits (m x m) and ground truth S (m x m; may be a differentiable node).
inline Var loss_graph(Graph& g, LossKind kind, Var logits, Var s, double beta = kDefaultBeta) {
  const std::size_t m = g.value(logits).rows();
  const double inv_m = 1.0 / static_cast<double>(m);
  switch (kind) {
    case LossKind::Nce:
    case LossKind::Ence: {
      Var weights = kind == LossKind::Nce ? g.constant(Tensor::identity(m)) : s;
      Var logp = g.add(g.log_softmax_rows(logits), g.log_softmax_cols(logits));
      return g.scale(g.sum(g.mul(weights, logp)), -inv_m);
    }
    case LossKind::Bce:
    case LossKind::Wbce: {
      // l = softplus(-x) + (1 - y) x
      Var cell = g.add(g.softplus(g.neg(logits)), g.mul(g.add_scalar(g.neg(s), 1.0), logits));
      if (kind == LossKind::Bce) return g.scale(g.sum(cell), inv_m);
      return g.sum(g.mul(cell, detail::wbce_cell_weights(g, s, beta)));
    }
  }
  throw ConfigError("invalid loss kind");
}

/// dL/dlogits (m x m) as graph operations, so that an SGD step built on it
/// stays differentiable w.r.t. the logits' inputs and S.
inline Var logit_gradient_graph(Graph& g, LossKind kind, Var logits, Var s, double beta = kDefaultBeta) {
  const std::size_t m = g.value(logits).rows();
  const double inv_m = 1.0 / static_cast<double>(m);
  switch (kind) {
    case LossKind::Nce: {
      Var pv = g.softmax_rows(logits);
      Var pt = g.softmax_cols(logits);
      return g.scale(g.sub(g.add(pv, pt), g.scale(g.constant(Tensor::identity(m)), 2.0)), inv_m);
    }
    case LossKind::Ence: {
      Var pv = g.softmax_rows(logits);
      Var pt = g.softmax_cols(logits);
      Var weighted = g.add(g.mul(g.sum_rows(s), pv), g.mul(g.sum_cols(s), pt));
      return g.scale(g.sub(weighted, g.scale(s, 2.0)), inv_m);
    }
    case LossKind::Bce:
      return g.scale(g.sub(g.sigmoid(logits), s), inv_m);
    case LossKind::Wbce:
      return g.mul(g.sub(g.sigmoid(logits), s), detail::wbce_cell_weights(g, s, beta));
  }
  throw ConfigError("invalid loss kind");
}

}  // namespace lors
