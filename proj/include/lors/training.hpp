#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lors/errors.hpp"
#include "lors/graph.hpp"
#include "lors/itc_model.hpp"
#include "lors/losses.hpp"
#include "lors/random.hpp"
#include "lors/tensor.hpp"

namespace lors {

/// Sequential passes over seeded shuffles of n items, in chunks of at most m.
/// The last chunk of a pass is short when m does not divide n.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n, std::size_t m, std::uint64_t seed) : n_(n), m_(m), rng_(seed) {
    if (n == 0) throw ConfigError("cannot batch an empty dataset");
    if (m == 0 || m > n) {
      throw ConfigError("batch size " + std::to_string(m) + " must be in [1, " + std::to_string(n) + "]");
    }
  }

  std::vector<std::size_t> next() {
    if (pos_ >= order_.size()) {
      order_ = rng_.permutation(n_);
      pos_ = 0;
      ++passes_;
    }
    const std::size_t end = std::min(pos_ + m_, n_);
    std::vector<std::size_t> batch(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                   order_.begin() + static_cast<std::ptrdiff_t>(end));
    pos_ = end;
    return batch;
  }

  std::size_t batches_per_pass() const { return (n_ + m_ - 1) / m_; }
  std::size_t passes_started() const { return passes_; }

 private:
  std::size_t n_, m_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::size_t passes_ = 0;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;  // flattened like ModelParams::flatten()
  Tensor logits;
};

/// Batch loss and its gradient with respect to all encoder weights.
inline LossAndGrad itc_loss_and_grad(const ModelSpec& spec, const ModelParams& params, const Tensor& xb,
                                     const Tensor& yb, LossKind kind, const GtSimilarity& gt) {
  Graph g;
  auto bind = [&](const EncoderSpec& e, const std::vector<double>& flat, const char* prefix) {
    std::vector<Var> vars;
    const auto layers = layer_tensors(e, flat);
    for (std::size_t l = 0; l < layers.size(); ++l) vars.push_back(g.input(prefix + std::to_string(l), layers[l]));
    return vars;
  };
  const auto wi = bind(spec.image, params.image, "image");
  const auto wt = bind(spec.text, params.text, "text");
  Var u = encode(g, spec.image, wi, g.constant(xb));
  Var v = encode(g, spec.text, wt, g.constant(yb));
  Var logits = similarity_logits(g, u, v, params.tau);
  Var loss = loss_graph(g, kind, logits, g.constant(gt.s), gt.beta);
  LossAndGrad out;
  out.loss = g.value(loss).item();
  if (!std::isfinite(out.loss)) throw NumericalError("non-finite training loss");
  g.backward(loss);
  for (const auto* part : {&wi, &wt}) {
    for (Var w : *part) {
      const Tensor gw = g.grad(w);
      out.grad.insert(out.grad.end(), gw.values().begin(), gw.values().end());
    }
  }
  out.logits = g.value(logits);
  return out;
}

/// SGD with heavy-ball momentum: v = mu v + g; p -= lr v.
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  }

  void apply(std::span<double> params, std::span<const double> grad) {
    if (params.size() != grad.size()) throw ShapeError("optimizer parameter/gradient length mismatch");
    if (velocity_.empty()) velocity_.assign(params.size(), 0.0);
    for (std::size_t k = 0; k < params.size(); ++k) {
      velocity_[k] = momentum_ * velocity_[k] + grad[k];
      params[k] -= lr_ * velocity_[k];
    }
  }

  double lr() const { return lr_; }

 private:
  double lr_, momentum_;
  std::vector<double> velocity_;
};

/// One optimizer step of an ITC model on a batch; returns the batch loss and logits.
inline LossAndGrad sgd_step(const ModelSpec& spec, ModelParams& params, MomentumSgd& opt, const Tensor& xb,
                            const Tensor& yb, LossKind kind, const GtSimilarity& gt) {
  LossAndGrad lg = itc_loss_and_grad(spec, params, xb, yb, kind, gt);
  auto flat = params.flatten();
  opt.apply(flat, lg.grad);
  params = ModelParams::unflatten(spec, flat);
  return lg;
}

}  // namespace lors
