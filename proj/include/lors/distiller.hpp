#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lors/binary_io.hpp"
#include "lors/data_io.hpp"
#include "lors/errors.hpp"
#include "lors/expert.hpp"
#include "lors/graph.hpp"
#include "lors/itc_model.hpp"
#include "lors/losses.hpp"
#include "lors/lors_similarity.hpp"
#include "lors/synthetic.hpp"
#include "lors/training.hpp"

namespace lors {

enum class SimMode { Identity, Lors, Full };

inline std::string to_string(SimMode m) {
  switch (m) {
    case SimMode::Identity:
      return "identity";
    case SimMode::Lors:
      return "lors";
    case SimMode::Full:
      return "full";
  }
  return "?";
}

inline SimMode parse_sim_mode(const std::string& s) {
  if (s == "identity") return SimMode::Identity;
  if (s == "lors") return SimMode::Lors;
  if (s == "full") return SimMode::Full;
  throw ConfigError("unknown similarity mode '" + s + "' (expected identity, lors or full)");
}

struct DistillConfig {
  LossKind loss = LossKind::Wbce;
  double beta = kDefaultBeta;
  SimMode sim = SimMode::Lors;
  std::size_t pairs = 50;
  std::size_t rank = 2;
  double alpha = 1.0;
  std::size_t syn_steps = 8;
  std::size_t expert_epochs = 1;
  std::size_t max_start_epoch = 2;
  std::size_t batch_size = 20;
  double lr_image = 1.0;
  double lr_text = 1.0;
  double lr_sim = 10.0;
  double lr_lr = 1e-5;
  double momentum = 0.5;
  double init_inner_lr = 0.03;
  std::size_t iterations = 600;
  std::uint64_t seed = 0;
  bool fix_image = false;
  bool fix_text = false;
  bool fix_similarity = false;
  bool no_lr_residual = false;
  bool no_omega = false;
  bool fix_lr = false;

  void validate() const {
    if (syn_steps < 1) throw ConfigError("syn_steps must be at least 1");
    if (expert_epochs < 1) throw ConfigError("expert_epochs must be at least 1");
    if (pairs < 2) throw ConfigError("pairs must be at least 2");
    if (batch_size < 1 || batch_size > pairs) throw ConfigError("batch_size must be in [1, pairs]");
    if (sim == SimMode::Lors && (rank < 1 || rank > pairs)) throw ConfigError("rank must be in [1, pairs]");
    if (sim == SimMode::Lors && !(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (!(init_inner_lr > 0.0)) throw ConfigError("init_inner_lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    for (double lr : {lr_image, lr_text, lr_sim, lr_lr}) {
      if (!(lr >= 0.0)) throw ConfigError("outer learning rates must be non-negative");
    }
  }

  void validate(std::size_t trajectory_epochs) const {
    validate();
    if (max_start_epoch + expert_epochs > trajectory_epochs) {
      throw ConfigError("max_start_epoch + expert_epochs = " + std::to_string(max_start_epoch + expert_epochs) +
                        " exceeds the " + std::to_string(trajectory_epochs) + " stored expert epochs");
    }
  }

  nlohmann::json to_json() const {
    return {{"loss", lors::to_string(loss)},
            {"beta", beta},
            {"sim", lors::to_string(sim)},
            {"pairs", pairs},
            {"rank", rank},
            {"alpha", alpha},
            {"syn_steps", syn_steps},
            {"expert_epochs", expert_epochs},
            {"max_start_epoch", max_start_epoch},
            {"batch_size", batch_size},
            {"lr_image", lr_image},
            {"lr_text", lr_text},
            {"lr_sim", lr_sim},
            {"lr_lr", lr_lr},
            {"momentum", momentum},
            {"init_inner_lr", init_inner_lr},
            {"iterations", iterations},
            {"seed", seed},
            {"fix_image", fix_image},
            {"fix_text", fix_text},
            {"fix_similarity", fix_similarity},
            {"no_lr_residual", no_lr_residual},
            {"no_omega", no_omega},
            {"fix_lr", fix_lr}};
  }

  std::uint64_t digest() const { return fnv1a64(to_json().dump()); }
};

/// Synthetic pairs copied from distinct random real pairs; similarity starts at I.
inline SyntheticDataset init_synthetic(const EmbeddingPairDataset& real, std::size_t n, SimMode mode, std::size_t rank,
                                       double alpha, std::uint64_t seed, double inner_lr) {
  if (n > real.size()) {
    throw ConfigError("cannot draw " + std::to_string(n) + " synthetic pairs from " + std::to_string(real.size()));
  }
  Rng rng(derive_seed(seed, 1));
  const auto idx = rng.sample_without_replacement(real.size(), n);
  Similarity sim = IdentitySim{n};
  if (mode == SimMode::Lors) sim = init_lors(n, rank, alpha, derive_seed(seed, 2));
  if (mode == SimMode::Full) sim = FullSimParams{Tensor::identity(n)};
  SyntheticDataset s{gather_rows(real.x, idx), gather_rows(real.y, idx), std::move(sim), inner_lr,
                     {{"init_indices", idx}, {"init_seed", seed}}};
  s.validate();
  return s;
}

/// Graph leaves for every learnable part of a synthetic dataset.
struct SyntheticLeaves {
  Var x, y, lr;
  std::optional<Var> omega, left, right, full;
};

inline SyntheticLeaves bind_synthetic(Graph& g, const SyntheticDataset& s) {
  SyntheticLeaves leaves{g.input("x", s.x), g.input("y", s.y), g.input("lr", Tensor::scalar(s.inner_lr)), {}, {}, {},
                         {}};
  if (s.sim.kind() == Similarity::Kind::Lors) {
    const auto& p = s.sim.lors_params();
    leaves.omega = g.input("omega", p.omega);
    leaves.left = g.input("left", p.left);
    leaves.right = g.input("right", p.right);
  } else if (s.sim.kind() == Similarity::Kind::Full) {
    leaves.full = g.input("full", s.sim.full_params().s);
  }
  return leaves;
}

/// S[rows, rows] as a graph node (constant for identity similarity).
inline Var batch_similarity(Graph& g, const SyntheticDataset& s, const SyntheticLeaves& leaves,
                            const std::vector<std::size_t>& rows) {
  switch (s.sim.kind()) {
    case Similarity::Kind::Identity:
      return g.constant(Tensor::identity(rows.size()));
    case Similarity::Kind::Lors: {
      const auto& p = s.sim.lors_params();
      return compose(g, *leaves.omega, *leaves.left, *leaves.right, p.alpha, p.rank, rows, rows);
    }
    case Similarity::Kind::Full:
      return g.transpose(g.gather_rows(g.transpose(g.gather_rows(*leaves.full, rows)), rows));
  }
  throw ConfigError("invalid similarity kind");
}

namespace detail {

struct EncoderTape {
  std::vector<Var> acts;  // acts[0] is the input, acts[l] the tanh output of hidden layer l
  Var h{};                // pre-normalization output
  Var u{};                // unit-norm embedding
};

inline EncoderTape encoder_forward(Graph& g, const std::vector<Var>& layers, Var input) {
  EncoderTape tape;
  tape.acts.push_back(input);
  Var a = input;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Var z = g.matmul(a, g.transpose(layers[l]));
    if (l + 1 < layers.size()) {
      a = g.tanh(z);
      tape.acts.push_back(a);
    } else {
      tape.h = z;
    }
  }
  tape.u = g.normalize_rows(tape.h);
  return tape;
}

/// Weight gradients of an encoder given dL/du, expressed as graph nodes.
inline std::vector<Var> encoder_backward(Graph& g, const std::vector<Var>& layers, const EncoderTape& tape, Var du) {
  Var radial = g.sum_rows(g.mul(tape.u, du));
  Var dz = g.div(g.sub(du, g.mul(tape.u, radial)), g.row_norms(tape.h));
  std::vector<Var> grads(layers.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    grads[l] = g.matmul(g.transpose(dz), tape.acts[l]);
    if (l > 0) {
      Var a = tape.acts[l];
      dz = g.mul(g.matmul(dz, layers[l]), g.add_scalar(g.neg(g.mul(a, a)), 1.0));
    }
  }
  return grads;
}

inline std::vector<Var> constant_layers(Graph& g, const EncoderSpec& spec, std::span<const double> flat) {
  std::vector<Var> out;
  for (auto& t : layer_tensors(spec, flat)) out.push_back(g.constant(std::move(t)));
  return out;
}

}  // namespace detail

/// Encoder weights after t inner SGD steps on synthetic batches. Every step is
/// written out in closed form so the result stays differentiable with respect
/// to the synthetic leaves.
struct UnrolledModel {
  std::vector<Var> image;
  std::vector<Var> text;
};

inline UnrolledModel inner_unroll(Graph& g, const ModelSpec& spec, const SyntheticDataset& s,
                                  const SyntheticLeaves& leaves, std::span<const double> theta_start, std::size_t t,
                                  std::size_t m, LossKind kind, double beta, std::uint64_t seed) {
  const ModelParams start = ModelParams::unflatten(spec, theta_start);
  UnrolledModel model{detail::constant_layers(g, spec.image, start.image),
                      detail::constant_layers(g, spec.text, start.text)};
  if (t == 0) return model;
  BatchSchedule schedule(s.size(), m, seed);
  const double inv_tau = 1.0 / spec.tau;
  for (std::size_t step = 0; step < t; ++step) {
    const auto rows = schedule.next();
    auto ti = detail::encoder_forward(g, model.image, g.gather_rows(leaves.x, rows));
    auto tt = detail::encoder_forward(g, model.text, g.gather_rows(leaves.y, rows));
    Var logits = similarity_logits(g, ti.u, tt.u, spec.tau);
    Var dlogits = logit_gradient_graph(g, kind, logits, batch_similarity(g, s, leaves, rows), beta);
    Var du = g.scale(g.matmul(dlogits, tt.u), inv_tau);
    Var dv = g.scale(g.matmul(g.transpose(dlogits), ti.u), inv_tau);
    const auto gi = detail::encoder_backward(g, model.image, ti, du);
    const auto gt = detail::encoder_backward(g, model.text, tt, dv);
    for (std::size_t l = 0; l < gi.size(); ++l) model.image[l] = g.sub(model.image[l], g.mul(leaves.lr, gi[l]));
    for (std::size_t l = 0; l < gt.size(); ++l) model.text[l] = g.sub(model.text[l], g.mul(leaves.lr, gt[l]));
  }
  return model;
}

inline std::vector<double> flatten_unrolled(const Graph& g, const UnrolledModel& model) {
  std::vector<double> flat;
  for (const auto* part : {&model.image, &model.text}) {
    for (Var w : *part) flat.insert(flat.end(), g.value(w).values().begin(), g.value(w).values().end());
  }
  return flat;
}

/// ||a - target||^2 / ||start - target||^2
inline double matching_loss(std::span<const double> a, std::span<const double> target, std::span<const double> start) {
  if (a.size() != target.size() || start.size() != target.size()) throw ShapeError("matching loss length mismatch");
  const double den = squared_distance(start, target);
  if (!(den > 0.0)) throw DomainError("degenerate expert segment: start and target parameters coincide");
  return squared_distance(a, target) / den;
}

inline Var matching_loss(Graph& g, const ModelSpec& spec, const UnrolledModel& model,
                         std::span<const double> target, std::span<const double> start) {
  const double den = squared_distance(start, target);
  if (!(den > 0.0)) throw DomainError("degenerate expert segment: start and target parameters coincide");
  const ModelParams tp = ModelParams::unflatten(spec, target);
  const auto ti = layer_tensors(spec.image, tp.image);
  const auto tt = layer_tensors(spec.text, tp.text);
  auto sq = [&](Var w, const Tensor& t) {
    Var d = g.sub(w, g.constant(t));
    return g.sum(g.mul(d, d));
  };
  std::vector<Var> terms;
  for (std::size_t l = 0; l < ti.size(); ++l) terms.push_back(sq(model.image[l], ti[l]));
  for (std::size_t l = 0; l < tt.size(); ++l) terms.push_back(sq(model.text[l], tt[l]));
  Var total = terms.front();
  for (std::size_t k = 1; k < terms.size(); ++k) total = g.add(total, terms[k]);
  return g.scale(total, 1.0 / den);
}

struct MatchEval {
  double loss = 0.0;
  std::map<std::string, Tensor> grads;  // keyed by leaf name: x, y, lr, omega, left, right, full
};

/// Matching loss of one expert segment and its gradient with respect to every synthetic leaf.
inline MatchEval evaluate_match(const SyntheticDataset& s, const ModelSpec& spec, std::span<const double> theta_start,
                                std::span<const double> theta_target, const DistillConfig& cfg,
                                std::uint64_t unroll_seed) {
  Graph g;
  const auto leaves = bind_synthetic(g, s);
  const auto model = inner_unroll(g, spec, s, leaves, theta_start, cfg.syn_steps, cfg.batch_size, cfg.loss, cfg.beta,
                                  unroll_seed);
  Var loss = matching_loss(g, spec, model, theta_target, theta_start);
  MatchEval out;
  out.loss = g.value(loss).item();
  if (!std::isfinite(out.loss)) throw NumericalError("non-finite matching loss");
  g.backward(loss);
  out.grads = g.input_gradients();
  return out;
}

struct MatchRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  std::size_t start_epoch = 0;
  std::size_t expert = 0;
  double inner_lr = 0.0;
};

struct DistillState {
  SyntheticDataset syn;
  std::map<std::string, std::vector<double>> velocity;
  std::size_t iteration = 0;
};

struct Segment {
  std::size_t expert = 0;
  std::size_t start_epoch = 0;
};

/// Uniform expert and start epoch; segments whose endpoints coincide are resampled.
inline Segment sample_segment(const TrajectoryStore& store, const DistillConfig& cfg, std::size_t iteration) {
  Rng rng(derive_seed(derive_seed(cfg.seed, 1000), iteration));
  for (int attempt = 0; attempt < 64; ++attempt) {
    Segment seg{rng.index(store.size()), rng.index(cfg.max_start_epoch + 1)};
    const auto& b = store.buffers[seg.expert];
    if (squared_distance(b.snapshots[seg.start_epoch], b.snapshots[seg.start_epoch + cfg.expert_epochs]) > 0.0) {
      return seg;
    }
  }
  throw NumericalError("every sampled expert segment was degenerate");
}

inline std::uint64_t unroll_seed(const DistillConfig& cfg, std::size_t iteration) {
  return derive_seed(derive_seed(cfg.seed, 2000), iteration);
}

namespace detail {

inline void outer_update(DistillState& st, const std::string& name, std::span<double> param, const Tensor& grad,
                         double lr, double momentum) {
  auto& v = st.velocity[name];
  if (v.empty()) v.assign(param.size(), 0.0);
  for (std::size_t k = 0; k < param.size(); ++k) {
    v[k] = momentum * v[k] + grad[k];
    param[k] -= lr * v[k];
  }
}

}  // namespace detail

inline DistillState make_state(SyntheticDataset syn) { return {std::move(syn), {}, 0}; }

/// One outer iteration: unroll on the synthetic data, match the expert segment,
/// and apply momentum SGD to every unfrozen synthetic parameter group.
inline MatchRecord distill_step(DistillState& st, const TrajectoryStore& store, const DistillConfig& cfg) {
  const std::size_t it = st.iteration;
  const Segment seg = sample_segment(store, cfg, it);
  const auto& buf = store.buffers[seg.expert];
  MatchEval ev;
  try {
    ev = evaluate_match(st.syn, store.model(), buf.snapshots[seg.start_epoch],
                        buf.snapshots[seg.start_epoch + cfg.expert_epochs], cfg, unroll_seed(cfg, it));
  } catch (const NumericalError& e) {
    throw NumericalError("distillation iteration " + std::to_string(it) + ": " + e.what());
  }
  for (const auto& [name, grad] : ev.grads) {
    if (!grad.all_finite()) {
      throw NumericalError("distillation iteration " + std::to_string(it) + ": non-finite gradient for " + name);
    }
  }
  auto& syn = st.syn;
  if (!cfg.fix_image) detail::outer_update(st, "x", syn.x.values(), ev.grads.at("x"), cfg.lr_image, cfg.momentum);
  if (!cfg.fix_text) detail::outer_update(st, "y", syn.y.values(), ev.grads.at("y"), cfg.lr_text, cfg.momentum);
  if (!cfg.fix_similarity) {
    if (syn.sim.kind() == Similarity::Kind::Lors) {
      auto& p = syn.sim.lors_params();
      if (!cfg.no_omega) {
        detail::outer_update(st, "omega", p.omega.values(), ev.grads.at("omega"), cfg.lr_sim, cfg.momentum);
      }
      if (!cfg.no_lr_residual) {
        detail::outer_update(st, "left", p.left.values(), ev.grads.at("left"), cfg.lr_sim, cfg.momentum);
        detail::outer_update(st, "right", p.right.values(), ev.grads.at("right"), cfg.lr_sim, cfg.momentum);
      }
    } else if (syn.sim.kind() == Similarity::Kind::Full) {
      detail::outer_update(st, "full", syn.sim.full_params().s.values(), ev.grads.at("full"), cfg.lr_sim, cfg.momentum);
    }
  }
  if (!cfg.fix_lr) {
    double lr = syn.inner_lr;
    detail::outer_update(st, "lr", std::span<double>(&lr, 1), ev.grads.at("lr"), cfg.lr_lr, cfg.momentum);
    syn.inner_lr = std::max(lr, 1e-8);
  }
  ++st.iteration;
  return {it, ev.loss, seg.start_epoch, seg.expert, syn.inner_lr};
}

struct DistillResult {
  SyntheticDataset syn;
  std::vector<MatchRecord> trace;
};

/// Runs cfg.iterations outer steps starting from `init`.
inline DistillResult run_distillation_from(SyntheticDataset init, const TrajectoryStore& store,
                                           const DistillConfig& cfg,
                                           const std::function<void(const MatchRecord&)>& on_record = {}) {
  if (store.size() == 0) throw ConfigError("empty trajectory store");
  cfg.validate(store.epochs());
  const auto& spec = store.model();
  if (init.x.cols() != spec.image.input_dim || init.y.cols() != spec.text.input_dim) {
    throw ShapeError("synthetic dims do not match the expert model");
  }
  if (cfg.batch_size > init.size()) throw ConfigError("batch_size exceeds the synthetic pair count");
  init.validate();
  DistillState st = make_state(std::move(init));
  DistillResult out;
  for (std::size_t i = 0; i < cfg.iterations; ++i) {
    out.trace.push_back(distill_step(st, store, cfg));
    if (on_record) on_record(out.trace.back());
  }
  out.syn = std::move(st.syn);
  return out;
}

inline DistillResult run_distillation(const EmbeddingPairDataset& real, const TrajectoryStore& store,
                                      const DistillConfig& cfg,
                                      const std::function<void(const MatchRecord&)>& on_record = {}) {
  if (store.size() == 0) throw ConfigError("empty trajectory store");
  cfg.validate(store.epochs());
  if (real.image_dim() != store.model().image.input_dim || real.text_dim() != store.model().text.input_dim) {
    throw ShapeError("dataset dims do not match the expert model");
  }
  auto syn = init_synthetic(real, cfg.pairs, cfg.sim, cfg.rank, cfg.alpha, cfg.seed, cfg.init_inner_lr);
  syn.provenance["config_digest"] = hex64(cfg.digest());
  syn.provenance["distill"] = cfg.to_json();
  syn.provenance["model"] = to_json(store.model());
  syn.provenance["data_digest"] = hex64(dataset_digest(real));
  return run_distillation_from(std::move(syn), store, cfg, on_record);
}

inline std::string trace_csv(const std::vector<MatchRecord>& trace) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,loss,start_epoch,expert_id,inner_lr\n";
  for (const auto& r : trace) {
    os << r.iteration << ',' << r.loss << ',' << r.start_epoch << ',' << r.expert << ',' << r.inner_lr << '\n';
  }
  return os.str();
}

}  // namespace lors
