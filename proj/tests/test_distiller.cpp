#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "lors/distiller.hpp"
#include "test_support.hpp"

using namespace lors;
using lors::testing::rel_err;

namespace {

struct Fixture {
  EmbeddingPairDataset data;
  TrajectoryStore store;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    ToyGenConfig c;
    c.topics = 4;
    c.train_per_topic = 30;
    c.test_per_topic = 5;
    c.image_dim = 6;
    c.text_dim = 5;
    c.latent_dim = 4;
    c.seed = 2;
    Fixture out;
    out.data = generate_toy(c).first;
    ExpertConfig e;
    e.model = {EncoderSpec::linear(6, 3), EncoderSpec::linear(5, 3), 0.2};
    e.epochs = 3;
    e.batch_size = 30;
    e.lr = 0.1;
    for (std::uint64_t seed : {0, 1}) out.store.buffers.push_back(train_expert(out.data, e, seed));
    return out;
  }();
  return f;
}

DistillConfig tiny_config(SimMode mode = SimMode::Lors, LossKind loss = LossKind::Wbce) {
  DistillConfig c;
  c.sim = mode;
  c.loss = loss;
  c.pairs = 6;
  c.rank = 2;
  c.syn_steps = 3;
  c.batch_size = 4;
  c.expert_epochs = 1;
  c.max_start_epoch = 1;
  c.lr_image = 1.0;
  c.lr_text = 1.0;
  c.lr_sim = 1.0;
  c.lr_lr = 0.01;
  c.iterations = 4;
  return c;
}

// Synthetic data with a non-trivial similarity so every leaf carries gradient.
SyntheticDataset perturbed_synthetic(const DistillConfig& cfg, std::uint64_t seed) {
  auto s = init_synthetic(fixture().data, cfg.pairs, cfg.sim, cfg.rank, cfg.alpha, seed, 0.3);
  Rng rng(seed + 100);
  if (cfg.sim == SimMode::Lors) {
    auto& p = s.sim.lors_params();
    p.right = Tensor::normal(p.size(), p.rank, rng, 0.3);
    for (auto& w : p.omega.values()) w += rng.uniform(-0.2, 0.2);
  } else if (cfg.sim == SimMode::Full) {
    auto& f = s.sim.full_params().s;
    for (auto& w : f.values()) w += rng.uniform(-0.3, 0.3);
  }
  return s;
}

std::vector<double> unroll_values(const SyntheticDataset& s, const ModelSpec& spec, std::span<const double> start,
                                  std::size_t t, std::size_t m, LossKind kind, std::uint64_t seed) {
  Graph g;
  const auto leaves = bind_synthetic(g, s);
  return flatten_unrolled(g, inner_unroll(g, spec, s, leaves, start, t, m, kind, kDefaultBeta, seed));
}

}  // namespace

TEST_CASE("synthetic initialization", "[distill]") {
  const auto& data = fixture().data;
  const auto full = init_synthetic(data, data.size(), SimMode::Lors, 3, 1.0, 4, 0.1);
  const auto idx = full.provenance.at("init_indices").get<std::vector<std::size_t>>();
  CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == data.size());
  CHECK(full.x == gather_rows(data.x, idx));
  CHECK(full.y == gather_rows(data.y, idx));
  CHECK(full.sim.compose() == Tensor::identity(data.size()));
  CHECK(full.inner_lr == 0.1);

  const auto part = init_synthetic(data, 10, SimMode::Identity, 1, 1.0, 4, 0.1);
  const auto pidx = part.provenance.at("init_indices").get<std::vector<std::size_t>>();
  CHECK(std::set<std::size_t>(pidx.begin(), pidx.end()).size() == 10);
  CHECK(part.sim.kind() == Similarity::Kind::Identity);
  CHECK_THROWS_AS(init_synthetic(data, data.size() + 1, SimMode::Lors, 1, 1.0, 0, 0.1), ConfigError);
}

TEST_CASE("trivial unrolls return the start parameters", "[distill]") {
  const auto& f = fixture();
  const auto cfg = tiny_config();
  const auto& start = f.store.buffers[0].snapshots[1];
  auto s = perturbed_synthetic(cfg, 1);
  CHECK(unroll_values(s, f.store.model(), start, 0, 4, LossKind::Wbce, 0) == start);
  s.inner_lr = 0.0;
  CHECK(unroll_values(s, f.store.model(), start, 5, 4, LossKind::Wbce, 0) == start);
}

TEST_CASE("one unrolled step equals SGD with numerical loss gradients", "[distill][oracle]") {
  // N = m = 4, embedding dim 2
  ModelSpec spec{EncoderSpec::linear(3, 2), EncoderSpec::linear(3, 2), 0.3};
  const auto theta0 = init_params(spec, 8).flatten();
  Rng rng(9);
  for (LossKind kind : {LossKind::Nce, LossKind::Ence, LossKind::Bce, LossKind::Wbce}) {
    auto lp = init_lors(4, 2, 0.7, 3);
    lp.right = Tensor::normal(4, 2, rng, 0.5);
    SyntheticDataset s{Tensor::normal(4, 3, rng), Tensor::normal(4, 3, rng), lp, 0.05, {}};
    const Tensor gt = s.sim.compose();

    // the batch order of a full-batch step does not change the loss, so the oracle uses the natural order
    auto loss_at = [&](const std::vector<double>& theta) {
      const auto p = ModelParams::unflatten(spec, theta);
      const Tensor u = encode(p.image, spec.image, s.x);
      const Tensor v = encode(p.text, spec.text, s.y);
      return contrastive_loss(kind, similarity_logits(u, v, spec.tau), {gt, kDefaultBeta}).loss;
    };
    std::vector<double> expected_step(theta0.size());
    const double h = 1e-5;
    for (std::size_t k = 0; k < theta0.size(); ++k) {
      auto plus = theta0, minus = theta0;
      plus[k] += h;
      minus[k] -= h;
      expected_step[k] = -s.inner_lr * (loss_at(plus) - loss_at(minus)) / (2 * h);
    }
    const auto theta1 = unroll_values(s, spec, theta0, 1, 4, kind, 17);
    std::vector<double> step(theta0.size());
    for (std::size_t k = 0; k < step.size(); ++k) step[k] = theta1[k] - theta0[k];
    INFO(to_string(kind));
    CHECK(rel_err(Tensor(1, step.size(), step), Tensor(1, step.size(), expected_step)) <= 1e-6);
  }
}

TEST_CASE("matching loss endpoints and oracle", "[distill]") {
  Rng rng(4);
  const auto start = Tensor::normal(1, 20, rng).vector();
  const auto target = Tensor::normal(1, 20, rng).vector();
  CHECK(matching_loss(target, target, start) == 0.0);
  CHECK(matching_loss(start, target, start) == 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = Tensor::normal(1, 20, rng).vector();
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < 20; ++k) {
      num += (a[k] - target[k]) * (a[k] - target[k]);
      den += (start[k] - target[k]) * (start[k] - target[k]);
    }
    CHECK(std::abs(matching_loss(a, target, start) - num / den) <= 1e-12 * (num / den));
  }
  CHECK_THROWS_AS(matching_loss(start, target, target), DomainError);
  CHECK_THROWS_AS(matching_loss(start, std::vector<double>(3), start), ShapeError);
}

TEST_CASE("identity similarity makes ence and nce unrolls bit-identical", "[distill]") {
  const auto& f = fixture();
  const auto& start = f.store.buffers[1].snapshots[0];
  for (SimMode mode : {SimMode::Identity, SimMode::Lors}) {
    const auto s = init_synthetic(f.data, 8, mode, 2, 1.0, 6, 0.2);
    REQUIRE(s.sim.compose() == Tensor::identity(8));
    for (std::uint64_t seed : {0, 1, 2}) {
      CHECK(unroll_values(s, f.store.model(), start, 6, 3, LossKind::Ence, seed) ==
            unroll_values(s, f.store.model(), start, 6, 3, LossKind::Nce, seed));
    }
  }
}

TEST_CASE("outer gradients match finite differences of the matching loss", "[distill][fd]") {
  const auto& f = fixture();
  const auto& buf = f.store.buffers[0];
  Rng rng(12);
  for (SimMode mode : {SimMode::Lors, SimMode::Full}) {
    for (LossKind kind : {LossKind::Nce, LossKind::Ence, LossKind::Bce, LossKind::Wbce}) {
      const auto cfg = tiny_config(mode, kind);
      const auto s = perturbed_synthetic(cfg, 5);
      const auto ev = evaluate_match(s, f.store.model(), buf.snapshots[0], buf.snapshots[1], cfg, 31);
      for (const auto& [name, grad] : ev.grads) {
        for (int probe = 0; probe < 10; ++probe) {
          const std::size_t k = rng.index(grad.size());
          auto at = [&](double e) {
            SyntheticDataset p = s;
            if (name == "x") p.x[k] += e;
            if (name == "y") p.y[k] += e;
            if (name == "lr") p.inner_lr += e;
            if (name == "omega") p.sim.lors_params().omega[k] += e;
            if (name == "left") p.sim.lors_params().left[k] += e;
            if (name == "right") p.sim.lors_params().right[k] += e;
            if (name == "full") p.sim.full_params().s[k] += e;
            return evaluate_match(p, f.store.model(), buf.snapshots[0], buf.snapshots[1], cfg, 31).loss;
          };
          const double h = 1e-5;
          const double numeric = (at(h) - at(-h)) / (2 * h);
          INFO(to_string(mode) << " " << to_string(kind) << " " << name << "[" << k << "]");
          CHECK(rel_err(grad[k], numeric, 1e-6) <= 1e-3);
        }
      }
    }
  }
}

TEST_CASE("matching loss is invariant to a consistent permutation of pairs", "[distill]") {
  const auto& f = fixture();
  const auto& buf = f.store.buffers[0];
  auto cfg = tiny_config();
  cfg.syn_steps = 1;
  cfg.batch_size = cfg.pairs;
  const auto s = perturbed_synthetic(cfg, 2);
  Rng rng(3);
  const auto perm = rng.permutation(cfg.pairs);
  SyntheticDataset p = s;
  p.x = gather_rows(s.x, perm);
  p.y = gather_rows(s.y, perm);
  auto& lp = p.sim.lors_params();
  lp.omega = gather_rows(s.sim.lors_params().omega, perm);
  lp.left = gather_rows(s.sim.lors_params().left, perm);
  lp.right = gather_rows(s.sim.lors_params().right, perm);
  const double a = evaluate_match(s, f.store.model(), buf.snapshots[0], buf.snapshots[2], cfg, 1).loss;
  const double b = evaluate_match(p, f.store.model(), buf.snapshots[0], buf.snapshots[2], cfg, 5).loss;
  CHECK(std::abs(a - b) <= 1e-12 * std::max(1.0, a));
}

TEST_CASE("ablation flags freeze their parameter groups", "[distill]") {
  const auto& f = fixture();
  auto cfg = tiny_config();
  const auto s = perturbed_synthetic(cfg, 3);

  auto all = cfg;
  all.fix_image = all.fix_text = all.fix_similarity = all.fix_lr = true;
  DistillState st = make_state(s);
  const auto rec = distill_step(st, f.store, all);
  CHECK(st.syn == s);
  CHECK(rec.iteration == 0);
  CHECK(rec.loss >= 0.0);
  CHECK(st.iteration == 1);

  auto fix_sim = cfg;
  fix_sim.fix_similarity = true;
  st = make_state(s);
  distill_step(st, f.store, fix_sim);
  CHECK(st.syn.sim == s.sim);
  CHECK(!(st.syn.x == s.x));
  CHECK(st.syn.inner_lr != s.inner_lr);

  auto no_lr = cfg;
  no_lr.no_lr_residual = true;
  st = make_state(s);
  distill_step(st, f.store, no_lr);
  CHECK(st.syn.sim.lors_params().left == s.sim.lors_params().left);
  CHECK(st.syn.sim.lors_params().right == s.sim.lors_params().right);
  CHECK(!(st.syn.sim.lors_params().omega == s.sim.lors_params().omega));

  auto no_omega = cfg;
  no_omega.no_omega = true;
  st = make_state(s);
  distill_step(st, f.store, no_omega);
  CHECK(st.syn.sim.lors_params().omega == s.sim.lors_params().omega);
  CHECK(!(st.syn.sim.lors_params().right == s.sim.lors_params().right));
}

TEST_CASE("inner lr stays positive", "[distill]") {
  const auto& f = fixture();
  auto cfg = tiny_config();
  cfg.fix_image = cfg.fix_text = cfg.fix_similarity = true;
  cfg.lr_lr = 1e9;
  DistillState st = make_state(perturbed_synthetic(cfg, 4));
  for (int i = 0; i < 3; ++i) distill_step(st, f.store, cfg);
  CHECK(st.syn.inner_lr >= 1e-8);
}

TEST_CASE("run_distillation", "[distill]") {
  const auto& f = fixture();
  auto cfg = tiny_config();
  cfg.iterations = 0;
  const auto none = run_distillation(f.data, f.store, cfg);
  CHECK(none.trace.empty());
  const auto init = init_synthetic(f.data, cfg.pairs, cfg.sim, cfg.rank, cfg.alpha, cfg.seed, cfg.init_inner_lr);
  CHECK(none.syn.x == init.x);
  CHECK(none.syn.sim == init.sim);
  CHECK(none.syn.inner_lr == init.inner_lr);

  cfg.iterations = 5;
  const auto a = run_distillation(f.data, f.store, cfg);
  const auto b = run_distillation(f.data, f.store, cfg);
  CHECK(a.trace.size() == 5);
  CHECK(artifact_bytes(a.syn) == artifact_bytes(b.syn));
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(a.trace[i].iteration == i);
    CHECK(a.trace[i].loss >= 0.0);
    CHECK(a.trace[i].start_epoch <= cfg.max_start_epoch);
  }
  const auto csv = trace_csv(a.trace);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);

  auto too_long = cfg;
  too_long.max_start_epoch = 3;
  CHECK_THROWS_AS(run_distillation(f.data, f.store, too_long), ConfigError);
}
