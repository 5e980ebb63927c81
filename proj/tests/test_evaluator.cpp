#include <catch2/catch_amalgamated.hpp>

#include "lors/evaluator.hpp"
#include "test_support.hpp"

using namespace lors;
using lors::testing::exhaustive_rank;

namespace {

const EmbeddingPairDataset& toy_train() {
  static const auto d = [] {
    ToyGenConfig c;
    c.topics = 5;
    c.train_per_topic = 20;
    c.test_per_topic = 10;
    c.seed = 4;
    return generate_toy(c);
  }();
  return d.first;
}

const EmbeddingPairDataset& toy_test() {
  static const auto d = [] {
    ToyGenConfig c;
    c.topics = 5;
    c.train_per_topic = 20;
    c.test_per_topic = 10;
    c.seed = 4;
    return generate_toy(c).second;
  }();
  return d;
}

ModelSpec linear_spec() { return {EncoderSpec::linear(32, 8), EncoderSpec::linear(32, 8), 0.07}; }

SyntheticDataset lors_artifact() {
  std::vector<std::size_t> idx(30);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = 2 * i;
  auto s = subset_artifact(toy_train(), idx, 0.05, {});
  auto p = init_lors(30, 3, 1.0, 5);
  Rng rng(6);
  p.right = Tensor::normal(30, 3, rng, 0.1);
  s.sim = p;
  return s;
}

double full_loss(const SyntheticDataset& s, const ModelSpec& spec, const ModelParams& p, LossKind kind) {
  const Tensor u = encode(p.image, spec.image, s.x);
  const Tensor v = encode(p.text, spec.text, s.y);
  return contrastive_loss(kind, similarity_logits(u, v, spec.tau), {s.sim.compose(), kDefaultBeta}).loss;
}

}  // namespace

TEST_CASE("zero student steps return the seeded initialization", "[eval]") {
  StudentConfig cfg;
  cfg.steps = 0;
  const auto r = train_student(lors_artifact(), linear_spec(), cfg, 3);
  CHECK(r.params == init_params(linear_spec(), derive_seed(3, 20)));
  CHECK(r.losses.empty());
}

TEST_CASE("student training lowers the loss on the artifact", "[eval]") {
  const auto s = lors_artifact();
  StudentConfig cfg;
  cfg.steps = 200;
  cfg.lr = 0.1;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto r = train_student(s, linear_spec(), cfg, seed);
    CHECK(r.losses.size() == 200);
    const double before = full_loss(s, linear_spec(), init_params(linear_spec(), derive_seed(seed, 20)), cfg.loss);
    const double after = full_loss(s, linear_spec(), r.params, cfg.loss);
    INFO(before << " -> " << after);
    CHECK(after < before);
  }
}

TEST_CASE("identity similarity with nce is a plain contrastive run", "[eval]") {
  std::vector<std::size_t> idx(25);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = 3 * i;
  const auto s = subset_artifact(toy_train(), idx, 0.2, {});
  StudentConfig cfg;
  cfg.loss = LossKind::Nce;
  cfg.steps = 30;
  cfg.batch_size = 10;
  const auto student = train_student(s, linear_spec(), cfg, 8);

  ModelParams params = init_params(linear_spec(), derive_seed(8, 20));
  BatchSchedule schedule(25, 10, derive_seed(8, 21));
  for (int step = 0; step < 30; ++step) {
    const auto b = schedule.next();
    const auto lg = itc_loss_and_grad(linear_spec(), params, gather_rows(s.x, b), gather_rows(s.y, b), LossKind::Nce,
                                      GtSimilarity::identity(b.size()));
    auto flat = params.flatten();
    for (std::size_t k = 0; k < flat.size(); ++k) flat[k] -= 0.2 * lg.grad[k];
    params = ModelParams::unflatten(linear_spec(), flat);
  }
  CHECK(student.params == params);

  auto lors = lors_artifact();
  CHECK_THROWS_AS(train_student(lors, linear_spec(), cfg, 0), ConfigError);
}

TEST_CASE("retrieval examples", "[eval]") {
  Rng rng(1);
  const Tensor u = lors::testing::random_unit_rows(10, 4, rng);
  const auto perfect = retrieval_from_embeddings(u, u, {1, 5, 10});
  for (double r : perfect.ir) CHECK(r == 100.0);
  for (double r : perfect.tr) CHECK(r == 100.0);

  const Tensor v = lors::testing::random_unit_rows(10, 4, rng);
  const auto full = retrieval_from_embeddings(u, v, {10});
  CHECK(full.ir[0] == 100.0);
  CHECK(full.tr[0] == 100.0);
  CHECK_THROWS_AS(retrieval_from_embeddings(u, v, {11}), ConfigError);
  CHECK_THROWS_AS(retrieval_from_embeddings(u, v, {0}), ConfigError);
}

TEST_CASE("ties rank the lower gallery index first", "[eval]") {
  const Tensor scores = Tensor::from_rows({{0.5, 0.5, 0.1}, {0.5, 0.5, 0.1}, {0.2, 0.2, 0.2}});
  const std::vector<std::size_t> ks{1, 2};
  const auto r = recall_at_k(scores, ks);
  // query 0 ranks first, query 1 second (behind index 0), query 2 third (behind 0 and 1)
  CHECK(r[0] == Catch::Approx(100.0 / 3.0));
  CHECK(r[1] == Catch::Approx(200.0 / 3.0));
}

TEST_CASE("recall matches an exhaustive ranking oracle", "[eval][oracle]") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor u = lors::testing::random_unit_rows(10, 3, rng);
    const Tensor v = lors::testing::random_unit_rows(10, 3, rng);
    std::vector<std::size_t> ks(10);
    for (std::size_t k = 0; k < 10; ++k) ks[k] = k + 1;
    const auto r = retrieval_from_embeddings(u, v, ks);
    const Tensor t2i = matmul_nt(v, u), i2t = matmul_nt(u, v);
    for (std::size_t a = 0; a < ks.size(); ++a) {
      std::size_t ir = 0, tr = 0;
      for (std::size_t q = 0; q < 10; ++q) {
        ir += exhaustive_rank(t2i, q, q) < ks[a] ? 1 : 0;
        tr += exhaustive_rank(i2t, q, q) < ks[a] ? 1 : 0;
      }
      CHECK(r.ir[a] == 100.0 * static_cast<double>(ir) / 10.0);
      CHECK(r.tr[a] == 100.0 * static_cast<double>(tr) / 10.0);
      if (a > 0) {
        CHECK(r.ir[a] >= r.ir[a - 1]);
        CHECK(r.tr[a] >= r.tr[a - 1]);
      }
    }
    // K=1 is the argmax count
    std::size_t argmax_hits = 0;
    for (std::size_t q = 0; q < 10; ++q) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < 10; ++j) best = i2t(q, j) > i2t(q, best) ? j : best;
      argmax_hits += best == q ? 1 : 0;
    }
    CHECK(r.tr[0] == 10.0 * static_cast<double>(argmax_hits));
  }
}

TEST_CASE("metrics are invariant to consistent re-indexing", "[eval]") {
  Rng rng(3);
  const Tensor u = lors::testing::random_unit_rows(30, 3, rng);
  const Tensor v = lors::testing::random_unit_rows(30, 3, rng);
  const auto perm = rng.permutation(30);
  const auto a = retrieval_from_embeddings(u, v, {1, 5});
  const auto b = retrieval_from_embeddings(gather_rows(u, perm), gather_rows(v, perm), {1, 5});
  CHECK(a.ir == b.ir);
  CHECK(a.tr == b.tr);
}

TEST_CASE("seed aggregation", "[eval]") {
  const auto two = summarize({10.0, 20.0});
  CHECK(two.mean == 15.0);
  CHECK(two.std == Catch::Approx(7.0710678118654755).epsilon(1e-14));
  CHECK(summarize({42.0}).std == 0.0);
}

TEST_CASE("evaluate_synthetic reports one block per architecture", "[eval]") {
  const auto s = lors_artifact();
  const auto before = artifact_digest(s);
  EvalConfig cfg;
  cfg.student.steps = 20;
  cfg.seeds = {0};
  const ModelSpec mlp{EncoderSpec::mlp(32, {16}, 8), EncoderSpec::mlp(32, {16}, 8), 0.07};
  const std::vector<ModelSpec> specs{linear_spec(), mlp};
  const auto reports = evaluate_synthetic(s, specs, toy_test(), cfg);
  CHECK(artifact_digest(s) == before);
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].spec_name == "linear/linear");
  CHECK(reports[1].spec_name == "mlp-16/mlp-16");
  for (const auto& r : reports) {
    for (std::size_t a = 0; a < r.ks.size(); ++a) {
      CHECK(r.ir[a].std == 0.0);
      CHECK(r.ir[a].mean >= 0.0);
      CHECK(r.tr[a].mean <= 100.0);
      if (a > 0) CHECK(r.ir[a].mean >= r.ir[a - 1].mean);
    }
  }
  const auto j = to_json(reports);
  CHECK(j.at("reports").size() == 2);
  CHECK(j["reports"][0]["metrics"].contains("IR@1"));
  CHECK(j["reports"][0]["metrics"]["TR@10"]["per_seed"].size() == 1);
  CHECK(format_table(reports).find("IR@5") != std::string::npos);

  cfg.seeds = {0, 1, 2};
  const auto multi = evaluate_synthetic(s, {linear_spec()}, toy_test(), cfg);
  CHECK(multi[0].seeds.size() == 3);
  CHECK(multi[0].ir[0].values.size() == 3);
  CHECK(multi[0].mean_r1_per_seed().size() == 3);
  // concurrency does not change results
  cfg.threads = 3;
  const auto threaded = evaluate_synthetic(s, {linear_spec()}, toy_test(), cfg);
  CHECK(threaded[0].ir[0].values == multi[0].ir[0].values);

  cfg.seeds.clear();
  CHECK_THROWS_AS(evaluate_synthetic(s, specs, toy_test(), cfg), ConfigError);
}
