#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lors/data_io.hpp"
#include "lors/errors.hpp"
#include "lors/itc_model.hpp"
#include "lors/losses.hpp"
#include "lors/parallel.hpp"
#include "lors/synthetic.hpp"
#include "lors/training.hpp"

namespace lors {

struct StudentConfig {
  LossKind loss = LossKind::Wbce;
  double beta = kDefaultBeta;
  std::size_t steps = 300;
  std::size_t batch_size = 20;
  std::optional<double> lr;  // unset: the artifact's learned inner_lr
  double momentum = 0.0;
};

struct StudentResult {
  ModelParams params;
  std::vector<double> losses;  // per step
};

/// Trains a freshly initialized model on synthetic pairs and their similarity.
inline StudentResult train_student(const SyntheticDataset& syn, const ModelSpec& spec, const StudentConfig& cfg,
                                   std::uint64_t seed) {
  syn.validate();
  spec.validate();
  if (syn.x.cols() != spec.image.input_dim || syn.y.cols() != spec.text.input_dim) {
    throw ShapeError("synthetic dims do not match the student model");
  }
  if (cfg.loss == LossKind::Nce && syn.sim.kind() != Similarity::Kind::Identity) {
    throw ConfigError("nce cannot use a learned similarity; pick ence, bce or wbce");
  }
  StudentResult out{init_params(spec, derive_seed(seed, 20)), {}};
  MomentumSgd opt(cfg.lr.value_or(syn.inner_lr), cfg.momentum);
  if (cfg.steps == 0) return out;
  BatchSchedule schedule(syn.size(), std::min(cfg.batch_size, syn.size()), derive_seed(seed, 21));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto idx = schedule.next();
    try {
      out.losses.push_back(sgd_step(spec, out.params, opt, gather_rows(syn.x, idx), gather_rows(syn.y, idx), cfg.loss,
                                    {syn.sim.compose(idx, idx), cfg.beta})
                               .loss);
    } catch (const NumericalError& e) {
      throw NumericalError("student seed " + std::to_string(seed) + " step " + std::to_string(step) + ": " + e.what());
    }
  }
  return out;
}

/// Percentage of queries whose own gallery item (same index) ranks in the top K
/// of `scores` (queries x gallery). Ties rank the lower gallery index first.
inline std::vector<double> recall_at_k(const Tensor& scores, std::span<const std::size_t> ks) {
  const std::size_t q = scores.rows(), n = scores.cols();
  if (q != n) throw ShapeError("retrieval needs one gallery item per query");
  for (auto k : ks) {
    if (k == 0 || k > n) {
      throw ConfigError("K=" + std::to_string(k) + " must be in [1, gallery size " + std::to_string(n) + "]");
    }
  }
  std::vector<std::size_t> hits(ks.size(), 0);
  for (std::size_t i = 0; i < q; ++i) {
    const double own = scores(i, i);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (scores(i, j) > own || (scores(i, j) == own && j < i)) ++rank;
    }
    for (std::size_t a = 0; a < ks.size(); ++a) hits[a] += rank < ks[a] ? 1 : 0;
  }
  std::vector<double> out;
  for (auto h : hits) out.push_back(100.0 * static_cast<double>(h) / static_cast<double>(q));
  return out;
}

struct RetrievalScores {
  std::vector<std::size_t> ks;
  std::vector<double> ir;  // text query -> image gallery
  std::vector<double> tr;  // image query -> text gallery
};

inline RetrievalScores retrieval_from_embeddings(const Tensor& u, const Tensor& v, std::vector<std::size_t> ks) {
  if (u.rows() != v.rows()) throw ShapeError("image and text embedding counts differ");
  return {ks, recall_at_k(matmul_nt(v, u), ks), recall_at_k(matmul_nt(u, v), ks)};
}

inline RetrievalScores retrieval_metrics(const ModelParams& params, const ModelSpec& spec,
                                         const EmbeddingPairDataset& test, std::vector<std::size_t> ks) {
  return retrieval_from_embeddings(encode(params.image, spec.image, test.x), encode(params.text, spec.text, test.y),
                                   std::move(ks));
}

struct MetricSummary {
  std::vector<double> values;  // one per seed
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single seed
};

inline MetricSummary summarize(std::vector<double> values) {
  MetricSummary s{std::move(values), 0.0, 0.0};
  if (s.values.empty()) return s;
  for (double v : s.values) s.mean += v;
  s.mean /= static_cast<double>(s.values.size());
  if (s.values.size() > 1) {
    double ss = 0.0;
    for (double v : s.values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(s.values.size() - 1));
  }
  return s;
}

/// Aggregated retrieval of students of one architecture over several seeds.
struct RetrievalReport {
  std::string spec_name;
  std::vector<std::size_t> ks;
  std::vector<std::uint64_t> seeds;
  std::vector<MetricSummary> ir;  // per K
  std::vector<MetricSummary> tr;

  /// (IR@1 + TR@1) / 2 of each seed.
  std::vector<double> mean_r1_per_seed() const {
    std::vector<double> out;
    for (std::size_t s = 0; s < seeds.size(); ++s) out.push_back((ir.front().values[s] + tr.front().values[s]) / 2.0);
    return out;
  }
};

struct EvalConfig {
  StudentConfig student;
  std::vector<std::size_t> ks{1, 5, 10};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t threads = 0;
};

inline std::vector<RetrievalReport> evaluate_synthetic(const SyntheticDataset& syn, const std::vector<ModelSpec>& specs,
                                                       const EmbeddingPairDataset& test, const EvalConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("evaluation needs at least one seed");
  if (specs.empty()) throw ConfigError("evaluation needs at least one model spec");
  const std::size_t ns = cfg.seeds.size();
  std::vector<RetrievalScores> runs(specs.size() * ns);
  parallel_for(runs.size(), cfg.threads, [&](std::size_t k) {
    const auto& spec = specs[k / ns];
    const auto student = train_student(syn, spec, cfg.student, cfg.seeds[k % ns]);
    runs[k] = retrieval_metrics(student.params, spec, test, cfg.ks);
  });
  std::vector<RetrievalReport> reports;
  for (std::size_t p = 0; p < specs.size(); ++p) {
    RetrievalReport r{specs[p].image.name() + "/" + specs[p].text.name(), cfg.ks, cfg.seeds, {}, {}};
    for (std::size_t a = 0; a < cfg.ks.size(); ++a) {
      std::vector<double> ir, tr;
      for (std::size_t s = 0; s < ns; ++s) {
        ir.push_back(runs[p * ns + s].ir[a]);
        tr.push_back(runs[p * ns + s].tr[a]);
      }
      r.ir.push_back(summarize(std::move(ir)));
      r.tr.push_back(summarize(std::move(tr)));
    }
    reports.push_back(std::move(r));
  }
  return reports;
}

inline nlohmann::json to_json(const std::vector<RetrievalReport>& reports) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json metrics = nlohmann::json::object();
    for (std::size_t a = 0; a < r.ks.size(); ++a) {
      for (const auto& [name, m] : {std::pair{"IR", &r.ir[a]}, std::pair{"TR", &r.tr[a]}}) {
        metrics[std::string(name) + "@" + std::to_string(r.ks[a])] = {
            {"mean", m->mean}, {"std", m->std}, {"per_seed", m->values}};
      }
    }
    blocks.push_back({{"spec", r.spec_name}, {"ks", r.ks}, {"seeds", r.seeds}, {"metrics", metrics}});
  }
  return {{"reports", blocks}};
}

inline std::string to_csv(const std::vector<RetrievalReport>& reports) {
  std::ostringstream os;
  os << "spec,metric,k,mean,std,n_seeds\n";
  for (const auto& r : reports) {
    for (std::size_t a = 0; a < r.ks.size(); ++a) {
      os << r.spec_name << ",IR," << r.ks[a] << ',' << r.ir[a].mean << ',' << r.ir[a].std << ',' << r.seeds.size()
         << '\n';
      os << r.spec_name << ",TR," << r.ks[a] << ',' << r.tr[a].mean << ',' << r.tr[a].std << ',' << r.seeds.size()
         << '\n';
    }
  }
  return os.str();
}

/// Fixed-width table: one row per spec, IR@K columns then TR@K columns.
inline std::string format_table(const std::vector<RetrievalReport>& reports) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(1);
  if (reports.empty()) return {};
  os << "spec                ";
  for (auto k : reports.front().ks) os << "   IR@" << k << "     ";
  for (auto k : reports.front().ks) os << "   TR@" << k << "     ";
  os << '\n';
  for (const auto& r : reports) {
    std::string name = r.spec_name;
    name.resize(20, ' ');
    os << name;
    for (const auto* group : {&r.ir, &r.tr}) {
      for (const auto& m : *group) {
        std::ostringstream cell;
        cell.setf(std::ios::fixed);
        cell.precision(1);
        cell << m.mean << "+-" << m.std;
        std::string c = cell.str();
        c.resize(12, ' ');
        os << c;
      }
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace lors
