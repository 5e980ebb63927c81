#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "lors/data_io.hpp"
#include "lors/errors.hpp"
#include "lors/itc_model.hpp"
#include "lors/losses.hpp"
#include "lors/random.hpp"
#include "lors/training.hpp"

namespace lors {

struct SelectionResult {
  std::vector<std::size_t> indices;
  std::string method;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> warnings;
};

inline nlohmann::json to_json(const SelectionResult& r) {
  return {{"method", r.method}, {"config", r.config}, {"indices", r.indices}, {"warnings", r.warnings}};
}

inline SelectionResult selection_from_json(const nlohmann::json& j) {
  return {j.at("indices").get<std::vector<std::size_t>>(), j.at("method").get<std::string>(), j.at("config"),
          j.value("warnings", std::vector<std::string>{})};
}

namespace detail {

inline void check_budget(std::size_t n, std::size_t m) {
  if (n == 0 || n > m) {
    throw ConfigError("selection size " + std::to_string(n) + " must be in [1, " + std::to_string(m) + "]");
  }
}

}  // namespace detail

/// Row-normalized image features next to row-normalized text features.
inline Tensor selection_features(const EmbeddingPairDataset& ds) {
  const Tensor a = normalize_rows(ds.x), b = normalize_rows(ds.y);
  Tensor f(ds.size(), a.cols() + b.cols());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), f.row(i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(), f.row(i).begin() + static_cast<std::ptrdiff_t>(a.cols()));
  }
  return f;
}

inline SelectionResult select_random(const EmbeddingPairDataset& ds, std::size_t n, std::uint64_t seed) {
  detail::check_budget(n, ds.size());
  Rng rng(seed);
  return {rng.sample_without_replacement(ds.size(), n), "random", {{"seed", seed}}, {}};
}

/// Greedy farthest-point selection starting from `first` (Euclidean; ties to the lower index).
inline std::vector<std::size_t> kcenter_greedy(const Tensor& features, std::size_t n, std::size_t first) {
  const std::size_t m = features.rows();
  detail::check_budget(n, m);
  if (first >= m) throw ShapeError("first center out of range");
  std::vector<double> dist(m, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(m, false);
  std::vector<std::size_t> out;
  std::size_t next = first;
  while (out.size() < n) {
    out.push_back(next);
    taken[next] = true;
    for (std::size_t i = 0; i < m; ++i) {
      dist[i] = std::min(dist[i], squared_distance(features.row(i), features.row(next)));
    }
    double best = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (!taken[i] && dist[i] > best) {
        best = dist[i];
        next = i;
      }
    }
  }
  return out;
}

inline SelectionResult select_kcenter(const EmbeddingPairDataset& ds, std::size_t n, std::uint64_t seed) {
  detail::check_budget(n, ds.size());
  Rng rng(seed);
  const std::size_t first = rng.index(ds.size());
  return {kcenter_greedy(selection_features(ds), n, first), "kcenter", {{"seed", seed}, {"first", first}}, {}};
}

/// Greedy mean matching: each pick minimizes ||mean(all) - mean(selected + candidate)||
/// (ties to the lower index).
inline std::vector<std::size_t> herding_greedy(const Tensor& features, std::size_t n) {
  const std::size_t m = features.rows(), d = features.cols();
  detail::check_budget(n, m);
  std::vector<double> target(d, 0.0), running(d, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t c = 0; c < d; ++c) target[c] += features(i, c);
  }
  for (auto& t : target) t /= static_cast<double>(m);
  std::vector<bool> taken(m, false);
  std::vector<std::size_t> out;
  std::vector<double> candidate(d);
  for (std::size_t k = 0; k < n; ++k) {
    const double inv = 1.0 / static_cast<double>(k + 1);
    double best = std::numeric_limits<double>::infinity();
    std::size_t pick = m;
    for (std::size_t i = 0; i < m; ++i) {
      if (taken[i]) continue;
      for (std::size_t c = 0; c < d; ++c) candidate[c] = (running[c] + features(i, c)) * inv;
      const double gap = squared_distance(candidate, target);
      if (gap < best) {
        best = gap;
        pick = i;
      }
    }
    taken[pick] = true;
    out.push_back(pick);
    for (std::size_t c = 0; c < d; ++c) running[c] += features(pick, c);
  }
  return out;
}

inline SelectionResult select_herding(const EmbeddingPairDataset& ds, std::size_t n) {
  return {herding_greedy(selection_features(ds), n), "herding", nlohmann::json::object(), {}};
}

/// Counts, per example, transitions from "diagonal is the row argmax" to "it is not"
/// between consecutive observations of that example.
class ForgettingTracker {
 public:
  explicit ForgettingTracker(std::size_t m) : last_(m, -1), events_(m, 0) {}

  void record(std::size_t example, bool correct) {
    if (last_.at(example) == 1 && !correct) ++events_[example];
    last_[example] = correct ? 1 : 0;
  }

  const std::vector<std::size_t>& events() const { return events_; }

 private:
  std::vector<int> last_;
  std::vector<std::size_t> events_;
};

struct ForgettingProbeConfig {
  ModelSpec model{EncoderSpec::linear(32, 16), EncoderSpec::linear(32, 16), 0.07};
  std::size_t epochs = 5;
  std::size_t batch_size = 100;
  double lr = 0.05;
};

/// Per-epoch, per-example in-batch correctness (1 when the diagonal is the row argmax).
using ProbeLog = std::vector<std::vector<std::uint8_t>>;

inline ProbeLog forgetting_probe(const EmbeddingPairDataset& ds, const ForgettingProbeConfig& cfg, std::uint64_t seed) {
  ProbeLog log;
  if (cfg.epochs == 0) return log;
  const std::size_t batch = std::min(cfg.batch_size, ds.size());
  ModelParams params = init_params(cfg.model, derive_seed(seed, 30));
  MomentumSgd opt(cfg.lr, 0.0);
  BatchSchedule schedule(ds.size(), batch, derive_seed(seed, 31));
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::vector<std::uint8_t> state(ds.size(), 0);
    for (std::size_t b = 0; b < schedule.batches_per_pass(); ++b) {
      const auto idx = schedule.next();
      const auto lg = sgd_step(cfg.model, params, opt, gather_rows(ds.x, idx), gather_rows(ds.y, idx), LossKind::Nce,
                               GtSimilarity::identity(idx.size()));
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto row = lg.logits.row(r);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        state[idx[r]] = best == r ? 1 : 0;
      }
    }
    log.push_back(std::move(state));
  }
  return log;
}

/// The n examples with the most forgetting events (ties to the lower index).
inline SelectionResult select_forgetting(const EmbeddingPairDataset& ds, std::size_t n,
                                         const ForgettingProbeConfig& cfg, std::uint64_t seed) {
  detail::check_budget(n, ds.size());
  const ProbeLog log = forgetting_probe(ds, cfg, seed);
  ForgettingTracker tracker(ds.size());
  for (const auto& epoch : log) {
    for (std::size_t i = 0; i < epoch.size(); ++i) tracker.record(i, epoch[i] != 0);
  }
  const auto& events = tracker.events();
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return events[a] > events[b]; });
  order.resize(n);
  SelectionResult r{order, "forgetting",
                    {{"seed", seed}, {"probe_epochs", cfg.epochs}, {"probe_batch_size", cfg.batch_size},
                     {"probe_lr", cfg.lr}, {"events", events}},
                    {}};
  if (cfg.epochs == 0) {
    r.warnings.push_back("no probe epochs: selection falls back to the lowest indices");
  } else if (std::all_of(events.begin(), events.end(), [](std::size_t e) { return e == 0; })) {
    r.warnings.push_back("no forgetting events observed: selection falls back to the lowest indices");
  }
  return r;
}

}  // namespace lors
