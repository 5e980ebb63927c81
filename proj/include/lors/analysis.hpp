#pragma once

#include <algorithm>
#include <array>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lors/data_io.hpp"
#include "lors/distiller.hpp"
#include "lors/errors.hpp"
#include "lors/lors_similarity.hpp"
#include "lors/tensor.hpp"

namespace lors {

/// Cell groups of a similarity matrix built from replicated pairs.
enum class CellGroup { Positive = 0, FalseNegative = 1, Negative = 2 };

inline constexpr std::array<const char*, 3> kCellGroupNames{"true_positive", "false_negative", "true_negative"};

/// Per-group histograms of similarity values over shared uniform bins.
struct SimHistogram {
  std::vector<double> edges;                   // bins + 1 edges spanning [min, max]
  std::array<std::vector<double>, 3> density;  // normalized counts per group
  std::array<std::size_t, 3> cells{};          // cell counts per group
  std::array<double, 3> means{};
};

inline SimHistogram sim_histogram(const Tensor& s, const Tensor& false_negative_mask, std::size_t bins = 50) {
  if (s.rows() != s.cols() || s.shape() != false_negative_mask.shape()) {
    throw ShapeError("histogram needs a square similarity and a matching mask");
  }
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  if (!s.all_finite()) throw NumericalError("similarity has non-finite entries");
  const std::size_t n = s.rows();
  auto group_of = [&](std::size_t i, std::size_t j) {
    if (i == j) return CellGroup::Positive;
    return false_negative_mask(i, j) != 0.0 ? CellGroup::FalseNegative : CellGroup::Negative;
  };
  const auto [lo_it, hi_it] = std::minmax_element(s.values().begin(), s.values().end());
  const double lo = *lo_it, hi = *hi_it;
  const double width = hi > lo ? (hi - lo) / static_cast<double>(bins) : 1.0;
  SimHistogram h;
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(lo + width * static_cast<double>(b));
  for (auto& d : h.density) d.assign(bins, 0.0);
  std::array<double, 3> sums{};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto g = static_cast<std::size_t>(group_of(i, j));
      const auto bin = std::min(bins - 1, static_cast<std::size_t>((s(i, j) - lo) / width));
      h.density[g][bin] += 1.0;
      ++h.cells[g];
      sums[g] += s(i, j);
    }
  }
  for (std::size_t g = 0; g < 3; ++g) {
    if (h.cells[g] == 0) continue;
    for (auto& d : h.density[g]) d /= static_cast<double>(h.cells[g]);
    h.means[g] = sums[g] / static_cast<double>(h.cells[g]);
  }
  return h;
}

inline std::string to_csv(const SimHistogram& h) {
  std::ostringstream os;
  os.precision(17);
  os << "bin_lo,bin_hi," << kCellGroupNames[0] << ',' << kCellGroupNames[1] << ',' << kCellGroupNames[2] << '\n';
  for (std::size_t b = 0; b + 1 < h.edges.size(); ++b) {
    os << h.edges[b] << ',' << h.edges[b + 1] << ',' << h.density[0][b] << ',' << h.density[1][b] << ','
       << h.density[2][b] << '\n';
  }
  return os.str();
}

struct FalseNegativeProbe {
  SimHistogram before;
  SimHistogram after;
  DistillResult run;
};

/// Distills from `dup` real pairs each placed twice in adjacent rows, then
/// histograms the learned similarity by cell group.
inline FalseNegativeProbe false_negative_probe(const EmbeddingPairDataset& real, std::size_t dup,
                                               const TrajectoryStore& store, const DistillConfig& cfg,
                                               std::size_t bins = 50) {
  auto probe = build_duplicate_probe(real, dup, derive_seed(cfg.seed, 3));
  const std::size_t n = probe.data.size();
  if (cfg.sim != SimMode::Lors && cfg.sim != SimMode::Full) {
    throw ConfigError("the false-negative probe needs a learnable similarity");
  }
  Similarity sim = FullSimParams{Tensor::identity(n)};
  if (cfg.sim == SimMode::Lors) sim = init_lors(n, cfg.rank, cfg.alpha, derive_seed(cfg.seed, 2));
  SyntheticDataset init{probe.data.x, probe.data.y, std::move(sim), cfg.init_inner_lr,
                        {{"duplicate_probe", {{"dup", dup}, {"sources", probe.sources}}}}};
  FalseNegativeProbe out;
  out.before = sim_histogram(init.sim.compose(), probe.false_negative_mask, bins);
  auto probe_cfg = cfg;
  probe_cfg.pairs = n;
  out.run = run_distillation_from(std::move(init), store, probe_cfg);
  out.after = sim_histogram(out.run.syn.sim.compose(), probe.false_negative_mask, bins);
  return out;
}

struct DecomposedSimilarity {
  Tensor omega;     // N x 1
  Tensor residual;  // (alpha / r) L R^T
};

inline DecomposedSimilarity decompose_view(const LorsParams& p) {
  Tensor residual = matmul_nt(p.left, p.right);
  const double c = p.alpha / static_cast<double>(p.rank);
  for (auto& v : residual.values()) v *= c;
  return {p.omega, std::move(residual)};
}

struct SpectrumReport {
  std::vector<double> singular_values;  // descending
  double threshold = 0.0;               // relative to the largest singular value
  std::size_t numerical_rank = 0;
};

inline SpectrumReport spectrum(const Tensor& a, double threshold) {
  if (!a.all_finite()) throw NumericalError("spectrum of a matrix with non-finite entries");
  Eigen::MatrixXd m(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(i, j);
    }
  }
  const Eigen::VectorXd sv = Eigen::BDCSVD<Eigen::MatrixXd>(m).singularValues();
  SpectrumReport r;
  r.threshold = threshold;
  r.singular_values.assign(sv.data(), sv.data() + sv.size());
  std::sort(r.singular_values.begin(), r.singular_values.end(), std::greater<>());
  const double top = r.singular_values.empty() ? 0.0 : r.singular_values.front();
  for (double s : r.singular_values) r.numerical_rank += s > threshold * top ? 1 : 0;
  return r;
}

inline std::string to_csv(const SpectrumReport& r, const std::string& label) {
  std::ostringstream os;
  os.precision(17);
  os << "matrix,index,singular_value\n";
  for (std::size_t k = 0; k < r.singular_values.size(); ++k) {
    os << label << ',' << k << ',' << r.singular_values[k] << '\n';
  }
  return os.str();
}

/// Cosine similarities between the rows of a and the rows of b.
inline Tensor pairwise_similarity(const Tensor& a, const Tensor& b) {
  return matmul_nt(normalize_rows(a), normalize_rows(b));
}

}  // namespace lors
