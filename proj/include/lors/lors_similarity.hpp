#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lors/errors.hpp"
#include "lors/graph.hpp"
#include "lors/random.hpp"
#include "lors/tensor.hpp"

namespace lors {

/// Learnable similarity S = diag(omega) + (alpha / r) L R^T.
struct LorsParams {
  Tensor omega;  // N x 1
  Tensor left;   // N x r
  Tensor right;  // N x r
  double alpha = 1.0;
  std::size_t rank = 1;

  std::size_t size() const { return omega.rows(); }
  std::size_t learnable_count() const { return omega.size() + left.size() + right.size(); }

  void validate() const {
    const std::size_t n = omega.rows();
    if (omega.cols() != 1 || left.shape() != std::array<std::size_t, 2>{n, rank} ||
        right.shape() != std::array<std::size_t, 2>{n, rank}) {
      throw ShapeError("inconsistent LoRS parameter shapes");
    }
    if (rank < 1 || rank > n) throw ConfigError("LoRS rank must satisfy 1 <= r <= N");
    if (!(alpha > 0.0)) throw ConfigError("LoRS alpha must be positive");
  }

  friend bool operator==(const LorsParams&, const LorsParams&) = default;
};

/// Unconstrained N x N similarity (ablation variant).
struct FullSimParams {
  Tensor s;

  std::size_t size() const { return s.rows(); }
  friend bool operator==(const FullSimParams&, const FullSimParams&) = default;
};

/// Fixed identity similarity of size N (plain contrastive data).
struct IdentitySim {
  std::size_t n = 0;

  std::size_t size() const { return n; }
  friend bool operator==(const IdentitySim&, const IdentitySim&) = default;
};

/// N(2r + 1): omega plus two N x r factors.
inline std::uint64_t param_count(std::uint64_t n, std::uint64_t r) { return n * (2 * r + 1); }

/// omega = 1, L ~ N(0, l_scale^2), R = 0, so the composed matrix starts at exactly I.
inline LorsParams init_lors(std::size_t n, std::size_t r, double alpha, std::uint64_t seed, double l_scale = 1.0) {
  if (n < 1 || r < 1 || r > n) throw ConfigError("LoRS rank must satisfy 1 <= r <= N");
  if (!(alpha > 0.0)) throw ConfigError("LoRS alpha must be positive");
  Rng rng(seed);
  return {Tensor::ones(n, 1), Tensor::normal(n, r, rng, l_scale), Tensor::zeros(n, r), alpha, r};
}

/// S[rows[a], cols[b]] = omega_i [i == j] + (alpha / r) <L_i, R_j>.
inline Tensor compose(const LorsParams& p, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  const std::size_t n = p.size();
  for (auto i : rows) {
    if (i >= n) throw ShapeError("similarity row index " + std::to_string(i) + " out of range");
  }
  for (auto j : cols) {
    if (j >= n) throw ShapeError("similarity column index " + std::to_string(j) + " out of range");
  }
  const Tensor lr = matmul_nt(gather_rows(p.left, rows), gather_rows(p.right, cols));
  const double c = p.alpha / static_cast<double>(p.rank);
  Tensor out(rows.size(), cols.size());
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = 0; b < cols.size(); ++b) {
      const double diag = rows[a] == cols[b] ? p.omega(rows[a], 0) : 0.0;
      out(a, b) = diag + c * lr(a, b);
    }
  }
  return out;
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

inline Tensor compose(const LorsParams& p) {
  const auto all = iota_indices(p.size());
  return compose(p, all, all);
}

/// Graph form of compose(); omega (N x 1), left and right (N x r) are nodes.
inline Var compose(Graph& g, Var omega, Var left, Var right, double alpha, std::size_t rank,
                   const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
  Tensor same(rows.size(), cols.size());
  for (std::size_t a = 0; a < rows.size(); ++a) {
    for (std::size_t b = 0; b < cols.size(); ++b) same(a, b) = rows[a] == cols[b] ? 1.0 : 0.0;
  }
  Var diag = g.mul(g.gather_rows(omega, rows), g.constant(std::move(same)));
  Var residual = g.matmul(g.gather_rows(left, rows), g.transpose(g.gather_rows(right, cols)));
  return g.add(diag, g.scale(residual, alpha / static_cast<double>(rank)));
}

/// Largest pair count N' <= pairs whose similarity parameters N'(2r+1) fit in
/// the storage freed by the (pairs - N') dropped pairs of (pair_size) values each.
inline std::uint64_t pair_budget_reduction(std::uint64_t pairs, std::uint64_t image_values, std::uint64_t text_dim,
                                           std::uint64_t r) {
  if (pairs == 0 || image_values == 0 || text_dim == 0 || r == 0) {
    throw ConfigError("pair budget sizes must be positive");
  }
  const std::uint64_t pair_size = image_values + text_dim;
  // (pairs - N') * pair_size >= N' (2r + 1)  <=>  N' <= pairs * pair_size / (pair_size + 2r + 1)
  const auto reduced = static_cast<std::uint64_t>(
      (static_cast<unsigned __int128>(pairs) * pair_size) / (pair_size + 2 * r + 1));
  if (reduced == 0 || reduced < r) {
    throw ConfigError("rank " + std::to_string(r) + " does not fit the parameter budget of " +
                      std::to_string(pairs) + " pairs");
  }
  return reduced;
}

/// The similarity carried by a synthetic dataset.
class Similarity {
 public:
  using Variant = std::variant<IdentitySim, LorsParams, FullSimParams>;

  enum class Kind : std::uint8_t { Identity = 0, Lors = 1, Full = 2 };

  Similarity() = default;
  Similarity(Variant v) : value_(std::move(v)) {}          // NOLINT(google-explicit-constructor)
  Similarity(IdentitySim p) : value_(p) {}                  // NOLINT(google-explicit-constructor)
  Similarity(LorsParams p) : value_(std::move(p)) {}        // NOLINT(google-explicit-constructor)
  Similarity(FullSimParams p) : value_(std::move(p)) {}     // NOLINT(google-explicit-constructor)

  Kind kind() const { return static_cast<Kind>(value_.index()); }
  std::size_t size() const {
    return std::visit([](const auto& p) { return p.size(); }, value_);
  }

  const Variant& variant() const { return value_; }
  Variant& variant() { return value_; }

  const LorsParams& lors_params() const { return std::get<LorsParams>(value_); }
  LorsParams& lors_params() { return std::get<LorsParams>(value_); }
  const FullSimParams& full_params() const { return std::get<FullSimParams>(value_); }
  FullSimParams& full_params() { return std::get<FullSimParams>(value_); }

  Tensor compose(std::span<const std::size_t> rows, std::span<const std::size_t> cols) const {
    const std::size_t n = size();
    for (auto i : rows) {
      if (i >= n) throw ShapeError("similarity row index out of range");
    }
    for (auto j : cols) {
      if (j >= n) throw ShapeError("similarity column index out of range");
    }
    switch (kind()) {
      case Kind::Identity: {
        Tensor out(rows.size(), cols.size());
        for (std::size_t a = 0; a < rows.size(); ++a) {
          for (std::size_t b = 0; b < cols.size(); ++b) out(a, b) = rows[a] == cols[b] ? 1.0 : 0.0;
        }
        return out;
      }
      case Kind::Lors:
        return lors::compose(lors_params(), rows, cols);
      case Kind::Full: {
        Tensor out(rows.size(), cols.size());
        for (std::size_t a = 0; a < rows.size(); ++a) {
          for (std::size_t b = 0; b < cols.size(); ++b) out(a, b) = full_params().s(rows[a], cols[b]);
        }
        return out;
      }
    }
    throw ShapeError("invalid similarity kind");
  }

  Tensor compose() const {
    const auto all = iota_indices(size());
    return compose(all, all);
  }

  friend bool operator==(const Similarity&, const Similarity&) = default;

 private:
  Variant value_{IdentitySim{}};
};

inline std::string to_string(Similarity::Kind k) {
  switch (k) {
    case Similarity::Kind::Identity:
      return "identity";
    case Similarity::Kind::Lors:
      return "lors";
    case Similarity::Kind::Full:
      return "full";
  }
  return "?";
}

}  // namespace lors
