#pragma once

#include <json.hpp>

#include "lors/errors.hpp"
#include "lors/lors_similarity.hpp"
#include "lors/tensor.hpp"

namespace lors {

/// Learnable synthetic pairs, their similarity and the learned inner step size.
struct SyntheticDataset {
  Tensor x;  // N x Dx
  Tensor y;  // N x Dy
  Similarity sim;
  double inner_lr = 0.1;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return x.rows(); }

  void validate() const {
    if (x.rows() != y.rows()) throw ShapeError("synthetic image and text row counts differ");
    if (x.rows() < 2) throw ConfigError("a synthetic dataset needs at least 2 pairs");
    if (sim.size() != x.rows()) throw ShapeError("similarity size does not match the pair count");
    if (!(inner_lr > 0.0)) throw ConfigError("inner_lr must be positive");
    if (sim.kind() == Similarity::Kind::Lors) sim.lors_params().validate();
  }

  friend bool operator==(const SyntheticDataset&, const SyntheticDataset&) = default;
};

}  // namespace lors
