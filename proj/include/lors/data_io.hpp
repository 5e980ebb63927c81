#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lors/binary_io.hpp"
#include "lors/errors.hpp"
#include "lors/random.hpp"
#include "lors/synthetic.hpp"
#include "lors/tensor.hpp"

namespace lors {

/// Paired image/text embeddings (one row per pair).
struct EmbeddingPairDataset {
  Tensor x;  // M x Dx
  Tensor y;  // M x Dy
  std::string split = "train";
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t size() const { return x.rows(); }
  std::size_t image_dim() const { return x.cols(); }
  std::size_t text_dim() const { return y.cols(); }

  void validate() const {
    if (x.rows() != y.rows()) throw ShapeError("image and text row counts differ");
    if (!x.all_finite() || !y.all_finite()) throw NumericalError("dataset contains non-finite values");
  }

  friend bool operator==(const EmbeddingPairDataset&, const EmbeddingPairDataset&) = default;
};

/// Gaussian-mixture toy generator. Latents z = c_k + spread * n with topic
/// centers c_k ~ N(0, I); x = A_x z + noise * e_x and y = A_y z + noise * e_y.
struct ToyGenConfig {
  std::size_t topics = 20;
  std::size_t latent_dim = 16;
  std::size_t image_dim = 32;
  std::size_t text_dim = 32;
  std::size_t train_per_topic = 100;
  std::size_t test_per_topic = 25;
  double noise = 0.1;
  double topic_spread = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (topics == 0 || latent_dim == 0 || image_dim == 0 || text_dim == 0 || train_per_topic == 0 ||
        test_per_topic == 0) {
      throw ConfigError("toy generator sizes must be positive");
    }
    if (!(noise >= 0.0) || !(topic_spread >= 0.0)) throw ConfigError("noise and topic_spread must be non-negative");
  }

  nlohmann::json to_json() const {
    return {{"generator", "toy-gaussian-mixture"},
            {"topics", topics},
            {"latent_dim", latent_dim},
            {"image_dim", image_dim},
            {"text_dim", text_dim},
            {"train_per_topic", train_per_topic},
            {"test_per_topic", test_per_topic},
            {"noise", noise},
            {"topic_spread", topic_spread},
            {"seed", seed}};
  }
};

inline std::pair<EmbeddingPairDataset, EmbeddingPairDataset> generate_toy(const ToyGenConfig& cfg) {
  cfg.validate();
  Rng maps(derive_seed(cfg.seed, 0));
  const Tensor centers = Tensor::normal(cfg.topics, cfg.latent_dim, maps);
  const double map_scale = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
  const Tensor ax = Tensor::normal(cfg.image_dim, cfg.latent_dim, maps, map_scale);
  const Tensor ay = Tensor::normal(cfg.text_dim, cfg.latent_dim, maps, map_scale);

  auto make = [&](std::size_t per_topic, std::uint64_t stream, const char* split) {
    Rng rng(derive_seed(cfg.seed, stream));
    std::vector<std::size_t> topic_of;
    for (std::size_t k = 0; k < cfg.topics; ++k) topic_of.insert(topic_of.end(), per_topic, k);
    rng.shuffle(topic_of);
    const std::size_t m = topic_of.size();
    Tensor z(m, cfg.latent_dim);
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t c = 0; c < cfg.latent_dim; ++c) {
        z(i, c) = centers(topic_of[i], c) + cfg.topic_spread * rng.normal();
      }
    }
    Tensor x = matmul_nt(z, ax);
    Tensor y = matmul_nt(z, ay);
    for (auto& v : x.values()) v += cfg.noise * rng.normal();
    for (auto& v : y.values()) v += cfg.noise * rng.normal();
    nlohmann::json meta = cfg.to_json();
    meta["topic_of"] = topic_of;
    return EmbeddingPairDataset{std::move(x), std::move(y), split, std::move(meta)};
  };
  return {make(cfg.train_per_topic, 1, "train"), make(cfg.test_per_topic, 2, "test")};
}

/// Replicated pairs laid out as (source, copy) adjacent rows, with the cells
/// linking each row to its partner marked as constructed false negatives.
struct DuplicateProbe {
  EmbeddingPairDataset data;
  Tensor false_negative_mask;  // 2dup x 2dup, 1 on partner cells
  std::vector<std::size_t> sources;
};

inline DuplicateProbe build_duplicate_probe(const EmbeddingPairDataset& ds, std::size_t dup, std::uint64_t seed) {
  if (dup == 0 || dup > ds.size()) {
    throw ConfigError("duplicate count " + std::to_string(dup) + " must be in [1, " + std::to_string(ds.size()) + "]");
  }
  Rng rng(seed);
  const auto sources = rng.sample_without_replacement(ds.size(), dup);
  std::vector<std::size_t> rows;
  for (auto s : sources) rows.insert(rows.end(), {s, s});
  Tensor mask(2 * dup, 2 * dup);
  for (std::size_t k = 0; k < dup; ++k) {
    mask(2 * k, 2 * k + 1) = 1.0;
    mask(2 * k + 1, 2 * k) = 1.0;
  }
  nlohmann::json meta = ds.metadata;
  meta["duplicate_probe"] = {{"dup", dup}, {"seed", seed}, {"sources", sources}};
  return {EmbeddingPairDataset{gather_rows(ds.x, rows), gather_rows(ds.y, rows), ds.split, std::move(meta)},
          std::move(mask), sources};
}

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint32_t kArtifactVersion = 1;

inline Bytes dataset_bytes(const EmbeddingPairDataset& ds) {
  ds.validate();
  nlohmann::json meta = ds.metadata;
  meta["split"] = ds.split;
  ByteWriter w;
  w.raw("LEPD0001");
  w.u32(kDatasetVersion);
  w.u64(ds.size());
  w.u32(static_cast<std::uint32_t>(ds.image_dim()));
  w.u32(static_cast<std::uint32_t>(ds.text_dim()));
  w.text_block(meta.dump());
  w.f64s(ds.x.values());
  w.f64s(ds.y.values());
  w.seal();
  return w.take();
}

inline EmbeddingPairDataset dataset_from_bytes(std::span<const std::uint8_t> bytes,
                                               const std::string& what = "dataset") {
  ByteReader r(bytes, what);
  r.expect_header("LEPD0001");
  if (const auto v = r.u32(); v != kDatasetVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(v));
  }
  const std::uint64_t m = r.u64();
  const std::uint32_t dx = r.u32();
  const std::uint32_t dy = r.u32();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.text_block());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad metadata block: " + e.what());
  }
  EmbeddingPairDataset ds;
  ds.x = Tensor(m, dx, r.f64s(m * dx));
  ds.y = Tensor(m, dy, r.f64s(m * dy));
  r.expect_end();
  ds.split = meta.value("split", "train");
  meta.erase("split");
  ds.metadata = std::move(meta);
  return ds;
}

inline void save_dataset(const std::filesystem::path& path, const EmbeddingPairDataset& ds) {
  write_file(path, dataset_bytes(ds));
}

inline EmbeddingPairDataset load_dataset(const std::filesystem::path& path) {
  return dataset_from_bytes(read_file(path), path.string());
}

inline std::uint64_t dataset_digest(const EmbeddingPairDataset& ds) { return fnv1a64(dataset_bytes(ds)); }

inline Bytes artifact_bytes(const SyntheticDataset& s) {
  s.validate();
  const auto kind = s.sim.kind();
  const bool lors = kind == Similarity::Kind::Lors;
  ByteWriter w;
  w.raw("LSYN0001");
  w.u32(kArtifactVersion);
  w.u64(s.size());
  w.u32(static_cast<std::uint32_t>(s.x.cols()));
  w.u32(static_cast<std::uint32_t>(s.y.cols()));
  w.u32(lors ? static_cast<std::uint32_t>(s.sim.lors_params().rank) : 0U);
  w.f64(lors ? s.sim.lors_params().alpha : 0.0);
  w.f64(s.inner_lr);
  w.u8(static_cast<std::uint8_t>(kind));
  w.text_block(s.provenance.dump());
  w.f64s(s.x.values());
  w.f64s(s.y.values());
  if (lors) {
    const auto& p = s.sim.lors_params();
    w.f64s(p.omega.values());
    w.f64s(p.left.values());
    w.f64s(p.right.values());
  } else if (kind == Similarity::Kind::Full) {
    w.f64s(s.sim.full_params().s.values());
  }
  w.seal();
  return w.take();
}

inline SyntheticDataset artifact_from_bytes(std::span<const std::uint8_t> bytes, const std::string& what = "artifact") {
  ByteReader r(bytes, what);
  r.expect_header("LSYN0001");
  if (const auto v = r.u32(); v != kArtifactVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(v));
  }
  const std::uint64_t n = r.u64();
  const std::uint32_t dx = r.u32();
  const std::uint32_t dy = r.u32();
  const std::uint32_t rank = r.u32();
  const double alpha = r.f64();
  SyntheticDataset s;
  s.inner_lr = r.f64();
  const std::uint8_t kind = r.u8();
  try {
    s.provenance = nlohmann::json::parse(r.text_block());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad metadata block: " + e.what());
  }
  s.x = Tensor(n, dx, r.f64s(n * dx));
  s.y = Tensor(n, dy, r.f64s(n * dy));
  switch (kind) {
    case 0:
      s.sim = IdentitySim{n};
      break;
    case 1: {
      LorsParams p;
      p.omega = Tensor(n, 1, r.f64s(n));
      p.left = Tensor(n, rank, r.f64s(n * rank));
      p.right = Tensor(n, rank, r.f64s(n * rank));
      p.alpha = alpha;
      p.rank = rank;
      s.sim = std::move(p);
      break;
    }
    case 2:
      s.sim = FullSimParams{Tensor(n, n, r.f64s(n * n))};
      break;
    default:
      throw FormatError(what + ": unknown similarity kind " + std::to_string(kind));
  }
  r.expect_end();
  try {
    s.validate();
  } catch (const Error& e) {
    throw FormatError(what + ": inconsistent artifact: " + e.what());
  }
  return s;
}

inline void save_artifact(const std::filesystem::path& path, const SyntheticDataset& s) {
  write_file(path, artifact_bytes(s));
}

inline SyntheticDataset load_artifact(const std::filesystem::path& path) {
  return artifact_from_bytes(read_file(path), path.string());
}

inline std::uint64_t artifact_digest(const SyntheticDataset& s) { return fnv1a64(artifact_bytes(s)); }

/// A selected subset of real pairs as a plain synthetic dataset (identity similarity).
inline SyntheticDataset subset_artifact(const EmbeddingPairDataset& ds, std::span<const std::size_t> indices,
                                        double inner_lr, nlohmann::json provenance) {
  SyntheticDataset s{gather_rows(ds.x, indices), gather_rows(ds.y, indices), IdentitySim{indices.size()}, inner_lr,
                     std::move(provenance)};
  s.validate();
  return s;
}

}  // namespace lors
