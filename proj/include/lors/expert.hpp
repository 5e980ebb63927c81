#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lors/binary_io.hpp"
#include "lors/data_io.hpp"
#include "lors/errors.hpp"
#include "lors/itc_model.hpp"
#include "lors/losses.hpp"
#include "lors/parallel.hpp"
#include "lors/training.hpp"

namespace lors {

/// Real-data training of expert ITC models with InfoNCE.
struct ExpertConfig {
  ModelSpec model{EncoderSpec::linear(32, 16), EncoderSpec::linear(32, 16), 0.07};
  std::size_t epochs = 6;
  std::size_t batch_size = 100;
  double lr = 0.05;
  double momentum = 0.0;

  void validate() const {
    model.validate();
    if (batch_size == 0) throw ConfigError("expert batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("expert lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("expert momentum must be in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"model", lors::to_json(model)},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"momentum", momentum}};
  }

  std::uint64_t digest() const { return fnv1a64(to_json().dump()); }
};

/// Per-epoch checkpoints theta_0 .. theta_T of one expert run.
struct TrajectoryBuffer {
  ModelSpec model;
  nlohmann::json optimizer = nlohmann::json::object();
  std::string data_digest;
  std::uint64_t seed = 0;
  std::vector<double> epoch_losses;  // mean batch loss per epoch
  std::vector<std::vector<double>> snapshots;

  std::size_t epochs() const { return snapshots.empty() ? 0 : snapshots.size() - 1; }

  ModelParams params_at(std::size_t epoch) const {
    if (epoch >= snapshots.size()) throw ShapeError("epoch " + std::to_string(epoch) + " beyond trajectory");
    return ModelParams::unflatten(model, snapshots[epoch]);
  }

  friend bool operator==(const TrajectoryBuffer&, const TrajectoryBuffer&) = default;
};

inline TrajectoryBuffer train_expert(const EmbeddingPairDataset& data, const ExpertConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  data.validate();
  if (data.size() == 0) throw ConfigError("expert training needs a non-empty dataset");
  if (cfg.batch_size > data.size()) throw ConfigError("expert batch_size exceeds dataset size");
  if (data.image_dim() != cfg.model.image.input_dim || data.text_dim() != cfg.model.text.input_dim) {
    throw ShapeError("dataset dims do not match the expert model");
  }

  TrajectoryBuffer buf;
  buf.model = cfg.model;
  buf.optimizer = cfg.to_json();
  buf.data_digest = hex64(dataset_digest(data));
  buf.seed = seed;

  ModelParams params = init_params(cfg.model, derive_seed(seed, 10));
  MomentumSgd opt(cfg.lr, cfg.momentum);
  BatchSchedule schedule(data.size(), cfg.batch_size, derive_seed(seed, 11));
  buf.snapshots.push_back(params.flatten());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    const std::size_t batches = schedule.batches_per_pass();
    for (std::size_t b = 0; b < batches; ++b) {
      const auto idx = schedule.next();
      try {
        total += sgd_step(cfg.model, params, opt, gather_rows(data.x, idx), gather_rows(data.y, idx), LossKind::Nce,
                          GtSimilarity::identity(idx.size()))
                     .loss;
      } catch (const NumericalError& e) {
        throw NumericalError("expert seed " + std::to_string(seed) + " epoch " + std::to_string(epoch) + " batch " +
                             std::to_string(b) + ": " + e.what());
      }
    }
    buf.epoch_losses.push_back(total / static_cast<double>(batches));
    buf.snapshots.push_back(params.flatten());
  }
  return buf;
}

inline constexpr std::uint32_t kTrajectoryVersion = 1;

inline Bytes buffer_bytes(const TrajectoryBuffer& b) {
  if (b.snapshots.empty()) throw ShapeError("trajectory has no snapshots");
  const std::size_t len = b.snapshots.front().size();
  const nlohmann::json spec = {{"model", to_json(b.model)},
                               {"optimizer", b.optimizer},
                               {"data_digest", b.data_digest},
                               {"seed", b.seed},
                               {"epoch_losses", b.epoch_losses}};
  ByteWriter w;
  w.raw("LTRJ0001");
  w.u32(kTrajectoryVersion);
  w.text_block(spec.dump());
  w.u32(static_cast<std::uint32_t>(b.snapshots.size()));
  w.u64(len);
  for (const auto& s : b.snapshots) {
    if (s.size() != len) throw ShapeError("trajectory snapshots differ in length");
    w.f64s(s);
  }
  w.seal();
  return w.take();
}

inline TrajectoryBuffer buffer_from_bytes(std::span<const std::uint8_t> bytes, const std::string& what = "trajectory") {
  ByteReader r(bytes, what);
  r.expect_header("LTRJ0001");
  if (const auto v = r.u32(); v != kTrajectoryVersion) {
    throw FormatError(what + ": unsupported version " + std::to_string(v));
  }
  TrajectoryBuffer b;
  try {
    const auto spec = nlohmann::json::parse(r.text_block());
    b.model = model_spec_from_json(spec.at("model"));
    b.optimizer = spec.at("optimizer");
    b.data_digest = spec.at("data_digest").get<std::string>();
    b.seed = spec.at("seed").get<std::uint64_t>();
    b.epoch_losses = spec.at("epoch_losses").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad spec block: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(what + ": bad model spec: " + e.what());
  }
  const std::uint32_t count = r.u32();
  const std::uint64_t len = r.u64();
  if (len != b.model.param_count()) throw FormatError(what + ": snapshot length does not match the model spec");
  for (std::uint32_t k = 0; k < count; ++k) b.snapshots.push_back(r.f64s(len));
  r.expect_end();
  if (b.snapshots.empty()) throw FormatError(what + ": no snapshots");
  return b;
}

inline void save_buffer(const std::filesystem::path& path, const TrajectoryBuffer& b) {
  write_file(path, buffer_bytes(b));
}

inline TrajectoryBuffer load_buffer(const std::filesystem::path& path) {
  return buffer_from_bytes(read_file(path), path.string());
}

/// A directory of trajectory files plus manifest.json (written last).
struct TrajectoryStore {
  std::filesystem::path dir;
  nlohmann::json manifest;
  std::vector<TrajectoryBuffer> buffers;

  std::size_t size() const { return buffers.size(); }
  std::size_t epochs() const { return buffers.empty() ? 0 : buffers.front().epochs(); }
  const ModelSpec& model() const { return buffers.front().model; }
};

inline std::string expert_file_name(std::size_t i) {
  std::string n = std::to_string(i);
  return "expert_" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n + ".ltrj";
}

/// Trains experts with seeds base_seed .. base_seed + count - 1 on up to `threads` workers.
inline TrajectoryStore build_store(const EmbeddingPairDataset& data, const ExpertConfig& cfg, std::size_t count,
                                   std::uint64_t base_seed, const std::filesystem::path& dir, std::size_t threads = 0) {
  if (count == 0) throw ConfigError("expert count must be at least 1");
  cfg.validate();
  TrajectoryStore store;
  store.dir = dir;
  store.buffers.resize(count);
  parallel_for(count, threads, [&](std::size_t i) {
    store.buffers[i] = train_expert(data, cfg, base_seed + i);
    save_buffer(dir / expert_file_name(i), store.buffers[i]);
  });

  nlohmann::json files = nlohmann::json::array(), seeds = nlohmann::json::array();
  for (std::size_t i = 0; i < count; ++i) {
    files.push_back(expert_file_name(i));
    seeds.push_back(base_seed + i);
  }
  store.manifest = {{"count", count},
                    {"files", files},
                    {"seeds", seeds},
                    {"epochs", cfg.epochs},
                    {"config_digest", hex64(cfg.digest())},
                    {"data_digest", hex64(dataset_digest(data))},
                    {"config", cfg.to_json()}};
  write_text_file(dir / "manifest.json", store.manifest.dump(2) + "\n");
  return store;
}

inline TrajectoryStore load_store(const std::filesystem::path& dir) {
  TrajectoryStore store;
  store.dir = dir;
  try {
    store.manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
    const auto files = store.manifest.at("files").get<std::vector<std::string>>();
    if (files.size() != store.manifest.at("count").get<std::size_t>()) {
      throw FormatError(dir.string() + ": manifest count does not match its file list");
    }
    for (const auto& f : files) store.buffers.push_back(load_buffer(dir / f));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + "/manifest.json: " + e.what());
  }
  if (store.buffers.empty()) throw FormatError(dir.string() + ": empty trajectory store");
  for (const auto& b : store.buffers) {
    if (!(b.model == store.buffers.front().model) || b.epochs() != store.buffers.front().epochs()) {
      throw FormatError(dir.string() + ": trajectories disagree on model spec or epoch count");
    }
  }
  return store;
}

}  // namespace lors
