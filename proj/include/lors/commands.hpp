#pragma once

#include <filesystem>
#include <ostream>
#include <string>

#include <json.hpp>

#include "lors/analysis.hpp"
#include "lors/config.hpp"
#include "lors/coreset.hpp"
#include "lors/data_io.hpp"
#include "lors/distiller.hpp"
#include "lors/errors.hpp"
#include "lors/evaluator.hpp"
#include "lors/expert.hpp"

namespace lors {

// Pipeline commands behind the CLI. Each reads what earlier commands wrote
// under output_dir, writes its own outputs plus a resolved-config snapshot,
// and prints a short summary.

inline constexpr const char* kSnapshotName = "resolved_config.ini";

enum ExitCode : int { kExitOk = 0, kExitOther = 1, kExitConfig = 2, kExitIo = 3, kExitNumerical = 4 };

/// Maps the error families onto exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kExitIo;
  if (dynamic_cast<const NumericalError*>(&e)) return kExitNumerical;
  return kExitOther;
}

inline void write_snapshot(const std::filesystem::path& dir, const RunConfig& c) {
  write_text_file(dir / kSnapshotName, "; effective configuration of this run\n" + resolved_config(c));
}

namespace detail {

inline void check_data_dims(const RunConfig& c, const EmbeddingPairDataset& ds) {
  if (ds.image_dim() != c.data.gen.image_dim || ds.text_dim() != c.data.gen.text_dim) {
    throw ConfigError("dataset dims " + std::to_string(ds.image_dim()) + "/" + std::to_string(ds.text_dim()) +
                      " differ from data.image_dim/data.text_dim " + std::to_string(c.data.gen.image_dim) + "/" +
                      std::to_string(c.data.gen.text_dim));
  }
}

inline void check_store_data(const TrajectoryStore& store, const EmbeddingPairDataset& train) {
  const auto expected = store.manifest.value("data_digest", std::string());
  if (!expected.empty() && expected != hex64(dataset_digest(train))) {
    throw ConfigError("experts in " + store.dir.string() + " were trained on a different dataset");
  }
}

inline std::string tensor_csv(const Tensor& t) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) os << (j ? "," : "") << t(i, j);
    os << '\n';
  }
  return os.str();
}

}  // namespace detail

inline void cmd_gen_data(const RunConfig& c, std::ostream& log) {
  ToyGenConfig gen = c.data.gen;
  gen.seed = c.seed;
  const auto [train, test] = generate_toy(gen);
  save_dataset(c.train_path(), train);
  save_dataset(c.test_path(), test);
  write_snapshot(c.train_path().parent_path(), c);
  log << "train " << c.train_path().string() << " pairs " << train.size() << " digest " << hex64(dataset_digest(train))
      << '\n';
  log << "test " << c.test_path().string() << " pairs " << test.size() << " digest " << hex64(dataset_digest(test))
      << '\n';
}

inline TrajectoryStore cmd_train_experts(const RunConfig& c, std::ostream& log) {
  const auto train = load_dataset(c.train_path());
  detail::check_data_dims(c, train);
  const auto cfg = expert_config(c);
  const auto dir = c.store_dir();
  std::filesystem::create_directories(dir);
  auto store = build_store(train, cfg, c.experts.count, expert_base_seed(c), dir, c.experts.threads);
  write_snapshot(dir, c);
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& b = store.buffers[i];
    log << expert_file_name(i) << " seed " << b.seed << " final_loss " << b.epoch_losses.back() << " digest "
        << hex64(fnv1a64(buffer_bytes(b))) << '\n';
  }
  log << "manifest " << (dir / "manifest.json").string() << " experts " << store.size() << " epochs " << store.epochs()
      << '\n';
  return store;
}

inline DistillResult cmd_distill(const RunConfig& c, std::ostream& log) {
  const auto train = load_dataset(c.train_path());
  detail::check_data_dims(c, train);
  const auto store = load_store(c.store_dir());
  detail::check_store_data(store, train);
  const auto cfg = distill_config(c);
  log << "distill sim " << to_string(cfg.sim) << " loss " << to_string(cfg.loss) << " pairs " << cfg.pairs;
  if (cfg.sim == SimMode::Lors) log << " rank " << cfg.rank;
  log << " iterations " << cfg.iterations << '\n';
  const std::size_t every = std::max<std::size_t>(1, cfg.iterations / 10);
  auto result = run_distillation(train, store, cfg, [&](const MatchRecord& r) {
    if ((r.iteration + 1) % every == 0) {
      log << "  iteration " << r.iteration + 1 << " loss " << r.loss << " inner_lr " << r.inner_lr << '\n';
    }
  });
  const auto path = c.distill_artifact();
  save_artifact(path, result.syn);
  write_text_file(path.parent_path() / "trace.csv", trace_csv(result.trace));
  write_snapshot(path.parent_path(), c);
  log << "artifact " << path.string() << " digest " << hex64(artifact_digest(result.syn)) << '\n';
  return result;
}

inline std::vector<RetrievalReport> cmd_eval(const RunConfig& c, std::ostream& log) {
  const auto artifact_path = c.eval_artifact();
  const auto artifact = load_artifact(artifact_path);
  const auto test = load_dataset(c.test_path());
  detail::check_data_dims(c, test);
  const auto cfg = eval_config(c, artifact);
  const auto reports = evaluate_synthetic(artifact, eval_specs(c), test, cfg);
  const auto dir = c.out() / "eval" / artifact_path.stem();
  write_text_file(dir / "report.json", to_json(reports).dump(2) + "\n");
  write_text_file(dir / "report.csv", to_csv(reports));
  write_snapshot(dir, c);
  log << "artifact " << artifact_path.string() << " pairs " << artifact.size() << " similarity "
      << to_string(artifact.sim.kind()) << " student loss " << to_string(cfg.student.loss) << '\n';
  log << format_table(reports);
  log << "report " << (dir / "report.json").string() << '\n';
  return reports;
}

inline SelectionResult cmd_coreset(const RunConfig& c, std::ostream& log) {
  const auto train = load_dataset(c.train_path());
  detail::check_data_dims(c, train);
  const auto& k = c.coreset;
  SelectionResult sel;
  if (k.method == "random") {
    sel = select_random(train, k.pairs, c.seed);
  } else if (k.method == "herding") {
    sel = select_herding(train, k.pairs);
  } else if (k.method == "kcenter") {
    sel = select_kcenter(train, k.pairs, c.seed);
  } else if (k.method == "forgetting") {
    sel = select_forgetting(train, k.pairs, forgetting_config(c), c.seed);
  } else {
    throw ConfigError("unknown coreset.method '" + k.method + "' (random, herding, kcenter, forgetting)");
  }
  const auto dir = c.out() / "coreset";
  const auto artifact = subset_artifact(train, sel.indices, k.inner_lr, to_json(sel));
  save_artifact(dir / (k.method + ".lsyn"), artifact);
  write_text_file(dir / (k.method + ".json"), to_json(sel).dump(2) + "\n");
  write_snapshot(dir, c);
  for (const auto& w : sel.warnings) log << "warning: " << w << '\n';
  log << "coreset " << k.method << " pairs " << sel.indices.size() << " artifact "
      << (dir / (k.method + ".lsyn")).string() << " digest " << hex64(artifact_digest(artifact)) << '\n';
  return sel;
}

/// Constructed false negatives recorded in an artifact's provenance, else none.
inline Tensor false_negative_mask_of(const SyntheticDataset& s) {
  Tensor mask(s.size(), s.size());
  if (!s.provenance.contains("duplicate_probe")) return mask;
  const std::size_t dup = s.provenance["duplicate_probe"].at("dup").get<std::size_t>();
  for (std::size_t k = 0; k < dup && 2 * k + 1 < s.size(); ++k) {
    mask(2 * k, 2 * k + 1) = 1.0;
    mask(2 * k + 1, 2 * k) = 1.0;
  }
  return mask;
}

inline nlohmann::json histogram_summary(const SimHistogram& h) {
  nlohmann::json j;
  for (std::size_t g = 0; g < 3; ++g) j[kCellGroupNames[g]] = {{"cells", h.cells[g]}, {"mean", h.means[g]}};
  return j;
}

inline nlohmann::json cmd_analyze(const RunConfig& c, std::ostream& log) {
  const auto& a = c.analyze;
  const auto dir = c.out() / "analyze";
  nlohmann::json summary;

  const auto artifact_path = c.analyze_artifact();
  if (std::filesystem::exists(artifact_path)) {
    const auto s = load_artifact(artifact_path);
    const Tensor full = s.sim.compose();
    const auto h = sim_histogram(full, false_negative_mask_of(s), a.bins);
    write_text_file(dir / "histogram.csv", to_csv(h));
    const auto sp = spectrum(full, a.rank_threshold);
    std::string csv = to_csv(sp, "full");
    nlohmann::json art{{"path", artifact_path.string()}, {"groups", histogram_summary(h)},
                       {"numerical_rank", sp.numerical_rank}};
    log << "artifact " << artifact_path.string() << " group means " << h.means[0] << ' ' << h.means[1] << ' '
        << h.means[2] << " numerical_rank " << sp.numerical_rank << '\n';
    if (s.sim.kind() == Similarity::Kind::Lors) {
      const auto d = decompose_view(s.sim.lors_params());
      const auto rs = spectrum(d.residual, a.rank_threshold);
      const std::string residual_csv = to_csv(rs, "residual");
      csv += residual_csv.substr(residual_csv.find('\n') + 1);
      write_text_file(dir / "diagonal.csv", detail::tensor_csv(d.omega));
      write_text_file(dir / "residual.csv", detail::tensor_csv(d.residual));
      art["residual_numerical_rank"] = rs.numerical_rank;
      log << "  residual numerical_rank " << rs.numerical_rank << " (rank " << s.sim.lors_params().rank << ")\n";
    }
    write_text_file(dir / "spectrum.csv", csv);
    summary["artifact"] = art;
  } else if (!a.probe) {
    throw IoError("cannot open '" + artifact_path.string() + "'");
  }

  if (a.probe) {
    const auto train = load_dataset(c.train_path());
    detail::check_data_dims(c, train);
    const auto store = load_store(c.store_dir());
    detail::check_store_data(store, train);
    auto cfg = c.distill.cfg;
    cfg.seed = c.seed;
    const auto probe = false_negative_probe(train, a.dup, store, cfg, a.bins);
    write_text_file(dir / "probe_before.csv", to_csv(probe.before));
    write_text_file(dir / "probe_after.csv", to_csv(probe.after));
    write_text_file(dir / "probe_trace.csv", trace_csv(probe.run.trace));
    save_artifact(dir / "probe.lsyn", probe.run.syn);
    summary["probe"] = {{"dup", a.dup},
                        {"before", histogram_summary(probe.before)},
                        {"after", histogram_summary(probe.after)},
                        {"false_negative_margin", probe.after.means[1] - probe.after.means[2]}};
    log << "probe dup " << a.dup << " cells " << probe.after.cells[0] << '/' << probe.after.cells[1] << '/'
        << probe.after.cells[2] << '\n';
    for (std::size_t g = 0; g < 3; ++g) {
      log << "  " << kCellGroupNames[g] << " mean before " << probe.before.means[g] << " after "
          << probe.after.means[g] << '\n';
    }
  }
  write_text_file(dir / "summary.json", summary.dump(2) + "\n");
  write_snapshot(dir, c);
  return summary;
}

}  // namespace lors
