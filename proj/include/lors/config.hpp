#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>

#include "lors/coreset.hpp"
#include "lors/data_io.hpp"
#include "lors/distiller.hpp"
#include "lors/errors.hpp"
#include "lors/evaluator.hpp"
#include "lors/expert.hpp"

namespace lors {

// Run configuration: an INI file with two top-level keys (seed, output_dir)
// and one section per command. Comments start with ';' or '#'.

struct DataSection {
  ToyGenConfig gen;
  std::string train_path;  // empty: <output_dir>/data/train.lepd
  std::string test_path;   // empty: <output_dir>/data/test.lepd
};

struct ExpertSection {
  std::size_t count = 5;
  std::string image_encoder = "linear";
  std::string text_encoder = "linear";
  std::size_t embed_dim = 16;
  double tau = 0.07;
  std::size_t epochs = 6;
  std::size_t batch_size = 100;
  double lr = 0.05;
  double momentum = 0.0;
  std::size_t threads = 0;
  std::string store_dir;  // empty: <output_dir>/experts
};

struct DistillSection {
  DistillConfig cfg;
  bool equal_budget = true;  // LoRS: shrink the pair count so pairs + similarity fit `pairs` plain pairs
  std::string artifact_path;  // empty: <output_dir>/distill/artifact.lsyn
};

struct EvalSection {
  std::string architectures;  // empty: the expert model; else "image/text" pairs separated by ';'
  std::size_t embed_dim = 16;
  double tau = 0.07;
  std::string loss = "auto";  // auto: nce for identity similarity, wbce otherwise
  double beta = kDefaultBeta;
  std::size_t steps = 300;
  std::size_t batch_size = 20;
  std::optional<double> lr;  // unset: the artifact's inner_lr
  double momentum = 0.0;
  std::vector<std::size_t> ks{1, 5, 10};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t threads = 0;
  std::string artifact_path;  // empty: the distill artifact
};

struct CoresetSection {
  std::string method = "random";
  std::size_t pairs = 50;
  double inner_lr = 0.1;
  std::size_t probe_epochs = 5;
  std::size_t probe_batch_size = 100;
  double probe_lr = 0.05;
};

struct AnalyzeSection {
  std::string artifact_path;  // empty: the distill artifact
  bool probe = true;
  std::size_t dup = 50;
  std::size_t bins = 50;
  double rank_threshold = 1e-6;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  DataSection data;
  ExpertSection experts;
  DistillSection distill;
  EvalSection eval;
  CoresetSection coreset;
  AnalyzeSection analyze;

  std::filesystem::path out() const { return output_dir; }
  std::filesystem::path train_path() const { return or_default(data.train_path, out() / "data" / "train.lepd"); }
  std::filesystem::path test_path() const { return or_default(data.test_path, out() / "data" / "test.lepd"); }
  std::filesystem::path store_dir() const { return or_default(experts.store_dir, out() / "experts"); }
  std::filesystem::path distill_artifact() const {
    return or_default(distill.artifact_path, out() / "distill" / "artifact.lsyn");
  }
  std::filesystem::path eval_artifact() const { return or_default(eval.artifact_path, distill_artifact()); }
  std::filesystem::path analyze_artifact() const { return or_default(analyze.artifact_path, distill_artifact()); }

 private:
  static std::filesystem::path or_default(const std::string& s, std::filesystem::path fallback) {
    return s.empty() ? fallback : std::filesystem::path(s);
  }
};

// ---- value codecs ----

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto s = boost::algorithm::trim_copy(text);
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw ConfigError("bad value for " + key + ": '" + text + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  const auto s = boost::algorithm::to_lower_copy(boost::algorithm::trim_copy(text));
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + text + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::string> parts;
  boost::algorithm::split(parts, text, boost::algorithm::is_any_of(","));
  std::vector<T> out;
  for (const auto& p : parts) {
    if (boost::algorithm::trim_copy(p).empty()) continue;
    out.push_back(parse_number<T>(key, p));
  }
  return out;
}

template <class T>
std::string format_list(const std::vector<T>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) s += (k ? ", " : "") + std::to_string(v[k]);
  return s;
}

}  // namespace detail

/// One bindable config key: how to set it from text and how to print it back.
struct ConfigField {
  std::string section;  // empty for top-level keys
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;

  std::string qualified() const { return section.empty() ? key : section + "." + key; }
};

namespace detail {

template <class T>
ConfigField bind_field(std::string section, std::string key, T& ref) {
  ConfigField f{std::move(section), std::move(key), {}, {}};
  const std::string name = f.qualified();
  if constexpr (std::is_same_v<T, bool>) {
    f.set = [&ref, name](const std::string& s) { ref = parse_bool(name, s); };
    f.get = [&ref] { return std::string(ref ? "true" : "false"); };
  } else if constexpr (std::is_same_v<T, double>) {
    f.set = [&ref, name](const std::string& s) { ref = parse_number<double>(name, s); };
    f.get = [&ref] { return format_double(ref); };
  } else if constexpr (std::is_integral_v<T>) {
    f.set = [&ref, name](const std::string& s) { ref = parse_number<T>(name, s); };
    f.get = [&ref] { return std::to_string(ref); };
  } else if constexpr (std::is_same_v<T, std::string>) {
    f.set = [&ref](const std::string& s) { ref = boost::algorithm::trim_copy(s); };
    f.get = [&ref] { return ref; };
  } else if constexpr (std::is_same_v<T, std::optional<double>>) {
    f.set = [&ref, name](const std::string& s) {
      const auto t = boost::algorithm::trim_copy(s);
      ref = (t.empty() || t == "auto") ? std::nullopt : std::optional<double>(parse_number<double>(name, t));
    };
    f.get = [&ref] { return ref ? format_double(*ref) : std::string("auto"); };
  } else if constexpr (std::is_same_v<T, LossKind>) {
    f.set = [&ref, name](const std::string& s) {
      try {
        ref = parse_loss_kind(boost::algorithm::trim_copy(s));
      } catch (const Error&) {
        throw ConfigError("bad value for " + name + ": '" + s + "' (nce, ence, bce, wbce)");
      }
    };
    f.get = [&ref] { return to_string(ref); };
  } else if constexpr (std::is_same_v<T, SimMode>) {
    f.set = [&ref, name](const std::string& s) {
      try {
        ref = parse_sim_mode(boost::algorithm::trim_copy(s));
      } catch (const Error&) {
        throw ConfigError("bad value for " + name + ": '" + s + "' (identity, lors, full)");
      }
    };
    f.get = [&ref] { return to_string(ref); };
  } else {
    using V = typename T::value_type;
    f.set = [&ref, name](const std::string& s) { ref = parse_list<V>(name, s); };
    f.get = [&ref] { return format_list(ref); };
  }
  return f;
}

}  // namespace detail

/// Every key the file format accepts, bound to the fields of `c`.
inline std::vector<ConfigField> config_fields(RunConfig& c) {
  using detail::bind_field;
  auto& g = c.data.gen;
  auto& e = c.experts;
  auto& d = c.distill.cfg;
  auto& v = c.eval;
  auto& k = c.coreset;
  auto& a = c.analyze;
  return {
      bind_field("", "seed", c.seed),
      bind_field("", "output_dir", c.output_dir),

      bind_field("data", "topics", g.topics),
      bind_field("data", "latent_dim", g.latent_dim),
      bind_field("data", "image_dim", g.image_dim),
      bind_field("data", "text_dim", g.text_dim),
      bind_field("data", "train_per_topic", g.train_per_topic),
      bind_field("data", "test_per_topic", g.test_per_topic),
      bind_field("data", "noise", g.noise),
      bind_field("data", "topic_spread", g.topic_spread),
      bind_field("data", "train_path", c.data.train_path),
      bind_field("data", "test_path", c.data.test_path),

      bind_field("experts", "count", e.count),
      bind_field("experts", "image_encoder", e.image_encoder),
      bind_field("experts", "text_encoder", e.text_encoder),
      bind_field("experts", "embed_dim", e.embed_dim),
      bind_field("experts", "tau", e.tau),
      bind_field("experts", "epochs", e.epochs),
      bind_field("experts", "batch_size", e.batch_size),
      bind_field("experts", "lr", e.lr),
      bind_field("experts", "momentum", e.momentum),
      bind_field("experts", "threads", e.threads),
      bind_field("experts", "store_dir", e.store_dir),

      bind_field("distill", "loss", d.loss),
      bind_field("distill", "beta", d.beta),
      bind_field("distill", "sim", d.sim),
      bind_field("distill", "pairs", d.pairs),
      bind_field("distill", "equal_budget", c.distill.equal_budget),
      bind_field("distill", "rank", d.rank),
      bind_field("distill", "alpha", d.alpha),
      bind_field("distill", "syn_steps", d.syn_steps),
      bind_field("distill", "expert_epochs", d.expert_epochs),
      bind_field("distill", "max_start_epoch", d.max_start_epoch),
      bind_field("distill", "batch_size", d.batch_size),
      bind_field("distill", "lr_image", d.lr_image),
      bind_field("distill", "lr_text", d.lr_text),
      bind_field("distill", "lr_sim", d.lr_sim),
      bind_field("distill", "lr_lr", d.lr_lr),
      bind_field("distill", "momentum", d.momentum),
      bind_field("distill", "init_inner_lr", d.init_inner_lr),
      bind_field("distill", "iterations", d.iterations),
      bind_field("distill", "fix_image", d.fix_image),
      bind_field("distill", "fix_text", d.fix_text),
      bind_field("distill", "fix_similarity", d.fix_similarity),
      bind_field("distill", "no_lr_residual", d.no_lr_residual),
      bind_field("distill", "no_omega", d.no_omega),
      bind_field("distill", "fix_lr", d.fix_lr),
      bind_field("distill", "artifact_path", c.distill.artifact_path),

      bind_field("eval", "architectures", v.architectures),
      bind_field("eval", "embed_dim", v.embed_dim),
      bind_field("eval", "tau", v.tau),
      bind_field("eval", "loss", v.loss),
      bind_field("eval", "beta", v.beta),
      bind_field("eval", "steps", v.steps),
      bind_field("eval", "batch_size", v.batch_size),
      bind_field("eval", "lr", v.lr),
      bind_field("eval", "momentum", v.momentum),
      bind_field("eval", "ks", v.ks),
      bind_field("eval", "seeds", v.seeds),
      bind_field("eval", "threads", v.threads),
      bind_field("eval", "artifact_path", v.artifact_path),

      bind_field("coreset", "method", k.method),
      bind_field("coreset", "pairs", k.pairs),
      bind_field("coreset", "inner_lr", k.inner_lr),
      bind_field("coreset", "probe_epochs", k.probe_epochs),
      bind_field("coreset", "probe_batch_size", k.probe_batch_size),
      bind_field("coreset", "probe_lr", k.probe_lr),

      bind_field("analyze", "artifact_path", a.artifact_path),
      bind_field("analyze", "probe", a.probe),
      bind_field("analyze", "dup", a.dup),
      bind_field("analyze", "bins", a.bins),
      bind_field("analyze", "rank_threshold", a.rank_threshold),
  };
}

/// Parses INI text over the defaults. Unknown sections and keys are rejected by name.
inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
  boost::property_tree::ptree pt;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig c;
  auto fields = config_fields(c);
  std::map<std::string, ConfigField*> index;
  for (auto& f : fields) index[f.qualified()] = &f;
  auto apply = [&](const std::string& name, const std::string& value) {
    const auto it = index.find(name);
    if (it == index.end()) throw ConfigError(origin + ": unknown key '" + name + "'");
    it->second->set(value);
  };
  const std::set<std::string> sections{"data", "experts", "distill", "eval", "coreset", "analyze"};
  for (const auto& [key, node] : pt) {
    if (node.empty()) {
      if (sections.count(key) && node.data().empty()) continue;  // a section with no keys
      apply(key, node.data());
      continue;
    }
    for (const auto& [sub, leaf] : node) apply(key + "." + sub, leaf.data());
  }
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_text_file(path), path.string());
}

/// Every key with its effective value, in the same format parse_config reads.
inline std::string resolved_config(const RunConfig& c) {
  RunConfig copy = c;
  const auto fields = config_fields(copy);
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields) {
    if (f.section != section) {
      section = f.section;
      os << "\n[" << section << "]\n";
    }
    os << f.key << " = " << f.get() << '\n';
  }
  return os.str();
}

// ---- derived run objects ----

/// "linear" or "mlp-H1-H2-..." (the spelling EncoderSpec::name() produces).
inline EncoderSpec parse_encoder(const std::string& name, std::size_t input_dim, std::size_t output_dim) {
  const auto s = boost::algorithm::trim_copy(name);
  if (s == "linear") return EncoderSpec::linear(input_dim, output_dim);
  std::vector<std::string> parts;
  boost::algorithm::split(parts, s, boost::algorithm::is_any_of("-"));
  if (parts.size() < 2 || parts[0] != "mlp") {
    throw ConfigError("unknown encoder '" + name + "' (linear or mlp-<hidden>[-<hidden>...])");
  }
  std::vector<std::size_t> hidden;
  for (std::size_t k = 1; k < parts.size(); ++k) {
    hidden.push_back(detail::parse_number<std::size_t>("encoder", parts[k]));
  }
  return EncoderSpec::mlp(input_dim, hidden, output_dim);
}

inline ExpertConfig expert_config(const RunConfig& c) {
  const auto& e = c.experts;
  ExpertConfig cfg;
  cfg.model = {parse_encoder(e.image_encoder, c.data.gen.image_dim, e.embed_dim),
               parse_encoder(e.text_encoder, c.data.gen.text_dim, e.embed_dim), e.tau};
  cfg.epochs = e.epochs;
  cfg.batch_size = e.batch_size;
  cfg.lr = e.lr;
  cfg.momentum = e.momentum;
  cfg.validate();
  return cfg;
}

/// Seed of expert i is this base plus i.
inline std::uint64_t expert_base_seed(const RunConfig& c) { return derive_seed(c.seed, 100); }

/// The distill config with the global seed and, for LoRS under equal_budget, the reduced pair count.
inline DistillConfig distill_config(const RunConfig& c) {
  DistillConfig d = c.distill.cfg;
  d.seed = c.seed;
  if (c.distill.equal_budget && d.sim == SimMode::Lors) {
    d.pairs = pair_budget_reduction(d.pairs, c.data.gen.image_dim, c.data.gen.text_dim, d.rank);
  }
  d.validate();
  return d;
}

inline std::vector<ModelSpec> eval_specs(const RunConfig& c) {
  if (c.eval.architectures.empty()) return {expert_config(c).model};
  std::vector<std::string> items;
  boost::algorithm::split(items, c.eval.architectures, boost::algorithm::is_any_of(";"));
  std::vector<ModelSpec> specs;
  for (const auto& item : items) {
    if (boost::algorithm::trim_copy(item).empty()) continue;
    std::vector<std::string> sides;
    boost::algorithm::split(sides, item, boost::algorithm::is_any_of("/"));
    if (sides.size() != 2) throw ConfigError("eval.architectures entry '" + item + "' is not image/text");
    ModelSpec s{parse_encoder(sides[0], c.data.gen.image_dim, c.eval.embed_dim),
                parse_encoder(sides[1], c.data.gen.text_dim, c.eval.embed_dim), c.eval.tau};
    s.validate();
    specs.push_back(s);
  }
  if (specs.empty()) throw ConfigError("eval.architectures lists no models");
  return specs;
}

/// Student loss for an artifact: an explicit eval.loss, else nce on identity and wbce on learned similarity.
inline EvalConfig eval_config(const RunConfig& c, const SyntheticDataset& artifact) {
  EvalConfig cfg;
  const auto& v = c.eval;
  if (v.loss == "auto") {
    cfg.student.loss = artifact.sim.kind() == Similarity::Kind::Identity ? LossKind::Nce : LossKind::Wbce;
  } else {
    try {
      cfg.student.loss = parse_loss_kind(v.loss);
    } catch (const Error&) {
      throw ConfigError("bad value for eval.loss: '" + v.loss + "' (auto, nce, ence, bce, wbce)");
    }
  }
  cfg.student.beta = v.beta;
  cfg.student.steps = v.steps;
  cfg.student.batch_size = v.batch_size;
  cfg.student.lr = v.lr;
  cfg.student.momentum = v.momentum;
  cfg.ks = v.ks;
  cfg.seeds = v.seeds;
  cfg.threads = v.threads;
  if (cfg.ks.empty()) throw ConfigError("eval.ks is empty");
  if (cfg.seeds.empty()) throw ConfigError("eval.seeds is empty");
  return cfg;
}

inline ForgettingProbeConfig forgetting_config(const RunConfig& c) {
  return {expert_config(c).model, c.coreset.probe_epochs, c.coreset.probe_batch_size, c.coreset.probe_lr};
}

}  // namespace lors
