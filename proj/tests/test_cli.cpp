#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "lors/commands.hpp"

using namespace lors;
namespace fs = std::filesystem;

namespace {

// Small enough that the whole pipeline runs in well under a second.
const char* kTinyConfig = R"(
seed = 3
[data]
topics = 4
latent_dim = 4
image_dim = 8
text_dim = 6
train_per_topic = 30
test_per_topic = 10
[experts]
count = 2
embed_dim = 4
tau = 0.2
epochs = 3
batch_size = 20
lr = 0.1
[distill]
pairs = 12
equal_budget = false
rank = 2
syn_steps = 2
batch_size = 6
max_start_epoch = 1
iterations = 5
[eval]
steps = 20
batch_size = 6
seeds = 0, 1
[coreset]
pairs = 12
[analyze]
dup = 6
bins = 10
)";

RunConfig tiny(const std::string& name) {
  auto c = parse_config(kTinyConfig);
  c.output_dir = (fs::temp_directory_path() / ("lors_cli_" + name)).string();
  fs::remove_all(c.output_dir);
  return c;
}

int run_cli(const std::string& args) {
  const int status = std::system((std::string(LORS_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("empty config yields the defaults", "[config]") {
  CHECK(resolved_config(parse_config("")) == resolved_config(RunConfig{}));
  const auto c = parse_config("; only a comment\n# another\n");
  CHECK(c.seed == 0);
  CHECK(c.distill.cfg.loss == LossKind::Wbce);
}

TEST_CASE("resolved config round-trips", "[config]") {
  auto c = parse_config(kTinyConfig);
  c.eval.lr = 0.125;
  c.distill.cfg.lr_lr = 1e-5;
  c.data.gen.noise = 0.1;
  const std::string text = resolved_config(c);
  CHECK(resolved_config(parse_config(text)) == text);
  const auto back = parse_config(text);
  CHECK(back.distill.cfg.lr_lr == 1e-5);
  CHECK(back.data.gen.noise == 0.1);
  CHECK(back.eval.lr == 0.125);
  CHECK(back.eval.seeds == std::vector<std::uint64_t>{0, 1});
}

TEST_CASE("config errors name the key", "[config]") {
  auto message = [](const std::string& text) {
    try {
      parse_config(text, "t.ini");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK_THAT(message("[distill]\nbogus = 1\n"), Catch::Matchers::ContainsSubstring("distill.bogus"));
  CHECK_THAT(message("[nonsense]\nx = 1\n"), Catch::Matchers::ContainsSubstring("nonsense.x"));
  CHECK_THAT(message("colour = red\n"), Catch::Matchers::ContainsSubstring("colour"));
  CHECK_THAT(message("[distill]\nrank = two\n"), Catch::Matchers::ContainsSubstring("distill.rank"));
  CHECK_THAT(message("[distill]\nrank = -1\n"), Catch::Matchers::ContainsSubstring("distill.rank"));
  CHECK_THAT(message("[distill]\nfix_lr = maybe\n"), Catch::Matchers::ContainsSubstring("distill.fix_lr"));
  CHECK_THAT(message("[distill]\nloss = hinge\n"), Catch::Matchers::ContainsSubstring("distill.loss"));
  CHECK_THAT(message("[distill]\nsim = dense\n"), Catch::Matchers::ContainsSubstring("distill.sim"));
  CHECK_THAT(message("[eval]\nks = 1, x\n"), Catch::Matchers::ContainsSubstring("eval.ks"));
  CHECK_THAT(message("[data]\ntopics = 3\ntopics = 4\n"), Catch::Matchers::ContainsSubstring("t.ini"));
  CHECK(message("[coreset]\n") == "no error");
}

TEST_CASE("derived run objects", "[config]") {
  CHECK(parse_encoder("linear", 8, 4) == EncoderSpec::linear(8, 4));
  CHECK(parse_encoder("mlp-32-16", 8, 4) == EncoderSpec::mlp(8, {32, 16}, 4));
  CHECK_THROWS_AS(parse_encoder("conv", 8, 4), ConfigError);
  CHECK_THROWS_AS(parse_encoder("mlp", 8, 4), ConfigError);

  RunConfig c;
  c.distill.cfg.pairs = 50;
  c.distill.cfg.rank = 2;
  const auto d = distill_config(c);
  // pairs + similarity parameters fit the storage of 50 plain pairs, and one more pair would not
  const std::size_t pair_size = c.data.gen.image_dim + c.data.gen.text_dim;
  CHECK(d.pairs * pair_size + d.pairs * (2 * 2 + 1) <= 50 * pair_size);
  CHECK((d.pairs + 1) * pair_size + (d.pairs + 1) * (2 * 2 + 1) > 50 * pair_size);
  c.distill.equal_budget = false;
  CHECK(distill_config(c).pairs == 50);
  c.distill.cfg.sim = SimMode::Identity;
  c.distill.equal_budget = true;
  CHECK(distill_config(c).pairs == 50);

  c.eval.architectures = "linear/linear; mlp-8/linear";
  const auto specs = eval_specs(c);
  REQUIRE(specs.size() == 2);
  CHECK(specs[1].image == EncoderSpec::mlp(32, {8}, 16));
  c.eval.architectures = "linear";
  CHECK_THROWS_AS(eval_specs(c), ConfigError);

  SyntheticDataset ident{Tensor(4, 2), Tensor(4, 2), IdentitySim{4}, 0.1, {}};
  CHECK(eval_config(RunConfig{}, ident).student.loss == LossKind::Nce);
  ident.sim = init_lors(4, 1, 1.0, 0);
  CHECK(eval_config(RunConfig{}, ident).student.loss == LossKind::Wbce);
}

TEST_CASE("pipeline commands", "[cli]") {
  auto c = tiny("pipeline");
  std::ostringstream log;

  cmd_gen_data(c, log);
  const auto train_bytes = read_file(c.train_path());
  cmd_gen_data(c, log);
  CHECK(read_file(c.train_path()) == train_bytes);
  CHECK(fs::exists(c.train_path().parent_path() / kSnapshotName));
  const auto snapshot = parse_config(read_text_file(c.train_path().parent_path() / kSnapshotName));
  CHECK(resolved_config(snapshot) == resolved_config(c));

  const auto store = cmd_train_experts(c, log);
  CHECK(store.manifest.at("count") == 2);
  CHECK(store.manifest.at("files").size() == 2);
  const auto expert_bytes = read_file(c.store_dir() / expert_file_name(1));
  cmd_train_experts(c, log);
  CHECK(read_file(c.store_dir() / expert_file_name(1)) == expert_bytes);

  const auto result = cmd_distill(c, log);
  const auto trace = read_text_file(c.distill_artifact().parent_path() / "trace.csv");
  CHECK(std::count(trace.begin(), trace.end(), '\n') == 1 + 5);
  CHECK(trace.rfind("iteration,loss,start_epoch,expert_id,inner_lr\n", 0) == 0);
  CHECK(load_artifact(c.distill_artifact()) == result.syn);

  const auto reports = cmd_eval(c, log);
  const auto json = nlohmann::json::parse(read_text_file(c.out() / "eval" / "artifact" / "report.json"));
  REQUIRE(json.at("reports").size() == 1);
  const auto& block = json["reports"][0];
  CHECK(block.at("ks") == nlohmann::json({1, 5, 10}));
  CHECK(block.at("seeds") == nlohmann::json({0, 1}));
  double prev_ir = -1.0;
  for (const std::size_t k : {1, 5, 10}) {
    const auto& m = block.at("metrics").at("IR@" + std::to_string(k));
    CHECK(m.at("per_seed").size() == 2);
    CHECK(m.at("mean").get<double>() >= prev_ir);
    prev_ir = m.at("mean").get<double>();
    CHECK(m.contains("std"));
  }
  CHECK(log.str().find("+-") != std::string::npos);

  const auto sel = cmd_coreset(c, log);
  CHECK(sel.indices.size() == 12);
  auto ce = c;
  ce.eval.artifact_path = (c.out() / "coreset" / "random.lsyn").string();
  CHECK(cmd_eval(ce, log).front().ir.size() == 3);
  CHECK(fs::exists(c.out() / "eval" / "random" / "report.json"));
}

TEST_CASE("fix-similarity keeps the identity similarity", "[cli]") {
  auto c = tiny("fixsim");
  std::ostringstream log;
  cmd_gen_data(c, log);
  cmd_train_experts(c, log);
  c.distill.cfg.fix_similarity = true;
  const auto r = cmd_distill(c, log);
  CHECK(r.syn.sim.compose() == Tensor::identity(12));
  CHECK(eval_config(c, r.syn).student.loss == LossKind::Wbce);
}

TEST_CASE("analyze on the initial artifact", "[cli]") {
  auto c = tiny("analyze");
  std::ostringstream log;
  cmd_gen_data(c, log);
  cmd_train_experts(c, log);
  c.distill.cfg.iterations = 0;
  cmd_distill(c, log);
  const auto summary = cmd_analyze(c, log);
  const auto& groups = summary.at("artifact").at("groups");
  CHECK(groups.at("true_positive").at("mean") == 1.0);
  CHECK(groups.at("false_negative").at("mean") == 0.0);
  CHECK(groups.at("true_negative").at("mean") == 0.0);
  CHECK(summary.at("probe").at("before").at("false_negative").at("cells") == 12);
  CHECK(summary.at("probe").at("before").at("true_positive").at("mean") == 1.0);

  std::istringstream csv(read_text_file(c.out() / "analyze" / "spectrum.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "matrix,index,singular_value");
  std::map<std::string, std::vector<double>> series;
  while (std::getline(csv, line)) {
    const auto a = line.find(','), b = line.rfind(',');
    series[line.substr(0, a)].push_back(std::stod(line.substr(b + 1)));
  }
  REQUIRE(series.size() == 2);
  for (const auto& [name, values] : series) CHECK(std::is_sorted(values.rbegin(), values.rend()));
}

TEST_CASE("missing inputs are file errors", "[cli]") {
  auto c = tiny("missing");
  std::ostringstream log;
  CHECK_THROWS_AS(cmd_train_experts(c, log), IoError);
  cmd_gen_data(c, log);
  CHECK_THROWS_AS(cmd_distill(c, log), IoError);
}

TEST_CASE("exit codes", "[cli]") {
  const auto dir = fs::temp_directory_path() / "lors_cli_exit";
  fs::create_directories(dir);
  write_text_file(dir / "bad.ini", "[distill]\nbogus = 1\n");
  write_text_file(dir / "empty.ini", "output_dir = " + (dir / "out").string() + "\n");
  write_text_file(dir / "ok.ini", std::string(kTinyConfig) + "\n");
  CHECK(run_cli("distill -c " + (dir / "bad.ini").string()) == kExitConfig);
  CHECK(run_cli("train-experts -c " + (dir / "empty.ini").string()) == kExitIo);
  CHECK(run_cli("gen-data") == kExitConfig);
  CHECK(run_cli("gen-data -c " + (dir / "ok.ini").string() + " --output-dir " + (dir / "run").string()) == kExitOk);
  CHECK(fs::exists(dir / "run" / "data" / "train.lepd"));
}
