#include <CLI11.hpp>

#include <iostream>

#include "lors/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multimodal dataset distillation with low-rank similarity mining"};
  app.require_subcommand(1);

  std::string config_path, output_dir;
  std::optional<std::uint64_t> seed;
  bool fix_image = false, fix_text = false, fix_similarity = false, no_lr_residual = false, no_omega = false,
       fix_lr = false;
  std::string artifact;

  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "INI run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "override the global seed");
    sub->add_option("--output-dir", output_dir, "override output_dir");
  };
  auto* gen = app.add_subcommand("gen-data", "generate the toy embedding-pair dataset");
  auto* experts = app.add_subcommand("train-experts", "train expert trajectories on the real data");
  auto* distill = app.add_subcommand("distill", "distill synthetic pairs and their similarity");
  auto* eval = app.add_subcommand("eval", "train fresh students on an artifact and report retrieval");
  auto* coreset = app.add_subcommand("coreset", "select a real-data coreset baseline");
  auto* analyze = app.add_subcommand("analyze", "similarity histograms, decomposition and spectra");
  for (auto* sub : {gen, experts, distill, eval, coreset, analyze}) common(sub);
  distill->add_flag("--fix-image", fix_image, "freeze synthetic image embeddings");
  distill->add_flag("--fix-text", fix_text, "freeze synthetic text embeddings");
  distill->add_flag("--fix-similarity", fix_similarity, "keep the similarity at its identity init");
  distill->add_flag("--no-lr-residual", no_lr_residual, "freeze the low-rank residual L, R");
  distill->add_flag("--no-omega", no_omega, "freeze the diagonal omega");
  distill->add_flag("--fix-lr", fix_lr, "freeze the inner learning rate");
  eval->add_option("--artifact", artifact, "artifact to evaluate (default from config)");
  analyze->add_option("--artifact", artifact, "artifact to analyze (default from config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : lors::kExitConfig;
  }

  try {
    lors::RunConfig cfg = lors::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!output_dir.empty()) cfg.output_dir = output_dir;
    auto& d = cfg.distill.cfg;
    d.fix_image = d.fix_image || fix_image;
    d.fix_text = d.fix_text || fix_text;
    d.fix_similarity = d.fix_similarity || fix_similarity;
    d.no_lr_residual = d.no_lr_residual || no_lr_residual;
    d.no_omega = d.no_omega || no_omega;
    d.fix_lr = d.fix_lr || fix_lr;
    if (!artifact.empty()) {
      cfg.eval.artifact_path = artifact;
      cfg.analyze.artifact_path = artifact;
    }

    if (gen->parsed()) lors::cmd_gen_data(cfg, std::cout);
    if (experts->parsed()) lors::cmd_train_experts(cfg, std::cout);
    if (distill->parsed()) lors::cmd_distill(cfg, std::cout);
    if (eval->parsed()) lors::cmd_eval(cfg, std::cout);
    if (coreset->parsed()) lors::cmd_coreset(cfg, std::cout);
    if (analyze->parsed()) lors::cmd_analyze(cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return lors::exit_code_for(e);
  }
  return lors::kExitOk;
}
