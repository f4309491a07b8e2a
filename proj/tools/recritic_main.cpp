// recritic: rationale augmentation, self-critic preference pairs, DPO loss
// reports and benchmark scoring from one config file.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "recritic/pipeline.hpp"

namespace {

struct GlobalFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool dry_run = false;
  bool mock = false;
};

recritic::RunContext make_context(const GlobalFlags& g, bool config_required) {
  recritic::RunContext ctx;
  if (!g.config_path.empty()) {
    ctx.config = recritic::PipelineConfig::load(g.config_path);
  } else if (config_required) {
    throw recritic::UsageError("--config is required for this subcommand");
  }
  if (g.seed) ctx.config.seed = *g.seed;
  if (!g.out.empty()) ctx.config.output_dir = g.out;
  ctx.dry_run = g.dry_run;
  ctx.mock = g.mock;
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rationale-augmented instruction data and self-critic preference pairs"};
  app.set_version_flag("--version", "recritic " + std::string(recritic::kToolVersion));
  app.require_subcommand(1);

  GlobalFlags g;
  app.add_option("--config", g.config_path, "Pipeline config (JSON)");
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--out", g.out, "Override the output directory");
  app.add_flag("--dry-run", g.dry_run, "Print the planned provider calls and exit");
  app.add_flag("--mock", g.mock, "Use the deterministic offline provider");

  auto* augment = app.add_subcommand("augment", "Select, synthesize rationales and mix");
  auto* pairs = app.add_subcommand("pairs", "Sample candidates and build preference pairs");
  auto* select = app.add_subcommand("select", "Write the selected id subset");

  recritic::DpoCommand dpo_cmd;
  auto* dpo = app.add_subcommand("dpo", "DPO loss and gradient report from log-prob traces");
  dpo->add_option("--traces", dpo_cmd.traces_path, "Trace JSONL file")->required();
  dpo->add_option("--beta", dpo_cmd.beta, "Override dpo.beta");
  dpo->add_flag("--per-token-mean", dpo_cmd.per_token_mean, "Score sequences by mean log-prob");
  dpo->add_flag("--check-grads", dpo_cmd.check_grads, "Verify gradients by finite differences");
  dpo->add_flag("--grads", dpo_cmd.write_grads, "Write per-token gradients");

  recritic::ScoreCommand score_cmd;
  auto* score = app.add_subcommand("score", "Score benchmark outputs");
  score->add_option("kind", score_cmd.kind, "pope or objhal")
      ->required()
      ->check(CLI::IsMember({"pope", "objhal"}));
  score->add_option("--input", score_cmd.input_path, "Records JSONL")->required();
  score->add_option("--synonyms", score_cmd.synonyms_path, "Synonym table JSON (objhal)");

  // Global flags are accepted after the subcommand too.
  for (auto* sub : {augment, pairs, select, dpo, score}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*augment) return recritic::run_augment(make_context(g, true));
    if (*pairs) return recritic::run_pairs(make_context(g, true));
    if (*select) return recritic::run_select(make_context(g, true));
    if (*dpo) return recritic::run_dpo(make_context(g, false), dpo_cmd);
    if (*score) return recritic::run_score(make_context(g, false), score_cmd);
  } catch (const recritic::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "fatal: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
