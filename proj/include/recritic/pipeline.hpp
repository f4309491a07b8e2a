#ifndef RECRITIC_PIPELINE_HPP
#define RECRITIC_PIPELINE_HPP

// Subcommand drivers behind the recritic binary. Each run_* returns the
// process exit code (0 ok, 1 partial) and throws UsageError for bad input,
// which the binary maps to exit code 2.
//
// Config file layout (every section optional unless a subcommand needs it):
//
//   {
//     "seed": 7,
//     "output_dir": "out",
//     "providers": {"synthesizer": {...}, "target": {...},
//                   "judge": {...}, "embedder": {...}},
//     "datasets": {"train": "train.jsonl", "correctness": "correct.jsonl",
//                  "augmented": "augmented.jsonl"},
//     "selection": {"strategy": "random", "budget": 100, "k_clusters": 20,
//                   "k_per": 0, "max_iter": 100},
//     "templates": {"rationale": "r.txt", "insertion": "i.txt",
//                   "critic": "c.txt", "insertion_layout": "rationale_first"},
//     "dpo": {"beta": 0.1, "per_token_mean": false},
//     "critic": {"temperature": 1.0},
//     "workers": 0,
//     "mock_script": "script.json"
//   }
//
// Relative paths resolve against the config file's directory.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "recritic/corpus.hpp"
#include "recritic/provider.hpp"

namespace recritic {

enum class SelectionStrategy { random, hard };

std::string_view to_string(SelectionStrategy s);
SelectionStrategy parse_selection_strategy(std::string_view s);

struct SelectionConfig {
  SelectionStrategy strategy = SelectionStrategy::random;
  std::size_t budget = 0;
  int k_clusters = 20;
  /// 0 means ceil(budget / k_clusters).
  std::size_t k_per = 0;
  int max_iter = 100;
};

struct PipelineConfig {
  std::optional<ProviderConfig> synthesizer;
  std::optional<ProviderConfig> target;
  /// Falls back to target when absent.
  std::optional<ProviderConfig> judge;
  std::optional<ProviderConfig> embedder;

  std::string train_path;
  std::string correctness_path;
  /// Input of `pairs`; defaults to <output_dir>/augmented.jsonl.
  std::string augmented_path;

  SelectionConfig selection;

  std::string rationale_template_path;
  std::string insertion_template_path;
  std::string critic_template_path;
  std::string insertion_layout = "rationale_first";

  double beta = 0.1;
  bool per_token_mean = false;
  double critic_temperature = 1.0;
  std::uint64_t seed = 0;
  /// 0 means each provider's max_concurrent.
  int workers = 0;
  std::string output_dir = "out";
  std::string mock_script_path;

  /// Directory relative paths resolve against.
  std::filesystem::path base_dir = ".";

  static PipelineConfig from_json(const Json& j, std::filesystem::path base_dir = ".");
  static PipelineConfig load(const std::string& path);
  /// Serializable view used for the config hash. Output location is left out
  /// so identical runs into different directories hash the same.
  OrderedJson to_json() const;
  std::string resolve(const std::string& path) const;
};

struct RunContext {
  PipelineConfig config;
  bool dry_run = false;
  bool mock = false;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
};

struct DpoCommand {
  std::string traces_path;
  std::optional<double> beta;
  bool per_token_mean = false;
  bool check_grads = false;
  /// Also write per-token gradients to dpo_grads.jsonl.
  bool write_grads = false;
};

struct ScoreCommand {
  /// "pope" or "objhal".
  std::string kind;
  std::string input_path;
  /// objhal only; empty means the built-in table.
  std::string synonyms_path;
};

int run_select(const RunContext& ctx);
int run_augment(const RunContext& ctx);
int run_pairs(const RunContext& ctx);
int run_dpo(const RunContext& ctx, const DpoCommand& cmd);
int run_score(const RunContext& ctx, const ScoreCommand& cmd);

/// Value for synth_meta.timestamp: SOURCE_DATE_EPOCH when set, a fixed epoch
/// under the mock provider, otherwise the current UTC time.
std::string run_timestamp(bool mock);

}  // namespace recritic

#endif  // RECRITIC_PIPELINE_HPP
