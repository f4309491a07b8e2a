#ifndef RECRITIC_SYNTHESIZER_HPP
#define RECRITIC_SYNTHESIZER_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "recritic/corpus.hpp"
#include "recritic/provider.hpp"

namespace recritic {

/// Substitutes {name} placeholders in one left-to-right pass. Placeholder
/// syntax inside substituted values is left untouched.
std::string render_template(std::string_view text,
                            const std::map<std::string, std::string>& values);

/// Throws UsageError unless every name occurs exactly once in text.
void require_placeholders_once(std::string_view text,
                               std::initializer_list<std::string_view> names,
                               std::string_view what);

/// Reads a template file. An optional first line "#version: <tag>" sets the
/// version; otherwise the version is derived from the file contents.
struct TemplateFile {
  std::string text;
  std::string version;
};
TemplateFile load_template_file(const std::string& path);

/// Prompt asking the synthesizer model for the rationale behind a gold answer.
/// Placeholders: {question}, {answer}, {image_ref}, each exactly once.
struct RationalePromptTemplate {
  std::string system_text;
  std::string text;
  std::string version;

  void validate() const;
  static RationalePromptTemplate default_template();
};

enum class InsertionLayout { rationale_first, question_first };

/// How a rationale is spliced into the question.
/// Placeholders: {rationale}, {question}, each exactly once.
struct InsertionTemplate {
  std::string text;
  InsertionLayout layout = InsertionLayout::rationale_first;
  std::string version;

  void validate() const;
  static InsertionTemplate for_layout(InsertionLayout layout);
  /// Custom text; layout follows the order of the two placeholders.
  static InsertionTemplate from_text(std::string text, std::string version);
};

std::string_view to_string(InsertionLayout layout);
InsertionLayout parse_insertion_layout(std::string_view s);

ChatRequest build_rationale_prompt(const InstructionSample& sample,
                                   const RationalePromptTemplate& tpl);

std::string insert_rationale(std::string_view question, std::string_view rationale,
                             const InsertionTemplate& tpl);

inline constexpr std::size_t kMinRationaleLength = 10;

struct RationaleOutcome {
  std::optional<std::string> rationale;
  /// Why the sample failed when rationale is empty.
  std::string failure;
  int provider_calls = 0;
};

/// Asks the provider for a rationale. A degenerate output (shorter than
/// kMinRationaleLength after trimming, or identical to the gold answer) gets
/// one re-prompt; a second degenerate output marks the sample failed.
/// Provider errors propagate.
RationaleOutcome synthesize_rationale(Provider& provider,
                                      const InstructionSample& sample,
                                      const RationalePromptTemplate& tpl);

struct SynthesisTemplates {
  RationalePromptTemplate rationale = RationalePromptTemplate::default_template();
  InsertionTemplate insertion =
      InsertionTemplate::for_layout(InsertionLayout::rationale_first);
};

struct AugmentResult {
  /// Every input record in input order; subset members that succeeded are
  /// AugmentedSamples, everything else passes through unchanged.
  Dataset<TrainingRecord> records;
  Dataset<AugmentedSample> augmented;
  /// Input records outside the augmented set, in input order.
  Dataset<InstructionSample> rest;
  std::vector<SkipEntry> failures;
  /// Subset ids reused from a previous run's output.
  std::size_t resumed = 0;
};

struct AugmentOptions {
  /// Output of an earlier run; ids found here are not re-synthesized.
  const Dataset<AugmentedSample>* existing = nullptr;
  std::string timestamp;
  /// Worker count; 0 means the provider's max_concurrent.
  int workers = 0;
};

/// Synthesizes and inserts rationales for every id in subset_ids. Unknown ids
/// raise UsageError before any provider call. Per-sample provider failures
/// become failure entries.
AugmentResult augment_dataset(Provider& provider,
                              const Dataset<InstructionSample>& dataset,
                              const std::set<std::string>& subset_ids,
                              const SynthesisTemplates& tpls,
                              const AugmentOptions& options = {});

/// Seed-deterministic shuffle of augmented ∪ rest. Ids must be disjoint.
Dataset<TrainingRecord> mix_datasets(const Dataset<AugmentedSample>& augmented,
                                     const Dataset<InstructionSample>& rest,
                                     std::uint64_t shuffle_seed);

/// In-place Fisher-Yates shuffle driven by DetRng.
template <typename T>
void deterministic_shuffle(std::vector<T>& items, std::uint64_t seed) {
  DetRng rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_index(i));
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace recritic

#endif  // RECRITIC_SYNTHESIZER_HPP
