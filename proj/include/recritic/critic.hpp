#ifndef RECRITIC_CRITIC_HPP
#define RECRITIC_CRITIC_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "recritic/corpus.hpp"
#include "recritic/provider.hpp"

namespace recritic {

/// Names of the two criteria every critic rubric must cover.
inline constexpr std::string_view kImageCriterion = "Image Content Understanding";
inline constexpr std::string_view kReasoningCriterion =
    "Comprehensive Contextual Reasoning";

/// Placeholders: {question}, {response_a}, {response_b}, each exactly once.
/// The model must end its answer with "Better: A" or "Better: B".
struct CriticPromptTemplate {
  std::string text;
  std::string version;

  void validate() const;
  static CriticPromptTemplate default_template();
};

enum class Winner { A, B, tie, unparseable };

std::string_view to_string(Winner w);

/// Last case-insensitive "Better: A|B" in text; unparseable when absent.
Winner parse_verdict(std::string_view text);

struct Verdict {
  /// Relative to the (resp_a, resp_b) order passed to judge.
  Winner winner = Winner::unparseable;
  std::string raw_text;
  std::string swapped_raw_text;
  /// Swapped run's preference mapped back to the original labels.
  std::optional<Winner> swapped_run_winner;
};

struct CriticInput {
  std::string id;
  std::string image_ref;
  std::string augmented_question;
};

CriticInput critic_input(const AugmentedSample& sample);

/// Builds the candidate-generation request for one sample index.
ChatRequest candidate_request(const CriticInput& input, double temperature,
                              std::uint64_t sample_seed);

inline constexpr int kDuplicateResamples = 3;

/// n candidates sampled with distinct seeds. A candidate byte-identical to an
/// earlier one is resampled up to kDuplicateResamples times; nullopt means
/// duplicates persisted and the sample should be skipped.
std::optional<std::vector<std::string>> sample_candidates(
    Provider& provider, const CriticInput& input, int n, double temperature,
    std::uint64_t seed);

/// Runs the critic in (a, b) and (b, a) order at temperature 0. A response wins
/// only when both runs prefer it; disagreement is a tie. When either run is
/// unparseable the verdict is unparseable.
Verdict judge(Provider& provider, const CriticInput& input, const std::string& resp_a,
              const std::string& resp_b, const CriticPromptTemplate& tpl);

struct CriticOptions {
  double temperature = 1.0;
  std::uint64_t seed = 0;
  /// Judge endpoint; nullptr means the candidate provider judges itself.
  Provider* judge = nullptr;
  /// Results of an earlier run; ids present in either are not redone.
  const Dataset<PreferencePair>* existing_pairs = nullptr;
  const std::vector<SkipEntry>* existing_skips = nullptr;
  int workers = 0;
};

struct PreferenceResult {
  Dataset<PreferencePair> pairs;
  std::vector<SkipEntry> skips;
  std::size_t resumed = 0;
};

/// One pair per input with a decisive verdict; ties, unparseable verdicts,
/// persistent duplicates and provider failures go to the skip report.
PreferenceResult build_preference_dataset(Provider& provider,
                                          const Dataset<AugmentedSample>& inputs,
                                          const CriticPromptTemplate& tpl,
                                          const CriticOptions& options = {});

}  // namespace recritic

#endif  // RECRITIC_CRITIC_HPP
