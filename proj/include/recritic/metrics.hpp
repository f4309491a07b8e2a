#ifndef RECRITIC_METRICS_HPP
#define RECRITIC_METRICS_HPP

#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "recritic/corpus.hpp"

namespace recritic {

enum class YesNo { yes, no, unknown };

std::string_view to_string(YesNo v);

/// Leading "yes"/"no" word wins; otherwise the first whole-word "yes"/"no";
/// otherwise unknown. Case-insensitive.
YesNo parse_yes_no(std::string_view text);

struct BinaryQaRecord {
  std::string id;
  /// yes or no, never unknown.
  YesNo gold = YesNo::no;
  std::string prediction_text;
};

/// "yes" is the positive class. Unknown predictions count as wrong for
/// accuracy and as "no" for yes_ratio. Zero denominators give 0.
struct PopeScores {
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double yes_ratio = 0;
  std::size_t records = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
  std::size_t unknown = 0;
};

PopeScores pope_scores(std::span<const BinaryQaRecord> records);

/// Lowercased words: maximal runs of ASCII letters, digits and non-ASCII bytes.
std::vector<std::string> tokenize_words(std::string_view text);

/// Surface form -> canonical object name, many-to-one. Surface forms are
/// matched as word sequences, so "Hot-Dog" and "hot dog" are the same form.
class SynonymTable {
 public:
  SynonymTable() = default;

  /// Throws UsageError when the form already maps to a different canonical.
  void add(std::string_view surface, std::string_view canonical);

  static SynonymTable from_json(const Json& j);
  /// Small table for tests and demos; real evaluations supply their own.
  static SynonymTable default_table();

  std::size_t size() const { return forms_.size(); }
  std::size_t longest_form() const { return longest_; }
  const std::string* find(std::span<const std::string> words) const;

 private:
  std::map<std::vector<std::string>, std::string> forms_;
  std::size_t longest_ = 0;
};

SynonymTable load_synonym_table(const std::string& path);

/// Canonical names mentioned in caption, deduplicated. Scans left to right
/// taking the longest surface form at each position; matched words are not
/// reused.
std::set<std::string> extract_mentions(std::string_view caption,
                                       const SynonymTable& table);

struct CaptionRecord {
  std::string id;
  std::string caption;
  std::set<std::string> gold_objects;
};

struct CaptionDetail {
  std::string id;
  std::set<std::string> mentions;
  std::set<std::string> hallucinated;
};

/// A mention is hallucinated when its canonical name is not a gold object.
/// resp_rate counts captions with at least one hallucinated mention over all
/// captions; ment_rate counts hallucinated mentions over all mentions (0 when
/// there are none).
struct HallucinationRates {
  double resp_rate = 0;
  double ment_rate = 0;
  std::size_t captions = 0;
  std::size_t hallucinated_captions = 0;
  std::size_t mentions = 0;
  std::size_t hallucinated_mentions = 0;
  std::size_t captions_without_mentions = 0;
  std::vector<CaptionDetail> details;
};

HallucinationRates object_hallucination_rates(std::span<const CaptionRecord> records,
                                              const SynonymTable& table);

/// JSONL {"id", "gold": "yes"|"no", "prediction"}.
std::vector<BinaryQaRecord> load_binary_qa(const std::string& path);
/// JSONL {"id", "caption", "gold_objects": [...]}. Gold names are lowercased.
std::vector<CaptionRecord> load_captions(const std::string& path);

/// Fixed 4-decimal rendering, ties rounded to even on the exact binary value.
std::string format_rate(double value);

struct Report {
  OrderedJson json;
  std::string table;
};

Report pope_report(const PopeScores& s);
Report objhal_report(const HallucinationRates& r);

}  // namespace recritic

#endif  // RECRITIC_METRICS_HPP
