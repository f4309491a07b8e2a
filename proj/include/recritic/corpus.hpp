#ifndef RECRITIC_CORPUS_HPP
#define RECRITIC_CORPUS_HPP

// Record types and JSON Lines persistence for every dataset the pipeline
// reads or writes.
//
// On-disk key order (fixed, so writes are byte-deterministic):
//   instruction : id, image, question, answer[, task_tag]
//   augmented   : id, image, question, answer[, task_tag], rationale,
//                 augmented_question, meta{model, timestamp, prompt_version,
//                 insertion_version}
//   preference  : id, image, augmented_question, chosen, rejected,
//                 meta{critic_raw, critic_raw_swapped, order_swapped,
//                 tie_resolution, temperature, judge_model, seed}
// task_tag is omitted when absent. Unknown keys are rejected so that a file
// of one kind cannot be loaded silently as another.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "recritic/common.hpp"

namespace recritic {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

struct InstructionSample {
  std::string id;
  std::string image_ref;
  std::string question;
  std::string answer;
  std::optional<std::string> task_tag;

  bool operator==(const InstructionSample&) const = default;
};

struct SynthMeta {
  std::string provider_model;
  std::string timestamp;
  std::string prompt_version;
  std::string insertion_version;

  bool operator==(const SynthMeta&) const = default;
};

/// A sample whose question carries a synthesized rationale. The gold answer
/// lives untouched in base.answer.
struct AugmentedSample {
  InstructionSample base;
  std::string rationale;
  std::string augmented_question;
  SynthMeta synth_meta;

  bool operator==(const AugmentedSample&) const = default;
};

struct VerdictMeta {
  std::string critic_raw;
  std::string critic_raw_swapped;
  /// True when the chosen response was candidate B in sampling order.
  bool order_swapped = false;
  std::string tie_resolution;
  double temperature = 1.0;
  std::string judge_model;
  std::uint64_t seed = 0;

  bool operator==(const VerdictMeta&) const = default;
};

struct PreferencePair {
  std::string id;
  std::string image_ref;
  std::string augmented_question;
  std::string chosen;
  std::string rejected;
  VerdictMeta verdict_meta;

  bool operator==(const PreferencePair&) const = default;
};

/// Train-ready record: augmented and pass-through samples share one file.
using TrainingRecord = std::variant<InstructionSample, AugmentedSample>;

enum class RecordKind { instruction, augmented, preference, training };

template <typename Record>
struct Dataset {
  std::vector<Record> records;
  int schema_version = kSchemaVersion;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  bool operator==(const Dataset&) const = default;
};

struct Violation {
  std::string id;
  std::string invariant;

  bool operator==(const Violation&) const = default;
};

/// id/reason pair used by failure and skip reports.
struct SkipEntry {
  std::string id;
  std::string reason;

  bool operator==(const SkipEntry&) const = default;
};

const std::string& record_id(const InstructionSample& r);
const std::string& record_id(const AugmentedSample& r);
const std::string& record_id(const PreferencePair& r);
const std::string& record_id(const TrainingRecord& r);

OrderedJson to_json(const InstructionSample& r);
OrderedJson to_json(const AugmentedSample& r);
OrderedJson to_json(const PreferencePair& r);
OrderedJson to_json(const TrainingRecord& r);

/// Parse one record; throws Error with a reason on malformed input.
template <typename Record>
Record record_from_json(const Json& j);

template <>
InstructionSample record_from_json<InstructionSample>(const Json& j);
template <>
AugmentedSample record_from_json<AugmentedSample>(const Json& j);
template <>
PreferencePair record_from_json<PreferencePair>(const Json& j);
template <>
TrainingRecord record_from_json<TrainingRecord>(const Json& j);

/// One parsed JSON object per non-blank line, tagged with its 1-based line.
struct JsonLine {
  std::size_t line = 0;
  Json value;
};

/// Reads a JSONL file. Blank lines are skipped; a line that is not a JSON
/// object raises UsageError naming the path and line.
std::vector<JsonLine> read_jsonl(const std::string& path);

/// Serializes one value to a single line (UTF-8, no ASCII escaping).
std::string dump_line(const OrderedJson& j);

void write_jsonl(const std::vector<OrderedJson>& rows, const std::string& path);

template <typename Record>
Dataset<Record> load_dataset(const std::string& path) {
  Dataset<Record> ds;
  std::unordered_map<std::string, std::size_t> first_line;
  for (auto& row : read_jsonl(path)) {
    Record r;
    try {
      r = record_from_json<Record>(row.value);
    } catch (const std::exception& e) {
      throw UsageError(path + ":" + std::to_string(row.line) + ": " + e.what());
    }
    const auto [it, inserted] = first_line.emplace(record_id(r), row.line);
    if (!inserted) {
      throw UsageError(path + ":" + std::to_string(row.line) +
                       ": duplicate id \"" + record_id(r) +
                       "\" (first seen at line " + std::to_string(it->second) +
                       ")");
    }
    ds.records.push_back(std::move(r));
  }
  return ds;
}

/// Writes one record per line in file order. The destination directory must
/// already exist.
template <typename Record>
void write_dataset(const Dataset<Record>& ds, const std::string& path) {
  std::vector<OrderedJson> rows;
  rows.reserve(ds.records.size());
  for (const auto& r : ds.records) rows.push_back(to_json(r));
  write_jsonl(rows, path);
}

std::vector<Violation> validate(const Dataset<InstructionSample>& ds);
std::vector<Violation> validate(const Dataset<AugmentedSample>& ds);
std::vector<Violation> validate(const Dataset<PreferencePair>& ds);
std::vector<Violation> validate(const Dataset<TrainingRecord>& ds);

std::vector<SkipEntry> load_skip_report(const std::string& path);
void write_skip_report(const std::vector<SkipEntry>& entries,
                       const std::string& path);

/// Imports a LLaVA-style conversation file (a JSON array of
/// {"id", "image"?, "conversations": [{"from", "value"}, ...]}).
/// Each human/gpt turn pair becomes one InstructionSample; multi-turn records
/// get ids "<id>#<turn>" starting at 0. The "<image>" placeholder token is
/// stripped from questions.
Dataset<InstructionSample> import_llava(const std::string& path);

}  // namespace recritic

#endif  // RECRITIC_CORPUS_HPP
