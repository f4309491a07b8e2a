#include "recritic/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string_view>

namespace recritic {

namespace {

void require_object(const Json& j) {
  if (!j.is_object()) throw Error("record is not a JSON object");
}

void reject_unknown_keys(const Json& j,
                         std::initializer_list<std::string_view> allowed) {
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw Error("unexpected key \"" + key + "\"");
    }
  }
}

std::string get_string(const Json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end()) throw Error(std::string("missing key \"") + key + "\"");
  if (!it->is_string()) {
    throw Error(std::string("key \"") + key + "\" must be a string");
  }
  return it->get<std::string>();
}

std::optional<std::string> get_optional_string(const Json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw Error(std::string("key \"") + key + "\" must be a string");
  }
  return it->get<std::string>();
}

const Json& get_object(const Json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end()) throw Error(std::string("missing key \"") + key + "\"");
  if (!it->is_object()) {
    throw Error(std::string("key \"") + key + "\" must be an object");
  }
  return *it;
}

void put_base(OrderedJson& out, const InstructionSample& r) {
  out["id"] = r.id;
  out["image"] = r.image_ref;
  out["question"] = r.question;
  out["answer"] = r.answer;
  if (r.task_tag) out["task_tag"] = *r.task_tag;
}

InstructionSample base_from_json(const Json& j) {
  InstructionSample r;
  r.id = get_string(j, "id");
  r.image_ref = get_string(j, "image");
  r.question = get_string(j, "question");
  r.answer = get_string(j, "answer");
  r.task_tag = get_optional_string(j, "task_tag");
  return r;
}

template <typename Record>
void check_unique_ids(const Dataset<Record>& ds, std::vector<Violation>& out) {
  std::set<std::string> seen;
  for (const auto& r : ds.records) {
    if (!seen.insert(record_id(r)).second) {
      out.push_back({record_id(r), "id is unique within the dataset"});
    }
  }
}

void check_instruction(const InstructionSample& r, std::vector<Violation>& out) {
  if (is_blank(r.id)) out.push_back({r.id, "id is non-empty"});
  if (is_blank(r.question)) out.push_back({r.id, "question is non-empty"});
  if (is_blank(r.answer)) out.push_back({r.id, "answer is non-empty"});
}

void check_augmented(const AugmentedSample& r, std::vector<Violation>& out) {
  check_instruction(r.base, out);
  const std::string& id = r.base.id;
  if (is_blank(r.rationale)) out.push_back({id, "rationale is non-empty"});
  if (r.augmented_question.find(r.rationale) == std::string::npos) {
    out.push_back({id, "augmented_question contains the rationale"});
  }
  if (r.augmented_question.find(r.base.question) == std::string::npos) {
    out.push_back({id, "augmented_question contains the question"});
  }
}

}  // namespace

const std::string& record_id(const InstructionSample& r) { return r.id; }
const std::string& record_id(const AugmentedSample& r) { return r.base.id; }
const std::string& record_id(const PreferencePair& r) { return r.id; }
const std::string& record_id(const TrainingRecord& r) {
  return std::visit([](const auto& x) -> const std::string& { return record_id(x); },
                    r);
}

OrderedJson to_json(const InstructionSample& r) {
  OrderedJson out = OrderedJson::object();
  put_base(out, r);
  return out;
}

OrderedJson to_json(const AugmentedSample& r) {
  OrderedJson out = OrderedJson::object();
  put_base(out, r.base);
  out["rationale"] = r.rationale;
  out["augmented_question"] = r.augmented_question;
  OrderedJson meta = OrderedJson::object();
  meta["model"] = r.synth_meta.provider_model;
  meta["timestamp"] = r.synth_meta.timestamp;
  meta["prompt_version"] = r.synth_meta.prompt_version;
  meta["insertion_version"] = r.synth_meta.insertion_version;
  out["meta"] = std::move(meta);
  return out;
}

OrderedJson to_json(const PreferencePair& r) {
  OrderedJson out = OrderedJson::object();
  out["id"] = r.id;
  out["image"] = r.image_ref;
  out["augmented_question"] = r.augmented_question;
  out["chosen"] = r.chosen;
  out["rejected"] = r.rejected;
  const VerdictMeta& v = r.verdict_meta;
  OrderedJson meta = OrderedJson::object();
  meta["critic_raw"] = v.critic_raw;
  meta["critic_raw_swapped"] = v.critic_raw_swapped;
  meta["order_swapped"] = v.order_swapped;
  meta["tie_resolution"] = v.tie_resolution;
  meta["temperature"] = v.temperature;
  meta["judge_model"] = v.judge_model;
  meta["seed"] = v.seed;
  out["meta"] = std::move(meta);
  return out;
}

OrderedJson to_json(const TrainingRecord& r) {
  return std::visit([](const auto& x) { return to_json(x); }, r);
}

template <>
InstructionSample record_from_json<InstructionSample>(const Json& j) {
  require_object(j);
  reject_unknown_keys(j, {"id", "image", "question", "answer", "task_tag"});
  return base_from_json(j);
}

template <>
AugmentedSample record_from_json<AugmentedSample>(const Json& j) {
  require_object(j);
  reject_unknown_keys(j, {"id", "image", "question", "answer", "task_tag",
                          "rationale", "augmented_question", "meta"});
  AugmentedSample r;
  r.base = base_from_json(j);
  r.rationale = get_string(j, "rationale");
  r.augmented_question = get_string(j, "augmented_question");
  const Json& meta = get_object(j, "meta");
  r.synth_meta.provider_model = get_string(meta, "model");
  r.synth_meta.timestamp = get_string(meta, "timestamp");
  r.synth_meta.prompt_version = get_string(meta, "prompt_version");
  r.synth_meta.insertion_version = get_string(meta, "insertion_version");
  return r;
}

template <>
PreferencePair record_from_json<PreferencePair>(const Json& j) {
  require_object(j);
  reject_unknown_keys(
      j, {"id", "image", "augmented_question", "chosen", "rejected", "meta"});
  PreferencePair r;
  r.id = get_string(j, "id");
  r.image_ref = get_string(j, "image");
  r.augmented_question = get_string(j, "augmented_question");
  r.chosen = get_string(j, "chosen");
  r.rejected = get_string(j, "rejected");
  const Json& meta = get_object(j, "meta");
  VerdictMeta& v = r.verdict_meta;
  v.critic_raw = get_string(meta, "critic_raw");
  v.critic_raw_swapped = get_string(meta, "critic_raw_swapped");
  v.tie_resolution = get_string(meta, "tie_resolution");
  v.judge_model = get_string(meta, "judge_model");
  const auto swapped = meta.find("order_swapped");
  if (swapped == meta.end() || !swapped->is_boolean()) {
    throw Error("meta.order_swapped must be a boolean");
  }
  v.order_swapped = swapped->get<bool>();
  const auto temp = meta.find("temperature");
  if (temp == meta.end() || !temp->is_number()) {
    throw Error("meta.temperature must be a number");
  }
  v.temperature = temp->get<double>();
  const auto seed = meta.find("seed");
  if (seed == meta.end() || !seed->is_number_unsigned()) {
    throw Error("meta.seed must be an unsigned integer");
  }
  v.seed = seed->get<std::uint64_t>();
  return r;
}

template <>
TrainingRecord record_from_json<TrainingRecord>(const Json& j) {
  require_object(j);
  if (j.contains("rationale")) return record_from_json<AugmentedSample>(j);
  return record_from_json<InstructionSample>(j);
}

std::vector<JsonLine> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open file: " + path);
  std::vector<JsonLine> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (is_blank(line)) continue;
    JsonLine row;
    row.line = line_no;
    try {
      row.value = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw UsageError(path + ":" + std::to_string(line_no) +
                       ": malformed JSON: " + e.what());
    }
    if (!row.value.is_object()) {
      throw UsageError(path + ":" + std::to_string(line_no) +
                       ": record is not a JSON object");
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string dump_line(const OrderedJson& j) {
  try {
    return j.dump(-1, ' ', false, OrderedJson::error_handler_t::strict);
  } catch (const OrderedJson::type_error& e) {
    throw Error(std::string("cannot serialize record: ") + e.what());
  }
}

void write_jsonl(const std::vector<OrderedJson>& rows, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty() && !std::filesystem::is_directory(parent)) {
    throw Error("destination directory does not exist: " + path);
  }
  std::string buffer;
  for (const auto& row : rows) {
    buffer += dump_line(row);
    buffer += '\n';
  }
  write_text_file(path, buffer);
}

std::vector<Violation> validate(const Dataset<InstructionSample>& ds) {
  std::vector<Violation> out;
  for (const auto& r : ds.records) check_instruction(r, out);
  check_unique_ids(ds, out);
  return out;
}

std::vector<Violation> validate(const Dataset<AugmentedSample>& ds) {
  std::vector<Violation> out;
  for (const auto& r : ds.records) check_augmented(r, out);
  check_unique_ids(ds, out);
  return out;
}

std::vector<Violation> validate(const Dataset<PreferencePair>& ds) {
  std::vector<Violation> out;
  for (const auto& r : ds.records) {
    if (is_blank(r.id)) out.push_back({r.id, "id is non-empty"});
    if (r.chosen.empty()) out.push_back({r.id, "chosen is non-empty"});
    if (r.rejected.empty()) out.push_back({r.id, "rejected is non-empty"});
    if (r.chosen == r.rejected) {
      out.push_back({r.id, "chosen differs from rejected"});
    }
  }
  check_unique_ids(ds, out);
  return out;
}

std::vector<Violation> validate(const Dataset<TrainingRecord>& ds) {
  std::vector<Violation> out;
  for (const auto& r : ds.records) {
    if (const auto* a = std::get_if<AugmentedSample>(&r)) {
      check_augmented(*a, out);
    } else {
      check_instruction(std::get<InstructionSample>(r), out);
    }
  }
  check_unique_ids(ds, out);
  return out;
}

std::vector<SkipEntry> load_skip_report(const std::string& path) {
  std::vector<SkipEntry> out;
  for (const auto& row : read_jsonl(path)) {
    try {
      out.push_back({get_string(row.value, "id"), get_string(row.value, "reason")});
    } catch (const Error& e) {
      throw UsageError(path + ":" + std::to_string(row.line) + ": " + e.what());
    }
  }
  return out;
}

void write_skip_report(const std::vector<SkipEntry>& entries,
                       const std::string& path) {
  std::vector<OrderedJson> rows;
  rows.reserve(entries.size());
  for (const auto& e : entries) {
    OrderedJson row = OrderedJson::object();
    row["id"] = e.id;
    row["reason"] = e.reason;
    rows.push_back(std::move(row));
  }
  write_jsonl(rows, path);
}

Dataset<InstructionSample> import_llava(const std::string& path) {
  Json doc;
  try {
    doc = Json::parse(read_text_file(path));
  } catch (const Json::parse_error& e) {
    throw UsageError(path + ": malformed JSON: " + e.what());
  }
  if (!doc.is_array()) throw UsageError(path + ": expected a JSON array");

  auto strip_image_token = [](std::string text) {
    static constexpr std::string_view kToken = "<image>";
    for (auto pos = text.find(kToken); pos != std::string::npos;
         pos = text.find(kToken)) {
      text.erase(pos, kToken.size());
    }
    return trim(text);
  };

  Dataset<InstructionSample> ds;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const Json& entry = doc[i];
    const std::string where = path + ": entry " + std::to_string(i);
    try {
      require_object(entry);
      std::string id;
      const auto id_it = entry.find("id");
      if (id_it == entry.end()) throw Error("missing key \"id\"");
      // Upstream files mix string and integer ids.
      id = id_it->is_string() ? id_it->get<std::string>() : id_it->dump();
      const std::string image = get_optional_string(entry, "image").value_or("");
      const auto conv = entry.find("conversations");
      if (conv == entry.end() || !conv->is_array()) {
        throw Error("missing \"conversations\" array");
      }
      std::vector<std::pair<std::string, std::string>> turns;
      std::optional<std::string> pending;
      for (const auto& msg : *conv) {
        const std::string from = get_string(msg, "from");
        const std::string value = get_string(msg, "value");
        if (from == "human") {
          pending = strip_image_token(value);
        } else if (from == "gpt" && pending) {
          turns.emplace_back(*pending, trim(value));
          pending.reset();
        }
      }
      for (std::size_t t = 0; t < turns.size(); ++t) {
        InstructionSample s;
        s.id = turns.size() == 1 ? id : id + "#" + std::to_string(t);
        s.image_ref = image;
        s.question = turns[t].first;
        s.answer = turns[t].second;
        if (!seen.insert(s.id).second) {
          throw Error("duplicate id \"" + s.id + "\"");
        }
        ds.records.push_back(std::move(s));
      }
    } catch (const UsageError&) {
      throw;
    } catch (const std::exception& e) {
      throw UsageError(where + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace recritic
