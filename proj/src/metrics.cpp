#include "recritic/metrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <iomanip>
#include <sstream>

#include <boost/multiprecision/cpp_int.hpp>

namespace recritic {

std::string_view to_string(YesNo v) {
  switch (v) {
    case YesNo::yes: return "yes";
    case YesNo::no: return "no";
    case YesNo::unknown: return "unknown";
  }
  return "unknown";
}

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    const bool word = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                      (c >= '0' && c <= '9') || c >= 0x80;
    if (word) {
      cur += (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : ch;
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

YesNo parse_yes_no(std::string_view text) {
  const auto words = tokenize_words(text);
  if (words.empty()) return YesNo::unknown;
  if (words.front() == "yes") return YesNo::yes;
  if (words.front() == "no") return YesNo::no;
  for (const auto& w : words) {
    if (w == "yes") return YesNo::yes;
    if (w == "no") return YesNo::no;
  }
  return YesNo::unknown;
}

namespace {
double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace

PopeScores pope_scores(std::span<const BinaryQaRecord> records) {
  if (records.empty()) throw UsageError("pope_scores: no records");
  PopeScores s;
  s.records = records.size();
  std::size_t predicted_yes = 0;
  for (const auto& r : records) {
    if (r.gold == YesNo::unknown) {
      throw UsageError("pope_scores: record \"" + r.id + "\" has no binary gold label");
    }
    const YesNo pred = parse_yes_no(r.prediction_text);
    if (pred == YesNo::unknown) ++s.unknown;
    if (pred == YesNo::yes) ++predicted_yes;
    if (r.gold == YesNo::yes) {
      if (pred == YesNo::yes) ++s.tp;
      else ++s.fn;
    } else {
      if (pred == YesNo::yes) ++s.fp;
      else if (pred == YesNo::no) ++s.tn;
    }
  }
  s.accuracy = ratio(s.tp + s.tn, s.records);
  s.precision = ratio(s.tp, s.tp + s.fp);
  s.recall = ratio(s.tp, s.tp + s.fn);
  s.f1 = (s.precision + s.recall) > 0
             ? 2 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
  s.yes_ratio = ratio(predicted_yes, s.records);
  return s;
}

void SynonymTable::add(std::string_view surface, std::string_view canonical) {
  auto words = tokenize_words(surface);
  const std::string canon = to_lower_ascii(trim(canonical));
  if (words.empty()) {
    throw UsageError("synonym table: surface form \"" + std::string(surface) +
                     "\" has no words");
  }
  if (canon.empty()) {
    throw UsageError("synonym table: empty canonical for \"" + std::string(surface) +
                     "\"");
  }
  const auto [it, inserted] = forms_.emplace(words, canon);
  if (!inserted && it->second != canon) {
    throw UsageError("synonym table: surface form \"" + std::string(surface) +
                     "\" maps to both \"" + it->second + "\" and \"" + canon + "\"");
  }
  longest_ = std::max(longest_, words.size());
}

SynonymTable SynonymTable::from_json(const Json& j) {
  if (!j.is_object()) throw UsageError("synonym table must be a JSON object");
  SynonymTable t;
  for (const auto& [surface, canonical] : j.items()) {
    if (!canonical.is_string()) {
      throw UsageError("synonym table: value for \"" + surface + "\" must be a string");
    }
    t.add(surface, canonical.get<std::string>());
  }
  return t;
}

SynonymTable SynonymTable::default_table() {
  SynonymTable t;
  for (const auto& [surface, canonical] :
       std::initializer_list<std::pair<const char*, const char*>>{
           {"dog", "dog"},         {"dogs", "dog"},         {"puppy", "dog"},
           {"cat", "cat"},         {"cats", "cat"},         {"kitten", "cat"},
           {"person", "person"},   {"people", "person"},    {"man", "person"},
           {"woman", "person"},    {"child", "person"},     {"frisbee", "frisbee"},
           {"table", "table"},     {"tables", "table"},     {"hot dog", "hot_dog"},
           {"hot dogs", "hot_dog"}, {"car", "car"},         {"cars", "car"},
           {"ball", "ball"},       {"chair", "chair"},      {"chairs", "chair"},
           {"bicycle", "bicycle"}, {"bike", "bicycle"},     {"tree", "tree"},
           {"trees", "tree"}}) {
    t.add(surface, canonical);
  }
  return t;
}

const std::string* SynonymTable::find(std::span<const std::string> words) const {
  const auto it = forms_.find(std::vector<std::string>(words.begin(), words.end()));
  return it == forms_.end() ? nullptr : &it->second;
}

SynonymTable load_synonym_table(const std::string& path) {
  try {
    return SynonymTable::from_json(Json::parse(read_text_file(path)));
  } catch (const Json::parse_error& e) {
    throw UsageError(path + ": malformed JSON: " + e.what());
  } catch (const UsageError& e) {
    throw UsageError(path + ": " + e.what());
  }
}

std::set<std::string> extract_mentions(std::string_view caption,
                                       const SynonymTable& table) {
  const auto words = tokenize_words(caption);
  const std::span<const std::string> all(words);
  std::set<std::string> out;
  std::size_t i = 0;
  while (i < words.size()) {
    std::size_t matched = 0;
    const std::size_t max_len = std::min(table.longest_form(), words.size() - i);
    for (std::size_t len = max_len; len >= 1; --len) {
      if (const auto* canon = table.find(all.subspan(i, len))) {
        out.insert(*canon);
        matched = len;
        break;
      }
    }
    i += matched > 0 ? matched : 1;
  }
  return out;
}

HallucinationRates object_hallucination_rates(std::span<const CaptionRecord> records,
                                              const SynonymTable& table) {
  if (records.empty()) throw UsageError("object_hallucination_rates: no records");
  HallucinationRates r;
  r.captions = records.size();
  for (const auto& rec : records) {
    CaptionDetail d;
    d.id = rec.id;
    d.mentions = extract_mentions(rec.caption, table);
    for (const auto& m : d.mentions) {
      if (!rec.gold_objects.contains(m)) d.hallucinated.insert(m);
    }
    r.mentions += d.mentions.size();
    r.hallucinated_mentions += d.hallucinated.size();
    if (!d.hallucinated.empty()) ++r.hallucinated_captions;
    if (d.mentions.empty()) ++r.captions_without_mentions;
    r.details.push_back(std::move(d));
  }
  r.resp_rate = ratio(r.hallucinated_captions, r.captions);
  r.ment_rate = ratio(r.hallucinated_mentions, r.mentions);
  return r;
}

std::vector<BinaryQaRecord> load_binary_qa(const std::string& path) {
  std::vector<BinaryQaRecord> out;
  for (const auto& row : read_jsonl(path)) {
    const std::string where = path + ":" + std::to_string(row.line) + ": ";
    const Json& j = row.value;
    auto str = [&](const char* key) {
      if (!j.contains(key) || !j[key].is_string()) {
        throw UsageError(where + "\"" + key + "\" must be a string");
      }
      return j[key].get<std::string>();
    };
    BinaryQaRecord r;
    r.id = str("id");
    const std::string gold = to_lower_ascii(trim(str("gold")));
    if (gold == "yes") r.gold = YesNo::yes;
    else if (gold == "no") r.gold = YesNo::no;
    else throw UsageError(where + "\"gold\" must be \"yes\" or \"no\"");
    r.prediction_text = str("prediction");
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<CaptionRecord> load_captions(const std::string& path) {
  std::vector<CaptionRecord> out;
  for (const auto& row : read_jsonl(path)) {
    const std::string where = path + ":" + std::to_string(row.line) + ": ";
    const Json& j = row.value;
    if (!j.contains("id") || !j["id"].is_string()) {
      throw UsageError(where + "\"id\" must be a string");
    }
    if (!j.contains("caption") || !j["caption"].is_string()) {
      throw UsageError(where + "\"caption\" must be a string");
    }
    if (!j.contains("gold_objects") || !j["gold_objects"].is_array() ||
        j["gold_objects"].empty()) {
      throw UsageError(where + "\"gold_objects\" must be a non-empty array");
    }
    CaptionRecord r;
    r.id = j["id"].get<std::string>();
    r.caption = j["caption"].get<std::string>();
    for (const auto& g : j["gold_objects"]) {
      if (!g.is_string() || is_blank(g.get<std::string>())) {
        throw UsageError(where + "gold object names must be non-empty strings");
      }
      r.gold_objects.insert(to_lower_ascii(trim(g.get<std::string>())));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string format_rate(double value) {
  using boost::multiprecision::cpp_int;
  if (!std::isfinite(value)) return value > 0 ? "inf" : (value < 0 ? "-inf" : "nan");
  const bool negative = std::signbit(value);
  const double mag = std::fabs(value);
  int exp = 0;
  const double frac = std::frexp(mag, &exp);  // mag = frac * 2^exp
  // mag = mantissa * 2^(exp - 53) exactly.
  const auto mantissa = static_cast<std::int64_t>(std::ldexp(frac, 53));
  const int shift = exp - 53;
  cpp_int num = cpp_int(mantissa) * 10000;
  cpp_int den = 1;
  if (shift >= 0) num <<= shift;
  else den <<= -shift;
  cpp_int q = num / den;
  const cpp_int twice_rem = (num % den) * 2;
  if (twice_rem > den || (twice_rem == den && (q & 1) != 0)) ++q;

  std::string digits = q.str();
  if (digits.size() < 5) digits.insert(0, 5 - digits.size(), '0');
  std::string out = digits.substr(0, digits.size() - 4) + "." +
                    digits.substr(digits.size() - 4);
  if (negative && q != 0) out.insert(0, "-");
  return out;
}

namespace {

std::string aligned(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::size_t width = 0;
  for (const auto& [k, _] : rows) width = std::max(width, k.size());
  std::ostringstream os;
  for (const auto& [k, v] : rows) {
    os << std::left << std::setw(static_cast<int>(width) + 2) << k << v << '\n';
  }
  return os.str();
}

}  // namespace

Report pope_report(const PopeScores& s) {
  Report r;
  r.json = OrderedJson::object();
  r.json["benchmark"] = "pope";
  r.json["records"] = s.records;
  r.json["skipped"] = s.unknown;
  r.json["accuracy"] = format_rate(s.accuracy);
  r.json["precision"] = format_rate(s.precision);
  r.json["recall"] = format_rate(s.recall);
  r.json["f1"] = format_rate(s.f1);
  r.json["yes_ratio"] = format_rate(s.yes_ratio);
  OrderedJson cm = OrderedJson::object();
  cm["tp"] = s.tp;
  cm["fp"] = s.fp;
  cm["tn"] = s.tn;
  cm["fn"] = s.fn;
  r.json["confusion"] = std::move(cm);
  r.json["conventions"] =
      "positive class is yes; unparseable answers count as wrong and as no";
  r.table = aligned({{"benchmark", "pope"},
                     {"records", std::to_string(s.records)},
                     {"skipped (unparseable)", std::to_string(s.unknown)},
                     {"accuracy", format_rate(s.accuracy)},
                     {"precision", format_rate(s.precision)},
                     {"recall", format_rate(s.recall)},
                     {"f1", format_rate(s.f1)},
                     {"yes_ratio", format_rate(s.yes_ratio)}});
  return r;
}

Report objhal_report(const HallucinationRates& h) {
  Report r;
  r.json = OrderedJson::object();
  r.json["benchmark"] = "objhal";
  r.json["records"] = h.captions;
  r.json["skipped"] = h.captions_without_mentions;
  r.json["resp_rate"] = format_rate(h.resp_rate);
  r.json["ment_rate"] = format_rate(h.ment_rate);
  r.json["mentions"] = h.mentions;
  r.json["hallucinated_mentions"] = h.hallucinated_mentions;
  r.json["hallucinated_captions"] = h.hallucinated_captions;
  r.json["conventions"] =
      "mention-match-v1: case-insensitive whole-word match, longest surface "
      "form first, each canonical object counted once per caption";
  OrderedJson details = OrderedJson::array();
  for (const auto& d : h.details) {
    OrderedJson row = OrderedJson::object();
    row["id"] = d.id;
    row["mentions"] = d.mentions;
    row["hallucinated"] = d.hallucinated;
    details.push_back(std::move(row));
  }
  r.json["details"] = std::move(details);
  r.table = aligned({{"benchmark", "objhal"},
                     {"records", std::to_string(h.captions)},
                     {"skipped (no mentions)", std::to_string(h.captions_without_mentions)},
                     {"mentions", std::to_string(h.mentions)},
                     {"resp_rate", format_rate(h.resp_rate)},
                     {"ment_rate", format_rate(h.ment_rate)}});
  return r;
}

}  // namespace recritic
