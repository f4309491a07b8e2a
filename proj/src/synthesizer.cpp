#include "recritic/synthesizer.hpp"

#include <unordered_map>

#include "recritic/parallel.hpp"

namespace recritic {

std::string render_template(std::string_view text,
                            const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '{') {
      const auto close = text.find('}', i + 1);
      if (close != std::string_view::npos) {
        const auto it = values.find(std::string(text.substr(i + 1, close - i - 1)));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += text[i++];
  }
  return out;
}

void require_placeholders_once(std::string_view text,
                               std::initializer_list<std::string_view> names,
                               std::string_view what) {
  for (auto name : names) {
    const std::string placeholder = "{" + std::string(name) + "}";
    const auto n = count_occurrences(text, placeholder);
    if (n != 1) {
      throw UsageError(std::string(what) + ": placeholder " + placeholder +
                       " must appear exactly once (found " + std::to_string(n) +
                       ")");
    }
  }
}

TemplateFile load_template_file(const std::string& path) {
  std::string text = read_text_file(path);
  static constexpr std::string_view kVersionTag = "#version:";
  TemplateFile tpl;
  if (text.rfind(kVersionTag, 0) == 0) {
    const auto eol = text.find('\n');
    tpl.version = trim(text.substr(kVersionTag.size(), eol - kVersionTag.size()));
    text = eol == std::string::npos ? std::string() : text.substr(eol + 1);
  } else {
    tpl.version = "file-" + hex64(fnv1a64(text));
  }
  // Editors add a trailing newline that is not part of the template.
  if (!text.empty() && text.back() == '\n') text.pop_back();
  tpl.text = std::move(text);
  return tpl;
}

void RationalePromptTemplate::validate() const {
  require_placeholders_once(text, {"question", "answer", "image_ref"},
                            "rationale prompt template");
  for (auto name : {"{question}", "{answer}", "{image_ref}"}) {
    if (system_text.find(name) != std::string::npos) {
      throw UsageError(std::string("rationale system prompt must not contain ") +
                       name);
    }
  }
}

RationalePromptTemplate RationalePromptTemplate::default_template() {
  RationalePromptTemplate t;
  t.system_text =
      "You write concise visual rationales for training data. You receive an "
      "image, a question about it, and the reference answer. You explain the "
      "evidence that supports the answer; you never just restate the answer.";
  t.text =
      "Image: {image_ref}\n"
      "Question: {question}\n"
      "Reference answer: {answer}\n"
      "\n"
      "Study the image contents and use the reference answer to work out the key "
      "basis for judging this question: which visual details matter, and what "
      "prior knowledge connects them to the answer. Write that basis as brief "
      "step-by-step reasoning grounded in what is visible. Output only the "
      "rationale. Do not output the reference answer by itself.";
  t.version = "rationale-v1";
  return t;
}

void InsertionTemplate::validate() const {
  require_placeholders_once(text, {"rationale", "question"}, "insertion template");
}

InsertionTemplate InsertionTemplate::for_layout(InsertionLayout layout) {
  InsertionTemplate t;
  t.layout = layout;
  if (layout == InsertionLayout::rationale_first) {
    t.text = "Hint: {rationale}\n{question}";
    t.version = "insert-rationale-first-v1";
  } else {
    t.text = "{question}\nHint: {rationale}";
    t.version = "insert-question-first-v1";
  }
  return t;
}

InsertionTemplate InsertionTemplate::from_text(std::string text,
                                               std::string version) {
  InsertionTemplate t;
  t.text = std::move(text);
  t.version = std::move(version);
  t.validate();
  t.layout = t.text.find("{rationale}") < t.text.find("{question}")
                 ? InsertionLayout::rationale_first
                 : InsertionLayout::question_first;
  return t;
}

std::string_view to_string(InsertionLayout layout) {
  return layout == InsertionLayout::rationale_first ? "rationale_first"
                                                    : "question_first";
}

InsertionLayout parse_insertion_layout(std::string_view s) {
  if (s == "rationale_first") return InsertionLayout::rationale_first;
  if (s == "question_first") return InsertionLayout::question_first;
  throw UsageError("unknown insertion layout: " + std::string(s));
}

ChatRequest build_rationale_prompt(const InstructionSample& sample,
                                   const RationalePromptTemplate& tpl) {
  tpl.validate();
  ChatRequest req;
  req.tag = "rationale:" + sample.id;
  req.temperature = 0.0;
  req.messages.push_back({"system", tpl.system_text, std::nullopt});
  ChatMessage user;
  user.role = "user";
  user.text = render_template(tpl.text, {{"question", sample.question},
                                         {"answer", sample.answer},
                                         {"image_ref", sample.image_ref}});
  if (!sample.image_ref.empty()) user.image_ref = sample.image_ref;
  req.messages.push_back(std::move(user));
  return req;
}

std::string insert_rationale(std::string_view question, std::string_view rationale,
                             const InsertionTemplate& tpl) {
  if (is_blank(rationale)) throw Error("insert_rationale: rationale is empty");
  if (is_blank(question)) throw Error("insert_rationale: question is empty");
  tpl.validate();
  return render_template(tpl.text, {{"rationale", std::string(rationale)},
                                    {"question", std::string(question)}});
}

namespace {

std::string degeneracy(const std::string& candidate, const InstructionSample& sample) {
  if (candidate.empty()) return "empty rationale";
  if (candidate == sample.answer || candidate == trim(sample.answer)) {
    return "rationale repeats the gold answer";
  }
  if (candidate.size() < kMinRationaleLength) return "rationale too short";
  return {};
}

}  // namespace

RationaleOutcome synthesize_rationale(Provider& provider,
                                      const InstructionSample& sample,
                                      const RationalePromptTemplate& tpl) {
  RationaleOutcome out;
  ChatRequest req = build_rationale_prompt(sample, tpl);
  std::string problem;
  for (int attempt = 0; attempt < 2; ++attempt) {
    if (attempt == 1) {
      req.messages.push_back(
          {"user",
           "Your previous reply was unusable (" + problem +
               "). Reply again with the rationale only, at least one full "
               "sentence, without restating the answer on its own.",
           std::nullopt});
    }
    ++out.provider_calls;
    const std::string candidate = trim(provider.chat(req).text);
    problem = degeneracy(candidate, sample);
    if (problem.empty()) {
      out.rationale = candidate;
      return out;
    }
  }
  out.failure = problem + " after re-prompt";
  return out;
}

AugmentResult augment_dataset(Provider& provider,
                              const Dataset<InstructionSample>& dataset,
                              const std::set<std::string>& subset_ids,
                              const SynthesisTemplates& tpls,
                              const AugmentOptions& options) {
  tpls.rationale.validate();
  tpls.insertion.validate();

  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    index.emplace(dataset.records[i].id, i);
  }
  for (const auto& id : subset_ids) {
    if (!index.contains(id)) {
      throw UsageError("subset id not in dataset: \"" + id + "\"");
    }
  }

  std::unordered_map<std::string, const AugmentedSample*> previous;
  if (options.existing != nullptr) {
    for (const auto& r : options.existing->records) previous.emplace(r.base.id, &r);
  }

  struct Slot {
    std::optional<AugmentedSample> sample;
    std::optional<std::string> failure;
    bool resumed = false;
  };
  std::vector<Slot> slots(dataset.records.size());
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const auto& rec = dataset.records[i];
    if (!subset_ids.contains(rec.id)) continue;
    const auto prev = previous.find(rec.id);
    if (prev != previous.end() && prev->second->base == rec) {
      slots[i].sample = *prev->second;
      slots[i].resumed = true;
    } else {
      pending.push_back(i);
    }
  }

  auto work = [&](std::size_t i) {
    const InstructionSample& rec = dataset.records[i];
    try {
      RationaleOutcome outcome = synthesize_rationale(provider, rec, tpls.rationale);
      if (!outcome.rationale) {
        slots[i].failure = outcome.failure;
        return;
      }
      AugmentedSample a;
      a.base = rec;
      a.rationale = *outcome.rationale;
      a.augmented_question = insert_rationale(rec.question, a.rationale, tpls.insertion);
      a.synth_meta = {provider.config().model_name, options.timestamp,
                      tpls.rationale.version, tpls.insertion.version};
      slots[i].sample = std::move(a);
    } catch (const ProviderError& e) {
      slots[i].failure = std::string("provider error: ") + e.what();
    }
  };

  const int workers = options.workers > 0 ? options.workers : provider.config().max_concurrent;
  parallel_for(pending.size(), workers, [&](std::size_t k) { work(pending[k]); });

  AugmentResult result;
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const auto& rec = dataset.records[i];
    Slot& slot = slots[i];
    if (slot.sample) {
      result.resumed += slot.resumed ? 1 : 0;
      result.augmented.records.push_back(*slot.sample);
      result.records.records.emplace_back(std::move(*slot.sample));
    } else {
      if (slot.failure) result.failures.push_back({rec.id, *slot.failure});
      result.rest.records.push_back(rec);
      result.records.records.emplace_back(rec);
    }
  }
  return result;
}

Dataset<TrainingRecord> mix_datasets(const Dataset<AugmentedSample>& augmented,
                                     const Dataset<InstructionSample>& rest,
                                     std::uint64_t shuffle_seed) {
  std::set<std::string> ids;
  Dataset<TrainingRecord> out;
  out.records.reserve(augmented.size() + rest.size());
  auto add = [&](const auto& r) {
    if (!ids.insert(record_id(r)).second) {
      throw UsageError("mix_datasets: id collision \"" + record_id(r) + "\"");
    }
    out.records.emplace_back(r);
  };
  for (const auto& r : augmented.records) add(r);
  for (const auto& r : rest.records) add(r);
  deterministic_shuffle(out.records, shuffle_seed);
  return out;
}

}  // namespace recritic
