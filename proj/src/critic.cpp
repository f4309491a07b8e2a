#include "recritic/critic.hpp"

#include <algorithm>
#include <regex>
#include <unordered_map>

#include "recritic/parallel.hpp"
#include "recritic/synthesizer.hpp"

namespace recritic {

void CriticPromptTemplate::validate() const {
  require_placeholders_once(text, {"question", "response_a", "response_b"},
                            "critic prompt template");
  for (auto name : {kImageCriterion, kReasoningCriterion}) {
    if (text.find(name) == std::string::npos) {
      throw UsageError("critic prompt template must name the criterion \"" +
                       std::string(name) + "\"");
    }
  }
}

CriticPromptTemplate CriticPromptTemplate::default_template() {
  CriticPromptTemplate t;
  t.text =
      "You wrote two candidate answers to the same image and question. Decide "
      "which one is better.\n"
      "\n"
      "Question: {question}\n"
      "\n"
      "[Response A]\n"
      "{response_a}\n"
      "\n"
      "[Response B]\n"
      "{response_b}\n"
      "\n"
      "Use two criteria.\n"
      "1. Image Content Understanding: check that each response describes the "
      "image correctly at every level, covering the objects present, their "
      "attributes and the relationships between objects. Anything the image "
      "does not support is an error.\n"
      "2. Comprehensive Contextual Reasoning: compare how well each response "
      "uses the context of the question. When a response reasons in steps, "
      "check each step on its own; a correct final answer reached through a "
      "wrong intermediate step still counts against the response.\n"
      "\n"
      "Give a short comparison, then end with exactly one line: \"Better: A\" "
      "or \"Better: B\".";
  t.version = "critic-v1";
  return t;
}

std::string_view to_string(Winner w) {
  switch (w) {
    case Winner::A: return "A";
    case Winner::B: return "B";
    case Winner::tie: return "tie";
    case Winner::unparseable: return "unparseable";
  }
  return "unparseable";
}

Winner parse_verdict(std::string_view text) {
  static const std::regex kPattern(R"(better\s*:\s*\**\s*([ab])\b)",
                                   std::regex::icase | std::regex::ECMAScript);
  Winner found = Winner::unparseable;
  const std::string s(text);
  for (auto it = std::sregex_iterator(s.begin(), s.end(), kPattern);
       it != std::sregex_iterator(); ++it) {
    const char c = (*it)[1].str()[0];
    found = (c == 'a' || c == 'A') ? Winner::A : Winner::B;
  }
  return found;
}

CriticInput critic_input(const AugmentedSample& sample) {
  return {sample.base.id, sample.base.image_ref, sample.augmented_question};
}

ChatRequest candidate_request(const CriticInput& input, double temperature,
                              std::uint64_t sample_seed) {
  ChatRequest req;
  req.tag = "candidate:" + input.id;
  req.temperature = temperature;
  req.seed = sample_seed;
  ChatMessage user{"user", input.augmented_question, std::nullopt};
  if (!input.image_ref.empty()) user.image_ref = input.image_ref;
  req.messages.push_back(std::move(user));
  return req;
}

std::optional<std::vector<std::string>> sample_candidates(
    Provider& provider, const CriticInput& input, int n, double temperature,
    std::uint64_t seed) {
  if (n < 2) throw UsageError("sample_candidates: n must be >= 2");
  const std::uint64_t base = splitmix64(seed ^ fnv1a64(input.id));
  std::uint64_t draws = 0;
  auto draw = [&] {
    return provider.chat(candidate_request(input, temperature, base + draws++)).text;
  };
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) {
    std::string text = draw();
    auto duplicate = [&] { return std::find(out.begin(), out.end(), text) != out.end(); };
    for (int r = 0; r < kDuplicateResamples && duplicate(); ++r) text = draw();
    if (duplicate()) return std::nullopt;
    out.push_back(std::move(text));
  }
  return out;
}

namespace {

ChatRequest critic_request(const CriticInput& input, const std::string& first,
                           const std::string& second, const CriticPromptTemplate& tpl) {
  ChatRequest req;
  req.tag = "critic:" + input.id;
  req.temperature = 0.0;
  ChatMessage user;
  user.role = "user";
  user.text = render_template(tpl.text, {{"question", input.augmented_question},
                                         {"response_a", first},
                                         {"response_b", second}});
  if (!input.image_ref.empty()) user.image_ref = input.image_ref;
  req.messages.push_back(std::move(user));
  return req;
}

Winner flip(Winner w) {
  if (w == Winner::A) return Winner::B;
  if (w == Winner::B) return Winner::A;
  return w;
}

}  // namespace

Verdict judge(Provider& provider, const CriticInput& input, const std::string& resp_a,
              const std::string& resp_b, const CriticPromptTemplate& tpl) {
  if (resp_a == resp_b) throw Error("judge: responses are identical");
  tpl.validate();
  Verdict v;
  v.raw_text = provider.chat(critic_request(input, resp_a, resp_b, tpl)).text;
  v.swapped_raw_text = provider.chat(critic_request(input, resp_b, resp_a, tpl)).text;
  const Winner first = parse_verdict(v.raw_text);
  const Winner second = flip(parse_verdict(v.swapped_raw_text));
  v.swapped_run_winner = second;
  if (first == Winner::unparseable || second == Winner::unparseable) {
    v.winner = Winner::unparseable;
  } else {
    v.winner = first == second ? first : Winner::tie;
  }
  return v;
}

PreferenceResult build_preference_dataset(Provider& provider,
                                          const Dataset<AugmentedSample>& inputs,
                                          const CriticPromptTemplate& tpl,
                                          const CriticOptions& options) {
  tpl.validate();
  if (const auto bad = validate(inputs); !bad.empty()) {
    throw UsageError("critic input \"" + bad.front().id +
                     "\" violates: " + bad.front().invariant);
  }
  Provider& judge_provider = options.judge != nullptr ? *options.judge : provider;

  std::unordered_map<std::string, const PreferencePair*> old_pairs;
  std::unordered_map<std::string, const SkipEntry*> old_skips;
  if (options.existing_pairs != nullptr) {
    for (const auto& p : options.existing_pairs->records) old_pairs.emplace(p.id, &p);
  }
  if (options.existing_skips != nullptr) {
    for (const auto& s : *options.existing_skips) old_skips.emplace(s.id, &s);
  }

  struct Slot {
    std::optional<PreferencePair> pair;
    std::optional<SkipEntry> skip;
    bool resumed = false;
  };
  std::vector<Slot> slots(inputs.records.size());
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < inputs.records.size(); ++i) {
    const std::string& id = inputs.records[i].base.id;
    if (const auto p = old_pairs.find(id); p != old_pairs.end()) {
      slots[i].pair = *p->second;
      slots[i].resumed = true;
    } else if (const auto s = old_skips.find(id); s != old_skips.end()) {
      slots[i].skip = *s->second;
      slots[i].resumed = true;
    } else {
      pending.push_back(i);
    }
  }

  auto work = [&](std::size_t i) {
    const CriticInput input = critic_input(inputs.records[i]);
    Slot& slot = slots[i];
    try {
      const auto candidates =
          sample_candidates(provider, input, 2, options.temperature, options.seed);
      if (!candidates) {
        slot.skip = SkipEntry{input.id, "duplicate candidates"};
        return;
      }
      const auto& a = (*candidates)[0];
      const auto& b = (*candidates)[1];
      const Verdict v = judge(judge_provider, input, a, b, tpl);
      if (v.winner == Winner::tie) {
        slot.skip = SkipEntry{input.id, "tie: order-swapped verdicts disagree"};
        return;
      }
      if (v.winner == Winner::unparseable) {
        slot.skip = SkipEntry{input.id, "unparseable verdict"};
        return;
      }
      PreferencePair p;
      p.id = input.id;
      p.image_ref = input.image_ref;
      p.augmented_question = input.augmented_question;
      p.chosen = v.winner == Winner::A ? a : b;
      p.rejected = v.winner == Winner::A ? b : a;
      p.verdict_meta.critic_raw = v.raw_text;
      p.verdict_meta.critic_raw_swapped = v.swapped_raw_text;
      p.verdict_meta.order_swapped = v.winner == Winner::B;
      p.verdict_meta.tie_resolution = "decisive: both orders agree";
      p.verdict_meta.temperature = options.temperature;
      p.verdict_meta.judge_model = judge_provider.config().model_name;
      p.verdict_meta.seed = options.seed;
      slot.pair = std::move(p);
    } catch (const ProviderError& e) {
      slot.skip = SkipEntry{input.id, std::string("provider error: ") + e.what()};
    }
  };

  const int workers = options.workers > 0 ? options.workers : provider.config().max_concurrent;
  parallel_for(pending.size(), workers, [&](std::size_t k) { work(pending[k]); });

  PreferenceResult result;
  for (auto& slot : slots) {
    result.resumed += slot.resumed ? 1 : 0;
    if (slot.pair) result.pairs.records.push_back(std::move(*slot.pair));
    if (slot.skip) result.skips.push_back(std::move(*slot.skip));
  }
  return result;
}

}  // namespace recritic
