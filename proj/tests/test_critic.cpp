#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "recritic/critic.hpp"
#include "support.hpp"

using namespace recritic;

namespace {

Dataset<AugmentedSample> augmented10() {
  return load_dataset<AugmentedSample>(testing::fixture("augmented10.jsonl").string());
}

CriticInput input(std::string id = "q1") {
  return {std::move(id), "img.jpg", "Hint: look at the ball.\nWhat color is the ball?"};
}

}  // namespace

TEST_CASE("verdict grammar") {
  CHECK(parse_verdict("A is vague about the colour; therefore Better: B") == Winner::B);
  CHECK(parse_verdict("better: a") == Winner::A);
  CHECK(parse_verdict("BETTER:B") == Winner::B);
  CHECK(parse_verdict("**Better:** A") == Winner::A);
  CHECK(parse_verdict("Better: A at first glance.\nOn reflection, Better: B") == Winner::B);
  CHECK(parse_verdict("Better: Apple") == Winner::unparseable);
  CHECK(parse_verdict("Response A is better.") == Winner::unparseable);
  CHECK(parse_verdict("") == Winner::unparseable);
  CHECK(to_string(Winner::tie) == "tie");
}

TEST_CASE("default critic template names both criteria") {
  const auto t = CriticPromptTemplate::default_template();
  CHECK_NOTHROW(t.validate());
  CHECK(t.text.find(kImageCriterion) != std::string::npos);
  CHECK(t.text.find(kReasoningCriterion) != std::string::npos);
  for (const char* word : {"objects", "attributes", "relationships", "step"}) {
    CHECK(t.text.find(word) != std::string::npos);
  }
  auto bad = t;
  bad.text = "Which is better? {question} {response_a} {response_b}";
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = t;
  bad.text += "{response_a}";
  CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("sample_candidates") {
  SUBCASE("two distinct scripted strings come back in call order") {
    MockProvider m(1, {{"candidate:q1", {"first answer", "second answer"}}});
    const auto c = sample_candidates(m, input(), 2, 0.9, 7);
    REQUIRE(c);
    CHECK(*c == std::vector<std::string>{"first answer", "second answer"});
  }
  SUBCASE("persistent duplicates skip the sample") {
    MockProvider m(1, {{"candidate:q1", {"same", "same", "same", "same", "same"}}});
    CHECK_FALSE(sample_candidates(m, input(), 2, 0.9, 7));
    CHECK(m.chat_calls("candidate:q1") == 2 + kDuplicateResamples);
  }
  SUBCASE("a duplicate resolved by resampling") {
    MockProvider m(1, {{"candidate:q1", {"same", "same", "same", "different"}}});
    const auto c = sample_candidates(m, input(), 2, 0.9, 7);
    REQUIRE(c);
    CHECK((*c)[1] == "different");
  }
  SUBCASE("unscripted mock candidates differ by sample seed") {
    MockProvider m(1);
    const auto c = sample_candidates(m, input(), 3, 1.0, 7);
    REQUIRE(c);
    CHECK(c->size() == 3);
    CHECK(sample_candidates(m, input(), 3, 1.0, 7) == c);
  }
  MockProvider m(1);
  CHECK_THROWS_AS(sample_candidates(m, input(), 1, 1.0, 7), UsageError);
}

TEST_CASE("judge runs both orders") {
  const auto tpl = CriticPromptTemplate::default_template();
  SUBCASE("agreement names the winner") {
    MockProvider m(1, {{"critic:q1", {"Better: A", "Better: B"}}});
    const auto v = judge(m, input(), "good", "bad", tpl);
    CHECK(v.winner == Winner::A);
    CHECK(v.swapped_run_winner == Winner::A);
    CHECK(v.raw_text == "Better: A");
    CHECK(v.swapped_raw_text == "Better: B");
    CHECK(m.chat_calls("critic:q1") == 2);
  }
  SUBCASE("position preference is a tie") {
    MockProvider m(1, {{"critic:q1", {"Better: A", "Better: A"}}});
    CHECK(judge(m, input(), "x", "y", tpl).winner == Winner::tie);
  }
  SUBCASE("an unparseable run makes the verdict unparseable") {
    MockProvider m(1, {{"critic:q1", {"Better: B", "I cannot decide."}}});
    CHECK(judge(m, input(), "x", "y", tpl).winner == Winner::unparseable);
  }
  SUBCASE("identical responses are a precondition error") {
    MockProvider m(1);
    CHECK_THROWS_AS(judge(m, input(), "x", "x", tpl), Error);
  }
}

TEST_CASE("order-swap symmetry: decisive verdicts pick the same text either way") {
  const auto tpl = CriticPromptTemplate::default_template();
  const char* verdicts[] = {"Better: A", "Better: B", "no idea"};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      MockProvider forward(1, {{"critic:q1", {verdicts[i], verdicts[j]}}});
      MockProvider backward(1, {{"critic:q1", {verdicts[j], verdicts[i]}}});
      const auto v1 = judge(forward, input(), "alpha", "beta", tpl);
      const auto v2 = judge(backward, input(), "beta", "alpha", tpl);
      const bool p1 = v1.winner == Winner::unparseable;
      const bool p2 = v2.winner == Winner::unparseable;
      CHECK(p1 == p2);
      if ((v1.winner == Winner::A || v1.winner == Winner::B) &&
          (v2.winner == Winner::A || v2.winner == Winner::B)) {
        const std::string w1 = v1.winner == Winner::A ? "alpha" : "beta";
        const std::string w2 = v2.winner == Winner::A ? "beta" : "alpha";
        CHECK(w1 == w2);
      }
    }
  }
}

TEST_CASE("10-input fixture: 8 pairs and a 2-entry skip report") {
  const auto inputs = augmented10();
  const auto script = load_mock_script(testing::fixture("pairs10_script.json").string());
  MockProvider m(3, script);
  CriticOptions opts;
  opts.temperature = 0.8;
  opts.seed = 5;
  const auto r = build_preference_dataset(m, inputs, CriticPromptTemplate::default_template(), opts);
  CHECK(r.pairs.size() == 8);
  REQUIRE(r.skips.size() == 2);
  CHECK(r.skips[0] == SkipEntry{"p09", "tie: order-swapped verdicts disagree"});
  CHECK(r.skips[1] == SkipEntry{"p10", "duplicate candidates"});
  CHECK(validate(r.pairs).empty());
  for (const auto& p : r.pairs.records) {
    CHECK(p.chosen != p.rejected);
    CHECK(p.verdict_meta.temperature == 0.8);
    CHECK(p.verdict_meta.judge_model == "mock");
    CHECK(p.verdict_meta.tie_resolution == "decisive: both orders agree");
  }
  // Odd fixture ids prefer the first-sampled candidate, even ids the second.
  CHECK_FALSE(r.pairs.records[0].verdict_meta.order_swapped);
  CHECK(r.pairs.records[1].verdict_meta.order_swapped);

  testing::TempDir dir("pairs");
  write_dataset(r.pairs, dir / "a.jsonl");

  SUBCASE("rerun with the same seed is byte-identical") {
    MockProvider again(3, script);
    const auto r2 =
        build_preference_dataset(again, inputs, CriticPromptTemplate::default_template(), opts);
    write_dataset(r2.pairs, dir / "b.jsonl");
    CHECK(read_text_file(dir / "a.jsonl") == read_text_file(dir / "b.jsonl"));
  }
  SUBCASE("resume makes zero calls") {
    MockProvider again(3, script);
    CriticOptions resume = opts;
    resume.existing_pairs = &r.pairs;
    resume.existing_skips = &r.skips;
    const auto r2 =
        build_preference_dataset(again, inputs, CriticPromptTemplate::default_template(), resume);
    CHECK(again.chat_calls() == 0);
    CHECK(r2.resumed == 10);
    CHECK(r2.pairs == r.pairs);
    CHECK(r2.skips == r.skips);
  }
}

TEST_CASE("a judge that flips with order yields no pairs") {
  const auto inputs = augmented10();
  MockScript script;
  for (const auto& a : inputs.records) script["critic:" + a.base.id] = {"Better: A"};
  MockProvider m(3, script);
  const auto r = build_preference_dataset(m, inputs, CriticPromptTemplate::default_template(), {});
  CHECK(r.pairs.empty());
  CHECK(r.skips.size() == inputs.size());
  for (const auto& s : r.skips) CHECK(s.reason.starts_with("tie"));
}

TEST_CASE("separate judge provider and provider errors") {
  const auto inputs = augmented10();
  MockProvider target(3, {{"candidate:p02", {"!status:401"}}});
  target.set_sleeper([](std::chrono::duration<double>) {});
  MockScript judge_script;
  for (const auto& a : inputs.records) judge_script["critic:" + a.base.id] = {"Better: B", "Better: A"};
  ProviderConfig jc = MockProvider::default_config();
  jc.model_name = "judge-mock";
  MockProvider judge_provider(4, judge_script, jc);
  CriticOptions opts;
  opts.judge = &judge_provider;
  const auto r =
      build_preference_dataset(target, inputs, CriticPromptTemplate::default_template(), opts);
  CHECK(r.pairs.size() == 9);
  REQUIRE(r.skips.size() == 1);
  CHECK(r.skips[0].id == "p02");
  CHECK(r.skips[0].reason.starts_with("provider error"));
  CHECK(target.chat_calls("critic:p01") == 0);
  CHECK(judge_provider.chat_calls("critic:p01") == 2);
  for (const auto& p : r.pairs.records) {
    CHECK(p.verdict_meta.judge_model == "judge-mock");
    CHECK(p.verdict_meta.order_swapped);
  }
}
