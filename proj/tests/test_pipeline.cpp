#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "recritic/pipeline.hpp"
#include "recritic/selector.hpp"
#include "support.hpp"

using namespace recritic;
using testing::run_cli;
using testing::snapshot_tree;

namespace {

std::string fx(const std::string& name) { return testing::fixture(name).string(); }

std::string write_config(const testing::TempDir& dir, const Json& j, const std::string& name = "config.json") {
  const auto path = dir / name;
  write_text_file(path, j.dump(2));
  return path;
}

Json augment_config(std::size_t budget = 10) {
  return {{"seed", 7},
          {"datasets", {{"train", fx("train20.jsonl")}}},
          {"selection", {{"strategy", "random"}, {"budget", budget}}}};
}

std::string correctness_file(const testing::TempDir& dir) {
  const auto ds = load_dataset<InstructionSample>(fx("train20.jsonl"));
  std::string text;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    text += "{\"id\":\"" + ds.records[i].id + "\",\"correct\":" + (i % 4 == 0 ? "false" : "true") + "}\n";
  }
  write_text_file(dir / "correct.jsonl", text);
  return dir / "correct.jsonl";
}

}  // namespace

TEST_CASE("augment with the mock is byte-deterministic across output dirs") {
  testing::TempDir dir("augment");
  const auto cfg = write_config(dir, augment_config());
  const auto a = run_cli({"augment", "--config", cfg, "--mock", "--out", dir / "a"});
  const auto b = run_cli({"--mock", "augment", "--config", cfg, "--out", dir / "b"});
  CHECK(a.code == 0);
  CHECK(b.code == 0);
  CHECK(a.out.find("augmented 10 of 10") != std::string::npos);
  const auto ta = snapshot_tree(dir.path() / "a");
  const auto tb = snapshot_tree(dir.path() / "b");
  CHECK(ta == tb);
  for (const char* f : {"selected_ids.txt", "augmented.jsonl", "failures.jsonl", "train.jsonl",
                        "manifest-augment.json"}) {
    CHECK(ta.contains(f));
  }
  CHECK(testing::read_lines(dir / "a/augmented.jsonl").size() == 10);
  CHECK(testing::read_lines(dir / "a/train.jsonl").size() == 20);
  const auto aug = load_dataset<AugmentedSample>(dir / "a/augmented.jsonl");
  CHECK(validate(aug).empty());

  const auto manifest = Json::parse(ta.at("manifest-augment.json"));
  CHECK(manifest["subcommand"] == "augment");
  CHECK(manifest["mock"] == true);
  CHECK(manifest["counts"]["augmented"] == 10);
  CHECK(ta.at("manifest-augment.json").find("output_dir") == std::string::npos);

  SUBCASE("rerun resumes everything") {
    const auto again = run_cli({"augment", "--config", cfg, "--mock", "--out", dir / "a"});
    CHECK(again.code == 0);
    CHECK(again.out.find("10 resumed") != std::string::npos);
    CHECK(snapshot_tree(dir.path() / "a").at("augmented.jsonl") == ta.at("augmented.jsonl"));
  }
  SUBCASE("a different seed changes the selection") {
    const auto c = run_cli({"augment", "--config", cfg, "--mock", "--seed", "8", "--out", dir / "c"});
    CHECK(c.code == 0);
    CHECK(read_text_file(dir / "c/selected_ids.txt") != ta.at("selected_ids.txt"));
  }
}

TEST_CASE("augment input errors") {
  testing::TempDir dir("augment-err");
  auto j = augment_config();
  j["datasets"]["train"] = (dir.path() / "missing.jsonl").string();
  const auto cfg = write_config(dir, j);
  const auto r = run_cli({"augment", "--config", cfg, "--mock", "--out", dir / "o"});
  CHECK(r.code == 2);
  CHECK(r.err.find("missing.jsonl") != std::string::npos);

  const auto big = write_config(dir, augment_config(21), "big.json");
  CHECK(run_cli({"augment", "--config", big, "--mock", "--out", dir / "o"}).code == 2);

  auto unknown = augment_config();
  unknown["selection"]["budjet"] = 3;
  const auto u = run_cli({"augment", "--config", write_config(dir, unknown, "u.json"), "--mock"});
  CHECK(u.code == 2);
  CHECK(u.err.find("budjet") != std::string::npos);

  CHECK(run_cli({"augment", "--mock"}).code == 2);
  CHECK(run_cli({"frobnicate"}).code == 2);
  CHECK_FALSE(std::filesystem::exists(dir.path() / "o"));
}

TEST_CASE("augment without --mock needs a provider config") {
  testing::TempDir dir("augment-noprov");
  const auto cfg = write_config(dir, augment_config());
  const auto r = run_cli({"augment", "--config", cfg, "--out", dir / "o"});
  CHECK(r.code == 2);
  CHECK(r.err.find("providers.synthesizer") != std::string::npos);
}

TEST_CASE("dry run plans calls and writes nothing") {
  testing::TempDir dir("dry");
  const auto cfg = write_config(dir, augment_config());
  const auto r = run_cli({"augment", "--config", cfg, "--mock", "--dry-run", "--out", dir / "o"});
  CHECK(r.code == 0);
  CHECK(r.out.find("dry run: augment would make 10 provider calls") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(dir.path() / "o"));

  const auto p = run_cli({"pairs", "--config", fx("pairs10_config.json"), "--mock", "--dry-run",
                          "--out", dir / "p"});
  CHECK(p.code == 0);
  CHECK(p.out.find("40 provider calls") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(dir.path() / "p"));
}

TEST_CASE("pairs on the scripted fixture") {
  testing::TempDir dir("pairs");
  const auto r = run_cli({"pairs", "--config", fx("pairs10_config.json"), "--mock", "--out", dir / "o"});
  CHECK(r.code == 1);
  CHECK(r.out.find("built 8 preference pairs from 10 inputs (2 skipped") != std::string::npos);
  const auto pairs = load_dataset<PreferencePair>(dir / "o/pairs.jsonl");
  CHECK(pairs.size() == 8);
  CHECK(validate(pairs).empty());
  const auto skips = load_skip_report(dir / "o/pair_skips.jsonl");
  REQUIRE(skips.size() == 2);
  CHECK(skips[0].id == "p09");
  CHECK(skips[1].id == "p10");
  for (const auto& p : pairs.records) {
    CHECK(p.id != "p09");
    CHECK(p.id != "p10");
  }
  const auto first = snapshot_tree(dir.path() / "o");

  const auto again = run_cli({"pairs", "--config", fx("pairs10_config.json"), "--mock", "--out", dir / "o"});
  CHECK(again.code == 1);
  CHECK(again.out.find("10 resumed") != std::string::npos);
  CHECK(snapshot_tree(dir.path() / "o").at("pairs.jsonl") == first.at("pairs.jsonl"));

  const auto fresh = run_cli({"pairs", "--config", fx("pairs10_config.json"), "--mock", "--out", dir / "f"});
  CHECK(snapshot_tree(dir.path() / "f") == first);
}

TEST_CASE("dpo subcommand") {
  testing::TempDir dir("dpo");
  const auto ident = run_cli({"dpo", "--traces", fx("traces_identical.jsonl"), "--out", dir / "i"});
  CHECK(ident.code == 0);
  CHECK(ident.out.find("mean_loss 0.693147") != std::string::npos);
  CHECK(ident.out.find("pairs 2") != std::string::npos);

  const auto w = run_cli({"dpo", "--traces", fx("traces_worked.jsonl"), "--beta", "0.1",
                          "--check-grads", "--grads", "--out", dir / "w"});
  CHECK(w.code == 0);
  CHECK(w.out.find("mean_loss 0.513015") != std::string::npos);
  CHECK(w.out.find("gradient check passed") != std::string::npos);
  const auto summary = Json::parse(read_text_file(dir / "w/dpo_summary.json"));
  CHECK(summary["grad_check"]["passed"] == true);
  const auto rows = testing::read_lines(dir / "w/dpo_pairs.jsonl");
  REQUIRE(rows.size() == 1);
  CHECK(Json::parse(rows[0])["margin"].get<double>() == doctest::Approx(0.4));
  CHECK(std::filesystem::exists(dir.path() / "w/dpo_grads.jsonl"));
  CHECK(std::filesystem::exists(dir.path() / "w/manifest-dpo.json"));

  const auto broken = run_cli({"dpo", "--traces", fx("traces_missing_role.jsonl"), "--out", dir / "b"});
  CHECK(broken.code == 2);
  CHECK(broken.err.find("broken") != std::string::npos);

  CHECK(run_cli({"dpo", "--traces", fx("traces_worked.jsonl"), "--beta", "0", "--out", dir / "z"}).code == 2);
  CHECK(run_cli({"dpo", "--out", dir / "z"}).code == 2);
}

TEST_CASE("score subcommand") {
  testing::TempDir dir("score");
  const auto pope = run_cli({"score", "pope", "--input", fx("pope8.jsonl"), "--out", dir / "o"});
  CHECK(pope.code == 0);
  CHECK(pope.out.find("0.7500") != std::string::npos);
  CHECK(Json::parse(read_text_file(dir / "o/report-pope.json"))["accuracy"] == "0.7500");

  const auto obj = run_cli({"score", "objhal", "--input", fx("captions2.jsonl"), "--synonyms",
                            fx("synonyms.json"), "--out", dir / "o"});
  CHECK(obj.code == 0);
  const auto rep = Json::parse(read_text_file(dir / "o/report-objhal.json"));
  CHECK(rep["resp_rate"] == "0.5000");
  CHECK(rep["ment_rate"] == "0.3333");
  CHECK(std::filesystem::exists(dir.path() / "o/report-objhal.txt"));

  write_text_file(dir / "empty.jsonl", "");
  CHECK(run_cli({"score", "pope", "--input", dir / "empty.jsonl", "--out", dir / "e"}).code == 2);
  CHECK(run_cli({"score", "chair", "--input", fx("pope8.jsonl"), "--out", dir / "e"}).code == 2);
}

TEST_CASE("select subcommand") {
  testing::TempDir dir("select");
  const auto cfg = write_config(dir, augment_config(6));
  CHECK(run_cli({"select", "--config", cfg, "--out", dir / "a"}).code == 0);
  CHECK(run_cli({"select", "--config", cfg, "--out", dir / "b"}).code == 0);
  CHECK(read_text_file(dir / "a/selected_ids.txt") == read_text_file(dir / "b/selected_ids.txt"));
  CHECK(testing::read_lines(dir / "a/selected_ids.txt").size() == 6);

  SUBCASE("hard selection with mock embeddings") {
    auto j = augment_config(6);
    j["datasets"]["correctness"] = correctness_file(dir);
    j["selection"] = {{"strategy", "hard"}, {"budget", 6}, {"k_clusters", 3}};
    const auto hard = write_config(dir, j, "hard.json");
    const auto r = run_cli({"select", "--config", hard, "--mock", "--out", dir / "h"});
    CHECK(r.code == 0);
    const auto ids = testing::read_lines(dir / "h/selected_ids.txt");
    CHECK(ids.size() == 6);
    CHECK(std::filesystem::exists(dir.path() / "h/embeddings.bin"));
    const auto again = run_cli({"select", "--config", hard, "--mock", "--out", dir / "h"});
    CHECK(again.code == 0);
    CHECK(testing::read_lines(dir / "h/selected_ids.txt") == ids);
    const auto m = Json::parse(read_text_file(dir / "h/manifest-select.json"));
    CHECK(m["selection"]["embedding_dim"] == 16);

    // Oracle: recluster the cached embeddings, then redo top-k and the
    // difficulty order by hand.
    const auto emb = read_embedding_cache(dir / "h/embeddings.bin");
    const auto model = kmeans(emb, 3, derive_seed(7, "select"));
    const std::size_t k_per = 2;
    std::vector<double> hits(3, 0), seen(3, 0);
    for (std::size_t i = 0; i < emb.ids.size(); ++i) {
      const auto c = static_cast<std::size_t>(model.assignments[i]);
      seen[c] += 1;
      hits[c] += i % 4 == 0 ? 0 : 1;
    }
    struct Row {
      double acc;
      int cluster;
      double dist;
      std::string id;
    };
    std::vector<Row> pool;
    for (int c = 0; c < 3; ++c) {
      std::vector<Row> members;
      for (std::size_t i = 0; i < emb.ids.size(); ++i) {
        if (model.assignments[i] != c) continue;
        double d = 0;
        for (Eigen::Index j = 0; j < emb.dim(); ++j) {
          const double diff = emb.vectors(static_cast<Eigen::Index>(i), j) - model.centroids(c, j);
          d += diff * diff;
        }
        members.push_back({hits[static_cast<std::size_t>(c)] / seen[static_cast<std::size_t>(c)], c, d, emb.ids[i]});
      }
      std::sort(members.begin(), members.end(), [](const Row& a, const Row& b) {
        return a.dist != b.dist ? a.dist < b.dist : a.id < b.id;
      });
      for (std::size_t t = 0; t < std::min(k_per, members.size()); ++t) pool.push_back(members[t]);
    }
    std::sort(pool.begin(), pool.end(), [](const Row& a, const Row& b) {
      if (a.acc != b.acc) return a.acc < b.acc;
      if (a.cluster != b.cluster) return a.cluster < b.cluster;
      if (a.dist != b.dist) return a.dist < b.dist;
      return a.id < b.id;
    });
    std::vector<std::string> expect;
    for (std::size_t t = 0; t < std::min<std::size_t>(6, pool.size()); ++t) expect.push_back(pool[t].id);
    CHECK(ids == expect);

    j.erase("datasets");
    j["datasets"] = {{"train", fx("train20.jsonl")}};
    const auto r2 = run_cli({"select", "--config", write_config(dir, j, "h2.json"), "--mock",
                             "--out", dir / "h2"});
    CHECK(r2.code == 2);
    CHECK(r2.err.find("correctness") != std::string::npos);
  }
  SUBCASE("budget zero") {
    const auto zero = write_config(dir, augment_config(0), "zero.json");
    CHECK(run_cli({"select", "--config", zero, "--out", dir / "z"}).code == 0);
    CHECK(read_text_file(dir / "z/selected_ids.txt").empty());
  }
}

TEST_CASE("inputs are never modified") {
  const std::vector<std::string> inputs = {fx("train20.jsonl"), fx("augmented10.jsonl"),
                                           fx("pairs10_script.json"), fx("pairs10_config.json")};
  std::vector<std::string> before;
  for (const auto& p : inputs) before.push_back(read_text_file(p));
  testing::TempDir dir("inputs");
  const auto cfg = write_config(dir, augment_config());
  run_cli({"augment", "--config", cfg, "--mock", "--out", dir / "a"});
  run_cli({"pairs", "--config", fx("pairs10_config.json"), "--mock", "--out", dir / "a"});
  for (std::size_t i = 0; i < inputs.size(); ++i) CHECK(read_text_file(inputs[i]) == before[i]);
  CHECK_FALSE(std::filesystem::exists(testing::fixture("out")));
}

TEST_CASE("version flag") {
  const auto r = run_cli({"--version"});
  CHECK(r.code == 0);
  CHECK(r.out.find("recritic") != std::string::npos);
}
