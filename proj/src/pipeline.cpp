#include "recritic/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <map>
#include <memory>
#include <set>

#include "recritic/critic.hpp"
#include "recritic/dpo.hpp"
#include "recritic/metrics.hpp"
#include "recritic/selector.hpp"
#include "recritic/synthesizer.hpp"

namespace recritic {

namespace fs = std::filesystem;

std::string_view to_string(SelectionStrategy s) {
  return s == SelectionStrategy::hard ? "hard" : "random";
}

SelectionStrategy parse_selection_strategy(std::string_view s) {
  if (s == "random") return SelectionStrategy::random;
  if (s == "hard") return SelectionStrategy::hard;
  throw UsageError("selection strategy must be \"random\" or \"hard\", got \"" +
                   std::string(s) + "\"");
}

namespace {

void reject_unknown_keys(const Json& j, std::initializer_list<std::string_view> known,
                         const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw UsageError(where + ": unknown key \"" + key + "\"");
    }
  }
}

const Json& section(const Json& j, const char* name) {
  static const Json kEmpty = Json::object();
  if (!j.contains(name)) return kEmpty;
  if (!j[name].is_object()) {
    throw UsageError(std::string("config: \"") + name + "\" must be an object");
  }
  return j[name];
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const Json& j, fs::path base_dir) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  reject_unknown_keys(j,
                      {"seed", "output_dir", "providers", "datasets", "selection",
                       "templates", "dpo", "critic", "workers", "mock_script"},
                      "config");
  PipelineConfig c;
  c.base_dir = std::move(base_dir);
  try {
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.mock_script_path = j.value("mock_script", c.mock_script_path);
    if (j.contains("output_dir")) c.output_dir = c.resolve(j["output_dir"].get<std::string>());

    const Json& providers = section(j, "providers");
    reject_unknown_keys(providers, {"synthesizer", "target", "judge", "embedder"},
                        "config.providers");
    auto provider = [&](const char* name, std::optional<ProviderConfig>& slot) {
      if (!providers.contains(name)) return;
      try {
        slot = ProviderConfig::from_json(providers[name]);
      } catch (const UsageError& e) {
        throw UsageError(std::string("config.providers.") + name + ": " + e.what());
      }
    };
    provider("synthesizer", c.synthesizer);
    provider("target", c.target);
    provider("judge", c.judge);
    provider("embedder", c.embedder);

    const Json& datasets = section(j, "datasets");
    reject_unknown_keys(datasets, {"train", "correctness", "augmented"}, "config.datasets");
    c.train_path = datasets.value("train", "");
    c.correctness_path = datasets.value("correctness", "");
    c.augmented_path = datasets.value("augmented", "");

    const Json& sel = section(j, "selection");
    reject_unknown_keys(sel, {"strategy", "budget", "k_clusters", "k_per", "max_iter"},
                        "config.selection");
    c.selection.strategy = parse_selection_strategy(sel.value("strategy", "random"));
    if (sel.contains("budget")) {
      if (!sel["budget"].is_number_integer() || sel["budget"].get<long long>() < 0) {
        throw UsageError("config.selection.budget must be an integer >= 0");
      }
      c.selection.budget = sel["budget"].get<std::size_t>();
    }
    c.selection.k_clusters = sel.value("k_clusters", c.selection.k_clusters);
    c.selection.k_per = sel.value("k_per", c.selection.k_per);
    c.selection.max_iter = sel.value("max_iter", c.selection.max_iter);

    const Json& tpl = section(j, "templates");
    reject_unknown_keys(tpl, {"rationale", "insertion", "critic", "insertion_layout"},
                        "config.templates");
    c.rationale_template_path = tpl.value("rationale", "");
    c.insertion_template_path = tpl.value("insertion", "");
    c.critic_template_path = tpl.value("critic", "");
    c.insertion_layout = tpl.value("insertion_layout", c.insertion_layout);
    parse_insertion_layout(c.insertion_layout);

    const Json& dpo = section(j, "dpo");
    reject_unknown_keys(dpo, {"beta", "per_token_mean"}, "config.dpo");
    c.beta = dpo.value("beta", c.beta);
    c.per_token_mean = dpo.value("per_token_mean", c.per_token_mean);

    const Json& critic = section(j, "critic");
    reject_unknown_keys(critic, {"temperature"}, "config.critic");
    c.critic_temperature = critic.value("temperature", c.critic_temperature);
  } catch (const Json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  if (c.workers < 0) throw UsageError("config.workers must be >= 0");
  if (c.selection.k_clusters < 1) throw UsageError("config.selection.k_clusters must be >= 1");
  if (c.selection.max_iter < 1) throw UsageError("config.selection.max_iter must be >= 1");
  if (!(c.critic_temperature >= 0.0)) throw UsageError("config.critic.temperature must be >= 0");
  DpoConfig{c.beta, c.per_token_mean}.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  Json j;
  try {
    j = Json::parse(read_text_file(path));
  } catch (const Json::parse_error& e) {
    throw UsageError(path + ": malformed JSON: " + e.what());
  }
  try {
    return from_json(j, fs::path(path).parent_path());
  } catch (const UsageError& e) {
    throw UsageError(path + ": " + e.what());
  }
}

OrderedJson PipelineConfig::to_json() const {
  OrderedJson j = OrderedJson::object();
  j["seed"] = seed;
  OrderedJson providers = OrderedJson::object();
  if (synthesizer) providers["synthesizer"] = synthesizer->to_json();
  if (target) providers["target"] = target->to_json();
  if (judge) providers["judge"] = judge->to_json();
  if (embedder) providers["embedder"] = embedder->to_json();
  j["providers"] = std::move(providers);
  j["datasets"] = {{"train", train_path},
                   {"correctness", correctness_path},
                   {"augmented", augmented_path}};
  j["selection"] = {{"strategy", std::string(recritic::to_string(selection.strategy))},
                    {"budget", selection.budget},
                    {"k_clusters", selection.k_clusters},
                    {"k_per", selection.k_per},
                    {"max_iter", selection.max_iter}};
  j["templates"] = {{"rationale", rationale_template_path},
                    {"insertion", insertion_template_path},
                    {"critic", critic_template_path},
                    {"insertion_layout", insertion_layout}};
  j["dpo"] = {{"beta", beta}, {"per_token_mean", per_token_mean}};
  j["critic"] = {{"temperature", critic_temperature}};
  j["workers"] = workers;
  j["mock_script"] = mock_script_path;
  return j;
}

std::string PipelineConfig::resolve(const std::string& path) const {
  if (path.empty()) return path;
  const fs::path p(path);
  return p.is_absolute() ? p.string() : (base_dir / p).lexically_normal().string();
}

std::string run_timestamp(bool mock) {
  std::time_t t = 0;
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch != nullptr && *epoch) {
    try {
      t = static_cast<std::time_t>(std::stoll(epoch));
    } catch (const std::exception&) {
      throw UsageError("SOURCE_DATE_EPOCH must be an integer");
    }
  } else if (!mock) {
    t = std::time(nullptr);
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

std::ostream& out_of(const RunContext& ctx) { return ctx.out ? *ctx.out : std::cout; }
std::ostream& err_of(const RunContext& ctx) { return ctx.err ? *ctx.err : std::cerr; }

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError("config: " + what + " path is not set");
  if (!fs::is_regular_file(path)) throw UsageError(what + " not found: " + path);
}

std::string file_digest(const std::string& path) {
  return hex64(fnv1a64(read_text_file(path)));
}

fs::path prepare_output_dir(const PipelineConfig& cfg) {
  const fs::path dir(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

OrderedJson manifest_base(const RunContext& ctx, std::string_view subcommand) {
  const OrderedJson cfg = ctx.config.to_json();
  OrderedJson m = OrderedJson::object();
  m["tool"] = "recritic";
  m["tool_version"] = std::string(kToolVersion);
  m["subcommand"] = std::string(subcommand);
  m["schema_version"] = kSchemaVersion;
  m["config_hash"] = hex64(fnv1a64(dump_line(cfg)));
  m["config"] = cfg;
  m["mock"] = ctx.mock;
  return m;
}

void write_manifest(const fs::path& dir, std::string_view subcommand, const OrderedJson& m) {
  write_text_file((dir / ("manifest-" + std::string(subcommand) + ".json")).string(),
                  m.dump(2, ' ', false, OrderedJson::error_handler_t::strict) + "\n");
}

/// Providers for one run. Under --mock every role shares one scripted mock.
class ProviderPool {
 public:
  explicit ProviderPool(const RunContext& ctx) : ctx_(ctx) {
    if (!ctx.mock) return;
    MockScript script;
    if (!ctx.config.mock_script_path.empty()) {
      script = load_mock_script(ctx.config.resolve(ctx.config.mock_script_path));
    }
    mock_ = std::make_unique<MockProvider>(derive_seed(ctx.config.seed, "mock"),
                                           std::move(script));
    mock_->set_sleeper([](std::chrono::duration<double>) {});
  }

  Provider& get(const std::string& role, const std::optional<ProviderConfig>& cfg) {
    if (mock_) return *mock_;
    if (!cfg) throw UsageError("config: providers." + role + " is required");
    auto& slot = http_[role];
    if (!slot) slot = std::make_unique<HttpProvider>(*cfg);
    return *slot;
  }

  /// Fails early, before anything is written, when a role has no config.
  void require(const std::string& role, const std::optional<ProviderConfig>& cfg) const {
    if (!mock_ && !cfg) throw UsageError("config: providers." + role + " is required");
  }

  Provider& judge() {
    if (mock_ || ctx_.config.judge) return get("judge", ctx_.config.judge);
    return get("target", ctx_.config.target);
  }

 private:
  const RunContext& ctx_;
  std::unique_ptr<MockProvider> mock_;
  std::map<std::string, std::unique_ptr<Provider>> http_;
};

SynthesisTemplates load_synthesis_templates(const PipelineConfig& cfg) {
  SynthesisTemplates t;
  if (!cfg.rationale_template_path.empty()) {
    const auto f = load_template_file(cfg.resolve(cfg.rationale_template_path));
    t.rationale.text = f.text;
    t.rationale.version = f.version;
  }
  t.rationale.validate();
  if (!cfg.insertion_template_path.empty()) {
    const auto f = load_template_file(cfg.resolve(cfg.insertion_template_path));
    t.insertion = InsertionTemplate::from_text(f.text, f.version);
  } else {
    t.insertion = InsertionTemplate::for_layout(parse_insertion_layout(cfg.insertion_layout));
  }
  t.insertion.validate();
  return t;
}

CriticPromptTemplate load_critic_template(const PipelineConfig& cfg) {
  CriticPromptTemplate t = CriticPromptTemplate::default_template();
  if (!cfg.critic_template_path.empty()) {
    const auto f = load_template_file(cfg.resolve(cfg.critic_template_path));
    t.text = f.text;
    t.version = f.version;
  }
  t.validate();
  return t;
}

Dataset<InstructionSample> load_train(const PipelineConfig& cfg) {
  const std::string path = cfg.resolve(cfg.train_path);
  require_file(path, "training dataset");
  auto ds = load_dataset<InstructionSample>(path);
  if (const auto bad = validate(ds); !bad.empty()) {
    throw UsageError(path + ": record \"" + bad.front().id +
                     "\" violates: " + bad.front().invariant);
  }
  return ds;
}

void check_selection(const PipelineConfig& cfg, const Dataset<InstructionSample>& ds) {
  if (cfg.selection.budget > ds.records.size()) {
    throw UsageError("selection budget " + std::to_string(cfg.selection.budget) +
                     " exceeds dataset size " + std::to_string(ds.records.size()));
  }
  if (cfg.selection.strategy == SelectionStrategy::hard) {
    if (cfg.correctness_path.empty()) throw UsageError("hard selection needs datasets.correctness");
    require_file(cfg.resolve(cfg.correctness_path), "correctness file");
  }
}

std::vector<std::string> ids_of(const Dataset<InstructionSample>& ds) {
  std::vector<std::string> ids;
  ids.reserve(ds.records.size());
  for (const auto& r : ds.records) ids.push_back(r.id);
  return ids;
}

constexpr std::size_t kEmbedBatch = 256;

std::size_t embed_batches(std::size_t n) { return (n + kEmbedBatch - 1) / kEmbedBatch; }

/// Question embeddings, reusing <out>/embeddings.bin when its ids match.
/// Values are rounded to float32 either way, so a cached rerun sees exactly
/// the numbers the first run clustered.
EmbeddingMatrix<double> question_embeddings(Provider& embedder,
                                            const Dataset<InstructionSample>& ds,
                                            const fs::path& cache_path, bool& cache_hit) {
  const auto ids = ids_of(ds);
  if (fs::is_regular_file(cache_path)) {
    try {
      auto cached = read_embedding_cache(cache_path.string());
      if (cached.ids == ids) {
        cache_hit = true;
        return cached;
      }
    } catch (const Error&) {
      // Stale or foreign cache; rebuild below.
    }
  }
  cache_hit = false;
  EmbeddingMatrix<double> emb;
  emb.ids = ids;
  std::vector<std::string> texts;
  texts.reserve(ds.records.size());
  for (const auto& r : ds.records) texts.push_back(r.question);
  for (std::size_t start = 0; start < texts.size(); start += kEmbedBatch) {
    const std::size_t len = std::min(kEmbedBatch, texts.size() - start);
    const Eigen::MatrixXd block =
        embedder.embed(std::span<const std::string>(texts).subspan(start, len));
    if (start == 0) emb.vectors.resize(static_cast<Eigen::Index>(texts.size()), block.cols());
    if (block.cols() != emb.vectors.cols()) {
      throw Error("embedder returned vectors of inconsistent dimension");
    }
    emb.vectors.middleRows(static_cast<Eigen::Index>(start), block.rows()) = block;
  }
  emb.vectors = emb.vectors.cast<float>().cast<double>();
  write_embedding_cache(emb, cache_path.string());
  return emb;
}

struct SelectionOutcome {
  std::vector<std::string> ids;
  OrderedJson provenance;
};

SelectionOutcome select_ids(ProviderPool& pool, const PipelineConfig& cfg,
                            const Dataset<InstructionSample>& ds, const fs::path& out_dir) {
  const auto& sel = cfg.selection;
  const std::uint64_t seed = derive_seed(cfg.seed, "select");
  SelectionOutcome out;
  out.provenance = OrderedJson::object();
  out.provenance["strategy"] = std::string(to_string(sel.strategy));
  out.provenance["budget"] = sel.budget;
  out.provenance["seed"] = seed;
  if (sel.budget > ds.records.size()) {
    throw UsageError("selection budget " + std::to_string(sel.budget) +
                     " exceeds dataset size " + std::to_string(ds.records.size()));
  }
  if (sel.strategy == SelectionStrategy::random) {
    out.ids = random_select(ids_of(ds), sel.budget, seed);
    return out;
  }

  const std::string correctness = cfg.resolve(cfg.correctness_path);
  if (correctness.empty()) {
    throw UsageError("hard selection needs datasets.correctness");
  }
  require_file(correctness, "correctness file");
  const DifficultyTable table = load_correctness(correctness);
  out.provenance["correctness_fnv1a64"] = file_digest(correctness);
  out.provenance["k_clusters"] = sel.k_clusters;
  out.provenance["max_iter"] = sel.max_iter;
  if (sel.budget == 0) return out;

  bool cache_hit = false;
  const auto emb = question_embeddings(pool.get("embedder", cfg.embedder), ds,
                                       out_dir / "embeddings.bin", cache_hit);
  HardSelectOptions opts;
  opts.k_clusters = sel.k_clusters;
  opts.k_per = sel.k_per;
  opts.max_iter = sel.max_iter;
  auto hs = hard_select(emb, table, sel.budget, seed, opts);
  out.ids = std::move(hs.ids);
  out.provenance["k_per"] = opts.k_per > 0
                                ? opts.k_per
                                : (sel.budget + static_cast<std::size_t>(sel.k_clusters) - 1) /
                                      static_cast<std::size_t>(sel.k_clusters);
  out.provenance["pool_size"] = hs.pool_size;
  out.provenance["kmeans_iterations"] = hs.model.iterations;
  out.provenance["inertia"] = hs.model.inertia;
  out.provenance["embedding_dim"] = emb.dim();
  return out;
}

void write_id_file(const std::vector<std::string>& ids, const fs::path& path) {
  std::string text;
  for (const auto& id : ids) text += id + "\n";
  write_text_file(path.string(), text);
}

std::size_t planned_selection_calls(const PipelineConfig& cfg,
                                    const Dataset<InstructionSample>& ds,
                                    const fs::path& out_dir) {
  if (cfg.selection.strategy != SelectionStrategy::hard || cfg.selection.budget == 0) return 0;
  const fs::path cache = out_dir / "embeddings.bin";
  if (fs::is_regular_file(cache)) {
    try {
      if (read_embedding_cache(cache.string()).ids == ids_of(ds)) return 0;
    } catch (const Error&) {
    }
  }
  return embed_batches(ds.records.size());
}

}  // namespace

int run_select(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  const auto ds = load_train(cfg);
  check_selection(cfg, ds);
  const fs::path out_dir(cfg.output_dir);
  if (ctx.dry_run) {
    out_of(ctx) << "dry run: select would make "
                << planned_selection_calls(cfg, ds, out_dir) << " provider calls\n";
    return 0;
  }
  ProviderPool pool(ctx);
  if (cfg.selection.strategy == SelectionStrategy::hard) pool.require("embedder", cfg.embedder);
  prepare_output_dir(cfg);
  const auto sel = select_ids(pool, cfg, ds, out_dir);
  write_id_file(sel.ids, out_dir / "selected_ids.txt");

  OrderedJson m = manifest_base(ctx, "select");
  m["seeds"] = {{"base", cfg.seed}, {"select", derive_seed(cfg.seed, "select")}};
  m["inputs"] = {{"train", {{"path", cfg.train_path},
                            {"fnv1a64", file_digest(cfg.resolve(cfg.train_path))}}}};
  m["selection"] = sel.provenance;
  m["counts"] = {{"dataset", ds.records.size()}, {"selected", sel.ids.size()}};
  m["exit_code"] = 0;
  write_manifest(out_dir, "select", m);
  out_of(ctx) << "selected " << sel.ids.size() << " of " << ds.records.size() << " ids ("
              << to_string(cfg.selection.strategy) << ")\n";
  return 0;
}

int run_augment(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  const auto ds = load_train(cfg);
  check_selection(cfg, ds);
  const auto tpls = load_synthesis_templates(cfg);
  const fs::path out_dir(cfg.output_dir);
  const fs::path augmented_path = out_dir / "augmented.jsonl";

  std::optional<Dataset<AugmentedSample>> existing;
  if (fs::is_regular_file(augmented_path)) {
    existing = load_dataset<AugmentedSample>(augmented_path.string());
  }

  if (ctx.dry_run) {
    const std::size_t selection_calls = planned_selection_calls(cfg, ds, out_dir);
    std::size_t resumable = 0;
    if (existing && cfg.selection.strategy == SelectionStrategy::random) {
      const auto ids = random_select(ids_of(ds), std::min(cfg.selection.budget, ds.size()),
                                     derive_seed(cfg.seed, "select"));
      const std::set<std::string> chosen(ids.begin(), ids.end());
      std::map<std::string, const InstructionSample*> by_id;
      for (const auto& r : ds.records) by_id.emplace(r.id, &r);
      for (const auto& a : existing->records) {
        const auto it = by_id.find(a.base.id);
        if (chosen.contains(a.base.id) && it != by_id.end() && *it->second == a.base) {
          ++resumable;
        }
      }
    }
    const std::size_t todo = std::min(cfg.selection.budget, ds.size()) - resumable;
    out_of(ctx) << "dry run: augment would make " << selection_calls + todo
                << " provider calls (up to " << selection_calls + 2 * todo
                << " with re-prompts)\n";
    return 0;
  }

  ProviderPool pool(ctx);
  if (cfg.selection.strategy == SelectionStrategy::hard) pool.require("embedder", cfg.embedder);
  pool.require("synthesizer", cfg.synthesizer);
  prepare_output_dir(cfg);
  const auto sel = select_ids(pool, cfg, ds, out_dir);
  const std::set<std::string> subset(sel.ids.begin(), sel.ids.end());

  AugmentOptions opts;
  opts.existing = existing ? &*existing : nullptr;
  opts.timestamp = run_timestamp(ctx.mock);
  opts.workers = cfg.workers;
  auto result = augment_dataset(pool.get("synthesizer", cfg.synthesizer), ds, subset, tpls, opts);
  const std::uint64_t mix_seed = derive_seed(cfg.seed, "mix");
  const auto train = mix_datasets(result.augmented, result.rest, mix_seed);

  write_id_file(sel.ids, out_dir / "selected_ids.txt");
  write_dataset(result.augmented, augmented_path.string());
  write_skip_report(result.failures, (out_dir / "failures.jsonl").string());
  write_dataset(train, (out_dir / "train.jsonl").string());

  const int code = result.failures.empty() ? 0 : 1;
  OrderedJson m = manifest_base(ctx, "augment");
  m["seeds"] = {{"base", cfg.seed},
                {"select", derive_seed(cfg.seed, "select")},
                {"mix", mix_seed},
                {"mock", derive_seed(cfg.seed, "mock")}};
  m["templates"] = {{"rationale", tpls.rationale.version},
                    {"insertion", tpls.insertion.version}};
  m["inputs"] = {{"train", {{"path", cfg.train_path},
                            {"fnv1a64", file_digest(cfg.resolve(cfg.train_path))}}}};
  m["selection"] = sel.provenance;
  m["counts"] = {{"dataset", ds.records.size()},
                 {"selected", sel.ids.size()},
                 {"augmented", result.augmented.size()},
                 {"failed", result.failures.size()},
                 {"resumed", result.resumed},
                 {"train", train.size()}};
  m["exit_code"] = code;
  write_manifest(out_dir, "augment", m);

  out_of(ctx) << "augmented " << result.augmented.size() << " of " << sel.ids.size()
              << " selected samples (" << result.resumed << " resumed, "
              << result.failures.size() << " failed); train set has " << train.size()
              << " records\n";
  if (code != 0) err_of(ctx) << "see " << (out_dir / "failures.jsonl").string() << "\n";
  return code;
}

int run_pairs(const RunContext& ctx) {
  const auto& cfg = ctx.config;
  const fs::path out_dir(cfg.output_dir);
  const std::string input = cfg.augmented_path.empty()
                                ? (out_dir / "augmented.jsonl").string()
                                : cfg.resolve(cfg.augmented_path);
  require_file(input, "augmented dataset");
  const auto inputs = load_dataset<AugmentedSample>(input);
  const auto tpl = load_critic_template(cfg);

  const fs::path pairs_path = out_dir / "pairs.jsonl";
  const fs::path skips_path = out_dir / "pair_skips.jsonl";
  std::optional<Dataset<PreferencePair>> old_pairs;
  std::vector<SkipEntry> old_skips;
  if (fs::is_regular_file(pairs_path)) {
    old_pairs = load_dataset<PreferencePair>(pairs_path.string());
  }
  if (fs::is_regular_file(skips_path)) {
    for (auto& s : load_skip_report(skips_path.string())) {
      // Transient failures are retried on the next run.
      if (!s.reason.starts_with("provider error")) old_skips.push_back(std::move(s));
    }
  }

  if (ctx.dry_run) {
    std::set<std::string> done;
    if (old_pairs) {
      for (const auto& p : old_pairs->records) done.insert(p.id);
    }
    for (const auto& s : old_skips) done.insert(s.id);
    std::size_t todo = 0;
    for (const auto& r : inputs.records) todo += done.contains(r.base.id) ? 0 : 1;
    out_of(ctx) << "dry run: pairs would make " << 4 * todo << " provider calls (up to "
                << (4 + 2 * kDuplicateResamples) * todo << " with duplicate resamples)\n";
    return 0;
  }

  ProviderPool pool(ctx);
  pool.require("target", cfg.target);
  prepare_output_dir(cfg);
  CriticOptions opts;
  opts.temperature = cfg.critic_temperature;
  opts.seed = derive_seed(cfg.seed, "pairs");
  opts.judge = &pool.judge();
  opts.existing_pairs = old_pairs ? &*old_pairs : nullptr;
  opts.existing_skips = &old_skips;
  opts.workers = cfg.workers;
  auto result = build_preference_dataset(pool.get("target", cfg.target), inputs, tpl, opts);
  if (const auto bad = validate(result.pairs); !bad.empty()) {
    throw Error("internal: pair \"" + bad.front().id + "\" violates " + bad.front().invariant);
  }
  write_dataset(result.pairs, pairs_path.string());
  write_skip_report(result.skips, skips_path.string());

  const int code = result.skips.empty() ? 0 : 1;
  OrderedJson m = manifest_base(ctx, "pairs");
  m["seeds"] = {{"base", cfg.seed},
                {"pairs", opts.seed},
                {"mock", derive_seed(cfg.seed, "mock")}};
  m["templates"] = {{"critic", tpl.version}};
  m["inputs"] = {{"augmented", {{"path", cfg.augmented_path.empty()
                                             ? std::string("<output_dir>/augmented.jsonl")
                                             : cfg.augmented_path},
                                {"fnv1a64", file_digest(input)}}}};
  m["counts"] = {{"inputs", inputs.size()},
                 {"pairs", result.pairs.size()},
                 {"skipped", result.skips.size()},
                 {"resumed", result.resumed}};
  m["exit_code"] = code;
  write_manifest(out_dir, "pairs", m);

  out_of(ctx) << "built " << result.pairs.size() << " preference pairs from " << inputs.size()
              << " inputs (" << result.skips.size() << " skipped, " << result.resumed
              << " resumed)\n";
  return code;
}

int run_dpo(const RunContext& ctx, const DpoCommand& cmd) {
  const auto& cfg = ctx.config;
  require_file(cmd.traces_path, "trace file");
  const DpoConfig dcfg{cmd.beta.value_or(cfg.beta), cmd.per_token_mean || cfg.per_token_mean};
  dcfg.validate();
  const auto pairs = load_pair_traces(cmd.traces_path);
  if (ctx.dry_run) {
    out_of(ctx) << "dry run: dpo would make 0 provider calls for " << pairs.size()
                << " pairs\n";
    return 0;
  }
  const auto batch = dpo_batch(pairs, dcfg);
  const fs::path out_dir = prepare_output_dir(cfg);

  std::vector<OrderedJson> rows;
  rows.reserve(batch.rows.size());
  for (const auto& r : batch.rows) rows.push_back(to_json(r));
  write_jsonl(rows, (out_dir / "dpo_pairs.jsonl").string());

  if (cmd.write_grads) {
    std::vector<OrderedJson> grads;
    for (const auto& p : pairs) {
      const auto g = dpo_grad(p, dcfg);
      OrderedJson row = OrderedJson::object();
      row["id"] = p.id;
      row["policy_chosen"] =
          std::vector<double>(g.policy_chosen.data(), g.policy_chosen.data() + g.policy_chosen.size());
      row["policy_rejected"] = std::vector<double>(
          g.policy_rejected.data(), g.policy_rejected.data() + g.policy_rejected.size());
      grads.push_back(std::move(row));
    }
    write_jsonl(grads, (out_dir / "dpo_grads.jsonl").string());
  }

  OrderedJson summary = summary_json(batch, dcfg);
  int code = 0;
  if (cmd.check_grads) {
    constexpr double kTolerance = 1e-6;
    double worst = 0;
    std::string worst_id;
    for (const auto& p : pairs) {
      const auto check = check_gradients(p, dcfg);
      if (check.max_relative_error >= worst) {
        worst = check.max_relative_error;
        worst_id = p.id;
      }
      if (check.max_relative_error > kTolerance) {
        err_of(ctx) << "gradient check FAILED for pair \"" << p.id << "\": token "
                    << check.worst_token << " relative error " << check.max_relative_error
                    << " > " << kTolerance << "\n";
        code = 1;
      }
    }
    summary["grad_check"] = {{"tolerance", kTolerance},
                             {"max_relative_error", worst},
                             {"worst_pair", worst_id},
                             {"passed", code == 0}};
  }
  write_text_file((out_dir / "dpo_summary.json").string(), summary.dump(2) + "\n");

  OrderedJson m = manifest_base(ctx, "dpo");
  m["seeds"] = {{"base", cfg.seed}};
  m["inputs"] = {{"traces", {{"path", cmd.traces_path},
                             {"fnv1a64", file_digest(cmd.traces_path)}}}};
  m["dpo"] = {{"beta", dcfg.beta}, {"per_token_mean", dcfg.per_token_mean}};
  m["counts"] = {{"pairs", pairs.size()}};
  m["exit_code"] = code;
  write_manifest(out_dir, "dpo", m);

  out_of(ctx) << "pairs " << pairs.size() << "  beta " << dcfg.beta << "  mean_loss "
              << batch.mean_loss << "  mean_margin " << batch.mean_margin
              << "  preference_accuracy " << batch.preference_accuracy << "\n";
  if (cmd.check_grads) {
    out_of(ctx) << "gradient check " << (code == 0 ? "passed" : "FAILED") << "\n";
  }
  return code;
}

int run_score(const RunContext& ctx, const ScoreCommand& cmd) {
  const auto& cfg = ctx.config;
  require_file(cmd.input_path, "score input");
  Report report;
  if (cmd.kind == "pope") {
    const auto records = load_binary_qa(cmd.input_path);
    report = pope_report(pope_scores(records));
  } else if (cmd.kind == "objhal") {
    const auto records = load_captions(cmd.input_path);
    const SynonymTable table = cmd.synonyms_path.empty()
                                   ? SynonymTable::default_table()
                                   : load_synonym_table(cmd.synonyms_path);
    report = objhal_report(object_hallucination_rates(records, table));
  } else {
    throw UsageError("score kind must be \"pope\" or \"objhal\", got \"" + cmd.kind + "\"");
  }
  if (ctx.dry_run) {
    out_of(ctx) << "dry run: score would make 0 provider calls\n";
    return 0;
  }
  const fs::path out_dir = prepare_output_dir(cfg);
  write_text_file((out_dir / ("report-" + cmd.kind + ".json")).string(),
                  report.json.dump(2) + "\n");
  write_text_file((out_dir / ("report-" + cmd.kind + ".txt")).string(), report.table);

  OrderedJson m = manifest_base(ctx, "score");
  m["inputs"] = {{"records", {{"path", cmd.input_path},
                              {"fnv1a64", file_digest(cmd.input_path)}}}};
  if (!cmd.synonyms_path.empty()) {
    m["inputs"]["synonyms"] = {{"path", cmd.synonyms_path},
                               {"fnv1a64", file_digest(cmd.synonyms_path)}};
  }
  m["kind"] = cmd.kind;
  m["exit_code"] = 0;
  write_manifest(out_dir, "score", m);
  out_of(ctx) << report.table;
  return 0;
}

}  // namespace recritic
