#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>

#include "recritic/dpo.hpp"
#include "support.hpp"

using namespace recritic;
using Big = boost::multiprecision::cpp_bin_float_50;

namespace {

LogprobTrace trace(std::initializer_list<double> v) {
  LogprobTrace t;
  t.logprobs = Eigen::Map<const Eigen::VectorXd>(v.begin(), static_cast<Eigen::Index>(v.size()));
  return t;
}

PairTraces pair_of(LogprobTrace pc, LogprobTrace pr, LogprobTrace rc, LogprobTrace rr,
                   std::string id = "p") {
  return {std::move(id), std::move(pc), std::move(pr), std::move(rc), std::move(rr)};
}

/// The worked example: sequence totals chosen -10 vs -12, rejected -15 vs -13.
PairTraces worked() {
  return pair_of(trace({-4, -6}), trace({-7.5, -7.5}), trace({-5, -7}), trace({-6.5, -6.5}));
}

Big big_loss(const Big& margin) { return boost::multiprecision::log1p(boost::multiprecision::exp(-margin)); }

/// Uniform in [lo, hi] on a grid of 2^-10, so sums and differences are exact.
double dyadic(DetRng& rng, double lo, double hi) {
  const auto steps = static_cast<std::uint64_t>((hi - lo) * 1024.0);
  return lo + static_cast<double>(rng.uniform_index(steps + 1)) / 1024.0;
}

LogprobTrace random_trace(DetRng& rng, Eigen::Index n, bool on_grid) {
  LogprobTrace t;
  t.logprobs.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    t.logprobs(i) = on_grid ? dyadic(rng, -5, 0) : -5.0 * rng.uniform01();
  }
  return t;
}

PairTraces random_pair(DetRng& rng, bool on_grid, Eigen::Index max_len = 64) {
  const auto nw = 1 + static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(max_len)));
  const auto nl = 1 + static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(max_len)));
  return pair_of(random_trace(rng, nw, on_grid), random_trace(rng, nl, on_grid),
                 random_trace(rng, nw, on_grid), random_trace(rng, nl, on_grid));
}

/// Test-side central differences, independent of check_gradients.
double fd_relative_error(const PairTraces& pair, const DpoConfig& cfg, double h) {
  double worst = 0;
  auto sweep = [&](bool chosen) {
    const Eigen::Index n = chosen ? pair.policy_chosen.logprobs.size()
                                  : pair.policy_rejected.logprobs.size();
    for (Eigen::Index k = 0; k < n; ++k) {
      PairTraces up = pair, down = pair;
      auto& u = chosen ? up.policy_chosen.logprobs : up.policy_rejected.logprobs;
      auto& d = chosen ? down.policy_chosen.logprobs : down.policy_rejected.logprobs;
      // Stay inside log-prob <= 0 by centring at most -h.
      const double centre = std::min(u(k), -h);
      PairTraces mid = pair;
      (chosen ? mid.policy_chosen.logprobs : mid.policy_rejected.logprobs)(k) = centre;
      u(k) = centre + h;
      d(k) = centre - h;
      const double numeric = (dpo_loss(up, cfg).loss - dpo_loss(down, cfg).loss) / (2 * h);
      const auto gm = dpo_grad(mid, cfg);
      const double analytic = chosen ? gm.policy_chosen(k) : gm.policy_rejected(k);
      worst = std::max(worst, std::abs(numeric - analytic) /
                                  std::max({std::abs(numeric), std::abs(analytic), 1e-300}));
    }
  };
  sweep(true);
  sweep(false);
  return worst;
}

}  // namespace

TEST_CASE("sequence log-prob and NLL") {
  CHECK(sequence_logprob(trace({-0.5, -1.5})) == -2.0);
  CHECK(sequence_logprob(trace({0.0})) == 0.0);
  LogprobTrace many;
  many.logprobs = Eigen::VectorXd::Constant(1000, -0.001);
  CHECK(std::abs(sequence_logprob(many) + 1.0) < 1e-12);
  CHECK(sft_nll(trace({-0.5, -1.5})) == 2.0);
  CHECK(sft_nll(trace({0.0, 0.0})) == 0.0);
  CHECK(sft_nll(trace({-2.0, -4.0}), true) == 3.0);
  CHECK_THROWS_AS(sequence_logprob(trace({0.5})), Error);
  CHECK_THROWS_AS(sequence_logprob(LogprobTrace{}), Error);
  CHECK_THROWS_AS(sequence_logprob(trace({std::nan("")})), Error);
}

TEST_CASE("implicit reward") {
  CHECK(implicit_reward(-3.0, -3.0, 0.1) == 0.0);
  CHECK(implicit_reward(-10.0, -12.0, 0.1) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(implicit_reward(-10.0, -12.0, 0.2) == 2 * implicit_reward(-10.0, -12.0, 0.1));
  CHECK_THROWS_AS(implicit_reward(-1.0, -1.0, 0.0), UsageError);
}

TEST_CASE("loss at margin zero is ln 2") {
  const auto t = trace({-1.25, -0.5});
  const auto l = dpo_loss(pair_of(t, t, t, t), DpoConfig{});
  CHECK(l.r_w == 0.0);
  CHECK(l.r_l == 0.0);
  CHECK(std::abs(l.loss - std::log(2.0)) < 1e-12);
}

TEST_CASE("worked pair matches the extended-precision oracle") {
  const auto l = dpo_loss(worked(), DpoConfig{0.1, false});
  CHECK(l.r_w == doctest::Approx(0.2));
  CHECK(l.r_l == doctest::Approx(-0.2));
  CHECK(l.margin == doctest::Approx(0.4));
  const Big oracle = big_loss(Big(l.margin));
  CHECK(std::abs(l.loss - 0.513015) < 1e-6);
  CHECK(boost::multiprecision::abs(Big(l.loss) - oracle) < Big(1e-15));
  CHECK(boost::multiprecision::abs(Big(0.513015) - big_loss(Big("0.4"))) < Big(1e-6));
}

TEST_CASE("large margins neither overflow nor underflow to zero") {
  const auto big = pair_of(trace({0.0}), trace({-1.0}), trace({-50.0}), trace({-1.0}));
  const auto l = dpo_loss(big, DpoConfig{1.0, false});
  CHECK(l.margin == 50.0);
  CHECK(l.loss > 0.0);
  const Big oracle = big_loss(Big(50));
  CHECK(boost::multiprecision::abs((Big(l.loss) - oracle) / oracle) < Big(1e-14));
  CHECK(std::abs(l.loss - std::exp(-50.0)) / std::exp(-50.0) < 1e-12);

  const auto neg = pair_of(trace({-1.0}), trace({0.0}), trace({-1.0}), trace({-800.0}));
  const auto ln = dpo_loss(neg, DpoConfig{1.0, false});
  CHECK(ln.margin == -800.0);
  CHECK(ln.loss == doctest::Approx(800.0));
  CHECK(std::isfinite(ln.loss));
}

TEST_CASE("gradients") {
  SUBCASE("margin 0, beta 0.1 gives -0.05 and +0.05 per token") {
    const auto t = trace({-1.0, -2.0, -3.0});
    const auto g = dpo_grad(pair_of(t, trace({-1.0}), t, trace({-1.0})), DpoConfig{0.1, false});
    for (Eigen::Index i = 0; i < 3; ++i) CHECK(g.policy_chosen(i) == doctest::Approx(-0.05).epsilon(1e-15));
    CHECK(g.policy_rejected(0) == doctest::Approx(0.05).epsilon(1e-15));
  }
  SUBCASE("saturated margin sends gradients to zero") {
    const auto sat = pair_of(trace({0.0}), trace({-1.0}), trace({-5000.0}), trace({-1.0}));
    const auto g = dpo_grad(sat, DpoConfig{1.0, false});
    CHECK(std::abs(g.policy_chosen(0)) < 1e-300);
    CHECK(std::abs(g.policy_rejected(0)) < 1e-300);
  }
  SUBCASE("per-token mean spreads the gradient") {
    const auto t = trace({-1.0, -2.0, -3.0, -4.0});
    const auto g = dpo_grad(pair_of(t, trace({-1.0}), t, trace({-1.0})), DpoConfig{0.1, true});
    CHECK(g.policy_chosen(0) == doctest::Approx(-0.05 / 4));
  }
}

TEST_CASE("analytic gradients match central differences on random pairs") {
  DetRng rng(2024);
  double worst = 0;
  double worst_lib = 0;
  for (int i = 0; i < 100; ++i) {
    const auto p = random_pair(rng, false);
    const DpoConfig cfg{0.1, i % 5 == 4};
    worst = std::max(worst, fd_relative_error(p, cfg, 1e-6));
    worst_lib = std::max(worst_lib, check_gradients(p, cfg, 1e-6).max_relative_error);
  }
  MESSAGE("worst relative error: test oracle " << worst << ", check_gradients " << worst_lib);
  CHECK(worst < 1e-6);
  CHECK(worst_lib < 1e-6);
}

TEST_CASE("gradient scales with beta") {
  const auto p = worked();
  const auto g_right = dpo_grad(p, DpoConfig{0.1, false});
  const auto g_wrong = dpo_grad(p, DpoConfig{0.2, false});
  CHECK(g_right.policy_chosen(0) != doctest::Approx(g_wrong.policy_chosen(0)));
  CHECK(check_gradients(p, DpoConfig{0.1, false}).max_relative_error < 1e-6);
}

TEST_CASE("loss shape: decreasing in margin, convex around zero") {
  const double ln2 = std::log(2.0);
  double prev = std::numeric_limits<double>::infinity();
  for (double m = -30; m <= 30; m += 0.25) {
    const double l = softplus(-m);
    CHECK(l > 0.0);
    CHECK(l < prev);
    prev = l;
    if (m == 0.0) {
      CHECK(softplus(-m) + softplus(m) == doctest::Approx(2 * ln2));
    } else {
      CHECK(softplus(-m) + softplus(m) > 2 * ln2);
    }
  }
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == 1.0);
}

TEST_CASE("beta scaling and shift invariance are exact") {
  DetRng rng(99);
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_pair(rng, true, 16);
    const double beta = static_cast<double>(1 + rng.uniform_index(16)) / 16.0;
    const auto l = dpo_loss(p, DpoConfig{beta, false});

    PairTraces scaled = p;
    scaled.policy_chosen.logprobs =
        p.ref_chosen.logprobs + beta * (p.policy_chosen.logprobs - p.ref_chosen.logprobs);
    scaled.policy_rejected.logprobs =
        p.ref_rejected.logprobs + beta * (p.policy_rejected.logprobs - p.ref_rejected.logprobs);
    const auto ls = dpo_loss(scaled, DpoConfig{1.0, false});
    CHECK(ls.margin == l.margin);
    CHECK(ls.loss == l.loss);

    const double c = -dyadic(rng, 0, 4);
    PairTraces shifted = p;
    shifted.policy_chosen.logprobs.array() += c;
    shifted.ref_chosen.logprobs.array() += c;
    const auto lt = dpo_loss(shifted, DpoConfig{beta, false});
    CHECK(lt.r_w == l.r_w);
    CHECK(lt.r_l == l.r_l);
    CHECK(lt.margin == l.margin);
    CHECK(lt.loss == l.loss);
  }
}

TEST_CASE("batch results") {
  const auto p = worked();
  const auto single = dpo_loss(p, DpoConfig{});
  const auto b = dpo_batch({p, p, p}, DpoConfig{});
  CHECK(b.mean_loss == doctest::Approx(single.loss).epsilon(1e-15));

  const auto up = pair_of(trace({0.0}), trace({-1.0}), trace({-10.0}), trace({-1.0}), "up");
  const auto down = pair_of(trace({-10.0}), trace({-1.0}), trace({0.0}), trace({-1.0}), "down");
  const auto mixed = dpo_batch({up, down}, DpoConfig{0.1, false});
  CHECK(mixed.rows[0].margin == doctest::Approx(1.0));
  CHECK(mixed.rows[1].margin == doctest::Approx(-1.0));
  CHECK(mixed.preference_accuracy == 0.5);

  DetRng rng(4);
  std::vector<PairTraces> many;
  for (int i = 0; i < 200; ++i) many.push_back(random_pair(rng, false));
  const auto r = dpo_batch(many, DpoConfig{});
  double naive = 0;
  for (const auto& q : many) {
    const double m = 0.1 * ((q.policy_chosen.logprobs.sum() - q.ref_chosen.logprobs.sum()) -
                            (q.policy_rejected.logprobs.sum() - q.ref_rejected.logprobs.sum()));
    naive += std::log1p(std::exp(-m));
  }
  CHECK(std::abs(r.mean_loss - naive / 200) < 1e-12);
  CHECK_THROWS_AS(dpo_batch({}, DpoConfig{}), UsageError);
}

TEST_CASE("float instantiation agrees with double") {
  PairTracesT<float> pf;
  const auto pd = worked();
  pf.id = "f";
  pf.policy_chosen.logprobs = pd.policy_chosen.logprobs.cast<float>();
  pf.policy_rejected.logprobs = pd.policy_rejected.logprobs.cast<float>();
  pf.ref_chosen.logprobs = pd.ref_chosen.logprobs.cast<float>();
  pf.ref_rejected.logprobs = pd.ref_rejected.logprobs.cast<float>();
  CHECK(dpo_loss(pf, DpoConfig{}).loss == doctest::Approx(0.513015f).epsilon(1e-5));
}

TEST_CASE("trace validation names the pair") {
  auto p = worked();
  p.id = "bad-pair";
  p.ref_chosen = trace({-1.0});
  CHECK_THROWS_WITH_AS(dpo_loss(p, DpoConfig{}), doctest::Contains("bad-pair"), Error);
  CHECK_THROWS_AS(dpo_loss(worked(), DpoConfig{0.0, false}), UsageError);
}

TEST_CASE("trace files") {
  const auto pairs = load_pair_traces(testing::fixture("traces_worked.jsonl").string());
  REQUIRE(pairs.size() == 1);
  CHECK(std::abs(dpo_loss(pairs[0], DpoConfig{}).loss - 0.513015) < 1e-6);
  CHECK_THROWS_WITH_AS(load_pair_traces(testing::fixture("traces_missing_role.jsonl").string()),
                       doctest::Contains("\"broken\""), UsageError);
  testing::TempDir dir("traces");
  write_text_file(dir / "dup.jsonl",
                  "{\"id\":\"z\",\"role\":\"ref_chosen\",\"logprobs\":[-1]}\n"
                  "{\"id\":\"z\",\"role\":\"ref_chosen\",\"logprobs\":[-1]}\n");
  CHECK_THROWS_WITH_AS(load_pair_traces(dir / "dup.jsonl"), doctest::Contains("\"z\""), UsageError);
  write_text_file(dir / "role.jsonl", "{\"id\":\"y\",\"role\":\"policy\",\"logprobs\":[-1]}\n");
  CHECK_THROWS_WITH_AS(load_pair_traces(dir / "role.jsonl"), doctest::Contains("\"y\""), UsageError);
}
