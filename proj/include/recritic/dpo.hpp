#ifndef RECRITIC_DPO_HPP
#define RECRITIC_DPO_HPP

// Autoregressive NLL and the DPO objective evaluated on per-token log-prob
// traces, with closed-form gradients.
//
//   r(y|x)  = beta * (log pi_theta(y|x) - log pi_ref(y|x))
//   loss    = -log sigmoid(r_w - r_l) = softplus(-(r_w - r_l))
//
// A sequence log-prob is the sum of its token log-probs (or their mean when
// per_token_mean is set), so d loss / d token is the same for every token of
// a trace.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "recritic/common.hpp"
#include "recritic/corpus.hpp"

namespace recritic {

template <typename Scalar = double>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Log-probabilities in nats, one per generated token.
template <typename Scalar = double>
struct LogprobTraceT {
  Vector<Scalar> logprobs;
  /// Optional, for audit only.
  std::vector<std::string> tokens;

  void validate() const {
    if (logprobs.size() == 0) throw Error("logprob trace is empty");
    for (Eigen::Index i = 0; i < logprobs.size(); ++i) {
      const Scalar v = logprobs(i);
      if (!std::isfinite(static_cast<double>(v))) {
        throw Error("logprob trace has a non-finite entry at token " + std::to_string(i));
      }
      if (v > Scalar(0)) {
        throw Error("logprob trace has a positive entry at token " + std::to_string(i));
      }
    }
  }
};

template <typename Scalar = double>
struct PairTracesT {
  std::string id;
  LogprobTraceT<Scalar> policy_chosen;
  LogprobTraceT<Scalar> policy_rejected;
  LogprobTraceT<Scalar> ref_chosen;
  LogprobTraceT<Scalar> ref_rejected;

  void validate() const {
    const std::string where = "pair \"" + id + "\": ";
    try {
      policy_chosen.validate();
      policy_rejected.validate();
      ref_chosen.validate();
      ref_rejected.validate();
    } catch (const Error& e) {
      throw Error(where + e.what());
    }
    if (policy_chosen.logprobs.size() != ref_chosen.logprobs.size()) {
      throw Error(where + "policy and reference chosen traces differ in length");
    }
    if (policy_rejected.logprobs.size() != ref_rejected.logprobs.size()) {
      throw Error(where + "policy and reference rejected traces differ in length");
    }
  }
};

using LogprobTrace = LogprobTraceT<double>;
using PairTraces = PairTracesT<double>;

struct DpoConfig {
  double beta = 0.1;
  /// Score sequences by mean token log-prob instead of the sum.
  bool per_token_mean = false;

  void validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw UsageError("beta must be > 0");
  }
};

/// log(1 + exp(x)) without overflow or cancellation.
template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > Scalar(0) ? x + log1p(exp(-x)) : log1p(exp(x));
}

/// 1 / (1 + exp(-x)) without overflow.
template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar sequence_logprob(const LogprobTraceT<Scalar>& trace) {
  trace.validate();
  return trace.logprobs.sum();
}

/// -sum_k log P(y_k | y_<k, x); the mean over tokens when per_token_mean.
template <typename Scalar>
Scalar sft_nll(const LogprobTraceT<Scalar>& trace, bool per_token_mean = false) {
  const Scalar total = -sequence_logprob(trace);
  return per_token_mean ? total / static_cast<Scalar>(trace.logprobs.size()) : total;
}

template <typename Scalar>
Scalar implicit_reward(Scalar policy_lp, Scalar ref_lp, Scalar beta) {
  if (!(beta > Scalar(0))) throw UsageError("beta must be > 0");
  return beta * (policy_lp - ref_lp);
}

template <typename Scalar = double>
struct DpoLoss {
  Scalar loss = 0;
  Scalar r_w = 0;
  Scalar r_l = 0;
  Scalar margin = 0;
};

namespace detail {
template <typename Scalar>
Scalar sequence_score(const LogprobTraceT<Scalar>& trace, bool per_token_mean) {
  const Scalar s = trace.logprobs.sum();
  return per_token_mean ? s / static_cast<Scalar>(trace.logprobs.size()) : s;
}
}  // namespace detail

template <typename Scalar>
DpoLoss<Scalar> dpo_loss(const PairTracesT<Scalar>& pair, const DpoConfig& cfg) {
  cfg.validate();
  pair.validate();
  const auto beta = static_cast<Scalar>(cfg.beta);
  DpoLoss<Scalar> out;
  out.r_w = implicit_reward(detail::sequence_score(pair.policy_chosen, cfg.per_token_mean),
                            detail::sequence_score(pair.ref_chosen, cfg.per_token_mean),
                            beta);
  out.r_l = implicit_reward(detail::sequence_score(pair.policy_rejected, cfg.per_token_mean),
                            detail::sequence_score(pair.ref_rejected, cfg.per_token_mean),
                            beta);
  out.margin = out.r_w - out.r_l;
  out.loss = softplus(-out.margin);
  return out;
}

/// Gradient of the loss with respect to each policy token log-prob.
template <typename Scalar = double>
struct DpoGrad {
  Vector<Scalar> policy_chosen;
  Vector<Scalar> policy_rejected;
};

template <typename Scalar>
DpoGrad<Scalar> dpo_grad(const PairTracesT<Scalar>& pair, const DpoConfig& cfg) {
  const DpoLoss<Scalar> l = dpo_loss(pair, cfg);
  // d softplus(-m) / dm = -sigmoid(-m)
  const Scalar scale = static_cast<Scalar>(cfg.beta) * sigmoid(-l.margin);
  const auto n_w = pair.policy_chosen.logprobs.size();
  const auto n_l = pair.policy_rejected.logprobs.size();
  const Scalar w = cfg.per_token_mean ? scale / static_cast<Scalar>(n_w) : scale;
  const Scalar r = cfg.per_token_mean ? scale / static_cast<Scalar>(n_l) : scale;
  DpoGrad<Scalar> g;
  g.policy_chosen = Vector<Scalar>::Constant(n_w, -w);
  g.policy_rejected = Vector<Scalar>::Constant(n_l, r);
  return g;
}

struct DpoRow {
  std::string id;
  double loss = 0;
  double r_w = 0;
  double r_l = 0;
  double margin = 0;
};

struct DpoBatchResult {
  double mean_loss = 0;
  double mean_margin = 0;
  /// Fraction of pairs with margin > 0.
  double preference_accuracy = 0;
  std::vector<DpoRow> rows;
};

DpoBatchResult dpo_batch(const std::vector<PairTraces>& pairs, const DpoConfig& cfg);

struct GradCheck {
  double max_relative_error = 0;
  /// Index into the concatenated [policy_chosen, policy_rejected] tokens.
  std::size_t worst_token = 0;
};

/// Central finite differences of dpo_loss against dpo_grad.
GradCheck check_gradients(const PairTraces& pair, const DpoConfig& cfg,
                          double step = 1e-6);

/// Reads a trace file: JSONL rows {"id", "role", "logprobs"[, "tokens"]} with
/// role one of policy_chosen, policy_rejected, ref_chosen, ref_rejected.
/// Every id needs all four roles exactly once. Pairs keep first-seen order.
std::vector<PairTraces> load_pair_traces(const std::string& path);

OrderedJson to_json(const DpoRow& row);
OrderedJson summary_json(const DpoBatchResult& result, const DpoConfig& cfg);

}  // namespace recritic

#endif  // RECRITIC_DPO_HPP
