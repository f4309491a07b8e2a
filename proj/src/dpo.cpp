#include "recritic/dpo.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <optional>

namespace recritic {

DpoBatchResult dpo_batch(const std::vector<PairTraces>& pairs, const DpoConfig& cfg) {
  if (pairs.empty()) throw UsageError("dpo_batch: no pairs");
  DpoBatchResult out;
  out.rows.reserve(pairs.size());
  double loss_sum = 0;
  double margin_sum = 0;
  std::size_t preferred = 0;
  for (const auto& p : pairs) {
    const auto l = dpo_loss(p, cfg);
    out.rows.push_back({p.id, l.loss, l.r_w, l.r_l, l.margin});
    loss_sum += l.loss;
    margin_sum += l.margin;
    if (l.margin > 0) ++preferred;
  }
  const auto n = static_cast<double>(pairs.size());
  out.mean_loss = loss_sum / n;
  out.mean_margin = margin_sum / n;
  out.preference_accuracy = static_cast<double>(preferred) / n;
  return out;
}

GradCheck check_gradients(const PairTraces& pair, const DpoConfig& cfg, double step) {
  GradCheck out;
  PairTraces probe = pair;
  std::size_t flat = 0;
  auto sweep = [&](Vector<double>& tokens, bool chosen) {
    for (Eigen::Index k = 0; k < tokens.size(); ++k, ++flat) {
      const double saved = tokens(k);
      // Keep the probe inside the valid domain (log-probs <= 0).
      const double centre = std::min(saved, -step);
      tokens(k) = centre;
      const auto grads = dpo_grad(probe, cfg);
      const double analytic =
          chosen ? grads.policy_chosen(k) : grads.policy_rejected(k);
      tokens(k) = centre + step;
      const double up = dpo_loss(probe, cfg).loss;
      tokens(k) = centre - step;
      const double down = dpo_loss(probe, cfg).loss;
      tokens(k) = saved;
      const double numeric = (up - down) / (2 * step);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-300});
      const double rel = std::abs(numeric - analytic) / denom;
      if (rel > out.max_relative_error) {
        out.max_relative_error = rel;
        out.worst_token = flat;
      }
    }
  };
  sweep(probe.policy_chosen.logprobs, true);
  sweep(probe.policy_rejected.logprobs, false);
  return out;
}

std::vector<PairTraces> load_pair_traces(const std::string& path) {
  static constexpr std::array<std::string_view, 4> kRoles = {
      "policy_chosen", "policy_rejected", "ref_chosen", "ref_rejected"};
  struct Partial {
    std::array<std::optional<LogprobTrace>, 4> traces;
    std::size_t first_line = 0;
  };
  std::vector<std::string> order;
  std::map<std::string, Partial> partial;

  for (const auto& row : read_jsonl(path)) {
    const std::string where = path + ":" + std::to_string(row.line) + ": ";
    const Json& j = row.value;
    if (!j.contains("id") || !j["id"].is_string()) {
      throw UsageError(where + "\"id\" must be a string");
    }
    const std::string id = j["id"].get<std::string>();
    if (!j.contains("role") || !j["role"].is_string()) {
      throw UsageError(where + "pair \"" + id + "\": \"role\" must be a string");
    }
    const std::string role = j["role"].get<std::string>();
    const auto slot = std::find(kRoles.begin(), kRoles.end(), role);
    if (slot == kRoles.end()) {
      throw UsageError(where + "pair \"" + id + "\": unknown role \"" + role + "\"");
    }
    if (!j.contains("logprobs") || !j["logprobs"].is_array()) {
      throw UsageError(where + "pair \"" + id + "\": \"logprobs\" must be an array");
    }
    LogprobTrace trace;
    const Json& lp = j["logprobs"];
    trace.logprobs.resize(static_cast<Eigen::Index>(lp.size()));
    for (std::size_t k = 0; k < lp.size(); ++k) {
      if (!lp[k].is_number()) {
        throw UsageError(where + "pair \"" + id + "\": logprobs must be numbers");
      }
      trace.logprobs(static_cast<Eigen::Index>(k)) = lp[k].get<double>();
    }
    if (j.contains("tokens")) {
      try {
        trace.tokens = j["tokens"].get<std::vector<std::string>>();
      } catch (const Json::exception&) {
        throw UsageError(where + "pair \"" + id + "\": tokens must be strings");
      }
    }
    auto [it, inserted] = partial.try_emplace(id);
    if (inserted) {
      it->second.first_line = row.line;
      order.push_back(id);
    }
    auto& target = it->second.traces[static_cast<std::size_t>(slot - kRoles.begin())];
    if (target) {
      throw UsageError(where + "pair \"" + id + "\": duplicate role \"" + role + "\"");
    }
    target = std::move(trace);
  }

  std::vector<PairTraces> pairs;
  pairs.reserve(order.size());
  for (const auto& id : order) {
    auto& p = partial[id];
    for (std::size_t r = 0; r < kRoles.size(); ++r) {
      if (!p.traces[r]) {
        throw UsageError(path + ": pair \"" + id + "\": missing role \"" +
                         std::string(kRoles[r]) + "\"");
      }
    }
    PairTraces pair;
    pair.id = id;
    pair.policy_chosen = std::move(*p.traces[0]);
    pair.policy_rejected = std::move(*p.traces[1]);
    pair.ref_chosen = std::move(*p.traces[2]);
    pair.ref_rejected = std::move(*p.traces[3]);
    try {
      pair.validate();
    } catch (const Error& e) {
      throw UsageError(path + ": " + e.what());
    }
    pairs.push_back(std::move(pair));
  }
  return pairs;
}

OrderedJson to_json(const DpoRow& row) {
  OrderedJson j = OrderedJson::object();
  j["id"] = row.id;
  j["loss"] = row.loss;
  j["r_w"] = row.r_w;
  j["r_l"] = row.r_l;
  j["margin"] = row.margin;
  return j;
}

OrderedJson summary_json(const DpoBatchResult& result, const DpoConfig& cfg) {
  OrderedJson j = OrderedJson::object();
  j["pairs"] = result.rows.size();
  j["beta"] = cfg.beta;
  j["per_token_mean"] = cfg.per_token_mean;
  j["mean_loss"] = result.mean_loss;
  j["mean_margin"] = result.mean_margin;
  j["preference_accuracy"] = result.preference_accuracy;
  return j;
}

}  // namespace recritic
