#ifndef RECRITIC_PROVIDER_HPP
#define RECRITIC_PROVIDER_HPP

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "recritic/common.hpp"
#include "recritic/corpus.hpp"

namespace recritic {

struct ProviderConfig {
  /// Base URL of a chat-completions style API, e.g. "https://host/v1".
  /// Requests go to <base>/chat/completions and <base>/embeddings.
  std::string endpoint_url;
  std::string model_name;
  /// Name of the environment variable holding the API key. Empty means no
  /// Authorization header is sent.
  std::string api_key_env;
  double timeout_s = 60.0;
  int max_retries = 3;
  int max_concurrent = 4;
  double temperature = 0.0;

  /// Throws UsageError when an invariant does not hold.
  void validate() const;

  static ProviderConfig from_json(const Json& j);
  OrderedJson to_json() const;
};

struct ChatMessage {
  std::string role;
  std::string text;
  std::optional<std::string> image_ref;

  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  std::optional<int> max_tokens;
  /// Sampling seed forwarded to the service.
  std::optional<std::uint64_t> seed;
  /// Pipeline-side label such as "rationale:q1" or "critic:q1". Never sent on
  /// the wire; the mock uses it to look up scripted responses.
  std::string tag;
};

struct TokenUsage {
  int prompt_tokens = 0;
  int completion_tokens = 0;
};

struct ChatResponse {
  std::string text;
  std::string finish_reason;
  TokenUsage usage;
};

/// A failed call. status is the HTTP status, or 0 for a transport failure
/// (connection refused, timeout).
class ProviderError : public Error {
 public:
  ProviderError(const std::string& what, int status, int attempts = 1)
      : Error(what), status_(status), attempts_(attempts) {}

  int status() const { return status_; }
  int attempts() const { return attempts_; }

 private:
  int status_;
  int attempts_;
};

/// Transport failures, 429 and 5xx are retried; other statuses are final.
bool is_retryable_status(int status);

struct BackoffPolicy {
  double base_s = 0.5;
  double factor = 2.0;
  double cap_s = 30.0;
};

/// Full-jitter delay before retry number `retry` (0-based): uniform in
/// [0, min(cap, base * factor^retry)].
std::chrono::duration<double> backoff_delay(const BackoffPolicy& policy,
                                            int retry, double unit_draw);

using Sleeper = std::function<void(std::chrono::duration<double>)>;

/// Thread-safe client for a chat + embedding service. Every call is bounded
/// by config.max_concurrent in-flight attempts and retried per
/// is_retryable_status up to config.max_retries times.
class Provider {
 public:
  explicit Provider(ProviderConfig config);
  virtual ~Provider() = default;

  Provider(const Provider&) = delete;
  Provider& operator=(const Provider&) = delete;

  ChatResponse chat(const ChatRequest& request);

  /// One row per input text, order preserved. Throws Error on empty input
  /// or when the service returns vectors of unequal dimension.
  Eigen::MatrixXd embed(std::span<const std::string> texts);

  const ProviderConfig& config() const { return config_; }
  void set_sleeper(Sleeper sleeper) { sleeper_ = std::move(sleeper); }
  void set_backoff(BackoffPolicy policy) { backoff_ = policy; }

  /// Attempts issued so far across all calls, retries included.
  std::size_t attempts() const { return attempts_.load(); }
  std::size_t peak_in_flight() const { return peak_in_flight_.load(); }

 protected:
  virtual ChatResponse send_chat(const ChatRequest& request) = 0;
  virtual std::vector<std::vector<double>> send_embed(
      std::span<const std::string> texts) = 0;

 private:
  template <typename Fn>
  auto with_retry(Fn&& attempt) -> decltype(attempt());

  ProviderConfig config_;
  BackoffPolicy backoff_;
  Sleeper sleeper_;
  std::counting_semaphore<1024> slots_;
  std::atomic<std::size_t> attempts_{0};
  std::atomic<std::size_t> in_flight_{0};
  std::atomic<std::size_t> peak_in_flight_{0};
};

/// Wire format of the chat-completions endpoint.
OrderedJson chat_request_body(const ProviderConfig& config,
                              const ChatRequest& request);
ChatResponse parse_chat_response(const Json& body);
OrderedJson embed_request_body(const ProviderConfig& config,
                               std::span<const std::string> texts);
std::vector<std::vector<double>> parse_embed_response(const Json& body);

/// HTTP(S) provider. The API key is read from the environment variable named
/// in the config at call time.
class HttpProvider final : public Provider {
 public:
  explicit HttpProvider(ProviderConfig config);

 protected:
  ChatResponse send_chat(const ChatRequest& request) override;
  std::vector<std::vector<double>> send_embed(
      std::span<const std::string> texts) override;

 private:
  Json post_json(const std::string& route, const OrderedJson& body);

  std::string origin_;
  std::string base_path_;
};

/// Canned responses keyed by request tag. The n-th call carrying a tag gets
/// entry n (the last entry repeats). An entry "!status:NNN" makes that call
/// fail with HTTP status NNN.
using MockScript = std::map<std::string, std::vector<std::string>>;

MockScript load_mock_script(const std::string& path);

/// Deterministic offline provider. Unscripted outputs are pure functions of
/// (seed, request); embeddings are unit vectors of dimension 16.
class MockProvider final : public Provider {
 public:
  static constexpr int kEmbeddingDim = 16;

  explicit MockProvider(std::uint64_t seed, MockScript script = {},
                        ProviderConfig config = default_config());

  static ProviderConfig default_config();

  /// Embedding the mock returns for `text` under `seed`.
  static Eigen::VectorXd embedding_for(std::uint64_t seed, std::string_view text);

  /// Response the mock returns for an unscripted request.
  std::string unscripted_response(const ChatRequest& request) const;

  std::size_t chat_calls() const;
  std::size_t chat_calls(const std::string& tag) const;
  std::size_t embed_calls() const;

  /// Simulated service latency per chat call.
  void set_latency(std::chrono::milliseconds latency) { latency_ = latency; }

 protected:
  ChatResponse send_chat(const ChatRequest& request) override;
  std::vector<std::vector<double>> send_embed(
      std::span<const std::string> texts) override;

 private:
  std::uint64_t seed_;
  MockScript script_;
  std::chrono::milliseconds latency_{0};
  mutable std::mutex mutex_;
  std::map<std::string, std::size_t> calls_by_tag_;
  std::size_t chat_calls_ = 0;
  std::size_t embed_calls_ = 0;
};

std::unique_ptr<MockProvider> mock_provider(std::uint64_t seed,
                                            MockScript script = {});

}  // namespace recritic

#endif  // RECRITIC_PROVIDER_HPP
