#include "recritic/provider.hpp"

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <cmath>
#include <numbers>
#include <random>
#include <thread>

#include <httplib.h>

namespace recritic {

void ProviderConfig::validate() const {
  if (!(timeout_s > 0.0)) throw UsageError("provider timeout must be > 0");
  if (max_retries < 0) throw UsageError("provider max_retries must be >= 0");
  if (max_concurrent < 1 || max_concurrent > 1024) {
    throw UsageError("provider max_concurrent must be in [1, 1024]");
  }
  if (!(temperature >= 0.0)) {
    throw UsageError("provider temperature must be >= 0");
  }
}

ProviderConfig ProviderConfig::from_json(const Json& j) {
  if (!j.is_object()) throw UsageError("provider config must be an object");
  ProviderConfig c;
  try {
    c.endpoint_url = j.value("endpoint_url", c.endpoint_url);
    c.model_name = j.value("model_name", c.model_name);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.timeout_s = j.value("timeout", c.timeout_s);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.max_concurrent = j.value("max_concurrent", c.max_concurrent);
    c.temperature = j.value("temperature", c.temperature);
  } catch (const Json::exception& e) {
    throw UsageError(std::string("provider config: ") + e.what());
  }
  c.validate();
  return c;
}

OrderedJson ProviderConfig::to_json() const {
  OrderedJson j = OrderedJson::object();
  j["endpoint_url"] = endpoint_url;
  j["model_name"] = model_name;
  j["api_key_env"] = api_key_env;
  j["timeout"] = timeout_s;
  j["max_retries"] = max_retries;
  j["max_concurrent"] = max_concurrent;
  j["temperature"] = temperature;
  return j;
}

bool is_retryable_status(int status) {
  return status == 0 || status == 429 || (status >= 500 && status <= 599);
}

std::chrono::duration<double> backoff_delay(const BackoffPolicy& policy,
                                            int retry, double unit_draw) {
  const double ceiling =
      std::min(policy.cap_s, policy.base_s * std::pow(policy.factor, retry));
  return std::chrono::duration<double>(ceiling * std::clamp(unit_draw, 0.0, 1.0));
}

Provider::Provider(ProviderConfig config)
    : config_(std::move(config)),
      sleeper_([](std::chrono::duration<double> d) { std::this_thread::sleep_for(d); }),
      slots_(0) {
  config_.validate();
  slots_.release(config_.max_concurrent);
}

template <typename Fn>
auto Provider::with_retry(Fn&& attempt) -> decltype(attempt()) {
  thread_local std::mt19937_64 jitter{std::random_device{}()};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int retry = 0;; ++retry) {
    int status = 0;
    std::string message;
    slots_.acquire();
    const std::size_t now = ++in_flight_;
    std::size_t peak = peak_in_flight_.load();
    while (now > peak && !peak_in_flight_.compare_exchange_weak(peak, now)) {
    }
    ++attempts_;
    try {
      auto result = attempt();
      --in_flight_;
      slots_.release();
      return result;
    } catch (const ProviderError& e) {
      --in_flight_;
      slots_.release();
      status = e.status();
      message = e.what();
    } catch (...) {
      --in_flight_;
      slots_.release();
      throw;
    }
    if (!is_retryable_status(status)) {
      throw ProviderError(message, status, retry + 1);
    }
    if (retry >= config_.max_retries) {
      throw ProviderError("retries exhausted after " + std::to_string(retry + 1) +
                              " attempts; last error: " + message,
                          status, retry + 1);
    }
    sleeper_(backoff_delay(backoff_, retry, unit(jitter)));
  }
}

ChatResponse Provider::chat(const ChatRequest& request) {
  if (request.messages.empty()) throw Error("chat request has no messages");
  return with_retry([&] { return send_chat(request); });
}

Eigen::MatrixXd Provider::embed(std::span<const std::string> texts) {
  if (texts.empty()) throw Error("embed: input list is empty");
  auto rows = with_retry([&] { return send_embed(texts); });
  if (rows.size() != texts.size()) {
    throw Error("embed: expected " + std::to_string(texts.size()) +
                " vectors, got " + std::to_string(rows.size()));
  }
  const std::size_t dim = rows.front().size();
  if (dim == 0) throw Error("embed: zero-dimensional vectors");
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()),
                      static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != dim) {
      throw Error("embed: dimension mismatch at index " + std::to_string(i) +
                  " (" + std::to_string(rows[i].size()) + " vs " +
                  std::to_string(dim) + ")");
    }
    for (std::size_t c = 0; c < dim; ++c) {
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = rows[i][c];
    }
  }
  if (!out.allFinite()) throw Error("embed: non-finite vector entries");
  return out;
}

OrderedJson chat_request_body(const ProviderConfig& config,
                              const ChatRequest& request) {
  OrderedJson body = OrderedJson::object();
  body["model"] = config.model_name;
  OrderedJson messages = OrderedJson::array();
  for (const auto& m : request.messages) {
    OrderedJson msg = OrderedJson::object();
    msg["role"] = m.role;
    if (m.image_ref) {
      OrderedJson text_part = OrderedJson::object();
      text_part["type"] = "text";
      text_part["text"] = m.text;
      OrderedJson url = OrderedJson::object();
      url["url"] = *m.image_ref;
      OrderedJson image_part = OrderedJson::object();
      image_part["type"] = "image_url";
      image_part["image_url"] = std::move(url);
      msg["content"] = OrderedJson::array({std::move(text_part), std::move(image_part)});
    } else {
      msg["content"] = m.text;
    }
    messages.push_back(std::move(msg));
  }
  body["messages"] = std::move(messages);
  body["temperature"] = request.temperature;
  if (request.max_tokens) body["max_tokens"] = *request.max_tokens;
  if (request.seed) body["seed"] = *request.seed;
  return body;
}

ChatResponse parse_chat_response(const Json& body) {
  try {
    const Json& choice = body.at("choices").at(0);
    ChatResponse r;
    const Json& content = choice.at("message").at("content");
    r.text = content.is_null() ? std::string() : content.get<std::string>();
    if (choice.contains("finish_reason") && choice["finish_reason"].is_string()) {
      r.finish_reason = choice["finish_reason"].get<std::string>();
    }
    if (body.contains("usage") && body["usage"].is_object()) {
      r.usage.prompt_tokens = body["usage"].value("prompt_tokens", 0);
      r.usage.completion_tokens = body["usage"].value("completion_tokens", 0);
    }
    return r;
  } catch (const Json::exception& e) {
    throw Error(std::string("malformed chat response: ") + e.what());
  }
}

OrderedJson embed_request_body(const ProviderConfig& config,
                               std::span<const std::string> texts) {
  OrderedJson body = OrderedJson::object();
  body["model"] = config.model_name;
  body["input"] = OrderedJson::array();
  for (const auto& t : texts) body["input"].push_back(t);
  return body;
}

std::vector<std::vector<double>> parse_embed_response(const Json& body) {
  try {
    const Json& data = body.at("data");
    std::vector<std::pair<std::size_t, std::vector<double>>> indexed;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Json& item = data[i];
      const std::size_t index = item.value("index", i);
      indexed.emplace_back(index, item.at("embedding").get<std::vector<double>>());
    }
    std::stable_sort(indexed.begin(), indexed.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::vector<double>> out;
    out.reserve(indexed.size());
    for (auto& [_, v] : indexed) out.push_back(std::move(v));
    return out;
  } catch (const Json::exception& e) {
    throw Error(std::string("malformed embedding response: ") + e.what());
  }
}

HttpProvider::HttpProvider(ProviderConfig config) : Provider(std::move(config)) {
  const std::string& url = this->config().endpoint_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw UsageError("endpoint_url must start with http:// or https://: " + url);
  }
  const std::string scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw UsageError("unsupported endpoint scheme: " + scheme);
  }
  const auto path_start = url.find('/', scheme_end + 3);
  origin_ = url.substr(0, path_start);
  base_path_ = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
}

Json HttpProvider::post_json(const std::string& route, const OrderedJson& body) {
  httplib::Client client(origin_);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(config().timeout_s));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);

  httplib::Headers headers;
  if (!config().api_key_env.empty()) {
    const char* key = std::getenv(config().api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw UsageError("environment variable " + config().api_key_env +
                       " is not set");
    }
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  const std::string path = base_path_ + route;
  auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res) {
    throw ProviderError("transport error calling " + origin_ + path + ": " +
                            httplib::to_string(res.error()),
                        0);
  }
  if (res->status < 200 || res->status >= 300) {
    std::string snippet = res->body.substr(0, 200);
    throw ProviderError("HTTP " + std::to_string(res->status) + " from " +
                            origin_ + path + ": " + snippet,
                        res->status);
  }
  try {
    return Json::parse(res->body);
  } catch (const Json::parse_error& e) {
    throw ProviderError(std::string("response is not JSON: ") + e.what(),
                        res->status);
  }
}

ChatResponse HttpProvider::send_chat(const ChatRequest& request) {
  return parse_chat_response(
      post_json("/chat/completions", chat_request_body(config(), request)));
}

std::vector<std::vector<double>> HttpProvider::send_embed(
    std::span<const std::string> texts) {
  return parse_embed_response(
      post_json("/embeddings", embed_request_body(config(), texts)));
}

MockScript load_mock_script(const std::string& path) {
  Json doc;
  try {
    doc = Json::parse(read_text_file(path));
  } catch (const Json::parse_error& e) {
    throw UsageError(path + ": malformed JSON: " + e.what());
  }
  if (!doc.is_object()) throw UsageError(path + ": mock script must be an object");
  MockScript script;
  for (const auto& [key, value] : doc.items()) {
    if (value.is_string()) {
      script[key] = {value.get<std::string>()};
    } else if (value.is_array() && !value.empty() &&
               std::all_of(value.begin(), value.end(),
                           [](const Json& v) { return v.is_string(); })) {
      script[key] = value.get<std::vector<std::string>>();
    } else {
      throw UsageError(path + ": entry \"" + key +
                       "\" must be a string or a non-empty array of strings");
    }
  }
  return script;
}

MockProvider::MockProvider(std::uint64_t seed, MockScript script,
                           ProviderConfig config)
    : Provider(std::move(config)), seed_(seed), script_(std::move(script)) {}

ProviderConfig MockProvider::default_config() {
  ProviderConfig c;
  c.endpoint_url = "mock://";
  c.model_name = "mock";
  c.max_retries = 3;
  c.max_concurrent = 4;
  return c;
}

Eigen::VectorXd MockProvider::embedding_for(std::uint64_t seed,
                                            std::string_view text) {
  std::uint64_t state = splitmix64(fnv1a64(text) ^ splitmix64(seed));
  auto unit = [&state] {
    state = splitmix64(state);
    // (0, 1]: keeps log() finite.
    return (static_cast<double>(state >> 11) + 1.0) * 0x1.0p-53;
  };
  Eigen::VectorXd v(kEmbeddingDim);
  for (int i = 0; i < kEmbeddingDim; i += 2) {
    const double r = std::sqrt(-2.0 * std::log(unit()));
    const double theta = 2.0 * std::numbers::pi * unit();
    v(i) = r * std::cos(theta);
    if (i + 1 < kEmbeddingDim) v(i + 1) = r * std::sin(theta);
  }
  return v / v.norm();
}

std::string MockProvider::unscripted_response(const ChatRequest& request) const {
  std::uint64_t h = fnv1a64(request.tag, splitmix64(seed_));
  for (const auto& m : request.messages) {
    h = fnv1a64(m.role, h);
    h = fnv1a64(m.text, h);
    if (m.image_ref) h = fnv1a64(*m.image_ref, h);
  }
  h = splitmix64(h ^ std::bit_cast<std::uint64_t>(request.temperature));
  h = splitmix64(h ^ request.seed.value_or(0));
  if (request.tag.rfind("critic:", 0) == 0) {
    return (h & 1) != 0 ? "Mock review complete. Better: A"
                        : "Mock review complete. Better: B";
  }
  return "Mock response " + hex64(h) + " considering the visible scene.";
}

std::size_t MockProvider::chat_calls() const {
  std::lock_guard lock(mutex_);
  return chat_calls_;
}

std::size_t MockProvider::chat_calls(const std::string& tag) const {
  std::lock_guard lock(mutex_);
  const auto it = calls_by_tag_.find(tag);
  return it == calls_by_tag_.end() ? 0 : it->second;
}

std::size_t MockProvider::embed_calls() const {
  std::lock_guard lock(mutex_);
  return embed_calls_;
}

ChatResponse MockProvider::send_chat(const ChatRequest& request) {
  std::optional<std::string> scripted;
  {
    std::lock_guard lock(mutex_);
    ++chat_calls_;
    const std::size_t n = calls_by_tag_[request.tag]++;
    const auto it = script_.find(request.tag);
    if (it != script_.end() && !it->second.empty()) {
      scripted = it->second[std::min(n, it->second.size() - 1)];
    }
  }
  if (latency_.count() > 0) std::this_thread::sleep_for(latency_);

  static constexpr std::string_view kStatusPrefix = "!status:";
  if (scripted && scripted->rfind(kStatusPrefix, 0) == 0) {
    const int status = std::stoi(scripted->substr(kStatusPrefix.size()));
    throw ProviderError("mock HTTP " + std::to_string(status), status);
  }
  ChatResponse r;
  r.text = scripted ? *scripted : unscripted_response(request);
  r.finish_reason = "stop";
  for (const auto& m : request.messages) {
    r.usage.prompt_tokens += static_cast<int>(count_occurrences(m.text, " ") + 1);
  }
  r.usage.completion_tokens = static_cast<int>(count_occurrences(r.text, " ") + 1);
  return r;
}

std::vector<std::vector<double>> MockProvider::send_embed(
    std::span<const std::string> texts) {
  {
    std::lock_guard lock(mutex_);
    ++embed_calls_;
  }
  std::vector<std::vector<double>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) {
    const Eigen::VectorXd v = embedding_for(seed_, t);
    out.emplace_back(v.data(), v.data() + v.size());
  }
  return out;
}

std::unique_ptr<MockProvider> mock_provider(std::uint64_t seed, MockScript script) {
  return std::make_unique<MockProvider>(seed, std::move(script));
}

}  // namespace recritic
