#pragma once

// OpenAI-compatible chat-completion backend.
//
// POST {endpoint}/v1/chat/completions
//   {"model", "messages": [{"role": "user", "content": <prompt>}], "temperature", "max_tokens"}
// The answer is choices[0].message.content; usage.{prompt_tokens, completion_tokens}
// is recorded in the backend's usage ledger once per successful call.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <mutex>
#include <semaphore>
#include <string>
#include <thread>

#include <httplib.h>

#include "fedicl/backend.hpp"

namespace fedicl {

struct RemoteConfig {
  std::string endpoint = "http://127.0.0.1:8080";
  std::string api_key_env = "FEDICL_API_KEY";
  std::string template_id = "open_qa_v1";
  int max_in_flight = 4;
  int backoff_base_ms = 250;
  int backoff_max_ms = 8000;
  int retry_after_cap_ms = 60000;

  void validate() const {
    if (endpoint.empty()) throw ConfigError("remote backend: endpoint is empty");
    if (max_in_flight < 1 || max_in_flight > 1024) throw ConfigError("remote backend: max_in_flight out of range");
    if (backoff_base_ms < 0 || backoff_max_ms < 0) throw ConfigError("remote backend: negative backoff");
  }
};

/// Keeps at most `max_tokens` whitespace-delimited tokens.
inline std::string truncate_tokens(const std::string& text, std::uint64_t max_tokens) {
  std::uint64_t n = 0;
  bool in_token = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const bool space = std::isspace(static_cast<unsigned char>(text[i])) != 0;
    if (!space && !in_token && ++n > max_tokens) {
      auto end = text.find_last_not_of(" \t\r\n", i == 0 ? 0 : i - 1);
      return end == std::string::npos ? std::string() : text.substr(0, end + 1);
    }
    in_token = !space;
  }
  return text;
}

class RemoteBackend final : public LmBackend {
 public:
  explicit RemoteBackend(RemoteConfig config) : config_(std::move(config)), in_flight_(config_.max_in_flight) {
    config_.validate();
  }

  Label answer(std::span<const Example> context, const Input& query, const GenerationParams& params,
               const CallContext& call = {}) override {
    params.validate();
    const std::string prompt = render_prompt(context, query, config_.template_id);
    const json body{{"model", params.model_name},
                    {"messages", json::array({json{{"role", "user"}, {"content", prompt}}})},
                    {"temperature", params.temperature},
                    {"max_tokens", params.max_tokens}};

    in_flight_.acquire();
    struct Release {
      std::counting_semaphore<1024>& s;
      ~Release() { s.release(); }
    } release{in_flight_};

    const json response = post_with_retries(body.dump(), params, call.client_id);
    std::string content;
    std::uint64_t prompt_tokens = 0, completion_tokens = 0;
    try {
      content = response.at("choices").at(0).at("message").at("content").get<std::string>();
      if (response.contains("usage")) {
        const auto& u = response.at("usage");
        prompt_tokens = u.value("prompt_tokens", std::uint64_t{0});
        completion_tokens = u.value("completion_tokens", std::uint64_t{0});
      }
    } catch (const std::exception&) {
      throw BackendError(call.client_id, "malformed completion response: " + excerpt(response.dump()));
    }
    {
      std::lock_guard lock(usage_mutex_);
      usage_.record(call.round, Direction::uplink, call.client_id, static_cast<std::int64_t>(prompt_tokens),
                    Unit::tokens, PayloadKind::lm_prompt);
      usage_.record(call.round, Direction::downlink, call.client_id, static_cast<std::int64_t>(completion_tokens),
                    Unit::tokens, PayloadKind::lm_completion);
    }
    content = truncate_tokens(content, static_cast<std::uint64_t>(params.max_tokens));
    if (const auto* q = std::get_if<Question>(&query); q && !q->options.empty())
      return parse_choice(content, option_letters(q->options.size()));
    return Text{content};
  }

  std::string descriptor() const override { return "remote:" + config_.endpoint; }

  CommLedger usage() const {
    std::lock_guard lock(usage_mutex_);
    return usage_;
  }

  int requests_sent() const { return requests_.load(); }

 private:
  static std::string excerpt(const std::string& s) { return s.size() <= 200 ? s : s.substr(0, 200) + "..."; }

  json post_with_retries(const std::string& payload, const GenerationParams& params, int client_id) {
    httplib::Client cli(config_.endpoint);
    const auto timeout = std::chrono::milliseconds(params.timeout_ms);
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    httplib::Headers headers;
    if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);

    std::string last_error;
    for (int attempt = 0; attempt <= params.max_retries; ++attempt) {
      ++requests_;
      auto res = cli.Post("/v1/chat/completions", headers, payload, "application/json");
      int delay_ms = std::min(config_.backoff_max_ms, config_.backoff_base_ms << std::min(attempt, 20));
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
      } else if (res->status >= 200 && res->status < 300) {
        try {
          return json::parse(res->body);
        } catch (const std::exception&) {
          throw BackendError(client_id, "malformed completion body: " + excerpt(res->body));
        }
      } else if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status) + ": " + excerpt(res->body);
        if (res->status == 429 && res->has_header("Retry-After")) {
          try {
            delay_ms = std::min(config_.retry_after_cap_ms, std::stoi(res->get_header_value("Retry-After")) * 1000);
          } catch (const std::exception&) {
          }
        }
      } else {
        throw BackendError(client_id, "HTTP " + std::to_string(res->status) + ": " + excerpt(res->body));
      }
      if (attempt < params.max_retries) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
    }
    throw BackendError(client_id, "request failed after " + std::to_string(params.max_retries + 1) +
                                      " attempts: " + last_error);
  }

  RemoteConfig config_;
  std::counting_semaphore<1024> in_flight_;
  mutable std::mutex usage_mutex_;
  CommLedger usage_;
  std::atomic<int> requests_{0};
};

}  // namespace fedicl
