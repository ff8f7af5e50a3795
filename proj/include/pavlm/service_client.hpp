#pragma once

// Chat-completion client used to augment instructions with a remote
// text-generation model. Opt-in; the offline default is rule_paraphrase.

#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

// Eigen must be parsed before httplib: <resolv.h> defines _res as a macro.
#include <Eigen/Dense>
#include <json.hpp>

#include "pavlm/errors.hpp"
#include "pavlm/instruction.hpp"

#include <httplib.h>

namespace pavlm {

struct EndpointConfig {
  std::string url;      // e.g. http://localhost:8000/v1/chat/completions
  std::string api_key;
  std::string model;    // omitted from the request when empty
  int timeout_seconds = 60;
  int max_retries = 2;  // attempts = 1 + max_retries
  int retry_backoff_ms = 200;

  // Reads PAVLM_LLM_ENDPOINT and PAVLM_LLM_API_KEY.
  static EndpointConfig from_env() {
    EndpointConfig cfg;
    if (const char* e = std::getenv("PAVLM_LLM_ENDPOINT")) cfg.url = e;
    if (const char* k = std::getenv("PAVLM_LLM_API_KEY")) cfg.api_key = k;
    return cfg;
  }
};

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline SplitUrl split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw InvalidArgument("endpoint URL needs a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

inline std::string chat_request_body(const std::string& model, const std::string& prompt) {
  nlohmann::json body = {{"messages", {{{"role", "user"}, {"content", prompt}}}}};
  if (!model.empty()) body["model"] = model;
  return body.dump();
}

// Extracts choices[0].message.content; falls back to the raw body when the
// response is not JSON so plain-text servers also work.
inline std::string chat_response_text(const std::string& body) {
  auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) return body;
  if (j.contains("choices") && j["choices"].is_array() && !j["choices"].empty()) {
    const auto& c = j["choices"][0];
    if (c.contains("message") && c["message"].contains("content") && c["message"]["content"].is_string())
      return c["message"]["content"].get<std::string>();
    if (c.contains("text") && c["text"].is_string()) return c["text"].get<std::string>();
  }
  throw ServiceError("chat response has no choices[0].message.content");
}

struct AugmentResult {
  std::vector<InstructionRecord> records;
  int warnings = 0;
  int attempts = 0;
};

inline AugmentResult augment_via_service(const std::string& prompt, const EndpointConfig& cfg,
                                         const std::string& object_name, const std::string& affordance) {
  if (cfg.url.empty()) throw ServiceError("no endpoint configured (set PAVLM_LLM_ENDPOINT)");
  const auto [origin, path] = split_url(cfg.url);
  httplib::Client client(origin);
  client.set_connection_timeout(cfg.timeout_seconds, 0);
  client.set_read_timeout(cfg.timeout_seconds, 0);
  client.set_write_timeout(cfg.timeout_seconds, 0);
  httplib::Headers headers;
  if (!cfg.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg.api_key);
  const std::string body = chat_request_body(cfg.model, prompt);

  std::string last_error;
  AugmentResult result;
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    result.attempts = attempt + 1;
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(cfg.retry_backoff_ms));
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP status " + std::to_string(res->status);
      continue;
    }
    auto parsed = parse_qa_response(chat_response_text(res->body), object_name, affordance, "service");
    result.records = std::move(parsed.records);
    result.warnings = parsed.warnings;
    return result;
  }
  throw ServiceError("augmentation service unavailable after " + std::to_string(result.attempts) +
                     " attempt(s): " + last_error);
}

}  // namespace pavlm
