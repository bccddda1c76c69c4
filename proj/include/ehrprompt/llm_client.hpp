#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ehrprompt/serializer.hpp"

namespace ehrprompt {

struct ChatMessage {
  std::string role;
  std::string content;
};

struct InferenceRequest {
  std::string model;
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_new_tokens = 16;
  bool want_logprobs = false;
  int top_logprobs = 5;
  std::optional<std::uint64_t> seed;  // sent only for sampled decoding
};

// Body for POST /v1/chat/completions.
nlohmann::json to_wire_json(const InferenceRequest& req);

// Content hash over everything that can change the reply.
std::string cache_key(const InferenceRequest& req);

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
  std::vector<std::pair<std::string, double>> top;  // alternatives at this position
};

struct InferenceResponse {
  std::string text;
  std::optional<std::vector<TokenLogprob>> logprobs;
  std::int64_t latency_ms = 0;
  bool from_cache = false;
};

// Parses {choices:[{message:{content}, logprobs?}]}. Throws MalformedResponseError.
InferenceResponse parse_wire_response(const std::string& body);

class LlmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Connection failures and timeouts that survived every retry.
class TransportError : public LlmError {
 public:
  using LlmError::LlmError;
};

class HttpStatusError : public LlmError {
 public:
  HttpStatusError(int status, std::string body)
      : LlmError("endpoint returned HTTP " + std::to_string(status) + ": " + body), status_(status),
        body_(std::move(body)) {}
  int status() const { return status_; }
  const std::string& body() const { return body_; }

 private:
  int status_;
  std::string body_;
};

class MalformedResponseError : public LlmError {
 public:
  using LlmError::LlmError;
};

struct HttpResult {
  int status = 0;  // 0: no HTTP response (connect failure, timeout)
  std::string body;
  std::string error;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResult post(const std::string& path, const std::string& json_body) = 0;
};

class HttpTransport final : public Transport {
 public:
  HttpTransport(std::string base_url, std::string api_key, std::chrono::milliseconds timeout);
  HttpResult post(const std::string& path, const std::string& json_body) override;

 private:
  std::string base_url_;
  std::string path_prefix_;
  std::string api_key_;
  std::chrono::milliseconds timeout_;
};

struct ClientOptions {
  std::string base_url = "http://127.0.0.1:8000";
  std::string api_key;
  int max_retries = 3;
  std::chrono::milliseconds backoff_initial{200};
  std::chrono::milliseconds backoff_max{5000};
  std::chrono::milliseconds timeout{60000};
  int parallelism = 4;
  std::optional<std::filesystem::path> cache_dir;
  bool use_cache = true;

  // EHRPROMPT_ENDPOINT, EHRPROMPT_API_KEY, EHRPROMPT_PARALLELISM, EHRPROMPT_CACHE_DIR.
  static ClientOptions from_env();
};

// In-memory response cache with optional write-through to one file per key.
class ResponseCache {
 public:
  explicit ResponseCache(std::optional<std::filesystem::path> dir);
  std::optional<InferenceResponse> get(const std::string& key);
  void put(const std::string& key, const InferenceResponse& resp);

 private:
  std::filesystem::path path_for(const std::string& key) const;

  std::optional<std::filesystem::path> dir_;
  std::shared_mutex mutex_;
  std::map<std::string, InferenceResponse> entries_;
};

class LlmClient {
 public:
  LlmClient(std::shared_ptr<Transport> transport, ClientOptions options);
  explicit LlmClient(ClientOptions options);

  // Cached, deduplicated, retried, and bounded by options.parallelism.
  InferenceResponse complete(const InferenceRequest& req);

  const ClientOptions& options() const { return options_; }
  // Requests that went past the cache (one per completed or failed call, not per attempt).
  std::uint64_t network_calls() const { return network_calls_.load(); }

 private:
  InferenceResponse complete_uncached(const InferenceRequest& req);

  std::shared_ptr<Transport> transport_;
  ClientOptions options_;
  ResponseCache cache_;
  std::counting_semaphore<> slots_;
  std::mutex inflight_mutex_;
  std::map<std::string, std::shared_future<InferenceResponse>> inflight_;
  std::atomic<std::uint64_t> network_calls_{0};
};

struct GenerationSettings {
  std::string model = "default";
  double temperature = 0.0;
  int max_new_tokens = 16;
  bool use_logprobs = false;
  std::optional<std::uint64_t> seed;

  InferenceRequest request_for(std::string prompt) const;
};

struct LabelSchema {
  std::string task;
  std::vector<std::string> labels;
  std::map<std::string, std::string> aliases;  // normalized surface form -> canonical label
  std::string fallback;

  void validate() const;
  std::size_t index_of(const std::string& label) const;  // throws on unknown labels
  bool contains(const std::string& label) const;
};

// Lowercases, maps punctuation to spaces and collapses whitespace.
std::string normalize_label_text(std::string_view text);

struct LabelMatch {
  std::string label;
  bool unparsed = false;
};

// Exact match on labels, then aliases, then the longest word-bounded
// substring; otherwise the schema fallback with unparsed set.
LabelMatch match_label(std::string_view raw, const LabelSchema& schema);

struct ClassifyResult {
  std::string label;
  std::string raw;
  bool unparsed = false;
  bool from_cache = false;
  std::int64_t latency_ms = 0;
};

ClassifyResult classify(const ModelInput& input, const LabelSchema& schema, LlmClient& client,
                        const GenerationSettings& settings);

struct ScoreOptions {
  std::string positive_token = "yes";
  std::string negative_token = "no";
};

struct ScoreResult {
  double score = 0.5;
  std::string raw;
  bool unparsed = false;
  bool from_logprobs = false;
  bool from_cache = false;
  std::int64_t latency_ms = 0;
};

// First-token probability mass of the positive answer among {positive,
// negative}; else the first number in [0, 1] in the text; else 0.5 unparsed.
ScoreResult score_from_response(const InferenceResponse& resp, const ScoreOptions& opts);

ScoreResult score(const ModelInput& input, LlmClient& client, const GenerationSettings& settings,
                  const ScoreOptions& opts = {});

struct DescriptionResult {
  std::string text;
  DescriptionValidation validation;
  std::vector<std::string> prompt_warnings;
};

// Errors from the endpoint are rethrown with `context` (usually the record id) prefixed.
DescriptionResult generate_description(const NumericBlock& block, LlmClient& client,
                                       const GenerationSettings& settings, const std::string& template_text,
                                       const std::string& context = {});

}  // namespace ehrprompt
