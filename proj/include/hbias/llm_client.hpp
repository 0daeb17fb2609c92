#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hbias/corpus.hpp"
#include "hbias/error.hpp"

namespace hbias::llm {

struct EndpointConfig {
  std::string base_url;  // e.g. "https://api.openai.com/v1"
  std::string model_id;
  std::string system_role_text = "chatbot";
  int per_request_max = 128;
  // Extra request fields (temperature, top_p, ...). Values are JSON literals.
  std::map<std::string, nlohmann::json> sampling_params;
  std::string api_key_env = "OPENAI_API_KEY";
  std::chrono::milliseconds timeout{60'000};
  int max_retries = 5;

  // Throws ValidationError.
  void validate() const;
};

struct CollectionPlan {
  int target_n = 0;
  std::vector<int> batch_sizes;
};

// Greedy maximal batches; the last carries the remainder.
CollectionPlan plan_batches(int target_n, int per_request_max);

// One HTTP exchange as seen by the client. status == 0 means the request
// never produced an HTTP response (connection refused, timeout, ...).
struct HttpReply {
  int status = 0;
  std::string body;
  std::string transport_error;
};

class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual HttpReply post(const nlohmann::json& request) = 0;
};

// Real endpoint over HTTP(S): POST {base_url}/chat/completions.
class HttpChatTransport final : public ChatTransport {
 public:
  explicit HttpChatTransport(EndpointConfig config);
  HttpReply post(const nlohmann::json& request) override;

 private:
  EndpointConfig config_;
  std::string api_key_;
};

// Plays back the responses recorded in a transcript, in order, per rendered
// prompt text.
class ReplayTransport final : public ChatTransport {
 public:
  explicit ReplayTransport(const std::filesystem::path& transcript);
  HttpReply post(const nlohmann::json& request) override;

 private:
  std::mutex mu_;
  std::map<std::string, std::vector<HttpReply>> replies_;
  std::map<std::string, std::size_t> cursor_;
};

// Append-only JSON-lines log of every exchange. Thread-safe.
class TranscriptLog {
 public:
  explicit TranscriptLog(std::filesystem::path path);
  void record(const std::string& prompt_id, std::uint32_t batch_no, int attempt,
              const nlohmann::json& request, const HttpReply& reply);

 private:
  std::mutex mu_;
  std::filesystem::path path_;
};

class CollectionError : public Error {
 public:
  CollectionError(const std::string& what, std::vector<corpus::Completion> partial)
      : Error(what), partial_(std::move(partial)) {}
  const std::vector<corpus::Completion>& partial() const noexcept { return partial_; }

 private:
  std::vector<corpus::Completion> partial_;
};

struct CollectOptions {
  // Attempts (individual generations) allowed = factor × target_n.
  int replacement_factor = 5;
  std::chrono::milliseconds backoff_base{1000};
  double backoff_factor = 2.0;
  std::uint64_t jitter_seed = 0;
  // Injected so tests do not sleep.
  std::function<void(std::chrono::milliseconds)> sleep;
  TranscriptLog* transcript = nullptr;
};

struct CollectionResult {
  std::vector<corpus::Completion> completions;  // compliant, sequence_no dense
  std::vector<corpus::Completion> rejected;     // non-compliant, numbered from target_n
  std::vector<std::string> raw_responses;       // every response body, in order
};

nlohmann::json build_request(const corpus::PromptSpec& prompt, int n, const EndpointConfig& config);

// Parses choices[*].message.content ordered by choices[*].index.
std::vector<std::string> parse_choices(const std::string& body);

CollectionResult collect(const corpus::PromptSpec& prompt, const CollectionPlan& plan,
                         const EndpointConfig& config, std::span<const corpus::RefusalRule> rules,
                         ChatTransport& transport, const CollectOptions& options = {});

// Collects every prompt with at most `max_in_flight` prompts in progress.
// Results are returned in prompt order.
std::vector<CollectionResult> collect_all(std::span<const corpus::PromptSpec> prompts,
                                          const CollectionPlan& plan, const EndpointConfig& config,
                                          std::span<const corpus::RefusalRule> rules,
                                          ChatTransport& transport, int max_in_flight,
                                          const CollectOptions& options = {});

}  // namespace hbias::llm
