#include "hbias/llm_client.hpp"

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <random>
#include <cmath>
#include <thread>

#include "hbias/util.hpp"

namespace hbias::llm {

using nlohmann::json;

void EndpointConfig::validate() const {
  if (per_request_max < 1) throw ValidationError("endpoint.per_request_max must be >= 1");
  if (timeout.count() <= 0) throw ValidationError("endpoint.timeout must be > 0");
  if (max_retries < 0) throw ValidationError("endpoint.max_retries must be >= 0");
  if (model_id.empty()) throw ValidationError("endpoint.model must be set");
}

CollectionPlan plan_batches(int target_n, int per_request_max) {
  if (target_n < 1 || per_request_max < 1) {
    throw ValidationError("plan_batches: target_n and per_request_max must be positive");
  }
  CollectionPlan plan;
  plan.target_n = target_n;
  for (int left = target_n; left > 0; left -= per_request_max) {
    plan.batch_sizes.push_back(std::min(left, per_request_max));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// transports

HttpChatTransport::HttpChatTransport(EndpointConfig config) : config_(std::move(config)) {
  if (!config_.api_key_env.empty()) {
    if (const char* key = std::getenv(config_.api_key_env.c_str())) api_key_ = key;
  }
}

HttpReply HttpChatTransport::post(const json& request) {
  // base_url = scheme://host[:port][/prefix]
  const std::string& url = config_.base_url;
  const auto scheme_end = url.find("://");
  const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_start = url.find('/', host_start);
  const std::string origin = url.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();

  httplib::Client client(origin);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  HttpReply reply;
  auto res = client.Post(prefix + "/chat/completions", headers, request.dump(), "application/json");
  if (!res) {
    reply.transport_error = httplib::to_string(res.error());
    return reply;
  }
  reply.status = res->status;
  reply.body = res->body;
  return reply;
}

ReplayTransport::ReplayTransport(const std::filesystem::path& transcript) {
  const std::string data = read_file(transcript);
  for (const auto& line : split(data, '\n')) {
    if (trim(line).empty()) continue;
    json j = json::parse(line);
    HttpReply r;
    r.status = j.at("status").get<int>();
    r.body = j.value("response", std::string{});
    r.transport_error = j.value("transport_error", std::string{});
    const auto& msgs = j.at("request").at("messages");
    replies_[msgs.back().at("content").get<std::string>()].push_back(std::move(r));
  }
}

HttpReply ReplayTransport::post(const json& request) {
  std::lock_guard lock(mu_);
  // Keyed by the rendered user prompt, which is unique per prompt cell.
  const std::string key = request.at("messages").back().at("content").get<std::string>();
  auto it = replies_.find(key);
  std::size_t& cur = cursor_[key];
  if (it == replies_.end() || cur >= it->second.size()) {
    HttpReply r;
    r.transport_error = "transcript exhausted for prompt: " + key;
    return r;
  }
  return it->second[cur++];
}

TranscriptLog::TranscriptLog(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void TranscriptLog::record(const std::string& prompt_id, std::uint32_t batch_no, int attempt,
                           const json& request, const HttpReply& reply) {
  nlohmann::ordered_json j;
  j["prompt_id"] = prompt_id;
  j["batch_no"] = batch_no;
  j["attempt"] = attempt;
  j["request"] = request;
  j["status"] = reply.status;
  j["response"] = reply.body;
  if (!reply.transport_error.empty()) j["transport_error"] = reply.transport_error;
  std::lock_guard lock(mu_);
  std::ofstream out(path_, std::ios::app | std::ios::binary);
  out << j.dump() << '\n';
}

// ---------------------------------------------------------------------------
// protocol

json build_request(const corpus::PromptSpec& prompt, int n, const EndpointConfig& config) {
  json req;
  req["model"] = config.model_id;
  req["n"] = n;
  req["messages"] = json::array({
      {{"role", "system"}, {"content", config.system_role_text}},
      {{"role", "user"}, {"content", prompt.rendered}},
  });
  for (const auto& [k, v] : config.sampling_params) req[k] = v;
  return req;
}

std::vector<std::string> parse_choices(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const std::exception& ex) {
    throw ParseError(std::string("chat response is not JSON: ") + ex.what());
  }
  if (!j.contains("choices") || !j["choices"].is_array()) {
    throw ParseError("chat response has no choices array");
  }
  std::vector<std::pair<int, std::string>> indexed;
  int pos = 0;
  for (const auto& ch : j["choices"]) {
    const int idx = ch.value("index", pos);
    std::string content;
    if (ch.contains("message") && ch["message"].contains("content") && ch["message"]["content"].is_string()) {
      content = ch["message"]["content"].get<std::string>();
    }
    indexed.emplace_back(idx, std::move(content));
    ++pos;
  }
  std::stable_sort(indexed.begin(), indexed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::string> out;
  out.reserve(indexed.size());
  for (auto& [_, text] : indexed) out.push_back(std::move(text));
  return out;
}

namespace {

bool retryable(const HttpReply& r) {
  return r.status == 0 || r.status == 429 || r.status >= 500;
}

}  // namespace

CollectionResult collect(const corpus::PromptSpec& prompt, const CollectionPlan& plan,
                         const EndpointConfig& config, std::span<const corpus::RefusalRule> rules,
                         ChatTransport& transport, const CollectOptions& options) {
  config.validate();
  int planned = 0;
  for (int b : plan.batch_sizes) {
    if (b < 1 || b > config.per_request_max) {
      throw ValidationError("collection plan has a batch outside [1, per_request_max]");
    }
    planned += b;
  }
  if (plan.target_n < 1 || planned != plan.target_n) {
    throw ValidationError("collection plan batch sizes do not sum to target_n");
  }

  const auto sleep = options.sleep ? options.sleep : [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
  std::mt19937_64 rng(options.jitter_seed ^ std::hash<std::string>{}(prompt.prompt_id));
  std::uniform_real_distribution<double> jitter(0.0, 1.0);

  const long budget = static_cast<long>(options.replacement_factor) * plan.target_n;
  long attempts = 0;
  CollectionResult result;
  std::uint32_t batch_no = 0;
  std::size_t next_planned = 0;

  while (static_cast<int>(result.completions.size()) < plan.target_n) {
    const int missing = plan.target_n - static_cast<int>(result.completions.size());
    int n = next_planned < plan.batch_sizes.size() ? plan.batch_sizes[next_planned++]
                                                   : std::min(missing, config.per_request_max);
    n = std::min(n, missing);
    if (attempts >= budget) {
      throw SaturationError("prompt " + prompt.prompt_id + ": replacement budget of " +
                            std::to_string(budget) + " generations exhausted with " +
                            std::to_string(result.completions.size()) + "/" +
                            std::to_string(plan.target_n) + " compliant");
    }
    n = static_cast<int>(std::min<long>(n, budget - attempts));

    json request = build_request(prompt, n, config);
    HttpReply reply;
    for (int attempt = 0;; ++attempt) {
      reply = transport.post(request);
      if (options.transcript) options.transcript->record(prompt.prompt_id, batch_no, attempt, request, reply);
      if (reply.status == 200) break;
      if (!retryable(reply) || attempt >= config.max_retries) {
        throw CollectionError("prompt " + prompt.prompt_id + ": request failed (status " +
                                  std::to_string(reply.status) + (reply.transport_error.empty() ? "" : ", " + reply.transport_error) +
                                  ") after " + std::to_string(attempt + 1) + " attempt(s)",
                              result.completions);
      }
      const double scale = std::pow(options.backoff_factor, attempt) * (1.0 + jitter(rng));
      sleep(std::chrono::milliseconds(static_cast<long>(options.backoff_base.count() * scale)));
    }
    result.raw_responses.push_back(reply.body);

    std::vector<std::string> texts;
    try {
      texts = parse_choices(reply.body);
    } catch (const ParseError& ex) {
      throw CollectionError("prompt " + prompt.prompt_id + ": " + ex.what(), result.completions);
    }
    attempts += n;
    for (auto& text : texts) {
      if (static_cast<int>(result.completions.size()) >= plan.target_n) break;
      const auto seq = static_cast<std::uint32_t>(result.completions.size());
      auto c = corpus::make_completion(prompt.prompt_id, seq, std::move(text), batch_no, rules);
      if (c.compliant) {
        result.completions.push_back(std::move(c));
      } else {
        // Numbered after the compliant range so (prompt_id, sequence_no) stays unique.
        c.sequence_no = static_cast<std::uint32_t>(plan.target_n + result.rejected.size());
        result.rejected.push_back(std::move(c));
      }
    }
    ++batch_no;
  }
  return result;
}

std::vector<CollectionResult> collect_all(std::span<const corpus::PromptSpec> prompts,
                                          const CollectionPlan& plan, const EndpointConfig& config,
                                          std::span<const corpus::RefusalRule> rules,
                                          ChatTransport& transport, int max_in_flight,
                                          const CollectOptions& options) {
  if (max_in_flight < 1) throw ValidationError("max_in_flight must be >= 1");
  std::vector<CollectionResult> results(prompts.size());
  std::vector<std::exception_ptr> errors(prompts.size());
  std::atomic<std::size_t> next{0};
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(max_in_flight), prompts.size());
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < prompts.size(); i = next++) {
        try {
          results[i] = collect(prompts[i], plan, config, rules, transport, options);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

}  // namespace hbias::llm
