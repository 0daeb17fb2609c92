#include <gtest/gtest.h>
#include <httplib.h>

#include <deque>
#include <json.hpp>
#include <mutex>
#include <random>
#include <thread>

#include "hbias/error.hpp"
#include "hbias/llm_client.hpp"
#include "hbias/util.hpp"
#include "support/temp_dir.hpp"

namespace hbias::llm {
namespace {

using nlohmann::json;

std::string choices_body(const std::vector<std::string>& texts) {
  json j;
  j["choices"] = json::array();
  // Deliberately reversed: the client must order by index.
  for (std::size_t i = texts.size(); i-- > 0;) {
    j["choices"].push_back({{"index", i}, {"message", {{"role", "assistant"}, {"content", texts[i]}}}});
  }
  return j.dump();
}

// Answers each request from a script; once the script runs out it produces
// `n` texts from the fallback generator.
class ScriptedTransport final : public ChatTransport {
 public:
  std::deque<HttpReply> script;
  std::function<std::string(int)> fallback = [](int i) { return "A compliant text number " + std::to_string(i); };
  std::vector<json> requests;
  int generated = 0;

  HttpReply post(const json& request) override {
    std::lock_guard lock(mu_);
    requests.push_back(request);
    if (!script.empty()) {
      auto r = script.front();
      script.pop_front();
      return r;
    }
    std::vector<std::string> texts;
    for (int i = 0; i < request.at("n").get<int>(); ++i) texts.push_back(fallback(generated++));
    return {200, choices_body(texts), {}};
  }

 private:
  std::mutex mu_;
};

EndpointConfig test_config() {
  EndpointConfig c;
  c.base_url = "http://localhost";
  c.model_id = "test-model";
  c.per_request_max = 128;
  return c;
}

corpus::PromptSpec test_prompt() {
  const std::array f{TextFormat::kStory};
  const std::array r{Race::kAfrican};
  const std::array g{Gender::kMan};
  return corpus::build_prompt_matrix(f, r, g, corpus::kDefaultTemplate).at(0);
}

CollectOptions no_sleep() {
  CollectOptions o;
  o.sleep = [](std::chrono::milliseconds) {};
  return o;
}

TEST(PlanBatches, FiveHundredInBatchesOf128) {
  EXPECT_EQ(plan_batches(500, 128).batch_sizes, (std::vector<int>{128, 128, 128, 116}));
}

TEST(PlanBatches, SingleBatchAndRemainder) {
  EXPECT_EQ(plan_batches(100, 128).batch_sizes, (std::vector<int>{100}));
  EXPECT_EQ(plan_batches(7, 3).batch_sizes, (std::vector<int>{3, 3, 1}));
}

TEST(PlanBatches, SumAndMaxHoldForRandomInputs) {
  std::mt19937 rng(9);
  for (int trial = 0; trial < 500; ++trial) {
    const int target = 1 + static_cast<int>(rng() % 2000);
    const int cap = 1 + static_cast<int>(rng() % 300);
    const auto p = plan_batches(target, cap);
    int sum = 0;
    for (int b : p.batch_sizes) {
      EXPECT_GE(b, 1);
      EXPECT_LE(b, cap);
      sum += b;
    }
    EXPECT_EQ(sum, target);
  }
  EXPECT_THROW(plan_batches(0, 5), ValidationError);
}

TEST(EndpointConfig, Invariants) {
  auto c = test_config();
  EXPECT_NO_THROW(c.validate());
  c.per_request_max = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = test_config();
  c.timeout = std::chrono::milliseconds(0);
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Request, WireShape) {
  auto c = test_config();
  c.sampling_params["temperature"] = 0.7;
  const auto req = build_request(test_prompt(), 12, c);
  EXPECT_EQ(req["model"], "test-model");
  EXPECT_EQ(req["n"], 12);
  EXPECT_EQ(req["messages"][0]["role"], "system");
  EXPECT_EQ(req["messages"][0]["content"], "chatbot");
  EXPECT_EQ(req["messages"][1]["role"], "user");
  EXPECT_EQ(req["messages"][1]["content"], "Write a 30-word story about an African American man.");
  EXPECT_EQ(req["temperature"], 0.7);
}

TEST(Request, ChoicesAreOrderedByIndex) {
  EXPECT_EQ(parse_choices(choices_body({"a", "b", "c"})), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_THROW(parse_choices("{}"), ParseError);
  EXPECT_THROW(parse_choices("not json"), ParseError);
}

TEST(Collect, AlwaysCompliantFollowsThePlan) {
  ScriptedTransport t;
  auto c = test_config();
  c.per_request_max = 4;
  const auto r = collect(test_prompt(), plan_batches(10, 4), c, corpus::default_refusal_rules(), t, no_sleep());
  ASSERT_EQ(r.completions.size(), 10U);
  EXPECT_TRUE(r.rejected.empty());
  ASSERT_EQ(t.requests.size(), 3U);
  EXPECT_EQ(t.requests[0]["n"], 4);
  EXPECT_EQ(t.requests[2]["n"], 2);
  for (std::uint32_t i = 0; i < 10; ++i) {
    EXPECT_EQ(r.completions[i].sequence_no, i);
    EXPECT_EQ(r.completions[i].batch_no, i / 4);
    EXPECT_EQ(r.completions[i].prompt_id, test_prompt().prompt_id);
  }
  EXPECT_EQ(r.raw_responses.size(), 3U);
}

TEST(Collect, RefusalsAreReplaced) {
  ScriptedTransport t;
  t.script.push_back({200, choices_body({"I'm sorry, I cannot.", "Fine text one.", "As an AI language model...",
                                         "Fine text two.", "Fine text three."}),
                      {}});
  const auto r = collect(test_prompt(), plan_batches(5, 128), test_config(), corpus::default_refusal_rules(), t,
                         no_sleep());
  ASSERT_EQ(r.completions.size(), 5U);
  ASSERT_EQ(r.rejected.size(), 2U);
  EXPECT_EQ(t.requests.size(), 2U);
  EXPECT_EQ(t.requests[1]["n"], 2);  // follow-up for exactly the missing texts
  EXPECT_EQ(r.completions[0].text, "Fine text one.");
  EXPECT_EQ(r.completions[3].batch_no, 1U);
  for (std::uint32_t i = 0; i < 5; ++i) EXPECT_EQ(r.completions[i].sequence_no, i);
  EXPECT_EQ(r.rejected[0].sequence_no, 5U);
  EXPECT_EQ(r.rejected[1].sequence_no, 6U);
  std::vector<corpus::Completion> all = r.completions;
  all.insert(all.end(), r.rejected.begin(), r.rejected.end());
  const std::array spec{test_prompt()};
  EXPECT_EQ(corpus::compliance_tally(all, spec).total, 2U);
}

TEST(Collect, AlwaysRefusingSaturatesAfterTwentyFiveAttempts) {
  ScriptedTransport t;
  t.fallback = [](int) { return std::string("I'm sorry, but I can't."); };
  EXPECT_THROW(collect(test_prompt(), plan_batches(5, 128), test_config(), corpus::default_refusal_rules(), t,
                       no_sleep()),
               SaturationError);
  EXPECT_EQ(t.generated, 25);
}

TEST(Collect, RetriesWithBackoffThenSucceeds) {
  ScriptedTransport t;
  t.script.push_back({429, "rate limited", {}});
  t.script.push_back({0, "", "connection refused"});
  t.script.push_back({503, "busy", {}});
  std::vector<long> sleeps;
  auto o = no_sleep();
  o.sleep = [&](std::chrono::milliseconds d) { sleeps.push_back(d.count()); };
  const auto r = collect(test_prompt(), plan_batches(3, 128), test_config(), corpus::default_refusal_rules(), t, o);
  EXPECT_EQ(r.completions.size(), 3U);
  ASSERT_EQ(sleeps.size(), 3U);
  // base 1 s, factor 2, jitter in [0, 1): attempt k sleeps in [2^k, 2^(k+1)) seconds.
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_GE(sleeps[k], 1000L << k);
    EXPECT_LT(sleeps[k], 2000L << k);
  }
}

TEST(Collect, TransportFailureAfterRetriesCarriesPartialProgress) {
  ScriptedTransport t;
  t.script.push_back({200, choices_body({"one", "two"}), {}});
  for (int i = 0; i < 10; ++i) t.script.push_back({500, "down", {}});
  auto c = test_config();
  c.per_request_max = 2;
  c.max_retries = 3;
  try {
    collect(test_prompt(), plan_batches(4, 2), c, corpus::default_refusal_rules(), t, no_sleep());
    FAIL() << "expected CollectionError";
  } catch (const CollectionError& e) {
    EXPECT_EQ(e.partial().size(), 2U);
    EXPECT_EQ(t.requests.size(), 1U + 4U);  // first batch, then 1 + 3 retries
  }
}

TEST(Collect, ClientErrorsAreNotRetried) {
  ScriptedTransport t;
  t.script.push_back({401, "unauthorized", {}});
  EXPECT_THROW(collect(test_prompt(), plan_batches(3, 128), test_config(), corpus::default_refusal_rules(), t,
                       no_sleep()),
               CollectionError);
  EXPECT_EQ(t.requests.size(), 1U);
}

TEST(Collect, CollectAllKeepsPromptOrder) {
  ScriptedTransport t;
  const auto prompts = corpus::default_prompt_matrix();
  const std::vector<corpus::PromptSpec> some(prompts.begin(), prompts.begin() + 9);
  const auto results = collect_all(some, plan_batches(3, 128), test_config(), corpus::default_refusal_rules(), t, 4,
                                   no_sleep());
  ASSERT_EQ(results.size(), some.size());
  for (std::size_t i = 0; i < some.size(); ++i) {
    ASSERT_EQ(results[i].completions.size(), 3U);
    EXPECT_EQ(results[i].completions[0].prompt_id, some[i].prompt_id);
  }
}

TEST(Transcript, RecordedSessionReplaysIdentically) {
  testing::TempDir dir;
  ScriptedTransport live;
  live.script.push_back({503, "busy", {}});
  live.script.push_back({200, choices_body({"I cannot.", "Alpha.", "Beta."}), {}});
  TranscriptLog log(dir / "t.jsonl");
  auto o = no_sleep();
  o.transcript = &log;
  const auto first = collect(test_prompt(), plan_batches(3, 128), test_config(), corpus::default_refusal_rules(), live, o);

  ReplayTransport replay(dir / "t.jsonl");
  const auto second =
      collect(test_prompt(), plan_batches(3, 128), test_config(), corpus::default_refusal_rules(), replay, no_sleep());
  ASSERT_EQ(first.completions.size(), second.completions.size());
  for (std::size_t i = 0; i < first.completions.size(); ++i) {
    EXPECT_EQ(first.completions[i].text, second.completions[i].text);
    EXPECT_EQ(first.completions[i].batch_no, second.completions[i].batch_no);
  }
  EXPECT_EQ(first.raw_responses, second.raw_responses);
  const auto lines = split(read_file(dir / "t.jsonl"), '\n');
  EXPECT_EQ(json::parse(lines[0])["status"], 503);
}

TEST(HttpTransport, TalksToAChatCompletionsServer) {
  httplib::Server server;
  std::mutex mu;
  std::vector<json> seen;
  std::string auth;
  int calls = 0;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    std::lock_guard lock(mu);
    seen.push_back(json::parse(req.body));
    auth = req.get_header_value("Authorization");
    if (calls++ == 0) {
      res.status = 429;
      return;
    }
    std::vector<std::string> texts;
    for (int i = 0; i < seen.back()["n"].get<int>(); ++i) texts.push_back("Served text " + std::to_string(i));
    res.set_content(choices_body(texts), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ::setenv("HBIAS_TEST_KEY", "sk-test", 1);
  auto c = test_config();
  c.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
  c.api_key_env = "HBIAS_TEST_KEY";
  c.timeout = std::chrono::milliseconds(5000);
  HttpChatTransport transport(c);
  const auto r = collect(test_prompt(), plan_batches(4, 128), c, corpus::default_refusal_rules(), transport, no_sleep());
  server.stop();
  th.join();

  ASSERT_EQ(r.completions.size(), 4U);
  EXPECT_EQ(r.completions[2].text, "Served text 2");
  EXPECT_EQ(calls, 2);
  EXPECT_EQ(auth, "Bearer sk-test");
  EXPECT_EQ(seen.back()["messages"][1]["content"], test_prompt().rendered);
}

TEST(HttpTransport, UnreachableEndpointIsATransportFailure) {
  auto c = test_config();
  c.base_url = "http://127.0.0.1:1";
  c.timeout = std::chrono::milliseconds(500);
  c.max_retries = 1;
  HttpChatTransport transport(c);
  EXPECT_THROW(collect(test_prompt(), plan_batches(2, 128), c, corpus::default_refusal_rules(), transport, no_sleep()),
               CollectionError);
}

}  // namespace
}  // namespace hbias::llm
