// SPDX-License-Identifier: Apache-2.0
#include "laysum/genclient.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <thread>

using namespace laysum;
using laysum::testing::TempDir;

namespace {

std::string chat_reply(const std::string& content) {
    return nlohmann::json{{"choices", {{{"message", {{"role", "assistant"}, {"content", content}}}}}},
                          {"usage", {{"prompt_tokens", 7}, {"completion_tokens", 3}}}}
        .dump();
}

// Local OpenAI-style server; behaviour is chosen per test.
class StubServer {
public:
    explicit StubServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Post("/v1/chat/completions", [this, handler](const httplib::Request& req, httplib::Response& res) {
            ++hits;
            last_auth = req.get_header_value("Authorization");
            handler(req, res);
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~StubServer() {
        server_.stop();
        thread_.join();
    }
    std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

    std::atomic<int> hits{0};
    std::string last_auth;

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

ClientOptions fast_options(const std::string& endpoint) {
    ClientOptions o;
    o.endpoint = endpoint;
    o.backoff_base = std::chrono::milliseconds(5);
    o.timeout = std::chrono::seconds(10);
    return o;
}

void echo(const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    res.set_content(chat_reply("echo: " + body["messages"][0]["content"].get<std::string>()), "application/json");
}

} // namespace

TEST(CacheKey, Shape) {
    GenerationParams p;
    std::string k = cache_key("hello", p);
    EXPECT_EQ(k.size(), 64u);
    EXPECT_EQ(k.find_first_not_of("0123456789abcdef"), std::string::npos);
    EXPECT_EQ(k, cache_key("hello", p));
    EXPECT_NE(k, cache_key("hello ", p));
    GenerationParams q = p;
    q.temperature = 0.3;
    EXPECT_NE(k, cache_key("hello", q));
    q = p;
    q.model_name = "other";
    EXPECT_NE(k, cache_key("hello", q));
}

TEST(CacheKey, KnownDigest) {
    // sha256("a\0model=default\ntemperature=0.2\ntop_p=0.5\ntop_k=20\nmax_new_tokens=256")
    Sha256 h;
    const std::string input = std::string("a") + '\0' + "model=default\ntemperature=0.2\ntop_p=0.5\ntop_k=20\nmax_new_tokens=256";
    h.update(input);
    EXPECT_EQ(cache_key("a", GenerationParams()), h.hex());
    EXPECT_EQ(GenerationParams().canonical(), "model=default\ntemperature=0.2\ntop_p=0.5\ntop_k=20\nmax_new_tokens=256");
}

TEST(Sha256, Vectors) {
    Sha256 empty;
    EXPECT_EQ(empty.hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    Sha256 abc;
    abc.update("abc");
    EXPECT_EQ(abc.hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Params, Validation) {
    GenerationParams p;
    EXPECT_NO_THROW(p.validate());
    p.top_p = 0.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = GenerationParams();
    p.max_new_tokens = 0;
    EXPECT_THROW(p.validate(), ConfigError);
}

TEST(ParseChat, Shapes) {
    auto e = parse_chat_response(chat_reply("hi"));
    EXPECT_EQ(e.response, "hi");
    EXPECT_EQ(e.prompt_tokens, 7);
    EXPECT_EQ(e.completion_tokens, 3);
    EXPECT_THROW(parse_chat_response("{"), ProtocolError);
    EXPECT_THROW(parse_chat_response(R"({"choices": []})"), ProtocolError);
    EXPECT_THROW(parse_chat_response(R"({"choices": [{"message": {"content": 5}}]})"), ProtocolError);
}

TEST(LiveClient, EchoThenCacheHit) {
    StubServer server(echo);
    TempDir dir;
    auto opts = fast_options(server.endpoint());
    opts.cache_path = dir / "cache.jsonl";
    opts.api_key = "secret";
    auto client = GenClient::live(opts);
    auto r = client->complete_text("FINDINGS: x", GenerationParams());
    EXPECT_EQ(r.text, "echo: FINDINGS: x");
    EXPECT_FALSE(r.from_cache);
    EXPECT_EQ(r.prompt_tokens, 7);
    EXPECT_EQ(server.last_auth, "Bearer secret");
    EXPECT_EQ(client->network_calls(), 1u);

    auto again = client->complete_text("FINDINGS: x", GenerationParams());
    EXPECT_TRUE(again.from_cache);
    EXPECT_EQ(again.text, r.text);
    EXPECT_EQ(client->network_calls(), 1u);

    // A fresh client reads the cache file and never touches the network.
    auto reopened = GenClient::live(opts);
    auto third = reopened->complete_text("FINDINGS: x", GenerationParams());
    EXPECT_TRUE(third.from_cache);
    EXPECT_EQ(third.text, r.text);
    EXPECT_EQ(reopened->network_calls(), 0u);
    EXPECT_EQ(server.hits.load(), 1);
}

TEST(LiveClient, ServerErrorsExhaustRetries) {
    StubServer server([](const httplib::Request&, httplib::Response& res) {
        res.status = 500;
        res.set_content("boom", "text/plain");
    });
    auto client = GenClient::live(fast_options(server.endpoint()));
    try {
        client->complete_text("p", GenerationParams());
        FAIL() << "expected TransientExhaustedError";
    } catch (const TransientExhaustedError& e) {
        EXPECT_EQ(e.attempts(), 3);
    }
    EXPECT_EQ(server.hits.load(), 3);
    EXPECT_EQ(client->network_calls(), 3u);
}

TEST(LiveClient, RecoversAfterTransientFailure) {
    std::atomic<int> calls{0};
    StubServer server([&](const httplib::Request& req, httplib::Response& res) {
        if (calls++ == 0) {
            res.status = 503;
            return;
        }
        echo(req, res);
    });
    auto client = GenClient::live(fast_options(server.endpoint()));
    EXPECT_EQ(client->complete_text("p", GenerationParams()).text, "echo: p");
    EXPECT_EQ(server.hits.load(), 2);
}

TEST(LiveClient, ClientErrorIsPermanent) {
    StubServer server([](const httplib::Request&, httplib::Response& res) {
        res.status = 401;
        res.set_content("no key", "text/plain");
    });
    auto client = GenClient::live(fast_options(server.endpoint()));
    try {
        client->complete_text("p", GenerationParams());
        FAIL() << "expected PermanentError";
    } catch (const PermanentError& e) {
        EXPECT_EQ(e.status(), 401);
    }
    EXPECT_EQ(server.hits.load(), 1);
}

TEST(LiveClient, MalformedBodyIsProtocolError) {
    StubServer server([](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"choices": "nope"})", "application/json");
    });
    auto client = GenClient::live(fast_options(server.endpoint()));
    EXPECT_THROW(client->complete_text("p", GenerationParams()), ProtocolError);
    EXPECT_EQ(server.hits.load(), 1);
}

TEST(LiveClient, ConnectionRefusedIsRetried) {
    int port;
    {
        httplib::Server probe;
        port = probe.bind_to_any_port("127.0.0.1");
    }
    auto opts = fast_options("http://127.0.0.1:" + std::to_string(port));
    opts.timeout = std::chrono::milliseconds(500);
    auto client = GenClient::live(opts);
    EXPECT_THROW(client->complete_text("p", GenerationParams()), TransientExhaustedError);
    EXPECT_EQ(client->network_calls(), 3u);
}

namespace {

class CountingTransport : public Transport {
public:
    HttpReply post(const std::string&, const std::string& body,
                   const std::vector<std::pair<std::string, std::string>>&) override {
        int now = ++active;
        int seen = peak.load();
        while (now > seen && !peak.compare_exchange_weak(seen, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
        --active;
        auto req = nlohmann::json::parse(body);
        return {200, chat_reply(req["messages"][0]["content"].get<std::string>())};
    }
    std::atomic<int> active{0};
    std::atomic<int> peak{0};
};

} // namespace

TEST(LiveClient, BoundsInFlightRequests) {
    auto transport = std::make_shared<CountingTransport>();
    ClientOptions opts;
    opts.max_in_flight = 2;
    auto client = GenClient::live(opts, transport);
    std::vector<std::jthread> threads;
    for (int i = 0; i < 8; ++i) {
        threads.emplace_back([&, i] { client->complete_text("prompt " + std::to_string(i), GenerationParams()); });
    }
    threads.clear();
    EXPECT_LE(transport->peak.load(), 2);
    EXPECT_GE(transport->peak.load(), 1);
    EXPECT_EQ(client->network_calls(), 8u);
}

TEST(ReplayClient, HitsAndMisses) {
    TempDir dir;
    auto transport = std::make_shared<CountingTransport>();
    ClientOptions opts;
    opts.cache_path = dir / "transcript.jsonl";
    auto recorder = GenClient::live(opts, transport);
    recorder->complete_text("known", GenerationParams());

    auto replay = GenClient::replay(dir / "transcript.jsonl");
    EXPECT_EQ(replay->mode(), ClientMode::replay);
    auto r = replay->complete_text("known", GenerationParams());
    EXPECT_EQ(r.text, "known");
    EXPECT_TRUE(r.from_cache);
    try {
        replay->complete_text("unknown", GenerationParams());
        FAIL() << "expected ReplayMiss";
    } catch (const ReplayMiss& e) {
        EXPECT_EQ(e.key(), cache_key("unknown", GenerationParams()));
    }
    EXPECT_EQ(replay->network_calls(), 0u);
    EXPECT_THROW(GenClient::replay(dir / "missing.jsonl"), ConfigError);
}

TEST(LiveClient, NeedsEndpoint) { EXPECT_THROW(GenClient::live(ClientOptions{}), ConfigError); }
