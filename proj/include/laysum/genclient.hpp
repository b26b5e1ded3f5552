// SPDX-License-Identifier: Apache-2.0
#pragma once

// Chat-completion client with retry, an append-only response cache, and a
// replay mode that never touches the network.
//
// Cache / transcript file: one JSON object per line,
//   {"key", "params", "response", "usage": {"prompt_tokens", "completion_tokens"}, "timestamp"}
// keyed by cache_key(prompt, params).

#include "laysum/digest.hpp"
#include "laysum/error.hpp"
#include "laysum/io.hpp"
#include "laysum/promptkit.hpp"

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <semaphore>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

namespace laysum {

struct GenerationParams {
    double temperature = 0.2;
    double top_p = 0.5;
    int top_k = 20;
    int max_new_tokens = static_cast<int>(kDefaultMaxNewTokens);
    std::string model_name = "default";

    void validate() const {
        if (!(temperature >= 0.0 && temperature <= 2.0)) throw ConfigError("temperature must be in [0, 2]");
        if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must be in (0, 1]");
        if (top_k < 0) throw ConfigError("top_k must be >= 0");
        if (max_new_tokens < 1) throw ConfigError("max_new_tokens must be >= 1");
    }

    /// Platform-stable text form: shortest round-trip decimal for the floats.
    std::string canonical() const {
        auto num = [](double v) {
            char buf[64];
            auto r = std::to_chars(buf, buf + sizeof buf, v);
            return std::string(buf, r.ptr);
        };
        return "model=" + model_name + "\ntemperature=" + num(temperature) + "\ntop_p=" + num(top_p) +
               "\ntop_k=" + std::to_string(top_k) + "\nmax_new_tokens=" + std::to_string(max_new_tokens);
    }

    nlohmann::json to_json() const {
        return {{"model", model_name},
                {"temperature", temperature},
                {"top_p", top_p},
                {"top_k", top_k},
                {"max_new_tokens", max_new_tokens}};
    }
};

struct GenResult {
    std::string text;
    int prompt_tokens = 0;
    int completion_tokens = 0;
    std::int64_t latency_ms = 0;
    bool from_cache = false;
};

/// 64 hex chars of SHA-256 over prompt bytes, a NUL, and the canonical params.
inline std::string cache_key(std::string_view prompt_text, const GenerationParams& params) {
    Sha256 h;
    h.update(prompt_text);
    h.update(std::string_view("\0", 1));
    h.update(params.canonical());
    return h.hex();
}

// ---------------------------------------------------------------------------
// Transport

struct HttpReply {
    int status = 0;
    std::string body;
};

/// Connection-level failure (refused, reset, timed out). Always retried.
class TransportFailure : public Error {
public:
    using Error::Error;
};

class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpReply post(const std::string& path, const std::string& body,
                           const std::vector<std::pair<std::string, std::string>>& headers) = 0;
};

class HttpTransport final : public Transport {
public:
    /// `endpoint` is scheme://host[:port][/base-path]; requests go to base-path + path.
    explicit HttpTransport(const std::string& endpoint, std::chrono::milliseconds timeout = std::chrono::seconds(120))
        : timeout_(timeout) {
        auto scheme_end = endpoint.find("://");
        if (scheme_end == std::string::npos) {
            throw ConfigError("endpoint '" + endpoint + "' must start with http:// or https://");
        }
        auto path_start = endpoint.find('/', scheme_end + 3);
        origin_ = endpoint.substr(0, path_start);
        base_path_ = path_start == std::string::npos ? std::string() : endpoint.substr(path_start);
        while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
    }

    HttpReply post(const std::string& path, const std::string& body,
                   const std::vector<std::pair<std::string, std::string>>& headers) override {
        // httplib clients are not safe for concurrent use; one per request.
        httplib::Client cli(origin_);
        auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
        auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
        cli.set_connection_timeout(secs.count(), usecs.count());
        cli.set_read_timeout(secs.count(), usecs.count());
        cli.set_write_timeout(secs.count(), usecs.count());
        httplib::Headers h;
        for (const auto& [k, v] : headers) h.emplace(k, v);
        auto res = cli.Post(base_path_ + path, h, body, "application/json");
        if (!res) {
            throw TransportFailure("request to " + origin_ + base_path_ + path + " failed: " + httplib::to_string(res.error()));
        }
        return {res->status, res->body};
    }

private:
    std::string origin_;
    std::string base_path_;
    std::chrono::milliseconds timeout_;
};

// ---------------------------------------------------------------------------
// Cache

struct CacheEntry {
    std::string response;
    int prompt_tokens = 0;
    int completion_tokens = 0;
};

/// Startup snapshot plus an in-memory overlay; appends go through one writer.
class ResponseCache {
public:
    ResponseCache() = default;

    explicit ResponseCache(std::optional<std::filesystem::path> path, bool writable) : path_(std::move(path)), writable_(writable) {
        if (path_ && std::filesystem::exists(*path_)) {
            io::for_each_line(*path_, [&](std::string_view line, std::size_t number) {
                nlohmann::json obj;
                try {
                    obj = nlohmann::json::parse(line);
                } catch (const nlohmann::json::parse_error& e) {
                    throw ParseError(std::string("malformed cache record: ") + e.what(), number);
                }
                if (!obj.is_object() || !obj.contains("key") || !obj["key"].is_string() || !obj.contains("response") ||
                    !obj["response"].is_string()) {
                    throw ParseError("cache record needs \"key\" and \"response\"", number);
                }
                CacheEntry e;
                e.response = obj["response"].get<std::string>();
                if (auto u = obj.find("usage"); u != obj.end() && u->is_object()) {
                    e.prompt_tokens = u->value("prompt_tokens", 0);
                    e.completion_tokens = u->value("completion_tokens", 0);
                }
                snapshot_[obj["key"].get<std::string>()] = std::move(e);
            });
        } else if (!writable_ && path_) {
            throw ConfigError("transcript " + path_->string() + " does not exist");
        }
    }

    std::optional<CacheEntry> get(const std::string& key) const {
        if (auto it = snapshot_.find(key); it != snapshot_.end()) return it->second;
        std::shared_lock lock(overlay_mutex_);
        if (auto it = overlay_.find(key); it != overlay_.end()) return it->second;
        return std::nullopt;
    }

    void put(const std::string& key, const GenerationParams& params, const CacheEntry& entry) {
        std::unique_lock lock(overlay_mutex_);
        overlay_[key] = entry;
        if (!path_ || !writable_) return;
        if (path_->has_parent_path()) std::filesystem::create_directories(path_->parent_path());
        std::ofstream out(*path_, std::ios::app | std::ios::binary);
        if (!out) throw Error("cannot append to cache " + path_->string());
        nlohmann::json rec{{"key", key},
                           {"params", params.to_json()},
                           {"response", entry.response},
                           {"usage", {{"prompt_tokens", entry.prompt_tokens}, {"completion_tokens", entry.completion_tokens}}},
                           {"timestamp", utc_timestamp()}};
        out << rec.dump() << '\n';
        out.flush();
    }

    std::size_t size() const {
        std::shared_lock lock(overlay_mutex_);
        return snapshot_.size() + overlay_.size();
    }

private:
    static std::string utc_timestamp() {
        std::time_t t = std::time(nullptr);
        std::tm tm{};
        gmtime_r(&t, &tm);
        char buf[32];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
        return buf;
    }

    std::optional<std::filesystem::path> path_;
    bool writable_ = false;
    std::unordered_map<std::string, CacheEntry> snapshot_;
    mutable std::shared_mutex overlay_mutex_;
    std::unordered_map<std::string, CacheEntry> overlay_;
};

// ---------------------------------------------------------------------------
// Client

enum class ClientMode { live, replay };

struct ClientOptions {
    std::string endpoint;
    /// Bearer token; read from LAYSUM_API_KEY when unset.
    std::optional<std::string> api_key;
    std::optional<std::filesystem::path> cache_path;
    int max_attempts = 3;
    std::chrono::milliseconds backoff_base{1000};
    double jitter = 0.25;
    std::size_t max_in_flight = 4;
    std::chrono::milliseconds timeout{120000};
    std::uint64_t seed = 0;
};

inline nlohmann::json chat_request_body(std::string_view prompt, const GenerationParams& params) {
    return {{"model", params.model_name},
            {"messages", nlohmann::json::array({{{"role", "user"}, {"content", std::string(prompt)}}})},
            {"temperature", params.temperature},
            {"top_p", params.top_p},
            {"max_tokens", params.max_new_tokens},
            {"top_k", params.top_k}};
}

/// Extracts the first choice's content and usage counts; throws ProtocolError on any shape mismatch.
inline CacheEntry parse_chat_response(std::string_view body) {
    nlohmann::json obj;
    try {
        obj = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
        throw ProtocolError(std::string("response body is not JSON: ") + e.what());
    }
    if (!obj.is_object() || !obj.contains("choices") || !obj["choices"].is_array() || obj["choices"].empty()) {
        throw ProtocolError("response has no choices");
    }
    const auto& first = obj["choices"][0];
    if (!first.is_object() || !first.contains("message") || !first["message"].is_object() ||
        !first["message"].contains("content") || !first["message"]["content"].is_string()) {
        throw ProtocolError("first choice has no message content");
    }
    CacheEntry e;
    e.response = first["message"]["content"].get<std::string>();
    if (auto u = obj.find("usage"); u != obj.end() && u->is_object()) {
        auto count = [&](const char* k) {
            auto it = u->find(k);
            return it != u->end() && it->is_number_integer() ? it->get<int>() : 0;
        };
        e.prompt_tokens = count("prompt_tokens");
        e.completion_tokens = count("completion_tokens");
    }
    return e;
}

class GenClient {
public:
    static std::unique_ptr<GenClient> live(ClientOptions options, std::shared_ptr<Transport> transport = nullptr) {
        if (!transport) {
            if (options.endpoint.empty()) throw ConfigError("live generation needs an endpoint");
            transport = std::make_shared<HttpTransport>(options.endpoint, options.timeout);
        }
        if (!options.api_key) {
            if (const char* env = std::getenv("LAYSUM_API_KEY"); env && *env) options.api_key = env;
        }
        if (options.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
        if (options.max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
        auto c = std::unique_ptr<GenClient>(new GenClient(ClientMode::live, std::move(options)));
        c->transport_ = std::move(transport);
        c->cache_ = std::make_unique<ResponseCache>(c->options_.cache_path, true);
        return c;
    }

    static std::unique_ptr<GenClient> replay(const std::filesystem::path& transcript) {
        ClientOptions o;
        o.cache_path = transcript;
        auto c = std::unique_ptr<GenClient>(new GenClient(ClientMode::replay, std::move(o)));
        c->cache_ = std::make_unique<ResponseCache>(transcript, false);
        return c;
    }

    GenResult complete(const AssembledPrompt& prompt, const GenerationParams& params) {
        return complete_text(prompt.text, params);
    }

    GenResult complete_text(std::string_view prompt, const GenerationParams& params) {
        params.validate();
        auto start = std::chrono::steady_clock::now();
        const std::string key = cache_key(prompt, params);
        if (auto hit = cache_->get(key)) {
            GenResult r{hit->response, hit->prompt_tokens, hit->completion_tokens, 0, true};
            r.latency_ms = elapsed_ms(start);
            return r;
        }
        if (mode_ == ClientMode::replay) {
            throw ReplayMiss(key);
        }
        CacheEntry entry;
        {
            InFlightGuard guard(in_flight_);
            entry = request_with_retry(prompt, params);
        }
        cache_->put(key, params, entry);
        GenResult r{entry.response, entry.prompt_tokens, entry.completion_tokens, 0, false};
        r.latency_ms = elapsed_ms(start);
        return r;
    }

    ClientMode mode() const noexcept { return mode_; }
    std::size_t network_calls() const noexcept { return network_calls_.load(); }
    const ClientOptions& options() const noexcept { return options_; }

private:
    struct InFlightGuard {
        explicit InFlightGuard(std::counting_semaphore<>& s) : sem(s) { sem.acquire(); }
        ~InFlightGuard() { sem.release(); }
        std::counting_semaphore<>& sem;
    };

    GenClient(ClientMode mode, ClientOptions options)
        : mode_(mode), options_(std::move(options)),
          in_flight_(static_cast<std::ptrdiff_t>(std::max<std::size_t>(1, options_.max_in_flight))),
          rng_(options_.seed) {}

    static std::int64_t elapsed_ms(std::chrono::steady_clock::time_point start) {
        return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
    }

    std::chrono::milliseconds backoff(int attempt) {
        double jitter;
        {
            std::lock_guard lock(rng_mutex_);
            jitter = std::uniform_real_distribution<double>(0.0, options_.jitter)(rng_);
        }
        double ms = static_cast<double>(options_.backoff_base.count()) * std::pow(2.0, attempt - 1) * (1.0 + jitter);
        return std::chrono::milliseconds(static_cast<std::int64_t>(ms));
    }

    CacheEntry request_with_retry(std::string_view prompt, const GenerationParams& params) {
        const std::string body = chat_request_body(prompt, params).dump();
        std::vector<std::pair<std::string, std::string>> headers;
        if (options_.api_key) headers.emplace_back("Authorization", "Bearer " + *options_.api_key);
        std::string last_error;
        for (int attempt = 1; attempt <= options_.max_attempts; ++attempt) {
            try {
                ++network_calls_;
                HttpReply reply = transport_->post("/chat/completions", body, headers);
                if (reply.status >= 200 && reply.status < 300) {
                    return parse_chat_response(reply.body);
                }
                if (reply.status >= 400 && reply.status < 500) {
                    throw PermanentError("generation service returned HTTP " + std::to_string(reply.status) + ": " +
                                             reply.body.substr(0, 200),
                                         reply.status);
                }
                last_error = "HTTP " + std::to_string(reply.status);
            } catch (const TransportFailure& e) {
                last_error = e.what();
            }
            if (attempt < options_.max_attempts) {
                std::this_thread::sleep_for(backoff(attempt));
            }
        }
        throw TransientExhaustedError("generation failed after " + std::to_string(options_.max_attempts) +
                                          " attempts: " + last_error,
                                      options_.max_attempts);
    }

    ClientMode mode_;
    ClientOptions options_;
    std::shared_ptr<Transport> transport_;
    std::unique_ptr<ResponseCache> cache_;
    std::counting_semaphore<> in_flight_;
    std::atomic<std::size_t> network_calls_{0};
    std::mutex rng_mutex_;
    std::mt19937_64 rng_;
};

} // namespace laysum
