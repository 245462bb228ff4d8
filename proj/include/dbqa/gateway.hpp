#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dbqa/core_model.hpp"
#include "dbqa/error.hpp"

namespace dbqa {

enum class Role { system, user, assistant };
std::string_view to_string(Role r);
Role parse_role(std::string_view s);

struct ChatMessage {
    Role role = Role::user;
    std::string content;
    bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
    std::string model_id;
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_output_tokens = 1024;
    std::optional<std::int64_t> seed;

    /// Non-empty messages; first role must be system or user.
    void validate() const;
    /// All message contents joined by newlines; what fixture matchers see.
    std::string joined_content() const;
};

enum class FinishReason { stop, length, error };
std::string_view to_string(FinishReason f);
FinishReason parse_finish_reason(std::string_view s);

struct Usage {
    std::int64_t prompt_tokens = 0;
    std::int64_t completion_tokens = 0;
    bool operator==(const Usage&) const = default;
};

struct ChatResponse {
    std::string content;
    FinishReason finish_reason = FinishReason::stop;
    Usage usage;
    bool operator==(const ChatResponse&) const = default;
};

/// SHA-256 over (model_id, messages, temperature, max_output_tokens, seed).
std::string cache_key(const ChatRequest& req);

class ChatProvider {
public:
    virtual ~ChatProvider() = default;
    virtual std::string id() const = 0;
    /// Throws TransportError for retryable failures.
    virtual ChatResponse complete(const ChatRequest& req) = 0;
    virtual std::size_t estimate_tokens(std::string_view text) const;
};

/// Response served when every substring in `all_of` occurs in the request.
struct FixtureRule {
    std::vector<std::string> all_of;
    std::string response;
};

struct Fixtures {
    std::vector<FixtureRule> rules;
    std::optional<std::string> fallback;

    /// {"rules": [{"all_of": [...] | "match": "...", "response": "..."}], "default": "..."}
    static Fixtures from_json(const json& j);
    static Fixtures load(const std::filesystem::path& file);
};

/// Raised when no fixture matches and there is no default.
class FixtureMissError : public Error {
public:
    using Error::Error;
};

/// Deterministic playback backend; ignores temperature and seed.
class ScriptedProvider : public ChatProvider {
public:
    /// Throws ConfigError when one rule's matcher implies another's.
    explicit ScriptedProvider(Fixtures fixtures, std::string id = "scripted");
    std::string id() const override { return id_; }
    ChatResponse complete(const ChatRequest& req) override;
    std::int64_t calls() const { return calls_.load(); }

private:
    Fixtures fixtures_;
    std::string id_;
    std::atomic<std::int64_t> calls_{0};
};

/// Provider backed by a callable; handy for generated policies.
class CallbackProvider : public ChatProvider {
public:
    using Fn = std::function<ChatResponse(const ChatRequest&)>;
    explicit CallbackProvider(Fn fn, std::string id = "callback")
        : fn_(std::move(fn)), id_(std::move(id)) {}
    std::string id() const override { return id_; }
    ChatResponse complete(const ChatRequest& req) override { return fn_(req); }

private:
    Fn fn_;
    std::string id_;
};

ChatResponse text_response(std::string content);

/// Persistent request cache; one JSON record per line, appended on insert.
class ResponseCache {
public:
    explicit ResponseCache(std::optional<std::filesystem::path> file = std::nullopt);
    std::optional<ChatResponse> get(const std::string& key) const;
    void put(const std::string& key, const ChatResponse& resp);
    std::size_t size() const;

private:
    mutable std::mutex mu_;
    std::optional<std::filesystem::path> file_;
    std::unordered_map<std::string, ChatResponse> entries_;
};

/// Token bucket; capacity equals the per-minute rate.
class RateLimiter {
public:
    explicit RateLimiter(double requests_per_minute);
    void acquire();

private:
    std::mutex mu_;
    double rate_per_sec_;
    double capacity_;
    double tokens_;
    std::chrono::steady_clock::time_point last_;
};

struct GatewayOptions {
    bool cache_enabled = false;
    std::optional<std::filesystem::path> cache_file;
    int max_attempts = 3;
    std::chrono::milliseconds retry_backoff{500};
};

struct GatewayStats {
    std::int64_t requests = 0;
    std::int64_t provider_attempts = 0;
    std::int64_t cache_hits = 0;
    std::int64_t failures = 0;
};

class Gateway {
public:
    explicit Gateway(GatewayOptions options = {});

    /// requests_per_minute <= 0 disables rate limiting for that provider.
    void register_provider(const std::string& model_id, std::shared_ptr<ChatProvider> provider,
                           double requests_per_minute = 0.0);
    bool has_model(const std::string& model_id) const;

    /// Safe for concurrent callers.
    ChatResponse complete(const ChatRequest& req);

    std::size_t estimate_tokens(const std::string& model_id, std::string_view text) const;
    GatewayStats stats() const;

private:
    struct Route {
        std::shared_ptr<ChatProvider> provider;
        std::shared_ptr<RateLimiter> limiter;
    };
    Route route(const std::string& model_id) const;

    GatewayOptions options_;
    std::unique_ptr<ResponseCache> cache_;
    mutable std::mutex mu_;
    std::map<std::string, Route> routes_;
    std::map<std::string, std::shared_ptr<RateLimiter>> limiters_;
    std::atomic<std::int64_t> requests_{0};
    std::atomic<std::int64_t> attempts_{0};
    std::atomic<std::int64_t> cache_hits_{0};
    std::atomic<std::int64_t> failures_{0};
};

/// Builds a ScriptedProvider from fixtures and routes model_id to it.
std::shared_ptr<ScriptedProvider> register_scripted_provider(Gateway& gw,
                                                             const std::string& model_id,
                                                             Fixtures fixtures);

}  // namespace dbqa
