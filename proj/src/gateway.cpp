#include "dbqa/gateway.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <thread>

#include "dbqa/sandbox.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

std::string_view to_string(Role r) {
    switch (r) {
        case Role::system: return "system";
        case Role::user: return "user";
        case Role::assistant: return "assistant";
    }
    return "?";
}

Role parse_role(std::string_view s) {
    if (s == "system") return Role::system;
    if (s == "user") return Role::user;
    if (s == "assistant") return Role::assistant;
    throw ParseError("unknown role '" + std::string(s) + "'");
}

std::string_view to_string(FinishReason f) {
    switch (f) {
        case FinishReason::stop: return "stop";
        case FinishReason::length: return "length";
        case FinishReason::error: return "error";
    }
    return "?";
}

FinishReason parse_finish_reason(std::string_view s) {
    if (s == "stop") return FinishReason::stop;
    if (s == "length") return FinishReason::length;
    if (s == "error") return FinishReason::error;
    throw ParseError("unknown finish_reason '" + std::string(s) + "'");
}

void ChatRequest::validate() const {
    if (messages.empty()) throw ConfigError("chat request has no messages");
    if (messages.front().role == Role::assistant) {
        throw ConfigError("chat request must start with a system or user message");
    }
}

std::string ChatRequest::joined_content() const {
    std::string out;
    for (std::size_t i = 0; i < messages.size(); ++i) {
        if (i) out += '\n';
        out += messages[i].content;
    }
    return out;
}

std::string cache_key(const ChatRequest& req) {
    json msgs = json::array();
    for (const auto& m : req.messages) msgs.push_back({to_string(m.role), m.content});
    json material{{"model_id", req.model_id},
                  {"messages", msgs},
                  {"temperature", format_real(req.temperature)},
                  {"max_output_tokens", req.max_output_tokens},
                  {"seed", req.seed ? json(*req.seed) : json(nullptr)}};
    return sha256_hex(material.dump());
}

std::size_t ChatProvider::estimate_tokens(std::string_view text) const {
    return dbqa::estimate_tokens(text);
}

ChatResponse text_response(std::string content) {
    ChatResponse r;
    r.usage.completion_tokens = static_cast<std::int64_t>(estimate_tokens(content));
    r.content = std::move(content);
    return r;
}

// ---------------------------------------------------------------------------
// Scripted playback

namespace {

// True when every text containing all of `b` necessarily contains all of `a`.
bool implies(const FixtureRule& b, const FixtureRule& a) {
    return std::all_of(a.all_of.begin(), a.all_of.end(), [&](const std::string& needle) {
        return std::any_of(b.all_of.begin(), b.all_of.end(), [&](const std::string& hay) {
            return hay.find(needle) != std::string::npos;
        });
    });
}

}  // namespace

Fixtures Fixtures::from_json(const json& j) {
    Fixtures f;
    for (const auto& r : j.value("rules", json::array())) {
        FixtureRule rule;
        if (r.contains("all_of")) {
            r.at("all_of").get_to(rule.all_of);
        } else {
            rule.all_of.push_back(r.at("match").get<std::string>());
        }
        r.at("response").get_to(rule.response);
        f.rules.push_back(std::move(rule));
    }
    if (j.contains("default") && !j.at("default").is_null()) {
        f.fallback = j.at("default").get<std::string>();
    }
    return f;
}

Fixtures Fixtures::load(const std::filesystem::path& file) {
    try {
        return from_json(json::parse(read_file(file)));
    } catch (const json::exception& e) {
        throw ParseError(file.string() + ": " + e.what());
    }
}

ScriptedProvider::ScriptedProvider(Fixtures fixtures, std::string id)
    : fixtures_(std::move(fixtures)), id_(std::move(id)) {
    const auto& rules = fixtures_.rules;
    for (std::size_t i = 0; i < rules.size(); ++i) {
        if (rules[i].all_of.empty() ||
            std::any_of(rules[i].all_of.begin(), rules[i].all_of.end(),
                        [](const std::string& s) { return s.empty(); })) {
            throw ConfigError("fixture rule " + std::to_string(i) +
                              " has an empty matcher; use the default response instead");
        }
        for (std::size_t k = 0; k < i; ++k) {
            if (implies(rules[i], rules[k]) || implies(rules[k], rules[i])) {
                throw ConfigError("fixture rules " + std::to_string(k) + " and " +
                                  std::to_string(i) + " overlap");
            }
        }
    }
}

ChatResponse ScriptedProvider::complete(const ChatRequest& req) {
    ++calls_;
    const std::string text = req.joined_content();
    const FixtureRule* hit = nullptr;
    for (const auto& rule : fixtures_.rules) {
        bool all = std::all_of(rule.all_of.begin(), rule.all_of.end(), [&](const std::string& s) {
            return text.find(s) != std::string::npos;
        });
        if (!all) continue;
        if (hit) throw ConfigError("ambiguous fixtures for request " + cache_key(req));
        hit = &rule;
    }
    if (hit) return text_response(hit->response);
    if (fixtures_.fallback) return text_response(*fixtures_.fallback);
    throw FixtureMissError("no fixture matches request " + cache_key(req));
}

std::shared_ptr<ScriptedProvider> register_scripted_provider(Gateway& gw,
                                                             const std::string& model_id,
                                                             Fixtures fixtures) {
    auto provider = std::make_shared<ScriptedProvider>(std::move(fixtures));
    gw.register_provider(model_id, provider);
    return provider;
}

// ---------------------------------------------------------------------------
// Cache

namespace {

json cache_record(const std::string& key, const ChatResponse& r) {
    return json{{"key", key},
                {"content", r.content},
                {"finish_reason", to_string(r.finish_reason)},
                {"prompt_tokens", r.usage.prompt_tokens},
                {"completion_tokens", r.usage.completion_tokens}};
}

}  // namespace

ResponseCache::ResponseCache(std::optional<std::filesystem::path> file) : file_(std::move(file)) {
    if (!file_ || !std::filesystem::exists(*file_)) return;
    std::size_t skipped = 0;
    for (const auto& line : split_lines(read_file(*file_))) {
        if (trim(line).empty()) continue;
        try {
            json j = json::parse(line);
            ChatResponse r;
            r.content = j.at("content").get<std::string>();
            r.finish_reason = parse_finish_reason(j.at("finish_reason").get<std::string>());
            r.usage.prompt_tokens = j.value("prompt_tokens", std::int64_t{0});
            r.usage.completion_tokens = j.value("completion_tokens", std::int64_t{0});
            entries_.insert_or_assign(j.at("key").get<std::string>(), std::move(r));
        } catch (const std::exception&) {
            ++skipped;  // torn tail of an interrupted append
        }
    }
    if (skipped) spdlog::warn("cache {}: skipped {} unreadable records", file_->string(), skipped);
}

std::optional<ChatResponse> ResponseCache::get(const std::string& key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void ResponseCache::put(const std::string& key, const ChatResponse& resp) {
    std::lock_guard lock(mu_);
    if (!entries_.emplace(key, resp).second) return;
    if (!file_) return;
    if (file_->has_parent_path()) std::filesystem::create_directories(file_->parent_path());
    std::ofstream out(*file_, std::ios::app | std::ios::binary);
    out << cache_record(key, resp).dump() << '\n';
    out.flush();
}

std::size_t ResponseCache::size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
}

// ---------------------------------------------------------------------------
// Rate limiting

RateLimiter::RateLimiter(double requests_per_minute)
    : rate_per_sec_(requests_per_minute / 60.0),
      capacity_(std::max(1.0, requests_per_minute)),
      tokens_(capacity_),
      last_(std::chrono::steady_clock::now()) {}

void RateLimiter::acquire() {
    for (;;) {
        std::chrono::duration<double> wait{};
        {
            std::lock_guard lock(mu_);
            auto now = std::chrono::steady_clock::now();
            tokens_ = std::min(capacity_,
                               tokens_ + std::chrono::duration<double>(now - last_).count() *
                                             rate_per_sec_);
            last_ = now;
            if (tokens_ >= 1.0) {
                tokens_ -= 1.0;
                return;
            }
            wait = std::chrono::duration<double>((1.0 - tokens_) / rate_per_sec_);
        }
        std::this_thread::sleep_for(wait);
    }
}

// ---------------------------------------------------------------------------
// Gateway

Gateway::Gateway(GatewayOptions options) : options_(std::move(options)) {
    if (options_.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
    if (options_.cache_enabled) cache_ = std::make_unique<ResponseCache>(options_.cache_file);
}

void Gateway::register_provider(const std::string& model_id,
                                std::shared_ptr<ChatProvider> provider,
                                double requests_per_minute) {
    if (!provider) throw ConfigError("null provider for model '" + model_id + "'");
    std::lock_guard lock(mu_);
    std::shared_ptr<RateLimiter> limiter;
    if (requests_per_minute > 0.0) {
        auto& shared = limiters_[provider->id()];
        if (!shared) shared = std::make_shared<RateLimiter>(requests_per_minute);
        limiter = shared;
    }
    routes_[model_id] = Route{std::move(provider), std::move(limiter)};
}

bool Gateway::has_model(const std::string& model_id) const {
    std::lock_guard lock(mu_);
    return routes_.count(model_id) != 0;
}

Gateway::Route Gateway::route(const std::string& model_id) const {
    std::lock_guard lock(mu_);
    auto it = routes_.find(model_id);
    if (it == routes_.end()) {
        throw ConfigError("no provider registered for model '" + model_id + "'");
    }
    return it->second;
}

ChatResponse Gateway::complete(const ChatRequest& req) {
    req.validate();
    const Route r = route(req.model_id);
    ++requests_;
    std::string key;
    if (cache_) {
        key = cache_key(req);
        if (auto hit = cache_->get(key)) {
            ++cache_hits_;
            return *hit;
        }
    }
    std::string last_error;
    for (int attempt = 1; attempt <= options_.max_attempts; ++attempt) {
        if (r.limiter) r.limiter->acquire();
        ++attempts_;
        try {
            ChatResponse resp = r.provider->complete(req);
            if (resp.finish_reason == FinishReason::error) {
                throw TransportError("provider reported finish_reason=error");
            }
            if (cache_) cache_->put(key, resp);
            return resp;
        } catch (const TransportError& e) {
            last_error = e.what();
            spdlog::warn("provider {} attempt {}/{} failed: {}", r.provider->id(), attempt,
                         options_.max_attempts, last_error);
            if (attempt < options_.max_attempts && options_.retry_backoff.count() > 0) {
                std::this_thread::sleep_for(options_.retry_backoff * (1 << (attempt - 1)));
            }
        }
    }
    ++failures_;
    throw TransportError("provider " + r.provider->id() + " failed after " +
                             std::to_string(options_.max_attempts) + " attempts: " + last_error,
                         options_.max_attempts);
}

std::size_t Gateway::estimate_tokens(const std::string& model_id, std::string_view text) const {
    return route(model_id).provider->estimate_tokens(text);
}

GatewayStats Gateway::stats() const {
    return GatewayStats{requests_.load(), attempts_.load(), cache_hits_.load(), failures_.load()};
}

}  // namespace dbqa
