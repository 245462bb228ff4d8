#include "dbqa/providers.hpp"

#include <httplib.h>

#include <cstdlib>

#include "dbqa/error.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

json build_chat_body(const ChatRequest& req, const std::string& remote_model) {
    json messages = json::array();
    for (const auto& m : req.messages) {
        messages.push_back({{"role", to_string(m.role)}, {"content", m.content}});
    }
    json body{{"model", remote_model},
              {"messages", messages},
              {"temperature", req.temperature},
              {"max_tokens", req.max_output_tokens}};
    if (req.seed) body["seed"] = *req.seed;
    return body;
}

ChatResponse parse_chat_body(const std::string& body) {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::exception& e) {
        throw TransportError(std::string("unparseable provider response: ") + e.what());
    }
    if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
        throw TransportError("provider response has no choices");
    }
    const json& choice = j["choices"][0];
    ChatResponse r;
    const json& content = choice.at("message").value("content", json(nullptr));
    r.content = content.is_string() ? content.get<std::string>() : std::string{};
    std::string finish = choice.value("finish_reason", std::string("stop"));
    r.finish_reason = finish == "length" ? FinishReason::length : FinishReason::stop;
    if (j.contains("usage") && j["usage"].is_object()) {
        r.usage.prompt_tokens = j["usage"].value("prompt_tokens", std::int64_t{0});
        r.usage.completion_tokens = j["usage"].value("completion_tokens", std::int64_t{0});
    }
    return r;
}

HttpChatProvider::HttpChatProvider(HttpProviderConfig config) : config_(std::move(config)) {
    const std::string& url = config_.base_url;
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("base_url lacks a scheme: " + url);
    auto path_start = url.find('/', scheme_end + 3);
    origin_ = url.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
    while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
}

ChatResponse HttpChatProvider::complete(const ChatRequest& req) {
    auto it = config_.model_names.find(req.model_id);
    const std::string& remote = it == config_.model_names.end() ? req.model_id : it->second;

    httplib::Client client(origin_);
    client.set_connection_timeout(config_.timeout);
    client.set_read_timeout(config_.timeout);
    httplib::Headers headers;
    if (!config_.api_key_env.empty()) {
        const char* key = std::getenv(config_.api_key_env.c_str());
        if (!key || !*key) {
            throw ConfigError("environment variable " + config_.api_key_env + " is not set");
        }
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    auto res = client.Post(path_prefix_ + "/chat/completions", headers,
                           build_chat_body(req, remote).dump(), "application/json");
    if (!res) {
        throw TransportError("request to " + origin_ + " failed: " + httplib::to_string(res.error()));
    }
    if (res->status != 200) {
        throw TransportError("provider returned HTTP " + std::to_string(res->status) + ": " +
                             res->body.substr(0, 300));
    }
    return parse_chat_body(res->body);
}

void configure_gateway(Gateway& gw, const json& config, const std::filesystem::path& base_dir) {
    for (const auto& p : config.value("providers", json::array())) {
        const std::string kind = p.value("kind", std::string("http"));
        const std::string id = p.at("id").get<std::string>();
        if (kind == "scripted") {
            std::filesystem::path file = p.at("fixtures").get<std::string>();
            if (file.is_relative()) file = base_dir / file;
            auto provider = std::make_shared<ScriptedProvider>(Fixtures::load(file), id);
            for (const auto& model : p.at("models")) {
                gw.register_provider(model.get<std::string>(), provider);
            }
        } else if (kind == "http") {
            HttpProviderConfig hc;
            hc.id = id;
            hc.base_url = p.at("base_url").get<std::string>();
            hc.api_key_env = p.value("api_key_env", std::string{});
            hc.requests_per_minute = p.value("requests_per_minute", 60.0);
            hc.timeout = std::chrono::seconds(p.value("timeout_seconds", 120));
            const json& models = p.at("models");
            if (models.is_object()) {
                for (const auto& [k, v] : models.items()) hc.model_names[k] = v.get<std::string>();
            } else {
                for (const auto& m : models) hc.model_names[m.get<std::string>()] = m.get<std::string>();
            }
            double rpm = hc.requests_per_minute;
            auto names = hc.model_names;
            auto provider = std::make_shared<HttpChatProvider>(std::move(hc));
            for (const auto& [model, remote] : names) gw.register_provider(model, provider, rpm);
        } else {
            throw ConfigError("unknown provider kind '" + kind + "'");
        }
    }
}

}  // namespace dbqa
