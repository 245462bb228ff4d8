#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <string>

#include "dbqa/gateway.hpp"

namespace dbqa {

struct HttpProviderConfig {
    std::string id;
    std::string base_url;      // e.g. https://api.openai.com/v1
    std::string api_key_env;   // environment variable holding the key; never persisted
    std::map<std::string, std::string> model_names;  // harness model_id -> remote model
    std::chrono::seconds timeout{120};
    double requests_per_minute = 60.0;
};

/// Chat-completions wire format: message array in, choice array out.
json build_chat_body(const ChatRequest& req, const std::string& remote_model);
ChatResponse parse_chat_body(const std::string& body);

class HttpChatProvider : public ChatProvider {
public:
    explicit HttpChatProvider(HttpProviderConfig config);
    std::string id() const override { return config_.id; }
    ChatResponse complete(const ChatRequest& req) override;

private:
    HttpProviderConfig config_;
    std::string origin_;       // scheme://host[:port]
    std::string path_prefix_;  // e.g. /v1
};

/// Registers every provider in a providers config:
///   {"providers": [
///      {"id": "openai", "kind": "http", "base_url": "...", "api_key_env": "OPENAI_API_KEY",
///       "requests_per_minute": 60, "models": {"gpt-4": "gpt-4-0613"}},
///      {"id": "fixtures", "kind": "scripted", "fixtures": "fixtures.json", "models": ["judge"]}]}
/// Relative fixture paths resolve against base_dir.
void configure_gateway(Gateway& gw, const json& config, const std::filesystem::path& base_dir);

}  // namespace dbqa
