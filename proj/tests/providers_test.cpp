#include <gtest/gtest.h>
#include <httplib.h>

#include <cstdlib>
#include <thread>

#include "dbqa/providers.hpp"
#include "test_support.hpp"

using namespace dbqa;
using dbqa::testkit::TempDir;

namespace {

// Minimal chat-completions endpoint on a random local port.
class FakeServer {
public:
    explicit FakeServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Post("/v1/chat/completions", std::move(handler));
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~FakeServer() {
        server_.stop();
        thread_.join();
    }
    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

ChatRequest request(const std::string& model) {
    ChatRequest r;
    r.model_id = model;
    r.messages = {{Role::system, "be brief"}, {Role::user, "hi"}};
    r.temperature = 0.7;
    r.max_output_tokens = 64;
    r.seed = 9;
    return r;
}

}  // namespace

TEST(WireFormat, BuildBody) {
    json body = build_chat_body(request("local"), "remote-model");
    EXPECT_EQ(body["model"], "remote-model");
    EXPECT_EQ(body["messages"].size(), 2u);
    EXPECT_EQ(body["messages"][0]["role"], "system");
    EXPECT_EQ(body["messages"][1]["content"], "hi");
    EXPECT_DOUBLE_EQ(body["temperature"].get<double>(), 0.7);
    EXPECT_EQ(body["max_tokens"], 64);
    EXPECT_EQ(body["seed"], 9);
}

TEST(WireFormat, ParseBody) {
    auto r = parse_chat_body(
        R"({"choices":[{"message":{"role":"assistant","content":"hello"},"finish_reason":"length"}],
            "usage":{"prompt_tokens":5,"completion_tokens":2}})");
    EXPECT_EQ(r.content, "hello");
    EXPECT_EQ(r.finish_reason, FinishReason::length);
    EXPECT_EQ(r.usage.prompt_tokens, 5);
    EXPECT_THROW(parse_chat_body("not json"), TransportError);
    EXPECT_THROW(parse_chat_body(R"({"choices":[]})"), TransportError);
}

TEST(HttpProvider, RoundTripThroughLocalServer) {
    std::string seen_auth, seen_model;
    FakeServer server([&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        seen_model = json::parse(req.body)["model"];
        res.set_content(R"({"choices":[{"message":{"content":"pong"},"finish_reason":"stop"}]})",
                        "application/json");
    });
    ::setenv("DBQA_TEST_KEY", "secret", 1);
    HttpProviderConfig cfg;
    cfg.id = "fake";
    cfg.base_url = server.base_url();
    cfg.api_key_env = "DBQA_TEST_KEY";
    cfg.model_names = {{"local", "remote"}};
    HttpChatProvider provider(cfg);
    EXPECT_EQ(provider.complete(request("local")).content, "pong");
    EXPECT_EQ(seen_auth, "Bearer secret");
    EXPECT_EQ(seen_model, "remote");
}

TEST(HttpProvider, ServerErrorsBecomeRetriedTransportErrors) {
    int hits = 0;
    FakeServer server([&](const httplib::Request&, httplib::Response& res) {
        ++hits;
        res.status = 503;
        res.set_content("busy", "text/plain");
    });
    Gateway gw(GatewayOptions{false, std::nullopt, 3, std::chrono::milliseconds(0)});
    configure_gateway(gw,
                      json{{"providers",
                            {{{"id", "fake"}, {"kind", "http"}, {"base_url", server.base_url()},
                              {"requests_per_minute", 0}, {"models", {"local"}}}}}},
                      ".");
    EXPECT_THROW(gw.complete(request("local")), TransportError);
    EXPECT_EQ(hits, 3);
}

TEST(HttpProvider, UnreachableHostIsTransportError) {
    HttpProviderConfig cfg;
    cfg.id = "dead";
    cfg.base_url = "http://127.0.0.1:1/v1";
    cfg.model_names = {{"m", "m"}};
    cfg.timeout = std::chrono::seconds(2);
    HttpChatProvider provider(cfg);
    EXPECT_THROW(provider.complete(request("m")), TransportError);
}

TEST(ConfigureGateway, ScriptedProviderFromFile) {
    TempDir dir;
    write_file_atomic(dir / "fx.json", R"({"rules": [{"match": "hi", "response": "hello"}]})");
    Gateway gw;
    configure_gateway(gw,
                      json::parse(R"({"providers": [{"id": "fx", "kind": "scripted",
                                      "fixtures": "fx.json", "models": ["a", "b"]}]})"),
                      dir.path());
    EXPECT_EQ(gw.complete(request("a")).content, "hello");
    EXPECT_EQ(gw.complete(request("b")).content, "hello");
    EXPECT_THROW(configure_gateway(gw, json::parse(R"({"providers": [{"id": "x", "kind": "carrier-pigeon"}]})"),
                                   dir.path()),
                 ConfigError);
}
