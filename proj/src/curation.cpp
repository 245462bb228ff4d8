#include "dbqa/curation.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <array>
#include <charconv>

#include "dbqa/error.hpp"
#include "dbqa/sandbox.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

namespace {
constexpr std::array kActionNames = {"approve", "edit", "reject", "set_category"};
constexpr std::size_t kPreviewChars = 160;
}  // namespace

std::string_view to_string(ReviewActionKind k) { return kActionNames[static_cast<std::size_t>(k)]; }

ReviewActionKind parse_review_action_kind(std::string_view s) {
    for (std::size_t i = 0; i < kActionNames.size(); ++i) {
        if (s == kActionNames[i]) return static_cast<ReviewActionKind>(i);
    }
    throw ValidationError("unknown action '" + std::string(s) + "'");
}

void to_json(json& j, const ReviewAction& v) {
    j = json{{"draft_id", v.draft_id},
             {"action", to_string(v.action)},
             {"payload", v.payload ? json(*v.payload) : json(nullptr)},
             {"actor", v.actor},
             {"timestamp", v.timestamp}};
}

void from_json(const json& j, ReviewAction& v) {
    v.draft_id = j.value("draft_id", "");
    v.action = parse_review_action_kind(j.at("action").get<std::string>());
    if (j.contains("payload") && !j.at("payload").is_null()) {
        v.payload = j.at("payload").get<std::string>();
    } else {
        v.payload.reset();
    }
    v.actor = j.value("actor", "");
    v.timestamp = j.value("timestamp", "");
}

void to_json(json& j, const DraftSummary& v) {
    j = json{{"draft_id", v.draft_id},
             {"stage", to_string(v.stage)},
             {"question_preview", v.question_preview},
             {"proposed_category",
              v.proposed_category ? json(to_string(*v.proposed_category)) : json(nullptr)}};
}

void to_json(json& j, const DraftPage& v) {
    j = json{{"items", v.items}, {"total", v.total}, {"page", v.page}, {"page_size", v.page_size}};
}

void to_json(json& j, const TablePreview& v) {
    j = json{{"table", v.table}, {"row_count", v.row_count}, {"columns", v.columns}, {"rows", v.rows}};
}

void to_json(json& j, const DraftDetail& v) {
    j = json{{"draft", v.draft}, {"preview", v.preview ? json(*v.preview) : json(nullptr)}};
}

CurationService::CurationService(DraftStore store, std::map<std::string, DatabaseSpec> sources,
                                 std::filesystem::path dataset_out)
    : store_(std::move(store)), sources_(std::move(sources)), dataset_out_(std::move(dataset_out)) {}

DraftPage CurationService::list_pending(std::optional<DraftStage> stage_filter, int page,
                                        int page_size) const {
    if (page < 1) throw ValidationError("page must be >= 1");
    if (page_size < 1 || page_size > kMaxPageSize) {
        throw ValidationError("page_size must be in 1.." + std::to_string(kMaxPageSize));
    }
    std::vector<DraftSummary> all;
    for (const auto& d : store_.load_all()) {
        if (stage_filter && d.stage != *stage_filter) continue;
        std::string preview = d.question_text;
        if (preview.size() > kPreviewChars) preview = preview.substr(0, kPreviewChars) + "...";
        all.push_back({d.draft_id, d.stage, std::move(preview), d.proposed_category});
    }
    DraftPage out;
    out.total = static_cast<std::int64_t>(all.size());
    out.page = page;
    out.page_size = page_size;
    std::size_t begin = static_cast<std::size_t>(page - 1) * static_cast<std::size_t>(page_size);
    for (std::size_t i = begin; i < all.size() && i < begin + static_cast<std::size_t>(page_size); ++i) {
        out.items.push_back(std::move(all[i]));
    }
    return out;
}

const DatabaseSpec& CurationService::source_for(const DraftItem& d) const {
    auto it = sources_.find(d.db_id);
    if (it == sources_.end()) {
        throw NotFoundError("source database '" + d.db_id + "' of draft '" + d.draft_id +
                            "' is not loaded");
    }
    return it->second;
}

DraftDetail CurationService::get_draft_detail(const std::string& draft_id) const {
    DraftDetail detail{store_.load(draft_id), std::nullopt};
    if (!detail.draft.injected_inserts) return detail;
    Sandbox box = Sandbox::create(merge_spec(detail.draft, source_for(detail.draft)), kPreviewRows);
    std::vector<TablePreview> tables;
    for (const auto& name : box.table_names()) {
        TablePreview t;
        t.table = name;
        t.row_count = box.count_rows(name);
        std::string quoted = "\"";
        for (char c : name) {
            if (c == '"') quoted += '"';
            quoted += c;
        }
        SqlExecution e = box.execute("SELECT * FROM " + quoted + "\" LIMIT " +
                                     std::to_string(kPreviewRows));
        t.columns = std::move(e.columns);
        t.rows = std::move(e.rows);
        tables.push_back(std::move(t));
    }
    detail.preview = std::move(tables);
    return detail;
}

std::mutex& CurationService::lock_for(const std::string& draft_id) {
    std::lock_guard lk(locks_mu_);
    auto& slot = locks_[draft_id];
    if (!slot) slot = std::make_unique<std::mutex>();
    return *slot;
}

DraftItem CurationService::submit_action(ReviewAction a) {
    if (a.actor.empty()) a.actor = "reviewer";
    if (a.timestamp.empty()) a.timestamp = utc_timestamp();
    const std::string payload = a.payload ? trim(*a.payload) : std::string{};
    if (a.action == ReviewActionKind::edit && payload.empty()) {
        throw ValidationError("edit needs a non-empty payload");
    }
    std::optional<Category> category;
    if (a.action == ReviewActionKind::set_category) {
        try {
            category = parse_category(payload);
        } catch (const ParseError&) {
            throw ValidationError("set_category payload must be conclusive or interpretive");
        }
    }

    std::lock_guard lk(lock_for(a.draft_id));
    DraftItem d = store_.load(a.draft_id);
    auto conflict = [&](const std::string& why) {
        return ConflictError(std::string(to_string(a.action)) + " is not allowed at stage " +
                             std::string(to_string(d.stage)) + ": " + why);
    };
    auto log = [&](std::string action, std::string note) {
        d.review_log.push_back({a.timestamp, a.actor, std::move(action), std::move(note)});
    };

    switch (a.action) {
        case ReviewActionKind::reject:
            if (is_terminal(d.stage)) throw conflict("draft is final");
            d.stage = DraftStage::rejected;
            log("reject", payload);
            break;
        case ReviewActionKind::edit:
            if (d.stage == DraftStage::condensed) {
                log("edit", "question before: " + d.question_text + "\nquestion after: " + payload);
                d.question_text = payload;
            } else if (d.stage == DraftStage::concluded) {
                log("edit", "answer before: " + d.reference_text.value_or("") +
                                "\nanswer after: " + payload);
                d.reference_text = payload;
            } else {
                throw conflict("edits apply to condensed questions or concluded answers");
            }
            break;
        case ReviewActionKind::set_category:
            if (d.stage != DraftStage::classified) throw conflict("draft is not classified");
            log("set_category",
                std::string(d.proposed_category ? to_string(*d.proposed_category) : "none") + " -> " +
                    std::string(to_string(*category)));
            d.proposed_category = category;
            break;
        case ReviewActionKind::approve: {
            if (d.stage != DraftStage::classified) throw conflict("only classified drafts are approved");
            DraftItem confirmed = d;
            confirmed.stage = DraftStage::confirmed;
            try {
                Instance inst = finalize_instance(confirmed, source_for(d));
                if (!dataset_out_.empty()) {
                    std::lock_guard dl(dataset_mu_);
                    append_instance(dataset_out_, inst);
                }
            } catch (const PipelineError& e) {
                log("approve_failed", e.what());
                store_.save(d);
                throw ConflictError(std::string("draft returned to review: ") + e.what());
            }
            d = std::move(confirmed);
            log("approve", payload);
            break;
        }
    }
    store_.save(d);
    return d;
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& msg) {
    send_json(res, status, json{{"error", msg}});
}

int int_param(const httplib::Request& req, const char* name, int fallback) {
    if (!req.has_param(name)) return fallback;
    std::string v = req.get_param_value(name);
    int out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw ValidationError(std::string(name) + " must be an integer");
    }
    return out;
}

template <typename F>
void guarded(httplib::Response& res, F&& body) {
    try {
        body();
    } catch (const ValidationError& e) {
        send_error(res, 400, e.what());
    } catch (const ParseError& e) {
        send_error(res, 400, e.what());
    } catch (const json::exception& e) {
        send_error(res, 400, std::string("malformed body: ") + e.what());
    } catch (const NotFoundError& e) {
        send_error(res, 404, e.what());
    } catch (const ConflictError& e) {
        send_error(res, 409, e.what());
    } catch (const std::exception& e) {
        spdlog::error("curation request failed: {}", e.what());
        send_error(res, 500, e.what());
    }
}

}  // namespace

void mount_curation_routes(httplib::Server& server, CurationService& service, std::string token) {
    if (token.empty()) throw ConfigError("curation service needs a non-empty bearer token");
    const std::string expected = "Bearer " + token;

    server.set_pre_routing_handler([expected](const httplib::Request& req, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Origin", "*");
        res.set_header("Access-Control-Allow-Headers", "Authorization, Content-Type");
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        if (req.method == "OPTIONS") {
            res.status = 204;
            return httplib::Server::HandlerResponse::Handled;
        }
        if (req.path == "/health") return httplib::Server::HandlerResponse::Unhandled;
        if (req.get_header_value("Authorization") != expected) {
            send_error(res, 401, "missing or invalid bearer token");
            return httplib::Server::HandlerResponse::Handled;
        }
        return httplib::Server::HandlerResponse::Unhandled;
    });

    server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, json{{"status", "ok"}});
    });

    server.Get("/drafts", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            std::optional<DraftStage> stage;
            if (req.has_param("stage") && !req.get_param_value("stage").empty()) {
                try {
                    stage = parse_draft_stage(req.get_param_value("stage"));
                } catch (const ParseError& e) {
                    throw ValidationError(e.what());
                }
            }
            send_json(res, 200,
                      service.list_pending(stage, int_param(req, "page", 1),
                                           int_param(req, "page_size", 20)));
        });
    });

    server.Get(R"(/drafts/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, service.get_draft_detail(req.matches[1].str())); });
    });

    server.Post(R"(/drafts/([^/]+)/actions)",
                [&service](const httplib::Request& req, httplib::Response& res) {
                    guarded(res, [&] {
                        json body = json::parse(req.body);
                        ReviewAction a = body.get<ReviewAction>();
                        const std::string id = req.matches[1].str();
                        if (!a.draft_id.empty() && a.draft_id != id) {
                            throw ValidationError("body draft_id does not match the URL");
                        }
                        a.draft_id = id;
                        send_json(res, 200, service.submit_action(std::move(a)));
                    });
                });
}

}  // namespace dbqa
