#include "dbqa/forge.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <ctime>
#include <fstream>
#include <regex>

#include "dbqa/agent.hpp"
#include "dbqa/error.hpp"
#include "dbqa/sandbox.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

namespace fs = std::filesystem;

namespace {
constexpr std::array kStageNames = {"controlled", "condensed",  "conjectured", "constructed",
                                    "concluded",  "classified", "confirmed",   "rejected"};
}

std::string_view to_string(DraftStage s) { return kStageNames[static_cast<std::size_t>(s)]; }

DraftStage parse_draft_stage(std::string_view s) {
    for (std::size_t i = 0; i < kStageNames.size(); ++i) {
        if (s == kStageNames[i]) return static_cast<DraftStage>(i);
    }
    throw ParseError("unknown draft stage '" + std::string(s) + "'");
}

std::optional<DraftStage> next_stage(DraftStage s) {
    if (s == DraftStage::confirmed || s == DraftStage::rejected) return std::nullopt;
    return static_cast<DraftStage>(static_cast<int>(s) + 1);
}

bool is_terminal(DraftStage s) { return s == DraftStage::confirmed || s == DraftStage::rejected; }

bool is_legal_transition(DraftStage from, DraftStage to) {
    if (is_terminal(from)) return false;
    if (to == DraftStage::rejected) return true;
    return next_stage(from) == to;
}

std::optional<int> stage_rank(DraftStage s) {
    if (s == DraftStage::rejected) return std::nullopt;
    return static_cast<int>(s);
}

void to_json(json& j, const ReviewLogEntry& v) {
    j = json{{"timestamp", v.timestamp}, {"actor", v.actor}, {"action", v.action}, {"note", v.note}};
}

void from_json(const json& j, ReviewLogEntry& v) {
    j.at("timestamp").get_to(v.timestamp);
    j.at("actor").get_to(v.actor);
    j.at("action").get_to(v.action);
    v.note = j.value("note", "");
}

void to_json(json& j, const DraftItem& v) {
    j = json{{"draft_id", v.draft_id},
             {"db_id", v.db_id},
             {"seed_question", v.seed_question},
             {"stage", to_string(v.stage)},
             {"question_text", v.question_text},
             {"keywords", v.keywords},
             {"conjecture", v.conjecture ? json(*v.conjecture) : json(nullptr)},
             {"injected_inserts", v.injected_inserts ? json(*v.injected_inserts) : json(nullptr)},
             {"reference_text", v.reference_text ? json(*v.reference_text) : json(nullptr)},
             {"proposed_category",
              v.proposed_category ? json(to_string(*v.proposed_category)) : json(nullptr)},
             {"review_log", v.review_log}};
}

void from_json(const json& j, DraftItem& v) {
    auto opt_string = [&](const char* key) -> std::optional<std::string> {
        if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
        return j.at(key).get<std::string>();
    };
    j.at("draft_id").get_to(v.draft_id);
    j.at("db_id").get_to(v.db_id);
    j.at("seed_question").get_to(v.seed_question);
    v.stage = parse_draft_stage(j.at("stage").get<std::string>());
    j.at("question_text").get_to(v.question_text);
    v.keywords = j.value("keywords", std::vector<std::string>{});
    v.conjecture = opt_string("conjecture");
    if (j.contains("injected_inserts") && !j.at("injected_inserts").is_null()) {
        v.injected_inserts = j.at("injected_inserts").get<std::vector<std::string>>();
    } else {
        v.injected_inserts.reset();
    }
    v.reference_text = opt_string("reference_text");
    auto cat = opt_string("proposed_category");
    v.proposed_category = cat ? std::optional(parse_category(*cat)) : std::nullopt;
    v.review_log = j.value("review_log", std::vector<ReviewLogEntry>{});
}

std::string utc_timestamp() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() %
              1000;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                  tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

void advance_stage(DraftItem& d, DraftStage to, std::string_view actor, std::string_view action,
                   std::string note) {
    if (!is_legal_transition(d.stage, to)) {
        throw PipelineError("draft '" + d.draft_id + "' cannot move from " +
                            std::string(to_string(d.stage)) + " to " + std::string(to_string(to)));
    }
    d.stage = to;
    d.review_log.push_back(
        {utc_timestamp(), std::string(actor), std::string(action), std::move(note)});
}

// ---------------------------------------------------------------------------
// Model calls

namespace {

void require_stage(const DraftItem& d, DraftStage expected, std::string_view op) {
    if (d.stage != expected) {
        throw PipelineError(std::string(op) + " needs stage " + std::string(to_string(expected)) +
                            ", draft '" + d.draft_id + "' is " + std::string(to_string(d.stage)));
    }
}

std::string call_model(ForgeContext& ctx, const std::string& template_name,
                       const TemplateValues& values, const std::string& label) {
    ChatRequest req;
    req.model_id = ctx.options.model_id;
    req.messages = {ChatMessage{Role::user, ctx.templates.render(template_name, values)}};
    req.temperature = ctx.options.temperature;
    req.max_output_tokens = ctx.options.max_output_tokens;
    req.seed = derive_seed(ctx.options.seed, label);
    try {
        return ctx.gw.complete(req).content;
    } catch (const TransportError& e) {
        throw PipelineError(label + ": provider failure: " + e.what());
    }
}

std::string non_empty(std::string text, const std::string& what) {
    std::string t = trim(text);
    if (t.empty()) throw PipelineError(what + " completion is empty", text);
    return t;
}

std::string render_inserts(const std::vector<std::string>& inserts) {
    std::string out;
    for (const auto& s : inserts) out += s + ";\n";
    return out;
}

}  // namespace

DraftItem control_generate(std::string draft_id, std::string db_id, const std::string& seed_question,
                           const std::string& schema_text, std::vector<std::string> keywords,
                           ForgeContext& ctx) {
    if (trim(schema_text).empty()) throw PipelineError("control_generate needs a schema");
    if (!is_valid_draft_id(draft_id)) throw PipelineError("invalid draft id '" + draft_id + "'");
    std::string kw = keywords.empty() ? "(none)" : join(keywords, ", ");
    std::string raw = call_model(
        ctx, "forge/control",
        {{"schema", schema_text}, {"seed_question", seed_question}, {"keywords", kw}},
        draft_id + "/control");
    DraftItem d;
    d.draft_id = std::move(draft_id);
    d.db_id = std::move(db_id);
    d.seed_question = seed_question;
    d.question_text = non_empty(raw, "control");
    d.keywords = std::move(keywords);
    d.stage = DraftStage::controlled;
    d.review_log.push_back({utc_timestamp(), ctx.options.actor, "control", "keywords: " + kw});
    return d;
}

DraftItem condense(DraftItem d, ForgeContext& ctx) {
    require_stage(d, DraftStage::controlled, "condense");
    std::string raw =
        call_model(ctx, "forge/condense", {{"question", d.question_text}}, d.draft_id + "/condense");
    std::string shorter = non_empty(raw, "condense");
    std::size_t before = word_count(d.question_text);
    std::size_t after = word_count(shorter);
    if (after > before || (after == before && !ctx.options.allow_equal_length_condense)) {
        throw PipelineError("condensed question has " + std::to_string(after) + " words, input has " +
                                std::to_string(before),
                            raw);
    }
    std::string note = "before: " + d.question_text + "\nafter: " + shorter;
    d.question_text = shorter;
    advance_stage(d, DraftStage::condensed, ctx.options.actor, "condense", std::move(note));
    return d;
}

DraftItem conjecture_answer(DraftItem d, const std::string& schema_text, ForgeContext& ctx) {
    require_stage(d, DraftStage::condensed, "conjecture_answer");
    std::string raw = call_model(ctx, "forge/conjecture",
                                 {{"schema", schema_text}, {"question", d.question_text}},
                                 d.draft_id + "/conjecture");
    d.conjecture = non_empty(raw, "conjecture");
    advance_stage(d, DraftStage::conjectured, ctx.options.actor, "conjecture");
    return d;
}

std::vector<std::string> parse_insert_statements(std::string_view completion) {
    static const std::regex fence(R"(```[ \t]*(?:sql|sqlite)?[ \t]*\r?\n([\s\S]*?)```)",
                                  std::regex::icase);
    std::string body;
    std::string text(completion);
    for (auto it = std::sregex_iterator(text.begin(), text.end(), fence);
         it != std::sregex_iterator(); ++it) {
        body += (*it)[1].str() + "\n";
    }
    if (body.empty()) body = text;
    std::vector<std::string> out;
    for (auto& stmt : split_sql_statements(body)) {
        std::string lower = to_lower(stmt.substr(0, std::min<std::size_t>(stmt.size(), 16)));
        if (lower.starts_with("insert")) out.push_back(std::move(stmt));
    }
    return out;
}

DatabaseSpec merge_spec(const DraftItem& d, const DatabaseSpec& spec) {
    DatabaseSpec merged = spec;
    if (d.injected_inserts) {
        merged.insert_statements.insert(merged.insert_statements.end(), d.injected_inserts->begin(),
                                        d.injected_inserts->end());
    }
    return merged;
}

DraftItem construct_records(DraftItem d, const DatabaseSpec& spec, ForgeContext& ctx) {
    require_stage(d, DraftStage::conjectured, "construct_records");
    if (ctx.options.construct_attempts < 1) throw ConfigError("construct_attempts must be >= 1");
    const std::size_t base = spec.create_statements.size() + spec.insert_statements.size();
    try {
        Sandbox::create(spec).close();
    } catch (const SandboxError& e) {
        throw PipelineError("source database '" + spec.db_id + "' does not build: " + e.what());
    }
    std::string feedback;
    std::string last_error;
    std::string last_raw;
    for (int attempt = 0; attempt < ctx.options.construct_attempts; ++attempt) {
        last_raw = call_model(ctx, "forge/construct",
                              {{"schema", spec.schema_text},
                               {"question", d.question_text},
                               {"conjecture", d.conjecture.value_or("")},
                               {"feedback", feedback}},
                              d.draft_id + "/construct/" + std::to_string(attempt));
        std::vector<std::string> inserts = parse_insert_statements(last_raw);
        if (inserts.empty()) {
            last_error = "no INSERT statements found";
            feedback = "\nYour previous response contained no INSERT statements. Try again.\n";
        } else {
            DraftItem candidate = d;
            candidate.injected_inserts = inserts;
            try {
                Sandbox::create(merge_spec(candidate, spec)).close();
                d.injected_inserts = std::move(inserts);
                advance_stage(d, DraftStage::constructed, ctx.options.actor, "construct",
                              std::to_string(d.injected_inserts->size()) + " records after " +
                                  std::to_string(attempt + 1) + " attempt(s)");
                return d;
            } catch (const SandboxError& e) {
                std::size_t idx = e.statement_index() >= base ? e.statement_index() - base : 0;
                last_error = e.engine_message();
                feedback = "\nThe previous statements failed to execute.\nStatement: " +
                           inserts[std::min(idx, inserts.size() - 1)] +
                           "\nError: " + e.engine_message() + "\nFix the records and try again.\n";
            }
        }
        spdlog::info("{}: construct attempt {} failed: {}", d.draft_id, attempt + 1, last_error);
        d.review_log.push_back({utc_timestamp(), ctx.options.actor, "construct_failed", last_error});
    }
    throw PipelineError("construct_records failed " + std::to_string(ctx.options.construct_attempts) +
                            " times for '" + d.draft_id + "': " + last_error,
                        last_raw);
}

DraftItem conclude_answer(DraftItem d, const DatabaseSpec& merged_spec, ForgeContext& ctx) {
    require_stage(d, DraftStage::constructed, "conclude_answer");
    std::string raw = call_model(ctx, "forge/conclude",
                                 {{"schema", merged_spec.schema_text},
                                  {"injected_records", render_inserts(d.injected_inserts.value_or(
                                                           std::vector<std::string>{}))},
                                  {"question", d.question_text},
                                  {"conjecture", d.conjecture.value_or("")}},
                                 d.draft_id + "/conclude");
    d.reference_text = non_empty(raw, "conclude");
    advance_stage(d, DraftStage::concluded, ctx.options.actor, "conclude",
                  std::to_string(word_count(*d.reference_text)) + " words");
    return d;
}

std::optional<Category> parse_category_label(std::string_view completion) {
    const std::string lower = to_lower(completion);
    std::size_t pos = lower.rfind("category:");
    std::string_view scope = lower;
    if (pos != std::string::npos) {
        scope = std::string_view(lower).substr(pos + 9);
        scope = scope.substr(0, scope.find('\n'));
    }
    static const std::regex words("[a-z]+");
    bool conclusive = false;
    bool interpretive = false;
    std::string s(scope);
    for (auto it = std::sregex_iterator(s.begin(), s.end(), words); it != std::sregex_iterator();
         ++it) {
        if (it->str() == "conclusive") conclusive = true;
        if (it->str() == "interpretive") interpretive = true;
    }
    if (conclusive == interpretive) return std::nullopt;
    return conclusive ? Category::conclusive : Category::interpretive;
}

DraftItem classify_question(DraftItem d, ForgeContext& ctx) {
    require_stage(d, DraftStage::concluded, "classify_question");
    std::string raw = call_model(
        ctx, "forge/classify",
        {{"question", d.question_text}, {"answer", d.reference_text.value_or("")}},
        d.draft_id + "/classify");
    auto cat = parse_category_label(raw);
    if (!cat) throw PipelineError("cannot read a category from the classification", raw);
    d.proposed_category = cat;
    advance_stage(d, DraftStage::classified, ctx.options.actor, "classify",
                  std::string(to_string(*cat)));
    return d;
}

std::string finalized_db_id(const DraftItem& d) { return d.db_id + "-" + d.draft_id; }

Instance finalize_instance(const DraftItem& d, const DatabaseSpec& spec) {
    require_stage(d, DraftStage::confirmed, "finalize_instance");
    if (!d.injected_inserts || !d.reference_text || !d.proposed_category) {
        throw PipelineError("confirmed draft '" + d.draft_id + "' is missing pipeline outputs");
    }
    Instance inst;
    inst.database = merge_spec(d, spec);
    inst.database.db_id = finalized_db_id(d);
    inst.database.schema_text = render_schema(inst.database);
    inst.question.question_id = d.draft_id;
    inst.question.db_id = inst.database.db_id;
    inst.question.text = d.question_text;
    inst.question.category = *d.proposed_category;
    inst.question.source_keywords = d.keywords;
    inst.question.pipeline_stage = PipelineStage::confirmed;
    inst.answer.question_id = d.draft_id;
    inst.answer.text = *d.reference_text;
    inst.answer.evidence_note = render_inserts(*d.injected_inserts);
    inst.answer.word_count = static_cast<std::int64_t>(word_count(inst.answer.text));
    auto issues = validate_instance(inst.database, inst.question, inst.answer);
    if (!issues.empty()) {
        std::vector<std::string> msgs;
        for (const auto& i : issues) msgs.push_back(i.code + ": " + i.message);
        throw PipelineError("finalized instance '" + d.draft_id + "' is invalid: " + join(msgs, "; "));
    }
    return inst;
}

DraftItem run_pipeline(const std::string& draft_id, const std::string& seed_question,
                       const std::vector<std::string>& keywords, const DatabaseSpec& spec,
                       ForgeContext& ctx, DraftStore* store) {
    DraftItem d = control_generate(draft_id, spec.db_id, seed_question, spec.schema_text, keywords, ctx);
    auto save = [&] {
        if (store) store->save(d);
    };
    save();
    try {
        d = condense(d, ctx);
        save();
        d = conjecture_answer(d, spec.schema_text, ctx);
        save();
        d = construct_records(d, spec, ctx);
        save();
        d = conclude_answer(d, merge_spec(d, spec), ctx);
        save();
        d = classify_question(d, ctx);
        save();
    } catch (const PipelineError& e) {
        d.review_log.push_back({utc_timestamp(), ctx.options.actor, "pipeline_error", e.what()});
        save();
        throw;
    }
    return d;
}

// ---------------------------------------------------------------------------
// Store

bool is_valid_draft_id(std::string_view id) {
    if (id.empty() || id.size() > 128) return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    }) && id != "." && id != "..";
}

DraftStore::DraftStore(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

fs::path DraftStore::path_for(const std::string& draft_id) const {
    if (!is_valid_draft_id(draft_id)) throw NotFoundError("invalid draft id '" + draft_id + "'");
    return root_ / (draft_id + ".json");
}

bool DraftStore::exists(const std::string& draft_id) const {
    return is_valid_draft_id(draft_id) && fs::exists(path_for(draft_id));
}

void DraftStore::save(const DraftItem& d) const {
    write_file_atomic(path_for(d.draft_id), json(d).dump(2) + "\n");
}

DraftItem DraftStore::load(const std::string& draft_id) const {
    fs::path p = path_for(draft_id);
    if (!fs::exists(p)) throw NotFoundError("no draft '" + draft_id + "'");
    try {
        DraftItem d = json::parse(read_file(p)).get<DraftItem>();
        if (d.draft_id != draft_id) throw ParseError("draft id mismatch");
        return d;
    } catch (const json::exception& e) {
        throw ParseError(p.string() + ": " + e.what());
    }
}

std::vector<std::string> DraftStore::ids() const {
    std::vector<std::string> out;
    for (const auto& entry : fs::directory_iterator(root_)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".json") continue;
        std::string id = entry.path().stem().string();
        if (is_valid_draft_id(id)) out.push_back(std::move(id));
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<DraftItem> DraftStore::load_all() const {
    std::vector<DraftItem> out;
    for (const auto& id : ids()) out.push_back(load(id));
    return out;
}

// ---------------------------------------------------------------------------
// Corpus

Corpus load_corpus(const fs::path& dir) {
    Corpus c;
    fs::path seeds = dir / "seeds.jsonl";
    if (!fs::exists(seeds)) throw ParseError(seeds.string() + " not found");
    std::ifstream in(seeds);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        try {
            json j = json::parse(line);
            SeedEntry s;
            j.at("seed_question").get_to(s.seed_question);
            j.at("db_id").get_to(s.db_id);
            s.keywords = j.value("keywords", std::vector<std::string>{});
            c.seeds.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw ParseError(seeds.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    for (const auto& s : c.seeds) {
        if (c.databases.count(s.db_id)) continue;
        fs::path schema = dir / s.db_id / "schema.sql";
        if (!fs::exists(schema)) {
            throw IntegrityError("seed references db '" + s.db_id + "' but " + schema.string() +
                                 " is missing");
        }
        c.databases.emplace(s.db_id, parse_database_script(s.db_id, read_file(schema)));
    }
    return c;
}

}  // namespace dbqa
