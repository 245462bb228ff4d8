#include "dbqa/agent.hpp"

#include <spdlog/spdlog.h>

#include <cctype>
#include <regex>

#include "dbqa/error.hpp"
#include "dbqa/sandbox.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

std::string_view to_string(SubTaskKind k) {
    switch (k) {
        case SubTaskKind::interaction_planning: return "interaction_planning";
        case SubTaskKind::tool_employment: return "tool_employment";
        case SubTaskKind::information_synthesis: return "information_synthesis";
    }
    return "?";
}

SubTaskKind parse_subtask_kind(std::string_view s) {
    if (s == "interaction_planning" || s == "IP") return SubTaskKind::interaction_planning;
    if (s == "tool_employment" || s == "TE") return SubTaskKind::tool_employment;
    if (s == "information_synthesis" || s == "IS") return SubTaskKind::information_synthesis;
    throw ParseError("unknown sub-task kind '" + std::string(s) + "'");
}

std::string_view short_name(SubTaskKind k) {
    switch (k) {
        case SubTaskKind::interaction_planning: return "IP";
        case SubTaskKind::tool_employment: return "TE";
        case SubTaskKind::information_synthesis: return "IS";
    }
    return "?";
}

void to_json(json& j, const SubTaskRecord& v) {
    j = json{{"kind", to_string(v.kind)},
             {"input_bundle", v.input_bundle},
             {"output", v.output},
             {"iteration_index", v.iteration_index}};
}

void from_json(const json& j, SubTaskRecord& v) {
    v.kind = parse_subtask_kind(j.at("kind").get<std::string>());
    j.at("input_bundle").get_to(v.input_bundle);
    j.at("output").get_to(v.output);
    j.at("iteration_index").get_to(v.iteration_index);
}

void to_json(json& j, const OutcomeStats& v) {
    j = json{{"plan_word_count", v.plan_word_count},
             {"n_sql_generated", v.n_sql_generated},
             {"n_sql_valid", v.n_sql_valid},
             {"answer_word_count", v.answer_word_count}};
}

void from_json(const json& j, OutcomeStats& v) {
    j.at("plan_word_count").get_to(v.plan_word_count);
    j.at("n_sql_generated").get_to(v.n_sql_generated);
    j.at("n_sql_valid").get_to(v.n_sql_valid);
    j.at("answer_word_count").get_to(v.answer_word_count);
}

void to_json(json& j, const StrategyOutcome& v) {
    j = json{{"transcript", v.transcript},
             {"subtask_records", v.subtask_records},
             {"stats", v.stats}};
}

void from_json(const json& j, StrategyOutcome& v) {
    j.at("transcript").get_to(v.transcript);
    j.at("subtask_records").get_to(v.subtask_records);
    j.at("stats").get_to(v.stats);
}

OutcomeStats compute_stats(const Transcript& t) {
    OutcomeStats s;
    for (const auto& step : t.steps) {
        switch (step.kind) {
            case StepKind::plan:
                s.plan_word_count += static_cast<std::int64_t>(word_count(step.content));
                break;
            case StepKind::sql:
                ++s.n_sql_generated;
                break;
            case StepKind::sql_result:
                if (step.execution && is_valid(*step.execution)) ++s.n_sql_valid;
                break;
            default:
                break;
        }
    }
    if (t.final_answer) s.answer_word_count = static_cast<std::int64_t>(word_count(*t.final_answer));
    return s;
}

// ---------------------------------------------------------------------------
// Output parsing

namespace {

bool is_sql_tag(std::string_view info) {
    std::string tag = to_lower(trim(info));
    auto space = tag.find_first_of(" \t{");
    if (space != std::string::npos) tag.resize(space);
    return tag == "sql" || tag == "sqlite" || tag == "sqlite3";
}

bool word_boundary_before(std::string_view text, std::size_t pos) {
    return pos == 0 || !(std::isalnum(static_cast<unsigned char>(text[pos - 1])) ||
                         text[pos - 1] == '_');
}

bool keyword_at(std::string_view lower, std::size_t pos, std::string_view kw) {
    if (lower.compare(pos, kw.size(), kw) != 0 || !word_boundary_before(lower, pos)) return false;
    std::size_t end = pos + kw.size();
    return end == lower.size() || !(std::isalnum(static_cast<unsigned char>(lower[end])) ||
                                    lower[end] == '_');
}

// WITH only starts a query when it opens a common table expression.
bool opens_cte(std::string_view segment) {
    static const std::regex cte(
        R"(^with\s+(recursive\s+)?[^\s(]+\s*(\([^)]*\)\s*)?as\s*(not\s+)?(materialized\s+)?\()",
        std::regex::icase);
    return std::regex_search(segment.begin(), segment.end(), cte);
}

}  // namespace

std::vector<std::string> extract_sql_queries(std::string_view text) {
    std::vector<std::string> fenced;
    const auto lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        std::string line = trim(lines[i]);
        if (!line.starts_with("```")) continue;
        bool tagged = is_sql_tag(std::string_view(line).substr(3));
        std::string body;
        std::size_t k = i + 1;
        for (; k < lines.size() && !trim(lines[k]).starts_with("```"); ++k) {
            body += lines[k];
            body += '\n';
        }
        i = k;  // skip past the closing fence
        std::string q = trim(body);
        if (tagged && !q.empty()) fenced.push_back(std::move(q));
    }
    if (!fenced.empty()) return fenced;

    std::vector<std::string> segments;
    const std::string lower = to_lower(text);
    std::size_t pos = 0;
    while (pos < lower.size()) {
        bool select = keyword_at(lower, pos, "select");
        bool with = !select && keyword_at(lower, pos, "with");
        if (!select && !with) {
            ++pos;
            continue;
        }
        std::size_t semi = text.find(';', pos);
        if (semi == std::string_view::npos) break;
        std::string_view segment = text.substr(pos, semi + 1 - pos);
        if (with && !opens_cte(segment)) {
            pos += 4;
            continue;
        }
        segments.push_back(trim(segment));
        pos = semi + 1;
    }
    return segments;
}

bool detect_stop(std::string_view plan_text) {
    for (const auto& line : split_lines(plan_text)) {
        if (iequals(trim(line), kStopSentinel)) return true;
    }
    return false;
}

std::string extract_final_answer(std::string_view completion) {
    const auto lines = split_lines(completion);
    for (std::size_t i = lines.size(); i-- > 0;) {
        std::string line = trim(lines[i]);
        std::size_t lead = line.find_first_not_of("*#> ");
        if (lead == std::string::npos) continue;
        std::string_view rest = std::string_view(line).substr(lead);
        if (!iequals(rest.substr(0, std::min<std::size_t>(rest.size(), 13)), "final answer:")) {
            continue;
        }
        std::string answer(rest.substr(13));
        for (std::size_t k = i + 1; k < lines.size(); ++k) answer += "\n" + lines[k];
        // Drop markdown emphasis closing the marker, e.g. "**Final Answer:** text".
        std::string cleaned = trim(answer);
        while (cleaned.starts_with("*")) cleaned = trim(std::string_view(cleaned).substr(1));
        if (!cleaned.empty()) return cleaned;
        break;
    }
    return trim(completion);
}

std::string render_history(const std::vector<SqlExecution>& executions) {
    if (executions.empty()) return "(no queries executed)";
    std::vector<std::string> blocks;
    for (std::size_t i = 0; i < executions.size(); ++i) {
        blocks.push_back("Query " + std::to_string(i + 1) + ":\n" + render_execution(executions[i]));
    }
    return join(blocks, "\n");
}

// ---------------------------------------------------------------------------
// Prompts

std::string prompt_template_name(SubTaskKind kind, Strategy strategy) {
    switch (strategy) {
        case Strategy::none:
            if (kind == SubTaskKind::information_synthesis) return "agent/none_answer";
            break;
        case Strategy::sequential:
        case Strategy::iterative: {
            std::string prefix = strategy == Strategy::sequential ? "agent/sequential_"
                                                                  : "agent/iterative_";
            switch (kind) {
                case SubTaskKind::interaction_planning: return prefix + "plan";
                case SubTaskKind::tool_employment: return prefix + "sql";
                case SubTaskKind::information_synthesis: return prefix + "synthesis";
            }
        }
    }
    throw TemplateError("no prompt template for " + std::string(to_string(kind)) + " under " +
                        std::string(to_string(strategy)) + " strategy");
}

std::vector<ChatMessage> build_prompt(SubTaskKind kind, Strategy strategy,
                                      const PromptInputs& in, const TemplateSet& templates) {
    TemplateValues values{{"question", in.question}, {"schema", in.schema_text}};
    if (in.history) values["history"] = *in.history;
    if (in.plan) values["plan"] = *in.plan;
    if (in.database_dump) values["database_dump"] = *in.database_dump;
    if (in.cycle) values["cycle"] = std::to_string(*in.cycle);
    return {ChatMessage{Role::user, templates.render(prompt_template_name(kind, strategy), values)}};
}

std::int64_t derive_seed(std::int64_t base, std::string_view label) {
    std::string digest = sha256_hex(std::to_string(base) + ":" + std::string(label));
    return static_cast<std::int64_t>(std::stoull(digest.substr(0, 8), nullptr, 16));
}

// ---------------------------------------------------------------------------
// Strategies

namespace {

class AgentRun {
public:
    AgentRun(const QuestionRecord& q, const DatabaseSpec& spec, const RunConfig& cfg, Gateway& gw,
             const TemplateSet& templates, Strategy strategy)
        : q_(q), spec_(spec), cfg_(cfg), gw_(gw), templates_(templates), strategy_(strategy) {
        transcript_.question_id = q.question_id;
        transcript_.strategy = strategy;
        transcript_.model_id = cfg.model_id;
    }

    PromptInputs inputs() const {
        PromptInputs in;
        in.question = q_.text;
        in.schema_text = spec_.schema_text.empty() ? render_schema(spec_) : spec_.schema_text;
        return in;
    }

    /// One model call; nullopt when the run had to abort.
    std::optional<std::string> call(SubTaskKind kind, const PromptInputs& in, int iteration) {
        auto messages = build_prompt(kind, strategy_, in, templates_);
        const std::string& bundle = messages.front().content;
        if (static_cast<std::int64_t>(gw_.estimate_tokens(cfg_.model_id, bundle)) >
            cfg_.context_token_budget) {
            abort(AbortReason::context_overflow);
            return std::nullopt;
        }
        ChatRequest req;
        req.model_id = cfg_.model_id;
        req.messages = messages;
        req.temperature = cfg_.agent_temperature;
        req.max_output_tokens = cfg_.max_output_tokens;
        req.seed = derive_seed(cfg_.random_seed, q_.question_id + "/" +
                                                     std::string(short_name(kind)) + "/" +
                                                     std::to_string(iteration));
        try {
            ChatResponse resp = gw_.complete(req);
            records_.push_back(SubTaskRecord{kind, bundle, resp.content, iteration});
            return resp.content;
        } catch (const TransportError& e) {
            spdlog::warn("{}: provider failure during {}: {}", q_.question_id, to_string(kind),
                         e.what());
            abort(AbortReason::provider_error);
            return std::nullopt;
        }
    }

    void abort(AbortReason reason) {
        transcript_.aborted_reason = reason;
        transcript_.final_answer.reset();
    }

    void add_step(StepKind kind, std::string content, int iteration,
                  std::optional<SqlExecution> exec = std::nullopt) {
        transcript_.steps.push_back(Step{kind, std::move(content), iteration, std::move(exec)});
    }

    SqlExecution run_query(Sandbox& box, const std::string& query, int iteration) {
        SqlExecution exec = box.execute(query);
        add_step(StepKind::sql, query, iteration);
        add_step(StepKind::sql_result, render_execution(exec), iteration, exec);
        return exec;
    }

    void finish_answer(const std::string& completion, int iteration, bool record_synthesis) {
        if (record_synthesis) add_step(StepKind::synthesis, completion, iteration);
        std::string answer = extract_final_answer(completion);
        add_step(StepKind::final_answer, answer, iteration);
        transcript_.final_answer = std::move(answer);
    }

    void warn(std::string msg) { transcript_.warnings.push_back(std::move(msg)); }
    void cap_reached() { transcript_.iteration_cap_reached = true; }

    StrategyOutcome finish() {
        StrategyOutcome out;
        out.stats = compute_stats(transcript_);
        out.transcript = std::move(transcript_);
        out.subtask_records = std::move(records_);
        return out;
    }

    Sandbox open_sandbox() const {
        return Sandbox::create(spec_, cfg_.row_limit,
                               std::chrono::milliseconds(cfg_.statement_timeout_ms));
    }

    const RunConfig& cfg() const { return cfg_; }
    Gateway& gw() { return gw_; }

private:
    const QuestionRecord& q_;
    const DatabaseSpec& spec_;
    const RunConfig& cfg_;
    Gateway& gw_;
    const TemplateSet& templates_;
    Strategy strategy_;
    Transcript transcript_;
    std::vector<SubTaskRecord> records_;
};

}  // namespace

StrategyOutcome run_no_interaction(const QuestionRecord& q, const DatabaseSpec& spec,
                                   const RunConfig& cfg, Gateway& gw,
                                   const TemplateSet& templates) {
    AgentRun run(q, spec, cfg, gw, templates, Strategy::none);
    Sandbox box = run.open_sandbox();
    const std::string model = cfg.model_id;
    RecordDump dump = box.dump_records(cfg.context_token_budget, [&](std::string_view text) {
        return gw.estimate_tokens(model, text);
    });
    if (dump.overflow) {
        run.abort(AbortReason::context_overflow);
        return run.finish();
    }
    PromptInputs in = run.inputs();
    in.database_dump = dump.text;
    if (auto completion = run.call(SubTaskKind::information_synthesis, in, 0)) {
        run.finish_answer(*completion, 0, false);
    }
    return run.finish();
}

StrategyOutcome run_sequential(const QuestionRecord& q, const DatabaseSpec& spec,
                               const RunConfig& cfg, Gateway& gw, const TemplateSet& templates) {
    AgentRun run(q, spec, cfg, gw, templates, Strategy::sequential);
    Sandbox box = run.open_sandbox();

    PromptInputs in = run.inputs();
    auto plan = run.call(SubTaskKind::interaction_planning, in, 0);
    if (!plan) return run.finish();
    run.add_step(StepKind::plan, *plan, 0);

    in.plan = *plan;
    auto sql_output = run.call(SubTaskKind::tool_employment, in, 0);
    if (!sql_output) return run.finish();
    std::vector<SqlExecution> executions;
    const auto queries = extract_sql_queries(*sql_output);
    if (queries.empty()) run.warn("tool employment produced no SQL query");
    for (const auto& query : queries) executions.push_back(run.run_query(box, query, 0));

    in.history = render_history(executions);
    if (auto completion = run.call(SubTaskKind::information_synthesis, in, 0)) {
        run.finish_answer(*completion, 0, true);
    }
    return run.finish();
}

StrategyOutcome run_iterative(const QuestionRecord& q, const DatabaseSpec& spec,
                              const RunConfig& cfg, Gateway& gw, const TemplateSet& templates) {
    if (cfg.max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
    AgentRun run(q, spec, cfg, gw, templates, Strategy::iterative);
    Sandbox box = run.open_sandbox();

    std::vector<SqlExecution> executions;
    bool stopped = false;
    int last_cycle = 0;
    for (int cycle = 0; cycle < cfg.max_iterations; ++cycle) {
        last_cycle = cycle;
        PromptInputs in = run.inputs();
        in.history = render_history(executions);
        in.cycle = cycle + 1;
        auto plan = run.call(SubTaskKind::interaction_planning, in, cycle);
        if (!plan) return run.finish();
        run.add_step(StepKind::plan, *plan, cycle);
        if (detect_stop(*plan)) {
            stopped = true;
            break;
        }
        in.plan = *plan;
        auto sql_output = run.call(SubTaskKind::tool_employment, in, cycle);
        if (!sql_output) return run.finish();
        const auto queries = extract_sql_queries(*sql_output);
        if (queries.empty()) {
            run.warn("cycle " + std::to_string(cycle) + ": no SQL query extracted");
            continue;
        }
        if (queries.size() > 1) {
            run.warn("cycle " + std::to_string(cycle) + ": " + std::to_string(queries.size()) +
                     " queries emitted, only the first was executed");
        }
        executions.push_back(run.run_query(box, queries.front(), cycle));
    }
    if (!stopped) run.cap_reached();

    PromptInputs in = run.inputs();
    in.history = render_history(executions);
    if (auto completion = run.call(SubTaskKind::information_synthesis, in, last_cycle)) {
        run.finish_answer(*completion, last_cycle, true);
    }
    return run.finish();
}

StrategyOutcome run_strategy(const QuestionRecord& q, const DatabaseSpec& spec,
                             const RunConfig& cfg, Gateway& gw, const TemplateSet& templates) {
    switch (cfg.strategy) {
        case Strategy::none: return run_no_interaction(q, spec, cfg, gw, templates);
        case Strategy::sequential: return run_sequential(q, spec, cfg, gw, templates);
        case Strategy::iterative: return run_iterative(q, spec, cfg, gw, templates);
    }
    throw ConfigError("unknown strategy");
}

}  // namespace dbqa
