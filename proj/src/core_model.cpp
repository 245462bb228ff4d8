#include "dbqa/core_model.hpp"

#include <array>
#include <utility>

#include "dbqa/error.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

namespace {

template <typename E, std::size_t N>
using NameTable = std::array<std::pair<E, std::string_view>, N>;

constexpr NameTable<Category, 2> kCategoryNames{{
    {Category::conclusive, "conclusive"},
    {Category::interpretive, "interpretive"},
}};
constexpr NameTable<PipelineStage, 3> kStageNames{{
    {PipelineStage::drafted, "drafted"},
    {PipelineStage::condensed, "condensed"},
    {PipelineStage::confirmed, "confirmed"},
}};
constexpr NameTable<Strategy, 3> kStrategyNames{{
    {Strategy::none, "none"},
    {Strategy::sequential, "sequential"},
    {Strategy::iterative, "iterative"},
}};
constexpr NameTable<StepKind, 5> kStepNames{{
    {StepKind::plan, "plan"},
    {StepKind::sql, "sql"},
    {StepKind::sql_result, "sql_result"},
    {StepKind::synthesis, "synthesis"},
    {StepKind::final_answer, "final_answer"},
}};
constexpr NameTable<AbortReason, 3> kAbortNames{{
    {AbortReason::context_overflow, "context_overflow"},
    {AbortReason::iteration_cap, "iteration_cap"},
    {AbortReason::provider_error, "provider_error"},
}};
constexpr NameTable<ExecStatus, 2> kStatusNames{{
    {ExecStatus::ok, "ok"},
    {ExecStatus::error, "error"},
}};

template <typename E, std::size_t N>
std::string_view name_of(const NameTable<E, N>& table, E value) {
    for (const auto& [v, name] : table) {
        if (v == value) return name;
    }
    return "?";
}

template <typename E, std::size_t N>
E value_of(const NameTable<E, N>& table, std::string_view name, std::string_view what) {
    for (const auto& [v, n] : table) {
        if (n == name) return v;
    }
    throw ParseError("unknown " + std::string(what) + " '" + std::string(name) + "'");
}

}  // namespace

std::string_view to_string(Category v) { return name_of(kCategoryNames, v); }
std::string_view to_string(PipelineStage v) { return name_of(kStageNames, v); }
std::string_view to_string(Strategy v) { return name_of(kStrategyNames, v); }
std::string_view to_string(StepKind v) { return name_of(kStepNames, v); }
std::string_view to_string(AbortReason v) { return name_of(kAbortNames, v); }
std::string_view to_string(ExecStatus v) { return name_of(kStatusNames, v); }

Category parse_category(std::string_view s) { return value_of(kCategoryNames, s, "category"); }
PipelineStage parse_pipeline_stage(std::string_view s) {
    return value_of(kStageNames, s, "pipeline stage");
}
Strategy parse_strategy(std::string_view s) { return value_of(kStrategyNames, s, "strategy"); }
StepKind parse_step_kind(std::string_view s) { return value_of(kStepNames, s, "step kind"); }
AbortReason parse_abort_reason(std::string_view s) {
    return value_of(kAbortNames, s, "abort reason");
}
ExecStatus parse_exec_status(std::string_view s) { return value_of(kStatusNames, s, "status"); }

std::vector<std::string> DatabaseSpec::all_statements() const {
    std::vector<std::string> all = create_statements;
    all.insert(all.end(), insert_statements.begin(), insert_statements.end());
    return all;
}

std::vector<std::string> check_transcript(const Transcript& t) {
    std::vector<std::string> problems;
    int last_iteration = 0;
    for (std::size_t i = 0; i < t.steps.size(); ++i) {
        const Step& s = t.steps[i];
        if (s.kind == StepKind::sql_result &&
            (i == 0 || t.steps[i - 1].kind != StepKind::sql)) {
            problems.push_back("step " + std::to_string(i) + ": sql_result not preceded by sql");
        }
        if (s.kind == StepKind::sql_result && !s.execution) {
            problems.push_back("step " + std::to_string(i) + ": sql_result without execution");
        }
        if (s.kind == StepKind::sql && t.strategy == Strategy::none) {
            problems.push_back("step " + std::to_string(i) + ": sql step in no-interaction run");
        }
        if (s.iteration_index < 0) {
            problems.push_back("step " + std::to_string(i) + ": negative iteration index");
        }
        if (t.strategy != Strategy::iterative && s.iteration_index != 0) {
            problems.push_back("step " + std::to_string(i) + ": non-zero iteration index");
        }
        if (s.iteration_index < last_iteration) {
            problems.push_back("step " + std::to_string(i) + ": iteration index decreased");
        }
        last_iteration = s.iteration_index;
    }
    if (t.final_answer.has_value() == t.aborted_reason.has_value()) {
        problems.emplace_back("final_answer must be present iff the run was not aborted");
    }
    return problems;
}

void RunConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("invalid run config: " + msg); };
    if (model_id.empty()) fail("model_id is empty");
    if (agent_temperature < 0.0 || agent_temperature > 2.0) fail("agent_temperature outside [0,2]");
    if (evaluator_temperature < 0.0 || evaluator_temperature > 2.0) {
        fail("evaluator_temperature outside [0,2]");
    }
    if (max_iterations < 1) fail("max_iterations must be >= 1");
    if (row_limit < 1) fail("row_limit must be >= 1");
    if (statement_timeout_ms < 1) fail("statement_timeout_ms must be >= 1");
    if (context_token_budget < 1) fail("context_token_budget must be >= 1");
    if (reviewer_count < 1 || reviewer_count % 2 == 0) fail("reviewer_count must be odd and >= 1");
    if (meta_reviewer_count < 1 || meta_reviewer_count % 2 == 0) {
        fail("meta_reviewer_count must be odd and >= 1");
    }
    if (max_output_tokens < 1) fail("max_output_tokens must be >= 1");
    if (parallelism < 1) fail("parallelism must be >= 1");
}

// ---------------------------------------------------------------------------
// JSON

void to_json(json& j, const DatabaseSpec& v) {
    j = json{{"db_id", v.db_id},
             {"create_statements", v.create_statements},
             {"insert_statements", v.insert_statements},
             {"schema_text", v.schema_text}};
}

void from_json(const json& j, DatabaseSpec& v) {
    j.at("db_id").get_to(v.db_id);
    j.at("create_statements").get_to(v.create_statements);
    j.at("insert_statements").get_to(v.insert_statements);
    v.schema_text = j.value("schema_text", std::string{});
}

void to_json(json& j, const QuestionRecord& v) {
    j = json{{"question_id", v.question_id},
             {"db_id", v.db_id},
             {"text", v.text},
             {"category", to_string(v.category)},
             {"source_keywords", v.source_keywords},
             {"pipeline_stage", to_string(v.pipeline_stage)}};
}

void from_json(const json& j, QuestionRecord& v) {
    j.at("question_id").get_to(v.question_id);
    j.at("db_id").get_to(v.db_id);
    j.at("text").get_to(v.text);
    v.category = parse_category(j.at("category").get<std::string>());
    v.source_keywords = j.value("source_keywords", std::vector<std::string>{});
    v.pipeline_stage = parse_pipeline_stage(j.at("pipeline_stage").get<std::string>());
}

void to_json(json& j, const ReferenceAnswer& v) {
    j = json{{"question_id", v.question_id},
             {"text", v.text},
             {"evidence_note", v.evidence_note},
             {"word_count", v.word_count}};
}

void from_json(const json& j, ReferenceAnswer& v) {
    j.at("question_id").get_to(v.question_id);
    j.at("text").get_to(v.text);
    v.evidence_note = j.value("evidence_note", std::string{});
    j.at("word_count").get_to(v.word_count);
}

void to_json(json& j, const Step& v) {
    j = json{{"kind", to_string(v.kind)},
             {"content", v.content},
             {"iteration_index", v.iteration_index}};
    if (v.execution) j["execution"] = *v.execution;
}

void from_json(const json& j, Step& v) {
    v.kind = parse_step_kind(j.at("kind").get<std::string>());
    j.at("content").get_to(v.content);
    j.at("iteration_index").get_to(v.iteration_index);
    if (j.contains("execution") && !j.at("execution").is_null()) {
        v.execution = j.at("execution").get<SqlExecution>();
    } else {
        v.execution.reset();
    }
}

void to_json(json& j, const Transcript& v) {
    j = json{{"question_id", v.question_id},
             {"strategy", to_string(v.strategy)},
             {"model_id", v.model_id},
             {"steps", v.steps},
             {"final_answer", v.final_answer ? json(*v.final_answer) : json(nullptr)},
             {"aborted_reason",
              v.aborted_reason ? json(to_string(*v.aborted_reason)) : json(nullptr)},
             {"iteration_cap_reached", v.iteration_cap_reached},
             {"warnings", v.warnings}};
}

void from_json(const json& j, Transcript& v) {
    j.at("question_id").get_to(v.question_id);
    v.strategy = parse_strategy(j.at("strategy").get<std::string>());
    j.at("model_id").get_to(v.model_id);
    j.at("steps").get_to(v.steps);
    const json& fa = j.at("final_answer");
    v.final_answer = fa.is_null() ? std::nullopt : std::optional(fa.get<std::string>());
    const json& ar = j.at("aborted_reason");
    v.aborted_reason =
        ar.is_null() ? std::nullopt : std::optional(parse_abort_reason(ar.get<std::string>()));
    v.iteration_cap_reached = j.value("iteration_cap_reached", false);
    v.warnings = j.value("warnings", std::vector<std::string>{});
}

void to_json(json& j, const SqlExecution& v) {
    j = json{{"query", v.query},
             {"status", to_string(v.status)},
             {"columns", v.columns},
             {"rows", v.rows},
             {"row_count", v.row_count},
             {"truncated", v.truncated},
             {"error_message", v.error_message ? json(*v.error_message) : json(nullptr)}};
}

void from_json(const json& j, SqlExecution& v) {
    j.at("query").get_to(v.query);
    v.status = parse_exec_status(j.at("status").get<std::string>());
    j.at("columns").get_to(v.columns);
    j.at("rows").get_to(v.rows);
    j.at("row_count").get_to(v.row_count);
    j.at("truncated").get_to(v.truncated);
    const json& em = j.at("error_message");
    v.error_message = em.is_null() ? std::nullopt : std::optional(em.get<std::string>());
}

void to_json(json& j, const RunConfig& v) {
    j = json{{"model_id", v.model_id},
             {"provider_id", v.provider_id},
             {"strategy", to_string(v.strategy)},
             {"agent_temperature", v.agent_temperature},
             {"evaluator_temperature", v.evaluator_temperature},
             {"evaluator_model_id", v.evaluator_model_id},
             {"max_iterations", v.max_iterations},
             {"row_limit", v.row_limit},
             {"statement_timeout_ms", v.statement_timeout_ms},
             {"context_token_budget", v.context_token_budget},
             {"reviewer_count", v.reviewer_count},
             {"meta_reviewer_count", v.meta_reviewer_count},
             {"random_seed", v.random_seed},
             {"max_output_tokens", v.max_output_tokens},
             {"parallelism", v.parallelism}};
}

// Missing keys keep their defaults so a config file may set only a subset.
void from_json(const json& j, RunConfig& v) {
    v.model_id = j.value("model_id", v.model_id);
    v.provider_id = j.value("provider_id", v.provider_id);
    if (j.contains("strategy")) v.strategy = parse_strategy(j.at("strategy").get<std::string>());
    v.agent_temperature = j.value("agent_temperature", v.agent_temperature);
    v.evaluator_temperature = j.value("evaluator_temperature", v.evaluator_temperature);
    v.evaluator_model_id = j.value("evaluator_model_id", v.evaluator_model_id);
    v.max_iterations = j.value("max_iterations", v.max_iterations);
    v.row_limit = j.value("row_limit", v.row_limit);
    v.statement_timeout_ms = j.value("statement_timeout_ms", v.statement_timeout_ms);
    v.context_token_budget = j.value("context_token_budget", v.context_token_budget);
    v.reviewer_count = j.value("reviewer_count", v.reviewer_count);
    v.meta_reviewer_count = j.value("meta_reviewer_count", v.meta_reviewer_count);
    v.random_seed = j.value("random_seed", v.random_seed);
    v.max_output_tokens = j.value("max_output_tokens", v.max_output_tokens);
    v.parallelism = j.value("parallelism", v.parallelism);
}

}  // namespace dbqa
