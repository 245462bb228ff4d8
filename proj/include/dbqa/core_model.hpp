#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace dbqa {

using json = nlohmann::json;

enum class Category { conclusive, interpretive };
enum class PipelineStage { drafted, condensed, confirmed };
enum class Strategy { none, sequential, iterative };
enum class StepKind { plan, sql, sql_result, synthesis, final_answer };
enum class AbortReason { context_overflow, iteration_cap, provider_error };
enum class ExecStatus { ok, error };

std::string_view to_string(Category v);
std::string_view to_string(PipelineStage v);
std::string_view to_string(Strategy v);
std::string_view to_string(StepKind v);
std::string_view to_string(AbortReason v);
std::string_view to_string(ExecStatus v);

// Strict parsers; unknown names throw ParseError.
Category parse_category(std::string_view s);
PipelineStage parse_pipeline_stage(std::string_view s);
Strategy parse_strategy(std::string_view s);
StepKind parse_step_kind(std::string_view s);
AbortReason parse_abort_reason(std::string_view s);
ExecStatus parse_exec_status(std::string_view s);

/// Executable definition of one database.
struct DatabaseSpec {
    std::string db_id;
    std::vector<std::string> create_statements;
    std::vector<std::string> insert_statements;
    std::string schema_text;

    /// create_statements followed by insert_statements.
    std::vector<std::string> all_statements() const;
    bool operator==(const DatabaseSpec&) const = default;
};

struct QuestionRecord {
    std::string question_id;
    std::string db_id;
    std::string text;
    Category category = Category::conclusive;
    std::vector<std::string> source_keywords;
    PipelineStage pipeline_stage = PipelineStage::drafted;

    bool operator==(const QuestionRecord&) const = default;
};

struct ReferenceAnswer {
    std::string question_id;
    std::string text;
    std::string evidence_note;
    std::int64_t word_count = 0;

    bool operator==(const ReferenceAnswer&) const = default;
};

struct SqlExecution {
    std::string query;
    ExecStatus status = ExecStatus::ok;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
    std::int64_t row_count = 0;
    bool truncated = false;
    std::optional<std::string> error_message;

    bool operator==(const SqlExecution&) const = default;
};

struct Step {
    StepKind kind = StepKind::plan;
    std::string content;
    int iteration_index = 0;
    // Structured outcome behind a sql_result step; content holds its rendering.
    std::optional<SqlExecution> execution;

    bool operator==(const Step&) const = default;
};

struct Transcript {
    std::string question_id;
    Strategy strategy = Strategy::none;
    std::string model_id;
    std::vector<Step> steps;
    std::optional<std::string> final_answer;
    std::optional<AbortReason> aborted_reason;
    // Set when the iterative loop ran out of cycles; synthesis still happens.
    bool iteration_cap_reached = false;
    std::vector<std::string> warnings;

    bool operator==(const Transcript&) const = default;
};

/// Lists every violated Transcript/Step invariant; empty means well-formed.
std::vector<std::string> check_transcript(const Transcript& t);


struct RunConfig {
    std::string model_id = "scripted";
    std::string provider_id;
    Strategy strategy = Strategy::sequential;
    double agent_temperature = 0.0;
    double evaluator_temperature = 0.7;
    std::string evaluator_model_id;  // empty: same as model_id
    int max_iterations = 10;
    int row_limit = 50;
    int statement_timeout_ms = 5000;
    std::int64_t context_token_budget = 8192;
    int reviewer_count = 3;
    int meta_reviewer_count = 3;
    std::int64_t random_seed = 0;
    int max_output_tokens = 1024;
    int parallelism = 1;

    /// Throws ConfigError when a field is out of range.
    void validate() const;
    const std::string& judge_model() const {
        return evaluator_model_id.empty() ? model_id : evaluator_model_id;
    }
    bool operator==(const RunConfig&) const = default;
};

void to_json(json& j, const DatabaseSpec& v);
void from_json(const json& j, DatabaseSpec& v);
void to_json(json& j, const QuestionRecord& v);
void from_json(const json& j, QuestionRecord& v);
void to_json(json& j, const ReferenceAnswer& v);
void from_json(const json& j, ReferenceAnswer& v);
void to_json(json& j, const Step& v);
void from_json(const json& j, Step& v);
void to_json(json& j, const Transcript& v);
void from_json(const json& j, Transcript& v);
void to_json(json& j, const SqlExecution& v);
void from_json(const json& j, SqlExecution& v);
void to_json(json& j, const RunConfig& v);
void from_json(const json& j, RunConfig& v);

}  // namespace dbqa
