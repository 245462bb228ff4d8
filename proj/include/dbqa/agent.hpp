#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dbqa/core_model.hpp"
#include "dbqa/gateway.hpp"
#include "dbqa/templates.hpp"

namespace dbqa {

enum class SubTaskKind { interaction_planning, tool_employment, information_synthesis };
std::string_view to_string(SubTaskKind k);
SubTaskKind parse_subtask_kind(std::string_view s);
/// "IP", "TE", "IS".
std::string_view short_name(SubTaskKind k);

struct SubTaskRecord {
    SubTaskKind kind = SubTaskKind::interaction_planning;
    std::string input_bundle;  // exact prompt text sent to the model
    std::string output;        // raw completion
    int iteration_index = 0;
    bool operator==(const SubTaskRecord&) const = default;
};

struct OutcomeStats {
    std::int64_t plan_word_count = 0;  // summed over all plan steps
    std::int64_t n_sql_generated = 0;
    std::int64_t n_sql_valid = 0;
    std::int64_t answer_word_count = 0;
    bool operator==(const OutcomeStats&) const = default;
};

struct StrategyOutcome {
    Transcript transcript;
    std::vector<SubTaskRecord> subtask_records;
    OutcomeStats stats;
    bool operator==(const StrategyOutcome&) const = default;
};

void to_json(json& j, const SubTaskRecord& v);
void from_json(const json& j, SubTaskRecord& v);
void to_json(json& j, const OutcomeStats& v);
void from_json(const json& j, OutcomeStats& v);
void to_json(json& j, const StrategyOutcome& v);
void from_json(const json& j, StrategyOutcome& v);

/// Recomputes the interaction statistics from a transcript alone.
OutcomeStats compute_stats(const Transcript& t);

inline constexpr std::string_view kStopSentinel = "NO MORE QUERIES NEEDED";

/// SQL-tagged fenced blocks in order; without any, `;`-terminated segments
/// starting with SELECT or WITH.
std::vector<std::string> extract_sql_queries(std::string_view text);

/// True iff some line is exactly the stop sentinel (case-insensitive, trimmed).
bool detect_stop(std::string_view plan_text);

/// Text after the last "Final Answer:" marker, or the whole completion.
std::string extract_final_answer(std::string_view completion);

/// Agent-facing rendering of executed queries, numbered from 1.
std::string render_history(const std::vector<SqlExecution>& executions);

/// Values for prompt placeholders; unset fields are not offered to the template.
struct PromptInputs {
    std::string question;
    std::string schema_text;
    std::optional<std::string> history;
    std::optional<std::string> plan;
    std::optional<std::string> database_dump;
    std::optional<int> cycle;  // 1-based
};

/// Template name for (kind, strategy); throws TemplateError when unsupported.
std::string prompt_template_name(SubTaskKind kind, Strategy strategy);

std::vector<ChatMessage> build_prompt(SubTaskKind kind, Strategy strategy,
                                      const PromptInputs& inputs,
                                      const TemplateSet& templates = TemplateSet::builtin());

/// Stable per-call seed derived from the run seed and a call label.
std::int64_t derive_seed(std::int64_t base, std::string_view label);

StrategyOutcome run_no_interaction(const QuestionRecord& q, const DatabaseSpec& spec,
                                   const RunConfig& cfg, Gateway& gw,
                                   const TemplateSet& templates = TemplateSet::builtin());
StrategyOutcome run_sequential(const QuestionRecord& q, const DatabaseSpec& spec,
                               const RunConfig& cfg, Gateway& gw,
                               const TemplateSet& templates = TemplateSet::builtin());
StrategyOutcome run_iterative(const QuestionRecord& q, const DatabaseSpec& spec,
                              const RunConfig& cfg, Gateway& gw,
                              const TemplateSet& templates = TemplateSet::builtin());

/// Dispatches on cfg.strategy.
StrategyOutcome run_strategy(const QuestionRecord& q, const DatabaseSpec& spec,
                             const RunConfig& cfg, Gateway& gw,
                             const TemplateSet& templates = TemplateSet::builtin());

}  // namespace dbqa
