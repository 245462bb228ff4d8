#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dbqa/agent.hpp"
#include "dbqa/core_model.hpp"
#include "dbqa/gateway.hpp"
#include "dbqa/templates.hpp"

namespace dbqa {

enum class Decision { perfect, imperfect };
std::string_view to_string(Decision d);
Decision parse_decision_name(std::string_view s);

enum class RefKind { match_binary, score_1_5 };
std::string_view to_string(RefKind k);

struct RefVerdict {
    std::string question_id;
    RefKind kind = RefKind::match_binary;
    std::optional<bool> match;
    std::optional<int> score;
    std::string rationale;
    std::string raw_completion;
    bool operator==(const RefVerdict&) const = default;
};

struct ReviewVerdict {
    SubTaskKind subtask_kind = SubTaskKind::interaction_planning;
    int reviewer_index = 0;
    Decision decision = Decision::imperfect;
    std::string rationale;
    std::string raw_completion;
    bool operator==(const ReviewVerdict&) const = default;
};

struct MetaVerdict {
    SubTaskKind subtask_kind = SubTaskKind::interaction_planning;
    int meta_index = 0;
    Decision decision = Decision::imperfect;
    std::string rationale;
    std::vector<int> reviews_seen;
    std::string raw_completion;
    bool operator==(const MetaVerdict&) const = default;
};

struct SubtaskEval {
    SubTaskKind kind = SubTaskKind::interaction_planning;
    std::vector<ReviewVerdict> reviews;
    std::vector<MetaVerdict> metas;
    std::optional<Decision> final_decision;  // majority over metas; absent when incomplete
    bool reviewer_agreement = false;         // all reviewers returned the same decision
    bool meta_agreement = false;
    bool complete = false;
    std::vector<std::string> errors;
    bool operator==(const SubtaskEval&) const = default;
};

struct InstanceEval {
    std::string question_id;
    std::optional<RefVerdict> ref_verdict;
    std::optional<std::string> ref_error;
    std::vector<SubtaskEval> subtasks;

    const SubtaskEval* subtask(SubTaskKind kind) const;
    bool operator==(const InstanceEval&) const = default;
};

void to_json(json& j, const RefVerdict& v);
void from_json(const json& j, RefVerdict& v);
void to_json(json& j, const ReviewVerdict& v);
void from_json(const json& j, ReviewVerdict& v);
void to_json(json& j, const MetaVerdict& v);
void from_json(const json& j, MetaVerdict& v);
void to_json(json& j, const SubtaskEval& v);
void from_json(const json& j, SubtaskEval& v);
void to_json(json& j, const InstanceEval& v);
void from_json(const json& j, InstanceEval& v);

// Verdict parsers. Each reads the LAST occurrence of its marker and throws
// ParseError when the marker is missing or its value is out of range.
bool parse_conclusion(std::string_view completion);
int parse_score(std::string_view completion);
Decision parse_final_decision(std::string_view completion);
/// Text preceding the last `marker`, with a leading "Rationale:" label removed.
std::string extract_rationale(std::string_view completion, std::string_view marker);

/// What reviewers see of one agent run.
struct ReviewContext {
    std::string question;
    std::string database_text;
    std::string plan;
    std::string sql_results;
    std::string answer;
};

ReviewContext make_review_context(const StrategyOutcome& outcome, const QuestionRecord& q,
                                  const DatabaseSpec& spec);

std::string review_template_name(SubTaskKind kind);
std::string meta_template_name(SubTaskKind kind);

/// Reviewer block injected into meta-review prompts, in reviewer_index order.
std::string render_reviews_block(const std::vector<ReviewVerdict>& reviews);

std::string render_review_prompt(SubTaskKind kind, const ReviewContext& ctx,
                                 const TemplateSet& templates = TemplateSet::builtin());
std::string render_meta_prompt(SubTaskKind kind, const ReviewContext& ctx,
                               const std::vector<ReviewVerdict>& reviews,
                               const TemplateSet& templates = TemplateSet::builtin());

RefVerdict eval_conclusive(const QuestionRecord& q, const ReferenceAnswer& gold,
                           const std::string& answer, const RunConfig& cfg, Gateway& gw,
                           const TemplateSet& templates = TemplateSet::builtin());
RefVerdict eval_interpretive(const QuestionRecord& q, const ReferenceAnswer& gold,
                             const std::string& answer, const RunConfig& cfg, Gateway& gw,
                             const TemplateSet& templates = TemplateSet::builtin());

ReviewVerdict review_subtask(SubTaskKind kind, const ReviewContext& ctx, int reviewer_index,
                             const RunConfig& cfg, Gateway& gw,
                             const TemplateSet& templates = TemplateSet::builtin(),
                             std::string_view call_label = {});
MetaVerdict meta_review(const std::vector<ReviewVerdict>& reviews, const ReviewContext& ctx,
                        int meta_index, const RunConfig& cfg, Gateway& gw,
                        const TemplateSet& templates = TemplateSet::builtin(),
                        std::string_view call_label = {});

/// Perfect iff strictly more than half are perfect. Empty or even-length
/// input throws ConfigError.
Decision aggregate_majority(const std::vector<Decision>& decisions);
Decision aggregate_majority(const std::vector<MetaVerdict>& metas);

/// Fraction of inner lists whose decisions are all identical. Inner lists
/// must be non-empty and the outer list non-empty (ValidationError).
double compute_agreement(const std::vector<std::vector<Decision>>& verdict_sets);

/// Sub-tasks reviewed for a strategy: all three, or synthesis only for none.
std::vector<SubTaskKind> reviewed_subtasks(Strategy strategy);

/// Reference-based verdict plus the two-tier review of every sub-task.
/// Parse failures are retried once per call and then recorded, never thrown.
InstanceEval run_full_eval(const StrategyOutcome& outcome, const QuestionRecord& q,
                           const ReferenceAnswer& gold, const DatabaseSpec& spec,
                           const RunConfig& cfg, Gateway& gw,
                           const TemplateSet& templates = TemplateSet::builtin());

}  // namespace dbqa
