#include "dbqa/eval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>

#include "dbqa/error.hpp"
#include "dbqa/sandbox.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

std::string_view to_string(Decision d) { return d == Decision::perfect ? "perfect" : "imperfect"; }

Decision parse_decision_name(std::string_view s) {
    if (s == "perfect") return Decision::perfect;
    if (s == "imperfect") return Decision::imperfect;
    throw ParseError("unknown decision '" + std::string(s) + "'");
}

std::string_view to_string(RefKind k) {
    return k == RefKind::match_binary ? "match_binary" : "score_1_5";
}

const SubtaskEval* InstanceEval::subtask(SubTaskKind kind) const {
    for (const auto& s : subtasks) {
        if (s.kind == kind) return &s;
    }
    return nullptr;
}

// ---------------------------------------------------------------------------
// JSON

namespace {
template <typename T>
json opt(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}
template <typename T>
std::optional<T> get_opt(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<T>();
}
}  // namespace

void to_json(json& j, const RefVerdict& v) {
    j = json{{"question_id", v.question_id}, {"kind", to_string(v.kind)},
             {"match", opt(v.match)},         {"score", opt(v.score)},
             {"rationale", v.rationale},      {"raw_completion", v.raw_completion}};
}

void from_json(const json& j, RefVerdict& v) {
    j.at("question_id").get_to(v.question_id);
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "match_binary") {
        v.kind = RefKind::match_binary;
    } else if (kind == "score_1_5") {
        v.kind = RefKind::score_1_5;
    } else {
        throw ParseError("unknown verdict kind '" + kind + "'");
    }
    v.match = get_opt<bool>(j, "match");
    v.score = get_opt<int>(j, "score");
    j.at("rationale").get_to(v.rationale);
    j.at("raw_completion").get_to(v.raw_completion);
    const bool binary_ok = v.kind == RefKind::match_binary && v.match && !v.score;
    const bool score_ok = v.kind == RefKind::score_1_5 && v.score && *v.score >= 1 && *v.score <= 5;
    if (!binary_ok && !score_ok) throw ParseError("verdict fields disagree with its kind");
}

void to_json(json& j, const ReviewVerdict& v) {
    j = json{{"subtask_kind", to_string(v.subtask_kind)},
             {"reviewer_index", v.reviewer_index},
             {"decision", to_string(v.decision)},
             {"rationale", v.rationale},
             {"raw_completion", v.raw_completion}};
}

void from_json(const json& j, ReviewVerdict& v) {
    v.subtask_kind = parse_subtask_kind(j.at("subtask_kind").get<std::string>());
    j.at("reviewer_index").get_to(v.reviewer_index);
    v.decision = parse_decision_name(j.at("decision").get<std::string>());
    j.at("rationale").get_to(v.rationale);
    j.at("raw_completion").get_to(v.raw_completion);
}

void to_json(json& j, const MetaVerdict& v) {
    j = json{{"subtask_kind", to_string(v.subtask_kind)},
             {"meta_index", v.meta_index},
             {"decision", to_string(v.decision)},
             {"rationale", v.rationale},
             {"reviews_seen", v.reviews_seen},
             {"raw_completion", v.raw_completion}};
}

void from_json(const json& j, MetaVerdict& v) {
    v.subtask_kind = parse_subtask_kind(j.at("subtask_kind").get<std::string>());
    j.at("meta_index").get_to(v.meta_index);
    v.decision = parse_decision_name(j.at("decision").get<std::string>());
    j.at("rationale").get_to(v.rationale);
    j.at("reviews_seen").get_to(v.reviews_seen);
    j.at("raw_completion").get_to(v.raw_completion);
}

void to_json(json& j, const SubtaskEval& v) {
    j = json{{"kind", to_string(v.kind)},
             {"reviews", v.reviews},
             {"metas", v.metas},
             {"final", v.final_decision ? json(to_string(*v.final_decision)) : json(nullptr)},
             {"reviewer_agreement", v.reviewer_agreement},
             {"meta_agreement", v.meta_agreement},
             {"complete", v.complete},
             {"errors", v.errors}};
}

void from_json(const json& j, SubtaskEval& v) {
    v.kind = parse_subtask_kind(j.at("kind").get<std::string>());
    j.at("reviews").get_to(v.reviews);
    j.at("metas").get_to(v.metas);
    auto fin = get_opt<std::string>(j, "final");
    v.final_decision = fin ? std::optional(parse_decision_name(*fin)) : std::nullopt;
    j.at("reviewer_agreement").get_to(v.reviewer_agreement);
    j.at("meta_agreement").get_to(v.meta_agreement);
    j.at("complete").get_to(v.complete);
    v.errors = j.value("errors", std::vector<std::string>{});
}

void to_json(json& j, const InstanceEval& v) {
    j = json{{"question_id", v.question_id},
             {"ref_verdict", opt(v.ref_verdict)},
             {"ref_error", opt(v.ref_error)},
             {"subtasks", v.subtasks}};
}

void from_json(const json& j, InstanceEval& v) {
    j.at("question_id").get_to(v.question_id);
    v.ref_verdict = get_opt<RefVerdict>(j, "ref_verdict");
    v.ref_error = get_opt<std::string>(j, "ref_error");
    j.at("subtasks").get_to(v.subtasks);
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

// Position just past the last case-insensitive occurrence of `marker`.
std::optional<std::size_t> after_last(std::string_view text, std::string_view marker) {
    const std::string lower = to_lower(text);
    const std::string needle = to_lower(marker);
    std::size_t pos = lower.rfind(needle);
    if (pos == std::string::npos) return std::nullopt;
    return pos + needle.size();
}

std::string_view skip_decoration(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size() && (std::isspace(static_cast<unsigned char>(s[i])) ||
                            std::string_view("*-:\"'`[#>_").find(s[i]) != std::string_view::npos)) {
        ++i;
    }
    return s.substr(i);
}

std::string rest_of_line(std::string_view s) {
    std::size_t nl = s.find('\n');
    return trim(s.substr(0, nl));
}

std::string excerpt(std::string_view s) {
    std::string t = trim(s);
    return t.size() > 200 ? "..." + t.substr(t.size() - 200) : t;
}

}  // namespace

bool parse_conclusion(std::string_view completion) {
    auto pos = after_last(completion, "conclusion:");
    if (!pos) throw ParseError("no 'Conclusion:' line in completion: " + excerpt(completion));
    std::string value = to_lower(rest_of_line(skip_decoration(completion.substr(*pos))));
    while (!value.empty() && std::string_view("*\"'.`]!").find(value.back()) != std::string::npos) {
        value.pop_back();
    }
    value = trim(value);
    if (value == "match") return true;
    if (value == "not match") return false;
    throw ParseError("unrecognized conclusion '" + value + "'");
}

int parse_score(std::string_view completion) {
    auto pos = after_last(completion, "score:");
    if (!pos) throw ParseError("no 'Score:' line in completion: " + excerpt(completion));
    std::string_view rest = skip_decoration(completion.substr(*pos));
    std::size_t n = 0;
    while (n < rest.size() && std::isdigit(static_cast<unsigned char>(rest[n]))) ++n;
    if (n == 0) throw ParseError("score value is not an integer: '" + rest_of_line(rest) + "'");
    int score = std::stoi(std::string(rest.substr(0, std::min<std::size_t>(n, 6))));
    if (score < 1 || score > 5) {
        throw ParseError("score " + std::to_string(score) + " outside 1-5");
    }
    return score;
}

Decision parse_final_decision(std::string_view completion) {
    auto pos = after_last(completion, "final decision");
    if (!pos) throw ParseError("no 'Final Decision' in completion: " + excerpt(completion));
    std::string value = to_lower(skip_decoration(completion.substr(*pos)));
    if (value.starts_with("imperfect") || value.starts_with("not perfect")) {
        return Decision::imperfect;
    }
    if (value.starts_with("perfect")) return Decision::perfect;
    throw ParseError("unrecognized final decision '" + rest_of_line(value) + "'");
}

std::string extract_rationale(std::string_view completion, std::string_view marker) {
    const std::string lower = to_lower(completion);
    std::size_t pos = lower.rfind(to_lower(marker));
    std::string head = trim(completion.substr(0, pos == std::string::npos ? completion.size() : pos));
    while (!head.empty() && (head.back() == '*' || head.back() == '#')) head.pop_back();
    head = trim(head);
    std::string_view h = skip_decoration(head);
    if (iequals(h.substr(0, std::min<std::size_t>(h.size(), 10)), "rationale:")) {
        return trim(skip_decoration(h.substr(10)));
    }
    return head;
}

// ---------------------------------------------------------------------------
// Prompts

ReviewContext make_review_context(const StrategyOutcome& outcome, const QuestionRecord& q,
                                  const DatabaseSpec& spec) {
    const Transcript& t = outcome.transcript;
    ReviewContext ctx;
    ctx.question = q.text;
    ctx.database_text = spec.schema_text.empty() ? render_schema(spec) : spec.schema_text;
    std::vector<std::string> plans;
    std::vector<SqlExecution> executions;
    for (const auto& step : t.steps) {
        if (step.kind == StepKind::plan) {
            plans.push_back(t.strategy == Strategy::iterative
                                ? "Cycle " + std::to_string(step.iteration_index + 1) + ":\n" +
                                      step.content
                                : step.content);
        } else if (step.kind == StepKind::sql_result && step.execution) {
            executions.push_back(*step.execution);
        }
    }
    ctx.plan = plans.empty() ? "(no plan: the agent answered without querying the database)"
                             : join(plans, "\n\n");
    ctx.sql_results = render_history(executions);
    ctx.answer = t.final_answer.value_or("");
    return ctx;
}

std::string review_template_name(SubTaskKind kind) {
    return "rubrics/" + to_lower(short_name(kind)) + "_review";
}

std::string meta_template_name(SubTaskKind kind) {
    return "rubrics/" + to_lower(short_name(kind)) + "_meta";
}

std::string render_reviews_block(const std::vector<ReviewVerdict>& reviews) {
    std::vector<ReviewVerdict> sorted = reviews;
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        return a.reviewer_index < b.reviewer_index;
    });
    std::vector<std::string> blocks;
    for (const auto& r : sorted) {
        blocks.push_back("Reviewer " + std::to_string(r.reviewer_index + 1) +
                         ":\nRationale: " + r.rationale + "\nFinal Decision: " +
                         (r.decision == Decision::perfect ? "Perfect" : "Imperfect"));
    }
    return join(blocks, "\n\n");
}

namespace {

TemplateValues context_values(const ReviewContext& ctx) {
    return TemplateValues{{"question", ctx.question},
                          {"database_text", ctx.database_text},
                          {"plan", ctx.plan},
                          {"sql_results", ctx.sql_results},
                          {"answer", ctx.answer}};
}

std::string judge(const std::string& prompt, const RunConfig& cfg, Gateway& gw,
                  const std::string& label) {
    ChatRequest req;
    req.model_id = cfg.judge_model();
    req.messages = {ChatMessage{Role::user, prompt}};
    req.temperature = cfg.evaluator_temperature;
    req.max_output_tokens = cfg.max_output_tokens;
    req.seed = derive_seed(cfg.random_seed, label);
    return gw.complete(req).content;
}

}  // namespace

std::string render_review_prompt(SubTaskKind kind, const ReviewContext& ctx,
                                 const TemplateSet& templates) {
    return templates.render(review_template_name(kind), context_values(ctx));
}

std::string render_meta_prompt(SubTaskKind kind, const ReviewContext& ctx,
                               const std::vector<ReviewVerdict>& reviews,
                               const TemplateSet& templates) {
    TemplateValues values = context_values(ctx);
    values[std::string(short_name(kind)) + "_reviews"] = render_reviews_block(reviews);
    return templates.render(meta_template_name(kind), values);
}

// ---------------------------------------------------------------------------
// Reference-based

namespace {
TemplateValues ref_values(const QuestionRecord& q, const ReferenceAnswer& gold,
                          const std::string& answer) {
    return TemplateValues{{"question", q.text}, {"gold_answer", gold.text}, {"answer", answer}};
}
}  // namespace

RefVerdict eval_conclusive(const QuestionRecord& q, const ReferenceAnswer& gold,
                           const std::string& answer, const RunConfig& cfg, Gateway& gw,
                           const TemplateSet& templates) {
    if (q.category != Category::conclusive) {
        throw ValidationError("eval_conclusive called on an interpretive question");
    }
    std::string raw = judge(templates.render("rubrics/conclusive", ref_values(q, gold, answer)), cfg,
                            gw, q.question_id + "/ref");
    RefVerdict v;
    v.question_id = q.question_id;
    v.kind = RefKind::match_binary;
    v.raw_completion = raw;
    v.match = parse_conclusion(raw);
    v.rationale = extract_rationale(raw, "conclusion:");
    return v;
}

RefVerdict eval_interpretive(const QuestionRecord& q, const ReferenceAnswer& gold,
                             const std::string& answer, const RunConfig& cfg, Gateway& gw,
                             const TemplateSet& templates) {
    if (q.category != Category::interpretive) {
        throw ValidationError("eval_interpretive called on a conclusive question");
    }
    std::string raw = judge(templates.render("rubrics/interpretive", ref_values(q, gold, answer)),
                            cfg, gw, q.question_id + "/ref");
    RefVerdict v;
    v.question_id = q.question_id;
    v.kind = RefKind::score_1_5;
    v.raw_completion = raw;
    v.score = parse_score(raw);
    v.rationale = extract_rationale(raw, "score:");
    return v;
}

// ---------------------------------------------------------------------------
// Peer review

ReviewVerdict review_subtask(SubTaskKind kind, const ReviewContext& ctx, int reviewer_index,
                             const RunConfig& cfg, Gateway& gw, const TemplateSet& templates,
                             std::string_view call_label) {
    std::string raw = judge(render_review_prompt(kind, ctx, templates), cfg, gw,
                            std::string(call_label) + "/" + std::string(short_name(kind)) +
                                "/review/" + std::to_string(reviewer_index));
    ReviewVerdict v;
    v.subtask_kind = kind;
    v.reviewer_index = reviewer_index;
    v.raw_completion = raw;
    v.decision = parse_final_decision(raw);
    v.rationale = extract_rationale(raw, "final decision");
    return v;
}

MetaVerdict meta_review(const std::vector<ReviewVerdict>& reviews, const ReviewContext& ctx,
                        int meta_index, const RunConfig& cfg, Gateway& gw,
                        const TemplateSet& templates, std::string_view call_label) {
    if (reviews.empty()) throw ValidationError("meta_review needs at least one review");
    const SubTaskKind kind = reviews.front().subtask_kind;
    for (const auto& r : reviews) {
        if (r.subtask_kind != kind) throw ValidationError("reviews cover different sub-tasks");
    }
    std::string raw = judge(render_meta_prompt(kind, ctx, reviews, templates), cfg, gw,
                            std::string(call_label) + "/" + std::string(short_name(kind)) +
                                "/meta/" + std::to_string(meta_index));
    MetaVerdict v;
    v.subtask_kind = kind;
    v.meta_index = meta_index;
    v.raw_completion = raw;
    v.decision = parse_final_decision(raw);
    v.rationale = extract_rationale(raw, "final decision");
    for (const auto& r : reviews) v.reviews_seen.push_back(r.reviewer_index);
    std::sort(v.reviews_seen.begin(), v.reviews_seen.end());
    return v;
}

Decision aggregate_majority(const std::vector<Decision>& decisions) {
    if (decisions.empty()) throw ConfigError("majority of an empty decision list");
    if (decisions.size() % 2 == 0) {
        throw ConfigError("majority needs an odd number of decisions, got " +
                          std::to_string(decisions.size()));
    }
    auto perfect = std::count(decisions.begin(), decisions.end(), Decision::perfect);
    return 2 * static_cast<std::size_t>(perfect) > decisions.size() ? Decision::perfect
                                                                     : Decision::imperfect;
}

Decision aggregate_majority(const std::vector<MetaVerdict>& metas) {
    std::vector<Decision> d;
    d.reserve(metas.size());
    for (const auto& m : metas) d.push_back(m.decision);
    return aggregate_majority(d);
}

double compute_agreement(const std::vector<std::vector<Decision>>& verdict_sets) {
    if (verdict_sets.empty()) throw ValidationError("agreement over zero instances");
    std::size_t unanimous = 0;
    for (const auto& set : verdict_sets) {
        if (set.empty()) throw ValidationError("agreement over an empty verdict set");
        if (std::all_of(set.begin(), set.end(), [&](Decision d) { return d == set.front(); })) {
            ++unanimous;
        }
    }
    return static_cast<double>(unanimous) / static_cast<double>(verdict_sets.size());
}

std::vector<SubTaskKind> reviewed_subtasks(Strategy strategy) {
    if (strategy == Strategy::none) return {SubTaskKind::information_synthesis};
    return {SubTaskKind::interaction_planning, SubTaskKind::tool_employment,
            SubTaskKind::information_synthesis};
}

namespace {

bool unanimous(const std::vector<Decision>& d) {
    return !d.empty() && std::all_of(d.begin(), d.end(), [&](Decision x) { return x == d.front(); });
}

// Runs `call(attempt)` and retries once on a parse error. Transport errors
// are not retried here; the gateway already did.
template <typename T, typename F>
std::optional<T> attempt_twice(F&& call, std::vector<std::string>& errors, const std::string& what) {
    for (int attempt = 0; attempt < 2; ++attempt) {
        try {
            return call(attempt);
        } catch (const ParseError& e) {
            errors.push_back(what + " attempt " + std::to_string(attempt + 1) + ": " + e.what());
        } catch (const TransportError& e) {
            errors.push_back(what + ": " + e.what());
            return std::nullopt;
        }
    }
    return std::nullopt;
}

}  // namespace

InstanceEval run_full_eval(const StrategyOutcome& outcome, const QuestionRecord& q,
                           const ReferenceAnswer& gold, const DatabaseSpec& spec,
                           const RunConfig& cfg, Gateway& gw, const TemplateSet& templates) {
    const Transcript& t = outcome.transcript;
    if (t.aborted_reason || !t.final_answer) {
        throw ValidationError("cannot evaluate aborted run of '" + q.question_id + "'");
    }
    InstanceEval result;
    result.question_id = q.question_id;

    // Reference-based verdict, routed by category.
    std::vector<std::string> ref_errors;
    result.ref_verdict = attempt_twice<RefVerdict>(
        [&](int attempt) {
            RunConfig c = cfg;
            c.random_seed = cfg.random_seed + attempt;
            return q.category == Category::conclusive
                       ? eval_conclusive(q, gold, *t.final_answer, c, gw, templates)
                       : eval_interpretive(q, gold, *t.final_answer, c, gw, templates);
        },
        ref_errors, "reference eval");
    if (!result.ref_verdict) result.ref_error = join(ref_errors, "; ");

    const ReviewContext ctx = make_review_context(outcome, q, spec);
    for (SubTaskKind kind : reviewed_subtasks(t.strategy)) {
        SubtaskEval se;
        se.kind = kind;
        const std::string what = std::string(short_name(kind));
        for (int i = 0; i < cfg.reviewer_count; ++i) {
            auto v = attempt_twice<ReviewVerdict>(
                [&](int attempt) {
                    return review_subtask(kind, ctx, i, cfg, gw, templates,
                                          q.question_id + "/a" + std::to_string(attempt));
                },
                se.errors, what + " reviewer " + std::to_string(i + 1));
            if (v) se.reviews.push_back(std::move(*v));
        }
        if (static_cast<int>(se.reviews.size()) == cfg.reviewer_count) {
            for (int m = 0; m < cfg.meta_reviewer_count; ++m) {
                auto v = attempt_twice<MetaVerdict>(
                    [&](int attempt) {
                        return meta_review(se.reviews, ctx, m, cfg, gw, templates,
                                           q.question_id + "/a" + std::to_string(attempt));
                    },
                    se.errors, what + " meta-reviewer " + std::to_string(m + 1));
                if (v) se.metas.push_back(std::move(*v));
            }
        }
        std::vector<Decision> reviewer_decisions;
        for (const auto& r : se.reviews) reviewer_decisions.push_back(r.decision);
        std::vector<Decision> meta_decisions;
        for (const auto& m : se.metas) meta_decisions.push_back(m.decision);
        se.reviewer_agreement = unanimous(reviewer_decisions);
        se.meta_agreement = unanimous(meta_decisions);
        se.complete = static_cast<int>(se.metas.size()) == cfg.meta_reviewer_count &&
                      static_cast<int>(se.reviews.size()) == cfg.reviewer_count;
        if (se.complete) {
            se.final_decision = aggregate_majority(se.metas);
        } else {
            spdlog::warn("{}: {} evaluation incomplete", q.question_id, what);
        }
        result.subtasks.push_back(std::move(se));
    }
    return result;
}

}  // namespace dbqa
