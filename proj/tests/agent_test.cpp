#include <gtest/gtest.h>

#include "dbqa/agent.hpp"
#include "dbqa/error.hpp"
#include "test_support.hpp"

using namespace dbqa;
using dbqa::testkit::singers_db;

namespace {

const std::string kPlan42 =
    "First find every singer together with the country they come from. Then look up each "
    "concert with its year and attendance figures. Finally compare the attendance of French "
    "singers against the others and note which singer drew the largest crowd overall today.";

struct Script {
    std::string plan = kPlan42;
    std::string sql;
    std::string answer = "Analysis.\nFinal Answer: Justin Brown drew the largest crowds.";
    std::vector<std::string> iterative_plans;  // cycle k uses entry k, last one repeats
    std::vector<std::string> iterative_sql;
    std::string dump_answer = "Thinking.\nFinal Answer: Joe Sharp.";
};

std::shared_ptr<CallbackProvider> scripted(const Script& s) {
    return std::make_shared<CallbackProvider>([s](const ChatRequest& r) {
        const std::string& p = r.messages.front().content;
        auto pick = [&](const std::vector<std::string>& v) {
            auto pos = p.find("Interaction cycle ");
            std::size_t cycle = std::stoul(p.substr(pos + 18)) - 1;
            return v.empty() ? std::string{} : v[std::min(cycle, v.size() - 1)];
        };
        if (p.find("you cannot run queries") != std::string::npos) return text_response(s.dump_answer);
        if (p.find("Synthesize the retrieved") != std::string::npos) return text_response(s.answer);
        if (p.find("one SQL query at a time") != std::string::npos) return text_response(pick(s.iterative_plans));
        if (p.find("translating one retrieval step") != std::string::npos) return text_response(pick(s.iterative_sql));
        if (p.find("planning how to answer") != std::string::npos) return text_response(s.plan);
        if (p.find("translating a retrieval plan") != std::string::npos) return text_response(s.sql);
        throw ConfigError("unexpected prompt");
    });
}

QuestionRecord question() {
    QuestionRecord q;
    q.question_id = "q1";
    q.db_id = "concert_singer";
    q.text = "Which singer drew the largest concert crowds?";
    return q;
}

RunConfig config(Strategy s) {
    RunConfig c;
    c.model_id = "agent";
    c.strategy = s;
    return c;
}

StrategyOutcome run(const Script& s, Strategy strategy, RunConfig cfg = {}, DatabaseSpec db = singers_db()) {
    if (cfg.model_id == RunConfig{}.model_id) cfg = config(strategy);
    cfg.strategy = strategy;
    Gateway gw(GatewayOptions{false, std::nullopt, 1, std::chrono::milliseconds(0)});
    gw.register_provider(cfg.model_id, scripted(s));
    return run_strategy(question(), db, cfg, gw);
}

std::vector<StepKind> kinds(const Transcript& t) {
    std::vector<StepKind> out;
    for (const auto& s : t.steps) out.push_back(s.kind);
    return out;
}

}  // namespace

TEST(ExtractSql, FencedBlocksInOrder) {
    auto q = extract_sql_queries("Here:\n```sql\nSELECT 1;\n```\ntext\n```SQL\nSELECT name\nFROM singer\n```\n");
    ASSERT_EQ(q.size(), 2u);
    EXPECT_EQ(q[0], "SELECT 1;");
    EXPECT_EQ(q[1], "SELECT name\nFROM singer");
}

TEST(ExtractSql, FallbackToInlineStatements) {
    auto q = extract_sql_queries("I would run SELECT name FROM singer; and that is all.");
    ASSERT_EQ(q.size(), 1u);
    EXPECT_EQ(q[0], "SELECT name FROM singer;");
    auto cte = extract_sql_queries("with x as (select 1 as a) select a from x;");
    ASSERT_EQ(cte.size(), 1u);
    EXPECT_TRUE(extract_sql_queries("with that plan in mind, nothing to do.").empty());
}

TEST(ExtractSql, NeitherFenceNorStatement) {
    EXPECT_TRUE(extract_sql_queries("I cannot help with that.").empty());
    EXPECT_TRUE(extract_sql_queries("").empty());
}

TEST(DetectStop, SentinelMustBeOwnLine) {
    EXPECT_TRUE(detect_stop("All gathered.\nNO MORE QUERIES NEEDED"));
    EXPECT_TRUE(detect_stop("  no more queries needed  \n"));
    EXPECT_FALSE(detect_stop("There are no more queries needed, I think."));
    EXPECT_FALSE(detect_stop(""));
}

TEST(ExtractFinalAnswer, LastMarkerWins) {
    EXPECT_EQ(extract_final_answer("x\nFinal Answer: a\nmore\nFinal Answer: b"), "b");
    EXPECT_EQ(extract_final_answer("**Final Answer:** bold"), "bold");
    EXPECT_EQ(extract_final_answer("Final Answer: line one\nline two"), "line one\nline two");
    EXPECT_EQ(extract_final_answer("  no marker here "), "no marker here");
}

TEST(DeriveSeed, StableAndLabelSensitive) {
    EXPECT_EQ(derive_seed(1, "q1/IP/0"), derive_seed(1, "q1/IP/0"));
    EXPECT_NE(derive_seed(1, "q1/IP/0"), derive_seed(1, "q1/IP/1"));
    EXPECT_NE(derive_seed(1, "q1/IP/0"), derive_seed(2, "q1/IP/0"));
    EXPECT_GE(derive_seed(5, "x"), 0);
}

TEST(NoInteraction, SingleCallWithFullDump) {
    auto o = run(Script{}, Strategy::none);
    EXPECT_EQ(kinds(o.transcript), std::vector<StepKind>{StepKind::final_answer});
    EXPECT_EQ(o.transcript.final_answer, "Joe Sharp.");
    EXPECT_EQ(o.stats.n_sql_generated, 0);
    ASSERT_EQ(o.subtask_records.size(), 1u);
    EXPECT_EQ(o.subtask_records[0].kind, SubTaskKind::information_synthesis);
    auto dump = Sandbox::create(singers_db()).dump_records(100000).text;
    EXPECT_NE(o.subtask_records[0].input_bundle.find(dump), std::string::npos);
}

TEST(NoInteraction, OversizedDatabaseOverflows) {
    auto db = singers_db();
    for (int i = 10; i < 400; ++i) {
        db.insert_statements.push_back("INSERT INTO singer VALUES (" + std::to_string(i) +
                                       ", 'Singer number " + std::to_string(i) + "', 'Country', 30, 1.5)");
    }
    RunConfig cfg = config(Strategy::none);
    cfg.context_token_budget = 2000;
    auto o = run(Script{}, Strategy::none, cfg, db);
    EXPECT_EQ(o.transcript.aborted_reason, AbortReason::context_overflow);
    EXPECT_FALSE(o.transcript.final_answer);
    EXPECT_TRUE(o.transcript.steps.empty());
    EXPECT_TRUE(o.subtask_records.empty());
    EXPECT_TRUE(check_transcript(o.transcript).empty());
}

TEST(Sequential, ThreePhasesAndStats) {
    Script s;
    s.sql = "```sql\nSELECT name FROM singer WHERE country = 'France'\n```\n"
            "```sql\nSELECT * FROM concert WHERE year = 1999\n```\n"
            "```sql\nSELECT singer_id, SUM(attendance) FROM concert GROUP BY singer_id\n```";
    auto o = run(s, Strategy::sequential);
    EXPECT_EQ(kinds(o.transcript),
              (std::vector<StepKind>{StepKind::plan, StepKind::sql, StepKind::sql_result, StepKind::sql,
                                     StepKind::sql_result, StepKind::sql, StepKind::sql_result,
                                     StepKind::synthesis, StepKind::final_answer}));
    EXPECT_EQ(word_count(kPlan42), 42u);
    EXPECT_EQ(o.stats, (OutcomeStats{42, 3, 2, 6}));
    EXPECT_EQ(compute_stats(o.transcript), o.stats);
    EXPECT_TRUE(check_transcript(o.transcript).empty());
    ASSERT_EQ(o.subtask_records.size(), 3u);
    const std::string& synth = o.subtask_records[2].input_bundle;
    for (const auto& step : o.transcript.steps) {
        if (step.kind == StepKind::sql_result) EXPECT_NE(synth.find(step.content), std::string::npos);
    }
    EXPECT_NE(o.subtask_records[0].input_bundle.find(question().text), std::string::npos);
    EXPECT_NE(o.subtask_records[0].input_bundle.find("CREATE TABLE singer"), std::string::npos);
}

TEST(Sequential, NoSqlStillAnswers) {
    Script s;
    s.sql = "I do not think any query is needed.";
    auto o = run(s, Strategy::sequential);
    EXPECT_EQ(o.stats.n_sql_generated, 0);
    EXPECT_TRUE(o.transcript.final_answer);
    EXPECT_EQ(o.transcript.warnings.size(), 1u);
}

TEST(Sequential, ErrorsDoNotStopLaterQueries) {
    Script s;
    s.sql = "```sql\nSELECT nope FROM nowhere\n```\n```sql\nSELECT 1\n```";
    auto o = run(s, Strategy::sequential);
    EXPECT_EQ(o.stats.n_sql_generated, 2);
    EXPECT_EQ(o.stats.n_sql_valid, 1);
}

TEST(Sequential, ProviderFailureAborts) {
    Gateway gw(GatewayOptions{false, std::nullopt, 2, std::chrono::milliseconds(0)});
    gw.register_provider("agent", std::make_shared<CallbackProvider>([](const ChatRequest& r) -> ChatResponse {
        if (r.messages[0].content.find("translating") != std::string::npos) throw TransportError("down");
        return text_response("plan");
    }));
    auto o = run_strategy(question(), singers_db(), config(Strategy::sequential), gw);
    EXPECT_EQ(o.transcript.aborted_reason, AbortReason::provider_error);
    EXPECT_TRUE(check_transcript(o.transcript).empty());
    EXPECT_EQ(kinds(o.transcript), std::vector<StepKind>{StepKind::plan});
}

TEST(Sequential, PromptOverBudgetAborts) {
    RunConfig cfg = config(Strategy::sequential);
    cfg.context_token_budget = 50;
    auto o = run(Script{}, Strategy::sequential, cfg);
    EXPECT_EQ(o.transcript.aborted_reason, AbortReason::context_overflow);
}

TEST(Iterative, TwoCyclesThenStop) {
    Script s;
    s.iterative_plans = {"Find French singers.", "Find their concerts.", "Done.\nNO MORE QUERIES NEEDED"};
    s.iterative_sql = {"```sql\nSELECT singer_id FROM singer WHERE country = 'France'\n```",
                       "```sql\nSELECT * FROM concert WHERE singer_id IN (3, 4)\n```"};
    auto o = run(s, Strategy::iterative);
    EXPECT_EQ(o.stats.n_sql_generated, 2);
    EXPECT_EQ(o.stats.n_sql_valid, 2);
    EXPECT_FALSE(o.transcript.iteration_cap_reached);
    EXPECT_TRUE(o.transcript.final_answer);
    EXPECT_TRUE(check_transcript(o.transcript).empty());
    EXPECT_EQ(o.transcript.steps.back().iteration_index, 2);
    // cycle 2's planning prompt sees cycle 1's query and result
    const auto& second_plan = o.subtask_records[2];
    ASSERT_EQ(second_plan.kind, SubTaskKind::interaction_planning);
    EXPECT_NE(second_plan.input_bundle.find(o.transcript.steps[2].content), std::string::npos);
}

TEST(Iterative, StopInFirstPlanGuesses) {
    Script s;
    s.iterative_plans = {"NO MORE QUERIES NEEDED"};
    auto o = run(s, Strategy::iterative);
    EXPECT_EQ(o.stats.n_sql_generated, 0);
    EXPECT_EQ(kinds(o.transcript),
              (std::vector<StepKind>{StepKind::plan, StepKind::synthesis, StepKind::final_answer}));
    EXPECT_NE(o.subtask_records.back().input_bundle.find("(no queries executed)"), std::string::npos);
}

TEST(Iterative, CapEnforced) {
    Script s;
    s.iterative_plans = {"keep going"};
    s.iterative_sql = {"```sql\nSELECT 1\n```\n```sql\nSELECT 2\n```"};
    auto o = run(s, Strategy::iterative);
    EXPECT_EQ(o.stats.n_sql_generated, 10);
    EXPECT_TRUE(o.transcript.iteration_cap_reached);
    EXPECT_FALSE(o.transcript.aborted_reason);
    EXPECT_EQ(o.transcript.warnings.size(), 10u);
    EXPECT_TRUE(check_transcript(o.transcript).empty());
}

TEST(Iterative, EmptyPlansRecordedVerbatim) {
    Script s;
    s.iterative_plans = {"", "NO MORE QUERIES NEEDED"};
    s.iterative_sql = {"no sql here"};
    auto o = run(s, Strategy::iterative);
    EXPECT_EQ(o.stats.plan_word_count, 4);
    EXPECT_EQ(o.transcript.steps[0].content, "");
}

TEST(Determinism, RepeatedRunsIdentical) {
    Script s;
    s.sql = "```sql\nSELECT * FROM singer\n```";
    for (Strategy st : {Strategy::none, Strategy::sequential, Strategy::iterative}) {
        s.iterative_plans = {"a", "NO MORE QUERIES NEEDED"};
        s.iterative_sql = {"```sql\nSELECT 1\n```"};
        EXPECT_EQ(json(run(s, st)).dump(), json(run(s, st)).dump());
    }
}

TEST(OutcomeJson, RoundTrip) {
    Script s;
    s.sql = "```sql\nSELECT * FROM singer\n```";
    auto o = run(s, Strategy::sequential);
    EXPECT_EQ(json(o).get<StrategyOutcome>(), o);
}
