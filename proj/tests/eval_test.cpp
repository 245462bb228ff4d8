#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <mutex>
#include <random>

#include "dbqa/error.hpp"
#include "dbqa/eval.hpp"
#include "test_support.hpp"

using namespace dbqa;
using dbqa::testkit::make_instance;
using dbqa::testkit::singers_db;

namespace {

// Counts perfect decisions the same way a person would, without the library.
Decision oracle_majority(const std::vector<Decision>& d) {
    int perfect = 0;
    for (Decision x : d) perfect += x == Decision::perfect ? 1 : 0;
    return perfect * 2 > static_cast<int>(d.size()) ? Decision::perfect : Decision::imperfect;
}

std::unique_ptr<Gateway> make_gateway(std::function<ChatResponse(const ChatRequest&)> fn) {
    auto gw = std::make_unique<Gateway>(GatewayOptions{false, std::nullopt, 1, std::chrono::milliseconds(0)});
    gw->register_provider("judge", std::make_shared<CallbackProvider>(std::move(fn)));
    return gw;
}

RunConfig judge_config(Strategy s = Strategy::sequential) {
    RunConfig c;
    c.model_id = "judge";
    c.strategy = s;
    return c;
}

StrategyOutcome finished_run(Strategy s) {
    StrategyOutcome o;
    o.transcript.question_id = "q1";
    o.transcript.strategy = s;
    o.transcript.model_id = "judge";
    if (s != Strategy::none) {
        o.transcript.steps.push_back(Step{StepKind::plan, "Look up French singers.", 0, std::nullopt});
        SqlExecution e;
        e.query = "SELECT name FROM singer WHERE country = 'France'";
        e.columns = {"name"};
        e.rows = {{"Justin Brown"}, {"Rose White"}};
        e.row_count = 2;
        o.transcript.steps.push_back(Step{StepKind::sql, e.query, 0, std::nullopt});
        o.transcript.steps.push_back(Step{StepKind::sql_result, "rendered", 0, e});
    }
    o.transcript.steps.push_back(Step{StepKind::synthesis, "Two singers.", 0, std::nullopt});
    o.transcript.steps.push_back(Step{StepKind::final_answer, "Justin Brown and Rose White.", 0, std::nullopt});
    o.transcript.final_answer = "Justin Brown and Rose White.";
    return o;
}

std::string prompt_of(const ChatRequest& r) { return r.messages.front().content; }

bool is_meta(const std::string& p) { return p.find("Reviewer 1:") != std::string::npos; }

}  // namespace

TEST(Parsers, Conclusion) {
    EXPECT_TRUE(parse_conclusion("Rationale: fine.\nConclusion: Match"));
    EXPECT_FALSE(parse_conclusion("Conclusion: Match\nwait\nConclusion: Not Match."));
    EXPECT_TRUE(parse_conclusion("**Conclusion:** \"Match\""));
    EXPECT_THROW(parse_conclusion("I think it matches"), ParseError);
    EXPECT_THROW(parse_conclusion("Conclusion: maybe"), ParseError);
}

TEST(Parsers, Score) {
    EXPECT_EQ(parse_score("Score: 4"), 4);
    EXPECT_EQ(parse_score("Score: 2\nreconsidered.\n**Score:** 5/5"), 5);
    EXPECT_THROW(parse_score("Score: 0"), ParseError);
    EXPECT_THROW(parse_score("Score: 6"), ParseError);
    EXPECT_THROW(parse_score("Score: high"), ParseError);
    EXPECT_THROW(parse_score("nothing"), ParseError);
}

TEST(Parsers, FinalDecision) {
    EXPECT_EQ(parse_final_decision("Final Decision: Perfect"), Decision::perfect);
    EXPECT_EQ(parse_final_decision("Final Decision: Perfect\nFinal Decision: Imperfect"), Decision::imperfect);
    EXPECT_EQ(parse_final_decision("**Final Decision**: *Imperfect*"), Decision::imperfect);
    EXPECT_THROW(parse_final_decision("Final Decision: unsure"), ParseError);
    EXPECT_THROW(parse_final_decision("Perfect"), ParseError);
}

TEST(Parsers, Rationale) {
    EXPECT_EQ(extract_rationale("Rationale: solid plan.\nFinal Decision: Perfect", "final decision"),
              "solid plan.");
    EXPECT_EQ(extract_rationale("Just text\nConclusion: Match", "conclusion:"), "Just text");
}

TEST(Majority, ExhaustiveOddLengths) {
    for (int n : {1, 3, 5}) {
        for (int mask = 0; mask < (1 << n); ++mask) {
            std::vector<Decision> d;
            for (int i = 0; i < n; ++i) d.push_back(mask >> i & 1 ? Decision::perfect : Decision::imperfect);
            EXPECT_EQ(aggregate_majority(d), oracle_majority(d)) << "n=" << n << " mask=" << mask;
        }
    }
}

TEST(Majority, RejectsEvenOrEmpty) {
    EXPECT_THROW(aggregate_majority(std::vector<Decision>{}), ConfigError);
    EXPECT_THROW(aggregate_majority(std::vector<Decision>{Decision::perfect, Decision::imperfect}), ConfigError);
}

TEST(Agreement, FractionOfUnanimousSets) {
    using D = Decision;
    EXPECT_DOUBLE_EQ(compute_agreement({{D::perfect, D::perfect}, {D::perfect, D::imperfect},
                                        {D::imperfect, D::imperfect, D::imperfect}, {D::perfect}}),
                     0.75);
    EXPECT_THROW(compute_agreement({}), ValidationError);
    EXPECT_THROW(compute_agreement({{}}), ValidationError);
}

TEST(Agreement, RandomSetsAgainstCount) {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::vector<Decision>> sets(1 + rng() % 8);
        int unanimous = 0;
        for (auto& s : sets) {
            s.resize(1 + rng() % 5);
            for (auto& d : s) d = rng() % 2 ? Decision::perfect : Decision::imperfect;
            bool all = true;
            for (auto d : s) all = all && d == s[0];
            unanimous += all ? 1 : 0;
        }
        EXPECT_DOUBLE_EQ(compute_agreement(sets), static_cast<double>(unanimous) / sets.size());
    }
}

TEST(ReviewedSubtasks, NoneStrategyOnlySynthesis) {
    EXPECT_EQ(reviewed_subtasks(Strategy::none), std::vector<SubTaskKind>{SubTaskKind::information_synthesis});
    EXPECT_EQ(reviewed_subtasks(Strategy::iterative).size(), 3u);
}

TEST(Rubrics, PromptsSubstituteEveryField) {
    auto ctx = make_review_context(finished_run(Strategy::sequential),
                                   make_instance("q1", singers_db(), Category::conclusive, "Who is French?", "x").question,
                                   singers_db());
    EXPECT_EQ(ctx.plan, "Look up French singers.");
    EXPECT_NE(ctx.sql_results.find("Justin Brown"), std::string::npos);
    for (SubTaskKind k : reviewed_subtasks(Strategy::sequential)) {
        std::string p = render_review_prompt(k, ctx);
        EXPECT_EQ(p.find('{'), std::string::npos) << p;
        EXPECT_NE(p.find("Who is French?"), std::string::npos);
        EXPECT_NE(p.find("CREATE TABLE singer"), std::string::npos);
        ReviewVerdict r{k, 0, Decision::perfect, "good", ""};
        std::string m = render_meta_prompt(k, ctx, {r});
        EXPECT_NE(m.find("Reviewer 1:\nRationale: good\nFinal Decision: Perfect"), std::string::npos);
    }
    EXPECT_NE(render_review_prompt(SubTaskKind::tool_employment, ctx)
                  .find("SELECT name FROM singer WHERE country = 'France'"),
              std::string::npos);
}

TEST(Rubrics, ReviewsBlockOrderedByIndex) {
    std::vector<ReviewVerdict> r{{SubTaskKind::tool_employment, 1, Decision::imperfect, "b", ""},
                                 {SubTaskKind::tool_employment, 0, Decision::perfect, "a", ""}};
    EXPECT_EQ(render_reviews_block(r),
              "Reviewer 1:\nRationale: a\nFinal Decision: Perfect\n\n"
              "Reviewer 2:\nRationale: b\nFinal Decision: Imperfect");
}

TEST(RefEval, CategoryRouting) {
    auto inst = make_instance("q1", singers_db(), Category::interpretive, "Why?", "Because.");
    std::string seen;
    auto gw = make_gateway([&](const ChatRequest& r) {
        seen = prompt_of(r);
        return text_response("Reasoning.\nScore: 4");
    });
    auto v = eval_interpretive(inst.question, inst.answer, "Because so.", judge_config(), *gw);
    EXPECT_EQ(v.score, 4);
    EXPECT_FALSE(v.match);
    EXPECT_EQ(v.kind, RefKind::score_1_5);
    EXPECT_NE(seen.find("Because so."), std::string::npos);
    EXPECT_NE(seen.find("Because."), std::string::npos);
    EXPECT_THROW(eval_conclusive(inst.question, inst.answer, "x", judge_config(), *gw), ValidationError);
}

TEST(FullEval, AllPerfectIsComplete) {
    auto inst = make_instance("q1", singers_db(), Category::conclusive, "Who is French?", "Justin Brown and Rose White.");
    std::atomic<int> calls{0};
    auto gw = make_gateway([&](const ChatRequest& r) {
        ++calls;
        std::string p = prompt_of(r);
        if (p.starts_with("Given the following inputs")) return text_response("Conclusion: Match");
        return text_response("Rationale: ok\nFinal Decision: Perfect");
    });
    auto ev = run_full_eval(finished_run(Strategy::sequential), inst.question, inst.answer, singers_db(),
                            judge_config(), *gw);
    EXPECT_EQ(calls.load(), 1 + 3 * 6);
    EXPECT_EQ(ev.ref_verdict->match, true);
    ASSERT_EQ(ev.subtasks.size(), 3u);
    for (const auto& s : ev.subtasks) {
        EXPECT_TRUE(s.complete);
        EXPECT_EQ(s.final_decision, Decision::perfect);
        EXPECT_TRUE(s.reviewer_agreement && s.meta_agreement);
        for (const auto& m : s.metas) EXPECT_EQ(m.reviews_seen, (std::vector<int>{0, 1, 2}));
    }
    EXPECT_EQ(json(ev).get<InstanceEval>(), ev);
}

TEST(FullEval, ParseFailureRetriedOnce) {
    auto inst = make_instance("q1", singers_db(), Category::conclusive, "Who?", "x");
    std::map<std::string, int> seen;
    std::mutex mu;
    auto gw = make_gateway([&](const ChatRequest& r) {
        std::string p = prompt_of(r);
        std::lock_guard lock(mu);
        if (p.starts_with("Given the following inputs")) {
            return text_response(seen["ref"]++ == 0 ? "garbled" : "Conclusion: Not Match");
        }
        if (is_meta(p)) return text_response("Final Decision: Imperfect");
        return text_response("Final Decision: Perfect");
    });
    auto ev = run_full_eval(finished_run(Strategy::none), inst.question, inst.answer, singers_db(),
                            judge_config(Strategy::none), *gw);
    EXPECT_EQ(seen["ref"], 2);
    EXPECT_EQ(ev.ref_verdict->match, false);
    EXPECT_FALSE(ev.ref_error);
    ASSERT_EQ(ev.subtasks.size(), 1u);
    EXPECT_EQ(ev.subtasks[0].final_decision, Decision::imperfect);
}

TEST(FullEval, PersistentFailureLeavesIncomplete) {
    auto inst = make_instance("q1", singers_db(), Category::conclusive, "Who?", "x");
    std::atomic<int> reviewer_calls{0};
    auto gw = make_gateway([&](const ChatRequest& r) {
        std::string p = prompt_of(r);
        if (p.starts_with("Given the following inputs")) return text_response("no verdict");
        if (p.find("A planning agent has been tasked") != std::string::npos) {
            if (reviewer_calls++ < 2) return text_response("unparseable");
        }
        if (p.find("translate the plan into accurate") != std::string::npos) throw TransportError("down");
        return text_response("Final Decision: Perfect");
    });
    auto ev = run_full_eval(finished_run(Strategy::sequential), inst.question, inst.answer, singers_db(),
                            judge_config(), *gw);
    EXPECT_FALSE(ev.ref_verdict);
    EXPECT_TRUE(ev.ref_error);
    const auto* ip = ev.subtask(SubTaskKind::interaction_planning);
    ASSERT_TRUE(ip);
    EXPECT_EQ(ip->reviews.size(), 2u);
    EXPECT_TRUE(ip->metas.empty());
    EXPECT_FALSE(ip->complete);
    EXPECT_FALSE(ip->final_decision);
    EXPECT_EQ(ip->errors.size(), 2u);
    const auto* te = ev.subtask(SubTaskKind::tool_employment);
    EXPECT_TRUE(te->reviews.empty());
    EXPECT_EQ(te->errors.size(), 3u);
    EXPECT_TRUE(ev.subtask(SubTaskKind::information_synthesis)->complete);
}

TEST(FullEval, AbortedRunRejected) {
    auto inst = make_instance("q1", singers_db(), Category::conclusive, "Who?", "x");
    auto o = finished_run(Strategy::sequential);
    o.transcript.final_answer.reset();
    o.transcript.aborted_reason = AbortReason::provider_error;
    auto gw = make_gateway([](const ChatRequest&) { return text_response(""); });
    EXPECT_THROW(run_full_eval(o, inst.question, inst.answer, singers_db(), judge_config(), *gw), ValidationError);
}

TEST(FullEval, MixedMetasUseMajority) {
    auto inst = make_instance("q1", singers_db(), Category::conclusive, "Who?", "x");
    std::atomic<int> meta_calls{0};
    auto gw = make_gateway([&](const ChatRequest& r) {
        std::string p = prompt_of(r);
        if (p.starts_with("Given the following inputs")) return text_response("Conclusion: Match");
        if (is_meta(p)) {
            int k = meta_calls++;
            return text_response(k == 0 ? "Final Decision: Imperfect" : "Final Decision: Perfect");
        }
        return text_response("Final Decision: Perfect");
    });
    auto ev = run_full_eval(finished_run(Strategy::none), inst.question, inst.answer, singers_db(),
                            judge_config(Strategy::none), *gw);
    EXPECT_EQ(ev.subtasks[0].final_decision, Decision::perfect);
    EXPECT_FALSE(ev.subtasks[0].meta_agreement);
    EXPECT_TRUE(ev.subtasks[0].reviewer_agreement);
}
