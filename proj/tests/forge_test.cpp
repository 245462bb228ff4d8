#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "dbqa/error.hpp"
#include "dbqa/forge.hpp"
#include "test_support.hpp"

using namespace dbqa;
using dbqa::testkit::singers_db;
using dbqa::testkit::TempDir;

namespace {

const std::vector<DraftStage> kAll = {DraftStage::controlled,  DraftStage::condensed,
                                      DraftStage::conjectured, DraftStage::constructed,
                                      DraftStage::concluded,   DraftStage::classified,
                                      DraftStage::confirmed,   DraftStage::rejected};

const std::string kGoodInserts =
    "```sql\nINSERT INTO singer VALUES (10, 'Ana Lopez', 'Spain', 35, 8.5);\n"
    "INSERT INTO concert VALUES (10, 10, 2016, 5000);\n```";

struct Replies {
    std::string control = "Across all concerts held in 2016, which singer from Spain drew the largest "
                          "attendance and how does that compare with earlier years?";
    std::string condense = "Which Spanish singer drew the largest 2016 attendance?";
    std::string conjecture = "Ana Lopez drew 5000 people in 2016.";
    std::vector<std::string> construct = {kGoodInserts};
    std::string conclude = "Ana Lopez, a Spanish singer, drew 5000 people in 2016, the largest crowd.";
    std::string classify = "Category: Conclusive";
};

struct Harness {
    Replies replies;
    std::vector<std::string> prompts;
    Gateway gw{GatewayOptions{false, std::nullopt, 1, std::chrono::milliseconds(0)}};
    TemplateSet templates = TemplateSet::builtin();

    Harness() {
        gw.register_provider("scripted", std::make_shared<CallbackProvider>([this](const ChatRequest& r) {
            const std::string& p = r.messages.front().content;
            prompts.push_back(p);
            auto has = [&](const char* s) { return p.find(s) != std::string::npos; };
            if (has("Seed question:")) return text_response(replies.control);
            if (has("Shorten the following")) return text_response(replies.condense);
            if (has("Conjecture a plausible")) return text_response(replies.conjecture);
            if (has("Write SQLite INSERT")) {
                std::size_t n = 0;
                for (const auto& q : prompts) n += q.find("Write SQLite INSERT") != std::string::npos;
                return text_response(replies.construct[std::min(n, replies.construct.size()) - 1]);
            }
            if (has("Write the definitive")) return text_response(replies.conclude);
            if (has("Classify the question")) return text_response(replies.classify);
            throw ConfigError("unexpected prompt");
        }));
    }
    ForgeContext ctx() { return ForgeContext{gw, templates, ForgeOptions{}}; }
};

}  // namespace

TEST(DraftStages, NamesRoundTrip) {
    for (DraftStage s : kAll) EXPECT_EQ(parse_draft_stage(to_string(s)), s);
    EXPECT_THROW(parse_draft_stage("bogus"), Error);
}

TEST(DraftStages, TransitionTable) {
    for (DraftStage from : kAll) {
        for (DraftStage to : kAll) {
            bool expected = false;
            if (!is_terminal(from)) {
                expected = to == DraftStage::rejected || next_stage(from) == to;
            }
            EXPECT_EQ(is_legal_transition(from, to), expected)
                << to_string(from) << " -> " << to_string(to);
        }
    }
    EXPECT_TRUE(is_terminal(DraftStage::confirmed));
    EXPECT_TRUE(is_terminal(DraftStage::rejected));
    EXPECT_FALSE(stage_rank(DraftStage::rejected));
}

TEST(DraftStages, RandomWalksNeverRegress) {
    std::mt19937 rng(11);
    for (int walk = 0; walk < 500; ++walk) {
        DraftItem d;
        d.draft_id = "w";
        int logged = 0;
        while (!is_terminal(d.stage)) {
            DraftStage to = kAll[rng() % kAll.size()];
            DraftStage before = d.stage;
            if (is_legal_transition(before, to)) {
                advance_stage(d, to, "walker", "step");
                ++logged;
                if (stage_rank(to)) EXPECT_EQ(*stage_rank(to), *stage_rank(before) + 1);
            } else {
                EXPECT_THROW(advance_stage(d, to, "walker", "step"), PipelineError);
                EXPECT_EQ(d.stage, before);
            }
        }
        EXPECT_EQ(static_cast<int>(d.review_log.size()), logged);
    }
}

TEST(Forge, ControlUsesKeywords) {
    Harness h;
    auto ctx = h.ctx();
    auto db = singers_db();
    auto d = control_generate("d1", db.db_id, "How many singers?", db.schema_text, {"attendance", "year"}, ctx);
    EXPECT_EQ(d.stage, DraftStage::controlled);
    EXPECT_EQ(d.question_text, h.replies.control);
    EXPECT_NE(h.prompts[0].find("attendance, year"), std::string::npos);
    EXPECT_NE(h.prompts[0].find("How many singers?"), std::string::npos);
    control_generate("d2", db.db_id, "x", db.schema_text, {}, ctx);
    EXPECT_NE(h.prompts[1].find("(none)"), std::string::npos);
    EXPECT_THROW(control_generate("d3", db.db_id, "x", "", {}, ctx), PipelineError);
}

TEST(Forge, CondenseMustShorten) {
    Harness h;
    auto ctx = h.ctx();
    auto db = singers_db();
    auto d = control_generate("d1", db.db_id, "s", db.schema_text, {}, ctx);
    auto c = condense(d, ctx);
    EXPECT_EQ(c.stage, DraftStage::condensed);
    EXPECT_LT(word_count(c.question_text), word_count(d.question_text));

    h.replies.condense = h.replies.control;
    EXPECT_THROW(condense(d, ctx), PipelineError);
    ctx.options.allow_equal_length_condense = true;
    EXPECT_EQ(condense(d, ctx).stage, DraftStage::condensed);
    h.replies.condense = h.replies.control + " extra";
    EXPECT_THROW(condense(d, ctx), PipelineError);
}

TEST(Forge, OperationsRequireStage) {
    Harness h;
    auto ctx = h.ctx();
    DraftItem d;
    d.draft_id = "d1";
    d.stage = DraftStage::condensed;
    EXPECT_THROW(condense(d, ctx), PipelineError);
    EXPECT_THROW(classify_question(d, ctx), PipelineError);
    EXPECT_THROW(construct_records(d, singers_db(), ctx), PipelineError);
}

TEST(Forge, ConstructRetriesWithFeedback) {
    Harness h;
    h.replies.construct = {"```sql\nINSERT INTO singer VALUES (1, 'Dup', 'X', 1, 1.0);\n```", kGoodInserts};
    auto ctx = h.ctx();
    DraftItem d;
    d.draft_id = "d1";
    d.stage = DraftStage::conjectured;
    d.conjecture = "x";
    auto out = construct_records(d, singers_db(), ctx);
    EXPECT_EQ(out.stage, DraftStage::constructed);
    ASSERT_TRUE(out.injected_inserts);
    EXPECT_EQ(out.injected_inserts->size(), 2u);
    ASSERT_EQ(h.prompts.size(), 2u);
    EXPECT_NE(h.prompts[1].find("INSERT INTO singer VALUES (1, 'Dup', 'X', 1, 1.0)"), std::string::npos);
    EXPECT_NE(h.prompts[1].find("UNIQUE constraint failed"), std::string::npos);
    EXPECT_EQ(h.prompts[0].find("failed to execute"), std::string::npos);
}

TEST(Forge, ConstructGivesUpAfterAttempts) {
    Harness h;
    h.replies.construct = {"no statements at all"};
    auto ctx = h.ctx();
    ctx.options.construct_attempts = 3;
    DraftItem d;
    d.draft_id = "d1";
    d.stage = DraftStage::conjectured;
    try {
        construct_records(d, singers_db(), ctx);
        FAIL();
    } catch (const PipelineError& e) {
        EXPECT_EQ(e.raw_completion(), "no statements at all");
    }
    EXPECT_EQ(h.prompts.size(), 3u);
}

TEST(Forge, ParseInserts) {
    EXPECT_EQ(parse_insert_statements(kGoodInserts).size(), 2u);
    auto bare = parse_insert_statements("INSERT INTO t VALUES (1); SELECT 1; insert into t values ('a;b');");
    ASSERT_EQ(bare.size(), 2u);
    EXPECT_EQ(bare[1], "insert into t values ('a;b')");
    EXPECT_TRUE(parse_insert_statements("nothing").empty());
}

TEST(Forge, CategoryLabel) {
    EXPECT_EQ(parse_category_label("Category: Interpretive"), Category::interpretive);
    EXPECT_EQ(parse_category_label("Could be interpretive.\nCategory: **Conclusive**"), Category::conclusive);
    EXPECT_EQ(parse_category_label("It is conclusive."), Category::conclusive);
    EXPECT_FALSE(parse_category_label("conclusive or interpretive"));
    EXPECT_FALSE(parse_category_label("no idea"));
}

TEST(Forge, ClassifyAmbiguousFails) {
    Harness h;
    h.replies.classify = "Category: unsure";
    auto ctx = h.ctx();
    DraftItem d;
    d.draft_id = "d1";
    d.stage = DraftStage::concluded;
    d.reference_text = "x";
    EXPECT_THROW(classify_question(d, ctx), PipelineError);
}

TEST(Forge, PipelineAndFinalize) {
    Harness h;
    auto ctx = h.ctx();
    TempDir tmp;
    DraftStore store(tmp.path());
    auto db = singers_db();
    auto d = run_pipeline("draft-0001", "Who sings?", {"attendance"}, db, ctx, &store);
    EXPECT_EQ(d.stage, DraftStage::classified);
    EXPECT_EQ(d.proposed_category, Category::conclusive);
    EXPECT_EQ(store.load("draft-0001"), d);
    EXPECT_EQ(d.review_log.size(), 6u);
    // the conclude prompt sees the injected records
    EXPECT_NE(h.prompts[4].find("INSERT INTO concert VALUES (10, 10, 2016, 5000);\n"), std::string::npos);

    EXPECT_THROW(finalize_instance(d, db), PipelineError);
    advance_stage(d, DraftStage::confirmed, "reviewer", "approve");
    auto inst = finalize_instance(d, db);
    EXPECT_EQ(inst.question.question_id, "draft-0001");
    EXPECT_EQ(inst.database.db_id, "concert_singer-draft-0001");
    EXPECT_EQ(inst.database.insert_statements.size(), db.insert_statements.size() + 2);
    EXPECT_EQ(inst.question.source_keywords, std::vector<std::string>{"attendance"});
    EXPECT_TRUE(validate_instance(inst.database, inst.question, inst.answer).empty());
    auto box = Sandbox::create(inst.database);
    auto r = box.execute("SELECT name FROM singer WHERE singer_id = 10");
    ASSERT_EQ(r.rows.size(), 1u);
    EXPECT_EQ(r.rows[0][0], "Ana Lopez");
}

TEST(Forge, PipelineDeterministic) {
    Harness a, b;
    auto ca = a.ctx();
    auto cb = b.ctx();
    auto da = run_pipeline("d", "s", {}, singers_db(), ca);
    auto db = run_pipeline("d", "s", {}, singers_db(), cb);
    EXPECT_EQ(a.prompts, b.prompts);
    da.review_log.clear();
    db.review_log.clear();
    EXPECT_EQ(da, db);
}

TEST(Forge, PipelineFailureSavedWithLog) {
    Harness h;
    h.replies.condense = h.replies.control + " and more words";
    auto ctx = h.ctx();
    TempDir tmp;
    DraftStore store(tmp.path());
    EXPECT_THROW(run_pipeline("d9", "s", {}, singers_db(), ctx, &store), PipelineError);
    auto saved = store.load("d9");
    EXPECT_EQ(saved.stage, DraftStage::controlled);
    EXPECT_EQ(saved.review_log.back().action, "pipeline_error");
}

TEST(DraftStoreTest, SaveLoadList) {
    TempDir tmp;
    DraftStore store(tmp.path());
    DraftItem a;
    a.draft_id = "b";
    a.db_id = "x";
    a.injected_inserts = std::vector<std::string>{"INSERT INTO t VALUES (1)"};
    DraftItem b = a;
    b.draft_id = "a";
    store.save(a);
    store.save(b);
    EXPECT_EQ(store.ids(), (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(store.load("b"), a);
    EXPECT_EQ(store.load_all().size(), 2u);
    EXPECT_THROW(store.load("missing"), NotFoundError);
    EXPECT_THROW(store.load("../etc"), NotFoundError);
    EXPECT_FALSE(is_valid_draft_id(".."));
    EXPECT_FALSE(is_valid_draft_id("a/b"));
    std::ofstream(store.path_for("bad")) << "{not json";
    EXPECT_THROW(store.load("bad"), ParseError);
}

TEST(DraftJson, RoundTrip) {
    DraftItem d;
    d.draft_id = "d";
    d.stage = DraftStage::concluded;
    d.conjecture = "c";
    d.proposed_category = Category::interpretive;
    d.review_log.push_back({"2026-01-01T00:00:00Z", "a", "b", "c"});
    EXPECT_EQ(json(d).get<DraftItem>(), d);
    DraftItem empty;
    empty.draft_id = "e";
    EXPECT_EQ(json(empty).get<DraftItem>(), empty);
}

TEST(Corpus, LoadsSeedsAndSchemas) {
    TempDir tmp;
    std::filesystem::create_directories(tmp / "concert_singer");
    std::ofstream(tmp / "concert_singer" / "schema.sql") << dbqa::testkit::kSingersScript;
    std::ofstream(tmp / "seeds.jsonl") << R"({"seed_question":"Who?","db_id":"concert_singer","keywords":["age"]})"
                                       << "\n\n"
                                       << R"({"seed_question":"When?","db_id":"concert_singer"})" << "\n";
    auto c = load_corpus(tmp.path());
    ASSERT_EQ(c.seeds.size(), 2u);
    EXPECT_EQ(c.seeds[0].keywords, std::vector<std::string>{"age"});
    EXPECT_EQ(c.databases.at("concert_singer").create_statements.size(), 2u);
    std::ofstream(tmp / "seeds.jsonl", std::ios::app) << R"({"seed_question":"x","db_id":"nope"})" << "\n";
    EXPECT_THROW(load_corpus(tmp.path()), IntegrityError);
}
