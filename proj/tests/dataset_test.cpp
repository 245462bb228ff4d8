#include <gtest/gtest.h>

#include <fstream>

#include "dbqa/dataset.hpp"
#include "dbqa/error.hpp"
#include "test_support.hpp"

using namespace dbqa;
using dbqa::testkit::make_instance;
using dbqa::testkit::singers_db;
using dbqa::testkit::TempDir;

namespace {

std::vector<Instance> two_instances() {
    auto db = singers_db();
    return {make_instance("q1", db, Category::conclusive, "Which singer is oldest?",
                          "Joe Sharp is the oldest singer at 52."),
            make_instance("q2", db, Category::interpretive, "Compare French and non-French singers.",
                          "French singers are younger on average.")};
}

std::set<std::string> codes(const std::vector<ValidationIssue>& issues) {
    std::set<std::string> out;
    for (const auto& i : issues) out.insert(i.code);
    return out;
}

void append_line(const std::filesystem::path& p, const std::string& line) {
    std::ofstream(p, std::ios::app) << line << "\n";
}

}  // namespace

TEST(Dataset, RoundTrip) {
    TempDir dir;
    auto items = two_instances();
    write_dataset(dir.path(), items);
    EXPECT_EQ(load_dataset(dir.path()), items);
}

TEST(Dataset, EmptyDirectoryIsEmptyDataset) {
    TempDir dir;
    EXPECT_TRUE(load_dataset(dir.path()).empty());
}

TEST(Dataset, MissingManifestInNonEmptyDirectory) {
    TempDir dir;
    write_file_atomic(dir / "stray.txt", "x");
    EXPECT_THROW(load_dataset(dir.path()), ParseError);
}

TEST(Dataset, MalformedManifestNamesLine) {
    TempDir dir;
    write_dataset(dir.path(), two_instances());
    append_line(dir / "manifest.jsonl", "{not json");
    try {
        load_dataset(dir.path());
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    }
}

TEST(Dataset, IntegrityViolations) {
    {
        TempDir dir;
        write_dataset(dir.path(), two_instances());
        append_line(dir / "manifest.jsonl",
                    R"({"question_id":"q1","db_id":"concert_singer","category":"conclusive","path":"q1"})");
        EXPECT_THROW(load_dataset(dir.path()), IntegrityError);
    }
    {
        TempDir dir;
        auto items = two_instances();
        items[0].answer.word_count += 1;
        write_dataset(dir.path(), items);
        EXPECT_THROW(load_dataset(dir.path()), IntegrityError);
    }
    {
        TempDir dir;
        auto items = two_instances();
        items[1].database.insert_statements.pop_back();
        write_dataset(dir.path(), items);
        EXPECT_THROW(load_dataset(dir.path()), IntegrityError);
    }
    {
        TempDir dir;
        write_dataset(dir.path(), two_instances());
        std::filesystem::remove(dir / "q2/answer.json");
        EXPECT_THROW(load_dataset(dir.path()), IntegrityError);
    }
}

TEST(Dataset, AppendReplacesById) {
    TempDir dir;
    auto items = two_instances();
    append_instance(dir.path(), items[0]);
    append_instance(dir.path(), items[1]);
    items[0].question.text = "Which singer is the oldest one?";
    append_instance(dir.path(), items[0]);
    auto loaded = load_dataset(dir.path());
    ASSERT_EQ(loaded.size(), 2u);
    EXPECT_EQ(loaded[0], items[0]);
    EXPECT_EQ(loaded[1], items[1]);
}

TEST(Dataset, HashTracksContent) {
    TempDir a, b;
    write_dataset(a.path(), two_instances());
    write_dataset(b.path(), two_instances());
    EXPECT_EQ(dataset_hash(a.path()), dataset_hash(b.path()));
    auto items = two_instances();
    items[1].answer.text += " Really.";
    items[1].answer.word_count += 1;
    write_dataset(b.path(), items);
    EXPECT_NE(dataset_hash(a.path()), dataset_hash(b.path()));
}

TEST(Validate, CleanInstanceHasNoIssues) {
    auto i = two_instances()[0];
    EXPECT_TRUE(validate_instance(i.database, i.question, i.answer).empty());
}

TEST(Validate, ReportsEachProblem) {
    auto base = two_instances()[0];
    auto check = [&](auto mutate, const std::string& code) {
        Instance i = base;
        mutate(i);
        EXPECT_TRUE(codes(validate_instance(i.database, i.question, i.answer)).count(code)) << code;
    };
    check([](Instance& i) { i.database.create_statements.clear(); }, "no_tables");
    check([](Instance& i) { i.database.schema_text.clear(); }, "empty_schema");
    check([](Instance& i) { i.database.insert_statements.push_back("INSERT INTO nope VALUES (1)"); },
          "sandbox_execution");
    check([](Instance& i) { i.question.db_id = "other"; }, "db_mismatch");
    check([](Instance& i) { i.answer.question_id = "q9"; }, "id_mismatch");
    check([](Instance& i) { i.question.text = "  "; }, "missing_question");
    check([](Instance& i) { i.answer.text.clear(); i.answer.word_count = 0; }, "missing_answer");
    check([](Instance& i) { i.answer.word_count = 1; }, "word_count_mismatch");
    check([](Instance& i) { i.question.pipeline_stage = PipelineStage::condensed; }, "not_confirmed");
}
