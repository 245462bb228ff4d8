#include <gtest/gtest.h>

#include "dbqa/error.hpp"
#include "dbqa/templates.hpp"
#include "test_support.hpp"

using namespace dbqa;

TEST(Render, SubstitutesEveryPlaceholder) {
    EXPECT_EQ(render_template("Q: {question}\nA: {answer} ({question})",
                              {{"question", "why"}, {"answer", "because"}}),
              "Q: why\nA: because (why)");
}

TEST(Render, SinglePassDoesNotExpandValues) {
    EXPECT_EQ(render_template("{a}", {{"a", "{b}"}, {"b", "no"}}), "{b}");
}

TEST(Render, MissingValueIsTemplateError) {
    EXPECT_THROW(render_template("{question} {plan}", {{"question", "q"}}), TemplateError);
}

TEST(Render, NonIdentifierBracesAreLiteral) {
    EXPECT_EQ(render_template("{ not } {1x} {} {ok}", {{"ok", "!"}}), "{ not } {1x} {} !");
    EXPECT_EQ(placeholders("{a} {b} {a} { c }"), (std::vector<std::string>{"a", "b"}));
}

TEST(Builtin, ShipsEveryPrompt) {
    auto set = TemplateSet::builtin();
    for (const char* name :
         {"rubrics/conclusive", "rubrics/interpretive", "rubrics/ip_review", "rubrics/ip_meta",
          "rubrics/te_review", "rubrics/te_meta", "rubrics/is_review", "rubrics/is_meta",
          "agent/none_answer", "agent/sequential_plan", "agent/sequential_sql",
          "agent/sequential_synthesis", "agent/iterative_plan", "agent/iterative_sql",
          "agent/iterative_synthesis", "forge/control", "forge/condense", "forge/conjecture",
          "forge/construct", "forge/conclude", "forge/classify"}) {
        EXPECT_TRUE(set.contains(name)) << name;
    }
    EXPECT_THROW(set.get("nope"), TemplateError);
}

TEST(Builtin, HashesCoverAllTemplates) {
    auto set = TemplateSet::builtin();
    auto hashes = set.hashes();
    EXPECT_EQ(hashes.at("rubrics/conclusive"), sha256_hex(set.get("rubrics/conclusive")));
    set.set("rubrics/conclusive", "changed {question}");
    EXPECT_NE(set.hashes().at("rubrics/conclusive"), hashes.at("rubrics/conclusive"));
}

TEST(Load, DirectoryOverridesBuiltin) {
    dbqa::testkit::TempDir dir;
    write_file_atomic(dir / "agent/sequential_plan.txt", "custom {question}");
    auto set = TemplateSet::load(dir.path());
    EXPECT_EQ(set.get("agent/sequential_plan"), "custom {question}");
    EXPECT_EQ(set.get("forge/classify"), TemplateSet::builtin().get("forge/classify"));
    EXPECT_THROW(TemplateSet::load(dir / "missing"), TemplateError);
}
