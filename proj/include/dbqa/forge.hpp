#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dbqa/core_model.hpp"
#include "dbqa/dataset.hpp"
#include "dbqa/gateway.hpp"
#include "dbqa/templates.hpp"

namespace dbqa {

// Pipeline order; rejected can be entered from any non-terminal stage.
enum class DraftStage {
    controlled,
    condensed,
    conjectured,
    constructed,
    concluded,
    classified,
    confirmed,
    rejected,
};

std::string_view to_string(DraftStage s);
DraftStage parse_draft_stage(std::string_view s);
std::optional<DraftStage> next_stage(DraftStage s);
bool is_terminal(DraftStage s);
bool is_legal_transition(DraftStage from, DraftStage to);
// Position in the pipeline; rejected has none.
std::optional<int> stage_rank(DraftStage s);

struct ReviewLogEntry {
    std::string timestamp;
    std::string actor;
    std::string action;
    std::string note;
    bool operator==(const ReviewLogEntry&) const = default;
};

struct DraftItem {
    std::string draft_id;
    std::string db_id;
    std::string seed_question;
    DraftStage stage = DraftStage::controlled;
    std::string question_text;
    std::vector<std::string> keywords;
    std::optional<std::string> conjecture;
    std::optional<std::vector<std::string>> injected_inserts;
    std::optional<std::string> reference_text;
    std::optional<Category> proposed_category;
    std::vector<ReviewLogEntry> review_log;
    bool operator==(const DraftItem&) const = default;
};

void to_json(json& j, const ReviewLogEntry& v);
void from_json(const json& j, ReviewLogEntry& v);
void to_json(json& j, const DraftItem& v);
void from_json(const json& j, DraftItem& v);

std::string utc_timestamp();

// Moves d to `to` and logs it; throws PipelineError on an illegal move.
void advance_stage(DraftItem& d, DraftStage to, std::string_view actor, std::string_view action,
                   std::string note = {});

struct ForgeOptions {
    std::string model_id = "scripted";
    double temperature = 0.0;
    int max_output_tokens = 1024;
    std::int64_t seed = 0;
    // Total construct attempts, the first included.
    int construct_attempts = 2;
    // Accept a condensed question with the same word count as its input.
    bool allow_equal_length_condense = false;
    std::string actor = "forge";
};

struct ForgeContext {
    Gateway& gw;
    const TemplateSet& templates;
    ForgeOptions options;
};

DraftItem control_generate(std::string draft_id, std::string db_id, const std::string& seed_question,
                           const std::string& schema_text, std::vector<std::string> keywords,
                           ForgeContext& ctx);
DraftItem condense(DraftItem d, ForgeContext& ctx);
DraftItem conjecture_answer(DraftItem d, const std::string& schema_text, ForgeContext& ctx);
DraftItem construct_records(DraftItem d, const DatabaseSpec& spec, ForgeContext& ctx);
DraftItem conclude_answer(DraftItem d, const DatabaseSpec& merged_spec, ForgeContext& ctx);
DraftItem classify_question(DraftItem d, ForgeContext& ctx);

// INSERT statements in a completion; fenced blocks are preferred when present.
std::vector<std::string> parse_insert_statements(std::string_view completion);
std::optional<Category> parse_category_label(std::string_view completion);

// Source creates and inserts followed by the draft's injected inserts.
DatabaseSpec merge_spec(const DraftItem& d, const DatabaseSpec& spec);
std::string finalized_db_id(const DraftItem& d);
Instance finalize_instance(const DraftItem& d, const DatabaseSpec& spec);

// Runs control through classify, saving after every stage when a store is given.
class DraftStore;
DraftItem run_pipeline(const std::string& draft_id, const std::string& seed_question,
                       const std::vector<std::string>& keywords, const DatabaseSpec& spec,
                       ForgeContext& ctx, DraftStore* store = nullptr);

class DraftStore {
public:
    explicit DraftStore(std::filesystem::path root);
    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path path_for(const std::string& draft_id) const;
    bool exists(const std::string& draft_id) const;
    void save(const DraftItem& d) const;
    DraftItem load(const std::string& draft_id) const;
    // Sorted by draft_id.
    std::vector<std::string> ids() const;
    std::vector<DraftItem> load_all() const;

private:
    std::filesystem::path root_;
};

bool is_valid_draft_id(std::string_view id);

struct SeedEntry {
    std::string seed_question;
    std::string db_id;
    std::vector<std::string> keywords;
};

struct Corpus {
    std::map<std::string, DatabaseSpec> databases;
    std::vector<SeedEntry> seeds;
};

// Directory of <db_id>/schema.sql plus seeds.jsonl.
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace dbqa
