#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dbqa/agent.hpp"
#include "dbqa/core_model.hpp"
#include "dbqa/dataset.hpp"
#include "dbqa/eval.hpp"
#include "dbqa/gateway.hpp"
#include "dbqa/templates.hpp"

namespace dbqa {

enum class EvalStatus { evaluated, skipped };

struct EvalRecord {
    std::string question_id;
    EvalStatus status = EvalStatus::evaluated;
    std::optional<std::string> reason;  // set for skipped records
    std::optional<InstanceEval> eval;
    bool operator==(const EvalRecord&) const = default;
};

void to_json(json& j, const EvalRecord& v);
void from_json(const json& j, EvalRecord& v);

struct ManifestInstance {
    std::string question_id;
    std::string db_id;
    Category category = Category::conclusive;
};

struct RunManifest {
    RunConfig config;
    std::string dataset_path;
    std::string dataset_hash;
    std::map<std::string, std::string> template_hashes;
    std::string started_at;
    std::string updated_at;
    std::string plan_length_aggregation = "sum";
    std::vector<ManifestInstance> instances;
};

void to_json(json& j, const RunManifest& v);
void from_json(const json& j, RunManifest& v);

struct IntegrityIssue {
    std::string path;
    std::string problem;
    bool operator==(const IntegrityIssue&) const = default;
};

// Artifacts of one instance as found on disk.
struct InstanceArtifacts {
    ManifestInstance instance;
    std::optional<StrategyOutcome> outcome;
    std::optional<EvalRecord> eval;
};

class RunDirectory {
public:
    static RunDirectory open(const std::filesystem::path& root);
    // Creates the layout and writes the manifest.
    static RunDirectory create(const std::filesystem::path& root, RunManifest manifest);

    const std::filesystem::path& root() const { return root_; }
    const RunManifest& manifest() const { return manifest_; }
    void write_manifest(const RunManifest& m);

    std::filesystem::path transcript_path(const std::string& qid) const;
    std::filesystem::path eval_path(const std::string& qid) const;
    std::filesystem::path prompts_dir(const std::string& qid) const;
    std::filesystem::path report_dir() const { return root_ / "report"; }

    bool is_complete(const std::string& qid) const;
    void write_transcript(const StrategyOutcome& o) const;
    void write_prompts(const StrategyOutcome& o) const;
    void write_eval(const EvalRecord& e) const;

    // Loads every manifest instance; unreadable artifacts are reported and left empty.
    std::vector<InstanceArtifacts> load_artifacts(std::vector<IntegrityIssue>& issues) const;

private:
    std::filesystem::path root_;
    RunManifest manifest_;
};

struct CategoryRow {
    std::string model_id;
    Strategy strategy = Strategy::none;
    Category category = Category::conclusive;
    std::int64_t n_instances = 0;
    std::int64_t n_included = 0;
    std::int64_t n_context_overflow = 0;
    std::int64_t n_other_aborts = 0;
    std::int64_t n_missing = 0;  // absent or corrupt artifacts
    std::int64_t n_ref_failures = 0;
    std::optional<double> match_rate;  // conclusive rows
    std::optional<double> mean_score;  // interpretive rows
    std::optional<double> mean_plan_words;
    std::optional<double> mean_n_sql;
    std::optional<double> mean_n_valid_sql;
    std::optional<double> mean_answer_words;
    bool operator==(const CategoryRow&) const = default;
};

enum class Tier { reviewer, meta };
std::string_view to_string(Tier t);

struct TierRow {
    std::string model_id;
    Strategy strategy = Strategy::none;
    SubTaskKind subtask = SubTaskKind::interaction_planning;
    Tier tier = Tier::reviewer;
    std::int64_t n_evaluated = 0;
    std::int64_t n_incomplete = 0;
    std::optional<double> vote_fraction;
    std::optional<double> majority_fraction;
    std::optional<double> agreement;
    bool operator==(const TierRow&) const = default;
};

struct MetricsTable {
    std::vector<CategoryRow> categories;
    std::vector<TierRow> tiers;
    std::vector<IntegrityIssue> integrity;
    bool operator==(const MetricsTable&) const = default;
};

void to_json(json& j, const CategoryRow& v);
void from_json(const json& j, CategoryRow& v);
void to_json(json& j, const TierRow& v);
void from_json(const json& j, TierRow& v);
void to_json(json& j, const MetricsTable& v);
void from_json(const json& j, MetricsTable& v);

MetricsTable compute_metrics(const RunDirectory& run);
// Concatenates tables, sorted by model, strategy, then category or sub-task and tier.
MetricsTable merge_tables(const std::vector<MetricsTable>& tables);

struct BinPoint {
    std::int64_t n_valid_sql = 0;
    std::optional<bool> match;
    std::optional<int> score;
};

struct Bin {
    std::int64_t lower = 0;
    std::int64_t upper = 0;  // exclusive; the outer bins also take values beyond the edges
    std::int64_t count = 0;
    std::int64_t n_conclusive = 0;
    std::int64_t n_interpretive = 0;
    std::optional<double> match_rate;
    std::optional<double> mean_score;
    bool operator==(const Bin&) const = default;
};

void to_json(json& j, const Bin& v);

std::vector<Bin> correlation_bins(const std::vector<BinPoint>& points,
                                  const std::vector<std::int64_t>& edges);
// Included instances of the run.
std::vector<BinPoint> bin_points(const RunDirectory& run);
std::vector<Bin> correlation_bins(const RunDirectory& run, const std::vector<std::int64_t>& edges);

enum class TableFormat { markdown, csv, json };
TableFormat parse_table_format(std::string_view s);
std::string render_tables(const MetricsTable& m, TableFormat format);
std::string render_bins(const std::vector<Bin>& bins, TableFormat format);

struct ExperimentOptions {
    bool evaluate = true;
    // Called after each instance finishes; used for progress output.
    std::function<void(const std::string& qid)> on_instance_done;
};

struct ExperimentSummary {
    std::int64_t executed = 0;
    std::int64_t skipped = 0;  // already complete on disk
    std::int64_t failed = 0;
    std::vector<std::string> failures;
};

ExperimentSummary run_experiment(const std::filesystem::path& dataset_path, const RunConfig& cfg,
                                 const std::filesystem::path& out, Gateway& gw,
                                 const TemplateSet& templates = TemplateSet::builtin(),
                                 const ExperimentOptions& options = {});

// Evaluates stored transcripts again; force re-evaluates instances that already have an eval.
ExperimentSummary reevaluate_run(const std::filesystem::path& run_root,
                                 const std::filesystem::path& dataset_path, const RunConfig& cfg,
                                 Gateway& gw, bool force,
                                 const TemplateSet& templates = TemplateSet::builtin());

// Writes metrics and bins into <run>/report.
void write_report(const RunDirectory& run, const std::vector<std::int64_t>& bin_edges);

}  // namespace dbqa
