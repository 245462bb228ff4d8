#include "dbqa/metrics.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <mutex>
#include <thread>
#include <tuple>

#include "dbqa/error.hpp"
#include "dbqa/forge.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Records

void to_json(json& j, const EvalRecord& v) {
    j = json{{"question_id", v.question_id},
             {"status", v.status == EvalStatus::evaluated ? "evaluated" : "skipped"},
             {"reason", v.reason ? json(*v.reason) : json(nullptr)},
             {"eval", v.eval ? json(*v.eval) : json(nullptr)}};
}

void from_json(const json& j, EvalRecord& v) {
    j.at("question_id").get_to(v.question_id);
    std::string status = j.at("status").get<std::string>();
    if (status == "evaluated") {
        v.status = EvalStatus::evaluated;
    } else if (status == "skipped") {
        v.status = EvalStatus::skipped;
    } else {
        throw ParseError("unknown eval status '" + status + "'");
    }
    v.reason = j.contains("reason") && !j.at("reason").is_null()
                   ? std::optional(j.at("reason").get<std::string>())
                   : std::nullopt;
    v.eval = j.contains("eval") && !j.at("eval").is_null()
                 ? std::optional(j.at("eval").get<InstanceEval>())
                 : std::nullopt;
    if ((v.status == EvalStatus::evaluated) != v.eval.has_value()) {
        throw ParseError("eval record status and payload disagree");
    }
}

void to_json(json& j, const RunManifest& v) {
    json inst = json::array();
    for (const auto& i : v.instances) {
        inst.push_back({{"question_id", i.question_id},
                        {"db_id", i.db_id},
                        {"category", to_string(i.category)}});
    }
    j = json{{"config", v.config},
             {"dataset_path", v.dataset_path},
             {"dataset_hash", v.dataset_hash},
             {"template_hashes", v.template_hashes},
             {"started_at", v.started_at},
             {"updated_at", v.updated_at},
             {"plan_length_aggregation", v.plan_length_aggregation},
             {"instances", inst}};
}

void from_json(const json& j, RunManifest& v) {
    j.at("config").get_to(v.config);
    j.at("dataset_path").get_to(v.dataset_path);
    j.at("dataset_hash").get_to(v.dataset_hash);
    v.template_hashes = j.value("template_hashes", std::map<std::string, std::string>{});
    v.started_at = j.value("started_at", "");
    v.updated_at = j.value("updated_at", "");
    v.plan_length_aggregation = j.value("plan_length_aggregation", "sum");
    v.instances.clear();
    for (const auto& i : j.at("instances")) {
        v.instances.push_back({i.at("question_id").get<std::string>(),
                               i.at("db_id").get<std::string>(),
                               parse_category(i.at("category").get<std::string>())});
    }
}

// ---------------------------------------------------------------------------
// Run directory

RunDirectory RunDirectory::open(const fs::path& root) {
    fs::path mpath = root / "manifest.json";
    if (!fs::exists(mpath)) throw UsageError(root.string() + " is not a run directory");
    RunDirectory r;
    r.root_ = root;
    try {
        r.manifest_ = json::parse(read_file(mpath)).get<RunManifest>();
    } catch (const json::exception& e) {
        throw ParseError(mpath.string() + ": " + e.what());
    }
    return r;
}

RunDirectory RunDirectory::create(const fs::path& root, RunManifest manifest) {
    RunDirectory r;
    r.root_ = root;
    for (const char* sub : {"transcripts", "evals", "prompts", "report"}) {
        fs::create_directories(root / sub);
    }
    r.write_manifest(manifest);
    return r;
}

void RunDirectory::write_manifest(const RunManifest& m) {
    write_file_atomic(root_ / "manifest.json", json(m).dump(2) + "\n");
    manifest_ = m;
}

fs::path RunDirectory::transcript_path(const std::string& qid) const {
    if (!is_valid_draft_id(qid)) throw UsageError("question id '" + qid + "' is not path-safe");
    return root_ / "transcripts" / (qid + ".json");
}

fs::path RunDirectory::eval_path(const std::string& qid) const {
    if (!is_valid_draft_id(qid)) throw UsageError("question id '" + qid + "' is not path-safe");
    return root_ / "evals" / (qid + ".json");
}

fs::path RunDirectory::prompts_dir(const std::string& qid) const {
    if (!is_valid_draft_id(qid)) throw UsageError("question id '" + qid + "' is not path-safe");
    return root_ / "prompts" / qid;
}

bool RunDirectory::is_complete(const std::string& qid) const {
    return fs::exists(transcript_path(qid)) && fs::exists(eval_path(qid));
}

void RunDirectory::write_transcript(const StrategyOutcome& o) const {
    write_file_atomic(transcript_path(o.transcript.question_id), json(o).dump(2) + "\n");
}

void RunDirectory::write_prompts(const StrategyOutcome& o) const {
    fs::path dir = prompts_dir(o.transcript.question_id);
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (std::size_t i = 0; i < o.subtask_records.size(); ++i) {
        const auto& r = o.subtask_records[i];
        char name[64];
        std::snprintf(name, sizeof name, "%02zu_%s_%d.txt", i + 1,
                      to_lower(short_name(r.kind)).c_str(), r.iteration_index);
        write_file_atomic(dir / name, r.input_bundle);
    }
}

void RunDirectory::write_eval(const EvalRecord& e) const {
    write_file_atomic(eval_path(e.question_id), json(e).dump(2) + "\n");
}

std::vector<InstanceArtifacts> RunDirectory::load_artifacts(std::vector<IntegrityIssue>& issues) const {
    std::vector<InstanceArtifacts> out;
    for (const auto& inst : manifest_.instances) {
        InstanceArtifacts a{inst, std::nullopt, std::nullopt};
        fs::path tp = transcript_path(inst.question_id);
        if (fs::exists(tp)) {
            try {
                auto o = json::parse(read_file(tp)).get<StrategyOutcome>();
                std::vector<std::string> problems = check_transcript(o.transcript);
                if (o.transcript.question_id != inst.question_id) problems.push_back("question id mismatch");
                if (o.transcript.strategy != manifest_.config.strategy) problems.push_back("strategy mismatch");
                if (!(compute_stats(o.transcript) == o.stats)) problems.push_back("stored stats disagree with transcript");
                if (problems.empty()) {
                    a.outcome = std::move(o);
                } else {
                    issues.push_back({tp.string(), join(problems, "; ")});
                }
            } catch (const std::exception& e) {
                issues.push_back({tp.string(), e.what()});
            }
        }
        fs::path ep = eval_path(inst.question_id);
        if (fs::exists(ep)) {
            try {
                auto e = json::parse(read_file(ep)).get<EvalRecord>();
                if (e.question_id != inst.question_id || (e.eval && e.eval->question_id != inst.question_id)) {
                    issues.push_back({ep.string(), "question id mismatch"});
                } else {
                    a.eval = std::move(e);
                }
            } catch (const std::exception& e) {
                issues.push_back({ep.string(), e.what()});
            }
        }
        out.push_back(std::move(a));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

std::string_view to_string(Tier t) { return t == Tier::reviewer ? "reviewer" : "meta"; }

namespace {

json opt_num(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> get_opt_num(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

std::optional<double> ratio(std::int64_t num, std::int64_t den) {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

Tier parse_tier(std::string_view s) {
    if (s == "reviewer") return Tier::reviewer;
    if (s == "meta") return Tier::meta;
    throw ParseError("unknown tier '" + std::string(s) + "'");
}

}  // namespace

void to_json(json& j, const CategoryRow& v) {
    j = json{{"model_id", v.model_id},
             {"strategy", to_string(v.strategy)},
             {"category", to_string(v.category)},
             {"n_instances", v.n_instances},
             {"n_included", v.n_included},
             {"n_context_overflow", v.n_context_overflow},
             {"n_other_aborts", v.n_other_aborts},
             {"n_missing", v.n_missing},
             {"n_ref_failures", v.n_ref_failures},
             {"match_rate", opt_num(v.match_rate)},
             {"mean_score", opt_num(v.mean_score)},
             {"mean_plan_words", opt_num(v.mean_plan_words)},
             {"mean_n_sql", opt_num(v.mean_n_sql)},
             {"mean_n_valid_sql", opt_num(v.mean_n_valid_sql)},
             {"mean_answer_words", opt_num(v.mean_answer_words)}};
}

void from_json(const json& j, CategoryRow& v) {
    j.at("model_id").get_to(v.model_id);
    v.strategy = parse_strategy(j.at("strategy").get<std::string>());
    v.category = parse_category(j.at("category").get<std::string>());
    j.at("n_instances").get_to(v.n_instances);
    j.at("n_included").get_to(v.n_included);
    j.at("n_context_overflow").get_to(v.n_context_overflow);
    j.at("n_other_aborts").get_to(v.n_other_aborts);
    j.at("n_missing").get_to(v.n_missing);
    j.at("n_ref_failures").get_to(v.n_ref_failures);
    v.match_rate = get_opt_num(j, "match_rate");
    v.mean_score = get_opt_num(j, "mean_score");
    v.mean_plan_words = get_opt_num(j, "mean_plan_words");
    v.mean_n_sql = get_opt_num(j, "mean_n_sql");
    v.mean_n_valid_sql = get_opt_num(j, "mean_n_valid_sql");
    v.mean_answer_words = get_opt_num(j, "mean_answer_words");
}

void to_json(json& j, const TierRow& v) {
    j = json{{"model_id", v.model_id},
             {"strategy", to_string(v.strategy)},
             {"subtask", short_name(v.subtask)},
             {"tier", to_string(v.tier)},
             {"n_evaluated", v.n_evaluated},
             {"n_incomplete", v.n_incomplete},
             {"vote_fraction", opt_num(v.vote_fraction)},
             {"majority_fraction", opt_num(v.majority_fraction)},
             {"agreement", opt_num(v.agreement)}};
}

void from_json(const json& j, TierRow& v) {
    j.at("model_id").get_to(v.model_id);
    v.strategy = parse_strategy(j.at("strategy").get<std::string>());
    v.subtask = parse_subtask_kind(j.at("subtask").get<std::string>());
    v.tier = parse_tier(j.at("tier").get<std::string>());
    j.at("n_evaluated").get_to(v.n_evaluated);
    j.at("n_incomplete").get_to(v.n_incomplete);
    v.vote_fraction = get_opt_num(j, "vote_fraction");
    v.majority_fraction = get_opt_num(j, "majority_fraction");
    v.agreement = get_opt_num(j, "agreement");
}

void to_json(json& j, const MetricsTable& v) {
    json integrity = json::array();
    for (const auto& i : v.integrity) integrity.push_back({{"path", i.path}, {"problem", i.problem}});
    j = json{{"categories", v.categories}, {"tiers", v.tiers}, {"integrity", integrity}};
}

void from_json(const json& j, MetricsTable& v) {
    j.at("categories").get_to(v.categories);
    j.at("tiers").get_to(v.tiers);
    v.integrity.clear();
    for (const auto& i : j.value("integrity", json::array())) {
        v.integrity.push_back({i.at("path").get<std::string>(), i.at("problem").get<std::string>()});
    }
}

MetricsTable compute_metrics(const RunDirectory& run) {
    MetricsTable table;
    const auto artifacts = run.load_artifacts(table.integrity);
    const RunConfig& cfg = run.manifest().config;

    for (Category cat : {Category::conclusive, Category::interpretive}) {
        CategoryRow row;
        row.model_id = cfg.model_id;
        row.strategy = cfg.strategy;
        row.category = cat;
        std::int64_t matches = 0, score_sum = 0, plan = 0, nsql = 0, nvalid = 0, words = 0;
        for (const auto& a : artifacts) {
            if (a.instance.category != cat) continue;
            ++row.n_instances;
            if (!a.outcome || !a.eval) {
                ++row.n_missing;
                continue;
            }
            const auto& reason = a.outcome->transcript.aborted_reason;
            if (reason) {
                ++(*reason == AbortReason::context_overflow ? row.n_context_overflow
                                                            : row.n_other_aborts);
                continue;
            }
            if (!a.eval->eval) {
                ++row.n_missing;
                continue;
            }
            const auto& ref = a.eval->eval->ref_verdict;
            bool usable = ref && (cat == Category::conclusive ? ref->match.has_value()
                                                              : ref->score.has_value());
            if (!usable) {
                ++row.n_ref_failures;
                continue;
            }
            ++row.n_included;
            if (cat == Category::conclusive) {
                matches += *ref->match ? 1 : 0;
            } else {
                score_sum += *ref->score;
            }
            const OutcomeStats& s = a.outcome->stats;
            plan += s.plan_word_count;
            nsql += s.n_sql_generated;
            nvalid += s.n_sql_valid;
            words += s.answer_word_count;
        }
        if (cat == Category::conclusive) {
            row.match_rate = ratio(matches, row.n_included);
        } else {
            row.mean_score = ratio(score_sum, row.n_included);
        }
        row.mean_plan_words = ratio(plan, row.n_included);
        row.mean_n_sql = ratio(nsql, row.n_included);
        row.mean_n_valid_sql = ratio(nvalid, row.n_included);
        row.mean_answer_words = ratio(words, row.n_included);
        table.categories.push_back(std::move(row));
    }

    for (SubTaskKind kind : reviewed_subtasks(cfg.strategy)) {
        for (Tier tier : {Tier::reviewer, Tier::meta}) {
            TierRow row;
            row.model_id = cfg.model_id;
            row.strategy = cfg.strategy;
            row.subtask = kind;
            row.tier = tier;
            std::int64_t votes = 0, perfect_votes = 0, perfect_majorities = 0;
            std::vector<std::vector<Decision>> sets;
            for (const auto& a : artifacts) {
                if (!a.outcome || a.outcome->transcript.aborted_reason || !a.eval || !a.eval->eval) {
                    continue;
                }
                const SubtaskEval* se = a.eval->eval->subtask(kind);
                if (!se || !se->complete) {
                    ++row.n_incomplete;
                    continue;
                }
                std::vector<Decision> decisions;
                if (tier == Tier::reviewer) {
                    for (const auto& r : se->reviews) decisions.push_back(r.decision);
                } else {
                    for (const auto& m : se->metas) decisions.push_back(m.decision);
                }
                ++row.n_evaluated;
                votes += static_cast<std::int64_t>(decisions.size());
                perfect_votes += std::count(decisions.begin(), decisions.end(), Decision::perfect);
                perfect_majorities += aggregate_majority(decisions) == Decision::perfect ? 1 : 0;
                sets.push_back(std::move(decisions));
            }
            row.vote_fraction = ratio(perfect_votes, votes);
            row.majority_fraction = ratio(perfect_majorities, row.n_evaluated);
            if (!sets.empty()) row.agreement = compute_agreement(sets);
            table.tiers.push_back(std::move(row));
        }
    }
    return table;
}

MetricsTable merge_tables(const std::vector<MetricsTable>& tables) {
    MetricsTable out;
    for (const auto& t : tables) {
        out.categories.insert(out.categories.end(), t.categories.begin(), t.categories.end());
        out.tiers.insert(out.tiers.end(), t.tiers.begin(), t.tiers.end());
        out.integrity.insert(out.integrity.end(), t.integrity.begin(), t.integrity.end());
    }
    std::stable_sort(out.categories.begin(), out.categories.end(), [](const auto& a, const auto& b) {
        return std::tie(a.model_id, a.strategy, a.category) < std::tie(b.model_id, b.strategy, b.category);
    });
    std::stable_sort(out.tiers.begin(), out.tiers.end(), [](const auto& a, const auto& b) {
        return std::tie(a.model_id, a.strategy, a.subtask, a.tier) <
               std::tie(b.model_id, b.strategy, b.subtask, b.tier);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Bins

void to_json(json& j, const Bin& v) {
    j = json{{"lower", v.lower},
             {"upper", v.upper},
             {"count", v.count},
             {"n_conclusive", v.n_conclusive},
             {"n_interpretive", v.n_interpretive},
             {"match_rate", opt_num(v.match_rate)},
             {"mean_score", opt_num(v.mean_score)}};
}

std::vector<Bin> correlation_bins(const std::vector<BinPoint>& points,
                                  const std::vector<std::int64_t>& edges) {
    if (edges.size() < 2) throw ValidationError("need at least two bin edges");
    for (std::size_t i = 1; i < edges.size(); ++i) {
        if (edges[i] <= edges[i - 1]) throw ValidationError("bin edges must be strictly increasing");
    }
    std::vector<Bin> bins(edges.size() - 1);
    std::vector<std::int64_t> matches(bins.size()), scores(bins.size());
    for (std::size_t i = 0; i < bins.size(); ++i) {
        bins[i].lower = edges[i];
        bins[i].upper = edges[i + 1];
    }
    for (const auto& p : points) {
        auto it = std::upper_bound(edges.begin(), edges.end(), p.n_valid_sql);
        std::size_t idx = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
        idx = std::min(idx, bins.size() - 1);
        Bin& b = bins[idx];
        ++b.count;
        if (p.match) {
            ++b.n_conclusive;
            matches[idx] += *p.match ? 1 : 0;
        }
        if (p.score) {
            ++b.n_interpretive;
            scores[idx] += *p.score;
        }
    }
    for (std::size_t i = 0; i < bins.size(); ++i) {
        bins[i].match_rate = ratio(matches[i], bins[i].n_conclusive);
        bins[i].mean_score = ratio(scores[i], bins[i].n_interpretive);
    }
    return bins;
}

std::vector<BinPoint> bin_points(const RunDirectory& run) {
    std::vector<IntegrityIssue> ignored;
    std::vector<BinPoint> out;
    for (const auto& a : run.load_artifacts(ignored)) {
        if (!a.outcome || a.outcome->transcript.aborted_reason || !a.eval || !a.eval->eval) continue;
        const auto& ref = a.eval->eval->ref_verdict;
        if (!ref) continue;
        BinPoint p;
        p.n_valid_sql = a.outcome->stats.n_sql_valid;
        if (a.instance.category == Category::conclusive) {
            if (!ref->match) continue;
            p.match = ref->match;
        } else {
            if (!ref->score) continue;
            p.score = ref->score;
        }
        out.push_back(p);
    }
    return out;
}

std::vector<Bin> correlation_bins(const RunDirectory& run, const std::vector<std::int64_t>& edges) {
    return correlation_bins(bin_points(run), edges);
}

// ---------------------------------------------------------------------------
// Rendering

TableFormat parse_table_format(std::string_view s) {
    if (s == "markdown" || s == "md") return TableFormat::markdown;
    if (s == "csv") return TableFormat::csv;
    if (s == "json") return TableFormat::json;
    throw UsageError("unknown table format '" + std::string(s) + "'");
}

namespace {

std::string fixed2(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", *v);
    return buf;
}

std::string pair_cell(const CategoryRow* c, const CategoryRow* i,
                      std::optional<double> CategoryRow::*field) {
    return fixed2(c ? c->*field : std::nullopt) + " / " + fixed2(i ? i->*field : std::nullopt);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string num(const std::optional<double>& v) { return v ? format_real(*v) : std::string{}; }

std::string row_markdown(const std::vector<std::string>& cells) {
    return "| " + join(cells, " | ") + " |\n";
}

std::string separator(std::size_t n) {
    std::string out = "|";
    for (std::size_t i = 0; i < n; ++i) out += "---|";
    return out + "\n";
}

std::string render_markdown(const MetricsTable& m) {
    std::string out = "## Answer quality and interaction\n\n";
    const std::vector<std::string> head = {"Model", "Strategy", "Match Score (C/I)", "Plan Length (C/I)",
                                           "# SQLs (C/I)", "# Valid SQLs (C/I)", "Answer Length (C/I)"};
    out += row_markdown(head) + separator(head.size());
    std::vector<std::pair<std::string, Strategy>> keys;
    for (const auto& r : m.categories) {
        std::pair<std::string, Strategy> k{r.model_id, r.strategy};
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    for (const auto& [model, strategy] : keys) {
        const CategoryRow* c = nullptr;
        const CategoryRow* i = nullptr;
        for (const auto& r : m.categories) {
            if (r.model_id != model || r.strategy != strategy) continue;
            (r.category == Category::conclusive ? c : i) = &r;
        }
        out += row_markdown({model, std::string(to_string(strategy)),
                             fixed2(c ? c->match_rate : std::nullopt) + " / " +
                                 fixed2(i ? i->mean_score : std::nullopt),
                             pair_cell(c, i, &CategoryRow::mean_plan_words),
                             pair_cell(c, i, &CategoryRow::mean_n_sql),
                             pair_cell(c, i, &CategoryRow::mean_n_valid_sql),
                             pair_cell(c, i, &CategoryRow::mean_answer_words)});
    }

    out += "\n## Instance accounting\n\n";
    const std::vector<std::string> acc = {"Model", "Strategy", "Category", "Instances", "Included",
                                          "Context overflow", "Other aborts", "Missing or corrupt",
                                          "Ref parse failures"};
    out += row_markdown(acc) + separator(acc.size());
    for (const auto& r : m.categories) {
        out += row_markdown({r.model_id, std::string(to_string(r.strategy)),
                             std::string(to_string(r.category)), std::to_string(r.n_instances),
                             std::to_string(r.n_included), std::to_string(r.n_context_overflow),
                             std::to_string(r.n_other_aborts), std::to_string(r.n_missing),
                             std::to_string(r.n_ref_failures)});
    }

    out += "\n## Peer review\n\n";
    const std::vector<std::string> tier = {"Model", "Strategy", "Sub-task", "Tier",
                                           "Perf. Rate (votes)", "Perf. Rate (majority)",
                                           "Agreement", "Evaluated", "Incomplete"};
    out += row_markdown(tier) + separator(tier.size());
    for (const auto& r : m.tiers) {
        out += row_markdown({r.model_id, std::string(to_string(r.strategy)),
                             std::string(short_name(r.subtask)), std::string(to_string(r.tier)),
                             fixed2(r.vote_fraction), fixed2(r.majority_fraction), fixed2(r.agreement),
                             std::to_string(r.n_evaluated), std::to_string(r.n_incomplete)});
    }
    if (!m.integrity.empty()) {
        out += "\n## Integrity issues\n\n";
        for (const auto& i : m.integrity) out += "- " + i.path + ": " + i.problem + "\n";
    }
    return out;
}

std::string render_csv(const MetricsTable& m) {
    std::string out = "table,model_id,strategy,key,metric,value\n";
    auto line = [&](const char* table, const std::string& model, Strategy s, const std::string& key,
                    const char* metric, const std::string& value) {
        out += std::string(table) + "," + csv_field(model) + "," + std::string(to_string(s)) + "," +
               csv_field(key) + "," + metric + "," + value + "\n";
    };
    for (const auto& r : m.categories) {
        const std::string key(to_string(r.category));
        auto count = [&](const char* metric, std::int64_t v) {
            line("category", r.model_id, r.strategy, key, metric, std::to_string(v));
        };
        auto real = [&](const char* metric, const std::optional<double>& v) {
            line("category", r.model_id, r.strategy, key, metric, num(v));
        };
        count("n_instances", r.n_instances);
        count("n_included", r.n_included);
        count("n_context_overflow", r.n_context_overflow);
        count("n_other_aborts", r.n_other_aborts);
        count("n_missing", r.n_missing);
        count("n_ref_failures", r.n_ref_failures);
        real("match_rate", r.match_rate);
        real("mean_score", r.mean_score);
        real("mean_plan_words", r.mean_plan_words);
        real("mean_n_sql", r.mean_n_sql);
        real("mean_n_valid_sql", r.mean_n_valid_sql);
        real("mean_answer_words", r.mean_answer_words);
    }
    for (const auto& r : m.tiers) {
        const std::string key = std::string(short_name(r.subtask)) + "/" + std::string(to_string(r.tier));
        line("tier", r.model_id, r.strategy, key, "n_evaluated", std::to_string(r.n_evaluated));
        line("tier", r.model_id, r.strategy, key, "n_incomplete", std::to_string(r.n_incomplete));
        line("tier", r.model_id, r.strategy, key, "vote_fraction", num(r.vote_fraction));
        line("tier", r.model_id, r.strategy, key, "majority_fraction", num(r.majority_fraction));
        line("tier", r.model_id, r.strategy, key, "agreement", num(r.agreement));
    }
    return out;
}

std::string bin_label(const std::vector<Bin>& bins, std::size_t i) {
    if (bins.size() == 1) return "all";
    if (i == 0) return "< " + std::to_string(bins[i].upper);
    if (i + 1 == bins.size()) return ">= " + std::to_string(bins[i].lower);
    return "[" + std::to_string(bins[i].lower) + ", " + std::to_string(bins[i].upper) + ")";
}

}  // namespace

std::string render_tables(const MetricsTable& m, TableFormat format) {
    switch (format) {
        case TableFormat::markdown:
            return render_markdown(m);
        case TableFormat::csv:
            return render_csv(m);
        case TableFormat::json:
            return json(m).dump(2) + "\n";
    }
    return {};
}

std::string render_bins(const std::vector<Bin>& bins, TableFormat format) {
    switch (format) {
        case TableFormat::json:
            return json(bins).dump(2) + "\n";
        case TableFormat::csv: {
            std::string out = "lower,upper,count,n_conclusive,match_rate,n_interpretive,mean_score\n";
            for (const auto& b : bins) {
                out += std::to_string(b.lower) + "," + std::to_string(b.upper) + "," +
                       std::to_string(b.count) + "," + std::to_string(b.n_conclusive) + "," +
                       num(b.match_rate) + "," + std::to_string(b.n_interpretive) + "," +
                       num(b.mean_score) + "\n";
            }
            return out;
        }
        case TableFormat::markdown: {
            const std::vector<std::string> head = {"Valid SQLs", "Instances", "Conclusive", "Match Rate",
                                                   "Interpretive", "Mean Score"};
            std::string out = row_markdown(head) + separator(head.size());
            for (std::size_t i = 0; i < bins.size(); ++i) {
                const Bin& b = bins[i];
                out += row_markdown({bin_label(bins, i), std::to_string(b.count),
                                     std::to_string(b.n_conclusive), fixed2(b.match_rate),
                                     std::to_string(b.n_interpretive), fixed2(b.mean_score)});
            }
            return out;
        }
    }
    return {};
}

void write_report(const RunDirectory& run, const std::vector<std::int64_t>& bin_edges) {
    MetricsTable m = compute_metrics(run);
    auto bins = correlation_bins(run, bin_edges);
    fs::path dir = run.report_dir();
    fs::create_directories(dir);
    write_file_atomic(dir / "metrics.md", render_tables(m, TableFormat::markdown));
    write_file_atomic(dir / "metrics.csv", render_tables(m, TableFormat::csv));
    write_file_atomic(dir / "metrics.json", render_tables(m, TableFormat::json));
    write_file_atomic(dir / "bins.md", render_bins(bins, TableFormat::markdown));
    write_file_atomic(dir / "bins.json", render_bins(bins, TableFormat::json));
}

// ---------------------------------------------------------------------------
// Experiment

namespace {

// Parallelism does not change results, so it is not part of the identity check.
bool same_run_config(RunConfig a, RunConfig b) {
    a.parallelism = b.parallelism = 1;
    return a == b;
}

template <typename Fn>
void run_pool(std::size_t n_items, int parallelism, Fn&& work) {
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n_items; i = next++) work(i);
    };
    std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(parallelism, 1)), n_items);
    if (n_threads <= 1) {
        worker();
        return;
    }
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
}

EvalRecord evaluate_outcome(const StrategyOutcome& o, const Instance& inst, const RunConfig& cfg,
                            Gateway& gw, const TemplateSet& templates) {
    EvalRecord rec;
    rec.question_id = inst.question.question_id;
    if (o.transcript.aborted_reason) {
        rec.status = EvalStatus::skipped;
        rec.reason = std::string(to_string(*o.transcript.aborted_reason));
        return rec;
    }
    rec.eval = run_full_eval(o, inst.question, inst.answer, inst.database, cfg, gw, templates);
    return rec;
}

}  // namespace

ExperimentSummary run_experiment(const fs::path& dataset_path, const RunConfig& cfg, const fs::path& out,
                                 Gateway& gw, const TemplateSet& templates,
                                 const ExperimentOptions& options) {
    cfg.validate();
    const std::vector<Instance> instances = load_dataset(dataset_path);
    RunManifest manifest;
    manifest.config = cfg;
    manifest.dataset_path = fs::absolute(dataset_path).lexically_normal().string();
    manifest.dataset_hash = dataset_hash(dataset_path);
    manifest.template_hashes = templates.hashes();
    manifest.started_at = utc_timestamp();
    manifest.updated_at = manifest.started_at;
    for (const auto& i : instances) {
        manifest.instances.push_back({i.question.question_id, i.database.db_id, i.question.category});
    }

    std::optional<RunDirectory> run;
    if (fs::exists(out / "manifest.json")) {
        run = RunDirectory::open(out);
        const RunManifest& old = run->manifest();
        if (!same_run_config(old.config, cfg)) {
            throw UsageError(out.string() + " was started with a different configuration");
        }
        if (old.dataset_hash != manifest.dataset_hash) {
            throw UsageError(out.string() + " was started on a different dataset");
        }
        if (old.template_hashes != manifest.template_hashes) {
            throw UsageError(out.string() + " was started with different prompt templates");
        }
        manifest.started_at = old.started_at;
        manifest.config = old.config;
        run = RunDirectory::create(out, manifest);
    } else {
        run = RunDirectory::create(out, manifest);
    }

    std::vector<const Instance*> todo;
    ExperimentSummary summary;
    for (const auto& i : instances) {
        if (run->is_complete(i.question.question_id)) {
            ++summary.skipped;
        } else {
            todo.push_back(&i);
        }
    }
    spdlog::info("run {}: {} instances, {} already complete", out.string(), instances.size(),
                 summary.skipped);

    std::mutex mu;
    run_pool(todo.size(), cfg.parallelism, [&](std::size_t idx) {
        const Instance& inst = *todo[idx];
        const std::string& qid = inst.question.question_id;
        try {
            StrategyOutcome o = run_strategy(inst.question, inst.database, cfg, gw, templates);
            run->write_prompts(o);
            run->write_transcript(o);
            if (options.evaluate) run->write_eval(evaluate_outcome(o, inst, cfg, gw, templates));
            std::lock_guard lk(mu);
            ++summary.executed;
        } catch (const std::exception& e) {
            spdlog::error("{}: {}", qid, e.what());
            std::lock_guard lk(mu);
            ++summary.failed;
            summary.failures.push_back(qid + ": " + e.what());
        }
        if (options.on_instance_done) options.on_instance_done(qid);
    });
    std::sort(summary.failures.begin(), summary.failures.end());
    return summary;
}

ExperimentSummary reevaluate_run(const fs::path& run_root, const fs::path& dataset_path,
                                 const RunConfig& cfg, Gateway& gw, bool force,
                                 const TemplateSet& templates) {
    RunDirectory run = RunDirectory::open(run_root);
    const std::vector<Instance> instances = load_dataset(dataset_path);
    if (dataset_hash(dataset_path) != run.manifest().dataset_hash) {
        throw UsageError("dataset does not match the run's dataset hash");
    }
    RunConfig eval_cfg = run.manifest().config;
    eval_cfg.evaluator_model_id = cfg.evaluator_model_id;
    eval_cfg.evaluator_temperature = cfg.evaluator_temperature;
    eval_cfg.reviewer_count = cfg.reviewer_count;
    eval_cfg.meta_reviewer_count = cfg.meta_reviewer_count;
    eval_cfg.parallelism = cfg.parallelism;
    eval_cfg.validate();

    std::vector<const Instance*> todo;
    ExperimentSummary summary;
    for (const auto& i : instances) {
        const std::string& qid = i.question.question_id;
        if (!fs::exists(run.transcript_path(qid)) || (!force && fs::exists(run.eval_path(qid)))) {
            ++summary.skipped;
        } else {
            todo.push_back(&i);
        }
    }
    std::mutex mu;
    run_pool(todo.size(), eval_cfg.parallelism, [&](std::size_t idx) {
        const Instance& inst = *todo[idx];
        const std::string& qid = inst.question.question_id;
        try {
            auto o = json::parse(read_file(run.transcript_path(qid))).get<StrategyOutcome>();
            run.write_eval(evaluate_outcome(o, inst, eval_cfg, gw, templates));
            std::lock_guard lk(mu);
            ++summary.executed;
        } catch (const std::exception& e) {
            spdlog::error("{}: {}", qid, e.what());
            std::lock_guard lk(mu);
            ++summary.failed;
            summary.failures.push_back(qid + ": " + e.what());
        }
    });
    RunManifest m = run.manifest();
    m.config = eval_cfg;
    m.updated_at = utc_timestamp();
    run.write_manifest(m);
    return summary;
}

}  // namespace dbqa
