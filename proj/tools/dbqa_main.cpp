// dbqa: command-line front end for dataset construction, experiments and reports.

#include <CLI11.hpp>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>

#include "dbqa/curation.hpp"
#include "dbqa/dataset.hpp"
#include "dbqa/error.hpp"
#include "dbqa/forge.hpp"
#include "dbqa/metrics.hpp"
#include "dbqa/providers.hpp"
#include "dbqa/text.hpp"

namespace fs = std::filesystem;
using namespace dbqa;

namespace {

struct ConfigFile {
    json doc = json::object();
    fs::path base_dir = fs::current_path();

    void load(const std::string& path) {
        if (path.empty()) return;
        try {
            doc = json::parse(read_file(path));
        } catch (const json::exception& e) {
            throw ConfigError(path + ": " + e.what());
        }
        base_dir = fs::absolute(path).parent_path();
    }

    RunConfig run_config() const {
        return doc.contains("run") ? doc.at("run").get<RunConfig>() : RunConfig{};
    }

    std::unique_ptr<Gateway> gateway(const std::optional<std::string>& cache_override) const {
        GatewayOptions opts;
        std::string cache = cache_override.value_or(doc.value("cache_file", ""));
        if (!cache.empty()) {
            opts.cache_enabled = true;
            fs::path p(cache);
            opts.cache_file = p.is_absolute() || cache_override ? p : base_dir / p;
        }
        auto gw = std::make_unique<Gateway>(opts);
        if (doc.contains("providers")) configure_gateway(*gw, doc, base_dir);
        return gw;
    }

    TemplateSet templates() const {
        std::string dir = doc.value("templates_dir", "");
        if (dir.empty()) return TemplateSet::builtin();
        fs::path p(dir);
        return TemplateSet::load(p.is_absolute() ? p : base_dir / p);
    }
};

// Flag overrides for RunConfig; unset flags leave the config file value.
struct RunFlags {
    std::optional<std::string> model_id, provider_id, strategy, evaluator_model_id;
    std::optional<double> agent_temperature, evaluator_temperature;
    std::optional<int> max_iterations, row_limit, statement_timeout_ms, reviewer_count,
        meta_reviewer_count, max_output_tokens, parallelism;
    std::optional<std::int64_t> context_token_budget, random_seed;

    void add(CLI::App* app) {
        app->add_option("--model-id", model_id, "Agent model id");
        app->add_option("--provider-id", provider_id, "Provider id recorded in the manifest");
        app->add_option("--strategy", strategy, "none, sequential or iterative");
        app->add_option("--evaluator-model-id", evaluator_model_id, "Judge model id");
        app->add_option("--agent-temperature", agent_temperature);
        app->add_option("--evaluator-temperature", evaluator_temperature);
        app->add_option("--max-iterations", max_iterations);
        app->add_option("--row-limit", row_limit);
        app->add_option("--statement-timeout-ms", statement_timeout_ms);
        app->add_option("--context-token-budget", context_token_budget);
        app->add_option("--reviewer-count", reviewer_count);
        app->add_option("--meta-reviewer-count", meta_reviewer_count);
        app->add_option("--random-seed", random_seed);
        app->add_option("--max-output-tokens", max_output_tokens);
        app->add_option("--parallelism", parallelism);
    }

    void apply(RunConfig& c) const {
        if (model_id) c.model_id = *model_id;
        if (provider_id) c.provider_id = *provider_id;
        if (strategy) c.strategy = parse_strategy(*strategy);
        if (evaluator_model_id) c.evaluator_model_id = *evaluator_model_id;
        if (agent_temperature) c.agent_temperature = *agent_temperature;
        if (evaluator_temperature) c.evaluator_temperature = *evaluator_temperature;
        if (max_iterations) c.max_iterations = *max_iterations;
        if (row_limit) c.row_limit = *row_limit;
        if (statement_timeout_ms) c.statement_timeout_ms = *statement_timeout_ms;
        if (context_token_budget) c.context_token_budget = *context_token_budget;
        if (reviewer_count) c.reviewer_count = *reviewer_count;
        if (meta_reviewer_count) c.meta_reviewer_count = *meta_reviewer_count;
        if (random_seed) c.random_seed = *random_seed;
        if (max_output_tokens) c.max_output_tokens = *max_output_tokens;
        if (parallelism) c.parallelism = *parallelism;
        c.validate();
    }
};

std::vector<std::int64_t> parse_edges(const std::string& s) {
    std::vector<std::int64_t> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        std::size_t comma = s.find(',', start);
        std::string part = trim(s.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (part.empty()) throw UsageError("bin edges must be comma-separated integers");
        try {
            out.push_back(std::stoll(part));
        } catch (const std::exception&) {
            throw UsageError("bad bin edge '" + part + "'");
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

void print_summary(const ExperimentSummary& s) {
    std::cout << "executed " << s.executed << ", skipped " << s.skipped << ", failed " << s.failed << "\n";
    for (const auto& f : s.failures) std::cout << "  failed: " << f << "\n";
}

httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Long-form database question answering: dataset construction, agents and evaluation"};
    app.require_subcommand(1);
    std::string config_path;
    std::string log_level = "info";
    std::optional<std::string> cache_file;
    app.add_option("-c,--config", config_path, "JSON config file (run, providers, cache_file, templates_dir)");
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error");
    app.add_option("--cache-file", cache_file, "Response cache file; enables caching");

    // forge
    auto* forge = app.add_subcommand("forge", "Run the question and answer pipelines over a seed corpus");
    std::string corpus_dir, drafts_dir, forge_model = "scripted";
    int forge_limit = -1;
    std::int64_t forge_seed = 0;
    forge->add_option("--corpus", corpus_dir, "Directory with <db_id>/schema.sql and seeds.jsonl")->required();
    forge->add_option("--drafts", drafts_dir, "Draft store directory")->required();
    forge->add_option("--model-id", forge_model, "Generator model id");
    forge->add_option("--limit", forge_limit, "Process at most this many seeds");
    forge->add_option("--random-seed", forge_seed);

    // serve
    auto* serve = app.add_subcommand("serve", "Serve the curation API over a draft store");
    std::string serve_drafts, serve_corpus, dataset_out, host = "127.0.0.1", token_env = "DBQA_CURATION_TOKEN";
    int port = 8080;
    serve->add_option("--drafts", serve_drafts)->required();
    serve->add_option("--corpus", serve_corpus, "Source corpus the drafts were built from")->required();
    serve->add_option("--dataset-out", dataset_out, "Dataset that approved instances are appended to");
    serve->add_option("--host", host);
    serve->add_option("--port", port);
    serve->add_option("--token-env", token_env, "Environment variable holding the bearer token");

    // run
    auto* run = app.add_subcommand("run", "Run one strategy over a dataset and evaluate it");
    std::string run_dataset, run_out;
    bool no_eval = false;
    RunFlags run_flags;
    run->add_option("--dataset", run_dataset)->required();
    run->add_option("--out", run_out, "Run directory; an existing one is resumed")->required();
    run->add_flag("--no-eval", no_eval, "Only produce transcripts");
    run_flags.add(run);

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate the transcripts of an existing run");
    std::string eval_run, eval_dataset;
    bool force = false;
    RunFlags eval_flags;
    eval->add_option("--run", eval_run)->required();
    eval->add_option("--dataset", eval_dataset)->required();
    eval->add_flag("--force", force, "Re-evaluate instances that already have an eval");
    eval_flags.add(eval);

    // report
    auto* report = app.add_subcommand("report", "Compute metrics tables from run directories");
    std::vector<std::string> report_runs;
    std::string format = "markdown", edges = "0,1,2,3,4,5";
    bool write = false;
    report->add_option("runs", report_runs, "Run directories")->required();
    report->add_option("--format", format, "markdown, csv or json");
    report->add_option("--bins", edges, "Bin edges over valid SQL counts");
    report->add_flag("--write", write, "Also write <run>/report/ for each run");

    // validate
    auto* validate = app.add_subcommand("validate", "Check every instance of a dataset");
    std::string validate_dataset;
    validate->add_option("dataset", validate_dataset)->required();

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));

    try {
        ConfigFile cfg_file;
        cfg_file.load(config_path);

        if (*forge) {
            Corpus corpus = load_corpus(corpus_dir);
            DraftStore store(drafts_dir);
            auto gw = cfg_file.gateway(cache_file);
            TemplateSet templates = cfg_file.templates();
            ForgeContext ctx{*gw, templates, {}};
            ctx.options.model_id = forge_model;
            ctx.options.seed = forge_seed;
            int done = 0, failed = 0;
            for (std::size_t i = 0; i < corpus.seeds.size(); ++i) {
                if (forge_limit >= 0 && static_cast<int>(i) >= forge_limit) break;
                char id[32];
                std::snprintf(id, sizeof id, "draft-%04zu", i + 1);
                if (store.exists(id)) continue;
                const SeedEntry& seed = corpus.seeds[i];
                try {
                    DraftItem d = run_pipeline(id, seed.seed_question, seed.keywords,
                                               corpus.databases.at(seed.db_id), ctx, &store);
                    std::cout << id << ": " << to_string(d.stage) << "\n";
                    ++done;
                } catch (const PipelineError& e) {
                    std::cout << id << ": failed: " << e.what() << "\n";
                    ++failed;
                }
            }
            std::cout << done << " drafts classified, " << failed << " failed\n";
            return failed == 0 ? 0 : 1;
        }

        if (*serve) {
            const char* token = std::getenv(token_env.c_str());
            if (!token || !*token) throw ConfigError("set " + token_env + " to the bearer token");
            Corpus corpus = load_corpus(serve_corpus);
            CurationService service(DraftStore(serve_drafts), corpus.databases, dataset_out);
            httplib::Server server;
            mount_curation_routes(server, service, token);
            g_server = &server;
            std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
            std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
            spdlog::info("curation API listening on {}:{}", host, port);
            if (!server.listen(host, port)) throw ConfigError("cannot listen on " + host + ":" + std::to_string(port));
            return 0;
        }

        if (*run) {
            RunConfig cfg = cfg_file.run_config();
            run_flags.apply(cfg);
            auto gw = cfg_file.gateway(cache_file);
            ExperimentOptions opts;
            opts.evaluate = !no_eval;
            auto summary = run_experiment(run_dataset, cfg, run_out, *gw, cfg_file.templates(), opts);
            print_summary(summary);
            return summary.failed == 0 ? 0 : 1;
        }

        if (*eval) {
            RunConfig cfg = RunDirectory::open(eval_run).manifest().config;
            if (cfg_file.doc.contains("run")) cfg = cfg_file.run_config();
            eval_flags.apply(cfg);
            auto gw = cfg_file.gateway(cache_file);
            auto summary = reevaluate_run(eval_run, eval_dataset, cfg, *gw, force, cfg_file.templates());
            print_summary(summary);
            return summary.failed == 0 ? 0 : 1;
        }

        if (*report) {
            TableFormat fmt = parse_table_format(format);
            std::vector<std::int64_t> bin_edges = parse_edges(edges);
            std::vector<MetricsTable> tables;
            std::vector<BinPoint> points;
            for (const auto& r : report_runs) {
                RunDirectory dir = RunDirectory::open(r);
                tables.push_back(compute_metrics(dir));
                auto p = bin_points(dir);
                points.insert(points.end(), p.begin(), p.end());
                if (write) write_report(dir, bin_edges);
            }
            std::cout << render_tables(merge_tables(tables), fmt);
            if (fmt == TableFormat::markdown) {
                std::cout << "\n## Valid SQLs and answer quality\n\n"
                          << render_bins(correlation_bins(points, bin_edges), fmt);
            }
            return 0;
        }

        if (*validate) {
            auto items = load_dataset(validate_dataset);
            int bad = 0;
            for (const auto& it : items) {
                auto issues = validate_instance(it.database, it.question, it.answer);
                for (const auto& i : issues) {
                    std::cout << it.question.question_id << ": " << i.code << ": " << i.message << "\n";
                }
                bad += issues.empty() ? 0 : 1;
            }
            std::cout << items.size() << " instances, " << bad << " with issues\n";
            return bad == 0 ? 0 : 1;
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
