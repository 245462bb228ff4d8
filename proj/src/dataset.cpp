#include "dbqa/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "dbqa/error.hpp"
#include "dbqa/sandbox.hpp"
#include "dbqa/text.hpp"

namespace fs = std::filesystem;

namespace dbqa {

void to_json(json& j, const ManifestEntry& v) {
    j = json{{"question_id", v.question_id},
             {"db_id", v.db_id},
             {"category", to_string(v.category)},
             {"path", v.path}};
}

void from_json(const json& j, ManifestEntry& v) {
    j.at("question_id").get_to(v.question_id);
    j.at("db_id").get_to(v.db_id);
    v.category = parse_category(j.at("category").get<std::string>());
    j.at("path").get_to(v.path);
}

namespace {

constexpr const char* kManifest = "manifest.jsonl";

template <typename T>
T parse_json_file(const fs::path& file) {
    std::string text;
    try {
        text = read_file(file);
    } catch (const Error&) {
        throw IntegrityError("missing file: " + file.string());
    }
    try {
        return json::parse(text).get<T>();
    } catch (const std::exception& e) {
        throw ParseError(file.string() + ": " + e.what());
    }
}

std::vector<ManifestEntry> read_manifest(const fs::path& file) {
    std::vector<ManifestEntry> entries;
    const auto lines = split_lines(read_file(file));
    for (std::size_t i = 0; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        try {
            entries.push_back(json::parse(lines[i]).get<ManifestEntry>());
        } catch (const std::exception& e) {
            throw ParseError(file.string() + ":" + std::to_string(i + 1) + ": " + e.what());
        }
    }
    return entries;
}

void check_id(const std::string& id) {
    bool ok = !id.empty() && id != "." && id != "..";
    for (char c : id) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) {
            ok = false;
        }
    }
    if (!ok) throw ValidationError("identifier not usable as a directory name: '" + id + "'");
}

void write_instance_files(const fs::path& root, const Instance& item) {
    check_id(item.question.question_id);
    const fs::path dir = root / item.question.question_id;
    write_file_atomic(dir / "database.sql", render_database_script(item.database));
    write_file_atomic(dir / "question.json", json(item.question).dump(2) + "\n");
    write_file_atomic(dir / "answer.json", json(item.answer).dump(2) + "\n");
}

ManifestEntry entry_for(const Instance& item) {
    return ManifestEntry{item.question.question_id, item.question.db_id, item.question.category,
                         item.question.question_id};
}

std::string render_manifest(const std::vector<ManifestEntry>& entries) {
    std::string out;
    for (const auto& e : entries) out += json(e).dump() + "\n";
    return out;
}

}  // namespace

std::vector<Instance> load_dataset(const fs::path& root) {
    if (!fs::is_directory(root)) throw Error("dataset directory not found: " + root.string());
    const fs::path manifest = root / kManifest;
    if (!fs::exists(manifest)) {
        if (fs::is_empty(root)) return {};
        throw ParseError(root.string() + ": missing " + kManifest);
    }
    const auto entries = read_manifest(manifest);

    // Databases are shared by id; every directory's database.sql must agree.
    std::map<std::string, DatabaseSpec> databases;
    std::map<std::string, std::string> database_source;
    for (const auto& e : entries) {
        const fs::path sql = root / e.path / "database.sql";
        if (!fs::exists(sql)) continue;
        DatabaseSpec spec = parse_database_script(e.db_id, read_file(sql));
        auto [it, inserted] = databases.emplace(e.db_id, spec);
        if (!inserted && it->second != spec) {
            throw IntegrityError("database '" + e.db_id + "' differs between " +
                                 database_source[e.db_id] + " and " + sql.string());
        }
        database_source.emplace(e.db_id, sql.string());
    }

    std::vector<Instance> items;
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.question_id).second) {
            throw IntegrityError("duplicate question_id '" + e.question_id + "'");
        }
        const fs::path dir = root / e.path;
        auto q = parse_json_file<QuestionRecord>(dir / "question.json");
        auto a = parse_json_file<ReferenceAnswer>(dir / "answer.json");
        if (q.question_id != e.question_id || a.question_id != e.question_id) {
            throw IntegrityError(dir.string() + ": question_id disagrees with manifest entry '" +
                                 e.question_id + "'");
        }
        if (q.category != e.category) {
            throw IntegrityError(dir.string() + ": category disagrees with manifest");
        }
        auto db = databases.find(q.db_id);
        if (db == databases.end()) {
            throw IntegrityError("question '" + q.question_id + "' references absent database '" +
                                 q.db_id + "'");
        }
        if (static_cast<std::int64_t>(word_count(a.text)) != a.word_count) {
            throw IntegrityError(dir.string() + "/answer.json: stored word_count " +
                                 std::to_string(a.word_count) + " != recomputed " +
                                 std::to_string(word_count(a.text)));
        }
        items.push_back(Instance{db->second, std::move(q), std::move(a)});
    }
    return items;
}

void write_dataset(const fs::path& root, const std::vector<Instance>& items) {
    fs::create_directories(root);
    std::vector<ManifestEntry> entries;
    for (const auto& item : items) {
        write_instance_files(root, item);
        entries.push_back(entry_for(item));
    }
    write_file_atomic(root / kManifest, render_manifest(entries));
}

void append_instance(const fs::path& root, const Instance& item) {
    fs::create_directories(root);
    std::vector<ManifestEntry> entries;
    if (fs::exists(root / kManifest)) entries = read_manifest(root / kManifest);
    write_instance_files(root, item);
    auto it = std::find_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) {
        return e.question_id == item.question.question_id;
    });
    if (it != entries.end()) {
        *it = entry_for(item);
    } else {
        entries.push_back(entry_for(item));
    }
    write_file_atomic(root / kManifest, render_manifest(entries));
}

std::string dataset_hash(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::string material;
    for (const auto& f : files) {
        std::string content = read_file(f);
        material += fs::relative(f, root).generic_string() + '\0' + sha256_hex(content) + '\n';
    }
    return sha256_hex(material);
}

std::vector<ValidationIssue> validate_instance(const DatabaseSpec& spec, const QuestionRecord& q,
                                               const ReferenceAnswer& a) {
    std::vector<ValidationIssue> issues;
    auto add = [&](std::string code, std::string msg) {
        issues.push_back({std::move(code), std::move(msg)});
    };
    if (spec.create_statements.empty()) add("no_tables", "database creates no tables");
    if (trim(spec.schema_text).empty()) add("empty_schema", "schema_text is empty");
    if (!spec.create_statements.empty()) {
        try {
            Sandbox box = Sandbox::create(spec);
            if (box.table_names().empty()) add("no_tables", "database creates no tables");
        } catch (const SandboxError& e) {
            add("sandbox_execution", e.what());
        }
    }
    if (q.db_id != spec.db_id) {
        add("db_mismatch", "question db_id '" + q.db_id + "' != database '" + spec.db_id + "'");
    }
    if (a.question_id != q.question_id) {
        add("id_mismatch", "answer belongs to '" + a.question_id + "'");
    }
    if (trim(q.text).empty()) add("missing_question", "question text is empty");
    if (trim(a.text).empty()) add("missing_answer", "reference answer text is empty");
    if (static_cast<std::int64_t>(word_count(a.text)) != a.word_count) {
        add("word_count_mismatch", "stored word_count " + std::to_string(a.word_count) +
                                       " != recomputed " + std::to_string(word_count(a.text)));
    }
    if (q.pipeline_stage != PipelineStage::confirmed) {
        add("not_confirmed", "pipeline_stage is " + std::string(to_string(q.pipeline_stage)));
    }
    return issues;
}

}  // namespace dbqa
