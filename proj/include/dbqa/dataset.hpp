#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dbqa/core_model.hpp"

namespace dbqa {

/// One benchmark item: database, question and gold answer.
struct Instance {
    DatabaseSpec database;
    QuestionRecord question;
    ReferenceAnswer answer;

    bool operator==(const Instance&) const = default;
};

struct ManifestEntry {
    std::string question_id;
    std::string db_id;
    Category category = Category::conclusive;
    std::string path;  // relative to the dataset root
};

void to_json(json& j, const ManifestEntry& v);
void from_json(const json& j, ManifestEntry& v);

/// Reads `manifest.jsonl` plus one `<path>/{database.sql,question.json,answer.json}`
/// directory per instance. An empty directory yields an empty list.
/// Throws ParseError (naming file and line) or IntegrityError.
std::vector<Instance> load_dataset(const std::filesystem::path& root);

/// Writes the full layout; each instance goes to `<question_id>/`.
void write_dataset(const std::filesystem::path& root, const std::vector<Instance>& items);

/// Adds one instance to an existing (or new) dataset directory. Replaces an
/// existing entry with the same question_id.
void append_instance(const std::filesystem::path& root, const Instance& item);

/// Content hash over every file of the dataset, in path order.
std::string dataset_hash(const std::filesystem::path& root);

struct ValidationIssue {
    std::string code;
    std::string message;
};

/// Empty report means the instance is experiment-ready. Never throws for bad data.
std::vector<ValidationIssue> validate_instance(const DatabaseSpec& spec, const QuestionRecord& q,
                                               const ReferenceAnswer& a);

}  // namespace dbqa
