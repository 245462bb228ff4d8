#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace dbqa {

using TemplateValues = std::map<std::string, std::string>;

/// Names of `{identifier}` placeholders in order of first appearance.
std::vector<std::string> placeholders(std::string_view text);

/// Single-pass substitution; substituted values are never re-expanded.
/// Throws TemplateError when a placeholder has no value.
std::string render_template(std::string_view text, const TemplateValues& values);

/// Named prompt templates ("agent/sequential_plan", "rubrics/ip_review", ...).
class TemplateSet {
public:
    /// Templates compiled into the library from templates/.
    static TemplateSet builtin();
    /// Builtins overridden by `<dir>/<name>.txt` files.
    static TemplateSet load(const std::filesystem::path& dir);

    bool contains(const std::string& name) const { return texts_.count(name) != 0; }
    const std::string& get(const std::string& name) const;
    std::string render(const std::string& name, const TemplateValues& values) const;
    void set(const std::string& name, std::string text) { texts_[name] = std::move(text); }

    /// SHA-256 of each template text, for run manifests.
    std::map<std::string, std::string> hashes() const;

private:
    std::map<std::string, std::string> texts_;
};

namespace detail {
const std::map<std::string, std::string>& embedded_templates();
}

}  // namespace dbqa
