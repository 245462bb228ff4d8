#include "dbqa/templates.hpp"

#include <algorithm>
#include <cctype>

#include "dbqa/error.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

namespace {

bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool is_ident(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

// Length of a `{identifier}` token starting at text[pos], or 0.
std::size_t placeholder_length(std::string_view text, std::size_t pos) {
    if (text[pos] != '{' || pos + 1 >= text.size() || !is_ident_start(text[pos + 1])) return 0;
    std::size_t end = pos + 1;
    while (end < text.size() && is_ident(text[end])) ++end;
    return end < text.size() && text[end] == '}' ? end - pos + 1 : 0;
}

}  // namespace

std::vector<std::string> placeholders(std::string_view text) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (std::size_t len = placeholder_length(text, i)) {
            std::string name(text.substr(i + 1, len - 2));
            if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
            i += len - 1;
        }
    }
    return names;
}

std::string render_template(std::string_view text, const TemplateValues& values) {
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (std::size_t len = placeholder_length(text, i)) {
            std::string name(text.substr(i + 1, len - 2));
            auto it = values.find(name);
            if (it == values.end()) throw TemplateError("no value for placeholder {" + name + "}");
            out += it->second;
            i += len - 1;
        } else {
            out += text[i];
        }
    }
    return out;
}

TemplateSet TemplateSet::builtin() {
    TemplateSet set;
    set.texts_ = detail::embedded_templates();
    return set;
}

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
    TemplateSet set = builtin();
    if (!std::filesystem::is_directory(dir)) {
        throw TemplateError("template directory not found: " + dir.string());
    }
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
        auto rel = std::filesystem::relative(entry.path(), dir);
        rel.replace_extension();
        set.texts_[rel.generic_string()] = read_file(entry.path());
    }
    return set;
}

const std::string& TemplateSet::get(const std::string& name) const {
    auto it = texts_.find(name);
    if (it == texts_.end()) throw TemplateError("no template named '" + name + "'");
    return it->second;
}

std::string TemplateSet::render(const std::string& name, const TemplateValues& values) const {
    try {
        return render_template(get(name), values);
    } catch (const TemplateError& e) {
        throw TemplateError(name + ": " + e.what());
    }
}

std::map<std::string, std::string> TemplateSet::hashes() const {
    std::map<std::string, std::string> out;
    for (const auto& [name, text] : texts_) out[name] = sha256_hex(text);
    return out;
}

}  // namespace dbqa
