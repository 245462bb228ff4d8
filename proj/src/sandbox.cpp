#include "dbqa/sandbox.hpp"

#include <sqlite3.h>

#include <cctype>
#include <cmath>
#include <utility>

#include "dbqa/error.hpp"
#include "dbqa/text.hpp"

namespace dbqa {

namespace {

// Skips whitespace, `-- ...` and `/* ... */` comments.
std::string_view strip_leading_comments(std::string_view s) {
    for (;;) {
        std::size_t i = 0;
        while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
        s.remove_prefix(i);
        if (s.starts_with("--")) {
            std::size_t nl = s.find('\n');
            s = nl == std::string_view::npos ? std::string_view{} : s.substr(nl + 1);
        } else if (s.starts_with("/*")) {
            std::size_t end = s.find("*/", 2);
            s = end == std::string_view::npos ? std::string_view{} : s.substr(end + 2);
        } else {
            return s;
        }
    }
}

std::string first_keyword(std::string_view stmt) {
    stmt = strip_leading_comments(stmt);
    std::size_t n = 0;
    while (n < stmt.size() && std::isalpha(static_cast<unsigned char>(stmt[n]))) ++n;
    return to_lower(stmt.substr(0, n));
}

std::string ensure_terminated(const std::string& stmt) {
    std::string t = trim(stmt);
    if (!t.empty() && t.back() != ';') t += ';';
    return t;
}

std::string render_cell(sqlite3_stmt* stmt, int col) {
    switch (sqlite3_column_type(stmt, col)) {
        case SQLITE_INTEGER:
            return std::to_string(sqlite3_column_int64(stmt, col));
        case SQLITE_FLOAT:
            return format_real(sqlite3_column_double(stmt, col));
        case SQLITE_NULL:
            return "NULL";
        case SQLITE_BLOB: {
            static constexpr char kHex[] = "0123456789ABCDEF";
            const auto* p = static_cast<const unsigned char*>(sqlite3_column_blob(stmt, col));
            int n = sqlite3_column_bytes(stmt, col);
            std::string out = "X'";
            for (int i = 0; i < n; ++i) {
                out += kHex[p[i] >> 4];
                out += kHex[p[i] & 0xf];
            }
            return out + "'";
        }
        default: {
            const auto* p = sqlite3_column_text(stmt, col);
            int n = sqlite3_column_bytes(stmt, col);
            return p ? std::string(reinterpret_cast<const char*>(p), static_cast<std::size_t>(n))
                     : std::string{};
        }
    }
}

// SQL literal used by the record dump; reals keep a decimal point so the type survives.
std::string render_literal(sqlite3_stmt* stmt, int col) {
    switch (sqlite3_column_type(stmt, col)) {
        case SQLITE_FLOAT: {
            double v = sqlite3_column_double(stmt, col);
            std::string s = format_real(v);
            if (std::isfinite(v) && s.find_first_of(".eE") == std::string::npos) s += ".0";
            return s;
        }
        case SQLITE_TEXT: {
            std::string raw = render_cell(stmt, col);
            std::string out = "'";
            for (char c : raw) {
                if (c == '\'') out += '\'';
                out += c;
            }
            return out + "'";
        }
        default:
            return render_cell(stmt, col);
    }
}

std::string quote_identifier(const std::string& name) {
    bool plain = !name.empty() && !std::isdigit(static_cast<unsigned char>(name[0]));
    for (char c : name) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') plain = false;
    }
    if (plain) return name;
    std::string out = "\"";
    for (char c : name) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

struct StmtGuard {
    sqlite3_stmt* stmt = nullptr;
    ~StmtGuard() { sqlite3_finalize(stmt); }
};

}  // namespace

int sandbox_progress(void* self) {
    auto* box = static_cast<Sandbox*>(self);
    if (std::chrono::steady_clock::now() > box->deadline_) {
        box->timed_out_ = true;
        return 1;
    }
    return 0;
}

std::vector<std::string> split_sql_statements(std::string_view script) {
    std::vector<std::string> out;
    std::size_t start = 0;
    auto emit = [&](std::string_view piece) {
        std::string t = trim(piece);
        while (!t.empty() && t.back() == ';') t = trim(std::string_view(t).substr(0, t.size() - 1));
        if (!strip_leading_comments(t).empty()) out.push_back(std::move(t));
    };
    for (std::size_t pos = script.find(';'); pos != std::string_view::npos;
         pos = script.find(';', pos + 1)) {
        std::string candidate(script.substr(start, pos + 1 - start));
        if (sqlite3_complete(candidate.c_str())) {
            emit(candidate);
            start = pos + 1;
        }
    }
    if (start < script.size()) emit(script.substr(start));
    return out;
}

DatabaseSpec parse_database_script(std::string db_id, std::string_view script) {
    DatabaseSpec spec;
    spec.db_id = std::move(db_id);
    for (auto& stmt : split_sql_statements(script)) {
        std::string kw = first_keyword(stmt);
        if (kw == "begin" || kw == "commit" || kw == "end" || kw == "rollback") continue;
        if (kw == "create") {
            spec.create_statements.push_back(std::move(stmt));
        } else {
            spec.insert_statements.push_back(std::move(stmt));
        }
    }
    spec.schema_text = render_schema(spec);
    return spec;
}

std::string render_database_script(const DatabaseSpec& spec) {
    std::string out;
    for (const auto& s : spec.create_statements) out += ensure_terminated(s) + "\n";
    for (const auto& s : spec.insert_statements) out += ensure_terminated(s) + "\n";
    return out;
}

std::string render_schema(const DatabaseSpec& spec) {
    std::vector<std::string> parts;
    parts.reserve(spec.create_statements.size());
    for (const auto& s : spec.create_statements) parts.push_back(ensure_terminated(s));
    return join(parts, "\n\n");
}

bool is_valid(const SqlExecution& e) { return e.status == ExecStatus::ok && e.row_count > 0; }

Validity classify(const SqlExecution& e) {
    if (e.status == ExecStatus::error) return Validity::error;
    return e.row_count > 0 ? Validity::valid : Validity::empty_success;
}

std::string render_execution(const SqlExecution& e) {
    std::string out = "SQL: " + trim(e.query) + "\n";
    if (e.status == ExecStatus::error) {
        out += "Status: error\nError: " + e.error_message.value_or("unknown error") + "\n";
        return out;
    }
    out += "Status: ok\n";
    out += "Columns: " + join(e.columns, " | ") + "\n";
    if (e.rows.empty()) {
        out += "(no rows)\n";
        return out;
    }
    out += "Rows:\n";
    for (const auto& row : e.rows) out += join(row, " | ") + "\n";
    if (e.truncated) out += "(truncated)\n";
    return out;
}

std::size_t estimate_tokens(std::string_view text) { return (text.size() + 3) / 4; }

Sandbox Sandbox::create(const DatabaseSpec& spec, int row_limit,
                        std::chrono::milliseconds timeout) {
    if (row_limit < 1) throw ConfigError("row_limit must be >= 1");
    Sandbox box;
    box.db_id_ = spec.db_id;
    box.row_limit_ = row_limit;
    box.timeout_ = timeout;
    box.schema_text_ = spec.schema_text.empty() ? render_schema(spec) : spec.schema_text;
    if (sqlite3_open_v2(":memory:", &box.db_, SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE,
                        nullptr) != SQLITE_OK) {
        std::string msg = box.db_ ? sqlite3_errmsg(box.db_) : "out of memory";
        throw SandboxError("cannot open sandbox: " + msg, 0, msg);
    }
    // No ATTACH: a session can only ever see its own private copy.
    sqlite3_limit(box.db_, SQLITE_LIMIT_ATTACHED, 0);
    sqlite3_progress_handler(box.db_, 1000, &sandbox_progress, &box);
    sqlite3_exec(box.db_, "PRAGMA foreign_keys = ON", nullptr, nullptr, nullptr);

    sqlite3_exec(box.db_, "BEGIN", nullptr, nullptr, nullptr);
    const auto statements = spec.all_statements();
    for (std::size_t i = 0; i < statements.size(); ++i) {
        box.arm_deadline();
        char* err = nullptr;
        int rc = sqlite3_exec(box.db_, statements[i].c_str(), nullptr, nullptr, &err);
        if (rc != SQLITE_OK) {
            std::string msg = box.timed_out_ ? "statement timed out" : (err ? err : "unknown error");
            sqlite3_free(err);
            throw SandboxError("statement " + std::to_string(i) + " failed: " + msg, i, msg);
        }
    }
    sqlite3_exec(box.db_, "COMMIT", nullptr, nullptr, nullptr);
    return box;
}

Sandbox::Sandbox(Sandbox&& other) noexcept { *this = std::move(other); }

Sandbox& Sandbox::operator=(Sandbox&& other) noexcept {
    if (this != &other) {
        close();
        db_ = std::exchange(other.db_, nullptr);
        db_id_ = std::move(other.db_id_);
        schema_text_ = std::move(other.schema_text_);
        row_limit_ = other.row_limit_;
        timeout_ = other.timeout_;
        // The progress handler holds `this`; rebind it to the new owner.
        if (db_) sqlite3_progress_handler(db_, 1000, &sandbox_progress, this);
    }
    return *this;
}

Sandbox::~Sandbox() { close(); }

void Sandbox::close() {
    if (db_) {
        sqlite3_close_v2(db_);
        db_ = nullptr;
    }
}

void Sandbox::require_open() const {
    if (!db_) throw UsageError("sandbox '" + db_id_ + "' is closed");
}

void Sandbox::arm_deadline() {
    timed_out_ = false;
    deadline_ = std::chrono::steady_clock::now() + timeout_;
}

SqlExecution Sandbox::execute(std::string_view query) {
    require_open();
    SqlExecution result;
    result.query = std::string(query);
    auto fail = [&](std::string msg) {
        result.status = ExecStatus::error;
        result.columns.clear();
        result.rows.clear();
        result.row_count = 0;
        result.truncated = false;
        result.error_message = std::move(msg);
        return result;
    };

    StmtGuard guard;
    const char* tail = nullptr;
    arm_deadline();
    if (sqlite3_prepare_v2(db_, result.query.c_str(), static_cast<int>(result.query.size()),
                           &guard.stmt, &tail) != SQLITE_OK) {
        return fail(sqlite3_errmsg(db_));
    }
    if (!guard.stmt) return fail("empty query");
    if (tail && !strip_leading_comments(tail).empty()) {
        StmtGuard rest;
        if (sqlite3_prepare_v2(db_, tail, -1, &rest.stmt, nullptr) != SQLITE_OK || rest.stmt) {
            return fail("multiple statements are not allowed; submit one query per call");
        }
    }

    const int ncols = sqlite3_column_count(guard.stmt);
    for (int c = 0; c < ncols; ++c) {
        const char* name = sqlite3_column_name(guard.stmt, c);
        result.columns.emplace_back(name ? name : "");
    }
    for (;;) {
        int rc = sqlite3_step(guard.stmt);
        if (rc == SQLITE_DONE) break;
        if (rc != SQLITE_ROW) {
            if (timed_out_) {
                return fail("statement timed out after " + std::to_string(timeout_.count()) +
                            " ms");
            }
            return fail(sqlite3_errmsg(db_));
        }
        if (result.row_count == row_limit_) {
            result.truncated = true;
            break;
        }
        std::vector<std::string> row;
        row.reserve(static_cast<std::size_t>(ncols));
        for (int c = 0; c < ncols; ++c) row.push_back(render_cell(guard.stmt, c));
        result.rows.push_back(std::move(row));
        ++result.row_count;
    }
    return result;
}

std::vector<std::string> Sandbox::table_names() {
    require_open();
    std::vector<std::string> names;
    StmtGuard g;
    sqlite3_prepare_v2(db_,
                       "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE "
                       "'sqlite_%' ORDER BY rowid",
                       -1, &g.stmt, nullptr);
    while (sqlite3_step(g.stmt) == SQLITE_ROW) {
        names.emplace_back(reinterpret_cast<const char*>(sqlite3_column_text(g.stmt, 0)));
    }
    return names;
}

std::int64_t Sandbox::count_rows(const std::string& table) {
    require_open();
    StmtGuard g;
    std::string sql = "SELECT COUNT(*) FROM " + quote_identifier(table);
    if (sqlite3_prepare_v2(db_, sql.c_str(), -1, &g.stmt, nullptr) != SQLITE_OK ||
        sqlite3_step(g.stmt) != SQLITE_ROW) {
        throw UsageError("cannot count rows of '" + table + "': " + sqlite3_errmsg(db_));
    }
    return sqlite3_column_int64(g.stmt, 0);
}

RecordDump Sandbox::dump_records(std::int64_t token_budget, const TokenEstimator& estimator) {
    require_open();
    RecordDump dump;
    dump.text = schema_text_;
    for (const auto& table : table_names()) {
        StmtGuard g;
        std::string sql = "SELECT * FROM " + quote_identifier(table);
        if (sqlite3_prepare_v2(db_, sql.c_str(), -1, &g.stmt, nullptr) != SQLITE_OK) continue;
        const int ncols = sqlite3_column_count(g.stmt);
        std::string block;
        while (sqlite3_step(g.stmt) == SQLITE_ROW) {
            std::string line = "INSERT INTO " + quote_identifier(table) + " VALUES (";
            for (int c = 0; c < ncols; ++c) {
                if (c) line += ", ";
                line += render_literal(g.stmt, c);
            }
            line += ");";
            if (!block.empty()) block += '\n';
            block += line;
        }
        if (!block.empty()) dump.text += "\n\n" + block;
    }
    dump.estimated_tokens = estimator(dump.text);
    dump.overflow = static_cast<std::int64_t>(dump.estimated_tokens) > token_budget;
    return dump;
}

}  // namespace dbqa
