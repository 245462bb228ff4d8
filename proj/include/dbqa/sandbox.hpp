#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "dbqa/core_model.hpp"

struct sqlite3;

namespace dbqa {

inline constexpr int kDefaultRowLimit = 50;
inline constexpr std::chrono::milliseconds kDefaultStatementTimeout{5000};

/// Splits a `;`-terminated SQL script into statements (quotes, comments and
/// trigger bodies respected). Returned statements are trimmed and carry no
/// trailing semicolon.
std::vector<std::string> split_sql_statements(std::string_view script);

/// Parses `database.sql` text. CREATE statements go to create_statements, all
/// other statements (in order) to insert_statements; explicit transaction
/// control (BEGIN/COMMIT/END/ROLLBACK) is dropped. schema_text is rendered.
DatabaseSpec parse_database_script(std::string db_id, std::string_view script);

/// Inverse of parse_database_script: creates then inserts, one per line.
std::string render_database_script(const DatabaseSpec& spec);

/// Create statements in declaration order separated by one blank line.
std::string render_schema(const DatabaseSpec& spec);

/// Non-empty successful result.
bool is_valid(const SqlExecution& e);

enum class Validity { valid, empty_success, error };
Validity classify(const SqlExecution& e);

/// Fixed tabular rendering shown to agents and reviewers.
std::string render_execution(const SqlExecution& e);

/// Default characters/4 token estimate (rounded up).
std::size_t estimate_tokens(std::string_view text);

using TokenEstimator = std::function<std::size_t(std::string_view)>;

struct RecordDump {
    std::string text;
    bool overflow = false;
    std::size_t estimated_tokens = 0;
};

/// Private in-memory copy of one database. Confined to a single thread.
class Sandbox {
public:
    /// Runs every create then insert statement; throws SandboxError carrying
    /// the index of the first failing statement.
    static Sandbox create(const DatabaseSpec& spec, int row_limit = kDefaultRowLimit,
                          std::chrono::milliseconds timeout = kDefaultStatementTimeout);

    Sandbox(Sandbox&& other) noexcept;
    Sandbox& operator=(Sandbox&& other) noexcept;
    Sandbox(const Sandbox&) = delete;
    Sandbox& operator=(const Sandbox&) = delete;
    ~Sandbox();

    /// Executes exactly one statement. Engine errors, timeouts and
    /// multi-statement strings come back as status=error; only a closed
    /// handle throws (UsageError).
    SqlExecution execute(std::string_view query);

    void close();
    bool is_open() const { return db_ != nullptr; }

    const std::string& db_id() const { return db_id_; }
    int row_limit() const { return row_limit_; }
    std::chrono::milliseconds timeout() const { return timeout_; }
    const std::string& schema_text() const { return schema_text_; }

    /// User tables in creation order.
    std::vector<std::string> table_names();
    std::int64_t count_rows(const std::string& table);

    /// Schema text followed by every table's rows as INSERT statements.
    RecordDump dump_records(std::int64_t token_budget,
                            const TokenEstimator& estimator = estimate_tokens);

private:
    Sandbox() = default;
    void require_open() const;
    void arm_deadline();

    friend int sandbox_progress(void* self);

    sqlite3* db_ = nullptr;
    std::string db_id_;
    std::string schema_text_;
    int row_limit_ = kDefaultRowLimit;
    std::chrono::milliseconds timeout_ = kDefaultStatementTimeout;
    std::chrono::steady_clock::time_point deadline_{};
    bool timed_out_ = false;
};

}  // namespace dbqa
