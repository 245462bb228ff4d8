#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "dbqa/forge.hpp"

namespace httplib {
class Server;
}

namespace dbqa {

enum class ReviewActionKind { approve, edit, reject, set_category };

std::string_view to_string(ReviewActionKind k);
ReviewActionKind parse_review_action_kind(std::string_view s);

struct ReviewAction {
    std::string draft_id;
    ReviewActionKind action = ReviewActionKind::approve;
    std::optional<std::string> payload;
    std::string actor;
    std::string timestamp;  // assigned by the service when empty
};

void to_json(json& j, const ReviewAction& v);
void from_json(const json& j, ReviewAction& v);

struct DraftSummary {
    std::string draft_id;
    DraftStage stage = DraftStage::controlled;
    std::string question_preview;
    std::optional<Category> proposed_category;
};

struct DraftPage {
    std::vector<DraftSummary> items;
    std::int64_t total = 0;
    int page = 1;
    int page_size = 20;
};

struct TablePreview {
    std::string table;
    std::int64_t row_count = 0;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;
};

struct DraftDetail {
    DraftItem draft;
    std::optional<std::vector<TablePreview>> preview;
};

void to_json(json& j, const DraftSummary& v);
void to_json(json& j, const DraftPage& v);
void to_json(json& j, const TablePreview& v);
void to_json(json& j, const DraftDetail& v);

inline constexpr int kPreviewRows = 20;
inline constexpr int kMaxPageSize = 200;

class CurationService {
public:
    // dataset_out empty: approvals confirm drafts without emitting instances.
    CurationService(DraftStore store, std::map<std::string, DatabaseSpec> sources,
                    std::filesystem::path dataset_out = {});

    DraftPage list_pending(std::optional<DraftStage> stage_filter, int page, int page_size) const;
    DraftDetail get_draft_detail(const std::string& draft_id) const;
    DraftItem submit_action(ReviewAction a);

    const DraftStore& store() const { return store_; }

private:
    const DatabaseSpec& source_for(const DraftItem& d) const;
    std::mutex& lock_for(const std::string& draft_id);

    DraftStore store_;
    std::map<std::string, DatabaseSpec> sources_;
    std::filesystem::path dataset_out_;
    std::mutex locks_mu_;
    std::map<std::string, std::unique_ptr<std::mutex>> locks_;
    std::mutex dataset_mu_;
};

// Routes for the review queue; every route except /health needs the bearer token.
void mount_curation_routes(httplib::Server& server, CurationService& service, std::string token);

}  // namespace dbqa
