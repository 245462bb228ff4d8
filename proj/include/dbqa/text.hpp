#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dbqa {

/// Number of whitespace-delimited tokens. This is the single length unit used
/// for plans, answers and reference answers.
std::size_t word_count(std::string_view text);

std::string trim(std::string_view text);
std::string to_lower(std::string_view text);
bool iequals(std::string_view a, std::string_view b);
bool icontains(std::string_view haystack, std::string_view needle);
std::vector<std::string> split_lines(std::string_view text);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Shortest decimal text that round-trips to the same double.
std::string format_real(double value);

/// Hex SHA-256 of the input bytes.
std::string sha256_hex(std::string_view data);

std::string read_file(const std::filesystem::path& path);

/// Write-temp-then-rename so readers never observe a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace dbqa
