#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace vlmh {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Lowercase hex SHA-256 of raw bytes.
std::string sha256_hex(std::string_view bytes);

std::string base64_encode(std::string_view bytes);

/// Reads a whole file; throws Error{IoError} when it cannot be opened.
std::string read_file(const fs::path& path);

/// Writes to `<path>.tmp.<unique>` then renames over `path`, so readers never
/// observe a partially written file.
void write_file_atomic(const fs::path& path, std::string_view contents);

/// Appends one line (a trailing newline is added) and flushes.
void append_line(const fs::path& path, std::string_view line);

json read_json_file(const fs::path& path);

/// Parses a JSON-lines file, skipping blank lines. A missing file is empty.
std::vector<json> read_jsonl(const fs::path& path);

std::string utc_now_iso8601();

std::string trim(std::string_view s);

/// Runs fn(i) for i in [0, count) on at most `limit` worker threads. The first
/// exception thrown by any task is rethrown after all workers finish.
void for_each_bounded(std::size_t count, std::size_t limit,
                      const std::function<void(std::size_t)>& fn);

}  // namespace vlmh
