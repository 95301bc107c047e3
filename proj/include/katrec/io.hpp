#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace katrec::io {

/// Replaces `path` with `bytes` by writing a sibling temporary file and
/// renaming it over the target, so readers never observe a partial file.
void write_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace katrec::io
