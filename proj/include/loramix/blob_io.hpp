#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace loramix {

/// Hex SHA-256 of a byte range.
std::string sha256_hex(std::span<const unsigned char> bytes);

/// Raw little-endian doubles, no header. Returns the blob's hex SHA-256.
std::string write_blob(const std::filesystem::path &path, std::span<const double> values);
/// Reads exactly `numel` doubles; checks the digest when `expected_sha256` is non-empty.
std::vector<double> read_blob(const std::filesystem::path &path, std::size_t numel,
                              const std::string &expected_sha256 = {});

std::string read_text_file(const std::filesystem::path &path);
/// Writes through a temporary sibling and renames it into place.
void write_text_atomic(const std::filesystem::path &path, const std::string &text);

}  // namespace loramix
