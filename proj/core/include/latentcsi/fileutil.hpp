#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace latentcsi {

std::string read_file(const std::filesystem::path& path);
/// Writes through a sibling temp file and renames into place.
void write_file(const std::filesystem::path& path, const std::string& bytes);

/// 64-bit FNV-1a; stable across platforms and runs.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace latentcsi
