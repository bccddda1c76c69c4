#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace ehrprompt {

// Lowercase hex SHA-256 of the given bytes.
std::string sha256_hex(std::string_view data);

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::filesystem::path asset_dir();

// Loads a text asset relative to asset_dir() unless `name` is absolute.
std::string load_asset(const std::string& name);

// Uniform integer in [0, bound) from a 64-bit engine, by rejection sampling.
// std::uniform_int_distribution is implementation-defined; this is not.
std::uint64_t bounded_draw(std::mt19937_64& rng, std::uint64_t bound);

// Fisher-Yates over indices 0..n-1, reproducible across standard libraries.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

std::string trim(std::string_view s);

// Replaces every occurrence of `from` in `text`; returns the count.
std::size_t replace_all(std::string& text, std::string_view from, std::string_view to);

}  // namespace ehrprompt
