#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace m3snet {

std::string_view trim(std::string_view text);

/// Strict parsers: the whole of `text` must be consumed. ConfigError names `key`.
int parse_int(std::string_view key, std::string_view text);
std::int64_t parse_int64(std::string_view key, std::string_view text);
std::uint64_t parse_uint64(std::string_view key, std::string_view text);
double parse_real(std::string_view key, std::string_view text);
bool parse_bool(std::string_view key, std::string_view text);

/// Shortest decimal that round-trips to the same double.
std::string format_real(double value);

}  // namespace m3snet
