#include "m3snet/text.hpp"

#include <charconv>
#include <cmath>

#include "m3snet/errors.hpp"

namespace m3snet {

std::string_view trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return text.substr(first, last - first + 1);
}

namespace {

template <typename V>
V parse_number(std::string_view key, std::string_view text, const char* what) {
  text = trim(text);
  V v{};
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || p != text.data() + text.size()) {
    throw ConfigError(std::string(key) + ": expected " + what + ", got '" + std::string(text) + "'");
  }
  return v;
}

}  // namespace

int parse_int(std::string_view key, std::string_view text) { return parse_number<int>(key, text, "an integer"); }

std::int64_t parse_int64(std::string_view key, std::string_view text) {
  return parse_number<std::int64_t>(key, text, "an integer");
}

std::uint64_t parse_uint64(std::string_view key, std::string_view text) {
  return parse_number<std::uint64_t>(key, text, "a non-negative integer");
}

double parse_real(std::string_view key, std::string_view text) {
  text = trim(text);
  if (text == "nan") return std::nan("");
  if (text == "inf") return INFINITY;
  if (text == "-inf") return -INFINITY;
  return parse_number<double>(key, text, "a number");
}

bool parse_bool(std::string_view key, std::string_view text) {
  text = trim(text);
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError(std::string(key) + ": expected true or false, got '" + std::string(text) + "'");
}

std::string format_real(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, p);
}

}  // namespace m3snet
