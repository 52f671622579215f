#include "neuronalloc/config.hpp"

#include <charconv>
#include <fmt/format.h>
#include <fstream>
#include <sstream>

namespace nalloc {

namespace {

std::string_view trim(std::string_view s) {
  std::size_t b = 0;
  while (b < s.size() && (s[b] == ' ' || s[b] == '\t')) ++b;
  std::size_t e = s.size();
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return s.substr(b, e - b);
}

}  // namespace

KeyValueConfig KeyValueConfig::from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw usage_error("cannot open config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

KeyValueConfig KeyValueConfig::parse(std::string_view text, std::string_view origin) {
  KeyValueConfig config;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('\n', start), text.size());
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;

    const std::size_t hash = line.find('#');
    if (hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;

    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw usage_error(
          fmt::format("{}:{}: expected key=value, got '{}'", origin, line_no, line));
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw usage_error(fmt::format("{}:{}: empty key", origin, line_no));
    }
    config.set(std::string(key), std::string(value));
  }
  return config;
}

void KeyValueConfig::set(std::string key, std::string value) {
  entries_[std::move(key)] = std::move(value);
}

bool KeyValueConfig::has(std::string_view key) const {
  return entries_.find(std::string(key)) != entries_.end();
}

std::string KeyValueConfig::get_string(std::string_view key,
                                       std::string_view fallback) const {
  const auto it = entries_.find(std::string(key));
  return it == entries_.end() ? std::string(fallback) : it->second;
}

std::int64_t KeyValueConfig::get_int(std::string_view key, std::int64_t fallback) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw usage_error(fmt::format("config key {}: '{}' is not an integer", key, v));
  }
  return out;
}

double KeyValueConfig::get_double(std::string_view key, double fallback) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw usage_error(fmt::format("config key {}: '{}' is not a number", key, v));
  }
  return out;
}

bool KeyValueConfig::get_bool(std::string_view key, bool fallback) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw usage_error(fmt::format("config key {}: '{}' is not a boolean", key, v));
}

std::vector<std::string> KeyValueConfig::get_list(std::string_view key) const {
  const auto it = entries_.find(std::string(key));
  if (it == entries_.end()) return {};
  std::vector<std::string> out;
  const std::string& s = it->second;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == ',') {
      const std::string_view item = trim(std::string_view(s).substr(start, i - start));
      if (!item.empty()) out.emplace_back(item);
      start = i + 1;
    }
  }
  return out;
}

}  // namespace nalloc
