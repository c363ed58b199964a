#pragma once

// Flat experiment config: one `key = value` per line, `#` starts a comment.
// Keys are long flag names without the leading dashes.

#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mhvit/binary_io.hpp"
#include "mhvit/error.hpp"

namespace mhvit::app {

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline ConfigEntries parse_flat_config(const std::string& text, const std::string& source) {
  ConfigEntries out;
  std::istringstream in(text);
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(source + ":" + std::to_string(n) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ValidationError(source + ":" + std::to_string(n) + ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    for (const auto& [k, v] : out)
      if (k == key) throw ValidationError(source + ":" + std::to_string(n) + ": duplicate key '" + key + "'");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

inline ConfigEntries read_flat_config(const std::string& path) {
  return parse_flat_config(read_file(path), path);
}

}  // namespace mhvit::app
