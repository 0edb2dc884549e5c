#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace pcan::test {

inline std::filesystem::path source_path(const std::string &rel) {
  return std::filesystem::path(PCAN_SOURCE_DIR) / rel;
}

inline std::filesystem::path fixture_path(const std::string &name) {
  return std::filesystem::path(PCAN_FIXTURE_DIR) / name;
}

inline std::string read_text(const std::filesystem::path &path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Whitespace-separated fields of every non-empty line.
inline std::vector<std::vector<std::string>>
read_rows(const std::filesystem::path &path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> fields;
    std::string f;
    while (ls >> f)
      fields.push_back(f);
    if (!fields.empty())
      rows.push_back(std::move(fields));
  }
  return rows;
}

inline std::uint64_t hex_u64(const std::string &s) {
  return std::stoull(s, nullptr, 16);
}

} // namespace pcan::test
