#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tbfm/common.hpp"

namespace tbfm {

/// Ordered `key=value` document, one pair per line, LF endings.
class KeyValueDoc {
 public:
  KeyValueDoc& set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = value;
        return *this;
      }
    }
    entries_.emplace_back(key, value);
    return *this;
  }
  KeyValueDoc& set(const std::string& key, const char* value) { return set(key, std::string(value)); }
  KeyValueDoc& set(const std::string& key, double value) { return set(key, format_double(value)); }
  KeyValueDoc& set(const std::string& key, std::size_t value) { return set(key, std::to_string(value)); }
  KeyValueDoc& set(const std::string& key, unsigned value) { return set(key, std::to_string(value)); }
  KeyValueDoc& set(const std::string& key, int value) { return set(key, std::to_string(value)); }
  KeyValueDoc& set(const std::string& key, bool value) { return set(key, value ? "true" : "false"); }

  std::optional<std::string> get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    return std::nullopt;
  }

  std::string require_value(const std::string& key) const {
    auto v = get(key);
    if (!v) throw IoError("missing key '" + key + "'");
    return *v;
  }
  double require_double(const std::string& key) const { return std::stod(require_value(key)); }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  std::string str() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << str();
    if (!out) throw IoError("failed writing '" + path.string() + "'");
  }

  static KeyValueDoc parse(std::istream& in) {
    KeyValueDoc doc;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw IoError("malformed key=value line: '" + line + "'");
      doc.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return doc;
  }

  static KeyValueDoc read(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return parse(in);
  }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace tbfm
