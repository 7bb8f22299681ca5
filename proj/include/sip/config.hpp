#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace sip {

/// Flat "section.key" -> raw string map parsed from a sectioned key-value
/// file: `[section]` headers, `key = value` lines, `#` comments, blank lines.
/// Serialization groups keys back under their sections, so a parse of
/// to_text() reproduces the map exactly.
class ConfigMap {
 public:
  static ConfigMap parse_file(const std::string& path);
  static ConfigMap parse_text(const std::string& text);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  int get_int(const std::string& key, int fallback) const;
  std::uint64_t get_uint64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Comma-separated integers, e.g. "50,50".
  std::vector<int> get_int_list(const std::string& key,
                                const std::vector<int>& fallback) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  void set_double(const std::string& key, double value);
  void set_int(const std::string& key, std::int64_t value);
  void set_uint64(const std::string& key, std::uint64_t value);
  void set_bool(const std::string& key, bool value);
  void set_int_list(const std::string& key, const std::vector<int>& value);

  const std::map<std::string, std::string>& items() const { return values_; }
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace sip
