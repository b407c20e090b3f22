#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>

namespace reid {

/// Flat `key = value` settings. Blank lines and lines starting with '#' are
/// ignored; keys are case-sensitive and may appear once.
///
/// Every key must be read by the consumer; finish() rejects the leftovers so
/// that a typo in a config file is an error instead of a silent default.
class ConfigFile {
 public:
  ConfigFile() = default;
  static ConfigFile parse(const std::string& text, const std::string& origin = "<config>");
  static ConfigFile load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.contains(key); }

  std::string get_string(const std::string& key, const std::string& fallback);
  std::int64_t get_int(const std::string& key, std::int64_t fallback);
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);

  /// Throws ConfigError naming any key that was never read.
  void finish() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> used_;
  std::string origin_ = "<config>";
};

}  // namespace reid
