#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace clstm {

// Plain key/value config text. One `key = value` per line, `#` comments,
// `include <relative-path>` splices another file in place. Repeated keys
// accumulate in order (used for stage tables).
class Config {
 public:
  static Config parse_file(const std::string& path);
  static Config parse_string(const std::string& text,
                             const std::string& base_dir = ".");

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& dflt) const;
  long get_int(const std::string& key) const;
  long get_int_or(const std::string& key, long dflt) const;
  double get_real(const std::string& key) const;
  double get_real_or(const std::string& key, double dflt) const;
  bool get_bool_or(const std::string& key, bool dflt) const;
  std::vector<std::string> get_all(const std::string& key) const;

  void set(const std::string& key, const std::string& value);
  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }
  std::string to_text() const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

/// Config-key or value errors; the CLI maps these to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

std::vector<std::string> split_fields(const std::string& s);

}  // namespace clstm
