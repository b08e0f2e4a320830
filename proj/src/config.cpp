#include "clstm/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace clstm {

namespace {
std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string dir_of(const std::string& path) {
  auto pos = path.find_last_of('/');
  return pos == std::string::npos ? std::string(".") : path.substr(0, pos);
}

void parse_lines(std::istream& is, const std::string& base_dir,
                 std::vector<std::pair<std::string, std::string>>& out) {
  std::string line;
  while (std::getline(is, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.rfind("include ", 0) == 0) {
      std::string inc = trim(line.substr(8));
      std::string path = inc.front() == '/' ? inc : base_dir + "/" + inc;
      std::ifstream f(path);
      if (!f) throw ConfigError("include file not found: " + path);
      parse_lines(f, dir_of(path), out);
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("malformed config line (expected key = value): " +
                        line);
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}
}  // namespace

Config Config::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config file not found: " + path);
  Config cfg;
  parse_lines(f, dir_of(path), cfg.entries_);
  return cfg;
}

Config Config::parse_string(const std::string& text,
                            const std::string& base_dir) {
  std::istringstream is(text);
  Config cfg;
  parse_lines(is, base_dir, cfg.entries_);
  return cfg;
}

bool Config::has(const std::string& key) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == key; });
}

const std::string& Config::get(const std::string& key) const {
  // last occurrence wins so flag overrides can simply append
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
    if (it->first == key) return it->second;
  throw ConfigError("missing config key: " + key);
}

std::string Config::get_or(const std::string& key,
                           const std::string& dflt) const {
  return has(key) ? get(key) : dflt;
}

long Config::get_int(const std::string& key) const {
  try {
    return std::stol(get(key));
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not an integer: " +
                      get(key));
  }
}

long Config::get_int_or(const std::string& key, long dflt) const {
  return has(key) ? get_int(key) : dflt;
}

double Config::get_real(const std::string& key) const {
  try {
    return std::stod(get(key));
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not a number: " + get(key));
  }
}

double Config::get_real_or(const std::string& key, double dflt) const {
  return has(key) ? get_real(key) : dflt;
}

bool Config::get_bool_or(const std::string& key, bool dflt) const {
  if (!has(key)) return dflt;
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: " + v);
}

std::vector<std::string> Config::get_all(const std::string& key) const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_)
    if (k == key) out.push_back(v);
  return out;
}

void Config::set(const std::string& key, const std::string& value) {
  entries_.emplace_back(key, value);
}

std::string Config::to_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

std::vector<std::string> split_fields(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

}  // namespace clstm
