#include "npattack/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "npattack/error.hpp"

namespace npattack {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const Config::Entry& e, const char* want) {
  throw ParseError(e.origin + ": key '" + key + "' expects " + want + ", got '" + e.value + "'");
}

}  // namespace

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Config c;
  c.root_dir_ = std::filesystem::absolute(path).parent_path();
  c.parse_into(ss.str(), path.string(), c.root_dir_, 0);
  return c;
}

Config Config::parse(const std::string& text, const std::string& origin_name, const std::filesystem::path& base_dir) {
  Config c;
  c.root_dir_ = std::filesystem::absolute(base_dir);
  c.parse_into(text, origin_name, c.root_dir_, 0);
  return c;
}

void Config::parse_into(const std::string& text, const std::string& origin_name, const std::filesystem::path& base_dir,
                        int depth) {
  if (depth > 8) throw ParseError(origin_name + ": include nesting too deep");
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string origin = origin_name + ":" + std::to_string(lineno);
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(origin + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(origin + ": empty key");
    if (key == "include") {
      const std::filesystem::path inc = base_dir / value;
      std::ifstream f(inc);
      if (!f) throw IoError(origin + ": cannot open included config " + inc.string());
      std::stringstream ss;
      ss << f.rdbuf();
      parse_into(ss.str(), inc.string(), inc.parent_path(), depth + 1);
      continue;
    }
    entries_[key] = Entry{value, origin, base_dir};
  }
}

void Config::set(const std::string& key, const std::string& value) {
  entries_[key] = Entry{value, "override", std::filesystem::current_path()};
}

const Config::Entry* Config::find(const std::string& key) {
  used_.insert(key);
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) {
  const Entry* e = find(key);
  return e ? e->value : fallback;
}

std::optional<std::string> Config::get_optional(const std::string& key) {
  const Entry* e = find(key);
  if (!e) return std::nullopt;
  return e->value;
}

std::filesystem::path Config::get_path(const std::string& key, const std::filesystem::path& fallback) {
  const Entry* e = find(key);
  if (!e) return fallback.empty() || fallback.is_absolute() ? fallback : (root_dir_ / fallback).lexically_normal();
  std::filesystem::path p(e->value);
  return p.is_absolute() ? p : (e->base_dir / p).lexically_normal();
}

double Config::get_double(const std::string& key, double fallback) {
  const Entry* e = find(key);
  if (!e) return fallback;
  double v = 0.0;
  const char* b = e->value.data();
  const char* end = b + e->value.size();
  auto [ptr, ec] = std::from_chars(b, end, v);
  if (ec != std::errc() || ptr != end) bad_value(key, *e, "a number");
  return v;
}

std::uint64_t Config::get_uint(const std::string& key, std::uint64_t fallback) {
  const Entry* e = find(key);
  if (!e) return fallback;
  std::uint64_t v = 0;
  const char* b = e->value.data();
  const char* end = b + e->value.size();
  auto [ptr, ec] = std::from_chars(b, end, v);
  if (ec != std::errc() || ptr != end) bad_value(key, *e, "a non-negative integer");
  return v;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) {
  const Entry* e = find(key);
  if (!e) return fallback;
  std::int64_t v = 0;
  const char* b = e->value.data();
  const char* end = b + e->value.size();
  auto [ptr, ec] = std::from_chars(b, end, v);
  if (ec != std::errc() || ptr != end) bad_value(key, *e, "an integer");
  return v;
}

bool Config::get_bool(const std::string& key, bool fallback) {
  const Entry* e = find(key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1" || e->value == "yes") return true;
  if (e->value == "false" || e->value == "0" || e->value == "no") return false;
  bad_value(key, *e, "true or false");
}

std::vector<std::uint64_t> Config::get_uint_list(const std::string& key, const std::vector<std::uint64_t>& fallback) {
  const Entry* e = find(key);
  if (!e) return fallback;
  std::vector<std::uint64_t> out;
  std::istringstream in(e->value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || ptr != item.data() + item.size())
      bad_value(key, *e, "a comma-separated list of non-negative integers");
    out.push_back(v);
  }
  return out;
}

void Config::reject_unknown() const {
  for (const auto& [key, e] : entries_)
    if (!used_.count(key)) throw ParseError(e.origin + ": unknown key '" + key + "'");
}

}  // namespace npattack
