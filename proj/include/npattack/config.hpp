#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace npattack {

// Flat key = value file. '#' starts a comment; `include = other.cfg` splices
// another file (relative to the including file) at that point, and later
// assignments override earlier ones.
class Config {
 public:
  struct Entry {
    std::string value;
    std::string origin;  // file:line
    std::filesystem::path base_dir;
  };

  static Config load(const std::filesystem::path& path);
  static Config parse(const std::string& text, const std::string& origin_name,
                      const std::filesystem::path& base_dir);

  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return entries_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback);
  std::optional<std::string> get_optional(const std::string& key);
  // Resolved against the directory of the file that set the key; a relative
  // fallback is resolved against the top-level file's directory.
  std::filesystem::path get_path(const std::string& key, const std::filesystem::path& fallback = {});
  double get_double(const std::string& key, double fallback);
  std::uint64_t get_uint(const std::string& key, std::uint64_t fallback);
  std::int64_t get_int(const std::string& key, std::int64_t fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<std::uint64_t> get_uint_list(const std::string& key, const std::vector<std::uint64_t>& fallback);

  // Throws ParseError naming the first key that no getter asked for.
  void reject_unknown() const;

  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  void parse_into(const std::string& text, const std::string& origin_name, const std::filesystem::path& base_dir,
                  int depth);
  const Entry* find(const std::string& key);

  std::map<std::string, Entry> entries_;
  std::set<std::string> used_;
  std::filesystem::path root_dir_;
};

}  // namespace npattack
