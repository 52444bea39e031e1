#pragma once

// Machine-checked concept-to-code map. docs/equation_map.json names, for each
// documented concept, the symbol implementing it and the header defining it;
// docs/coverage.txt lists the concepts that must be covered.

#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace tgk {

struct MapEntry {
  std::string id;      // concept id
  std::string symbol;  // e.g. tgk::ops::gather_rows
  std::string file;    // path relative to the source root
  std::string anchor;  // one-line description of what the symbol realizes
};

struct DocsReport {
  std::vector<std::string> dangling;    // "id: reason"
  std::vector<std::string> duplicates;  // ids listed twice
  std::vector<std::string> uncovered;   // in coverage, absent from the map
  std::vector<std::string> unexpected;  // in the map, absent from coverage

  bool ok() const { return dangling.empty() && duplicates.empty() && uncovered.empty() && unexpected.empty(); }

  std::string str() const {
    std::ostringstream os;
    for (const auto& d : dangling) os << "dangling: " << d << "\n";
    for (const auto& d : duplicates) os << "duplicate: " << d << "\n";
    for (const auto& d : uncovered) os << "not mapped: " << d << "\n";
    for (const auto& d : unexpected) os << "not in coverage list: " << d << "\n";
    return os.str();
  }
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline std::vector<MapEntry> load_equation_map(const std::filesystem::path& file) {
  const auto j = nlohmann::json::parse(read_file(file));
  std::vector<MapEntry> out;
  for (const auto& e : j.at("entries"))
    out.push_back({e.at("id").get<std::string>(), e.at("symbol").get<std::string>(), e.at("file").get<std::string>(),
                   e.value("anchor", std::string())});
  return out;
}

// One id per line; blank lines and lines starting with '#' are skipped.
inline std::vector<std::string> load_coverage(const std::filesystem::path& file) {
  std::istringstream is(read_file(file));
  std::vector<std::string> out;
  for (std::string line; std::getline(is, line);) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  return out;
}

// True when `text` defines `name` at namespace scope: a column-0 declaration
// of a function (name before any parenthesis), type, enum or alias, with
// every namespace of `scopes` declared in the file.
inline bool defines_symbol(const std::string& text, const std::vector<std::string>& scopes, const std::string& name) {
  std::set<std::string> declared;
  const std::regex nsdecl(R"(namespace\s+([A-Za-z_][\w:]*)\s*\{)");
  for (std::sregex_iterator it(text.begin(), text.end(), nsdecl), end; it != end; ++it) {
    const std::string full = (*it)[1];
    for (std::size_t s = 0, p; s <= full.size(); s = p + 2) {
      p = full.find("::", s);
      if (p == std::string::npos) p = full.size();
      declared.insert(full.substr(s, p - s));
    }
  }
  for (const auto& ns : scopes)
    if (!declared.count(ns)) return false;
  const std::string n = std::regex_replace(name, std::regex(R"([.^$|()\[\]{}*+?\\])"), R"(\$&)");
  const std::regex fn("(^|\\n)[A-Za-z][^;\\n(]*\\b" + n + "\\s*\\(");
  const std::regex type("(^|\\n)(struct|class|enum class|using)\\s+" + n + "\\b");
  return std::regex_search(text, fn) || std::regex_search(text, type);
}

inline DocsReport check_equation_map(const std::filesystem::path& root, const std::vector<MapEntry>& entries,
                                     const std::vector<std::string>& coverage) {
  DocsReport r;
  std::set<std::string> seen;
  std::map<std::string, std::string> cache;
  for (const auto& e : entries) {
    if (!seen.insert(e.id).second) r.duplicates.push_back(e.id);
    std::vector<std::string> parts;
    for (std::size_t s = 0, p; s <= e.symbol.size(); s = p + 2) {
      p = e.symbol.find("::", s);
      if (p == std::string::npos) p = e.symbol.size();
      parts.push_back(e.symbol.substr(s, p - s));
    }
    if (parts.size() < 2 || parts.back().empty()) {
      r.dangling.push_back(e.id + ": malformed symbol '" + e.symbol + "'");
      continue;
    }
    const auto path = root / e.file;
    if (!std::filesystem::exists(path)) {
      r.dangling.push_back(e.id + ": missing file " + e.file);
      continue;
    }
    auto it = cache.find(e.file);
    if (it == cache.end()) it = cache.emplace(e.file, read_file(path)).first;
    const std::string name = parts.back();
    parts.pop_back();
    if (!defines_symbol(it->second, parts, name)) r.dangling.push_back(e.id + ": " + e.symbol + " not found in " + e.file);
  }
  const std::set<std::string> want(coverage.begin(), coverage.end());
  for (const auto& c : want)
    if (!seen.count(c)) r.uncovered.push_back(c);
  for (const auto& s : seen)
    if (!want.count(s)) r.unexpected.push_back(s);
  return r;
}

inline DocsReport check_source_tree(const std::filesystem::path& root) {
  return check_equation_map(root, load_equation_map(root / "docs" / "equation_map.json"),
                            load_coverage(root / "docs" / "coverage.txt"));
}

}  // namespace tgk
