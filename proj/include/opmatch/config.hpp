#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace opmatch::cfg {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// INI-style run configuration: [section] headers, key = value lines,
// '#' or ';' comments. Parsing is strict in two stages: syntax errors throw
// immediately, and require_all_consumed() rejects any key that no command
// ever asked for (misspellings fail before computation starts).
class Ini {
public:
    static Ini parse(const std::string& text);
    static Ini parse_file(const std::string& path);

    bool has(const std::string& section, const std::string& key) const;
    std::string get(const std::string& section, const std::string& key) const;
    std::string get_or(const std::string& section, const std::string& key,
                       const std::string& def) const;
    int64_t get_int(const std::string& section, const std::string& key) const;
    int64_t get_int_or(const std::string& section, const std::string& key,
                       int64_t def) const;
    double get_real(const std::string& section, const std::string& key) const;
    double get_real_or(const std::string& section, const std::string& key,
                       double def) const;
    bool get_bool_or(const std::string& section, const std::string& key,
                     bool def) const;
    // comma-separated list value
    std::vector<std::string> get_list(const std::string& section,
                                      const std::string& key) const;

    // Throws naming every key that was never read.
    void require_all_consumed() const;

    const std::string& text() const { return text_; }
    // FNV-1a of the raw config text, for provenance records.
    uint64_t hash() const;

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
    mutable std::set<std::string> consumed_;  // "section.key"
    std::string text_;
};

}  // namespace opmatch::cfg
