#include "opmatch/config.hpp"

#include <fstream>
#include <sstream>

namespace opmatch::cfg {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

Ini Ini::parse(const std::string& text) {
    Ini ini;
    ini.text_ = text;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": malformed section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty())
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": empty section name");
            ini.sections_[section];
            continue;
        }
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key = value");
        if (section.empty())
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": key outside any [section]");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": empty key");
        if (ini.sections_[section].count(key))
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": duplicate key '" + section + "." + key + "'");
        ini.sections_[section][key] = val;
    }
    return ini;
}

Ini Ini::parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f.good()) throw ConfigError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

bool Ini::has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    if (s == sections_.end() || !s->second.count(key)) return false;
    consumed_.insert(section + "." + key);
    return true;
}

std::string Ini::get(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    if (s == sections_.end() || !s->second.count(key))
        throw ConfigError("missing required config key '" + section + "." +
                          key + "'");
    consumed_.insert(section + "." + key);
    return s->second.at(key);
}

std::string Ini::get_or(const std::string& section, const std::string& key,
                        const std::string& def) const {
    return has(section, key) ? get(section, key) : def;
}

int64_t Ini::get_int(const std::string& section, const std::string& key) const {
    const std::string v = get(section, key);
    try {
        size_t pos = 0;
        int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + section + "." + key +
                          "' is not an integer: " + v);
    }
}

int64_t Ini::get_int_or(const std::string& section, const std::string& key,
                        int64_t def) const {
    return has(section, key) ? get_int(section, key) : def;
}

double Ini::get_real(const std::string& section, const std::string& key) const {
    const std::string v = get(section, key);
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + section + "." + key +
                          "' is not a number: " + v);
    }
}

double Ini::get_real_or(const std::string& section, const std::string& key,
                        double def) const {
    return has(section, key) ? get_real(section, key) : def;
}

bool Ini::get_bool_or(const std::string& section, const std::string& key,
                      bool def) const {
    if (!has(section, key)) return def;
    const std::string v = get(section, key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + section + "." + key +
                      "' is not a boolean: " + v);
}

std::vector<std::string> Ini::get_list(const std::string& section,
                                       const std::string& key) const {
    std::vector<std::string> out;
    std::istringstream ss(get(section, key));
    for (std::string item; std::getline(ss, item, ',');) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

void Ini::require_all_consumed() const {
    std::string unknown;
    for (const auto& [sec, kv] : sections_)
        for (const auto& [key, val] : kv)
            if (!consumed_.count(sec + "." + key))
                unknown += (unknown.empty() ? "" : ", ") + sec + "." + key;
    if (!unknown.empty())
        throw ConfigError("unknown config key(s): " + unknown);
}

uint64_t Ini::hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text_) h = (h ^ c) * 1099511628211ULL;
    return h;
}

}  // namespace opmatch::cfg
