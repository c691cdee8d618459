#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "instid/errors.hpp"

namespace instid {

// INI-style key/value config. Sections become dotted prefixes:
//   [train]
//   steps = 4000        ->  train.steps = "4000"
// '#' and ';' start comments. Values keep internal spaces, outer whitespace
// is trimmed. Later assignments win.
class Config {
  public:
    static Config parse_string(const std::string& text, const std::string& origin = "<string>") {
        Config c;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            std::string s = strip_comment(line);
            s = trim(s);
            if (s.empty()) continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated section");
                section = trim(s.substr(1, s.size() - 2));
                if (section.empty())
                    throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
                continue;
            }
            const auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
            std::string key = trim(s.substr(0, eq));
            std::string val = trim(s.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            if (!section.empty()) key = section + "." + key;
            c.kv_[key] = val;
        }
        return c;
    }

    static Config parse_file(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file " + path.string());
        std::stringstream ss;
        ss << f.rdbuf();
        return parse_string(ss.str(), path.string());
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }

    std::string gets(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("missing config key: " + key);
        return it->second;
    }
    std::string gets(const std::string& key, const std::string& def) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? def : it->second;
    }

    long long geti(const std::string& key) const { return to_int(key, gets(key)); }
    long long geti(const std::string& key, long long def) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? def : to_int(key, it->second);
    }

    double getd(const std::string& key) const { return to_double(key, gets(key)); }
    double getd(const std::string& key, double def) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? def : to_double(key, it->second);
    }

    bool getb(const std::string& key, bool def) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return def;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw ConfigError("config key " + key + ": not a boolean: '" + v + "'");
    }

    // Rejects keys outside the schema so typos fail loudly instead of being
    // silently ignored.
    void restrict_keys(const std::set<std::string>& allowed) const {
        for (const auto& [k, v] : kv_)
            if (allowed.count(k) == 0) throw ConfigError("unknown config key: " + k);
    }

    const std::map<std::string, std::string>& entries() const { return kv_; }

    // Canonical resolved form, sorted; written next to run outputs.
    std::string dump() const {
        std::string out;
        for (const auto& [k, v] : kv_) {
            out += k;
            out += " = ";
            out += v;
            out += '\n';
        }
        return out;
    }

  private:
    static std::string strip_comment(const std::string& s) {
        const auto pos = s.find_first_of("#;");
        return pos == std::string::npos ? s : s.substr(0, pos);
    }
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
    static long long to_int(const std::string& key, const std::string& v) {
        try {
            std::size_t used = 0;
            const long long r = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": not an integer: '" + v + "'");
        }
    }
    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t used = 0;
            const double r = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": not a number: '" + v + "'");
        }
    }

    std::map<std::string, std::string> kv_;
};

}  // namespace instid
