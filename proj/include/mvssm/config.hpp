#pragma once

// Flat key = value configuration text. '#' starts a comment. Consumers
// fetch the keys they know and then call reject_unknown(), so a typo in a
// config file is an error rather than a silent default.

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mvssm {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse_text(const std::string& text) {
        KvConfig cfg;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + line + "'");
            cfg.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
        return cfg;
    }

    static KvConfig parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse_text(ss.str());
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        consumed_.insert(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not a number: " + it->second);
        }
    }

    long long get_int(const std::string& key, long long fallback) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            return std::stoll(it->second);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not an integer: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool fallback) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw ConfigError("config key '" + key + "': not a boolean: " + it->second);
    }

    void reject_unknown() const {
        for (const auto& [k, v] : values_)
            if (!consumed_.count(k)) throw ConfigError("unknown config key: " + k);
    }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

}  // namespace mvssm
