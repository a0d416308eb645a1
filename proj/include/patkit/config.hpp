#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "patkit/common.hpp"

namespace patkit {

// Line-based "key = value" store. '#' starts a comment, blank lines are
// ignored, later assignments win.
class KvConfig {
public:
    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set_int(const std::string& key, long long v) { kv_[key] = std::to_string(v); }
    void set_double(const std::string& key, double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        kv_[key] = os.str();
    }

    bool has(const std::string& key) const { return kv_.count(key) > 0; }

    std::string get(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw ConfigError("missing config key: " + key);
        return it->second;
    }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }

    long long get_int(const std::string& key) const {
        try {
            return std::stoll(get(key));
        } catch (const std::logic_error&) {
            throw ConfigError("config key '" + key + "' is not an integer: " + get(key));
        }
    }

    double get_double(const std::string& key) const {
        try {
            return std::stod(get(key));
        } catch (const std::logic_error&) {
            throw ConfigError("config key '" + key + "' is not a number: " + get(key));
        }
    }

    const std::map<std::string, std::string>& entries() const { return kv_; }

    void merge(const KvConfig& other) {
        for (const auto& [k, v] : other.entries()) kv_[k] = v;
    }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
        return os.str();
    }

    static KvConfig parse(const std::string& text, const std::string& origin = "<string>") {
        KvConfig cfg;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ParseError(origin + ":" + std::to_string(lineno) +
                                 ": expected 'key = value', got '" + trimmed + "'");
            std::string key = trim(trimmed.substr(0, eq));
            std::string value = trim(trimmed.substr(eq + 1));
            if (key.empty())
                throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
            cfg.kv_[key] = value;
        }
        return cfg;
    }

    static KvConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ParseError("cannot open config file: " + path);
        std::ostringstream os;
        os << in.rdbuf();
        return parse(os.str(), path);
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw Error("cannot write config file: " + path);
        out << serialize();
    }

    static std::string trim(const std::string& s) {
        size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace patkit
