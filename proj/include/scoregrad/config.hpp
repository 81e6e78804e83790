#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "scoregrad/error.hpp"

namespace scoregrad {

// Flat key=value experiment configuration. Dotted keys namespace the
// sub-configs (reg.lambda=1e-3). Keys that no command consumes are rejected,
// and the fully resolved config (requested keys plus applied defaults) is
// echoed into every output directory.
class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) fail_io("config: cannot open '" + path + "'");
        std::ostringstream ss;
        ss << is.rdbuf();
        return parse_string(ss.str(), path);
    }

    static KvConfig parse_string(const std::string& text, const std::string& origin = "<string>") {
        KvConfig cfg;
        std::istringstream is(text);
        std::string line;
        std::int64_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            auto eq = t.find('=');
            if (eq == std::string::npos)
                fail_usage("config " + origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
            std::string key = trim(t.substr(0, eq));
            std::string value = trim(t.substr(eq + 1));
            if (key.empty()) fail_usage("config " + origin + ":" + std::to_string(lineno) + ": empty key");
            if (cfg.values_.count(key))
                fail_usage("config " + origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            cfg.values_[key] = value;
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        consumed_.insert(key);
        auto it = values_.find(key);
        std::string v = it == values_.end() ? fallback : it->second;
        resolved_[key] = v;
        return v;
    }

    std::string require_string(const std::string& key) {
        consumed_.insert(key);
        auto it = values_.find(key);
        if (it == values_.end()) fail_usage("config: missing required key '" + key + "'");
        resolved_[key] = it->second;
        return it->second;
    }

    double get_double(const std::string& key, double fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) {
            consumed_.insert(key);
            resolved_[key] = format(fallback);
            return fallback;
        }
        return parse_double(key, get_string(key, ""));
    }

    std::int64_t get_int(const std::string& key, std::int64_t fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) {
            consumed_.insert(key);
            resolved_[key] = std::to_string(fallback);
            return fallback;
        }
        return parse_int(key, get_string(key, ""));
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) {
            consumed_.insert(key);
            resolved_[key] = std::to_string(fallback);
            return fallback;
        }
        const std::string s = get_string(key, "");
        try {
            return std::stoull(s);
        } catch (const std::exception&) {
            fail_usage("config: key '" + key + "' has non-integer value '" + s + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) {
            consumed_.insert(key);
            resolved_[key] = fallback ? "true" : "false";
            return fallback;
        }
        std::string s = get_string(key, "");
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        fail_usage("config: key '" + key + "' has non-boolean value '" + s + "'");
    }

    std::vector<double> get_double_list(const std::string& key, const std::vector<double>& fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) {
            consumed_.insert(key);
            std::string joined;
            for (std::size_t i = 0; i < fallback.size(); ++i) {
                if (i) joined += ',';
                joined += format(fallback[i]);
            }
            resolved_[key] = joined;
            return fallback;
        }
        std::string s = get_string(key, "");
        std::vector<double> out;
        std::size_t pos = 0;
        while (pos <= s.size()) {
            std::size_t comma = s.find(',', pos);
            std::string item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            if (!trim(item).empty()) out.push_back(parse_double(key, trim(item)));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (out.empty()) fail_usage("config: key '" + key + "' has empty list");
        return out;
    }

    // every key present in the file must have been consumed by some reader
    void ensure_all_consumed() const {
        for (const auto& [key, _] : values_)
            if (!consumed_.count(key)) fail_usage("config: unknown key '" + key + "'");
    }

    // resolved view: every key a command looked at, with the effective value
    void echo_resolved(std::ostream& os) const {
        for (const auto& [key, value] : resolved_) os << key << "=" << value << "\n";
    }

    static std::string format(double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return buf;
    }

private:
    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    double parse_double(const std::string& key, const std::string& s) {
        try {
            std::size_t used = 0;
            double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            fail_usage("config: key '" + key + "' has non-numeric value '" + s + "'");
        }
    }

    std::int64_t parse_int(const std::string& key, const std::string& s) {
        try {
            std::size_t used = 0;
            std::int64_t v = std::stoll(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            fail_usage("config: key '" + key + "' has non-integer value '" + s + "'");
        }
    }

    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
    std::map<std::string, std::string> resolved_;
};

}  // namespace scoregrad
