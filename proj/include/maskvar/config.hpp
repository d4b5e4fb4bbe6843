#pragma once

// Flat key=value configuration: a text format simple enough to specify
// bit-exactly, with typed accessors that name the offending field on
// error. Doubles round-trip through max_digits10 so a config written
// back out reproduces the same values.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskvar {

class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& field, const std::string& what)
        : std::runtime_error("config field '" + field + "': " + what), field_name(field) {}
    std::string field_name;
};

class KvConfig {
public:
    static KvConfig parse_text(const std::string& text, const std::string& origin = "<text>") {
        KvConfig c;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const std::string trimmed = trim(line);
            if (trimmed.empty() || trimmed[0] == '#') continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw config_error("<line " + std::to_string(lineno) + ">",
                                   origin + ": expected key=value, got '" + trimmed + "'");
            c.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
        }
        return c;
    }

    static KvConfig load_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw config_error(path, "cannot open config file");
        std::ostringstream ss;
        ss << is.rdbuf();
        return parse_text(ss.str(), path);
    }

    void set(const std::string& key, const std::string& value) {
        if (key.empty()) throw config_error("<empty>", "empty key");
        if (!values_.count(key)) order_.push_back(key);
        values_[key] = value;
    }

    void set_long(const std::string& key, long long v) { set(key, std::to_string(v)); }
    void set_double(const std::string& key, double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        set(key, os.str());
    }
    void set_bool(const std::string& key, bool v) { set(key, v ? "true" : "false"); }

    // "key=value" from the command line.
    void apply_override(const std::string& assignment) {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0)
            throw config_error(assignment, "override must look like key=value");
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::string require_string(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw config_error(key, "required but missing");
        return it->second;
    }

    long long get_long(const std::string& key, long long fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const long long v = std::stoll(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw config_error(key, "expected an integer, got '" + it->second + "'");
        }
    }

    int get_int(const std::string& key, int fallback) const {
        const long long v = get_long(key, fallback);
        if (v < INT32_MIN || v > INT32_MAX) throw config_error(key, "integer out of range");
        return static_cast<int>(v);
    }

    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw config_error(key, "expected an unsigned integer, got '" + it->second + "'");
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw config_error(key, "expected a number, got '" + it->second + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw config_error(key, "expected true/false, got '" + it->second + "'");
    }

    const std::vector<std::string>& keys() const { return order_; }

    std::string to_text() const {
        std::string out;
        for (const std::string& k : order_) {
            out += k;
            out += '=';
            out += values_.at(k);
            out += '\n';
        }
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        const auto a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        const auto b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
};

}  // namespace maskvar
