#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace msgr {

// Line-oriented configuration: `key = value`, one per line, `#` comments,
// blank lines ignored. Values are plain tokens; whitespace around key and
// value is trimmed.
class Config {
public:
    static Config from_string(const std::string& text, const std::string& origin = "<string>") {
        Config c;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            std::string t = trim(line);
            if (t.empty()) continue;
            auto eq = t.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
            std::string key = trim(t.substr(0, eq));
            std::string val = trim(t.substr(eq + 1));
            if (key.empty())
                throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
            c.values_[key] = val;
        }
        return c;
    }

    static Config from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot read config " + path);
        std::ostringstream buf;
        buf << f.rdbuf();
        return from_string(buf.str(), path);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_double(key, it->second);
    }

    int get_int(const std::string& key, int fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        return parse_int(key, it->second);
    }

    bool get_bool(const std::string& key, bool fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw std::runtime_error("config key '" + key + "': not a boolean: '" + v + "'");
    }

    // Comma-separated integer list, e.g. "16,32,64,128".
    std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        std::vector<int> out;
        std::istringstream is(it->second);
        std::string tok;
        while (std::getline(is, tok, ',')) out.push_back(parse_int(key, trim(tok)));
        if (out.empty()) throw std::runtime_error("config key '" + key + "': empty list");
        return out;
    }

    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;

    static std::string trim(const std::string& s) {
        auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static double parse_double(const std::string& key, const std::string& v) {
        std::size_t pos = 0;
        double r;
        try {
            r = std::stod(v, &pos);
        } catch (const std::exception&) {
            throw std::runtime_error("config key '" + key + "': not a number: '" + v + "'");
        }
        if (pos != v.size()) throw std::runtime_error("config key '" + key + "': trailing characters in '" + v + "'");
        return r;
    }

    static int parse_int(const std::string& key, const std::string& v) {
        std::size_t pos = 0;
        long r;
        try {
            r = std::stol(v, &pos);
        } catch (const std::exception&) {
            throw std::runtime_error("config key '" + key + "': not an integer: '" + v + "'");
        }
        if (pos != v.size()) throw std::runtime_error("config key '" + key + "': trailing characters in '" + v + "'");
        return static_cast<int>(r);
    }
};

} // namespace msgr
