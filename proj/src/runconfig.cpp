#include "loopmdm/kv.hpp"

#include <cerrno>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace loopmdm {

std::string* KvMap::find(const std::string& key) {
    for (auto& [k, v] : items_)
        if (k == key) return &v;
    return nullptr;
}

const std::string* KvMap::find(const std::string& key) const {
    for (auto& [k, v] : items_)
        if (k == key) return &v;
    return nullptr;
}

void KvMap::set(const std::string& key, const std::string& value) {
    if (key.empty() || key.find('=') != std::string::npos || key.find('\n') != std::string::npos)
        throw ConfigError("config key '" + key + "' is not a plain identifier");
    if (value.find('\n') != std::string::npos)
        throw ConfigError("config value for '" + key + "' contains a newline");
    if (std::string* v = find(key)) {
        *v = value;
        return;
    }
    items_.emplace_back(key, value);
}

void KvMap::set_i64(const std::string& key, int64_t v) { set(key, std::to_string(v)); }
void KvMap::set_u64(const std::string& key, uint64_t v) { set(key, std::to_string(v)); }

void KvMap::set_real(const std::string& key, real v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(v));
    set(key, buf);
}

bool KvMap::has(const std::string& key) const { return find(key) != nullptr; }

const std::string& KvMap::get(const std::string& key) const {
    const std::string* v = find(key);
    if (v == nullptr) throw ConfigError("missing config key '" + key + "'");
    return *v;
}

std::string KvMap::get_or(const std::string& key, const std::string& fallback) const {
    const std::string* v = find(key);
    return v != nullptr ? *v : fallback;
}

int64_t KvMap::get_i64(const std::string& key) const {
    const std::string& s = get(key);
    errno = 0;
    char* end = nullptr;
    long long v = std::strtoll(s.c_str(), &end, 10);
    if (errno != 0 || end == s.c_str() || *end != '\0')
        throw ConfigError("config key '" + key + "': '" + s + "' is not an integer");
    return v;
}

uint64_t KvMap::get_u64(const std::string& key) const {
    const std::string& s = get(key);
    errno = 0;
    char* end = nullptr;
    unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (errno != 0 || end == s.c_str() || *end != '\0' || s[0] == '-')
        throw ConfigError("config key '" + key + "': '" + s + "' is not a nonnegative integer");
    return v;
}

real KvMap::get_real(const std::string& key) const {
    const std::string& s = get(key);
    errno = 0;
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (errno != 0 || end == s.c_str() || *end != '\0')
        throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
    return static_cast<real>(v);
}

std::string KvMap::serialize() const {
    std::string out;
    for (const auto& [k, v] : items_) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

KvMap KvMap::parse(const std::string& text) {
    KvMap kv;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        ++line_no;
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::size_t a = line.find_first_not_of(" \t");
        if (a == std::string::npos) continue;
        std::size_t b = line.find_last_not_of(" \t");
        line = line.substr(a, b - a + 1);
        if (line.empty() || line[0] == '#') continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                              line + "'");
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        std::size_t vs = val.find_first_not_of(" \t");
        val = vs == std::string::npos ? "" : val.substr(vs);
        if (kv.has(key)) throw ConfigError("duplicate config key '" + key + "'");
        kv.set(key, val);
    }
    return kv;
}

}  // namespace loopmdm
