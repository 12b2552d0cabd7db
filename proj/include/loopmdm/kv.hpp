#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loopmdm/common.hpp"

namespace loopmdm {

// Flat ordered key=value text block: one "key=value" per line, keys unique,
// insertion-ordered, reals printed with round-trip precision.
class KvMap {
public:
    void set(const std::string& key, const std::string& value);
    void set_i64(const std::string& key, int64_t v);
    void set_u64(const std::string& key, uint64_t v);
    void set_real(const std::string& key, real v);

    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const;  // ConfigError if missing
    int64_t get_i64(const std::string& key) const;
    uint64_t get_u64(const std::string& key) const;
    real get_real(const std::string& key) const;

    std::string get_or(const std::string& key, const std::string& fallback) const;

    std::string serialize() const;
    static KvMap parse(const std::string& text);

    const std::vector<std::pair<std::string, std::string>>& entries() const { return items_; }

private:
    std::vector<std::pair<std::string, std::string>> items_;
    std::string* find(const std::string& key);
    const std::string* find(const std::string& key) const;
};

}  // namespace loopmdm
