#pragma once

#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "flexdoc/error.hpp"

namespace flexdoc {

/// Strict reader for one object level of a config tree. Every key must be
/// consumed; finish() throws a ConfigError listing each offending key path.
class KeyReader {
public:
    KeyReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_null() && !j_.is_object()) errors_.push_back(path_ + ": expected an object");
    }

    bool has(const std::string& key) const { return j_.is_object() && j_.contains(key); }

    std::string path_of(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    template <class V>
    void read(const std::string& key, V& out) {
        if (!has(key)) return;
        seen_.insert(key);
        const auto& v = j_.at(key);
        const auto where = path_of(key);
        if constexpr (std::is_same_v<V, bool>) {
            if (!v.is_boolean()) return fail(where + ": expected boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_integral_v<V> && std::is_unsigned_v<V>) {
            if (!v.is_number_integer() || v.get<long long>() < 0) return fail(where + ": expected non-negative integer");
            out = v.get<V>();
        } else if constexpr (std::is_integral_v<V>) {
            if (!v.is_number_integer()) return fail(where + ": expected integer");
            out = v.get<V>();
        } else if constexpr (std::is_floating_point_v<V>) {
            if (!v.is_number()) return fail(where + ": expected number");
            out = v.get<V>();
        } else if constexpr (std::is_same_v<V, std::string>) {
            if (!v.is_string()) return fail(where + ": expected string");
            out = v.get<std::string>();
        } else if constexpr (std::is_same_v<V, std::vector<std::string>>) {
            if (!v.is_array()) return fail(where + ": expected array of strings");
            out.clear();
            for (const auto& x : v) {
                if (!x.is_string()) return fail(where + ": expected array of strings");
                out.push_back(x.get<std::string>());
            }
        } else {
            static_assert(sizeof(V) == 0, "unsupported config value type");
        }
    }

    /// Marks `key` as consumed and returns the sub-object (null when absent).
    const nlohmann::json& child(const std::string& key) {
        static const nlohmann::json null_json;
        if (!has(key)) return null_json;
        seen_.insert(key);
        return j_.at(key);
    }

    void fail(std::string message) { errors_.push_back(std::move(message)); }

    /// Collects unknown keys and throws if anything went wrong.
    void finish() const {
        auto errors = errors_;
        if (j_.is_object()) {
            for (const auto& [key, value] : j_.items()) {
                if (!seen_.contains(key)) errors.push_back(path_of(key) + ": unknown key");
            }
        }
        if (errors.empty()) return;
        std::string msg = "invalid configuration:";
        for (const auto& e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
    std::vector<std::string> errors_;
};

}  // namespace flexdoc
