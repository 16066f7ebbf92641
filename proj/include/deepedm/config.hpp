#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace deepedm {

/// Invalid or inconsistent configuration. The CLI maps this to exit code 2.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

/// Reject keys outside `allowed` so typos surface instead of silently using defaults.
inline void check_keys(const nlohmann::json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) {
        throw ConfigError(std::string(where) + ": expected a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) {
            throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
        }
    }
}

template <typename T>
void read_key(const nlohmann::json& j, std::string_view where, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string(where) + "." + key + ": " + e.what());
    }
}

}  // namespace detail

}  // namespace deepedm
