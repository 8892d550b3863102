#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include "json.hpp"
#include "volsynth/error.hpp"

namespace volsynth {

// Config blocks are strict: any key outside `allowed` is an error.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                                const std::string& where) {
    if (!j.is_object()) throw ContractError(where + ": expected a JSON object");
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw ContractError(where + ": unknown field '" + key + "'");
    }
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(where + ": field '" + key + "' has the wrong type (" + e.what() + ")");
    }
}

}  // namespace volsynth
