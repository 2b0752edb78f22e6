#pragma once

#include <initializer_list>
#include <string>

#include "json.hpp"

#include "relulab/model.hpp"

namespace relulab {

using Json = nlohmann::json;

// Missing keys keep their defaults; unknown keys are rejected.
void to_json(Json& j, const AttentionConfig& cfg);
void from_json(const Json& j, AttentionConfig& cfg);
void to_json(Json& j, const RegConfig& cfg);
void from_json(const Json& j, RegConfig& cfg);
void to_json(Json& j, const ModelConfig& cfg);
void from_json(const Json& j, ModelConfig& cfg);

/// Throws ContractViolation naming the first key of `j` not in `allowed`.
void require_known_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

/// Reads j[key] into `out` when present; type errors become ContractViolation.
template <class T>
void read_key(const Json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("config key '") + key + "': " + e.what());
    }
}

}  // namespace relulab
