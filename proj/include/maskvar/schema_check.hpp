#pragma once

// Structural validator for the subset of JSON Schema the shipped schema
// files use: "type" (string or list), "properties", "required", "items",
// "enum", "additionalProperties": false. Returns a list of violations as
// human-readable paths.

#include <json.hpp>

#include <string>
#include <vector>

namespace maskvar {

namespace detail {

inline bool json_matches_type(const nlohmann::json& value, const std::string& type) {
    if (type == "object") return value.is_object();
    if (type == "array") return value.is_array();
    if (type == "string") return value.is_string();
    if (type == "number") return value.is_number();
    if (type == "integer") return value.is_number_integer();
    if (type == "boolean") return value.is_boolean();
    if (type == "null") return value.is_null();
    return false;
}

inline void schema_check_impl(const nlohmann::json& value, const nlohmann::json& schema, const std::string& path,
                              std::vector<std::string>& errors) {
    if (schema.contains("type")) {
        const auto& ty = schema["type"];
        bool ok = false;
        if (ty.is_string()) {
            ok = json_matches_type(value, ty.get<std::string>());
        } else if (ty.is_array()) {
            for (const auto& t : ty) ok = ok || json_matches_type(value, t.get<std::string>());
        }
        if (!ok) {
            errors.push_back(path + ": type mismatch (expected " + ty.dump() + ")");
            return;
        }
    }
    if (schema.contains("enum")) {
        bool ok = false;
        for (const auto& e : schema["enum"]) ok = ok || e == value;
        if (!ok) errors.push_back(path + ": value " + value.dump() + " not in enum " + schema["enum"].dump());
    }
    if (value.is_object()) {
        if (schema.contains("required"))
            for (const auto& key : schema["required"])
                if (!value.contains(key.get<std::string>()))
                    errors.push_back(path + ": missing required field '" + key.get<std::string>() + "'");
        const bool closed = schema.contains("additionalProperties") && schema["additionalProperties"].is_boolean() &&
                            !schema["additionalProperties"].get<bool>();
        for (auto it = value.begin(); it != value.end(); ++it) {
            const std::string child = path + "/" + it.key();
            if (schema.contains("properties") && schema["properties"].contains(it.key()))
                schema_check_impl(it.value(), schema["properties"][it.key()], child, errors);
            else if (closed)
                errors.push_back(child + ": unexpected field");
        }
    }
    if (value.is_array() && schema.contains("items"))
        for (std::size_t i = 0; i < value.size(); ++i)
            schema_check_impl(value[i], schema["items"], path + "[" + std::to_string(i) + "]", errors);
}

}  // namespace detail

inline std::vector<std::string> schema_violations(const nlohmann::json& value, const nlohmann::json& schema) {
    std::vector<std::string> errors;
    detail::schema_check_impl(value, schema, "$", errors);
    return errors;
}

inline bool matches_schema(const nlohmann::json& value, const nlohmann::json& schema) {
    return schema_violations(value, schema).empty();
}

}  // namespace maskvar
