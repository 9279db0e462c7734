#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace diffaug {

// Reads a JSON config file; parse failures raise ConfigError.
nlohmann::json load_json_file(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& j);

// Applies "a.b.c=value" onto a JSON tree; values parse as JSON when possible
// (numbers, bools) and fall back to strings.
void apply_override(nlohmann::json& j, const std::string& spec);
void apply_overrides(nlohmann::json& j, const std::vector<std::string>& specs);

}  // namespace diffaug
