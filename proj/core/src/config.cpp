#include "diffaug/config.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "diffaug/common.hpp"

using json = nlohmann::json;

namespace diffaug {

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("missing config file " + path);
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw ConfigError("config parse error in " + path + ": " + e.what());
    }
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
}

void apply_override(json& j, const std::string& spec) {
    size_t eq = spec.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("bad override '" + spec + "', want key.path=value");
    std::string path = spec.substr(0, eq);
    std::string value = spec.substr(eq + 1);

    json* node = &j;
    std::istringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) {
        if (part.empty()) throw ConfigError("bad override path '" + path + "'");
        parts.push_back(part);
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) node = &((*node)[parts[i]]);

    json parsed;
    try {
        parsed = json::parse(value);
    } catch (const json::exception&) {
        parsed = value;  // plain string
    }
    (*node)[parts.back()] = parsed;
}

void apply_overrides(json& j, const std::vector<std::string>& specs) {
    for (const auto& s : specs) apply_override(j, s);
}

}  // namespace diffaug
