#pragma once

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "diffaug/unet.hpp"

namespace diffaug {

struct LoraConfig {
    int rank = 8;
    double alpha = 8.0;                 // effective scale = alpha / rank
    std::string targets = "attention";  // q/k/v/out projections

    double scale() const { return alpha / rank; }
    nlohmann::json to_json() const;
    static LoraConfig from_json(const nlohmann::json& j);
};

// Wraps the selected projections: base weights become frozen, zero-initialized
// up factors keep the initial forward bit-identical to the unwrapped model.
// Returns the wrapped layer names.
std::vector<std::string> wrap_model(UNetDenoiser& net, const LoraConfig& cfg,
                                    uint64_t init_seed);

// Hash over everything except adapter params (the freeze invariant).
std::string base_param_hash(const UNetDenoiser& net);

// Folds every adapter into its base weight (W += scale * up * down) and
// removes the adapter params.
void merge_lora(UNetDenoiser& net);

// Adapter-only checkpoint, loadable onto a matching base model.
void save_adapters(UNetDenoiser& net, const LoraConfig& cfg, const std::string& path,
                   const nlohmann::json& extra_meta);
LoraConfig load_adapters(UNetDenoiser& net, const std::string& path);

}  // namespace diffaug
