#include "diffaug/lora.hpp"

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace diffaug {

json LoraConfig::to_json() const {
    return {{"rank", rank}, {"alpha", alpha}, {"targets", targets}};
}

LoraConfig LoraConfig::from_json(const json& j) {
    LoraConfig c;
    c.rank = j.at("rank").get<int>();
    c.alpha = j.at("alpha").get<double>();
    c.targets = j.at("targets").get<std::string>();
    return c;
}

namespace {

std::string layer_base_name(const LinearLayer& l) {
    const std::string& wn = l.w->name;  // "<layer>.w"
    return wn.substr(0, wn.size() - 2);
}

std::vector<LinearLayer*> select_targets(UNetDenoiser& net, const std::string& targets) {
    if (targets == "attention") return net.attention_linears();
    throw ConfigError("lora: unknown target selector '" + targets + "'");
}

}  // namespace

std::vector<std::string> wrap_model(UNetDenoiser& net, const LoraConfig& cfg,
                                    uint64_t init_seed) {
    if (cfg.rank < 1) throw ConfigError("lora: rank must be >= 1");
    std::vector<LinearLayer*> layers = select_targets(net, cfg.targets);
    for (LinearLayer* l : layers) {
        if (l->lora_down) throw ConfigError("lora: model already wrapped");
        if (cfg.rank > std::min(l->in_features(), l->out_features()))
            throw ConfigError("lora: rank " + std::to_string(cfg.rank) +
                              " exceeds layer dims of " + layer_base_name(*l));
    }
    Rng rng(init_seed, "lora_init");
    ParamStore& ps = net.params();
    std::vector<std::string> wrapped;
    for (LinearLayer* l : layers) {
        std::string base = layer_base_name(*l);
        Param& down = ps.create("lora." + base + ".down", {cfg.rank, l->in_features()});
        init_normal(down, rng, 0.02);
        Param& up = ps.create("lora." + base + ".up", {l->out_features(), cfg.rank});
        init_zero(up);
        l->lora_down = &down;
        l->lora_up = &up;
        l->lora_scale = static_cast<float>(cfg.scale());
        wrapped.push_back(base);
    }
    // only adapters train from here on
    for (Param* p : ps.all()) p->trainable = p->name.rfind("lora.", 0) == 0;
    return wrapped;
}

std::string base_param_hash(const UNetDenoiser& net) {
    return net.params().content_hash("lora.");
}

void merge_lora(UNetDenoiser& net) {
    ParamStore& ps = net.params();
    std::vector<std::string> to_erase;
    for (LinearLayer* l : net.attention_linears()) {
        if (!l->lora_down) continue;
        int out = l->out_features(), in = l->in_features();
        int r = l->lora_down->shape[0];
        const std::vector<float>& down = l->lora_down->value;  // [r, in]
        const std::vector<float>& up = l->lora_up->value;      // [out, r]
        std::vector<float>& w = l->w->value;                   // [out, in]
        for (int o = 0; o < out; ++o)
            for (int i = 0; i < in; ++i) {
                double acc = 0.0;
                for (int k = 0; k < r; ++k)
                    acc += static_cast<double>(up[static_cast<size_t>(o) * r + k]) *
                           down[static_cast<size_t>(k) * in + i];
                w[static_cast<size_t>(o) * in + i] +=
                    static_cast<float>(l->lora_scale * acc);
            }
        to_erase.push_back(l->lora_down->name);
        to_erase.push_back(l->lora_up->name);
        l->lora_down = nullptr;
        l->lora_up = nullptr;
        l->lora_scale = 0.0f;
    }
    for (const std::string& name : to_erase) ps.erase(name);
}

void save_adapters(UNetDenoiser& net, const LoraConfig& cfg, const std::string& path,
                   const json& extra_meta) {
    ParamStore adapters;
    bool any = false;
    for (Param* p : net.params().matching("lora.")) {
        if (p->name.rfind("lora.", 0) != 0) continue;
        Param& cp = adapters.create(p->name, p->shape);
        cp.value = p->value;
        any = true;
    }
    if (!any) throw std::logic_error("save_adapters: model has no adapters");
    json meta;
    meta["kind"] = "lora_adapter";
    meta["lora"] = cfg.to_json();
    meta["base_hash"] = base_param_hash(net);
    meta["extra"] = extra_meta;
    save_checkpoint(path, adapters, meta);
}

LoraConfig load_adapters(UNetDenoiser& net, const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.meta().at("kind").get<std::string>() != "lora_adapter")
        throw std::runtime_error("not an adapter checkpoint: " + path);
    LoraConfig cfg = LoraConfig::from_json(ckpt.meta().at("lora"));
    std::string expect = ckpt.meta().at("base_hash").get<std::string>();
    std::string have = base_param_hash(net);
    if (expect != have)
        throw std::runtime_error("adapter checkpoint does not match base model (hash " +
                                 expect + " vs " + have + ")");
    wrap_model(net, cfg, 0);
    for (const auto& [name, entry] : ckpt.arrays) {
        Param* p = net.params().find(name);
        if (!p) throw std::runtime_error("load_adapters: unexpected param " + name);
        if (p->shape != entry.first)
            throw std::runtime_error("load_adapters: shape mismatch for " + name);
        p->value = entry.second;
    }
    return cfg;
}

}  // namespace diffaug
