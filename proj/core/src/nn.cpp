#include "diffaug/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace diffaug {

// ---- ParamStore ----

Param& ParamStore::create(const std::string& name, const Dims& shape) {
    if (params_.count(name)) throw std::logic_error("param exists: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->shape = shape;
    p->value.assign(static_cast<size_t>(dims_numel(shape)), 0.0f);
    p->grad.assign(p->value.size(), 0.0f);
    Param& ref = *p;
    params_[name] = std::move(p);
    return ref;
}

Param& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no param: " + name);
    return *it->second;
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no param: " + name);
    return *it->second;
}

Param* ParamStore::find(const std::string& name) {
    auto it = params_.find(name);
    return it == params_.end() ? nullptr : it->second.get();
}

bool ParamStore::erase(const std::string& name) { return params_.erase(name) > 0; }

std::vector<Param*> ParamStore::all() {
    std::vector<Param*> out;
    for (auto& [k, v] : params_) out.push_back(v.get());
    return out;
}

std::vector<const Param*> ParamStore::all() const {
    std::vector<const Param*> out;
    for (auto& [k, v] : params_) out.push_back(v.get());
    return out;
}

std::vector<Param*> ParamStore::trainable() {
    std::vector<Param*> out;
    for (auto& [k, v] : params_)
        if (v->trainable) out.push_back(v.get());
    return out;
}

std::vector<Param*> ParamStore::matching(const std::string& substr) {
    std::vector<Param*> out;
    for (auto& [k, v] : params_)
        if (k.find(substr) != std::string::npos) out.push_back(v.get());
    return out;
}

void ParamStore::zero_grads() {
    for (auto& [k, v] : params_) v->zero_grad();
}

void ParamStore::set_trainable_all(bool trainable) {
    for (auto& [k, v] : params_) v->trainable = trainable;
}

int64_t ParamStore::total_size() const {
    int64_t n = 0;
    for (auto& [k, v] : params_) n += v->size();
    return n;
}

std::string ParamStore::content_hash(const std::string& exclude) const {
    Hasher h;
    for (auto& [k, v] : params_) {
        if (!exclude.empty() && k.find(exclude) != std::string::npos) continue;
        h.update(k);
        h.update(v->value.data(), v->value.size() * sizeof(float));
    }
    return h.hex();
}

// ---- initializers ----

void init_normal(Param& p, Rng& rng, double stddev) {
    for (auto& v : p.value) v = static_cast<float>(rng.normal() * stddev);
}

void init_kaiming_conv(Param& p, Rng& rng) {
    int fan_in = p.shape[1] * p.shape[2] * p.shape[3];
    init_normal(p, rng, std::sqrt(2.0 / fan_in));
}

void init_xavier_linear(Param& p, Rng& rng) {
    double bound = std::sqrt(6.0 / (p.shape[0] + p.shape[1]));
    for (auto& v : p.value) v = static_cast<float>(rng.uniform(-bound, bound));
}

void init_zero(Param& p) { std::fill(p.value.begin(), p.value.end(), 0.0f); }

// ---- layers ----

Tensor LinearLayer::forward(Tape& t, Tensor x) const {
    Tensor W = t.param(*w);
    Tensor B = b ? t.param(*b) : Tensor();
    Tensor y = linear(x, W, B);
    if (lora_down && lora_up) {
        Tensor A = t.param(*lora_down);
        Tensor Bu = t.param(*lora_up);
        Tensor mid = linear(x, A, Tensor());
        Tensor delta = linear(mid, Bu, Tensor());
        y = axpby(1.0f, y, lora_scale, delta);
    }
    return y;
}

LinearLayer make_linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                        bool bias) {
    LinearLayer l;
    l.w = &ps.create(name + ".w", {out, in});
    init_xavier_linear(*l.w, rng);
    if (bias) l.b = &ps.create(name + ".b", {out});
    return l;
}

Tensor ConvLayer::forward(Tape& t, Tensor x) const {
    Tensor W = t.param(*w);
    Tensor B = b ? t.param(*b) : Tensor();
    return conv2d(x, W, B, stride, pad);
}

ConvLayer make_conv(ParamStore& ps, const std::string& name, int in_ch, int out_ch,
                    int ksize, int stride, int pad, Rng& rng, bool zero_init) {
    ConvLayer c;
    c.w = &ps.create(name + ".w", {out_ch, in_ch, ksize, ksize});
    c.b = &ps.create(name + ".b", {out_ch});
    c.stride = stride;
    c.pad = pad;
    if (zero_init)
        init_zero(*c.w);
    else
        init_kaiming_conv(*c.w, rng);
    return c;
}

Tensor GroupNormLayer::forward(Tape& t, Tensor x) const {
    return group_norm(x, groups, t.param(*gamma), t.param(*beta));
}

GroupNormLayer make_group_norm(ParamStore& ps, const std::string& name, int channels,
                               int groups) {
    GroupNormLayer g;
    g.gamma = &ps.create(name + ".g", {channels});
    std::fill(g.gamma->value.begin(), g.gamma->value.end(), 1.0f);
    g.beta = &ps.create(name + ".b", {channels});
    g.groups = groups;
    return g;
}

std::vector<float> timestep_features(const std::vector<int>& tsteps, int dim) {
    int half = dim / 2;
    std::vector<float> out(tsteps.size() * dim);
    for (size_t b = 0; b < tsteps.size(); ++b) {
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
            double ang = tsteps[b] * freq;
            out[b * dim + i] = static_cast<float>(std::sin(ang));
            out[b * dim + half + i] = static_cast<float>(std::cos(ang));
        }
    }
    return out;
}

// ---- checkpoint archive ----

namespace {
constexpr char kMagic[8] = {'D', 'A', 'U', 'G', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
}  // namespace

Checkpoint::Checkpoint() : meta_owned(new json(json::object())) {}
Checkpoint::~Checkpoint() { delete meta_owned; }
Checkpoint::Checkpoint(Checkpoint&& o) noexcept
    : meta_owned(o.meta_owned), arrays(std::move(o.arrays)) {
    o.meta_owned = nullptr;
}
Checkpoint& Checkpoint::operator=(Checkpoint&& o) noexcept {
    if (this != &o) {
        delete meta_owned;
        meta_owned = o.meta_owned;
        o.meta_owned = nullptr;
        arrays = std::move(o.arrays);
    }
    return *this;
}
json& Checkpoint::meta() { return *meta_owned; }
const json& Checkpoint::meta() const { return *meta_owned; }

void save_checkpoint(const std::string& path, const ParamStore& store, const json& meta) {
    json header;
    header["format_version"] = kVersion;
    header["meta"] = meta;
    json arr = json::array();
    uint64_t offset = 0;
    for (const Param* p : store.all()) {
        arr.push_back({{"name", p->name},
                       {"shape", p->shape},
                       {"offset", offset},
                       {"numel", p->size()}});
        offset += static_cast<uint64_t>(p->size());
    }
    header["params"] = arr;
    header["param_hash"] = store.content_hash();
    std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
    out.write(kMagic, 8);
    uint32_t ver = kVersion;
    out.write(reinterpret_cast<const char*>(&ver), 4);
    uint64_t hlen = htext.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const Param* p : store.all())
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("load_checkpoint: missing file " + path);
    char magic[8];
    in.read(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    uint32_t ver = 0;
    in.read(reinterpret_cast<char*>(&ver), 4);
    if (ver != kVersion)
        throw std::runtime_error("load_checkpoint: unsupported version " +
                                 std::to_string(ver));
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(htext);

    Checkpoint ckpt;
    ckpt.meta() = header.at("meta");
    for (const auto& e : header.at("params")) {
        std::string name = e.at("name").get<std::string>();
        Dims shape = e.at("shape").get<Dims>();
        int64_t numel = e.at("numel").get<int64_t>();
        std::vector<float> vals(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(vals.data()),
                static_cast<std::streamsize>(vals.size() * sizeof(float)));
        ckpt.arrays[name] = {shape, std::move(vals)};
    }
    if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return ckpt;
}

void load_arrays_into(const Checkpoint& ckpt, ParamStore& store) {
    for (const auto& [name, entry] : ckpt.arrays) {
        Param* p = store.find(name);
        if (!p) throw std::runtime_error("load_arrays_into: unexpected param " + name);
        if (p->shape != entry.first)
            throw std::runtime_error("load_arrays_into: shape mismatch for " + name);
        p->value = entry.second;
    }
    for (Param* p : store.all())
        if (!ckpt.arrays.count(p->name))
            throw std::runtime_error("load_arrays_into: checkpoint missing " + p->name);
}

// ---- optimizer ----

AdamW::AdamW(std::vector<Param*> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(params_[i]->value.size(), 0.0f);
        v_[i].assign(params_[i]->value.size(), 0.0f);
    }
}

double global_grad_norm(const std::vector<Param*>& params) {
    double ss = 0.0;
    for (const Param* p : params)
        for (float g : p->grad) ss += static_cast<double>(g) * g;
    return std::sqrt(ss);
}

double AdamW::step(double clip) {
    double norm = global_grad_norm(params_);
    if (clip > 0.0 && norm > clip) {
        float s = static_cast<float>(clip / norm);
        for (Param* p : params_)
            for (float& g : p->grad) g *= s;
        norm = global_grad_norm(params_);
    }
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Param* p = params_[i];
        float* m = m_[i].data();
        float* v = v_[i].data();
        for (size_t j = 0; j < p->value.size(); ++j) {
            float g = p->grad[j];
            m[j] = static_cast<float>(cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g);
            v[j] = static_cast<float>(cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g);
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            double upd = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p->value[j];
            p->value[j] -= static_cast<float>(cfg_.lr * upd);
        }
    }
    return norm;
}

void AdamW::zero_grads() {
    for (Param* p : params_) p->zero_grad();
}

}  // namespace diffaug
