#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "diffaug/common.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

// Owns named parameters in name order. Names are hierarchical
// ("unet.mid.attn.q.w"); ordering makes hashing and serialization stable.
class ParamStore {
public:
    Param& create(const std::string& name, const Dims& shape);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    Param* find(const std::string& name);
    bool erase(const std::string& name);

    std::vector<Param*> all();                     // name order
    std::vector<const Param*> all() const;
    std::vector<Param*> trainable();
    std::vector<Param*> matching(const std::string& substr);
    void zero_grads();
    void set_trainable_all(bool trainable);

    int64_t total_size() const;
    // FNV hash over values of params whose name does NOT contain `exclude`
    // (empty = hash everything).
    std::string content_hash(const std::string& exclude = "") const;

private:
    std::map<std::string, std::unique_ptr<Param>> params_;
};

// ---- initializers ----
void init_normal(Param& p, Rng& rng, double stddev);
void init_kaiming_conv(Param& p, Rng& rng);   // fan_in from [O,C,KH,KW]
void init_xavier_linear(Param& p, Rng& rng);  // fan from [out,in]
void init_zero(Param& p);

// ---- layers (non-owning views over ParamStore entries) ----

struct LinearLayer {
    Param* w = nullptr;
    Param* b = nullptr;
    // Low-rank adapter; forward adds scale * (x A^T) B^T when attached.
    Param* lora_down = nullptr;  // [rank, in]
    Param* lora_up = nullptr;    // [out, rank]
    float lora_scale = 0.0f;

    int in_features() const { return w->shape[1]; }
    int out_features() const { return w->shape[0]; }
    Tensor forward(Tape& t, Tensor x) const;
};

LinearLayer make_linear(ParamStore& ps, const std::string& name, int in, int out,
                        Rng& rng, bool bias = true);

struct ConvLayer {
    Param* w = nullptr;
    Param* b = nullptr;
    int stride = 1;
    int pad = 1;
    Tensor forward(Tape& t, Tensor x) const;
};

ConvLayer make_conv(ParamStore& ps, const std::string& name, int in_ch, int out_ch,
                    int ksize, int stride, int pad, Rng& rng, bool zero_init = false);

struct GroupNormLayer {
    Param* gamma = nullptr;
    Param* beta = nullptr;
    int groups = 8;
    Tensor forward(Tape& t, Tensor x) const;
};

GroupNormLayer make_group_norm(ParamStore& ps, const std::string& name, int channels,
                               int groups);

// Sinusoidal features for integer timesteps, [B, dim], dim even.
std::vector<float> timestep_features(const std::vector<int>& tsteps, int dim);

// ---- checkpoint archive ----
// Single binary file: magic, version, JSON header (meta + array table), raw
// float32 payload. `meta` carries the architecture and schedule configs.

struct Checkpoint {
    nlohmann::json* meta_owned;  // opaque holder, see cpp
    Checkpoint();
    ~Checkpoint();
    Checkpoint(Checkpoint&&) noexcept;
    Checkpoint& operator=(Checkpoint&&) noexcept;
    Checkpoint(const Checkpoint&) = delete;

    nlohmann::json& meta();
    const nlohmann::json& meta() const;
    std::map<std::string, std::pair<Dims, std::vector<float>>> arrays;
};

void save_checkpoint(const std::string& path, const ParamStore& store,
                     const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::string& path);
// Copies array values into matching params; missing or shape-mismatched names throw.
void load_arrays_into(const Checkpoint& ckpt, ParamStore& store);

// ---- optimizer ----

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class AdamW {
public:
    AdamW(std::vector<Param*> params, AdamWConfig cfg);
    // Clips the global grad norm to `clip` (<=0 disables), then steps.
    // Returns the post-clip global gradient norm.
    double step(double clip = -1.0);
    void zero_grads();
    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }
    int64_t step_count() const { return t_; }

private:
    std::vector<Param*> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<float>> m_, v_;
    int64_t t_ = 0;
};

double global_grad_norm(const std::vector<Param*>& params);

}  // namespace diffaug
