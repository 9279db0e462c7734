#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "diffaug/nn.hpp"
#include "diffaug/schedule.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

// Architecture of the conditional noise-prediction network: a small
// encoder-decoder with one residual block per level, timestep embeddings at
// every block and cross-attention onto the condition token sequence at the
// two coarsest resolutions.
struct DenoiserConfig {
    int image_size = 64;    // latent/pixel side length fed to the net
    int in_channels = 3;
    int base_channels = 16;
    int cond_dim = 128;     // token embedding width (emb)
    int time_dim = 64;
    int norm_groups = 8;
    int num_categories = 8;  // category-name condition vocabulary
    int crop_slots = 9;      // M, condition rows are 1 + M by default
    bool use_null_condition = true;
    bool latent_pool2 = false;  // pipeline-level 2x pool/unpool pair

    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
};

class UNetDenoiser {
public:
    UNetDenoiser(const DenoiserConfig& cfg, uint64_t init_seed);

    // x [B,C,H,W]; tsteps one per sample in [1,T]; cond [B,S,emb]. An
    // undefined cond substitutes the learned null sequence for every sample.
    Tensor forward(Tape& tape, Tensor x, const std::vector<int>& tsteps, Tensor cond);

    // Convenience: plain float batch in, eps prediction out (no grad).
    std::vector<float> predict(const std::vector<float>& x, const Dims& dims,
                               const std::vector<int>& tsteps,
                               const std::vector<float>& cond, int cond_rows);

    const DenoiserConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    Param& null_token();      // [emb]
    Param& category_embed();  // [num_categories, emb]

    // Attention q/k/v/out projections in a stable order (for adapters).
    std::vector<LinearLayer*> attention_linears();

private:
    struct ResBlock {
        GroupNormLayer norm;
        ConvLayer conv;
        LinearLayer tproj;
    };
    struct AttnBlock {
        GroupNormLayer norm;
        LinearLayer q, k, v, o;
        bool cross = false;
    };

    Tensor res_forward(Tape& t, ResBlock& blk, Tensor x, Tensor temb);
    Tensor attn_forward(Tape& t, AttnBlock& blk, Tensor x, Tensor cond_n);

    DenoiserConfig cfg_;
    ParamStore params_;

    LinearLayer time_l1_, time_l2_;
    Param* cond_gain_ = nullptr;
    ConvLayer stem_;
    ConvLayer down1_, down2_, down3_;
    ResBlock enc1_, enc2_, mid1_, mid2_;
    AttnBlock enc2_attn_, mid_self_, mid_cross_;
    ConvLayer fuse2_, fuse1_, fuse0_;
    ResBlock dec2_, dec1_, dec0_;
    AttnBlock dec2_attn_;
    GroupNormLayer out_norm_;
    ConvLayer out_conv_;
};

// Denoiser + schedule bundle with checkpoint io.
struct DiffusionModel {
    DenoiserConfig arch;
    NoiseSchedule schedule;
    std::unique_ptr<UNetDenoiser> net;

    static DiffusionModel create(const DenoiserConfig& arch, const NoiseSchedule& sched,
                                 uint64_t init_seed);
    static DiffusionModel load(const std::string& path);
    void save(const std::string& path, const nlohmann::json& extra_meta) const;
    void save(const std::string& path) const;
};

}  // namespace diffaug
