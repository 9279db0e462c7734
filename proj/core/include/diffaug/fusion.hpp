#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "diffaug/diffusion.hpp"
#include "diffaug/image.hpp"
#include "diffaug/nn.hpp"
#include "diffaug/scene.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

// Instance crops resized to the encoder's crop input. After packing, exactly
// M slots; zero-padded slots hold all-zero crops and validity false.
struct CropSet {
    std::vector<Image> crops;
    std::vector<Box> source_boxes;  // expanded + clamped source regions
    std::vector<bool> validity;

    size_t size() const { return crops.size(); }
};

// Expands each box outward by `pad` pixels, clamps to image bounds, then
// resizes to crop_size x crop_size bilinearly. Throws on an empty box list.
CropSet crop_instances(const Image& image, const std::vector<Box>& boxes, int pad,
                       int crop_size = 32);

// Pads with zero crops up to M, or picks M uniformly without replacement.
CropSet pack_crops(const CropSet& crops, int m, Rng& rng);

struct EncoderConfig {
    int emb = 128;
    int image_size = 64;
    int crop_size = 32;
    int base_channels = 32;  // block widths: base, 2*base, 4*base, 4*base
    int norm_groups = 8;
    int num_categories = 8;

    nlohmann::json to_json() const;
    static EncoderConfig from_json(const nlohmann::json& j);
};

// Patch encoder with an attention-pooled summary token and a multi-label
// category head used only for pretraining.
class SceneEncoder {
public:
    SceneEncoder(const EncoderConfig& cfg, uint64_t init_seed);

    struct Features {
        std::vector<Tensor> blocks;  // four feature maps [B,C,h,w]
        Tensor tokens;               // [B, hw, emb]
        Tensor summary;              // [B, emb]
    };
    Features forward(Tape& tape, Tensor x);  // x [B,3,S,S], S divisible by 8
    Tensor classify(Tape& tape, Tensor summary);

    // no-grad helpers
    std::vector<float> summary_of(const Image& img);
    std::vector<std::vector<float>> summaries_of(const std::vector<Image>& imgs);
    // per-block feature maps with shapes, for the perceptual distance metric
    std::vector<std::pair<Dims, std::vector<float>>> block_features(const Image& img);

    const EncoderConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }

private:
    EncoderConfig cfg_;
    ParamStore params_;
    ConvLayer b1_, b2_, b3_, b4_;
    GroupNormLayer n1_, n2_, n3_, n4_;
    Param* pool_query_ = nullptr;  // [emb]
    LinearLayer summary_proj_;
    LinearLayer cls_head_;
};

struct EncoderModel {
    EncoderConfig cfg;
    std::unique_ptr<SceneEncoder> net;
    std::string param_hash;

    static EncoderModel create(const EncoderConfig& cfg, uint64_t seed);
    static EncoderModel load(const std::string& path);
    // Writes the archive plus a JSON sidecar (<path>.json) with the parameter
    // hash and pretraining metrics.
    void save(const std::string& path, const nlohmann::json& metrics) const;
    void refresh_hash();
};

// slot 0 = summary of the full image; slots 1..M = crop summaries; padded
// slots stay exactly zero (the encoder never sees them). With
// include_global_patches the image's patch tokens are inserted between the
// global summary and the crop slots.
TokenSeq encode_condition(const Image& image, const CropSet& packed, SceneEncoder& enc,
                          bool include_global_patches = false);

struct EncoderPretrainConfig {
    int max_steps = 1500;
    int batch_size = 16;
    double lr = 2e-3;
    double accuracy_bar = 0.9;  // mean per-category validation accuracy
    double val_fraction = 0.125;
    int eval_every = 100;
    uint64_t seed = 42;
};

// Trains the multi-label head on scene category sets and freezes the result.
// Throws "encoder underfit" if the accuracy bar is not reached in budget.
EncoderModel pretrain_encoder(const std::vector<Scene>& scenes,
                              const std::vector<Category>& categories,
                              const EncoderConfig& cfg,
                              const EncoderPretrainConfig& train,
                              nlohmann::json* metrics_out = nullptr);

}  // namespace diffaug
