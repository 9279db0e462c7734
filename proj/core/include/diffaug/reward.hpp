#pragma once

#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "diffaug/image.hpp"
#include "diffaug/nn.hpp"
#include "diffaug/scene.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

// Per-token sigmoid confidences over the detector's flattened grid cells.
struct DetectorLogits {
    int tokens = 0;
    int candidates = 0;          // grid * grid
    std::vector<float> scores;   // [tokens][candidates], values in [0,1]

    float at(int t, int c) const { return scores[static_cast<size_t>(t) * candidates + c]; }
};

struct CountingLossConfig {
    double tau = 0.1;          // confidence threshold
    int64_t gamma = 1000;      // warm-up steps before the loss activates
    double lambda_weight = 0.5;
    bool enabled = true;       // disabled skips the whole branch
    // Shortfall policy: when a category has fewer candidates than its count,
    // scores are zero-padded so each missing candidate costs tau.
};

struct DetectorConfig {
    int image_size = 64;
    int grid = 8;  // G; candidates = G*G
    int base_channels = 24;
    int norm_groups = 8;
    std::vector<std::string> vocabulary;  // category names, id order

    nlohmann::json to_json() const;
    static DetectorConfig from_json(const nlohmann::json& j);
};

// Grid detector: conv stack to a G x G cell map with one logit row per
// vocabulary phrase. Differentiable wrt the input image; the counting head
// (threshold + 3x3 local-maximum suppression) is evaluation-only.
class GridDetector {
public:
    GridDetector(const DetectorConfig& cfg, uint64_t init_seed);

    Tensor forward_logits(Tape& tape, Tensor x);  // [B, K, G, G]

    // Sigmoid confidences for each prompt token, mapped token -> category row.
    // Differentiable wrt `image` on the same tape.
    Tensor token_scores_node(Tape& tape, Tensor image, const PromptSpec& prompt);

    const DetectorConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    int category_row(const std::string& name) const;  // throws on unknown phrase

private:
    DetectorConfig cfg_;
    ParamStore params_;
    ConvLayer c1_, c2_, c3_, c4_;
    GroupNormLayer n1_, n2_, n3_, n4_;
    ConvLayer head_;
};

struct DetectorModel {
    DetectorConfig cfg;
    std::unique_ptr<GridDetector> net;
    std::string param_hash;

    static DetectorModel create(const DetectorConfig& cfg, uint64_t seed);
    static DetectorModel load(const std::string& path);
    void save(const std::string& path, const nlohmann::json& metrics) const;
    void refresh_hash();
};

// ---- operations ----

DetectorLogits detect(const Image& image, const PromptSpec& prompt, GridDetector& det);

// Integer entry -> that token's row; list entry -> concatenated rows.
std::vector<float> gather_category_scores(const DetectorLogits& logits,
                                          const TokenIndexEntry& entry);

// Sum over the top-k scores of relu(tau - score); zero-pads when k exceeds
// the candidate count. Double-precision accumulation.
double class_loss(const std::vector<float>& scores, int count, double tau);

// Full loss on precomputed logits: gates on global_step, gathers per category,
// applies class_loss and normalizes by the total object count.
double counting_loss_from_logits(const DetectorLogits& logits, const PromptSpec& prompt,
                                 const CountingLossConfig& cfg, int64_t global_step);

double counting_loss(const Image& denoised, const PromptSpec& prompt, GridDetector& det,
                     const CountingLossConfig& cfg, int64_t global_step);

// Tape node over token scores [tokens, candidates]; forward accumulates in
// double, backward routes -1/total_count into selected below-threshold scores.
Tensor counting_loss_node(Tensor token_scores, const PromptSpec& prompt, double tau);

// Evaluation head: per category, counts grid cells that are 3x3 local maxima
// with aggregated (element-wise max over token rows) score >= threshold.
// Returns one count per prompt category.
std::vector<int> count_detections(const Image& image, const PromptSpec& prompt,
                                  GridDetector& det, double threshold);

// Peak cells as cell-sized pixel boxes, one list per prompt category.
std::vector<std::vector<Box>> detect_peak_boxes(const Image& image,
                                                const PromptSpec& prompt,
                                                GridDetector& det, double threshold);

// Per-category diagnostics for the inspect-loss command.
nlohmann::json counting_loss_report(const Image& image, const PromptSpec& prompt,
                                    GridDetector& det, const CountingLossConfig& cfg,
                                    int64_t global_step);

struct DetectorPretrainConfig {
    int max_steps = 4000;
    int batch_size = 16;
    double lr = 2e-3;
    double accuracy_bar = 0.9;  // mean per-category counting accuracy @ 0.5
    double val_fraction = 0.125;
    int eval_every = 250;
    double noise_aug_max = 0.12;  // uniform sigma of Gaussian pixel noise
    double pos_weight = 6.0;      // positive cell upweighting in the BCE
    uint64_t seed = 42;
};

// Trains per-cell binary center targets; throws "detector underfit" when the
// counting accuracy bar is missed within budget.
DetectorModel pretrain_detector(const std::vector<Scene>& scenes,
                                const std::vector<Category>& categories,
                                const DetectorConfig& cfg,
                                const DetectorPretrainConfig& train,
                                nlohmann::json* metrics_out = nullptr);

}  // namespace diffaug
