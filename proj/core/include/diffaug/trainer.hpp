#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "diffaug/conditions.hpp"
#include "diffaug/lora.hpp"
#include "diffaug/metrics.hpp"
#include "diffaug/reward.hpp"
#include "diffaug/scene.hpp"
#include "diffaug/unet.hpp"

namespace diffaug {

double mse_loss(const std::vector<float>& truth, const std::vector<float>& pred);
double total_loss(double mse, double counting, double lambda_weight);

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 32;
    int micro_batch = 8;  // gradient accumulation slice
    int epochs = 5;
    int max_steps = -1;  // > 0 overrides epochs
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double weight_decay = 0.01;
    double grad_clip_norm = 1.0;
    int warmup_steps = 0;
    std::string lr_schedule = "constant";
    uint64_t seed = 42;
    CountingLossConfig counting;  // tau=0.1, gamma=1000, lambda=0.5
    bool counting_include_noise = true;        // the sigma_t z term of the estimate
    double counting_batch_fraction = 1.0;
    std::string condition_mode = "content_image";
    double condition_dropout = 0.1;
    std::string box_source = "ground_truth";
    int pad = 4;
    bool include_global_patches = false;
    LoraConfig lora;

    nlohmann::json to_json() const;
    // Strict: unknown keys raise ConfigError.
    static TrainConfig from_json(const nlohmann::json& j);
};

struct StepLog {
    int64_t step = 0;
    double mse = 0.0;
    double counting = 0.0;
    double total = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;  // post-clip
};

void write_loss_csv(const std::string& path, const std::vector<StepLog>& log);
std::vector<StepLog> read_loss_csv(const std::string& path);

struct RunManifest {
    std::string command;
    nlohmann::json* config_owned;
    std::string code_version;
    std::string data_hash;
    nlohmann::json* artifacts_owned;
    nlohmann::json* extra_owned;
    double wall_seconds = 0.0;

    RunManifest();
    ~RunManifest();
    RunManifest(RunManifest&&) noexcept;
    RunManifest& operator=(RunManifest&&) noexcept;
    RunManifest(const RunManifest&) = delete;

    nlohmann::json& config();
    nlohmann::json& artifacts();
    nlohmann::json& extra();
    nlohmann::json to_json() const;
    void write(const std::string& path) const;
};

// Dropout mask for the classifier-free-guidance null condition.
std::vector<bool> dropout_mask(int n, double p, Rng& rng);

struct PretrainBaseConfig {
    double lr = 1e-3;
    int batch_size = 16;
    int micro_batch = 8;
    int min_steps = 400;
    int max_steps = 6000;
    int eval_every = 200;
    int patience = 4;
    double improve_tol = 1e-4;
    double grad_clip_norm = 1.0;
    double condition_dropout = 0.1;
    double val_fraction = 0.1;
    uint64_t seed = 42;
};

// Phase one: trains the denoiser MSE-only with the per-object category-name
// condition (bag summary + per-object embedding rows) until the validation
// MSE plateaus. The model is mutated in place.
std::vector<StepLog> pretrain_base(DiffusionModel& model, const std::vector<Scene>& scenes,
                                   const std::vector<Category>& categories,
                                   const PretrainBaseConfig& cfg);

struct FinetuneResult {
    std::vector<StepLog> log;
    std::string adapter_path;
    std::string loss_csv_path;
    std::string manifest_path;
    std::string base_hash_before;
    std::string base_hash_after;
};

// Phase two: freezes the base, wraps adapters, and optimizes Eq-style
// mse + lambda * counting with the gate and gradient clipping. encoder is
// required for image conditions; detector for the counting loss and detector
// boxes. Artifacts land in out_dir.
FinetuneResult finetune_lora(DiffusionModel& model, const std::vector<Scene>& scenes,
                             const std::vector<Category>& categories,
                             EncoderModel* encoder, DetectorModel* detector,
                             const TrainConfig& cfg, const std::string& out_dir,
                             const std::string& data_hash = "");

// ---- hyperparameter sweep ----

struct SweepPoint {
    std::string param;  // "counting.tau" | "counting.gamma" | "counting.lambda"
    double value = 0.0;
};

struct SweepCellResult {
    SweepPoint point;
    bool ok = false;
    std::string error;
    MetricReport report;
};

using SweepRunFn = std::function<MetricReport(const TrainConfig&)>;

TrainConfig apply_sweep_point(const TrainConfig& base, const SweepPoint& p);
// Runs every cell; per-cell failures are recorded and the sweep continues.
std::vector<SweepCellResult> run_sweep(const TrainConfig& base,
                                       const std::vector<SweepPoint>& grid,
                                       const SweepRunFn& run);
void write_sweep_csv(const std::string& path, const std::vector<SweepCellResult>& cells);

}  // namespace diffaug
