#pragma once

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "diffaug/conditions.hpp"
#include "diffaug/diffusion.hpp"
#include "diffaug/fusion.hpp"
#include "diffaug/reward.hpp"
#include "diffaug/scene.hpp"

namespace diffaug {

struct MetricReport {
    double fid_proxy = 0.0;
    double ds = 0.0;
    double iqs = 0.0;    // 0..100
    double iqs50 = 0.0;  // 0..100
    double channel_std_first = -1.0;      // -1 when not measured
    double channel_std_recurrent = -1.0;
    int n_images = 0;
    std::vector<double> thresholds;
    std::string iqs_formula_version = "capped-recall-v1";

    nlohmann::json to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
};

std::vector<double> default_iqs_thresholds();  // 0.1 .. 0.9

// Counts per category of the reference prompt at one confidence threshold.
using CountFn =
    std::function<std::vector<int>(const Image& generated, const PromptSpec& prompt,
                                   double threshold)>;

// Instance quantity score: mean over (threshold, image, reference category) of
// min(detected, ground truth) / ground truth, scaled to 0..100. The second
// value is the score at threshold 0.5 alone.
std::pair<double, double> iqs_with_counter(const std::vector<Image>& generated,
                                           const std::vector<Scene>& references,
                                           const std::vector<Category>& categories,
                                           const CountFn& counter,
                                           const std::vector<double>& thresholds);

std::pair<double, double> iqs(const std::vector<Image>& generated,
                              const std::vector<Scene>& references,
                              const std::vector<Category>& categories, GridDetector& det,
                              const std::vector<double>& thresholds);

// Frechet distance between Gaussian fits of two feature clouds. Sample
// covariance; a scaled-identity shrinkage kicks in when a set is smaller than
// dim + 1.
double fid_from_features(const std::vector<std::vector<float>>& a,
                         const std::vector<std::vector<float>>& b);

double fid_proxy(const std::vector<Image>& a, const std::vector<Image>& b,
                 SceneEncoder& enc);

// Perceptual distance: per pair, channel-unit-normalized encoder block
// features, per-block mean squared distance, equal block weights, averaged
// over pairs.
double diversity_score(const std::vector<std::pair<Image, Image>>& pairs,
                       SceneEncoder& enc);

// Mean over channels of the population std (across the batch) of per-image
// channel means.
double channel_std(const std::vector<Image>& images);

// ---- recurrent generation ----

struct GenTreeNode {
    Image image;
    int depth = 0;   // 0 = condition scene, 1..depth = generations
    int parent = -1;
    uint64_t seed = 0;
    bool degenerate = false;  // detector found no boxes; not expanded
};

struct GenTree {
    std::vector<GenTreeNode> nodes;
    std::vector<Image> level_images(int depth) const;
};

struct RecurrentConfig {
    int depth = 2;
    int fanout = 3;
    SampleConfig sampler;
    ConditionMode mode = ConditionMode::ContentImage;
    BoxSource first_level_boxes = BoxSource::GroundTruth;
    double detector_threshold = 0.5;
};

// Level 1 conditions on the original scene; deeper levels condition on the
// parent image with detector-derived boxes. Per-node seeds derive from
// (seed, node index).
GenTree recurrent_generate(DiffusionModel& model, const ConditionBuilder& builder,
                           const Scene& condition, const RecurrentConfig& cfg,
                           uint64_t seed);

}  // namespace diffaug
