#pragma once

#include <string>
#include <vector>

#include "diffaug/diffusion.hpp"
#include "diffaug/fusion.hpp"
#include "diffaug/reward.hpp"
#include "diffaug/scene.hpp"

namespace diffaug {

enum class ConditionMode { ImageOnly, CategoryName, ContentImage, Both };
enum class BoxSource { GroundTruth, Detector, RandomCrop };

ConditionMode condition_mode_from_string(const std::string& s);
std::string to_string(ConditionMode m);
BoxSource box_source_from_string(const std::string& s);
std::string to_string(BoxSource s);

// Assembles the (1+M) x emb condition sequence for a scene or bare image.
// Slot 0 is the global token; slots 1..M hold crop summaries, category
// embeddings, or both interleaved, zero-padded to the crop budget.
struct ConditionBuilder {
    SceneEncoder* encoder = nullptr;    // required for image-based modes
    GridDetector* detector = nullptr;   // required for BoxSource::Detector
    const std::vector<Category>* categories = nullptr;
    const Param* category_table = nullptr;  // [K, emb] frozen embedding rows
    int emb = 128;
    int crop_slots = 9;  // M
    int pad = 4;
    int crop_size = 32;
    int random_box_min = 10;
    int random_box_max = 22;
    double detector_threshold = 0.5;
    bool include_global_patches = false;

    std::vector<Box> resolve_boxes(const Image& image,
                                   const std::vector<Annotation>& annotations,
                                   BoxSource source, Rng& rng) const;

    TokenSeq build(const Scene& scene, ConditionMode mode, BoxSource source,
                   Rng& rng) const;
    // For generated images without annotations; GroundTruth is invalid here.
    TokenSeq build_from_image(const Image& image, ConditionMode mode, BoxSource source,
                              Rng& rng) const;
};

}  // namespace diffaug
