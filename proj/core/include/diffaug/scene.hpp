#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "diffaug/common.hpp"
#include "diffaug/image.hpp"

namespace diffaug {

enum class ShapeKind { Circle, Square, Triangle, Ring, Cross };

struct Category {
    int id = 0;
    std::string name;  // one or two space-separated words
    ShapeKind shape = ShapeKind::Circle;
    float color[3] = {1.0f, 1.0f, 1.0f};
};

// The stock palette: five plain shapes plus three color-qualified ones whose
// two-word names exercise the multi-token prompt branch.
std::vector<Category> default_categories();

struct Annotation {
    int category_id = 0;
    Box bbox;  // pixel units, 0 <= x_min < x_max <= W
};

struct Scene {
    Image image;  // H x W x 3 in [0,1]
    std::vector<Annotation> annotations;
    int scene_id = 0;
};

struct CategoryCounts {
    std::vector<std::string> class_names;  // ordered by category id
    std::vector<int> counts;               // aligned, strictly positive
    std::vector<int> category_ids;         // aligned, convenience

    bool empty() const { return class_names.empty(); }
    int total() const;
};

// Index entry per category: one token index for single-word names, a list of
// token indices for multi-word names.
using TokenIndexEntry = std::variant<int, std::vector<int>>;

struct PromptSpec {
    std::string prompt_text;  // category names joined by ". "
    std::vector<TokenIndexEntry> index_list;
    std::vector<int> counts;
    std::vector<std::string> class_names;
    std::vector<int> category_ids;
};

// Whitespace word splitting; periods act as separators, not tokens.
std::vector<std::string> tokenize_words(const std::string& text);

struct SceneGenConfig {
    int image_size = 64;
    int count_min = 1;
    int count_max = 8;
    double max_iou = 0.3;
    int min_box = 10;
    int max_box = 22;
    // Same-category centers are kept at least this far apart (L-inf) so the
    // grid counting task stays well posed at the default cell size.
    double min_same_category_center_dist = 16.0;
    int retry_budget = 100;
    int min_area = 16;
    std::vector<Category> categories = default_categories();

    std::string hash() const;
};

Scene generate_scene(const SceneGenConfig& config, uint64_t seed, int scene_id = 0);

// Re-renders every annotation's shape mask and checks its pixels against the
// category color. Occlusion is allowed up to half of the mask.
bool verify_scene(const Scene& scene, const SceneGenConfig& config,
                  std::string* why = nullptr);

CategoryCounts count_by_category(const std::vector<Annotation>& annotations,
                                 const std::vector<Category>& categories);

PromptSpec build_prompt(const CategoryCounts& counts);

// Checks the prompt round trip: tokens at index_list[j] spell class_names[j].
bool prompt_indices_consistent(const PromptSpec& spec);

struct DatasetManifest {
    std::string root;
    std::string split;
    uint64_t seed = 0;
    std::string config_hash;
    int n_scenes = 0;
    std::string annotation_file;  // relative to split dir
    std::string content_hash;     // over annotation bytes + image bytes
    int format_version = 1;
};

// Generates n scenes with per-index derived seeds. Guarantees at least one
// scene containing a multi-word category (the last slot is redrawn if needed).
std::vector<Scene> generate_dataset(const SceneGenConfig& config, int n_scenes,
                                    uint64_t seed);

// Background-only rendering (no objects), e.g. for blank-image probes.
Image render_background_image(const SceneGenConfig& config, uint64_t seed);

DatasetManifest write_dataset(const std::vector<Scene>& scenes,
                              const SceneGenConfig& config, const std::string& root,
                              const std::string& split, uint64_t seed);

// Loads the split; verifies manifest hashes and file presence.
std::vector<Scene> load_dataset(const std::string& root, const std::string& split,
                                DatasetManifest* manifest_out = nullptr);

DatasetManifest read_manifest(const std::string& root, const std::string& split);

// id/name pairs from the split's annotation file, id order.
std::vector<std::pair<int, std::string>> read_dataset_categories(const std::string& root,
                                                                 const std::string& split);

}  // namespace diffaug
