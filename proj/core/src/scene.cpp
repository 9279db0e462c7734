#include "diffaug/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace diffaug {

std::vector<Category> default_categories() {
    auto cat = [](int id, const char* name, ShapeKind k, float r, float g, float b) {
        Category c;
        c.id = id;
        c.name = name;
        c.shape = k;
        c.color[0] = r;
        c.color[1] = g;
        c.color[2] = b;
        return c;
    };
    return {
        cat(0, "circle", ShapeKind::Circle, 0.95f, 0.85f, 0.10f),
        cat(1, "square", ShapeKind::Square, 0.60f, 0.20f, 0.80f),
        cat(2, "triangle", ShapeKind::Triangle, 0.95f, 0.55f, 0.10f),
        cat(3, "ring", ShapeKind::Ring, 0.10f, 0.80f, 0.85f),
        cat(4, "cross", ShapeKind::Cross, 0.90f, 0.15f, 0.70f),
        cat(5, "red triangle", ShapeKind::Triangle, 0.90f, 0.10f, 0.10f),
        cat(6, "blue square", ShapeKind::Square, 0.15f, 0.25f, 0.90f),
        cat(7, "green circle", ShapeKind::Circle, 0.10f, 0.75f, 0.20f),
    };
}

int CategoryCounts::total() const {
    int t = 0;
    for (int c : counts) t += c;
    return t;
}

// ---- rendering ----

namespace {

// Inside test for each shape, in box-normalized coordinates u,v in [0,1].
bool shape_mask(ShapeKind kind, float u, float v) {
    switch (kind) {
        case ShapeKind::Circle: {
            float du = u - 0.5f, dv = v - 0.5f;
            return du * du + dv * dv <= 0.25f;
        }
        case ShapeKind::Square:
            return true;
        case ShapeKind::Triangle:
            // apex at top center, base along the bottom edge
            return v >= 0.0f && std::abs(u - 0.5f) <= 0.5f * v;
        case ShapeKind::Ring: {
            float du = u - 0.5f, dv = v - 0.5f;
            float r2 = du * du + dv * dv;
            return r2 <= 0.25f && r2 >= 0.25f * 0.55f * 0.55f;
        }
        case ShapeKind::Cross: {
            float bar = 1.0f / 6.0f;
            return std::abs(u - 0.5f) <= bar || std::abs(v - 0.5f) <= bar;
        }
    }
    return false;
}

void render_object(Image& img, const Category& cat, const Box& box) {
    int x0 = static_cast<int>(box.x_min), x1 = static_cast<int>(box.x_max);
    int y0 = static_cast<int>(box.y_min), y1 = static_cast<int>(box.y_max);
    float bw = box.width(), bh = box.height();
    for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) {
            float u = (x + 0.5f - box.x_min) / bw;
            float v = (y + 0.5f - box.y_min) / bh;
            if (shape_mask(cat.shape, u, v))
                for (int c = 0; c < 3; ++c) img.at(y, x, c) = cat.color[c];
        }
    }
}

void render_background(Image& img, Rng& rng) {
    // Dim textured background: a random linear ramp per channel plus pixel noise.
    float gx[3], gy[3], base[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = static_cast<float>(rng.uniform(0.12, 0.22));
        gx[c] = static_cast<float>(rng.uniform(-0.06, 0.06));
        gy[c] = static_cast<float>(rng.uniform(-0.06, 0.06));
    }
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float n = static_cast<float>(rng.uniform(0.0, 0.05));
            for (int c = 0; c < 3; ++c) {
                float fx = static_cast<float>(x) / img.width;
                float fy = static_cast<float>(y) / img.height;
                img.at(y, x, c) = base[c] + gx[c] * fx + gy[c] * fy + n;
            }
        }
}

void quantize_image(Image& img) {
    for (float& v : img.data) v = quantize8(v) / 255.0f;
}

}  // namespace

std::string SceneGenConfig::hash() const {
    Hasher h;
    h.update_pod(image_size);
    h.update_pod(count_min);
    h.update_pod(count_max);
    h.update_pod(max_iou);
    h.update_pod(min_box);
    h.update_pod(max_box);
    h.update_pod(min_same_category_center_dist);
    h.update_pod(retry_budget);
    h.update_pod(min_area);
    for (const auto& c : categories) {
        h.update_pod(c.id);
        h.update(c.name);
        h.update_pod(c.shape);
        h.update(&c.color, sizeof(c.color));
    }
    return h.hex();
}

namespace {

std::vector<std::pair<int, int>> mask_pixels(ShapeKind kind, const Box& box) {
    std::vector<std::pair<int, int>> out;
    for (int y = static_cast<int>(box.y_min); y < static_cast<int>(box.y_max); ++y)
        for (int x = static_cast<int>(box.x_min); x < static_cast<int>(box.x_max); ++x) {
            float u = (x + 0.5f - box.x_min) / box.width();
            float v = (y + 0.5f - box.y_min) / box.height();
            if (shape_mask(kind, u, v)) out.emplace_back(y, x);
        }
    return out;
}

// Topmost-owner map under render order; index into annotations, -1 background.
std::vector<int> owner_map(const std::vector<Annotation>& anns,
                           const std::vector<Category>& cats, int side) {
    std::vector<int> owner(static_cast<size_t>(side) * side, -1);
    for (size_t k = 0; k < anns.size(); ++k)
        for (auto [y, x] : mask_pixels(cats[anns[k].category_id].shape, anns[k].bbox))
            owner[static_cast<size_t>(y) * side + x] = static_cast<int>(k);
    return owner;
}

constexpr double kMinVisibleFraction = 0.5;

}  // namespace

Scene generate_scene(const SceneGenConfig& config, uint64_t seed, int scene_id) {
    if (config.count_min < 1 || config.count_max < config.count_min)
        throw ConfigError("generate_scene: bad object count range");
    if (config.categories.empty()) throw ConfigError("generate_scene: no categories");
    const int S = config.image_size;
    Rng rng(seed);

    Scene scene;
    scene.scene_id = scene_id;
    scene.image = Image(S, S, 3);
    render_background(scene.image, rng);

    // ownership bookkeeping keeps every placed object at least half visible
    std::vector<int> owner(static_cast<size_t>(S) * S, -1);
    std::vector<int> mask_sizes;
    std::vector<int> visible;

    int n_objects = rng.uniform_int(config.count_min, config.count_max);
    for (int i = 0; i < n_objects; ++i) {
        int cat_id = rng.uniform_int(0, static_cast<int>(config.categories.size()) - 1);
        bool placed = false;
        for (int attempt = 0; attempt < config.retry_budget && !placed; ++attempt) {
            int w = rng.uniform_int(config.min_box, config.max_box);
            int h = rng.uniform_int(config.min_box, config.max_box);
            if (w > S || h > S) continue;
            int x0 = rng.uniform_int(0, S - w);
            int y0 = rng.uniform_int(0, S - h);
            Box box{static_cast<float>(x0), static_cast<float>(y0),
                    static_cast<float>(x0 + w), static_cast<float>(y0 + h)};
            if (box.area() < config.min_area) continue;
            bool ok = true;
            for (const auto& other : scene.annotations) {
                if (box_iou(box, other.bbox) > config.max_iou) {
                    ok = false;
                    break;
                }
                if (other.category_id == cat_id) {
                    double dx = std::abs(box.cx() - other.bbox.cx());
                    double dy = std::abs(box.cy() - other.bbox.cy());
                    if (std::max(dx, dy) < config.min_same_category_center_dist) {
                        ok = false;
                        break;
                    }
                }
            }
            if (!ok) continue;
            // would this placement hide too much of an earlier object?
            auto pixels = mask_pixels(config.categories[cat_id].shape, box);
            if (pixels.empty()) continue;
            std::map<int, int> covered;
            for (auto [y, x] : pixels) {
                int o = owner[static_cast<size_t>(y) * S + x];
                if (o >= 0) ++covered[o];
            }
            for (auto [o, n] : covered)
                if (visible[o] - n < kMinVisibleFraction * mask_sizes[o]) {
                    ok = false;
                    break;
                }
            if (!ok) continue;

            for (auto [y, x] : pixels) {
                int& o = owner[static_cast<size_t>(y) * S + x];
                if (o >= 0) --visible[o];
                o = static_cast<int>(scene.annotations.size());
            }
            mask_sizes.push_back(static_cast<int>(pixels.size()));
            visible.push_back(static_cast<int>(pixels.size()));
            scene.annotations.push_back({cat_id, box});
            placed = true;
        }
        if (!placed) throw std::runtime_error("scene generation exhausted");
    }
    for (const auto& ann : scene.annotations)
        render_object(scene.image, config.categories[ann.category_id], ann.bbox);
    quantize_image(scene.image);
    return scene;
}

bool verify_scene(const Scene& scene, const SceneGenConfig& config, std::string* why) {
    const int side = scene.image.width;
    for (const auto& ann : scene.annotations) {
        if (ann.category_id < 0 ||
            ann.category_id >= static_cast<int>(config.categories.size())) {
            if (why) *why = "dangling category";
            return false;
        }
        const Box& box = ann.bbox;
        if (box.x_min < 0 || box.y_min < 0 || box.x_max > scene.image.width ||
            box.y_max > scene.image.height || box.x_min >= box.x_max ||
            box.y_min >= box.y_max) {
            if (why) *why = "box out of bounds";
            return false;
        }
    }
    std::vector<int> owner = owner_map(scene.annotations, config.categories, side);
    for (size_t k = 0; k < scene.annotations.size(); ++k) {
        const auto& ann = scene.annotations[k];
        const Category& cat = config.categories[ann.category_id];
        auto pixels = mask_pixels(cat.shape, ann.bbox);
        int vis = 0, wrong = 0;
        for (auto [y, x] : pixels) {
            if (owner[static_cast<size_t>(y) * side + x] != static_cast<int>(k)) continue;
            ++vis;
            for (int c = 0; c < 3; ++c)
                if (quantize8(scene.image.at(y, x, c)) != quantize8(cat.color[c])) {
                    ++wrong;
                    break;
                }
        }
        if (pixels.empty() || wrong > 0 ||
            vis < kMinVisibleFraction * static_cast<double>(pixels.size())) {
            if (why) {
                std::ostringstream os;
                os << "annotation " << k << ": visible " << vis << "/" << pixels.size()
                   << " mask pixels, " << wrong << " with wrong color";
                *why = os.str();
            }
            return false;
        }
    }
    return true;
}

// ---- counting and prompts ----

CategoryCounts count_by_category(const std::vector<Annotation>& annotations,
                                 const std::vector<Category>& categories) {
    std::vector<int> tally(categories.size(), 0);
    for (const auto& ann : annotations) {
        if (ann.category_id < 0 || ann.category_id >= static_cast<int>(categories.size()))
            throw std::invalid_argument("dangling category id " +
                                        std::to_string(ann.category_id));
        ++tally[ann.category_id];
    }
    CategoryCounts out;
    for (size_t i = 0; i < categories.size(); ++i) {
        if (tally[i] == 0) continue;
        out.class_names.push_back(categories[i].name);
        out.counts.push_back(tally[i]);
        out.category_ids.push_back(categories[i].id);
    }
    return out;
}

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : text) {
        if (ch == ' ' || ch == '.' || ch == '\t' || ch == '\n') {
            if (!cur.empty()) tokens.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) tokens.push_back(std::move(cur));
    return tokens;
}

PromptSpec build_prompt(const CategoryCounts& counts) {
    if (counts.empty()) throw std::invalid_argument("build_prompt: empty counts");
    PromptSpec spec;
    spec.counts = counts.counts;
    spec.class_names = counts.class_names;
    spec.category_ids = counts.category_ids;
    int next_token = 0;
    std::string text;
    for (size_t j = 0; j < counts.class_names.size(); ++j) {
        const std::string& name = counts.class_names[j];
        std::vector<std::string> words = tokenize_words(name);
        if (words.empty()) throw std::invalid_argument("invalid category name");
        if (!text.empty()) text += ". ";
        text += name;
        if (words.size() == 1) {
            spec.index_list.emplace_back(next_token);
            next_token += 1;
        } else {
            std::vector<int> idxs(words.size());
            for (size_t w = 0; w < words.size(); ++w) idxs[w] = next_token + static_cast<int>(w);
            next_token += static_cast<int>(words.size());
            spec.index_list.emplace_back(std::move(idxs));
        }
    }
    spec.prompt_text = std::move(text);
    return spec;
}

bool prompt_indices_consistent(const PromptSpec& spec) {
    std::vector<std::string> tokens = tokenize_words(spec.prompt_text);
    std::vector<bool> used(tokens.size(), false);
    for (size_t j = 0; j < spec.index_list.size(); ++j) {
        std::vector<int> idxs;
        if (std::holds_alternative<int>(spec.index_list[j]))
            idxs = {std::get<int>(spec.index_list[j])};
        else
            idxs = std::get<std::vector<int>>(spec.index_list[j]);
        std::string recovered;
        for (int ix : idxs) {
            if (ix < 0 || ix >= static_cast<int>(tokens.size()) || used[ix]) return false;
            used[ix] = true;
            if (!recovered.empty()) recovered += " ";
            recovered += tokens[ix];
        }
        if (recovered != spec.class_names[j]) return false;
    }
    return true;
}

// ---- dataset io ----

namespace {

std::string scene_file_name(int scene_id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06d.png", scene_id);
    return buf;
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifactError("missing file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json scenes_to_coco(const std::vector<Scene>& scenes,
                    const std::vector<Category>& categories) {
    json images = json::array();
    json annotations = json::array();
    json cats = json::array();
    for (const auto& c : categories) cats.push_back({{"id", c.id}, {"name", c.name}});
    int ann_id = 1;
    for (const auto& s : scenes) {
        images.push_back({{"id", s.scene_id},
                          {"file_name", scene_file_name(s.scene_id)},
                          {"width", s.image.width},
                          {"height", s.image.height}});
        for (const auto& a : s.annotations) {
            annotations.push_back(
                {{"id", ann_id++},
                 {"image_id", s.scene_id},
                 {"category_id", a.category_id},
                 {"bbox", {a.bbox.x_min, a.bbox.y_min, a.bbox.width(), a.bbox.height()}},
                 {"area", a.bbox.area()},
                 {"iscrowd", 0}});
        }
    }
    return {{"images", images}, {"annotations", annotations}, {"categories", cats}};
}

}  // namespace

std::vector<Scene> generate_dataset(const SceneGenConfig& config, int n_scenes,
                                    uint64_t seed) {
    std::vector<Scene> scenes;
    scenes.reserve(n_scenes);
    for (int i = 0; i < n_scenes; ++i)
        scenes.push_back(generate_scene(config, derive_seed(seed, uint64_t(i)), i));

    auto has_multiword = [&](const Scene& s) {
        for (const auto& a : s.annotations)
            if (tokenize_words(config.categories[a.category_id].name).size() > 1)
                return true;
        return false;
    };
    bool multiword_possible = false;
    for (const auto& c : config.categories)
        if (tokenize_words(c.name).size() > 1) multiword_possible = true;
    if (!multiword_possible || scenes.empty()) return scenes;

    bool found = false;
    for (const auto& s : scenes)
        if (has_multiword(s)) found = true;
    // redraw the last slot until the multi-token prompt branch is exercised
    for (uint64_t attempt = 0; !found && attempt < 1000; ++attempt) {
        Scene redo = generate_scene(
            config, derive_seed(seed, uint64_t(n_scenes) + attempt), n_scenes - 1);
        if (has_multiword(redo)) {
            scenes.back() = std::move(redo);
            found = true;
        }
    }
    if (!found) throw std::runtime_error("scene generation exhausted");
    return scenes;
}

Image render_background_image(const SceneGenConfig& config, uint64_t seed) {
    Rng rng(seed);
    Image img(config.image_size, config.image_size, 3);
    render_background(img, rng);
    quantize_image(img);
    return img;
}

DatasetManifest write_dataset(const std::vector<Scene>& scenes,
                              const SceneGenConfig& config, const std::string& root,
                              const std::string& split, uint64_t seed) {
    fs::path dir = fs::path(root) / split;
    fs::create_directories(dir / "images");

    Hasher content;
    for (const auto& s : scenes) {
        std::string p = (dir / "images" / scene_file_name(s.scene_id)).string();
        write_png(p, s.image);
        std::string bytes = file_bytes(p);
        content.update(bytes);
    }
    json coco = scenes_to_coco(scenes, config.categories);
    std::string ann_text = coco.dump(2);
    {
        std::ofstream out(dir / "annotations.json");
        out << ann_text;
    }
    content.update(ann_text);

    DatasetManifest man;
    man.root = root;
    man.split = split;
    man.seed = seed;
    man.config_hash = config.hash();
    man.n_scenes = static_cast<int>(scenes.size());
    man.annotation_file = "annotations.json";
    man.content_hash = content.hex();

    json mj = {{"format_version", man.format_version},
               {"split", man.split},
               {"seed", man.seed},
               {"config_hash", man.config_hash},
               {"n_scenes", man.n_scenes},
               {"annotation_file", man.annotation_file},
               {"content_hash", man.content_hash}};
    std::ofstream out(dir / "manifest.json");
    out << mj.dump(2) << "\n";
    return man;
}

DatasetManifest read_manifest(const std::string& root, const std::string& split) {
    fs::path p = fs::path(root) / split / "manifest.json";
    if (!fs::exists(p)) throw MissingArtifactError("missing manifest " + p.string());
    json mj = json::parse(file_bytes(p.string()));
    DatasetManifest man;
    try {
        man.format_version = mj.at("format_version").get<int>();
        man.split = mj.at("split").get<std::string>();
        man.seed = mj.at("seed").get<uint64_t>();
        man.config_hash = mj.at("config_hash").get<std::string>();
        man.n_scenes = mj.at("n_scenes").get<int>();
        man.annotation_file = mj.at("annotation_file").get<std::string>();
        man.content_hash = mj.at("content_hash").get<std::string>();
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("manifest schema mismatch: ") + e.what());
    }
    man.root = root;
    return man;
}

std::vector<std::pair<int, std::string>> read_dataset_categories(const std::string& root,
                                                                 const std::string& split) {
    fs::path dir = fs::path(root) / split;
    json coco = json::parse(file_bytes((dir / "annotations.json").string()));
    std::vector<std::pair<int, std::string>> out;
    for (const auto& c : coco.at("categories"))
        out.emplace_back(c.at("id").get<int>(), c.at("name").get<std::string>());
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<Scene> load_dataset(const std::string& root, const std::string& split,
                                DatasetManifest* manifest_out) {
    DatasetManifest man = read_manifest(root, split);
    fs::path dir = fs::path(root) / split;

    std::string ann_path = (dir / man.annotation_file).string();
    std::string ann_text = file_bytes(ann_path);
    json coco;
    try {
        coco = json::parse(ann_text);
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("annotation parse error: ") + e.what());
    }
    if (!coco.contains("images") || !coco.contains("annotations") ||
        !coco.contains("categories"))
        throw std::runtime_error("annotation schema mismatch: missing coco sections");

    Hasher content;
    std::vector<Scene> scenes;
    for (const auto& im : coco["images"]) {
        Scene s;
        s.scene_id = im.at("id").get<int>();
        std::string file = im.at("file_name").get<std::string>();
        fs::path ip = dir / "images" / file;
        if (!fs::exists(ip)) throw MissingArtifactError("missing image file " + ip.string());
        std::string bytes = file_bytes(ip.string());
        content.update(bytes);
        s.image = read_png(ip.string());
        if (s.image.width != im.at("width").get<int>() ||
            s.image.height != im.at("height").get<int>())
            throw std::runtime_error("annotation schema mismatch: image size");
        scenes.push_back(std::move(s));
    }
    content.update(ann_text);

    for (const auto& a : coco["annotations"]) {
        int image_id = a.at("image_id").get<int>();
        auto it = std::find_if(scenes.begin(), scenes.end(),
                               [&](const Scene& s) { return s.scene_id == image_id; });
        if (it == scenes.end())
            throw std::runtime_error("annotation schema mismatch: unknown image id");
        auto bb = a.at("bbox");
        Annotation ann;
        ann.category_id = a.at("category_id").get<int>();
        ann.bbox.x_min = bb.at(0).get<float>();
        ann.bbox.y_min = bb.at(1).get<float>();
        ann.bbox.x_max = ann.bbox.x_min + bb.at(2).get<float>();
        ann.bbox.y_max = ann.bbox.y_min + bb.at(3).get<float>();
        it->annotations.push_back(ann);
    }
    if (static_cast<int>(scenes.size()) != man.n_scenes)
        throw std::runtime_error("annotation schema mismatch: scene count");
    if (content.hex() != man.content_hash)
        throw std::runtime_error("checksum mismatch for split " + split);
    if (manifest_out) *manifest_out = man;
    return scenes;
}

}  // namespace diffaug
