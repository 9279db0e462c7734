#include "diffaug/conditions.hpp"

#include <algorithm>
#include <cstring>

namespace diffaug {

ConditionMode condition_mode_from_string(const std::string& s) {
    if (s == "image_only") return ConditionMode::ImageOnly;
    if (s == "category_name") return ConditionMode::CategoryName;
    if (s == "content_image") return ConditionMode::ContentImage;
    if (s == "both") return ConditionMode::Both;
    throw ConfigError("unknown condition mode '" + s + "'");
}

std::string to_string(ConditionMode m) {
    switch (m) {
        case ConditionMode::ImageOnly: return "image_only";
        case ConditionMode::CategoryName: return "category_name";
        case ConditionMode::ContentImage: return "content_image";
        case ConditionMode::Both: return "both";
    }
    return "?";
}

BoxSource box_source_from_string(const std::string& s) {
    if (s == "ground_truth") return BoxSource::GroundTruth;
    if (s == "detector") return BoxSource::Detector;
    if (s == "random_crop") return BoxSource::RandomCrop;
    throw ConfigError("unknown box source '" + s + "'");
}

std::string to_string(BoxSource s) {
    switch (s) {
        case BoxSource::GroundTruth: return "ground_truth";
        case BoxSource::Detector: return "detector";
        case BoxSource::RandomCrop: return "random_crop";
    }
    return "?";
}

std::vector<Box> ConditionBuilder::resolve_boxes(const Image& image,
                                                 const std::vector<Annotation>& annotations,
                                                 BoxSource source, Rng& rng) const {
    switch (source) {
        case BoxSource::GroundTruth: {
            std::vector<Box> out;
            for (const auto& a : annotations) out.push_back(a.bbox);
            return out;
        }
        case BoxSource::Detector: {
            if (!detector || !categories)
                throw ConfigError("condition: detector box source needs a detector");
            CategoryCounts all;
            for (const auto& c : *categories) {
                all.class_names.push_back(c.name);
                all.counts.push_back(1);
                all.category_ids.push_back(c.id);
            }
            PromptSpec prompt = build_prompt(all);
            std::vector<Box> out;
            for (auto& per_cat :
                 detect_peak_boxes(image, prompt, *detector, detector_threshold))
                for (auto& b : per_cat) out.push_back(b);
            return out;
        }
        case BoxSource::RandomCrop: {
            int n = annotations.empty() ? rng.uniform_int(1, crop_slots)
                                        : std::min<int>(static_cast<int>(annotations.size()),
                                                        crop_slots);
            std::vector<Box> out;
            for (int i = 0; i < n; ++i) {
                int w = rng.uniform_int(random_box_min, random_box_max);
                int h = rng.uniform_int(random_box_min, random_box_max);
                int x0 = rng.uniform_int(0, std::max(0, image.width - w));
                int y0 = rng.uniform_int(0, std::max(0, image.height - h));
                out.push_back({static_cast<float>(x0), static_cast<float>(y0),
                               static_cast<float>(x0 + w), static_cast<float>(y0 + h)});
            }
            return out;
        }
    }
    throw ConfigError("condition: bad box source");
}

namespace {

void write_row(TokenSeq& seq, int row, const float* src, int emb) {
    std::memcpy(seq.data.data() + static_cast<size_t>(row) * emb, src,
                sizeof(float) * emb);
}

}  // namespace

TokenSeq ConditionBuilder::build(const Scene& scene, ConditionMode mode, BoxSource source,
                                 Rng& rng) const {
    if (!encoder) throw ConfigError("condition: encoder required");
    const int m = crop_slots;

    TokenSeq seq;
    seq.dim = emb;

    // global summary token
    std::vector<float> global = encoder->summary_of(scene.image);
    int n_patches = 0;
    std::vector<float> patches;
    if (include_global_patches) {
        auto feats = encoder->block_features(scene.image);
        const auto& [dims, data] = feats.back();  // [1, emb, h, w]
        int hw = dims[2] * dims[3];
        n_patches = hw;
        patches.resize(static_cast<size_t>(hw) * emb);
        for (int c = 0; c < emb; ++c)
            for (int i = 0; i < hw; ++i)
                patches[static_cast<size_t>(i) * emb + c] = data[static_cast<size_t>(c) * hw + i];
    }
    seq.rows = 1 + n_patches + m;
    seq.data.assign(static_cast<size_t>(seq.rows) * emb, 0.0f);
    write_row(seq, 0, global.data(), emb);
    for (int i = 0; i < n_patches; ++i)
        write_row(seq, 1 + i, patches.data() + static_cast<size_t>(i) * emb, emb);

    if (mode == ConditionMode::ImageOnly) return seq;  // rows 1..M stay zero

    auto cat_row = [&](int cat_id) -> const float* {
        if (!category_table) throw ConfigError("condition: category table required");
        return category_table->value.data() + static_cast<size_t>(cat_id) * emb;
    };

    if (mode == ConditionMode::CategoryName) {
        int slot = 0;
        for (const auto& a : scene.annotations) {
            if (slot >= m) break;
            write_row(seq, 1 + n_patches + slot, cat_row(a.category_id), emb);
            ++slot;
        }
        return seq;
    }

    // crop-based modes
    std::vector<Box> boxes = resolve_boxes(scene.image, scene.annotations, source, rng);
    std::vector<int> box_cats;
    if (source == BoxSource::GroundTruth)
        for (const auto& a : scene.annotations) box_cats.push_back(a.category_id);
    if (boxes.empty()) throw std::invalid_argument("condition: no boxes for crops");
    CropSet crops = crop_instances(scene.image, boxes, pad, crop_size);

    if (mode == ConditionMode::ContentImage) {
        CropSet packed = pack_crops(crops, m, rng);
        TokenSeq fused = encode_condition(scene.image, packed, *encoder,
                                          include_global_patches);
        return fused;
    }

    // Both: interleave crop and category tokens per object within the M slots.
    CropSet packed = pack_crops(crops, m, rng);  // sized m, validity marks real crops
    TokenSeq fused = encode_condition(scene.image, packed, *encoder,
                                      include_global_patches);
    int slot = 0;
    std::vector<float> rows(static_cast<size_t>(m) * emb, 0.0f);
    int n_real = static_cast<int>(boxes.size());
    for (int i = 0; i < n_real && slot < m; ++i) {
        std::memcpy(rows.data() + static_cast<size_t>(slot) * emb,
                    fused.data.data() + static_cast<size_t>(1 + n_patches + i) * emb,
                    sizeof(float) * emb);
        ++slot;
        if (slot < m && i < static_cast<int>(box_cats.size())) {
            std::memcpy(rows.data() + static_cast<size_t>(slot) * emb, cat_row(box_cats[i]),
                        sizeof(float) * emb);
            ++slot;
        }
    }
    std::memcpy(fused.data.data() + static_cast<size_t>(1 + n_patches) * emb, rows.data(),
                sizeof(float) * static_cast<size_t>(m) * emb);
    return fused;
}

TokenSeq ConditionBuilder::build_from_image(const Image& image, ConditionMode mode,
                                            BoxSource source, Rng& rng) const {
    if (source == BoxSource::GroundTruth)
        throw ConfigError("condition: ground truth boxes unavailable for bare images");
    Scene fake;
    fake.image = image;
    if (mode == ConditionMode::CategoryName || mode == ConditionMode::Both)
        throw ConfigError("condition: category modes need annotations");
    return build(fake, mode, source, rng);
}

}  // namespace diffaug
