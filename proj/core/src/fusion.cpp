#include "diffaug/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace diffaug {

CropSet crop_instances(const Image& image, const std::vector<Box>& boxes, int pad,
                       int crop_size) {
    if (boxes.empty())
        throw std::invalid_argument("crop_instances: fusion requires at least one box");
    CropSet out;
    for (const Box& b : boxes) {
        int x0 = std::max(0, static_cast<int>(std::floor(b.x_min)) - pad);
        int y0 = std::max(0, static_cast<int>(std::floor(b.y_min)) - pad);
        int x1 = std::min(image.width, static_cast<int>(std::ceil(b.x_max)) + pad);
        int y1 = std::min(image.height, static_cast<int>(std::ceil(b.y_max)) + pad);
        if (x0 >= x1 || y0 >= y1)
            throw std::invalid_argument("crop_instances: box outside image");
        Image region = crop_image(image, x0, y0, x1, y1);
        out.crops.push_back(resize_bilinear(region, crop_size, crop_size));
        out.source_boxes.push_back({static_cast<float>(x0), static_cast<float>(y0),
                                    static_cast<float>(x1), static_cast<float>(y1)});
        out.validity.push_back(true);
    }
    return out;
}

CropSet pack_crops(const CropSet& crops, int m, Rng& rng) {
    if (m < 1) throw std::invalid_argument("pack_crops: M must be >= 1");
    CropSet out;
    int n = static_cast<int>(crops.size());
    if (n <= m) {
        out = crops;
        int crop_size = n > 0 ? crops.crops[0].height : 0;
        for (int i = n; i < m; ++i) {
            out.crops.emplace_back(crop_size, crop_size, 3);  // all zeros
            out.source_boxes.push_back({});
            out.validity.push_back(false);
        }
    } else {
        // sample m indices without replacement, order preserved
        std::vector<int> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        for (int i = 0; i < m; ++i) {
            int j = rng.uniform_int(i, n - 1);
            std::swap(idx[i], idx[j]);
        }
        idx.resize(m);
        std::sort(idx.begin(), idx.end());
        for (int i : idx) {
            out.crops.push_back(crops.crops[i]);
            out.source_boxes.push_back(crops.source_boxes[i]);
            out.validity.push_back(true);
        }
    }
    return out;
}

// ---- encoder ----

json EncoderConfig::to_json() const {
    return {{"emb", emb},
            {"image_size", image_size},
            {"crop_size", crop_size},
            {"base_channels", base_channels},
            {"norm_groups", norm_groups},
            {"num_categories", num_categories}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
    EncoderConfig c;
    c.emb = j.at("emb").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.crop_size = j.at("crop_size").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.norm_groups = j.at("norm_groups").get<int>();
    c.num_categories = j.at("num_categories").get<int>();
    return c;
}

SceneEncoder::SceneEncoder(const EncoderConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    if (4 * cfg.base_channels != cfg.emb)
        throw ConfigError("encoder: emb must equal 4 * base_channels");
    Rng rng(init_seed, "encoder_init");
    int b = cfg.base_channels, g = cfg.norm_groups;
    b1_ = make_conv(params_, "b1", 3, b, 3, 2, 1, rng);
    n1_ = make_group_norm(params_, "n1", b, g);
    b2_ = make_conv(params_, "b2", b, 2 * b, 3, 2, 1, rng);
    n2_ = make_group_norm(params_, "n2", 2 * b, g);
    b3_ = make_conv(params_, "b3", 2 * b, 4 * b, 3, 2, 1, rng);
    n3_ = make_group_norm(params_, "n3", 4 * b, g);
    b4_ = make_conv(params_, "b4", 4 * b, 4 * b, 3, 1, 1, rng);
    n4_ = make_group_norm(params_, "n4", 4 * b, g);
    pool_query_ = &params_.create("pool.q", {cfg.emb});
    init_normal(*pool_query_, rng, 0.2);
    summary_proj_ = make_linear(params_, "pool.proj", cfg.emb, cfg.emb, rng);
    cls_head_ = make_linear(params_, "cls", cfg.emb, cfg.num_categories, rng);
}

SceneEncoder::Features SceneEncoder::forward(Tape& t, Tensor x) {
    Features f;
    Tensor h1 = silu(n1_.forward(t, b1_.forward(t, x)));
    Tensor h2 = silu(n2_.forward(t, b2_.forward(t, h1)));
    Tensor h3 = silu(n3_.forward(t, b3_.forward(t, h2)));
    Tensor h4 = silu(n4_.forward(t, b4_.forward(t, h3)));
    f.blocks = {h1, h2, h3, h4};
    f.tokens = chw_to_tokens(h4);  // [B, hw, emb]
    // attention pooling with a learned query
    const Dims& td = f.tokens.dims();
    int B = td[0];
    Tensor q = repeat_row(t.param(*pool_query_), B);   // [B, emb]
    Tensor q3 = reshape(q, {B, 1, cfg_.emb});
    Tensor pooled = attention(q3, f.tokens, f.tokens);  // [B,1,emb]
    f.summary = summary_proj_.forward(t, reshape(pooled, {B, cfg_.emb}));
    return f;
}

Tensor SceneEncoder::classify(Tape& t, Tensor summary) {
    return cls_head_.forward(t, summary);
}

std::vector<float> SceneEncoder::summary_of(const Image& img) {
    Tape tape;
    tape.set_grad_enabled(false);
    std::vector<float> chw = to_chw(img);
    Tensor x = tape.input({1, 3, img.height, img.width}, chw);
    Features f = forward(tape, x);
    return std::vector<float>(f.summary.data(), f.summary.data() + f.summary.size());
}

std::vector<std::vector<float>> SceneEncoder::summaries_of(const std::vector<Image>& imgs) {
    std::vector<std::vector<float>> out;
    out.reserve(imgs.size());
    // batches of 16 keep the tape footprint small
    size_t pos = 0;
    while (pos < imgs.size()) {
        size_t take = std::min<size_t>(16, imgs.size() - pos);
        Tape tape;
        tape.set_grad_enabled(false);
        std::vector<Tensor> rows;
        std::vector<float> batch;
        int h = imgs[pos].height, w = imgs[pos].width;
        batch.reserve(take * 3 * h * w);
        for (size_t i = 0; i < take; ++i) {
            std::vector<float> chw = to_chw(imgs[pos + i]);
            batch.insert(batch.end(), chw.begin(), chw.end());
        }
        Tensor x = tape.input({static_cast<int>(take), 3, h, w}, batch);
        Features f = forward(tape, x);
        const float* s = f.summary.data();
        for (size_t i = 0; i < take; ++i)
            out.emplace_back(s + i * cfg_.emb, s + (i + 1) * cfg_.emb);
        pos += take;
    }
    return out;
}

std::vector<std::pair<Dims, std::vector<float>>> SceneEncoder::block_features(
    const Image& img) {
    Tape tape;
    tape.set_grad_enabled(false);
    std::vector<float> chw = to_chw(img);
    Tensor x = tape.input({1, 3, img.height, img.width}, chw);
    Features f = forward(tape, x);
    std::vector<std::pair<Dims, std::vector<float>>> out;
    for (Tensor blk : f.blocks)
        out.emplace_back(blk.dims(),
                         std::vector<float>(blk.data(), blk.data() + blk.size()));
    return out;
}

// ---- model io ----

EncoderModel EncoderModel::create(const EncoderConfig& cfg, uint64_t seed) {
    EncoderModel m;
    m.cfg = cfg;
    m.net = std::make_unique<SceneEncoder>(cfg, seed);
    m.refresh_hash();
    return m;
}

void EncoderModel::refresh_hash() { param_hash = net->params().content_hash(); }

void EncoderModel::save(const std::string& path, const json& metrics) const {
    json meta;
    meta["kind"] = "encoder";
    meta["arch"] = cfg.to_json();
    meta["extra"] = metrics;
    save_checkpoint(path, net->params(), meta);
    json sidecar;
    sidecar["param_hash"] = param_hash;
    sidecar["metrics"] = metrics;
    std::ofstream out(path + ".json");
    out << sidecar.dump(2) << "\n";
}

EncoderModel EncoderModel::load(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.meta().at("kind").get<std::string>() != "encoder")
        throw std::runtime_error("not an encoder checkpoint: " + path);
    EncoderModel m;
    m.cfg = EncoderConfig::from_json(ckpt.meta().at("arch"));
    m.net = std::make_unique<SceneEncoder>(m.cfg, 0);
    load_arrays_into(ckpt, m.net->params());
    m.net->params().set_trainable_all(false);
    m.refresh_hash();
    return m;
}

TokenSeq encode_condition(const Image& image, const CropSet& packed, SceneEncoder& enc,
                          bool include_global_patches) {
    const EncoderConfig& cfg = enc.config();
    int m = static_cast<int>(packed.size());
    for (const Image& c : packed.crops)
        if (c.height != cfg.crop_size || c.width != cfg.crop_size)
            throw std::invalid_argument("encode_condition: crop size mismatch");

    Tape tape;
    tape.set_grad_enabled(false);
    std::vector<float> chw = to_chw(image);
    Tensor x = tape.input({1, 3, image.height, image.width}, chw);
    SceneEncoder::Features gf = enc.forward(tape, x);

    int n_patches = include_global_patches ? gf.tokens.dims()[1] : 0;
    TokenSeq seq;
    seq.rows = 1 + n_patches + m;
    seq.dim = cfg.emb;
    seq.data.assign(static_cast<size_t>(seq.rows) * cfg.emb, 0.0f);
    std::copy(gf.summary.data(), gf.summary.data() + cfg.emb, seq.data.begin());
    if (include_global_patches)
        std::copy(gf.tokens.data(), gf.tokens.data() + static_cast<size_t>(n_patches) * cfg.emb,
                  seq.data.begin() + cfg.emb);

    // batch the valid crops through one forward; padded slots stay zero
    std::vector<int> valid_slots;
    std::vector<float> crop_batch;
    for (int i = 0; i < m; ++i) {
        if (!packed.validity[i]) continue;
        valid_slots.push_back(i);
        std::vector<float> cc = to_chw(packed.crops[i]);
        crop_batch.insert(crop_batch.end(), cc.begin(), cc.end());
    }
    if (!valid_slots.empty()) {
        Tensor cx = tape.input(
            {static_cast<int>(valid_slots.size()), 3, cfg.crop_size, cfg.crop_size},
            crop_batch);
        SceneEncoder::Features cf = enc.forward(tape, cx);
        const float* s = cf.summary.data();
        for (size_t k = 0; k < valid_slots.size(); ++k)
            std::copy(s + k * cfg.emb, s + (k + 1) * cfg.emb,
                      seq.data.begin() + static_cast<size_t>(1 + n_patches + valid_slots[k]) * cfg.emb);
    }
    return seq;
}

// ---- pretraining ----

EncoderModel pretrain_encoder(const std::vector<Scene>& scenes,
                              const std::vector<Category>& categories,
                              const EncoderConfig& cfg, const EncoderPretrainConfig& train,
                              json* metrics_out) {
    if (scenes.size() < 8) throw ConfigError("pretrain_encoder: dataset too small");
    int K = static_cast<int>(categories.size());
    if (K != cfg.num_categories)
        throw ConfigError("pretrain_encoder: category count mismatch");

    int n_val = std::max(1, static_cast<int>(scenes.size() * train.val_fraction));
    int n_train = static_cast<int>(scenes.size()) - n_val;

    auto labels_of = [&](const Scene& s) {
        std::vector<float> y(K, 0.0f);
        for (const auto& a : s.annotations) y[a.category_id] = 1.0f;
        return y;
    };

    EncoderModel model = EncoderModel::create(cfg, train.seed);
    AdamWConfig ocfg;
    ocfg.lr = train.lr;
    AdamW opt(model.net->params().trainable(), ocfg);
    Rng rng(train.seed, "encoder_pretrain");

    auto evaluate = [&]() {
        // mean per-category accuracy of thresholded logits on the val tail
        std::vector<int> correct(K, 0);
        for (int i = n_train; i < static_cast<int>(scenes.size()); ++i) {
            Tape tape;
            tape.set_grad_enabled(false);
            std::vector<float> chw = to_chw(scenes[i].image);
            Tensor x = tape.input({1, 3, cfg.image_size, cfg.image_size}, chw);
            Tensor logits = model.net->classify(tape, model.net->forward(tape, x).summary);
            std::vector<float> y = labels_of(scenes[i]);
            for (int k = 0; k < K; ++k) {
                bool pred = logits.data()[k] > 0.0f;  // sigmoid > 0.5
                if (pred == (y[k] > 0.5f)) ++correct[k];
            }
        }
        double acc = 0.0;
        for (int k = 0; k < K; ++k) acc += static_cast<double>(correct[k]) / n_val;
        return acc / K;
    };

    double best_acc = 0.0;
    int step = 0;
    for (; step < train.max_steps; ++step) {
        Tape tape;
        std::vector<float> batch, targets;
        for (int b = 0; b < train.batch_size; ++b) {
            const Scene& s = scenes[rng.uniform_int(0, n_train - 1)];
            std::vector<float> chw = to_chw(s.image);
            batch.insert(batch.end(), chw.begin(), chw.end());
            std::vector<float> y = labels_of(s);
            targets.insert(targets.end(), y.begin(), y.end());
        }
        Tensor x = tape.input({train.batch_size, 3, cfg.image_size, cfg.image_size}, batch);
        Tensor logits = model.net->classify(tape, model.net->forward(tape, x).summary);
        Tensor tgt = tape.input({train.batch_size, K}, targets);
        Tensor loss = bce_logits(logits, tgt);
        tape.backward(loss);
        tape.accumulate_param_grads();
        opt.step();
        opt.zero_grads();

        if ((step + 1) % train.eval_every == 0 || step + 1 == train.max_steps) {
            best_acc = std::max(best_acc, evaluate());
            if (best_acc >= train.accuracy_bar) {
                ++step;
                break;
            }
        }
    }
    double final_acc = evaluate();
    double reported = std::max(best_acc, final_acc);
    if (reported < train.accuracy_bar) throw std::runtime_error("encoder underfit");

    model.net->params().set_trainable_all(false);
    model.refresh_hash();
    json metrics = {{"val_accuracy", reported}, {"steps", step}, {"bar", train.accuracy_bar}};
    if (metrics_out) *metrics_out = metrics;
    return model;
}

}  // namespace diffaug
