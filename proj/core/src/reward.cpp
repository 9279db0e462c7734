#include "diffaug/reward.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace diffaug {

json DetectorConfig::to_json() const {
    return {{"image_size", image_size},
            {"grid", grid},
            {"base_channels", base_channels},
            {"norm_groups", norm_groups},
            {"vocabulary", vocabulary}};
}

DetectorConfig DetectorConfig::from_json(const json& j) {
    DetectorConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.grid = j.at("grid").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.norm_groups = j.at("norm_groups").get<int>();
    c.vocabulary = j.at("vocabulary").get<std::vector<std::string>>();
    return c;
}

GridDetector::GridDetector(const DetectorConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    if (cfg.vocabulary.empty()) throw ConfigError("detector: empty vocabulary");
    if (cfg.image_size / 8 != cfg.grid)
        throw ConfigError("detector: grid must equal image_size / 8");
    Rng rng(init_seed, "detector_init");
    int b = cfg.base_channels, g = cfg.norm_groups;
    int K = static_cast<int>(cfg.vocabulary.size());
    c1_ = make_conv(params_, "c1", 3, b, 3, 2, 1, rng);
    n1_ = make_group_norm(params_, "n1", b, g);
    c2_ = make_conv(params_, "c2", b, 2 * b, 3, 2, 1, rng);
    n2_ = make_group_norm(params_, "n2", 2 * b, g);
    c3_ = make_conv(params_, "c3", 2 * b, 4 * b, 3, 2, 1, rng);
    n3_ = make_group_norm(params_, "n3", 4 * b, g);
    c4_ = make_conv(params_, "c4", 4 * b, 4 * b, 3, 1, 1, rng);
    n4_ = make_group_norm(params_, "n4", 4 * b, g);
    head_ = make_conv(params_, "head", 4 * b, K, 1, 1, 0, rng);
}

Tensor GridDetector::forward_logits(Tape& t, Tensor x) {
    Tensor h = silu(n1_.forward(t, c1_.forward(t, x)));
    h = silu(n2_.forward(t, c2_.forward(t, h)));
    h = silu(n3_.forward(t, c3_.forward(t, h)));
    h = silu(n4_.forward(t, c4_.forward(t, h)));
    return head_.forward(t, h);  // [B, K, G, G]
}

int GridDetector::category_row(const std::string& name) const {
    for (size_t i = 0; i < cfg_.vocabulary.size(); ++i)
        if (cfg_.vocabulary[i] == name) return static_cast<int>(i);
    throw std::invalid_argument("detector vocabulary mismatch: '" + name + "'");
}

namespace {

// For each prompt token, the vocabulary row of the category that owns it.
std::vector<int> token_row_map(const PromptSpec& prompt, const GridDetector& det) {
    int n_tokens = static_cast<int>(tokenize_words(prompt.prompt_text).size());
    std::vector<int> rows(n_tokens, -1);
    for (size_t j = 0; j < prompt.index_list.size(); ++j) {
        int cat_row = det.category_row(prompt.class_names[j]);
        if (std::holds_alternative<int>(prompt.index_list[j])) {
            int ix = std::get<int>(prompt.index_list[j]);
            if (ix < 0 || ix >= n_tokens)
                throw std::invalid_argument("prompt token index out of range");
            rows[ix] = cat_row;
        } else {
            for (int ix : std::get<std::vector<int>>(prompt.index_list[j])) {
                if (ix < 0 || ix >= n_tokens)
                    throw std::invalid_argument("prompt token index out of range");
                rows[ix] = cat_row;
            }
        }
    }
    for (int r : rows)
        if (r < 0) throw std::invalid_argument("prompt has unindexed tokens");
    return rows;
}

}  // namespace

Tensor GridDetector::token_scores_node(Tape& t, Tensor image, const PromptSpec& prompt) {
    const Dims& d = image.dims();
    if (d.size() != 4 || d[0] != 1)
        throw std::invalid_argument("token_scores_node: want [1,3,S,S]");
    std::vector<int> rows = token_row_map(prompt, *this);
    Tensor logits = forward_logits(t, image);  // [1,K,G,G]
    int K = static_cast<int>(cfg_.vocabulary.size());
    int cands = cfg_.grid * cfg_.grid;
    Tensor flat = reshape(logits, {K, cands});
    Tensor tok = take_rows(flat, rows);  // [tokens, cands]
    return sigmoid(tok);
}

DetectorLogits detect(const Image& image, const PromptSpec& prompt, GridDetector& det) {
    if (image.height != det.config().image_size || image.width != det.config().image_size)
        throw std::invalid_argument("detect: image size mismatch");
    Tape tape;
    tape.set_grad_enabled(false);
    std::vector<float> chw = to_chw(image);
    Tensor x = tape.input({1, 3, image.height, image.width}, chw);
    Tensor scores = det.token_scores_node(tape, x, prompt);
    DetectorLogits out;
    out.tokens = scores.dims()[0];
    out.candidates = scores.dims()[1];
    out.scores.assign(scores.data(), scores.data() + scores.size());
    return out;
}

std::vector<float> gather_category_scores(const DetectorLogits& logits,
                                          const TokenIndexEntry& entry) {
    auto check_row = [&](int ix) {
        if (ix < 0 || ix >= logits.tokens)
            throw std::out_of_range("gather_category_scores: token index out of range");
    };
    std::vector<float> out;
    if (std::holds_alternative<int>(entry)) {
        int ix = std::get<int>(entry);
        check_row(ix);
        out.assign(logits.scores.begin() + static_cast<size_t>(ix) * logits.candidates,
                   logits.scores.begin() + static_cast<size_t>(ix + 1) * logits.candidates);
    } else {
        const auto& list = std::get<std::vector<int>>(entry);
        if (list.empty())
            throw std::invalid_argument("gather_category_scores: empty index list");
        for (int ix : list) {
            check_row(ix);
            out.insert(out.end(),
                       logits.scores.begin() + static_cast<size_t>(ix) * logits.candidates,
                       logits.scores.begin() + static_cast<size_t>(ix + 1) * logits.candidates);
        }
    }
    return out;
}

double class_loss(const std::vector<float>& scores, int count, double tau) {
    if (count <= 0) throw std::invalid_argument("class_loss: count must be >= 1");
    std::vector<float> sorted = scores;
    std::sort(sorted.begin(), sorted.end(), std::greater<float>());
    double loss = 0.0;
    for (int i = 0; i < count; ++i) {
        double s = i < static_cast<int>(sorted.size()) ? sorted[i] : 0.0;  // zero padding
        double h = tau - s;
        if (h > 0.0) loss += h;
    }
    return loss;
}

double counting_loss_from_logits(const DetectorLogits& logits, const PromptSpec& prompt,
                                 const CountingLossConfig& cfg, int64_t global_step) {
    if (!cfg.enabled || global_step <= cfg.gamma) return 0.0;
    if (prompt.counts.size() != prompt.index_list.size())
        throw std::invalid_argument("counting_loss: counts/index_list mismatch");
    double total = 0.0;
    double denom = 0.0;
    for (size_t j = 0; j < prompt.index_list.size(); ++j) {
        std::vector<float> s = gather_category_scores(logits, prompt.index_list[j]);
        total += class_loss(s, prompt.counts[j], cfg.tau);
        denom += prompt.counts[j];
    }
    return total / denom;
}

double counting_loss(const Image& denoised, const PromptSpec& prompt, GridDetector& det,
                     const CountingLossConfig& cfg, int64_t global_step) {
    if (!cfg.enabled || global_step <= cfg.gamma) return 0.0;
    DetectorLogits logits = detect(denoised, prompt, det);
    return counting_loss_from_logits(logits, prompt, cfg, global_step);
}

Tensor counting_loss_node(Tensor token_scores, const PromptSpec& prompt, double tau) {
    const Dims& d = token_scores.dims();
    if (d.size() != 2) throw std::invalid_argument("counting_loss_node: want [tokens,cands]");
    int tokens = d[0], cands = d[1];
    Tape& T = *token_scores.tape();
    bool g = T.wants_grad(token_scores.id());
    Tensor out = T.alloc({1}, g);

    const float* sv = token_scores.data();
    double denom = 0.0;
    for (int c : prompt.counts) denom += c;
    double total = 0.0;
    // flat indices of selected below-threshold scores, for the backward pass
    auto active = std::make_shared<std::vector<int64_t>>();
    for (size_t j = 0; j < prompt.index_list.size(); ++j) {
        std::vector<int64_t> flat;  // indices into the scores matrix
        auto add_row = [&](int ix) {
            if (ix < 0 || ix >= tokens)
                throw std::out_of_range("counting_loss_node: token index out of range");
            for (int c = 0; c < cands; ++c)
                flat.push_back(static_cast<int64_t>(ix) * cands + c);
        };
        if (std::holds_alternative<int>(prompt.index_list[j])) {
            add_row(std::get<int>(prompt.index_list[j]));
        } else {
            const auto& list = std::get<std::vector<int>>(prompt.index_list[j]);
            if (list.empty())
                throw std::invalid_argument("counting_loss_node: empty index list");
            for (int ix : list) add_row(ix);
        }
        // stable top-k: by value descending, then flat index ascending
        std::sort(flat.begin(), flat.end(), [&](int64_t a, int64_t b) {
            if (sv[a] != sv[b]) return sv[a] > sv[b];
            return a < b;
        });
        int k = prompt.counts[j];
        for (int i = 0; i < k; ++i) {
            double s = i < static_cast<int>(flat.size()) ? sv[flat[i]] : 0.0;
            double h = tau - s;
            if (h > 0.0) {
                total += h;
                if (i < static_cast<int>(flat.size())) active->push_back(flat[i]);
            }
        }
    }
    T.mutable_val(out)[0] = static_cast<float>(total / denom);
    if (g) {
        T.set_back(out, [&T, si = token_scores.id(), oi = out.id(), active, denom] {
            float go = T.node(oi).grad[0];
            float* gs = T.grad_buffer(si);
            float w = static_cast<float>(-1.0 / denom) * go;
            for (int64_t ix : *active) gs[ix] += w;
        });
    }
    return out;
}

// ---- evaluation counting head ----

namespace {

std::vector<std::pair<int, int>> peaks_of(const std::vector<float>& cell, int grid,
                                          double threshold) {
    std::vector<std::pair<int, int>> peaks;
    for (int y = 0; y < grid; ++y)
        for (int x = 0; x < grid; ++x) {
            float v = cell[static_cast<size_t>(y) * grid + x];
            if (v < threshold) continue;
            bool peak = true;
            for (int dy = -1; dy <= 1 && peak; ++dy)
                for (int dx = -1; dx <= 1 && peak; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= grid || nx < 0 || nx >= grid) continue;
                    float nv = cell[static_cast<size_t>(ny) * grid + nx];
                    if (nv > v) peak = false;
                    // ties resolve to the first cell in scan order
                    if (nv == v && (ny < y || (ny == y && nx < x))) peak = false;
                }
            if (peak) peaks.emplace_back(y, x);
        }
    return peaks;
}

std::vector<std::vector<float>> aggregate_category_cells(const DetectorLogits& logits,
                                                         const PromptSpec& prompt) {
    std::vector<std::vector<float>> per_category;
    for (size_t j = 0; j < prompt.index_list.size(); ++j) {
        std::vector<float> agg(static_cast<size_t>(logits.candidates), 0.0f);
        auto fold_row = [&](int ix) {
            for (int c = 0; c < logits.candidates; ++c)
                agg[c] = std::max(agg[c], logits.at(ix, c));
        };
        if (std::holds_alternative<int>(prompt.index_list[j]))
            fold_row(std::get<int>(prompt.index_list[j]));
        else
            for (int ix : std::get<std::vector<int>>(prompt.index_list[j])) fold_row(ix);
        per_category.push_back(std::move(agg));
    }
    return per_category;
}

}  // namespace

std::vector<int> count_detections(const Image& image, const PromptSpec& prompt,
                                  GridDetector& det, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw std::invalid_argument("count_detections: threshold must be in (0,1]");
    DetectorLogits logits = detect(image, prompt, det);
    int grid = det.config().grid;
    std::vector<int> counts;
    for (auto& cell : aggregate_category_cells(logits, prompt))
        counts.push_back(static_cast<int>(peaks_of(cell, grid, threshold).size()));
    return counts;
}

std::vector<std::vector<Box>> detect_peak_boxes(const Image& image,
                                                const PromptSpec& prompt,
                                                GridDetector& det, double threshold) {
    DetectorLogits logits = detect(image, prompt, det);
    int grid = det.config().grid;
    float cell = static_cast<float>(image.width) / grid;
    std::vector<std::vector<Box>> out;
    for (auto& scores : aggregate_category_cells(logits, prompt)) {
        std::vector<Box> boxes;
        for (auto [y, x] : peaks_of(scores, grid, threshold))
            boxes.push_back({x * cell, y * cell, (x + 1) * cell, (y + 1) * cell});
        out.push_back(std::move(boxes));
    }
    return out;
}

json counting_loss_report(const Image& image, const PromptSpec& prompt, GridDetector& det,
                          const CountingLossConfig& cfg, int64_t global_step) {
    DetectorLogits logits = detect(image, prompt, det);
    json cats = json::array();
    double denom = 0.0;
    for (int c : prompt.counts) denom += c;
    double total = 0.0;
    bool gated = !cfg.enabled || global_step <= cfg.gamma;
    for (size_t j = 0; j < prompt.index_list.size(); ++j) {
        std::vector<float> s = gather_category_scores(logits, prompt.index_list[j]);
        std::sort(s.begin(), s.end(), std::greater<float>());
        int k = prompt.counts[j];
        std::vector<double> topk;
        for (int i = 0; i < k; ++i)
            topk.push_back(i < static_cast<int>(s.size()) ? s[i] : 0.0);
        double lj = class_loss(s, k, cfg.tau);
        total += lj;
        cats.push_back({{"name", prompt.class_names[j]},
                        {"count", k},
                        {"topk_scores", topk},
                        {"class_loss", lj}});
    }
    return {{"categories", cats},
            {"tau", cfg.tau},
            {"gamma", cfg.gamma},
            {"global_step", global_step},
            {"gated", gated},
            {"counting_loss", gated ? 0.0 : total / denom}};
}

// ---- model io / pretraining ----

DetectorModel DetectorModel::create(const DetectorConfig& cfg, uint64_t seed) {
    DetectorModel m;
    m.cfg = cfg;
    m.net = std::make_unique<GridDetector>(cfg, seed);
    m.refresh_hash();
    return m;
}

void DetectorModel::refresh_hash() { param_hash = net->params().content_hash(); }

void DetectorModel::save(const std::string& path, const json& metrics) const {
    json meta;
    meta["kind"] = "detector";
    meta["arch"] = cfg.to_json();
    meta["extra"] = metrics;
    save_checkpoint(path, net->params(), meta);
    json sidecar;
    sidecar["param_hash"] = param_hash;
    sidecar["metrics"] = metrics;
    std::ofstream out(path + ".json");
    out << sidecar.dump(2) << "\n";
}

DetectorModel DetectorModel::load(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    if (ckpt.meta().at("kind").get<std::string>() != "detector")
        throw std::runtime_error("not a detector checkpoint: " + path);
    DetectorModel m;
    m.cfg = DetectorConfig::from_json(ckpt.meta().at("arch"));
    m.net = std::make_unique<GridDetector>(m.cfg, 0);
    load_arrays_into(ckpt, m.net->params());
    m.net->params().set_trainable_all(false);
    m.refresh_hash();
    return m;
}

namespace {

// One target plane per category: cell contains a box center of that category.
std::vector<float> cell_targets(const Scene& s, int n_categories, int grid) {
    std::vector<float> t(static_cast<size_t>(n_categories) * grid * grid, 0.0f);
    float cell = static_cast<float>(s.image.width) / grid;
    for (const auto& a : s.annotations) {
        int cx = std::min(grid - 1, static_cast<int>(a.bbox.cx() / cell));
        int cy = std::min(grid - 1, static_cast<int>(a.bbox.cy() / cell));
        t[(static_cast<size_t>(a.category_id) * grid + cy) * grid + cx] = 1.0f;
    }
    return t;
}

PromptSpec full_vocab_prompt(const std::vector<Category>& categories) {
    CategoryCounts counts;
    for (const auto& c : categories) {
        counts.class_names.push_back(c.name);
        counts.counts.push_back(1);
        counts.category_ids.push_back(c.id);
    }
    return build_prompt(counts);
}

}  // namespace

DetectorModel pretrain_detector(const std::vector<Scene>& scenes,
                                const std::vector<Category>& categories,
                                const DetectorConfig& cfg,
                                const DetectorPretrainConfig& train, json* metrics_out) {
    if (scenes.size() < 8) throw ConfigError("pretrain_detector: dataset too small");
    int K = static_cast<int>(cfg.vocabulary.size());
    if (K != static_cast<int>(categories.size()))
        throw ConfigError("pretrain_detector: vocabulary/categories mismatch");

    int n_val = std::max(1, static_cast<int>(scenes.size() * train.val_fraction));
    int n_train = static_cast<int>(scenes.size()) - n_val;
    int grid = cfg.grid;

    DetectorModel model = DetectorModel::create(cfg, train.seed);
    AdamWConfig ocfg;
    ocfg.lr = train.lr;
    AdamW opt(model.net->params().trainable(), ocfg);
    Rng rng(train.seed, "detector_pretrain");

    PromptSpec eval_prompt = full_vocab_prompt(categories);
    auto evaluate = [&]() {
        std::vector<int> correct(K, 0);
        for (int i = n_train; i < static_cast<int>(scenes.size()); ++i) {
            const Scene& s = scenes[i];
            std::vector<int> pred = count_detections(s.image, eval_prompt, *model.net, 0.5);
            std::vector<int> truth(K, 0);
            for (const auto& a : s.annotations) ++truth[a.category_id];
            for (int k = 0; k < K; ++k)
                if (pred[k] == truth[k]) ++correct[k];
        }
        double acc = 0.0;
        for (int k = 0; k < K; ++k) acc += static_cast<double>(correct[k]) / n_val;
        return acc / K;
    };

    int side = cfg.image_size;
    double best_acc = 0.0;
    int step = 0;
    for (; step < train.max_steps; ++step) {
        Tape tape;
        std::vector<float> batch, targets;
        for (int b = 0; b < train.batch_size; ++b) {
            const Scene& s = scenes[rng.uniform_int(0, n_train - 1)];
            std::vector<float> chw = to_chw(s.image);
            double sigma = rng.uniform(0.0, train.noise_aug_max);
            for (float& v : chw) v += static_cast<float>(sigma * rng.normal());
            batch.insert(batch.end(), chw.begin(), chw.end());
            std::vector<float> t = cell_targets(s, K, grid);
            targets.insert(targets.end(), t.begin(), t.end());
        }
        Tensor x = tape.input({train.batch_size, 3, side, side}, batch);
        Tensor logits = model.net->forward_logits(tape, x);
        Tensor tgt = tape.input(logits.dims(), targets);
        std::vector<float> weights(targets.size());
        for (size_t i = 0; i < targets.size(); ++i)
            weights[i] = targets[i] > 0.5f ? static_cast<float>(train.pos_weight) : 1.0f;
        Tensor w = tape.input(logits.dims(), weights);
        Tensor loss = bce_logits_weighted(logits, tgt, w);
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
    if (reported < train.accuracy_bar) throw std::runtime_error("detector underfit");

    model.net->params().set_trainable_all(false);
    model.refresh_hash();
    json metrics = {{"counting_accuracy", reported}, {"steps", step}, {"bar", train.accuracy_bar}};
    if (metrics_out) *metrics_out = metrics;
    return model;
}

}  // namespace diffaug
