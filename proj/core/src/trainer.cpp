#include "diffaug/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "diffaug/diffusion.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace diffaug {

double mse_loss(const std::vector<float>& truth, const std::vector<float>& pred) {
    if (truth.size() != pred.size()) throw std::invalid_argument("mse_loss: shape mismatch");
    if (truth.empty()) throw std::invalid_argument("mse_loss: empty input");
    double s = 0.0;
    for (size_t i = 0; i < truth.size(); ++i) {
        double d = static_cast<double>(truth[i]) - pred[i];
        s += d * d;
    }
    return s / truth.size();
}

double total_loss(double mse, double counting, double lambda_weight) {
    return mse + lambda_weight * counting;
}

// ---- config ----

namespace {

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& ctx) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError("unknown config key '" + ctx + it.key() + "'");
    }
}

template <typename T>
T get_or(const json& j, const std::string& key, T dflt) {
    if (!j.contains(key)) return dflt;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key + "': " + e.what());
    }
}

}  // namespace

json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate},
            {"batch_size", batch_size},
            {"micro_batch", micro_batch},
            {"epochs", epochs},
            {"max_steps", max_steps},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"weight_decay", weight_decay},
            {"grad_clip_norm", grad_clip_norm},
            {"warmup_steps", warmup_steps},
            {"lr_schedule", lr_schedule},
            {"seed", seed},
            {"counting",
             {{"tau", counting.tau},
              {"gamma", counting.gamma},
              {"lambda", counting.lambda_weight},
              {"enabled", counting.enabled}}},
            {"counting_include_noise", counting_include_noise},
            {"counting_batch_fraction", counting_batch_fraction},
            {"condition_mode", condition_mode},
            {"condition_dropout", condition_dropout},
            {"box_source", box_source},
            {"pad", pad},
            {"include_global_patches", include_global_patches},
            {"lora", {{"rank", lora.rank}, {"alpha", lora.alpha}, {"targets", lora.targets}}}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    check_keys(j, {"learning_rate", "batch_size", "micro_batch", "epochs", "max_steps",
                   "adam_beta1", "adam_beta2", "weight_decay", "grad_clip_norm",
                   "warmup_steps", "lr_schedule", "seed", "counting",
                   "counting_include_noise", "counting_batch_fraction", "condition_mode",
                   "condition_dropout", "box_source", "pad", "include_global_patches",
                   "lora"},
               "");
    c.learning_rate = get_or(j, "learning_rate", c.learning_rate);
    c.batch_size = get_or(j, "batch_size", c.batch_size);
    c.micro_batch = get_or(j, "micro_batch", c.micro_batch);
    c.epochs = get_or(j, "epochs", c.epochs);
    c.max_steps = get_or(j, "max_steps", c.max_steps);
    c.adam_beta1 = get_or(j, "adam_beta1", c.adam_beta1);
    c.adam_beta2 = get_or(j, "adam_beta2", c.adam_beta2);
    c.weight_decay = get_or(j, "weight_decay", c.weight_decay);
    c.grad_clip_norm = get_or(j, "grad_clip_norm", c.grad_clip_norm);
    c.warmup_steps = get_or(j, "warmup_steps", c.warmup_steps);
    c.lr_schedule = get_or<std::string>(j, "lr_schedule", c.lr_schedule);
    c.seed = get_or<uint64_t>(j, "seed", c.seed);
    if (j.contains("counting")) {
        const json& cj = j.at("counting");
        check_keys(cj, {"tau", "gamma", "lambda", "enabled"}, "counting.");
        c.counting.tau = get_or(cj, "tau", c.counting.tau);
        c.counting.gamma = get_or<int64_t>(cj, "gamma", c.counting.gamma);
        c.counting.lambda_weight = get_or(cj, "lambda", c.counting.lambda_weight);
        c.counting.enabled = get_or(cj, "enabled", c.counting.enabled);
    }
    c.counting_include_noise = get_or(j, "counting_include_noise", c.counting_include_noise);
    c.counting_batch_fraction =
        get_or(j, "counting_batch_fraction", c.counting_batch_fraction);
    c.condition_mode = get_or<std::string>(j, "condition_mode", c.condition_mode);
    c.condition_dropout = get_or(j, "condition_dropout", c.condition_dropout);
    c.box_source = get_or<std::string>(j, "box_source", c.box_source);
    c.pad = get_or(j, "pad", c.pad);
    c.include_global_patches = get_or(j, "include_global_patches", c.include_global_patches);
    if (j.contains("lora")) {
        const json& lj = j.at("lora");
        check_keys(lj, {"rank", "alpha", "targets"}, "lora.");
        c.lora.rank = get_or(lj, "rank", c.lora.rank);
        c.lora.alpha = get_or(lj, "alpha", c.lora.alpha);
        c.lora.targets = get_or<std::string>(lj, "targets", c.lora.targets);
    }
    if (c.lr_schedule != "constant")
        throw ConfigError("lr_schedule: only 'constant' is supported");
    if (c.batch_size < 1 || c.micro_batch < 1 || c.micro_batch > c.batch_size)
        throw ConfigError("bad batch sizes");
    if (c.learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
    if (c.counting.tau <= 0.0 || c.counting.tau >= 1.0)
        throw ConfigError("counting.tau must be in (0,1)");
    if (c.counting.gamma < 0) throw ConfigError("counting.gamma must be >= 0");
    if (c.counting.lambda_weight < 0.0) throw ConfigError("counting.lambda must be >= 0");
    if (c.condition_dropout < 0.0 || c.condition_dropout >= 1.0)
        throw ConfigError("condition_dropout must be in [0,1)");
    condition_mode_from_string(c.condition_mode);  // validates
    box_source_from_string(c.box_source);
    return c;
}

// ---- logs and manifests ----

void write_loss_csv(const std::string& path, const std::vector<StepLog>& log) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "step,mse,counting,total,lr,grad_norm\n";
    out.precision(17);
    for (const auto& l : log)
        out << l.step << "," << l.mse << "," << l.counting << "," << l.total << "," << l.lr
            << "," << l.grad_norm << "\n";
}

std::vector<StepLog> read_loss_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("missing loss log " + path);
    std::string line;
    std::getline(in, line);
    if (line != "step,mse,counting,total,lr,grad_norm")
        throw std::runtime_error("loss log schema mismatch in " + path);
    std::vector<StepLog> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        StepLog l;
        std::istringstream ss(line);
        char comma;
        ss >> l.step >> comma >> l.mse >> comma >> l.counting >> comma >> l.total >> comma >>
            l.lr >> comma >> l.grad_norm;
        out.push_back(l);
    }
    return out;
}

RunManifest::RunManifest()
    : config_owned(new json(json::object())),
      artifacts_owned(new json(json::object())),
      extra_owned(new json(json::object())) {
    code_version = version_string();
}
RunManifest::~RunManifest() {
    delete config_owned;
    delete artifacts_owned;
    delete extra_owned;
}
RunManifest::RunManifest(RunManifest&& o) noexcept
    : command(std::move(o.command)),
      config_owned(o.config_owned),
      code_version(std::move(o.code_version)),
      data_hash(std::move(o.data_hash)),
      artifacts_owned(o.artifacts_owned),
      extra_owned(o.extra_owned),
      wall_seconds(o.wall_seconds) {
    o.config_owned = nullptr;
    o.artifacts_owned = nullptr;
    o.extra_owned = nullptr;
}
RunManifest& RunManifest::operator=(RunManifest&& o) noexcept {
    if (this != &o) {
        delete config_owned;
        delete artifacts_owned;
        delete extra_owned;
        command = std::move(o.command);
        config_owned = o.config_owned;
        code_version = std::move(o.code_version);
        data_hash = std::move(o.data_hash);
        artifacts_owned = o.artifacts_owned;
        extra_owned = o.extra_owned;
        wall_seconds = o.wall_seconds;
        o.config_owned = nullptr;
        o.artifacts_owned = nullptr;
        o.extra_owned = nullptr;
    }
    return *this;
}
json& RunManifest::config() { return *config_owned; }
json& RunManifest::artifacts() { return *artifacts_owned; }
json& RunManifest::extra() { return *extra_owned; }

json RunManifest::to_json() const {
    return {{"command", command},
            {"config", *config_owned},
            {"code_version", code_version},
            {"data_hash", data_hash},
            {"artifacts", *artifacts_owned},
            {"extra", *extra_owned},
            {"wall_seconds", wall_seconds}};
}

void RunManifest::write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << to_json().dump(2) << "\n";
}

std::vector<bool> dropout_mask(int n, double p, Rng& rng) {
    std::vector<bool> mask(n);
    for (int i = 0; i < n; ++i) mask[i] = p > 0.0 && rng.bernoulli(p);
    return mask;
}

// ---- base pretraining ----

namespace {

// Per-object category rows with a bag-mean summary in slot zero, on tape so
// the embedding table trains. Dropped samples get the null sequence.
Tensor category_condition_batch(Tape& tape, UNetDenoiser& net,
                                const std::vector<const Scene*>& batch,
                                const std::vector<bool>& dropped) {
    const DenoiserConfig& cfg = net.config();
    int m = cfg.crop_slots;
    int emb = cfg.cond_dim;
    Tensor table = tape.param(net.category_embed());
    Tensor null_row = tape.param(net.null_token());
    std::vector<Tensor> rows;
    rows.reserve(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
        if (dropped[b]) {
            rows.push_back(repeat_row(null_row, 1 + m));
            continue;
        }
        std::vector<int> ids;
        for (const auto& a : batch[b]->annotations) {
            if (static_cast<int>(ids.size()) >= m) break;
            ids.push_back(a.category_id);
        }
        Tensor obj = take_rows(table, ids);
        Tensor head = mean_rows(obj);
        Tensor seq = concat_rows(head, obj);
        int missing = m - static_cast<int>(ids.size());
        if (missing > 0) seq = concat_rows(seq, tape.zeros({missing, emb}));
        rows.push_back(seq);
    }
    return stack(rows);  // [B, 1+m, emb]
}

int steps_from_epochs(int n_scenes, int batch, int epochs, int max_steps) {
    if (max_steps > 0) return max_steps;
    int per_epoch = std::max(1, (n_scenes + batch - 1) / batch);
    return per_epoch * epochs;
}

}  // namespace

std::vector<StepLog> pretrain_base(DiffusionModel& model, const std::vector<Scene>& scenes,
                                   const std::vector<Category>& categories,
                                   const PretrainBaseConfig& cfg) {
    if (scenes.size() < 8) throw ConfigError("pretrain_base: dataset too small");
    (void)categories;
    UNetDenoiser& net = *model.net;
    const NoiseSchedule& sched = model.schedule;
    int side = net.config().image_size;
    int channels = net.config().in_channels;
    bool pool2 = net.config().latent_pool2;

    int n_val = std::max(1, static_cast<int>(scenes.size() * cfg.val_fraction));
    int n_train = static_cast<int>(scenes.size()) - n_val;
    if (n_train < 1) throw ConfigError("pretrain_base: dataset too small for val split");

    std::vector<std::vector<float>> latents(scenes.size());
    for (size_t i = 0; i < scenes.size(); ++i)
        latents[i] = encode_latent(scenes[i].image, pool2);

    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    AdamW opt(net.params().trainable(), ocfg);

    Rng data_rng(cfg.seed, "base_data");
    Rng noise_rng(cfg.seed, "base_noise");
    Rng drop_rng(cfg.seed, "base_dropout");

    // fixed validation noise set for comparable plateau decisions
    struct ValCase {
        int scene;
        int t;
        std::vector<float> eps;
    };
    std::vector<ValCase> val_cases;
    {
        Rng vrng(cfg.seed, "base_val");
        for (int i = n_train; i < static_cast<int>(scenes.size()); ++i) {
            ValCase vc;
            vc.scene = i;
            vc.t = vrng.uniform_int(1, sched.total_steps);
            vc.eps.resize(latents[i].size());
            vrng.fill_normal(vc.eps);
            val_cases.push_back(std::move(vc));
        }
    }
    auto val_mse = [&]() {
        double total = 0.0;
        for (const auto& vc : val_cases) {
            Tape tape;
            tape.set_grad_enabled(false);
            std::vector<float> xt =
                forward_diffuse(latents[vc.scene], vc.t, vc.eps, sched);
            Tensor x = tape.input({1, channels, side, side}, xt);
            std::vector<const Scene*> one{&scenes[vc.scene]};
            Tensor cond = category_condition_batch(tape, net, one, {false});
            Tensor pred = net.forward(tape, x, {vc.t}, cond);
            total += mse_loss(vc.eps, std::vector<float>(pred.data(),
                                                         pred.data() + pred.size()));
        }
        return total / val_cases.size();
    };

    std::vector<StepLog> log;
    std::vector<int> order(n_train);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), data_rng.engine());
    size_t cursor = 0;
    auto next_index = [&]() {
        if (cursor >= order.size()) {
            std::shuffle(order.begin(), order.end(), data_rng.engine());
            cursor = 0;
        }
        return order[cursor++];
    };

    double best = 1e30;
    int bad_evals = 0;
    int64_t pixels = static_cast<int64_t>(channels) * side * side;
    for (int step = 1; step <= cfg.max_steps; ++step) {
        double step_mse = 0.0;
        net.params().zero_grads();
        int done = 0;
        while (done < cfg.batch_size) {
            int mb = std::min(cfg.micro_batch, cfg.batch_size - done);
            std::vector<const Scene*> batch;
            std::vector<int> ts(mb);
            std::vector<float> z0;
            std::vector<float> eps;
            z0.reserve(static_cast<size_t>(mb) * pixels);
            eps.resize(static_cast<size_t>(mb) * pixels);
            for (int b = 0; b < mb; ++b) {
                int idx = next_index();
                batch.push_back(&scenes[idx]);
                z0.insert(z0.end(), latents[idx].begin(), latents[idx].end());
                ts[b] = noise_rng.uniform_int(1, sched.total_steps);
            }
            noise_rng.fill_normal(eps);
            std::vector<bool> dropped = dropout_mask(mb, cfg.condition_dropout, drop_rng);

            Tape tape;
            Tensor z0t = tape.input({mb, channels, side, side}, z0);
            Tensor epst = tape.input({mb, channels, side, side}, eps);
            Tensor xt = forward_diffuse_node(z0t, ts, epst, sched);
            Tensor cond = category_condition_batch(tape, net, batch, dropped);
            Tensor pred = net.forward(tape, xt, ts, cond);
            Tensor loss = mse(pred, epst);
            tape.backward(loss);
            tape.accumulate_param_grads(static_cast<float>(mb) / cfg.batch_size);
            step_mse += loss.scalar() * mb / cfg.batch_size;
            done += mb;
        }
        double gnorm = opt.step(cfg.grad_clip_norm);
        if (!std::isfinite(step_mse))
            throw std::runtime_error("pretrain_base diverged (NaN loss) at step " +
                                     std::to_string(step));
        log.push_back({step, step_mse, 0.0, step_mse, cfg.lr, gnorm});

        if (step % cfg.eval_every == 0 && step >= cfg.min_steps) {
            double v = val_mse();
            if (v < best - cfg.improve_tol) {
                best = v;
                bad_evals = 0;
            } else if (++bad_evals >= cfg.patience) {
                break;
            }
        }
    }
    return log;
}

// ---- LoRA fine-tuning ----

FinetuneResult finetune_lora(DiffusionModel& model, const std::vector<Scene>& scenes,
                             const std::vector<Category>& categories,
                             EncoderModel* encoder, DetectorModel* detector,
                             const TrainConfig& cfg, const std::string& out_dir,
                             const std::string& data_hash) {
    auto t_start = std::chrono::steady_clock::now();
    if (scenes.empty()) throw ConfigError("finetune_lora: empty dataset");
    UNetDenoiser& net = *model.net;
    const NoiseSchedule& sched = model.schedule;
    ConditionMode mode = condition_mode_from_string(cfg.condition_mode);
    BoxSource source = box_source_from_string(cfg.box_source);

    bool needs_encoder = mode != ConditionMode::CategoryName;
    if (needs_encoder && !encoder)
        throw MissingArtifactError("finetune_lora: encoder checkpoint required");
    if (cfg.counting.enabled && !detector)
        throw MissingArtifactError("finetune_lora: detector checkpoint required");
    if (source == BoxSource::Detector && !detector)
        throw MissingArtifactError("finetune_lora: detector required for detector boxes");

    fs::create_directories(out_dir);

    wrap_model(net, cfg.lora, cfg.seed);
    FinetuneResult result;
    result.base_hash_before = base_param_hash(net);
    std::string encoder_hash = encoder ? encoder->net->params().content_hash() : "";
    std::string detector_hash = detector ? detector->net->params().content_hash() : "";

    int side = net.config().image_size;
    int channels = net.config().in_channels;
    bool pool2 = net.config().latent_pool2;
    int64_t pixels = static_cast<int64_t>(channels) * side * side;

    // Per-scene caches: latents, prompts, condition sequences. Conditions use
    // frozen encoders so one pass suffices; the rng covers random boxes.
    ConditionBuilder builder;
    builder.encoder = encoder ? encoder->net.get() : nullptr;
    builder.detector = detector ? detector->net.get() : nullptr;
    builder.categories = &categories;
    builder.category_table = &net.category_embed();
    builder.emb = net.config().cond_dim;
    builder.crop_slots = net.config().crop_slots;
    builder.pad = cfg.pad;
    builder.crop_size = encoder ? encoder->cfg.crop_size : 32;
    builder.include_global_patches = cfg.include_global_patches;

    Rng cond_rng(cfg.seed, "finetune_conditions");
    std::vector<std::vector<float>> latents(scenes.size());
    std::vector<PromptSpec> prompts(scenes.size());
    std::vector<TokenSeq> conds(scenes.size());
    for (size_t i = 0; i < scenes.size(); ++i) {
        latents[i] = encode_latent(scenes[i].image, pool2);
        prompts[i] = build_prompt(count_by_category(scenes[i].annotations, categories));
        if (mode == ConditionMode::CategoryName && !encoder) {
            // bag summary + per-object rows straight from the frozen table
            const Param& table = net.category_embed();
            int emb = net.config().cond_dim;
            int m = net.config().crop_slots;
            TokenSeq seq;
            seq.rows = 1 + m;
            seq.dim = emb;
            seq.data.assign(static_cast<size_t>(seq.rows) * emb, 0.0f);
            int slot = 0;
            std::vector<double> mean(emb, 0.0);
            for (const auto& a : scenes[i].annotations) {
                const float* row = table.value.data() + static_cast<size_t>(a.category_id) * emb;
                for (int e = 0; e < emb; ++e) mean[e] += row[e];
                if (slot < m) {
                    std::copy(row, row + emb,
                              seq.data.begin() + static_cast<size_t>(1 + slot) * emb);
                    ++slot;
                }
            }
            for (int e = 0; e < emb; ++e)
                seq.data[e] = static_cast<float>(mean[e] / scenes[i].annotations.size());
            conds[i] = std::move(seq);
        } else {
            conds[i] = builder.build(scenes[i], mode, source, cond_rng);
        }
    }
    int cond_rows = conds[0].rows;

    std::vector<Param*> adapters = net.params().trainable();
    AdamWConfig ocfg;
    ocfg.lr = cfg.learning_rate;
    ocfg.beta1 = cfg.adam_beta1;
    ocfg.beta2 = cfg.adam_beta2;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(adapters, ocfg);

    Rng data_rng(cfg.seed, "finetune_data");
    Rng noise_rng(cfg.seed, "finetune_noise");
    Rng drop_rng(cfg.seed, "finetune_dropout");
    Rng count_rng(cfg.seed, "finetune_counting");

    std::vector<int> order(scenes.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), data_rng.engine());
    size_t cursor = 0;
    auto next_index = [&]() {
        if (cursor >= order.size()) {
            std::shuffle(order.begin(), order.end(), data_rng.engine());
            cursor = 0;
        }
        return order[cursor++];
    };

    const std::vector<float>& null_row = net.null_token().value;
    int emb = net.config().cond_dim;

    int total_steps = steps_from_epochs(static_cast<int>(scenes.size()), cfg.batch_size,
                                        cfg.epochs, cfg.max_steps);
    std::vector<StepLog> log;
    log.reserve(total_steps);
    for (int64_t step = 1; step <= total_steps; ++step) {
        bool counting_active = cfg.counting.enabled && step > cfg.counting.gamma;
        double step_mse = 0.0, step_counting = 0.0;
        double counting_weight_total = 0.0;
        net.params().zero_grads();
        int done = 0;
        while (done < cfg.batch_size) {
            int mb = std::min(cfg.micro_batch, cfg.batch_size - done);
            std::vector<int> idxs(mb);
            std::vector<int> ts(mb);
            std::vector<float> z0;
            std::vector<float> eps(static_cast<size_t>(mb) * pixels);
            z0.reserve(static_cast<size_t>(mb) * pixels);
            for (int b = 0; b < mb; ++b) {
                idxs[b] = next_index();
                z0.insert(z0.end(), latents[idxs[b]].begin(), latents[idxs[b]].end());
                ts[b] = noise_rng.uniform_int(1, sched.total_steps);
            }
            noise_rng.fill_normal(eps);
            std::vector<bool> dropped = dropout_mask(mb, cfg.condition_dropout, drop_rng);

            std::vector<float> cond_batch(static_cast<size_t>(mb) * cond_rows * emb);
            for (int b = 0; b < mb; ++b) {
                float* dst = cond_batch.data() + static_cast<size_t>(b) * cond_rows * emb;
                if (dropped[b]) {
                    for (int r = 0; r < cond_rows; ++r)
                        std::copy(null_row.begin(), null_row.end(), dst + static_cast<size_t>(r) * emb);
                } else {
                    const TokenSeq& s = conds[idxs[b]];
                    std::copy(s.data.begin(), s.data.end(), dst);
                }
            }

            Tape tape;
            Tensor z0t = tape.input({mb, channels, side, side}, z0);
            Tensor epst = tape.input({mb, channels, side, side}, eps);
            Tensor xt = forward_diffuse_node(z0t, ts, epst, sched);
            Tensor cond = tape.input({mb, cond_rows, emb}, cond_batch);
            Tensor pred = net.forward(tape, xt, ts, cond);
            Tensor loss_mse = mse(pred, epst);

            Tensor loss = loss_mse;
            int n_count = 0;
            if (counting_active) {
                n_count = std::max(
                    1, static_cast<int>(std::lround(cfg.counting_batch_fraction * mb)));
                n_count = std::min(n_count, mb);
                std::vector<float> z;
                if (cfg.counting_include_noise) {
                    z.resize(static_cast<size_t>(mb) * pixels);
                    count_rng.fill_normal(z);
                }
                Tensor x_star = one_step_denoise_node(xt, pred, ts, sched, z,
                                                      cfg.counting_include_noise);
                Tensor count_sum;
                for (int b = 0; b < n_count; ++b) {
                    Tensor img = select_sample(x_star, b);
                    if (pool2) img = upsample_nearest2(img);
                    Tensor scores =
                        detector->net->token_scores_node(tape, img, prompts[idxs[b]]);
                    Tensor cl = counting_loss_node(scores, prompts[idxs[b]],
                                                   cfg.counting.tau);
                    count_sum = count_sum.defined() ? add(count_sum, cl) : cl;
                }
                Tensor count_mean = scale(count_sum, 1.0f / n_count);
                loss = add(loss_mse,
                           scale(count_mean, static_cast<float>(cfg.counting.lambda_weight)));
                step_counting += static_cast<double>(count_mean.scalar()) * mb;
                counting_weight_total += mb;
            }
            tape.backward(loss);
            tape.accumulate_param_grads(static_cast<float>(mb) / cfg.batch_size);
            step_mse += static_cast<double>(loss_mse.scalar()) * mb / cfg.batch_size;
            done += mb;
        }
        double lr = cfg.learning_rate;
        if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
            lr *= static_cast<double>(step) / cfg.warmup_steps;
        opt.set_lr(lr);
        double gnorm = opt.step(cfg.grad_clip_norm);

        double counting_mean =
            counting_weight_total > 0.0 ? step_counting / counting_weight_total : 0.0;
        double total = total_loss(step_mse, counting_mean, cfg.counting.lambda_weight);
        if (!std::isfinite(total))
            throw std::runtime_error("finetune_lora diverged (NaN loss) at step " +
                                     std::to_string(step));
        log.push_back({step, step_mse, counting_mean, total, lr, gnorm});
    }

    result.base_hash_after = base_param_hash(net);
    result.log = std::move(log);
    result.loss_csv_path = (fs::path(out_dir) / "loss_log.csv").string();
    write_loss_csv(result.loss_csv_path, result.log);
    result.adapter_path = (fs::path(out_dir) / "adapter.ckpt").string();
    json extra = {{"steps", total_steps},
                  {"encoder_hash", encoder_hash},
                  {"detector_hash", detector_hash}};
    save_adapters(net, cfg.lora, result.adapter_path, extra);

    RunManifest man;
    man.command = "finetune";
    man.config() = cfg.to_json();
    man.data_hash = data_hash;
    man.artifacts() = {{"adapter", result.adapter_path},
                       {"loss_log", result.loss_csv_path}};
    man.extra() = {{"base_hash_before", result.base_hash_before},
                   {"base_hash_after", result.base_hash_after},
                   {"encoder_hash", encoder_hash},
                   {"detector_hash", detector_hash},
                   {"final_mse", result.log.empty() ? 0.0 : result.log.back().mse},
                   {"final_total", result.log.empty() ? 0.0 : result.log.back().total}};
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.manifest_path = (fs::path(out_dir) / "manifest.json").string();
    man.write(result.manifest_path);
    return result;
}

// ---- sweep ----

TrainConfig apply_sweep_point(const TrainConfig& base, const SweepPoint& p) {
    TrainConfig c = base;
    if (p.param == "counting.tau")
        c.counting.tau = p.value;
    else if (p.param == "counting.gamma")
        c.counting.gamma = static_cast<int64_t>(std::llround(p.value));
    else if (p.param == "counting.lambda")
        c.counting.lambda_weight = p.value;
    else if (p.param == "learning_rate")
        c.learning_rate = p.value;
    else if (p.param == "lora.rank")
        c.lora.rank = static_cast<int>(std::lround(p.value));
    else
        throw ConfigError("sweep: unsupported param '" + p.param + "'");
    return c;
}

std::vector<SweepCellResult> run_sweep(const TrainConfig& base,
                                       const std::vector<SweepPoint>& grid,
                                       const SweepRunFn& run) {
    std::vector<SweepCellResult> out;
    for (const SweepPoint& p : grid) {
        SweepCellResult cell;
        cell.point = p;
        try {
            TrainConfig cfg = apply_sweep_point(base, p);
            cell.report = run(cfg);
            cell.ok = true;
        } catch (const std::exception& e) {
            cell.ok = false;
            cell.error = e.what();
        }
        out.push_back(std::move(cell));
    }
    return out;
}

void write_sweep_csv(const std::string& path, const std::vector<SweepCellResult>& cells) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "param,value,status,FID,DS,IQS,IQS50\n";
    out.precision(12);
    for (const auto& c : cells) {
        out << c.point.param << "," << c.point.value << ","
            << (c.ok ? "ok" : "failed") << ",";
        if (c.ok)
            out << c.report.fid_proxy << "," << c.report.ds << "," << c.report.iqs << ","
                << c.report.iqs50;
        else
            out << ",,,";
        out << "\n";
    }
}

}  // namespace diffaug
