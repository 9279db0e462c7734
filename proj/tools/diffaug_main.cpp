// diffaug: one binary wiring dataset generation, pretraining, LoRA
// fine-tuning, augmentation, evaluation and the sweep/recurrent protocols
// into reproducible, manifest-backed runs.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "diffaug/common.hpp"
#include "diffaug/conditions.hpp"
#include "diffaug/config.hpp"
#include "diffaug/diffusion.hpp"
#include "diffaug/fusion.hpp"
#include "diffaug/lora.hpp"
#include "diffaug/metrics.hpp"
#include "diffaug/plot.hpp"
#include "diffaug/reward.hpp"
#include "diffaug/scene.hpp"
#include "diffaug/trainer.hpp"
#include "diffaug/unet.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace diffaug;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::string data_root;
    std::string split = "train";
    int64_t seed = -1;  // -1: take the config seed
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& a, bool wants_data = true) {
    cmd->add_option("--config", a.config_path, "JSON config file");
    cmd->add_option("--out", a.out_dir, "output directory")->required();
    if (wants_data) {
        const char* env = std::getenv("DIFFAUG_DATA_ROOT");
        if (env) a.data_root = env;
        auto* opt = cmd->add_option("--data", a.data_root, "dataset root directory");
        if (!env) opt->required();
        cmd->add_option("--split", a.split, "dataset split name");
    }
    cmd->add_option("--seed", a.seed, "seed override");
    cmd->add_option("--set", a.overrides, "dotted-path config overrides (key.path=value)");
}

// ---- experiment config ----

struct ExperimentConfig {
    SceneGenConfig dataset;
    std::map<std::string, int> splits{{"train", 512}, {"val", 64}};
    int schedule_steps = 1000;
    std::string schedule_kind = "linear";
    double beta_min = 1e-4, beta_max = 0.02;
    DenoiserConfig arch;
    EncoderConfig encoder;
    EncoderPretrainConfig encoder_pretrain;
    DetectorConfig detector;
    DetectorPretrainConfig detector_pretrain;
    PretrainBaseConfig base_pretrain;
    TrainConfig train;
    SampleConfig sampler;
    std::vector<double> eval_thresholds = default_iqs_thresholds();
    int eval_n_images = -1;  // all
    std::map<std::string, std::vector<double>> sweep_grids;
    int recurrent_depth = 2;
    int recurrent_fanout = 3;
    uint64_t seed = 42;

    json raw;  // post-override snapshot for manifests
};

void check_section_keys(const json& j, const std::vector<std::string>& allowed,
                        const std::string& ctx) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
            throw ConfigError("unknown config key '" + ctx + it.key() + "'");
}

template <typename T>
T jget(const json& j, const std::string& key, T dflt) {
    if (!j.contains(key)) return dflt;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for '" + key + "': " + e.what());
    }
}

ExperimentConfig parse_experiment(const CommonArgs& args) {
    json j = json::object();
    if (!args.config_path.empty()) j = load_json_file(args.config_path);
    apply_overrides(j, args.overrides);

    ExperimentConfig e;
    e.raw = j;
    check_section_keys(j, {"dataset", "schedule", "arch", "encoder", "detector",
                           "base_pretrain", "train", "sampler", "eval", "sweep",
                           "recurrent", "seed"},
                       "");
    e.seed = jget<uint64_t>(j, "seed", e.seed);
    if (args.seed >= 0) e.seed = static_cast<uint64_t>(args.seed);

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        check_section_keys(d, {"image_size", "count_min", "count_max", "max_iou",
                               "min_box", "max_box", "min_same_category_center_dist",
                               "retry_budget", "min_area", "splits"},
                           "dataset.");
        e.dataset.image_size = jget(d, "image_size", e.dataset.image_size);
        e.dataset.count_min = jget(d, "count_min", e.dataset.count_min);
        e.dataset.count_max = jget(d, "count_max", e.dataset.count_max);
        e.dataset.max_iou = jget(d, "max_iou", e.dataset.max_iou);
        e.dataset.min_box = jget(d, "min_box", e.dataset.min_box);
        e.dataset.max_box = jget(d, "max_box", e.dataset.max_box);
        e.dataset.min_same_category_center_dist =
            jget(d, "min_same_category_center_dist", e.dataset.min_same_category_center_dist);
        e.dataset.retry_budget = jget(d, "retry_budget", e.dataset.retry_budget);
        e.dataset.min_area = jget(d, "min_area", e.dataset.min_area);
        if (d.contains("splits"))
            e.splits = d.at("splits").get<std::map<std::string, int>>();
    }
    if (j.contains("schedule")) {
        const json& s = j.at("schedule");
        check_section_keys(s, {"total_steps", "kind", "beta_min", "beta_max"}, "schedule.");
        e.schedule_steps = jget(s, "total_steps", e.schedule_steps);
        e.schedule_kind = jget<std::string>(s, "kind", e.schedule_kind);
        e.beta_min = jget(s, "beta_min", e.beta_min);
        e.beta_max = jget(s, "beta_max", e.beta_max);
    }
    e.arch.image_size = e.dataset.image_size;
    e.arch.num_categories = static_cast<int>(e.dataset.categories.size());
    if (j.contains("arch")) {
        const json& a = j.at("arch");
        check_section_keys(a, {"base_channels", "cond_dim", "time_dim", "norm_groups",
                               "crop_slots", "use_null_condition", "latent_pool2"},
                           "arch.");
        e.arch.base_channels = jget(a, "base_channels", e.arch.base_channels);
        e.arch.cond_dim = jget(a, "cond_dim", e.arch.cond_dim);
        e.arch.time_dim = jget(a, "time_dim", e.arch.time_dim);
        e.arch.norm_groups = jget(a, "norm_groups", e.arch.norm_groups);
        e.arch.crop_slots = jget(a, "crop_slots", e.arch.crop_slots);
        e.arch.use_null_condition = jget(a, "use_null_condition", e.arch.use_null_condition);
        e.arch.latent_pool2 = jget(a, "latent_pool2", e.arch.latent_pool2);
    }
    if (e.arch.latent_pool2) e.arch.image_size = e.dataset.image_size / 2;

    e.encoder.image_size = e.dataset.image_size;
    e.encoder.emb = e.arch.cond_dim;
    e.encoder.base_channels = e.arch.cond_dim / 4;
    e.encoder.num_categories = e.arch.num_categories;
    if (j.contains("encoder")) {
        const json& a = j.at("encoder");
        check_section_keys(a, {"crop_size", "norm_groups", "pretrain"}, "encoder.");
        e.encoder.crop_size = jget(a, "crop_size", e.encoder.crop_size);
        e.encoder.norm_groups = jget(a, "norm_groups", e.encoder.norm_groups);
        if (a.contains("pretrain")) {
            const json& p = a.at("pretrain");
            check_section_keys(p, {"max_steps", "batch_size", "lr", "accuracy_bar",
                                   "val_fraction", "eval_every"},
                               "encoder.pretrain.");
            e.encoder_pretrain.max_steps = jget(p, "max_steps", e.encoder_pretrain.max_steps);
            e.encoder_pretrain.batch_size = jget(p, "batch_size", e.encoder_pretrain.batch_size);
            e.encoder_pretrain.lr = jget(p, "lr", e.encoder_pretrain.lr);
            e.encoder_pretrain.accuracy_bar =
                jget(p, "accuracy_bar", e.encoder_pretrain.accuracy_bar);
            e.encoder_pretrain.val_fraction =
                jget(p, "val_fraction", e.encoder_pretrain.val_fraction);
            e.encoder_pretrain.eval_every = jget(p, "eval_every", e.encoder_pretrain.eval_every);
        }
    }
    e.encoder_pretrain.seed = e.seed;

    e.detector.image_size = e.dataset.image_size;
    e.detector.grid = e.dataset.image_size / 8;
    for (const auto& c : e.dataset.categories) e.detector.vocabulary.push_back(c.name);
    if (j.contains("detector")) {
        const json& a = j.at("detector");
        check_section_keys(a, {"base_channels", "norm_groups", "pretrain"}, "detector.");
        e.detector.base_channels = jget(a, "base_channels", e.detector.base_channels);
        e.detector.norm_groups = jget(a, "norm_groups", e.detector.norm_groups);
        if (a.contains("pretrain")) {
            const json& p = a.at("pretrain");
            check_section_keys(p, {"max_steps", "batch_size", "lr", "accuracy_bar",
                                   "val_fraction", "eval_every", "noise_aug_max",
                                   "pos_weight"},
                               "detector.pretrain.");
            e.detector_pretrain.max_steps = jget(p, "max_steps", e.detector_pretrain.max_steps);
            e.detector_pretrain.batch_size =
                jget(p, "batch_size", e.detector_pretrain.batch_size);
            e.detector_pretrain.lr = jget(p, "lr", e.detector_pretrain.lr);
            e.detector_pretrain.accuracy_bar =
                jget(p, "accuracy_bar", e.detector_pretrain.accuracy_bar);
            e.detector_pretrain.val_fraction =
                jget(p, "val_fraction", e.detector_pretrain.val_fraction);
            e.detector_pretrain.eval_every =
                jget(p, "eval_every", e.detector_pretrain.eval_every);
            e.detector_pretrain.noise_aug_max =
                jget(p, "noise_aug_max", e.detector_pretrain.noise_aug_max);
            e.detector_pretrain.pos_weight = jget(p, "pos_weight", e.detector_pretrain.pos_weight);
        }
    }
    e.detector_pretrain.seed = e.seed;

    if (j.contains("base_pretrain")) {
        const json& p = j.at("base_pretrain");
        check_section_keys(p, {"lr", "batch_size", "micro_batch", "min_steps", "max_steps",
                               "eval_every", "patience", "improve_tol", "grad_clip_norm",
                               "condition_dropout", "val_fraction"},
                           "base_pretrain.");
        e.base_pretrain.lr = jget(p, "lr", e.base_pretrain.lr);
        e.base_pretrain.batch_size = jget(p, "batch_size", e.base_pretrain.batch_size);
        e.base_pretrain.micro_batch = jget(p, "micro_batch", e.base_pretrain.micro_batch);
        e.base_pretrain.min_steps = jget(p, "min_steps", e.base_pretrain.min_steps);
        e.base_pretrain.max_steps = jget(p, "max_steps", e.base_pretrain.max_steps);
        e.base_pretrain.eval_every = jget(p, "eval_every", e.base_pretrain.eval_every);
        e.base_pretrain.patience = jget(p, "patience", e.base_pretrain.patience);
        e.base_pretrain.improve_tol = jget(p, "improve_tol", e.base_pretrain.improve_tol);
        e.base_pretrain.grad_clip_norm = jget(p, "grad_clip_norm", e.base_pretrain.grad_clip_norm);
        e.base_pretrain.condition_dropout =
            jget(p, "condition_dropout", e.base_pretrain.condition_dropout);
        e.base_pretrain.val_fraction = jget(p, "val_fraction", e.base_pretrain.val_fraction);
    }
    e.base_pretrain.seed = e.seed;

    if (j.contains("train")) e.train = TrainConfig::from_json(j.at("train"));
    e.train.seed = e.seed;

    if (j.contains("sampler")) {
        const json& s = j.at("sampler");
        check_section_keys(s, {"method", "steps", "guidance", "clamp01"}, "sampler.");
        e.sampler.method = jget<std::string>(s, "method", e.sampler.method);
        e.sampler.steps = jget(s, "steps", e.sampler.steps);
        e.sampler.guidance = jget(s, "guidance", e.sampler.guidance);
        e.sampler.clamp01 = jget(s, "clamp01", e.sampler.clamp01);
    }
    if (j.contains("eval")) {
        const json& s = j.at("eval");
        check_section_keys(s, {"thresholds", "n_images"}, "eval.");
        if (s.contains("thresholds"))
            e.eval_thresholds = s.at("thresholds").get<std::vector<double>>();
        e.eval_n_images = jget(s, "n_images", e.eval_n_images);
    }
    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        check_section_keys(s, {"grids"}, "sweep.");
        if (s.contains("grids"))
            e.sweep_grids =
                s.at("grids").get<std::map<std::string, std::vector<double>>>();
    }
    if (j.contains("recurrent")) {
        const json& s = j.at("recurrent");
        check_section_keys(s, {"depth", "fanout"}, "recurrent.");
        e.recurrent_depth = jget(s, "depth", e.recurrent_depth);
        e.recurrent_fanout = jget(s, "fanout", e.recurrent_fanout);
    }
    return e;
}

void verify_dataset_categories(const std::string& root, const std::string& split,
                               const std::vector<Category>& expected) {
    auto cats = read_dataset_categories(root, split);
    if (cats.size() != expected.size())
        throw std::runtime_error("dataset categories do not match the configured palette");
    for (size_t i = 0; i < cats.size(); ++i)
        if (cats[i].first != expected[i].id || cats[i].second != expected[i].name)
            throw std::runtime_error("dataset category mismatch at id " +
                                     std::to_string(cats[i].first));
}

RunManifest start_manifest(const std::string& command, const ExperimentConfig& e,
                           const CommonArgs& args) {
    RunManifest man;
    man.command = command;
    man.config() = {{"seed", e.seed}, {"experiment", e.raw}};
    if (!args.data_root.empty()) {
        man.config()["data_root"] = args.data_root;
        man.config()["split"] = args.split;
    }
    return man;
}

// provenance entry for one augmented image
struct Provenance {
    std::string file;
    int scene_id;
    std::string box_source;
    uint64_t seed;
};

void write_provenance(const std::string& path, const std::vector<Provenance>& rows) {
    json arr = json::array();
    for (const auto& r : rows)
        arr.push_back({{"file", r.file},
                       {"scene_id", r.scene_id},
                       {"box_source", r.box_source},
                       {"seed", r.seed}});
    std::ofstream out(path);
    out << arr.dump(2) << "\n";
}

// ---- commands ----

int cmd_gen_data(const CommonArgs& args) {
    ExperimentConfig e = parse_experiment(args);
    auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(args.out_dir);
    json splits_out = json::object();
    for (const auto& [split, n] : e.splits) {
        uint64_t split_seed = derive_seed(e.seed, "dataset_" + split);
        std::vector<Scene> scenes = generate_dataset(e.dataset, n, split_seed);
        for (const auto& s : scenes) {
            std::string why;
            if (!verify_scene(s, e.dataset, &why))
                throw std::runtime_error("scene verification failed: " + why);
        }
        DatasetManifest man = write_dataset(scenes, e.dataset, args.out_dir, split, split_seed);
        splits_out[split] = {{"n_scenes", man.n_scenes}, {"content_hash", man.content_hash}};
        std::cout << "wrote split '" << split << "' with " << man.n_scenes << " scenes\n";
    }
    RunManifest man = start_manifest("gen-data", e, args);
    man.artifacts() = splits_out;
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    man.write((fs::path(args.out_dir) / "run_manifest.json").string());
    return 0;
}

int cmd_pretrain_encoder(const CommonArgs& args) {
    ExperimentConfig e = parse_experiment(args);
    auto t0 = std::chrono::steady_clock::now();
    verify_dataset_categories(args.data_root, args.split, e.dataset.categories);
    DatasetManifest dman;
    std::vector<Scene> scenes = load_dataset(args.data_root, args.split, &dman);
    fs::create_directories(args.out_dir);
    json metrics;
    EncoderModel model =
        pretrain_encoder(scenes, e.dataset.categories, e.encoder, e.encoder_pretrain, &metrics);
    std::string path = (fs::path(args.out_dir) / "encoder.ckpt").string();
    model.save(path, metrics);
    std::cout << "encoder accuracy " << metrics.at("val_accuracy").get<double>() << ", hash "
              << model.param_hash << "\n";
    RunManifest man = start_manifest("pretrain-encoder", e, args);
    man.data_hash = dman.content_hash;
    man.artifacts() = {{"encoder", path}};
    man.extra() = metrics;
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    man.write((fs::path(args.out_dir) / "run_manifest.json").string());
    return 0;
}

int cmd_pretrain_detector(const CommonArgs& args) {
    ExperimentConfig e = parse_experiment(args);
    auto t0 = std::chrono::steady_clock::now();
    verify_dataset_categories(args.data_root, args.split, e.dataset.categories);
    DatasetManifest dman;
    std::vector<Scene> scenes = load_dataset(args.data_root, args.split, &dman);
    fs::create_directories(args.out_dir);
    json metrics;
    DetectorModel model = pretrain_detector(scenes, e.dataset.categories, e.detector,
                                            e.detector_pretrain, &metrics);
    std::string path = (fs::path(args.out_dir) / "detector.ckpt").string();
    model.save(path, metrics);
    std::cout << "detector counting accuracy "
              << metrics.at("counting_accuracy").get<double>() << ", hash "
              << model.param_hash << "\n";
    RunManifest man = start_manifest("pretrain-detector", e, args);
    man.data_hash = dman.content_hash;
    man.artifacts() = {{"detector", path}};
    man.extra() = metrics;
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    man.write((fs::path(args.out_dir) / "run_manifest.json").string());
    return 0;
}

int cmd_pretrain_base(const CommonArgs& args) {
    ExperimentConfig e = parse_experiment(args);
    auto t0 = std::chrono::steady_clock::now();
    verify_dataset_categories(args.data_root, args.split, e.dataset.categories);
    DatasetManifest dman;
    std::vector<Scene> scenes = load_dataset(args.data_root, args.split, &dman);
    fs::create_directories(args.out_dir);
    NoiseSchedule sched =
        make_schedule(e.schedule_steps, e.schedule_kind, e.beta_min, e.beta_max);
    DiffusionModel model = DiffusionModel::create(e.arch, sched, e.seed);
    std::vector<StepLog> log = pretrain_base(model, scenes, e.dataset.categories, e.base_pretrain);
    std::string path = (fs::path(args.out_dir) / "base.ckpt").string();
    model.save(path, {{"phase", "base_pretrain"}, {"steps", log.size()}});
    std::string csv = (fs::path(args.out_dir) / "loss_log.csv").string();
    write_loss_csv(csv, log);
    PlotSeries s;
    s.label = "mse";
    for (const auto& l : log) {
        s.x.push_back(static_cast<double>(l.step));
        s.y.push_back(l.mse);
    }
    write_line_chart((fs::path(args.out_dir) / "loss_curve.png").string(), {s}, "mse");
    std::cout << "base pretraining: " << log.size() << " steps, final mse "
              << (log.empty() ? 0.0 : log.back().mse) << "\n";
    RunManifest man = start_manifest("pretrain-base", e, args);
    man.data_hash = dman.content_hash;
    man.artifacts() = {{"base", path}, {"loss_log", csv}};
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    man.write((fs::path(args.out_dir) / "run_manifest.json").string());
    return 0;
}

struct ModelPaths {
    std::string base, adapter, encoder, detector;
};

void add_model_flags(CLI::App* cmd, ModelPaths& p) {
    cmd->add_option("--base", p.base, "base denoiser checkpoint")->required();
    cmd->add_option("--adapter", p.adapter, "adapter checkpoint");
    cmd->add_option("--encoder", p.encoder, "frozen encoder checkpoint");
    cmd->add_option("--detector", p.detector, "frozen detector checkpoint");
}

int cmd_finetune(const CommonArgs& args, const ModelPaths& paths) {
    ExperimentConfig e = parse_experiment(args);
    verify_dataset_categories(args.data_root, args.split, e.dataset.categories);
    DatasetManifest dman;
    std::vector<Scene> scenes = load_dataset(args.data_root, args.split, &dman);

    DiffusionModel model = DiffusionModel::load(paths.base);
    std::optional<EncoderModel> encoder;
    if (!paths.encoder.empty()) encoder = EncoderModel::load(paths.encoder);
    std::optional<DetectorModel> detector;
    if (!paths.detector.empty()) detector = DetectorModel::load(paths.detector);

    FinetuneResult r = finetune_lora(model, scenes, e.dataset.categories,
                                     encoder ? &*encoder : nullptr,
                                     detector ? &*detector : nullptr, e.train,
                                     args.out_dir, dman.content_hash);
    PlotSeries ms{"mse", {}, {}}, cs{"counting", {}, {}};
    for (const auto& l : r.log) {
        ms.x.push_back(static_cast<double>(l.step));
        ms.y.push_back(l.mse);
        cs.x.push_back(static_cast<double>(l.step));
        cs.y.push_back(l.counting);
    }
    write_line_chart((fs::path(args.out_dir) / "loss_curve.png").string(), {ms, cs}, "loss");
    std::cout << "finetune: " << r.log.size() << " steps, adapter at " << r.adapter_path
              << "\n";
    return 0;
}

std::vector<Scene> take_eval_scenes(std::vector<Scene> scenes, int n) {
    if (n > 0 && n < static_cast<int>(scenes.size())) scenes.resize(n);
    return scenes;
}

int cmd_augment(const CommonArgs& args, const ModelPaths& paths) {
    ExperimentConfig e = parse_experiment(args);
    auto t0 = std::chrono::steady_clock::now();
    verify_dataset_categories(args.data_root, args.split, e.dataset.categories);
    DatasetManifest dman;
    std::vector<Scene> scenes =
        take_eval_scenes(load_dataset(args.data_root, args.split, &dman), e.eval_n_images);

    DiffusionModel model = DiffusionModel::load(paths.base);
    if (!paths.adapter.empty()) load_adapters(*model.net, paths.adapter);
    std::optional<EncoderModel> encoder;
    if (!paths.encoder.empty()) encoder = EncoderModel::load(paths.encoder);
    std::optional<DetectorModel> detector;
    if (!paths.detector.empty()) detector = DetectorModel::load(paths.detector);

    ConditionMode mode = condition_mode_from_string(e.train.condition_mode);
    BoxSource source = box_source_from_string(e.train.box_source);
    if (mode != ConditionMode::CategoryName && !encoder)
        throw MissingArtifactError("augment: --encoder required for image conditions");
    if (source == BoxSource::Detector && !detector)
        throw MissingArtifactError("augment: --detector required for detector boxes");

    ConditionBuilder builder;
    builder.encoder = encoder ? encoder->net.get() : nullptr;
    builder.detector = detector ? detector->net.get() : nullptr;
    builder.categories = &e.dataset.categories;
    builder.category_table = &model.net->category_embed();
    builder.emb = model.arch.cond_dim;
    builder.crop_slots = model.arch.crop_slots;
    builder.pad = e.train.pad;
    builder.crop_size = encoder ? encoder->cfg.crop_size : 32;
    builder.include_global_patches = e.train.include_global_patches;

    fs::create_directories(fs::path(args.out_dir) / "images");
    std::vector<Provenance> prov;
    Rng cond_rng(e.seed, "augment_conditions");
    const int batch = 8;
    for (size_t pos = 0; pos < scenes.size(); pos += batch) {
        size_t take = std::min<size_t>(batch, scenes.size() - pos);
        std::vector<TokenSeq> conds;
        for (size_t i = 0; i < take; ++i)
            conds.push_back(builder.build(scenes[pos + i], mode, source, cond_rng));
        uint64_t batch_seed = derive_seed(e.seed, "augment_batch_" + std::to_string(pos));
        std::vector<Image> images = sample_images(model, conds, e.sampler, batch_seed);
        for (size_t i = 0; i < take; ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "%06d.png", scenes[pos + i].scene_id);
            std::string rel = std::string("images/") + name;
            write_png((fs::path(args.out_dir) / rel).string(), images[i]);
            prov.push_back({rel, scenes[pos + i].scene_id, e.train.box_source, batch_seed});
        }
    }
    write_provenance((fs::path(args.out_dir) / "provenance.json").string(), prov);
    std::cout << "augmented " << prov.size() << " scenes\n";

    RunManifest man = start_manifest("augment", e, args);
    man.data_hash = dman.content_hash;
    man.artifacts() = {{"images", args.out_dir + "/images"},
                       {"provenance", args.out_dir + "/provenance.json"}};
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    man.write((fs::path(args.out_dir) / "run_manifest.json").string());
    return 0;
}

MetricReport evaluate_generated(const std::string& generated_dir,
                                const std::vector<Scene>& references,
                                const std::vector<Category>& categories,
                                SceneEncoder& encoder, GridDetector& detector,
                                const std::vector<double>& thresholds) {
    json prov = load_json_file((fs::path(generated_dir) / "provenance.json").string());
    std::vector<Image> generated;
    std::vector<Scene> matched;
    for (const auto& row : prov) {
        int scene_id = row.at("scene_id").get<int>();
        auto it = std::find_if(references.begin(), references.end(),
                               [&](const Scene& s) { return s.scene_id == scene_id; });
        if (it == references.end())
            throw std::runtime_error("provenance references unknown scene " +
                                     std::to_string(scene_id));
        generated.push_back(
            read_png((fs::path(generated_dir) / row.at("file").get<std::string>()).string()));
        matched.push_back(*it);
    }
    if (generated.empty()) throw std::runtime_error("no generated images found");

    MetricReport rep;
    rep.n_images = static_cast<int>(generated.size());
    rep.thresholds = thresholds;
    auto [iqs_all, iqs_50] = iqs(generated, matched, categories, detector, thresholds);
    rep.iqs = iqs_all;
    rep.iqs50 = iqs_50;
    std::vector<Image> ref_images;
    std::vector<std::pair<Image, Image>> pairs;
    for (size_t i = 0; i < generated.size(); ++i) {
        ref_images.push_back(matched[i].image);
        pairs.emplace_back(matched[i].image, generated[i]);
    }
    rep.fid_proxy = fid_proxy(generated, ref_images, encoder);
    rep.ds = diversity_score(pairs, encoder);
    return rep;
}

int cmd_eval(const CommonArgs& args, const ModelPaths& paths,
             const std::string& generated_dir, const std::string& table_path,
             const std::string& label) {
    ExperimentConfig e = parse_experiment(args);
    auto t0 = std::chrono::steady_clock::now();
    verify_dataset_categories(args.data_root, args.split, e.dataset.categories);
    DatasetManifest dman;
    std::vector<Scene> references = load_dataset(args.data_root, args.split, &dman);
    if (paths.encoder.empty() || paths.detector.empty())
        throw MissingArtifactError("eval: --encoder and --detector are required");
    EncoderModel encoder = EncoderModel::load(paths.encoder);
    DetectorModel detector = DetectorModel::load(paths.detector);

    MetricReport rep = evaluate_generated(generated_dir, references, e.dataset.categories,
                                          *encoder.net, *detector.net, e.eval_thresholds);
    fs::create_directories(args.out_dir);
    write_json_file((fs::path(args.out_dir) / "report.json").string(), rep.to_json());
    {
        std::ofstream csv(fs::path(args.out_dir) / "report.csv");
        csv << MetricReport::csv_header() << "\n" << rep.csv_row() << "\n";
    }
    if (!table_path.empty()) {
        // append one labelled row; builds method-comparison tables across runs
        bool fresh = !fs::exists(table_path);
        std::ofstream table(table_path, std::ios::app);
        if (fresh) table << "method," << MetricReport::csv_header() << "\n";
        table << (label.empty() ? generated_dir : label) << "," << rep.csv_row() << "\n";
    }
    std::cout << "eval: IQS " << rep.iqs << " IQS50 " << rep.iqs50 << " FID "
              << rep.fid_proxy << " DS " << rep.ds << "\n";

    RunManifest man = start_manifest("eval", e, args);
    man.data_hash = dman.content_hash;
    man.config()["generated"] = generated_dir;
    man.artifacts() = {{"report_json", args.out_dir + "/report.json"},
                       {"report_csv", args.out_dir + "/report.csv"}};
    man.extra() = rep.to_json();
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    man.write((fs::path(args.out_dir) / "run_manifest.json").string());
    return 0;
}

int cmd_sweep(const CommonArgs& args, const ModelPaths& paths,
              const std::string& eval_split) {
    ExperimentConfig e = parse_experiment(args);
    auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(args.out_dir);
    if (e.sweep_grids.empty()) {
        write_sweep_csv((fs::path(args.out_dir) / "sweep.csv").string(), {});
        std::cout << "sweep: empty grid, nothing to do\n";
        RunManifest man = start_manifest("sweep", e, args);
        man.artifacts() = {{"sweep_csv", args.out_dir + "/sweep.csv"}};
        man.write((fs::path(args.out_dir) / "run_manifest.json").string());
        return 0;
    }
    verify_dataset_categories(args.data_root, args.split, e.dataset.categories);
    DatasetManifest dman;
    std::vector<Scene> train_scenes = load_dataset(args.data_root, args.split, &dman);
    std::vector<Scene> eval_scenes =
        take_eval_scenes(load_dataset(args.data_root, eval_split), e.eval_n_images);

    if (paths.encoder.empty() || paths.detector.empty())
        throw MissingArtifactError("sweep: --encoder and --detector are required");
    EncoderModel encoder = EncoderModel::load(paths.encoder);
    DetectorModel detector = DetectorModel::load(paths.detector);

    std::vector<SweepPoint> grid;
    for (const auto& [param, values] : e.sweep_grids)
        for (double v : values) grid.push_back({param, v});

    int cell_index = 0;
    auto run_cell = [&](const TrainConfig& cfg) -> MetricReport {
        std::string cell_dir =
            (fs::path(args.out_dir) / ("cell_" + std::to_string(cell_index))).string();
        ++cell_index;
        DiffusionModel model = DiffusionModel::load(paths.base);
        finetune_lora(model, train_scenes, e.dataset.categories, &encoder, &detector, cfg,
                      cell_dir, dman.content_hash);
        ConditionBuilder builder;
        builder.encoder = encoder.net.get();
        builder.detector = detector.net.get();
        builder.categories = &e.dataset.categories;
        builder.category_table = &model.net->category_embed();
        builder.emb = model.arch.cond_dim;
        builder.crop_slots = model.arch.crop_slots;
        builder.pad = cfg.pad;
        builder.crop_size = encoder.cfg.crop_size;
        Rng cond_rng(cfg.seed, "sweep_conditions");
        ConditionMode mode = condition_mode_from_string(cfg.condition_mode);
        BoxSource source = box_source_from_string(cfg.box_source);
        std::vector<Image> generated;
        const int batch = 8;
        for (size_t pos = 0; pos < eval_scenes.size(); pos += batch) {
            size_t take = std::min<size_t>(batch, eval_scenes.size() - pos);
            std::vector<TokenSeq> conds;
            for (size_t i = 0; i < take; ++i)
                conds.push_back(builder.build(eval_scenes[pos + i], mode, source, cond_rng));
            uint64_t batch_seed = derive_seed(cfg.seed, "sweep_batch_" + std::to_string(pos));
            for (auto& img : sample_images(model, conds, e.sampler, batch_seed))
                generated.push_back(std::move(img));
        }
        MetricReport rep;
        rep.n_images = static_cast<int>(generated.size());
        rep.thresholds = e.eval_thresholds;
        auto [iq, iq50] =
            iqs(generated, eval_scenes, e.dataset.categories, *detector.net, e.eval_thresholds);
        rep.iqs = iq;
        rep.iqs50 = iq50;
        std::vector<Image> refs;
        std::vector<std::pair<Image, Image>> pairs;
        for (size_t i = 0; i < generated.size(); ++i) {
            refs.push_back(eval_scenes[i].image);
            pairs.emplace_back(eval_scenes[i].image, generated[i]);
        }
        rep.fid_proxy = fid_proxy(generated, refs, *encoder.net);
        rep.ds = diversity_score(pairs, *encoder.net);
        return rep;
    };

    std::vector<SweepCellResult> cells = run_sweep(e.train, grid, run_cell);
    std::string csv = (fs::path(args.out_dir) / "sweep.csv").string();
    write_sweep_csv(csv, cells);
    for (const auto& [param, values] : e.sweep_grids) {
        PlotSeries s{param, {}, {}};
        for (const auto& c : cells)
            if (c.ok && c.point.param == param) {
                s.x.push_back(c.point.value);
                s.y.push_back(c.report.iqs);
            }
        if (!s.x.empty()) {
            std::string safe = param;
            for (char& ch : safe)
                if (ch == '.') ch = '_';
            write_line_chart((fs::path(args.out_dir) / ("iqs_vs_" + safe + ".png")).string(),
                             {s}, param);
        }
    }
    int failures = 0;
    for (const auto& c : cells)
        if (!c.ok) ++failures;
    std::cout << "sweep: " << cells.size() << " cells, " << failures << " failed, csv at "
              << csv << "\n";

    RunManifest man = start_manifest("sweep", e, args);
    man.data_hash = dman.content_hash;
    man.artifacts() = {{"sweep_csv", csv}};
    man.extra() = {{"cells", cells.size()}, {"failures", failures}};
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    man.write((fs::path(args.out_dir) / "run_manifest.json").string());
    return 0;
}

int cmd_recurrent(const CommonArgs& args, const ModelPaths& paths, int scene_id) {
    ExperimentConfig e = parse_experiment(args);
    auto t0 = std::chrono::steady_clock::now();
    verify_dataset_categories(args.data_root, args.split, e.dataset.categories);
    DatasetManifest dman;
    std::vector<Scene> scenes = load_dataset(args.data_root, args.split, &dman);
    auto it = std::find_if(scenes.begin(), scenes.end(),
                           [&](const Scene& s) { return s.scene_id == scene_id; });
    if (scene_id >= 0 && it == scenes.end())
        throw MissingArtifactError("recurrent: scene id not found");
    const Scene& condition = scene_id >= 0 ? *it : scenes.front();

    DiffusionModel model = DiffusionModel::load(paths.base);
    if (!paths.adapter.empty()) load_adapters(*model.net, paths.adapter);
    if (paths.encoder.empty() || paths.detector.empty())
        throw MissingArtifactError("recurrent: --encoder and --detector are required");
    EncoderModel encoder = EncoderModel::load(paths.encoder);
    DetectorModel detector = DetectorModel::load(paths.detector);

    ConditionBuilder builder;
    builder.encoder = encoder.net.get();
    builder.detector = detector.net.get();
    builder.categories = &e.dataset.categories;
    builder.category_table = &model.net->category_embed();
    builder.emb = model.arch.cond_dim;
    builder.crop_slots = model.arch.crop_slots;
    builder.pad = e.train.pad;
    builder.crop_size = encoder.cfg.crop_size;

    RecurrentConfig rc;
    rc.depth = e.recurrent_depth;
    rc.fanout = e.recurrent_fanout;
    rc.sampler = e.sampler;
    GenTree tree = recurrent_generate(model, builder, condition, rc, e.seed);

    fs::create_directories(fs::path(args.out_dir) / "tree");
    json nodes = json::array();
    for (size_t i = 0; i < tree.nodes.size(); ++i) {
        const auto& n = tree.nodes[i];
        char name[48];
        std::snprintf(name, sizeof(name), "level%d_node%03zu.png", n.depth, i);
        write_png((fs::path(args.out_dir) / "tree" / name).string(), n.image);
        nodes.push_back({{"file", std::string("tree/") + name},
                         {"depth", n.depth},
                         {"parent", n.parent},
                         {"seed", n.seed},
                         {"degenerate", n.degenerate}});
    }
    json report = {{"nodes", nodes}};
    std::vector<Image> first = tree.level_images(1);
    if (first.size() >= 2) report["channel_std_first"] = channel_std(first);
    std::vector<Image> deeper;
    for (int d = 2; d <= rc.depth; ++d)
        for (auto& img : tree.level_images(d)) deeper.push_back(img);
    if (deeper.size() >= 2) report["channel_std_recurrent"] = channel_std(deeper);
    write_json_file((fs::path(args.out_dir) / "recurrent_report.json").string(), report);
    std::cout << "recurrent: " << tree.nodes.size() - 1 << " generated nodes\n";

    RunManifest man = start_manifest("recurrent", e, args);
    man.data_hash = dman.content_hash;
    man.config()["scene_id"] = condition.scene_id;
    man.artifacts() = {{"tree", args.out_dir + "/tree"},
                       {"report", args.out_dir + "/recurrent_report.json"}};
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    man.write((fs::path(args.out_dir) / "run_manifest.json").string());
    return 0;
}

int cmd_inspect_loss(const CommonArgs& args, const ModelPaths& paths,
                     const std::string& image_path, int scene_id, int64_t global_step) {
    ExperimentConfig e = parse_experiment(args);
    verify_dataset_categories(args.data_root, args.split, e.dataset.categories);
    std::vector<Scene> scenes = load_dataset(args.data_root, args.split);
    auto it = std::find_if(scenes.begin(), scenes.end(),
                           [&](const Scene& s) { return s.scene_id == scene_id; });
    if (it == scenes.end()) throw MissingArtifactError("inspect-loss: scene id not found");
    if (paths.detector.empty())
        throw MissingArtifactError("inspect-loss: --detector is required");
    DetectorModel detector = DetectorModel::load(paths.detector);

    Image image = image_path.empty() ? it->image : read_png(image_path);
    PromptSpec prompt =
        build_prompt(count_by_category(it->annotations, e.dataset.categories));
    CountingLossConfig cfg = e.train.counting;
    json report = counting_loss_report(image, prompt, *detector.net, cfg, global_step);
    fs::create_directories(args.out_dir);
    write_json_file((fs::path(args.out_dir) / "inspect_loss.json").string(), report);
    std::cout << report.dump(2) << "\n";
    RunManifest man = start_manifest("inspect-loss", e, args);
    man.config()["scene_id"] = scene_id;
    man.config()["image"] = image_path;
    man.artifacts() = {{"report", args.out_dir + "/inspect_loss.json"}};
    man.write((fs::path(args.out_dir) / "run_manifest.json").string());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional diffusion toolkit for multi-object image augmentation"};
    app.require_subcommand(1);

    CommonArgs gen_args, enc_args, det_args, base_args, ft_args, aug_args, eval_args,
        sweep_args, rec_args, insp_args;
    ModelPaths ft_paths, aug_paths, eval_paths, sweep_paths, rec_paths, insp_paths;
    std::string generated_dir, eval_split = "val", image_path, table_path, table_label;
    int scene_id = -1;
    int64_t inspect_step = 0;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    add_common(gen, gen_args, false);

    auto* enc = app.add_subcommand("pretrain-encoder", "pretrain and freeze the scene encoder");
    add_common(enc, enc_args);

    auto* det = app.add_subcommand("pretrain-detector", "pretrain and freeze the reward detector");
    add_common(det, det_args);

    auto* base = app.add_subcommand("pretrain-base", "pretrain the base denoiser (MSE only)");
    add_common(base, base_args);

    auto* ft = app.add_subcommand("finetune", "LoRA fine-tuning with the counting loss");
    add_common(ft, ft_args);
    ft->add_option("--base", ft_paths.base, "base denoiser checkpoint")->required();
    ft->add_option("--encoder", ft_paths.encoder, "frozen encoder checkpoint");
    ft->add_option("--detector", ft_paths.detector, "frozen detector checkpoint");

    auto* aug = app.add_subcommand("augment", "generate augmented images for a split");
    add_common(aug, aug_args);
    add_model_flags(aug, aug_paths);

    auto* ev = app.add_subcommand("eval", "compute metrics for generated images");
    add_common(ev, eval_args);
    ev->add_option("--generated", generated_dir, "directory produced by augment")->required();
    ev->add_option("--encoder", eval_paths.encoder, "frozen encoder checkpoint");
    ev->add_option("--detector", eval_paths.detector, "frozen detector checkpoint");
    ev->add_option("--table", table_path, "append a labelled row to this comparison CSV");
    ev->add_option("--label", table_label, "row label for --table");

    auto* sw = app.add_subcommand("sweep", "hyperparameter sweep grid");
    add_common(sw, sweep_args);
    add_model_flags(sw, sweep_paths);
    sw->add_option("--eval-split", eval_split, "split used for per-cell evaluation");

    auto* rec = app.add_subcommand("recurrent", "recurrent generation tree");
    add_common(rec, rec_args);
    add_model_flags(rec, rec_paths);
    rec->add_option("--scene-id", scene_id, "condition scene id (default: first)");

    auto* insp = app.add_subcommand("inspect-loss", "dump per-category counting loss terms");
    add_common(insp, insp_args);
    insp->add_option("--detector", insp_paths.detector, "frozen detector checkpoint");
    insp->add_option("--image", image_path, "image to inspect (default: the scene image)");
    insp->add_option("--scene-id", scene_id, "scene providing the prompt")->required();
    insp->add_option("--step", inspect_step, "global step for the gate");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_args);
        if (enc->parsed()) return cmd_pretrain_encoder(enc_args);
        if (det->parsed()) return cmd_pretrain_detector(det_args);
        if (base->parsed()) return cmd_pretrain_base(base_args);
        if (ft->parsed()) return cmd_finetune(ft_args, ft_paths);
        if (aug->parsed()) return cmd_augment(aug_args, aug_paths);
        if (ev->parsed())
            return cmd_eval(eval_args, eval_paths, generated_dir, table_path, table_label);
        if (sw->parsed()) return cmd_sweep(sweep_args, sweep_paths, eval_split);
        if (rec->parsed()) return cmd_recurrent(rec_args, rec_paths, scene_id);
        if (insp->parsed())
            return cmd_inspect_loss(insp_args, insp_paths, image_path, scene_id, inspect_step);
    } catch (const ConfigError& e) {
        std::cerr << "diffaug-error kind=config message=\"" << e.what() << "\"\n";
        return 1;
    } catch (const MissingArtifactError& e) {
        std::cerr << "diffaug-error kind=missing-artifact message=\"" << e.what() << "\"\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "diffaug-error kind=runtime message=\"" << e.what() << "\"\n";
        return 3;
    }
    return 0;
}
