#include "diffaug/unet.hpp"

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace diffaug {

json DenoiserConfig::to_json() const {
    return {{"image_size", image_size},
            {"in_channels", in_channels},
            {"base_channels", base_channels},
            {"cond_dim", cond_dim},
            {"time_dim", time_dim},
            {"norm_groups", norm_groups},
            {"num_categories", num_categories},
            {"crop_slots", crop_slots},
            {"use_null_condition", use_null_condition},
            {"latent_pool2", latent_pool2}};
}

DenoiserConfig DenoiserConfig::from_json(const json& j) {
    DenoiserConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.cond_dim = j.at("cond_dim").get<int>();
    c.time_dim = j.at("time_dim").get<int>();
    c.norm_groups = j.at("norm_groups").get<int>();
    c.num_categories = j.at("num_categories").get<int>();
    c.crop_slots = j.at("crop_slots").get<int>();
    c.use_null_condition = j.at("use_null_condition").get<bool>();
    c.latent_pool2 = j.at("latent_pool2").get<bool>();
    return c;
}

namespace {
constexpr int kTimeHidden = 128;
}

UNetDenoiser::UNetDenoiser(const DenoiserConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
    if (cfg.base_channels < cfg.norm_groups || cfg.base_channels % cfg.norm_groups != 0)
        throw ConfigError("denoiser: base_channels must be a multiple of norm_groups");
    if (cfg.image_size % 8 != 0)
        throw ConfigError("denoiser: image_size must be divisible by 8");
    if (cfg.time_dim % 2 != 0) throw ConfigError("denoiser: time_dim must be even");
    Rng rng(init_seed, "unet_init");
    ParamStore& ps = params_;
    int c1 = cfg.base_channels, c2 = 2 * c1, c3 = 4 * c1, cm = 6 * c1;
    int g = cfg.norm_groups;
    int emb = cfg.cond_dim;

    time_l1_ = make_linear(ps, "time.l1", cfg.time_dim, kTimeHidden, rng);
    time_l2_ = make_linear(ps, "time.l2", kTimeHidden, kTimeHidden, rng);
    cond_gain_ = &ps.create("cond.gain", {emb});
    std::fill(cond_gain_->value.begin(), cond_gain_->value.end(), 1.0f);
    Param& cat = ps.create("cond.cat_embed", {cfg.num_categories, emb});
    init_normal(cat, rng, 0.3);
    Param& null_tok = ps.create("cond.null_token", {emb});
    init_normal(null_tok, rng, 0.3);

    auto res = [&](const std::string& name, int c) {
        ResBlock b;
        b.norm = make_group_norm(ps, name + ".norm", c, g);
        b.conv = make_conv(ps, name + ".conv", c, c, 3, 1, 1, rng);
        b.tproj = make_linear(ps, name + ".tproj", kTimeHidden, c, rng);
        return b;
    };
    auto attn = [&](const std::string& name, int c, bool cross) {
        AttnBlock b;
        b.cross = cross;
        b.norm = make_group_norm(ps, name + ".norm", c, g);
        b.q = make_linear(ps, name + ".q", c, c, rng);
        b.k = make_linear(ps, name + ".k", cross ? emb : c, c, rng);
        b.v = make_linear(ps, name + ".v", cross ? emb : c, c, rng);
        b.o = make_linear(ps, name + ".o", c, c, rng);
        return b;
    };

    stem_ = make_conv(ps, "stem", cfg.in_channels, c1, 3, 1, 1, rng);
    down1_ = make_conv(ps, "down1", c1, c2, 3, 2, 1, rng);
    enc1_ = res("enc1", c2);
    down2_ = make_conv(ps, "down2", c2, c3, 3, 2, 1, rng);
    enc2_ = res("enc2", c3);
    enc2_attn_ = attn("enc2.attn", c3, true);
    down3_ = make_conv(ps, "down3", c3, cm, 3, 2, 1, rng);
    mid1_ = res("mid1", cm);
    mid_self_ = attn("mid.self", cm, false);
    mid_cross_ = attn("mid.cross", cm, true);
    mid2_ = res("mid2", cm);
    fuse2_ = make_conv(ps, "fuse2", cm + c3, c3, 1, 1, 0, rng);
    dec2_ = res("dec2", c3);
    dec2_attn_ = attn("dec2.attn", c3, true);
    fuse1_ = make_conv(ps, "fuse1", c3 + c2, c2, 1, 1, 0, rng);
    dec1_ = res("dec1", c2);
    fuse0_ = make_conv(ps, "fuse0", c2 + c1, c1, 1, 1, 0, rng);
    dec0_ = res("dec0", c1);
    out_norm_ = make_group_norm(ps, "out.norm", c1, g);
    out_conv_ = make_conv(ps, "out.conv", c1, cfg.in_channels, 3, 1, 1, rng,
                          /*zero_init=*/true);
}

Param& UNetDenoiser::null_token() { return params_.at("cond.null_token"); }
Param& UNetDenoiser::category_embed() { return params_.at("cond.cat_embed"); }

std::vector<LinearLayer*> UNetDenoiser::attention_linears() {
    std::vector<LinearLayer*> out;
    for (AttnBlock* b : {&enc2_attn_, &mid_self_, &mid_cross_, &dec2_attn_}) {
        out.push_back(&b->q);
        out.push_back(&b->k);
        out.push_back(&b->v);
        out.push_back(&b->o);
    }
    return out;
}

Tensor UNetDenoiser::res_forward(Tape& t, ResBlock& blk, Tensor x, Tensor temb) {
    Tensor h = blk.conv.forward(t, silu(blk.norm.forward(t, x)));
    Tensor bias = blk.tproj.forward(t, temb);  // [B, C]
    h = add_sample_channel_bias(h, bias);
    return add(x, h);
}

Tensor UNetDenoiser::attn_forward(Tape& t, AttnBlock& blk, Tensor x, Tensor cond_n) {
    const Dims& d = x.dims();
    Tensor h = blk.norm.forward(t, x);
    Tensor tok = chw_to_tokens(h);
    Tensor q = blk.q.forward(t, tok);
    Tensor k = blk.cross ? blk.k.forward(t, cond_n) : blk.k.forward(t, tok);
    Tensor v = blk.cross ? blk.v.forward(t, cond_n) : blk.v.forward(t, tok);
    Tensor o = blk.o.forward(t, attention(q, k, v));
    return add(x, tokens_to_chw(o, d[2], d[3]));
}

Tensor UNetDenoiser::forward(Tape& t, Tensor x, const std::vector<int>& tsteps,
                             Tensor cond) {
    const Dims& d = x.dims();
    if (d.size() != 4 || d[1] != cfg_.in_channels || d[2] != cfg_.image_size ||
        d[3] != cfg_.image_size)
        throw std::invalid_argument("denoiser: bad input shape " + dims_str(d));
    int B = d[0];
    if (static_cast<int>(tsteps.size()) != B)
        throw std::invalid_argument("denoiser: tsteps size mismatch");

    if (!cond.defined()) {
        if (!cfg_.use_null_condition)
            throw ConfigError("denoiser: null condition requested but not trained");
        Tensor row = t.param(null_token());
        Tensor seq = repeat_row(row, 1 + cfg_.crop_slots);
        std::vector<Tensor> per(B, seq);
        cond = stack(per);
    }
    const Dims& dc = cond.dims();
    if (dc.size() != 3 || dc[0] != B || dc[2] != cfg_.cond_dim)
        throw std::invalid_argument("denoiser: bad condition shape " + dims_str(dc));

    std::vector<float> tfeat = timestep_features(tsteps, cfg_.time_dim);
    Tensor tf = t.input({B, cfg_.time_dim}, tfeat);
    Tensor temb = silu(time_l2_.forward(t, silu(time_l1_.forward(t, tf))));

    Tensor cond_n = rmsnorm_rows(cond, t.param(*cond_gain_));

    Tensor h0 = stem_.forward(t, x);
    Tensor h1 = res_forward(t, enc1_, down1_.forward(t, h0), temb);
    Tensor h2 = res_forward(t, enc2_, down2_.forward(t, h1), temb);
    h2 = attn_forward(t, enc2_attn_, h2, cond_n);
    Tensor m = res_forward(t, mid1_, down3_.forward(t, h2), temb);
    m = attn_forward(t, mid_self_, m, Tensor());
    m = attn_forward(t, mid_cross_, m, cond_n);
    m = res_forward(t, mid2_, m, temb);
    Tensor u2 = fuse2_.forward(t, concat_channels(upsample_nearest2(m), h2));
    u2 = res_forward(t, dec2_, u2, temb);
    u2 = attn_forward(t, dec2_attn_, u2, cond_n);
    Tensor u1 = fuse1_.forward(t, concat_channels(upsample_nearest2(u2), h1));
    u1 = res_forward(t, dec1_, u1, temb);
    Tensor u0 = fuse0_.forward(t, concat_channels(upsample_nearest2(u1), h0));
    u0 = res_forward(t, dec0_, u0, temb);
    return out_conv_.forward(t, silu(out_norm_.forward(t, u0)));
}

std::vector<float> UNetDenoiser::predict(const std::vector<float>& x, const Dims& dims,
                                         const std::vector<int>& tsteps,
                                         const std::vector<float>& cond, int cond_rows) {
    Tape tape;
    tape.set_grad_enabled(false);
    Tensor xin = tape.input(dims, x);
    Tensor cin;
    if (!cond.empty())
        cin = tape.input({dims[0], cond_rows, cfg_.cond_dim}, cond);
    Tensor out = forward(tape, xin, tsteps, cin);
    return std::vector<float>(out.data(), out.data() + out.size());
}

// ---- DiffusionModel ----

DiffusionModel DiffusionModel::create(const DenoiserConfig& arch,
                                      const NoiseSchedule& sched, uint64_t init_seed) {
    DiffusionModel m;
    m.arch = arch;
    m.schedule = sched;
    m.net = std::make_unique<UNetDenoiser>(arch, init_seed);
    return m;
}

void DiffusionModel::save(const std::string& path, const json& extra_meta) const {
    json meta;
    meta["kind"] = "denoiser";
    meta["arch"] = arch.to_json();
    meta["schedule"] = {{"total_steps", schedule.total_steps},
                        {"kind", schedule.kind},
                        {"beta_min", schedule.beta_min},
                        {"beta_max", schedule.beta_max}};
    meta["extra"] = extra_meta;
    save_checkpoint(path, net->params(), meta);
}

void DiffusionModel::save(const std::string& path) const { save(path, json::object()); }

DiffusionModel DiffusionModel::load(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    const json& meta = ckpt.meta();
    if (meta.at("kind").get<std::string>() != "denoiser")
        throw std::runtime_error("not a denoiser checkpoint: " + path);
    DiffusionModel m;
    m.arch = DenoiserConfig::from_json(meta.at("arch"));
    const json& sj = meta.at("schedule");
    m.schedule = make_schedule(sj.at("total_steps").get<int>(),
                               sj.at("kind").get<std::string>(),
                               sj.at("beta_min").get<double>(),
                               sj.at("beta_max").get<double>());
    m.net = std::make_unique<UNetDenoiser>(m.arch, 0);
    load_arrays_into(ckpt, m.net->params());
    return m;
}

}  // namespace diffaug
