#include "diffaug/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace diffaug {

namespace {

void check_t(int t, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.total_steps)
        throw std::invalid_argument("timestep out of range: " + std::to_string(t));
}

}  // namespace

std::vector<float> forward_diffuse(const std::vector<float>& z0, int t,
                                   const std::vector<float>& eps,
                                   const NoiseSchedule& sched) {
    check_t(t, sched);
    if (z0.size() != eps.size())
        throw std::invalid_argument("forward_diffuse: shape mismatch");
    double abar = sched.alpha_bar_at(t);
    float a = static_cast<float>(std::sqrt(abar));
    float b = static_cast<float>(std::sqrt(1.0 - abar));
    std::vector<float> out(z0.size());
    for (size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

double one_step_eps_coefficient(int t, const NoiseSchedule& sched) {
    check_t(t, sched);
    double alpha = sched.alpha_at(t);
    double abar = sched.alpha_bar_at(t);
    return -(1.0 - alpha) / (std::sqrt(alpha) * std::sqrt(1.0 - abar));
}

std::vector<float> one_step_denoise(const std::vector<float>& x_t,
                                    const std::vector<float>& eps_pred, int t,
                                    const NoiseSchedule& sched,
                                    const std::vector<float>& z, bool include_noise) {
    check_t(t, sched);
    if (x_t.size() != eps_pred.size())
        throw std::invalid_argument("one_step_denoise: shape mismatch");
    if (include_noise && z.size() != x_t.size())
        throw std::invalid_argument("one_step_denoise: noise shape mismatch");
    double alpha = sched.alpha_at(t);
    double abar = sched.alpha_bar_at(t);
    double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    double eps_coef = (1.0 - alpha) / std::sqrt(1.0 - abar);
    double sigma = sched.sigma_at(t);
    std::vector<float> out(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) {
        double v = inv_sqrt_alpha * (x_t[i] - eps_coef * eps_pred[i]);
        if (include_noise) v += sigma * z[i];
        out[i] = static_cast<float>(v);
    }
    return out;
}

namespace {

// Per-sample affine combine: out[b] = ca[b]*x[b] + cb[b]*y[b] + cc[b]*z[b].
Tensor per_sample_affine(Tensor x, Tensor y, const std::vector<float>& ca,
                         const std::vector<float>& cb, const std::vector<float>& z,
                         const std::vector<float>& cz) {
    const Dims& d = x.dims();
    if (d != y.dims()) throw std::invalid_argument("per_sample_affine: shape mismatch");
    int B = d[0];
    int64_t stride = x.size() / B;
    Tape& T = *x.tape();
    bool g = T.wants_grad(x.id()) || T.wants_grad(y.id());
    Tensor out = T.alloc(d, g);
    const float* xv = x.data();
    const float* yv = y.data();
    float* ov = T.mutable_val(out);
    for (int b = 0; b < B; ++b)
        for (int64_t i = 0; i < stride; ++i) {
            int64_t k = b * stride + i;
            float v = ca[b] * xv[k] + cb[b] * yv[k];
            if (!z.empty()) v += cz[b] * z[k];
            ov[k] = v;
        }
    if (g) {
        T.set_back(out, [&T, xi = x.id(), yi = y.id(), oi = out.id(), B, stride, ca, cb] {
            const float* og = T.node(oi).grad.data();
            if (T.wants_grad(xi)) {
                float* gx = T.grad_buffer(xi);
                for (int b = 0; b < B; ++b)
                    for (int64_t i = 0; i < stride; ++i)
                        gx[b * stride + i] += ca[b] * og[b * stride + i];
            }
            if (T.wants_grad(yi)) {
                float* gy = T.grad_buffer(yi);
                for (int b = 0; b < B; ++b)
                    for (int64_t i = 0; i < stride; ++i)
                        gy[b * stride + i] += cb[b] * og[b * stride + i];
            }
        });
    }
    return out;
}

}  // namespace

Tensor forward_diffuse_node(Tensor z0, const std::vector<int>& tsteps, Tensor eps,
                            const NoiseSchedule& sched) {
    int B = z0.dims()[0];
    if (static_cast<int>(tsteps.size()) != B)
        throw std::invalid_argument("forward_diffuse_node: tsteps size mismatch");
    std::vector<float> ca(B), cb(B);
    for (int b = 0; b < B; ++b) {
        check_t(tsteps[b], sched);
        double abar = sched.alpha_bar_at(tsteps[b]);
        ca[b] = static_cast<float>(std::sqrt(abar));
        cb[b] = static_cast<float>(std::sqrt(1.0 - abar));
    }
    return per_sample_affine(z0, eps, ca, cb, {}, {});
}

Tensor one_step_denoise_node(Tensor x_t, Tensor eps_pred, const std::vector<int>& tsteps,
                             const NoiseSchedule& sched, const std::vector<float>& z,
                             bool include_noise) {
    int B = x_t.dims()[0];
    if (static_cast<int>(tsteps.size()) != B)
        throw std::invalid_argument("one_step_denoise_node: tsteps size mismatch");
    if (include_noise && static_cast<int64_t>(z.size()) != x_t.size())
        throw std::invalid_argument("one_step_denoise_node: noise shape mismatch");
    std::vector<float> ca(B), cb(B), cz(B);
    for (int b = 0; b < B; ++b) {
        check_t(tsteps[b], sched);
        ca[b] = static_cast<float>(1.0 / std::sqrt(sched.alpha_at(tsteps[b])));
        cb[b] = static_cast<float>(one_step_eps_coefficient(tsteps[b], sched));
        cz[b] = static_cast<float>(include_noise ? sched.sigma_at(tsteps[b]) : 0.0);
    }
    return per_sample_affine(x_t, eps_pred, ca, cb, include_noise ? z : std::vector<float>{},
                             cz);
}

// ---- sampling ----

std::vector<float> cfg_combine(const std::vector<float>& uncond,
                               const std::vector<float>& cond, double guidance) {
    if (uncond.size() != cond.size())
        throw std::invalid_argument("cfg_combine: shape mismatch");
    if (guidance == 1.0) return cond;
    if (guidance == 0.0) return uncond;
    std::vector<float> out(cond.size());
    float g = static_cast<float>(guidance);
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = uncond[i] + g * (cond[i] - uncond[i]);
    return out;
}

std::vector<int> sampler_timesteps(int total_steps, int steps) {
    if (steps < 1) throw std::invalid_argument("sampler_timesteps: steps must be >= 1");
    steps = std::min(steps, total_steps);
    std::vector<int> ts(steps);
    if (steps == 1) {
        ts[0] = total_steps;
    } else {
        for (int i = 0; i < steps; ++i) {
            double f = static_cast<double>(i) / (steps - 1);
            ts[i] = static_cast<int>(std::lround(total_steps - f * (total_steps - 1)));
        }
    }
    return ts;
}

std::vector<std::vector<float>> sample_latents(UNetDenoiser& net,
                                               const NoiseSchedule& sched,
                                               const std::vector<TokenSeq>& conds,
                                               const SampleConfig& cfg, uint64_t seed) {
    if (conds.empty()) throw std::invalid_argument("sample_latents: no conditions");
    if (cfg.guidance < 0.0) throw std::invalid_argument("sample_latents: guidance < 0");
    const DenoiserConfig& arch = net.config();
    int B = static_cast<int>(conds.size());
    int rows = conds[0].rows;
    for (const auto& c : conds) {
        if (c.rows != rows || c.dim != arch.cond_dim)
            throw std::invalid_argument("sample_latents: inconsistent condition shapes");
    }
    bool need_uncond = cfg.guidance != 1.0;
    if (need_uncond && !arch.use_null_condition)
        throw ConfigError("sample_latents: guidance != 1 but the model has no null condition");

    int side = arch.image_size;
    Dims xd{B, arch.in_channels, side, side};
    int64_t n = dims_numel(xd);
    std::vector<float> x(n);
    Rng rng(seed, "sampler");
    rng.fill_normal(x);

    std::vector<float> cond_flat;
    cond_flat.reserve(static_cast<size_t>(B) * rows * arch.cond_dim);
    for (const auto& c : conds) cond_flat.insert(cond_flat.end(), c.data.begin(), c.data.end());

    std::vector<int> ts = sampler_timesteps(sched.total_steps, cfg.steps);
    ts.push_back(0);

    std::vector<float> noise(n);
    for (size_t i = 0; i + 1 < ts.size(); ++i) {
        int t = ts[i];
        int t_prev = ts[i + 1];
        std::vector<int> tvec(B, t);

        std::vector<float> eps_c =
            net.predict(x, xd, tvec, cond_flat, rows);
        std::vector<float> eps_hat;
        if (!need_uncond) {
            eps_hat = std::move(eps_c);
        } else {
            std::vector<float> eps_u = net.predict(x, xd, tvec, {}, 0);
            eps_hat = cfg_combine(eps_u, eps_c, cfg.guidance);
        }

        double abar_t = sched.alpha_bar_at(t);
        double abar_p = sched.alpha_bar_at(t_prev);
        double sa = std::sqrt(abar_t), sb = std::sqrt(1.0 - abar_t);
        if (cfg.method == "euler") {
            // Deterministic update on the schedule grid: reconstruct the clean
            // estimate and renoise it to the previous level.
            double ca = std::sqrt(abar_p);
            double cb = std::sqrt(1.0 - abar_p);
            for (int64_t k = 0; k < n; ++k) {
                double x0 = (x[k] - sb * eps_hat[k]) / sa;
                x[k] = static_cast<float>(ca * x0 + cb * eps_hat[k]);
            }
        } else if (cfg.method == "ancestral") {
            double beta_eff = 1.0 - abar_t / abar_p;
            double sigma =
                t_prev == 0 ? 0.0
                            : std::sqrt(beta_eff * (1.0 - abar_p) / (1.0 - abar_t));
            double cb = std::sqrt(std::max(0.0, 1.0 - abar_p - sigma * sigma));
            if (sigma > 0.0) rng.fill_normal(noise);
            for (int64_t k = 0; k < n; ++k) {
                double x0 = (x[k] - sb * eps_hat[k]) / sa;
                double v = std::sqrt(abar_p) * x0 + cb * eps_hat[k];
                if (sigma > 0.0) v += sigma * noise[k];
                x[k] = static_cast<float>(v);
            }
        } else {
            throw std::invalid_argument("sample_latents: unknown method " + cfg.method);
        }
    }

    std::vector<std::vector<float>> out(B);
    int64_t stride = n / B;
    for (int b = 0; b < B; ++b) {
        out[b].assign(x.begin() + b * stride, x.begin() + (b + 1) * stride);
        if (cfg.clamp01)
            for (float& v : out[b]) v = std::clamp(v, 0.0f, 1.0f);
    }
    return out;
}

std::vector<float> encode_latent(const Image& img, bool pool2) {
    std::vector<float> chw = to_chw(img);
    if (!pool2) return chw;
    int h = img.height, w = img.width, c = img.channels;
    int oh = h / 2, ow = w / 2;
    std::vector<float> out(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                const float* src = chw.data() + static_cast<size_t>(ch) * h * w;
                out[(static_cast<size_t>(ch) * oh + y) * ow + x] =
                    0.25f * (src[(2 * y) * w + 2 * x] + src[(2 * y) * w + 2 * x + 1] +
                             src[(2 * y + 1) * w + 2 * x] + src[(2 * y + 1) * w + 2 * x + 1]);
            }
    return out;
}

Image decode_latent(const std::vector<float>& chw, int latent_size, bool pool2) {
    int c = 3;
    if (!pool2) return from_chw(chw.data(), latent_size, latent_size, c);
    int out_side = latent_size * 2;
    Image img(out_side, out_side, c);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < out_side; ++y)
            for (int x = 0; x < out_side; ++x)
                img.at(y, x, ch) =
                    chw[(static_cast<size_t>(ch) * latent_size + y / 2) * latent_size + x / 2];
    return img;
}

std::vector<Image> sample_images(DiffusionModel& model, const std::vector<TokenSeq>& conds,
                                 const SampleConfig& cfg, uint64_t seed) {
    auto latents = sample_latents(*model.net, model.schedule, conds, cfg, seed);
    std::vector<Image> out;
    out.reserve(latents.size());
    for (auto& l : latents) {
        Image img = decode_latent(l, model.arch.image_size, model.arch.latent_pool2);
        for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
        out.push_back(std::move(img));
    }
    return out;
}

}  // namespace diffaug
