#pragma once

#include <string>
#include <vector>

#include "diffaug/image.hpp"
#include "diffaug/schedule.hpp"
#include "diffaug/tensor.hpp"
#include "diffaug/unet.hpp"

namespace diffaug {

// q-sample: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.
std::vector<float> forward_diffuse(const std::vector<float>& z0, int t,
                                   const std::vector<float>& eps,
                                   const NoiseSchedule& sched);

// Single reverse-process estimate used during training:
//   (1/sqrt(alpha_t)) * (x_t - ((1-alpha_t)/sqrt(1-abar_t)) * eps_pred) + sigma_t * z
// The noise term is dropped when include_noise is false.
std::vector<float> one_step_denoise(const std::vector<float>& x_t,
                                    const std::vector<float>& eps_pred, int t,
                                    const NoiseSchedule& sched,
                                    const std::vector<float>& z, bool include_noise);

// d(out)/d(eps_pred) of the estimate above.
double one_step_eps_coefficient(int t, const NoiseSchedule& sched);

// Tape versions with per-sample timesteps; gradients flow through eps_pred
// (and x_t). `z` must hold one standard-normal draw per element when
// include_noise is set; pass an empty vector otherwise.
Tensor forward_diffuse_node(Tensor z0, const std::vector<int>& tsteps, Tensor eps,
                            const NoiseSchedule& sched);
Tensor one_step_denoise_node(Tensor x_t, Tensor eps_pred, const std::vector<int>& tsteps,
                             const NoiseSchedule& sched, const std::vector<float>& z,
                             bool include_noise);

// Condition token sequence for one sample.
struct TokenSeq {
    int rows = 0;
    int dim = 0;
    std::vector<float> data;

    bool empty() const { return data.empty(); }
};

struct SampleConfig {
    std::string method = "euler";  // "euler" (deterministic) or "ancestral"
    int steps = 50;
    double guidance = 7.5;
    bool clamp01 = true;
};

// Evenly strided descending timestep grid from T to 1.
std::vector<int> sampler_timesteps(int total_steps, int steps);

// Classifier-free guidance blend: uncond + g * (cond - uncond).
std::vector<float> cfg_combine(const std::vector<float>& uncond,
                               const std::vector<float>& cond, double guidance);

// Reverse diffusion for a batch of conditions (one image per condition).
// guidance g != 1 runs the learned null condition as the unconditional branch:
// eps = eps_uncond + g * (eps_cond - eps_uncond). Deterministic given seed.
std::vector<std::vector<float>> sample_latents(UNetDenoiser& net,
                                               const NoiseSchedule& sched,
                                               const std::vector<TokenSeq>& conds,
                                               const SampleConfig& cfg, uint64_t seed);

// Latent hook: identity in pixel mode, 2x average pool pair in pool mode.
std::vector<float> encode_latent(const Image& img, bool pool2);
Image decode_latent(const std::vector<float>& chw, int latent_size, bool pool2);

// sample_latents + decode + clamp to [0,1].
std::vector<Image> sample_images(DiffusionModel& model,
                                 const std::vector<TokenSeq>& conds,
                                 const SampleConfig& cfg, uint64_t seed);

}  // namespace diffaug
