#include <benchmark/benchmark.h>

#include <random>

#include "diffaug/conditions.hpp"
#include "diffaug/diffusion.hpp"
#include "diffaug/reward.hpp"
#include "diffaug/scene.hpp"
#include "diffaug/unet.hpp"

using namespace diffaug;

namespace {

std::vector<float> rand_vec(size_t n, uint64_t seed) {
    std::mt19937_64 eng(seed);
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    std::vector<float> v(n);
    for (auto& x : v) x = d(eng);
    return v;
}

void BM_conv2d_forward(benchmark::State& state) {
    int b = static_cast<int>(state.range(0));
    std::vector<float> x = rand_vec(size_t(b) * 16 * 64 * 64, 1);
    std::vector<float> w = rand_vec(16u * 16 * 9, 2);
    std::vector<float> bias = rand_vec(16, 3);
    for (auto _ : state) {
        Tape tape;
        tape.set_grad_enabled(false);
        Tensor xt = tape.input_borrow({b, 16, 64, 64}, x.data());
        Tensor wt = tape.input_borrow({16, 16, 3, 3}, w.data());
        Tensor bt = tape.input_borrow({16}, bias.data());
        benchmark::DoNotOptimize(conv2d(xt, wt, bt, 1, 1).data());
    }
    state.SetItemsProcessed(state.iterations() * b);
}
BENCHMARK(BM_conv2d_forward)->Arg(1)->Arg(8);

void BM_conv2d_train_step(benchmark::State& state) {
    int b = static_cast<int>(state.range(0));
    std::vector<float> x = rand_vec(size_t(b) * 16 * 64 * 64, 1);
    Param w;
    w.shape = {16, 16, 3, 3};
    w.value = rand_vec(16u * 16 * 9, 2);
    w.grad.assign(w.value.size(), 0.0f);
    for (auto _ : state) {
        Tape tape;
        Tensor xt = tape.input_borrow({b, 16, 64, 64}, x.data());
        Tensor wt = tape.param(w);
        Tensor y = conv2d(xt, wt, Tensor(), 1, 1);
        tape.backward(mean_all(square(y)));
        tape.accumulate_param_grads();
        w.zero_grad();
    }
    state.SetItemsProcessed(state.iterations() * b);
}
BENCHMARK(BM_conv2d_train_step)->Arg(8);

void BM_denoiser_forward(benchmark::State& state) {
    int b = static_cast<int>(state.range(0));
    DenoiserConfig arch;
    UNetDenoiser net(arch, 42);
    std::vector<float> x = rand_vec(size_t(b) * 3 * 64 * 64, 4);
    std::vector<float> cond = rand_vec(size_t(b) * 10 * arch.cond_dim, 5);
    std::vector<int> ts(b, 100);
    for (auto _ : state)
        benchmark::DoNotOptimize(net.predict(x, {b, 3, 64, 64}, ts, cond, 10));
    state.SetItemsProcessed(state.iterations() * b);
}
BENCHMARK(BM_denoiser_forward)->Arg(1)->Arg(8);

void BM_sampler_50_steps(benchmark::State& state) {
    DenoiserConfig arch;
    NoiseSchedule sched = make_schedule(200);
    DiffusionModel model = DiffusionModel::create(arch, sched, 42);
    TokenSeq cond;
    cond.rows = 10;
    cond.dim = arch.cond_dim;
    cond.data = rand_vec(size_t(10) * arch.cond_dim, 6);
    SampleConfig cfg;
    cfg.steps = 50;
    cfg.guidance = 2.0;
    uint64_t seed = 0;
    for (auto _ : state)
        benchmark::DoNotOptimize(sample_images(model, {cond}, cfg, seed++));
}
BENCHMARK(BM_sampler_50_steps)->Unit(benchmark::kMillisecond);

void BM_counting_loss(benchmark::State& state) {
    SceneGenConfig gen;
    Scene scene = generate_scene(gen, 9);
    DetectorConfig dc;
    for (const auto& c : gen.categories) dc.vocabulary.push_back(c.name);
    GridDetector det(dc, 7);
    PromptSpec prompt = build_prompt(count_by_category(scene.annotations, gen.categories));
    CountingLossConfig cfg;
    cfg.gamma = 0;
    for (auto _ : state)
        benchmark::DoNotOptimize(counting_loss(scene.image, prompt, det, cfg, 1));
}
BENCHMARK(BM_counting_loss)->Unit(benchmark::kMicrosecond);

void BM_scene_generation(benchmark::State& state) {
    SceneGenConfig gen;
    uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(generate_scene(gen, seed++));
}
BENCHMARK(BM_scene_generation)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
