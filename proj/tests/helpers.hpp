#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "diffaug/tensor.hpp"

namespace testutil {

inline std::vector<float> random_vec(size_t n, uint64_t seed, float lo = -1.0f,
                                     float hi = 1.0f) {
    std::mt19937_64 eng(seed);
    std::uniform_real_distribution<float> d(lo, hi);
    std::vector<float> out(n);
    for (auto& v : out) v = d(eng);
    return out;
}

// Central-difference gradient of a scalar-valued function of one input vector.
inline std::vector<double> finite_diff(
    const std::function<double(const std::vector<float>&)>& f, std::vector<float> x,
    double h = 1e-3) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        float keep = x[i];
        x[i] = keep + static_cast<float>(h);
        double up = f(x);
        x[i] = keep - static_cast<float>(h);
        double dn = f(x);
        x[i] = keep;
        g[i] = (up - dn) / (2.0 * h);
    }
    return g;
}

// Largest |analytic - numeric| scaled by max(1, |numeric|).
inline double max_rel_err(const std::vector<double>& numeric, const float* analytic) {
    double worst = 0.0;
    for (size_t i = 0; i < numeric.size(); ++i) {
        double denom = std::max(1.0, std::abs(numeric[i]));
        worst = std::max(worst, std::abs(numeric[i] - analytic[i]) / denom);
    }
    return worst;
}

struct TmpDir {
    std::filesystem::path path;
    explicit TmpDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("diffaug_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TmpDir() { std::filesystem::remove_all(path); }
    std::string str() const { return path.string(); }
};

// The denoiser's output conv is zero-initialized, so an untrained base blocks
// every gradient path to the adapters. Tests that exercise adapter training
// on a fresh model give it a nonzero output head first.
inline void liven_output_conv(diffaug::Param& out_conv_w, uint64_t seed) {
    std::mt19937_64 eng(seed);
    std::normal_distribution<double> d(0.0, 0.05);
    for (auto& v : out_conv_w.value) v = static_cast<float>(d(eng));
}

}  // namespace testutil
