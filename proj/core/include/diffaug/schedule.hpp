#pragma once

#include <string>
#include <vector>

namespace diffaug {

// DDPM coefficient tables. Arrays are stored for t = 1..T at index t-1;
// accessors take t in [1, T] (alpha_bar_at(0) == 1 by convention).
struct NoiseSchedule {
    int total_steps = 0;
    std::string kind = "linear";
    double beta_min = 1e-4;
    double beta_max = 0.02;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sigma;

    double beta_at(int t) const { return beta.at(t - 1); }
    double alpha_at(int t) const { return alpha.at(t - 1); }
    double alpha_bar_at(int t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }
    double sigma_at(int t) const { return sigma.at(t - 1); }
};

// kind is "linear" or "cosine". sigma_t^2 = beta_t * (1 - abar_{t-1}) / (1 - abar_t),
// with sigma_1 = sqrt(beta_1).
NoiseSchedule make_schedule(int total_steps, const std::string& kind = "linear",
                            double beta_min = 1e-4, double beta_max = 0.02);

}  // namespace diffaug
