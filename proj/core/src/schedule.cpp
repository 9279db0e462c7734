#include "diffaug/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace diffaug {

NoiseSchedule make_schedule(int total_steps, const std::string& kind, double beta_min,
                            double beta_max) {
    if (total_steps < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");

    NoiseSchedule s;
    s.total_steps = total_steps;
    s.kind = kind;
    s.beta_min = beta_min;
    s.beta_max = beta_max;
    s.beta.resize(total_steps);
    s.alpha.resize(total_steps);
    s.alpha_bar.resize(total_steps);
    s.sigma.resize(total_steps);

    if (kind == "linear") {
        for (int i = 0; i < total_steps; ++i) {
            double f = total_steps == 1 ? 0.0 : static_cast<double>(i) / (total_steps - 1);
            s.beta[i] = beta_min + f * (beta_max - beta_min);
        }
    } else if (kind == "cosine") {
        auto abar = [&](double t) {
            double v = std::cos((t + 0.008) / 1.008 * M_PI / 2.0);
            return v * v;
        };
        double prev = 1.0;
        for (int i = 0; i < total_steps; ++i) {
            double cur = abar(static_cast<double>(i + 1) / total_steps) / abar(0.0);
            double b = 1.0 - cur / prev;
            s.beta[i] = std::min(std::max(b, 1e-8), 0.999);
            prev = cur;
        }
    } else {
        throw std::invalid_argument("make_schedule: unknown kind '" + kind + "'");
    }

    double running = 1.0;
    for (int i = 0; i < total_steps; ++i) {
        s.alpha[i] = 1.0 - s.beta[i];
        running *= s.alpha[i];
        s.alpha_bar[i] = running;
    }
    for (int i = 0; i < total_steps; ++i) {
        if (i == 0) {
            s.sigma[i] = std::sqrt(s.beta[i]);
        } else {
            double v = s.beta[i] * (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]);
            s.sigma[i] = std::sqrt(v);
        }
    }
    return s;
}

}  // namespace diffaug
