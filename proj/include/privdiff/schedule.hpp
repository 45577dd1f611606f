#pragma once

#include <cmath>
#include <vector>

#include "privdiff/errors.hpp"
#include "privdiff/tensor.hpp"

namespace privdiff {

// Forward-process constants of the diffusion chain: beta_t, alpha_t = 1-beta_t
// and the running product alpha_bar_t, indexed 1..T (stored 0-based).
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double beta_at(int t) const { return beta[static_cast<size_t>(t - 1)]; }
    double alpha_at(int t) const { return alpha[static_cast<size_t>(t - 1)]; }
    double alpha_bar_at(int t) const { return alpha_bar[static_cast<size_t>(t - 1)]; }
};

// Linear beta ramp from beta_start to beta_end over T steps.
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("make_schedule: T must be at least 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ConfigError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double b = (T == 1) ? beta_start
                            : beta_start + (beta_end - beta_start) * t / (T - 1);
        s.beta[static_cast<size_t>(t)] = b;
        s.alpha[static_cast<size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise
inline Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& s) {
    if (t < 1 || t > s.T) throw ContractError("q_sample: t out of range");
    if (!z0.same_shape(noise)) throw ShapeError("q_sample: noise shape mismatch");
    double ab = s.alpha_bar_at(t);
    double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
    Tensor out(z0.shape);
    for (int64_t i = 0; i < z0.numel(); ++i) out[i] = c0 * z0[i] + c1 * noise[i];
    return out;
}

}  // namespace privdiff
