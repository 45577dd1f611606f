#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "privdiff/model.hpp"
#include "privdiff/schedule.hpp"

namespace privdiff {

struct DiffusionModel {
    UNetLite unet;
    NoiseSchedule schedule;
};

// Per-element mean of ||tau - tau_hat||^2.
inline double ldm_loss_value(const Tensor& tau, const Tensor& tau_hat) {
    if (!tau.same_shape(tau_hat)) throw ShapeError("ldm_loss: prediction shape mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < tau.numel(); ++i) {
        double d = tau[i] - tau_hat[i];
        acc += d * d;
    }
    return acc / static_cast<double>(tau.numel());
}

// Noise-prediction loss graph for a batch with caller-provided draws:
// z_t = q_sample(z0, t, noise), loss = mean((noise - unet(z_t, t, y))^2).
inline Val ldm_loss_graph(Tape& tape, std::map<std::string, Val>& bound,
                          const DiffusionModel& model, const Tensor& z0,
                          const std::vector<int>& ys, const std::vector<int>& ts,
                          const Tensor& noise, bool frozen_all = false) {
    if (z0.ndim() != 4) throw ShapeError("ldm_loss: z0 must be [b,c,h,w]");
    if (!z0.same_shape(noise)) throw ShapeError("ldm_loss: noise shape mismatch");
    int b = z0.dim(0);
    if (static_cast<int>(ts.size()) != b) throw ContractError("ldm_loss: one t per sample");
    int64_t per = z0.numel() / b;
    Tensor zt(z0.shape);
    for (int i = 0; i < b; ++i) {
        int t = ts[static_cast<size_t>(i)];
        if (t < 1 || t > model.schedule.T) throw ContractError("ldm_loss: t out of range");
        double ab = model.schedule.alpha_bar_at(t);
        double c0 = std::sqrt(ab), c1 = std::sqrt(1.0 - ab);
        for (int64_t j = 0; j < per; ++j)
            zt[i * per + j] = c0 * z0[i * per + j] + c1 * noise[i * per + j];
    }
    Val zt_v = tape.constant(std::move(zt));
    Val pred = model.unet.forward(tape, bound, zt_v, ts, ys, frozen_all);
    return mse(tape.constant(noise), pred);
}

// Predictor seam so the loss and sampler can be exercised against mocks:
// maps (z_t [c,h,w], t, y) to predicted noise of the same shape.
using NoisePredictor = std::function<Tensor(const Tensor&, int, int)>;

// Draws t ~ Uniform{1..T} and tau ~ N(0,I), then evaluates the prediction
// error against an arbitrary predictor. y < 0 means unconditional.
inline double ldm_loss(const NoiseSchedule& schedule, const Tensor& z0, int y, Rng& rng,
                       const NoisePredictor& predictor) {
    int t = static_cast<int>(rng.uniform_int(1, schedule.T));
    Tensor tau(z0.shape);
    rng.normal_fill(tau.ptr(), static_cast<size_t>(tau.numel()));
    Tensor zt = q_sample(z0, t, tau, schedule);
    Tensor pred = predictor(zt, t, y);
    return ldm_loss_value(tau, pred);
}

inline NoisePredictor make_predictor(const DiffusionModel& model) {
    return [&model](const Tensor& zt, int t, int y) {
        if (model.unet.cfg.conditional && y < 0)
            throw ContractError("predictor: conditional model needs a label");
        Tape tape;
        std::map<std::string, Val> bound;
        Shape batched{1, zt.dim(0), zt.dim(1), zt.dim(2)};
        Val z = tape.constant(Tensor(batched, zt.data));
        std::vector<int> ys;
        if (model.unet.cfg.conditional) ys.push_back(y);
        Val pred = model.unet.forward(tape, bound, z, {t}, ys, /*frozen_all=*/true);
        const Tensor& pv = tape.value(pred);
        return Tensor(zt.shape, pv.data);
    };
}

inline double ldm_loss(const DiffusionModel& model, const Tensor& z0, int y, Rng& rng) {
    if (model.unet.cfg.conditional == (y < 0))
        throw ContractError("ldm_loss: label must match the conditioning mode");
    return ldm_loss(model.schedule, z0, y, rng, make_predictor(model));
}

// Single-sample ancestral chain against an arbitrary predictor. Uses the same
// keyed noise streams as the batched sampler, so per-sample outputs agree
// bit-for-bit between the two paths.
inline Tensor ddpm_sample_one(const NoiseSchedule& s, const Shape& latent_shape, uint64_t seed,
                              uint64_t sample_idx, const NoisePredictor& pred, int y = -1) {
    Tensor z(latent_shape);
    {
        Rng rng = keyed_rng(seed, "sample-init", sample_idx);
        rng.normal_fill(z.ptr(), static_cast<size_t>(z.numel()));
    }
    for (int t = s.T; t >= 1; --t) {
        Tensor eps = pred(z, t, y);
        if (!eps.same_shape(z)) throw ShapeError("ddpm_sample: predictor shape mismatch");
        if (t > 1) {
            double beta = s.beta_at(t);
            double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
            double eps_coef = beta / std::sqrt(1.0 - s.alpha_bar_at(t));
            double post_var = beta * (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - s.alpha_bar_at(t));
            double post_std = std::sqrt(post_var);
            Rng rng = keyed_rng(seed, "sample-step", static_cast<uint64_t>(t), sample_idx);
            for (int64_t j = 0; j < z.numel(); ++j) {
                double mean = inv_sqrt_alpha * (z[j] - eps_coef * eps[j]);
                z[j] = mean + post_std * rng.normal();
            }
        } else {
            double ab1 = s.alpha_bar_at(1);
            double c0 = 1.0 / std::sqrt(ab1), c1 = std::sqrt(1.0 - ab1);
            for (int64_t j = 0; j < z.numel(); ++j) z[j] = c0 * (z[j] - c1 * eps[j]);
        }
        check_finite(z, "ddpm_sample step");
    }
    return z;
}

// Ancestral reverse chain from z_T ~ N(0,I). Every random draw is addressed
// by (seed, purpose, t, sample index), so results are bit-identical across
// chunk sizes and reruns.
inline Tensor ddpm_sample(const DiffusionModel& model, int count, const std::vector<int>& ys,
                          uint64_t seed, int chunk = 16) {
    if (count < 1) throw ContractError("ddpm_sample: count must be positive");
    const UNetConfig& cfg = model.unet.cfg;
    if (cfg.conditional && static_cast<int>(ys.size()) != count)
        throw ContractError("ddpm_sample: conditional model needs one label per sample");
    if (!cfg.conditional && !ys.empty())
        throw ContractError("ddpm_sample: labels supplied to an unconditional model");
    const NoiseSchedule& s = model.schedule;
    int c = cfg.latent_channels, hw = cfg.latent_hw;
    int64_t per = static_cast<int64_t>(c) * hw * hw;
    Tensor out({count, c, hw, hw});

    for (int start = 0; start < count; start += chunk) {
        int m = std::min(chunk, count - start);
        Tensor z({m, c, hw, hw});
        for (int i = 0; i < m; ++i) {
            Rng rng = keyed_rng(seed, "sample-init", static_cast<uint64_t>(start + i));
            rng.normal_fill(z.ptr() + i * per, static_cast<size_t>(per));
        }
        std::vector<int> ts(static_cast<size_t>(m));
        std::vector<int> ys_chunk;
        if (cfg.conditional)
            ys_chunk.assign(ys.begin() + start, ys.begin() + start + m);

        Tape tape;
        for (int t = s.T; t >= 1; --t) {
            std::fill(ts.begin(), ts.end(), t);
            tape.clear();
            std::map<std::string, Val> bound;
            Val zv = tape.constant(z);
            Val pred = model.unet.forward(tape, bound, zv, ts, ys_chunk, /*frozen_all=*/true);
            const Tensor& eps = tape.value(pred);

            if (t > 1) {
                double beta = s.beta_at(t);
                double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
                double eps_coef = beta / std::sqrt(1.0 - s.alpha_bar_at(t));
                double post_var = beta * (1.0 - s.alpha_bar_at(t - 1)) / (1.0 - s.alpha_bar_at(t));
                double post_std = std::sqrt(post_var);
                for (int i = 0; i < m; ++i) {
                    Rng rng = keyed_rng(seed, "sample-step", static_cast<uint64_t>(t),
                                        static_cast<uint64_t>(start + i));
                    for (int64_t j = 0; j < per; ++j) {
                        double mean = inv_sqrt_alpha * (z[i * per + j] - eps_coef * eps[i * per + j]);
                        z[i * per + j] = mean + post_std * rng.normal();
                    }
                }
            } else {
                // Final step: predicted z0 from the one-step posterior.
                double ab1 = s.alpha_bar_at(1);
                double c0 = 1.0 / std::sqrt(ab1), c1 = std::sqrt(1.0 - ab1);
                for (int64_t j = 0; j < static_cast<int64_t>(m) * per; ++j)
                    z[j] = c0 * (z[j] - c1 * eps[j]);
            }
            check_finite(z, "ddpm_sample step");
        }
        std::copy(z.data.begin(), z.data.end(), out.ptr() + static_cast<int64_t>(start) * per);
    }
    return out;
}

}  // namespace privdiff
