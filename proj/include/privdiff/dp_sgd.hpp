#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "privdiff/accountant.hpp"
#include "privdiff/autodiff.hpp"
#include "privdiff/diffusion.hpp"
#include "privdiff/rng.hpp"

namespace privdiff {

// Poisson-subsampled per-sample-clipped noisy SGD over the trainable subset.
// Every random draw is keyed by (seed, purpose, step, sample), so runs are
// reproducible bit-for-bit, resumable from a step index, and invariant to the
// physical microbatch size.

struct DPConfig {
    int batch = 0;          // expected (logical) batch size B; normalizer is fixed 1/B
    double clip = 1.0;      // clipping norm C; +inf is the plain-SGD sentinel
    double sigma = 0.0;     // noise multiplier
    double lr = 0.1;        // learning rate eta
    int steps = 0;          // iterations P
    double delta = 1e-5;
    uint64_t seed = 0;
    int microbatch = 0;     // memory knob; <= 0 means one physical batch
    bool research_rng = true;  // seeded counter-based PRNG; a deployment would
                               // need a cryptographic noise source

    void validate(int dataset_n) const {
        if (dataset_n < 1) throw DataError("dp-sgd: empty private dataset");
        if (batch < 1) throw ConfigError("dp-sgd: batch size must be positive");
        if (batch > dataset_n) throw ConfigError("dp-sgd: q = B/N must lie in (0,1]");
        if (!(clip > 0.0)) throw ConfigError("dp-sgd: clipping norm must be positive");
        if (sigma < 0.0) throw ConfigError("dp-sgd: noise multiplier must be non-negative");
        if (lr < 0.0) throw ConfigError("dp-sgd: learning rate must be non-negative");
        if (steps < 0) throw ConfigError("dp-sgd: negative step count");
    }

    double q(int dataset_n) const { return static_cast<double>(batch) / dataset_n; }
};

struct StepReport {
    int64_t step = 0;
    int realized_batch = 0;        // Poisson draw size
    int physical_microbatches = 0;
    double preclip_min = 0.0;
    double preclip_mean = 0.0;
    double preclip_max = 0.0;
    double fraction_clipped = 0.0;
    double noise_norm = 0.0;
    int64_t trainable_count = 0;
    int clip_violations = 0;  // post-clip norms above C; must stay zero
};

// Step 1: independent inclusion of each index with probability q.
inline std::vector<int> poisson_subsample(int n, double q, Rng& rng) {
    if (!(q > 0.0 && q <= 1.0)) throw ContractError("poisson_subsample: q must lie in (0,1]");
    std::vector<int> out;
    if (q == 1.0) {
        out.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = i;
        return out;
    }
    for (int i = 0; i < n; ++i)
        if (rng.uniform() < q) out.push_back(i);
    return out;
}

// Step 3: joint clipping across all trainable parameters,
// g_hat = g / max(1, ||g||_2 / C).
inline GradMap clip_gradient(const GradMap& g, double clip) {
    if (!(clip > 0.0)) throw ContractError("clip_gradient: C must be positive");
    double ratio = g.global_norm / clip;  // 0 when clip is +inf
    double factor = std::max(1.0, ratio);
    GradMap out = g;
    double inv = 1.0 / factor;
    for (auto& [name, tensor] : out.grads)
        for (auto& v : tensor.data) v *= inv;
    out.compute_norm();
    return out;
}

inline GradMap zero_like_grads(const ParamStore& params, const std::vector<std::string>& names) {
    GradMap gm;
    for (const std::string& n : names) gm.grads[n] = Tensor(params.entry(n).value.shape);
    gm.global_norm = 0.0;
    return gm;
}

// Step 4: g_tilde = (1/B) (sum of clipped grads + N(0, sigma^2 C^2 I)).
// The noise vector is drawn once per logical batch over the concatenated
// parameter vector in name order; sigma == 0 adds nothing (bitwise).
inline GradMap noisy_aggregate(const std::vector<GradMap>& clipped, double sigma, double clip,
                               int batch, Rng& noise_rng, GradMap aggregate,
                               double* noise_norm_out = nullptr) {
    if (batch < 1) throw ContractError("noisy_aggregate: batch must be positive");
    for (const GradMap& g : clipped) {
        for (auto& [name, acc] : aggregate.grads) {
            const Tensor& src = g.grads.at(name);
            for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += src[i];
        }
    }
    double noise_norm = 0.0;
    if (sigma > 0.0) {
        double stddev = sigma * clip;
        if (!std::isfinite(stddev))
            throw ContractError("noisy_aggregate: noise undefined for infinite clipping norm");
        for (auto& [name, acc] : aggregate.grads)
            for (int64_t i = 0; i < acc.numel(); ++i) {
                double n = stddev * noise_rng.normal();
                noise_norm += n * n;
                acc[i] += n;
            }
        noise_norm = std::sqrt(noise_norm);
    }
    double inv_b = 1.0 / batch;
    for (auto& [name, acc] : aggregate.grads)
        for (auto& v : acc.data) v *= inv_b;
    aggregate.compute_norm();
    if (noise_norm_out) *noise_norm_out = noise_norm;
    return aggregate;
}

struct DpSgdResult {
    std::vector<StepReport> reports;
    accounting::PrivacyLedger ledger;
};

// Per-sample loss draws for step p, sample i: t ~ U{1..T} and tau ~ N(0,I),
// addressed by (seed, purpose, step, dataset index).
inline Val dp_sample_loss(Tape& tape, std::map<std::string, Val>& bound,
                          const DiffusionModel& model, const Tensor& latents,
                          const std::vector<int>& labels, uint64_t seed, int64_t step, int idx) {
    int n = latents.dim(0);
    int64_t per = latents.numel() / n;
    Tensor z0({1, latents.dim(1), latents.dim(2), latents.dim(3)});
    std::copy(latents.ptr() + idx * per, latents.ptr() + (idx + 1) * per, z0.ptr());
    int t = static_cast<int>(keyed_rng(seed, "dp-t", static_cast<uint64_t>(step),
                                       static_cast<uint64_t>(idx))
                                 .uniform_int(1, model.schedule.T));
    Tensor tau(z0.shape);
    Rng tau_rng = keyed_rng(seed, "dp-tau", static_cast<uint64_t>(step), static_cast<uint64_t>(idx));
    tau_rng.normal_fill(tau.ptr(), static_cast<size_t>(tau.numel()));
    std::vector<int> ys;
    if (model.unet.cfg.conditional) ys.push_back(labels[static_cast<size_t>(idx)]);
    return ldm_loss_graph(tape, bound, model, z0, ys, {t}, tau);
}

// Algorithm core: `steps` iterations of subsample / per-sample grad / clip /
// noise / descend. `on_step` (if set) streams each finished step's report
// after the parameter update, so callers can persist metrics and partial
// checkpoints as the run progresses.
inline DpSgdResult dp_sgd_run(DiffusionModel& model, const Tensor& latents,
                              const std::vector<int>& labels, const DPConfig& cfg,
                              int64_t start_step = 0,
                              const std::function<void(const StepReport&)>& on_step = nullptr) {
    if (latents.ndim() != 4) throw ShapeError("dp-sgd: latents must be [N,c,h,w]");
    int n = latents.dim(0);
    cfg.validate(n);
    if (model.unet.cfg.conditional && static_cast<int>(labels.size()) != n)
        throw ContractError("dp-sgd: one label per private sample required");

    const std::vector<std::string> trainable = model.unet.params.trainable_names();
    const int64_t trainable_count = model.unet.params.trainable_scalar_count();
    const double q = cfg.q(n);
    const int microbatch = cfg.microbatch > 0 ? cfg.microbatch : std::max(1, cfg.batch);

    DpSgdResult result;
    result.ledger.q = q;
    result.ledger.sigma = cfg.sigma;
    result.ledger.steps = start_step;
    result.ledger.delta = cfg.delta;
    result.ledger.clip = cfg.clip;

    Tape tape;
    for (int64_t p = start_step + 1; p <= cfg.steps; ++p) {
        Rng sel_rng = keyed_rng(cfg.seed, "dp-poisson", static_cast<uint64_t>(p));
        std::vector<int> batch_idx = poisson_subsample(n, q, sel_rng);

        StepReport report;
        report.step = p;
        report.realized_batch = static_cast<int>(batch_idx.size());
        report.trainable_count = trainable_count;
        report.physical_microbatches =
            static_cast<int>((batch_idx.size() + microbatch - 1) / static_cast<size_t>(microbatch));
        report.preclip_min = std::numeric_limits<double>::infinity();

        std::vector<GradMap> clipped;
        clipped.reserve(batch_idx.size());
        if (!trainable.empty()) {
            for (int idx : batch_idx) {
                tape.clear();
                std::map<std::string, Val> bound;
                Val loss = dp_sample_loss(tape, bound, model, latents, labels, cfg.seed, p, idx);
                tape.backward(loss);
                GradMap g = collect_grads(tape, bound);
                report.preclip_min = std::min(report.preclip_min, g.global_norm);
                report.preclip_max = std::max(report.preclip_max, g.global_norm);
                report.preclip_mean += g.global_norm;
                GradMap ghat = clip_gradient(g, cfg.clip);
                if (g.global_norm > cfg.clip) report.fraction_clipped += 1.0;
                if (ghat.global_norm > cfg.clip * (1.0 + 1e-9)) {
                    ++report.clip_violations;
                    throw NumericError("dp-sgd: clipped gradient exceeds C at step " +
                                       std::to_string(p));
                }
                clipped.push_back(std::move(ghat));
            }
        }
        if (!batch_idx.empty() && !trainable.empty()) {
            report.preclip_mean /= static_cast<double>(batch_idx.size());
            report.fraction_clipped /= static_cast<double>(batch_idx.size());
        } else {
            report.preclip_min = 0.0;
        }

        if (!trainable.empty()) {
            Rng noise_rng = keyed_rng(cfg.seed, "dp-noise", static_cast<uint64_t>(p));
            GradMap update = noisy_aggregate(clipped, cfg.sigma, cfg.clip, cfg.batch, noise_rng,
                                             zero_like_grads(model.unet.params, trainable),
                                             &report.noise_norm);
            // Step 5: theta <- theta - eta * g_tilde, fixed name order.
            for (const std::string& name : trainable) {
                Tensor& param = model.unet.params.tensor(name);
                const Tensor& g = update.grads.at(name);
                for (int64_t i = 0; i < param.numel(); ++i) param[i] -= cfg.lr * g[i];
            }
        }

        result.ledger.steps = p;
        result.reports.push_back(report);
        if (on_step) on_step(result.reports.back());
    }
    return result;
}

}  // namespace privdiff
