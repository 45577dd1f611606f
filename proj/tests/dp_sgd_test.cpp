#include "privdiff/dp_sgd.hpp"

#include <gtest/gtest.h>

#include <limits>

#include "test_util.hpp"

namespace privdiff {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// ------------------------------------------------------- poisson_subsample --

TEST(PoissonSubsample, FullRateTakesEverything) {
    Rng rng(1);
    auto idx = poisson_subsample(10, 1.0, rng);
    ASSERT_EQ(idx.size(), 10u);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(idx[static_cast<size_t>(i)], i);
}

TEST(PoissonSubsample, BinomialStatistics) {
    const int n = 100000;
    const double q = 0.5;
    Rng rng(2);
    auto idx = poisson_subsample(n, q, rng);
    double expect = n * q;
    double tol = 3.0 * std::sqrt(n * q * (1 - q));
    EXPECT_NEAR(static_cast<double>(idx.size()), expect, tol);
}

TEST(PoissonSubsample, SeedDeterminism) {
    Rng a(7), b(7), c(8);
    auto ia = poisson_subsample(1000, 0.3, a);
    auto ib = poisson_subsample(1000, 0.3, b);
    auto ic = poisson_subsample(1000, 0.3, c);
    EXPECT_EQ(ia, ib);
    EXPECT_NE(ia, ic);
}

TEST(PoissonSubsample, MayBeEmptyAndValidatesQ) {
    Rng rng(3);
    auto idx = poisson_subsample(3, 1e-9, rng);
    EXPECT_TRUE(idx.empty());
    EXPECT_THROW(poisson_subsample(3, 0.0, rng), ContractError);
    EXPECT_THROW(poisson_subsample(3, 1.5, rng), ContractError);
}

// ----------------------------------------------------------- clip_gradient --

GradMap make_gradmap(std::vector<std::pair<std::string, Tensor>> entries) {
    GradMap gm;
    for (auto& [name, t] : entries) gm.grads[name] = std::move(t);
    gm.compute_norm();
    return gm;
}

TEST(ClipGradient, BelowThresholdUnchanged) {
    GradMap g = make_gradmap({{"a", Tensor({2}, {3.0, 4.0})}});  // norm 5
    GradMap out = clip_gradient(g, 10.0);
    EXPECT_EQ(out.grads["a"].data, g.grads["a"].data);
    EXPECT_DOUBLE_EQ(out.global_norm, 5.0);
}

TEST(ClipGradient, TwiceTheNormHalvesTheGradient) {
    GradMap g = make_gradmap({{"a", Tensor({2}, {6.0, 8.0})}});  // norm 10
    GradMap out = clip_gradient(g, 5.0);
    EXPECT_DOUBLE_EQ(out.grads["a"][0], 3.0);
    EXPECT_DOUBLE_EQ(out.grads["a"][1], 4.0);
    EXPECT_NEAR(out.global_norm, 5.0, 1e-12);
}

TEST(ClipGradient, MatchesFlattenAndScaleOracle) {
    Rng rng(9);
    GradMap g = make_gradmap({{"w1", Tensor::randn({3, 4}, rng)},
                              {"w2", Tensor::randn({7}, rng)},
                              {"w3", Tensor::randn({2, 2, 2}, rng)}});
    for (double c : {0.5, 1.0, 2.0, 100.0}) {
        GradMap out = clip_gradient(g, c);
        // flatten in key order, scale once, compare
        std::vector<double> flat;
        for (const auto& [name, t] : g.grads) flat.insert(flat.end(), t.data.begin(), t.data.end());
        double norm = 0;
        for (double v : flat) norm += v * v;
        norm = std::sqrt(norm);
        double factor = std::max(1.0, norm / c);
        size_t k = 0;
        for (const auto& [name, t] : out.grads)
            for (double v : t.data) EXPECT_NEAR(v, flat[k++] / factor, 1e-15);
        EXPECT_NEAR(out.global_norm, std::min(norm, c), 1e-10);
    }
}

TEST(ClipGradient, InfiniteClipIsBitwiseIdentity) {
    Rng rng(10);
    GradMap g = make_gradmap({{"w", Tensor::randn({5, 5}, rng)}});
    GradMap out = clip_gradient(g, kInf);
    EXPECT_EQ(out.grads["w"].data, g.grads["w"].data);
}

// ---------------------------------------------------------- noisy_aggregate --

TEST(NoisyAggregate, ZeroSigmaSingleSampleIsScaledCopy) {
    Rng rng(11);
    GradMap g = make_gradmap({{"w", Tensor::randn({4}, rng, 0.01)}});
    GradMap zero = make_gradmap({{"w", Tensor::zeros({4})}});
    Rng noise(12);
    GradMap out = noisy_aggregate({g}, 0.0, 1.0, 8, noise, zero);
    for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out.grads["w"][i], g.grads["w"][i] * (1.0 / 8));
}

TEST(NoisyAggregate, EmptyBatchIsNoiseOnly) {
    GradMap zero = make_gradmap({{"w", Tensor::zeros({16})}});
    Rng noise(13);
    double norm = 0;
    GradMap out = noisy_aggregate({}, 1.0, 2.0, 4, noise, zero, &norm);
    EXPECT_GT(norm, 0.0);
    double acc = 0;
    for (double v : out.grads["w"].data) acc += v * v;
    EXPECT_NEAR(std::sqrt(acc), norm / 4.0, 1e-12);
}

TEST(NoisyAggregate, NoiseStdMatchesSigmaC) {
    // sigma=1, C=1, B=1, zero gradients: per-coordinate std over many draws.
    const int draws = 10000;
    double sum = 0, sumsq = 0;
    int count = 0;
    for (int d = 0; d < draws; ++d) {
        GradMap zero = make_gradmap({{"w", Tensor::zeros({4})}});
        Rng noise(rng_key(99, "noise-mc", static_cast<uint64_t>(d)));
        GradMap out = noisy_aggregate({}, 1.0, 1.0, 1, noise, zero);
        for (double v : out.grads["w"].data) {
            sum += v;
            sumsq += v * v;
            ++count;
        }
    }
    double mean = sum / count;
    double std = std::sqrt(sumsq / count - mean * mean);
    double se = 1.0 / std::sqrt(2.0 * count);
    EXPECT_NEAR(std, 1.0, 3.0 * se);
    EXPECT_NEAR(mean, 0.0, 3.0 / std::sqrt(static_cast<double>(count)));
}

TEST(NoisyAggregate, InfiniteClipWithPositiveSigmaRejected) {
    GradMap zero = make_gradmap({{"w", Tensor::zeros({2})}});
    Rng noise(14);
    EXPECT_THROW(noisy_aggregate({}, 1.0, kInf, 1, noise, zero), ContractError);
}

// ------------------------------------------------------------- dp_sgd_run --

struct Fixture {
    DiffusionModel model;
    Tensor latents;
    std::vector<int> labels;
};

Fixture make_fixture(bool conditional, uint64_t seed = 50) {
    UNetConfig cfg;
    cfg.latent_channels = 2;
    cfg.latent_hw = 8;
    cfg.base_width = 8;
    cfg.conditional = conditional;
    cfg.num_classes = conditional ? 2 : 0;
    cfg.cond_dim = 4;
    cfg.init_seed = seed;
    Fixture f{{UNetLite::build(cfg), make_schedule(10, 1e-3, 0.1)}, {}, {}};
    // The freshly built model zero-inits its output conv; give it a
    // pretrained-like state so gradients actually reach the attention stack.
    Rng wrng(seed);
    f.model.unet.params.tensor("unet.out.conv.w") =
        Tensor::randn({2, 8, 3, 3}, wrng, 0.05);
    Rng rng(seed + 1);
    f.latents = Tensor::randn({24, 2, 8, 8}, rng, 0.8);
    if (conditional)
        for (int i = 0; i < 24; ++i) f.labels.push_back(i % 2);
    return f;
}

DPConfig small_dp(int steps, double sigma, double clip) {
    DPConfig cfg;
    cfg.batch = 6;
    cfg.clip = clip;
    cfg.sigma = sigma;
    cfg.lr = 0.05;
    cfg.steps = steps;
    cfg.delta = 1e-5;
    cfg.seed = 777;
    return cfg;
}

std::map<std::string, std::vector<double>> snapshot(const ParamStore& p) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, e] : p.all()) out[name] = e.value.data;
    return out;
}

// Reference: plain minibatch SGD on the same keyed index sets and loss draws,
// no clipping and no noise. The DP path with sigma=0 and C=inf must reproduce
// it bit-for-bit.
void plain_sgd_run(DiffusionModel& model, const Tensor& latents, const std::vector<int>& labels,
                   const DPConfig& cfg) {
    int n = latents.dim(0);
    double q = cfg.q(n);
    auto trainable = model.unet.params.trainable_names();
    Tape tape;
    for (int64_t p = 1; p <= cfg.steps; ++p) {
        Rng sel = keyed_rng(cfg.seed, "dp-poisson", static_cast<uint64_t>(p));
        auto idx = poisson_subsample(n, q, sel);
        GradMap acc = zero_like_grads(model.unet.params, trainable);
        for (int i : idx) {
            tape.clear();
            std::map<std::string, Val> bound;
            Val loss = dp_sample_loss(tape, bound, model, latents, labels, cfg.seed, p, i);
            tape.backward(loss);
            GradMap g = collect_grads(tape, bound);
            for (auto& [name, a] : acc.grads) {
                const Tensor& src = g.grads.at(name);
                for (int64_t j = 0; j < a.numel(); ++j) a[j] += src[j];
            }
        }
        double inv_b = 1.0 / cfg.batch;
        for (auto& [name, a] : acc.grads)
            for (auto& v : a.data) v *= inv_b;
        for (const std::string& name : trainable) {
            Tensor& param = model.unet.params.tensor(name);
            const Tensor& g = acc.grads.at(name);
            for (int64_t j = 0; j < param.numel(); ++j) param[j] -= cfg.lr * g[j];
        }
    }
}

TEST(DpSgd, SigmaZeroInfiniteClipEqualsPlainSgdBitwise) {
    Fixture dp_f = make_fixture(true);
    Fixture ref_f = make_fixture(true);
    select_trainable(dp_f.model.unet, TrainableSpec::parse("all-attn+cond"));
    select_trainable(ref_f.model.unet, TrainableSpec::parse("all-attn+cond"));
    DPConfig cfg = small_dp(50, 0.0, kInf);
    dp_sgd_run(dp_f.model, dp_f.latents, dp_f.labels, cfg);
    plain_sgd_run(ref_f.model, ref_f.latents, ref_f.labels, cfg);
    auto a = snapshot(dp_f.model.unet.params);
    auto b = snapshot(ref_f.model.unet.params);
    EXPECT_EQ(a, b);
}

TEST(DpSgd, ZeroLearningRateLeavesParametersBitIdentical) {
    Fixture f = make_fixture(false);
    select_trainable(f.model.unet, TrainableSpec::parse("all-attn"));
    auto before = snapshot(f.model.unet.params);
    DPConfig cfg = small_dp(8, 1.0, 0.5);
    cfg.lr = 0.0;
    dp_sgd_run(f.model, f.latents, f.labels, cfg);
    EXPECT_EQ(snapshot(f.model.unet.params), before);
}

TEST(DpSgd, FrozenParametersUntouchedAndLedgerCountsSteps) {
    Fixture f = make_fixture(true);
    select_trainable(f.model.unet, TrainableSpec::parse("attn-from:4"));
    auto before = snapshot(f.model.unet.params);
    DPConfig cfg = small_dp(12, 0.8, 0.3);
    DpSgdResult res = dp_sgd_run(f.model, f.latents, f.labels, cfg);
    auto after = snapshot(f.model.unet.params);
    EXPECT_EQ(res.ledger.steps, 12);
    EXPECT_EQ(res.reports.size(), 12u);
    EXPECT_DOUBLE_EQ(res.ledger.q, 6.0 / 24.0);
    bool any_changed = false;
    for (const auto& [name, e] : f.model.unet.params.all()) {
        if (e.trainable) {
            any_changed = any_changed || after[name] != before[name];
        } else {
            EXPECT_EQ(after[name], before[name]) << name;
        }
    }
    EXPECT_TRUE(any_changed);
}

TEST(DpSgd, ClippingInvariantHoldsEveryStep) {
    Fixture f = make_fixture(true);
    select_trainable(f.model.unet, TrainableSpec::parse("all-attn+cond"));
    DPConfig cfg = small_dp(15, 0.5, 1e-4);  // tight clip: most samples clip
    DpSgdResult res = dp_sgd_run(f.model, f.latents, f.labels, cfg);
    int violations = 0;
    bool some_clipping = false;
    for (const StepReport& r : res.reports) {
        violations += r.clip_violations;
        some_clipping = some_clipping || r.fraction_clipped > 0;
        EXPECT_GE(r.fraction_clipped, 0.0);
        EXPECT_LE(r.fraction_clipped, 1.0);
    }
    EXPECT_EQ(violations, 0);
    EXPECT_TRUE(some_clipping);
}

TEST(DpSgd, ReproducibleBitForBit) {
    Fixture a = make_fixture(true), b = make_fixture(true);
    select_trainable(a.model.unet, TrainableSpec::parse("all-attn+cond"));
    select_trainable(b.model.unet, TrainableSpec::parse("all-attn+cond"));
    DPConfig cfg = small_dp(10, 1.2, 0.2);
    dp_sgd_run(a.model, a.latents, a.labels, cfg);
    dp_sgd_run(b.model, b.latents, b.labels, cfg);
    EXPECT_EQ(snapshot(a.model.unet.params), snapshot(b.model.unet.params));
}

TEST(DpSgd, MicrobatchSizeDoesNotChangeResults) {
    for (int mb : {1, 4, 0}) {
        Fixture f = make_fixture(false, 61);
        select_trainable(f.model.unet, TrainableSpec::parse("all-attn"));
        DPConfig cfg = small_dp(6, 0.7, 0.1);
        cfg.microbatch = mb;
        dp_sgd_run(f.model, f.latents, f.labels, cfg);
        static std::map<std::string, std::vector<double>> reference;
        if (mb == 1)
            reference = snapshot(f.model.unet.params);
        else
            EXPECT_EQ(snapshot(f.model.unet.params), reference) << "microbatch " << mb;
    }
}

TEST(DpSgd, EmptyTrainableSpecIsNoOpButAccountsSteps) {
    Fixture f = make_fixture(false);
    select_trainable(f.model.unet, TrainableSpec::parse("none"));
    auto before = snapshot(f.model.unet.params);
    DPConfig cfg = small_dp(5, 1.0, 1.0);
    DpSgdResult res = dp_sgd_run(f.model, f.latents, f.labels, cfg);
    EXPECT_EQ(snapshot(f.model.unet.params), before);
    EXPECT_EQ(res.ledger.steps, 5);
    EXPECT_GT(res.ledger.epsilon(), 0.0);
}

TEST(DpSgd, ResumeFromStepIndexMatchesUninterrupted) {
    Fixture full = make_fixture(true, 62), split = make_fixture(true, 62);
    select_trainable(full.model.unet, TrainableSpec::parse("all-attn+cond"));
    select_trainable(split.model.unet, TrainableSpec::parse("all-attn+cond"));
    DPConfig cfg = small_dp(10, 0.9, 0.2);
    dp_sgd_run(full.model, full.latents, full.labels, cfg);

    DPConfig first = cfg;
    first.steps = 4;
    dp_sgd_run(split.model, split.latents, split.labels, first);
    dp_sgd_run(split.model, split.latents, split.labels, cfg, /*start_step=*/4);
    EXPECT_EQ(snapshot(full.model.unet.params), snapshot(split.model.unet.params));
}

TEST(DpSgd, ValidationErrors) {
    Fixture f = make_fixture(false);
    DPConfig cfg = small_dp(3, 0.5, 1.0);
    cfg.batch = 100;  // q > 1
    EXPECT_THROW(dp_sgd_run(f.model, f.latents, f.labels, cfg), ConfigError);
    cfg.batch = 4;
    cfg.clip = 0.0;
    EXPECT_THROW(dp_sgd_run(f.model, f.latents, f.labels, cfg), ConfigError);
}

TEST(DpSgd, StepReportsCarryNormSummaries) {
    Fixture f = make_fixture(true);
    select_trainable(f.model.unet, TrainableSpec::parse("all-attn+cond"));
    DPConfig cfg = small_dp(6, 0.4, 0.5);
    DpSgdResult res = dp_sgd_run(f.model, f.latents, f.labels, cfg);
    for (const StepReport& r : res.reports) {
        if (r.realized_batch == 0) continue;
        EXPECT_LE(r.preclip_min, r.preclip_mean + 1e-12);
        EXPECT_LE(r.preclip_mean, r.preclip_max + 1e-12);
        EXPECT_GT(r.trainable_count, 0);
        EXPECT_GT(r.noise_norm, 0.0);
    }
}

}  // namespace
}  // namespace privdiff
