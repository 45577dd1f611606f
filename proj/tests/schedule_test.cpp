#include "privdiff/schedule.hpp"

#include <gtest/gtest.h>

#include "privdiff/rng.hpp"

namespace privdiff {
namespace {

TEST(Schedule, SingleStep) {
    NoiseSchedule s = make_schedule(1, 0.5, 0.5);
    ASSERT_EQ(s.T, 1);
    EXPECT_DOUBLE_EQ(s.beta_at(1), 0.5);
    EXPECT_DOUBLE_EQ(s.alpha_bar_at(1), 0.5);
}

TEST(Schedule, DefaultConfigMatchesRunningProductOracle) {
    NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    // Independent running product in long double.
    long double prod = 1.0L;
    for (int t = 0; t < 1000; ++t) {
        long double b = 1e-4L + (0.02L - 1e-4L) * t / 999.0L;
        prod *= (1.0L - b);
        EXPECT_NEAR(s.alpha_bar_at(t + 1), static_cast<double>(prod), 1e-12);
    }
    EXPECT_NEAR(s.alpha_bar_at(1000), 4.0e-5, 1e-5);
    EXPECT_LT(s.alpha_bar_at(1000), 0.05);  // default-config invariant
}

TEST(Schedule, AlphaBarStrictlyDecreasing) {
    for (auto [T, b0, b1] : {std::tuple{50, 1e-3, 0.05}, {200, 1e-4, 0.05}, {17, 0.01, 0.3}}) {
        NoiseSchedule s = make_schedule(T, b0, b1);
        for (int t = 2; t <= T; ++t) EXPECT_LT(s.alpha_bar_at(t), s.alpha_bar_at(t - 1));
        EXPECT_GT(s.beta_at(1), 0.0);
        for (int t = 2; t <= T; ++t) EXPECT_LE(s.beta_at(t - 1), s.beta_at(t));
        EXPECT_LT(s.beta_at(T), 1.0);
    }
}

TEST(Schedule, BoundViolationsThrow) {
    EXPECT_THROW(make_schedule(0, 1e-4, 0.02), ConfigError);
    EXPECT_THROW(make_schedule(10, 0.0, 0.02), ConfigError);
    EXPECT_THROW(make_schedule(10, 0.05, 0.02), ConfigError);
    EXPECT_THROW(make_schedule(10, 1e-4, 1.0), ConfigError);
}

TEST(QSample, NearUnitAlphaBarKeepsSignal) {
    NoiseSchedule s = make_schedule(1, 1e-12, 1e-12);
    Rng rng(3);
    Tensor z0 = Tensor::randn({2, 3, 3}, rng);
    Tensor tau = Tensor::randn({2, 3, 3}, rng);
    Tensor zt = q_sample(z0, 1, tau, s);
    for (int64_t i = 0; i < z0.numel(); ++i) EXPECT_NEAR(zt[i], z0[i], 1e-5);
}

TEST(QSample, ZeroNoiseScalesBySqrtAlphaBar) {
    NoiseSchedule s = make_schedule(10, 0.01, 0.2);
    Rng rng(4);
    Tensor z0 = Tensor::randn({4, 4}, rng);
    Tensor zero = Tensor::zeros({4, 4});
    for (int t : {1, 5, 10}) {
        Tensor zt = q_sample(z0, t, zero, s);
        double c = std::sqrt(s.alpha_bar_at(t));
        for (int64_t i = 0; i < z0.numel(); ++i) EXPECT_DOUBLE_EQ(zt[i], c * z0[i]);
    }
}

TEST(QSample, OutOfRangeThrows) {
    NoiseSchedule s = make_schedule(10, 0.01, 0.2);
    Tensor z0 = Tensor::zeros({2, 2});
    EXPECT_THROW(q_sample(z0, 0, z0, s), ContractError);
    EXPECT_THROW(q_sample(z0, 11, z0, s), ContractError);
}

TEST(QSample, MonteCarloMomentsMatchMarginal) {
    NoiseSchedule s = make_schedule(200, 1e-4, 0.05);
    const double z0val = 0.7;
    Tensor z0 = Tensor::full({1}, z0val);
    const int n = 100000;
    for (int t : {1, 100, 200}) {
        Rng rng(rng_key(7, "qsample-mc", static_cast<uint64_t>(t)));
        double sum = 0, sumsq = 0;
        for (int i = 0; i < n; ++i) {
            Tensor tau({1});
            tau[0] = rng.normal();
            double v = q_sample(z0, t, tau, s)[0];
            sum += v;
            sumsq += v * v;
        }
        double ab = s.alpha_bar_at(t);
        double mean = sum / n, var = sumsq / n - mean * mean;
        double want_mean = std::sqrt(ab) * z0val, want_var = 1.0 - ab;
        double se_mean = std::sqrt(want_var / n);
        double se_var = want_var * std::sqrt(2.0 / n);
        EXPECT_NEAR(mean, want_mean, 3.0 * se_mean + 1e-12) << "t=" << t;
        EXPECT_NEAR(var, want_var, 3.0 * se_var + 1e-12) << "t=" << t;
    }
}

}  // namespace
}  // namespace privdiff
