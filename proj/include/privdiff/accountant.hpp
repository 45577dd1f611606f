#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "privdiff/errors.hpp"

namespace privdiff::accounting {

// Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism, plus the
// analytic Gaussian mechanism calibration used by the DP-FID evaluator.
//
// RDP values use the exact binomial expansion at integer orders; the RDP->DP
// conversion is the Opacus-style tightened bound
//   eps = P*eps_alpha + log1p(-1/alpha) - (log(delta) + log(alpha))/(alpha-1)
// minimized over the order grid.

inline double log_comb(double n, double k) {
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// Per-step RDP of the subsampled Gaussian at order alpha (> 1). Fractional
// orders are upper-bounded by the nearest integer order above (RDP is
// non-decreasing in the order, so this is a valid guarantee).
inline double rdp_subsampled_gaussian(double q, double sigma, double alpha) {
    if (!(alpha > 1.0)) throw ContractError("rdp: order must exceed 1");
    if (!(q > 0.0 && q <= 1.0)) throw ContractError("rdp: q must lie in (0,1]");
    if (!(sigma > 0.0)) throw ContractError("rdp: sigma must be positive");
    int a = static_cast<int>(std::ceil(alpha));
    if (a < 2) a = 2;
    if (q == 1.0) return static_cast<double>(a) / (2.0 * sigma * sigma);

    // log A = log sum_j C(a,j) (1-q)^(a-j) q^j exp(j(j-1)/(2 sigma^2))
    double logq = std::log(q);
    double log1mq = std::log1p(-q);
    double max_term = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(static_cast<size_t>(a) + 1);
    for (int j = 0; j <= a; ++j) {
        double lt = log_comb(a, j) + (a - j) * log1mq + j * logq +
                    static_cast<double>(j) * (j - 1) / (2.0 * sigma * sigma);
        terms[static_cast<size_t>(j)] = lt;
        max_term = std::max(max_term, lt);
    }
    double acc = 0.0;
    for (double lt : terms) acc += std::exp(lt - max_term);
    double log_a = max_term + std::log(acc);
    return std::max(0.0, log_a) / (a - 1);
}

// Order grid: integers 2..256 plus a few fractional orders below 2.
inline const std::vector<double>& default_orders() {
    static const std::vector<double> orders = [] {
        std::vector<double> o{1.25, 1.5, 1.75};
        for (int a = 2; a <= 256; ++a) o.push_back(a);
        return o;
    }();
    return orders;
}

struct RdpCurve {
    std::vector<double> orders;
    std::vector<double> values;  // per-step RDP at each order
};

inline RdpCurve rdp_curve(double q, double sigma) {
    RdpCurve c;
    c.orders = default_orders();
    c.values.reserve(c.orders.size());
    for (double a : c.orders) c.values.push_back(rdp_subsampled_gaussian(q, sigma, a));
    return c;
}

// RDP->(eps,delta) conversion composed over `steps` queries (composition is
// linear in the step count per order).
inline double epsilon_at_delta(const RdpCurve& curve, int64_t steps, double delta) {
    if (!(delta > 0.0 && delta < 1.0)) throw ContractError("epsilon_at_delta: delta in (0,1)");
    if (steps < 0) throw ContractError("epsilon_at_delta: negative step count");
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < curve.orders.size(); ++i) {
        double a = curve.orders[i];
        double eps = static_cast<double>(steps) * curve.values[i] + std::log1p(-1.0 / a) -
                     (std::log(delta) + std::log(a)) / (a - 1.0);
        best = std::min(best, eps);
    }
    return std::max(0.0, best);
}

inline double epsilon_at_delta(double q, double sigma, int64_t steps, double delta) {
    return epsilon_at_delta(rdp_curve(q, sigma), steps, delta);
}

// The epsilon this conversion reports for zero queries; targets below it are
// unreachable for any sigma.
inline double conversion_floor(double delta) {
    RdpCurve zero;
    zero.orders = default_orders();
    zero.values.assign(zero.orders.size(), 0.0);
    return epsilon_at_delta(zero, 0, delta);
}

// Binary search for the noise multiplier hitting `target_eps` at (q, steps,
// delta). Monotonicity of eps(sigma) is checked as the search proceeds.
inline double calibrate_sigma(double q, int64_t steps, double delta, double target_eps,
                              double rel_tol = 1e-4) {
    if (!(target_eps > 0.0)) throw ContractError("calibrate_sigma: target epsilon must be positive");
    if (target_eps <= conversion_floor(delta))
        throw CalibrationError("calibrate_sigma: target epsilon below the conversion floor");

    double lo = 1e-2, hi = 1.0;
    double eps_lo = epsilon_at_delta(q, lo, steps, delta);
    while (eps_lo < target_eps && lo > 1e-8) {
        lo *= 0.5;
        eps_lo = epsilon_at_delta(q, lo, steps, delta);
    }
    double eps_hi = epsilon_at_delta(q, hi, steps, delta);
    int guard = 0;
    while (eps_hi > target_eps) {
        hi *= 2.0;
        double e = epsilon_at_delta(q, hi, steps, delta);
        if (e > eps_hi + 1e-12)
            throw NumericError("calibrate_sigma: epsilon not decreasing in sigma");
        eps_hi = e;
        if (++guard > 64) throw CalibrationError("calibrate_sigma: target unreachable");
    }
    if (eps_lo < eps_hi) throw NumericError("calibrate_sigma: epsilon not decreasing in sigma");

    double mid = hi;
    for (int it = 0; it < 200; ++it) {
        mid = 0.5 * (lo + hi);
        double e = epsilon_at_delta(q, mid, steps, delta);
        if (std::abs(e - target_eps) / target_eps < rel_tol) return mid;
        if (e > target_eps)
            lo = mid;
        else
            hi = mid;
    }
    return mid;
}

inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Analytic Gaussian mechanism: smallest noise standard deviation such that
// adding N(0, std^2 I) to a sensitivity-`sensitivity` function is
// (eps,delta)-DP. Solves the exact Gaussian-CDF condition
//   Phi(1/(2s) - eps*s) - e^eps * Phi(-1/(2s) - eps*s) <= delta
// for the multiplier s = std/sensitivity by bisection.
inline double gaussian_mech_sigma(double sensitivity, double eps, double delta) {
    if (!(sensitivity > 0.0)) throw ContractError("gaussian_mech_sigma: sensitivity must be positive");
    if (!(eps > 0.0)) throw ContractError("gaussian_mech_sigma: epsilon must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw ContractError("gaussian_mech_sigma: delta in (0,1)");

    auto delta_of = [eps](double s) {
        double a = 1.0 / (2.0 * s) - eps * s;
        double b = -1.0 / (2.0 * s) - eps * s;
        double phi_b = std_normal_cdf(b);
        double second = (phi_b > 0.0) ? std::exp(eps + std::log(phi_b)) : 0.0;
        return std_normal_cdf(a) - second;
    };

    double lo = 1e-6, hi = 1.0;
    while (delta_of(hi) > delta) hi *= 2.0;
    while (delta_of(lo) <= delta && lo > 1e-12) lo *= 0.5;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        if (delta_of(mid) > delta)
            lo = mid;
        else
            hi = mid;
    }
    return hi * sensitivity;
}

// Run parameters the optimizer accumulates; answers "what is eps at delta?".
struct PrivacyLedger {
    double q = 0.0;       // Poisson sampling rate B/N
    double sigma = 0.0;   // noise multiplier
    int64_t steps = 0;    // executed optimizer steps
    double delta = 1e-5;  // target delta
    double clip = 0.0;    // clipping norm C (+inf allowed as research sentinel)

    void validate() const {
        if (!(q > 0.0 && q <= 1.0)) throw ContractError("ledger: q must lie in (0,1]");
        if (!(sigma > 0.0)) throw ContractError("ledger: sigma must be positive");
        if (steps < 0) throw ContractError("ledger: negative step count");
    }

    double epsilon() const {
        validate();
        return epsilon_at_delta(q, sigma, steps, delta);
    }
};

}  // namespace privdiff::accounting
