#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "privdiff/accountant.hpp"
#include "privdiff/autodiff.hpp"
#include "privdiff/linalg.hpp"
#include "privdiff/optim.hpp"
#include "privdiff/params.hpp"
#include "privdiff/rng.hpp"

namespace privdiff {

// ---------------------------------------------------------------------------
// Feature extraction
// ---------------------------------------------------------------------------

struct FeatureExtractorConfig {
    int in_channels = 1;
    int dim = 32;  // output feature dimension, <= 64
    uint64_t seed = 2024;
};

// Fixed, seeded 3-layer conv net with L2-normalized outputs. Every feature
// has unit norm (zero for an all-zero activation), which caps the
// sensitivity constants used by the privatizers.
struct FeatureExtractor {
    FeatureExtractorConfig cfg;
    ParamStore params;

    static FeatureExtractor build(const FeatureExtractorConfig& cfg) {
        if (cfg.dim < 1 || cfg.dim > 64) throw ConfigError("feature extractor: dim must be in 1..64");
        FeatureExtractor fe;
        fe.cfg = cfg;
        auto conv = [&](const std::string& name, int co, int ci, int k) {
            Rng rng(rng_key(cfg.seed, "fe-init", fnv1a64(name)));
            fe.params.add(name + ".w",
                          Tensor::randn({co, ci, k, k}, rng, std::sqrt(2.0 / (ci * k * k))),
                          ParamGroup::Backbone);
            fe.params.add(name + ".b", Tensor::zeros({co}), ParamGroup::Backbone);
        };
        conv("fe.c1", 8, cfg.in_channels, 3);
        conv("fe.c2", 16, 8, 3);
        conv("fe.c3", 32, 16, 3);
        Rng rng(rng_key(cfg.seed, "fe-init", fnv1a64("fe.proj")));
        fe.params.add("fe.proj.w", Tensor::randn({cfg.dim, 32}, rng, std::sqrt(1.0 / 32.0)),
                      ParamGroup::Backbone);
        return fe;
    }

    // images [n,ch,h,w] in [-1,1] -> features [n,dim], each row unit-norm.
    Tensor extract(const Tensor& images, int chunk = 64) const {
        if (images.ndim() != 4 || images.dim(1) != cfg.in_channels)
            throw ShapeError("feature extractor: bad image shape");
        int n = images.dim(0);
        Tensor out({n, cfg.dim});
        int64_t per = images.numel() / std::max(n, 1);
        Tape t;
        for (int start = 0; start < n; start += chunk) {
            int m = std::min(chunk, n - start);
            Tensor xb({m, images.dim(1), images.dim(2), images.dim(3)});
            std::copy(images.ptr() + start * per, images.ptr() + (start + m) * per, xb.ptr());
            t.clear();
            std::map<std::string, Val> bound;
            auto bind = [&](const std::string& name) {
                Val v = t.leaf(params.entry(name).value, false);
                return v;
            };
            Val h = conv2d(t.constant(std::move(xb)), bind("fe.c1.w"), bind("fe.c1.b"), 2, 1);
            h = conv2d(silu(h), bind("fe.c2.w"), bind("fe.c2.b"), 2, 1);
            h = conv2d(silu(h), bind("fe.c3.w"), bind("fe.c3.b"), 2, 1);
            Val pooled = global_avg_pool(silu(h));
            Val proj = linear(pooled, bind("fe.proj.w"));
            const Tensor& f = t.value(proj);
            for (int i = 0; i < m; ++i) {
                double norm = 0;
                for (int j = 0; j < cfg.dim; ++j) {
                    double v = f[static_cast<int64_t>(i) * cfg.dim + j];
                    norm += v * v;
                }
                norm = std::sqrt(norm);
                double inv = norm > 1e-12 ? 1.0 / norm : 0.0;
                for (int j = 0; j < cfg.dim; ++j)
                    out[static_cast<int64_t>(start + i) * cfg.dim + j] =
                        f[static_cast<int64_t>(i) * cfg.dim + j] * inv;
            }
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Feature statistics and Frechet distance
// ---------------------------------------------------------------------------

struct FeatureStats {
    int64_t n = 0;
    Tensor mu;     // [d]
    Tensor m_sec;  // [d,d], second moment X^T X / n
    bool privatized = false;
    double eps1 = 0, delta1 = 0, eps2 = 0, delta2 = 0;

    int dim() const { return mu.dim(0); }

    Tensor sigma() const {
        int d = dim();
        Tensor s({d, d});
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                s[static_cast<int64_t>(i) * d + j] =
                    m_sec[static_cast<int64_t>(i) * d + j] - mu[i] * mu[j];
        return s;
    }
};

inline FeatureStats compute_stats(const Tensor& features) {
    if (features.ndim() != 2 || features.dim(0) < 1)
        throw DataError("compute_stats: need a non-empty [n,d] feature matrix");
    int n = features.dim(0), d = features.dim(1);
    FeatureStats s;
    s.n = n;
    s.mu = Tensor({d});
    s.m_sec = Tensor({d, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) s.mu[j] += features[static_cast<int64_t>(i) * d + j];
    for (int j = 0; j < d; ++j) s.mu[j] /= n;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            double xj = features[static_cast<int64_t>(i) * d + j];
            for (int k = 0; k < d; ++k)
                s.m_sec[static_cast<int64_t>(j) * d + k] +=
                    xj * features[static_cast<int64_t>(i) * d + k];
        }
    for (int64_t i = 0; i < s.m_sec.numel(); ++i) s.m_sec[i] /= n;
    return s;
}

// ||mu0 - mu||^2 + tr[S0 + S - 2 (S0 S)^(1/2)], the trace term computed as
// tr of the square root of S0^(1/2) S S0^(1/2) (symmetric PSD path).
inline double fid_from_moments(const Tensor& mu0, const Tensor& sig0, const Tensor& mu1,
                               const Tensor& sig1) {
    int d = mu0.dim(0);
    if (mu1.dim(0) != d) throw ShapeError("fid: feature dimensions differ");
    double mean_term = 0;
    for (int i = 0; i < d; ++i) {
        double diff = mu0[i] - mu1[i];
        mean_term += diff * diff;
    }
    Tensor s0 = linalg::clamp_psd(linalg::symmetrize(sig0), 0.0);
    Tensor s1 = linalg::clamp_psd(linalg::symmetrize(sig1), 0.0);
    Tensor root0 = linalg::psd_sqrt(s0);
    Tensor inner = linalg::symmetrize(linalg::mat_mul(linalg::mat_mul(root0, s1), root0));
    linalg::EigResult e = linalg::jacobi_eigh(inner);
    double tr_sqrt = 0;
    for (double v : e.values) tr_sqrt += std::sqrt(std::max(v, 0.0));
    return mean_term + linalg::trace(s0) + linalg::trace(s1) - 2.0 * tr_sqrt;
}

inline double fid(const FeatureStats& a, const FeatureStats& b) {
    return fid_from_moments(a.mu, a.sigma(), b.mu, b.sigma());
}

// ---------------------------------------------------------------------------
// Privatization (assumes every feature has L2 norm <= 1)
// ---------------------------------------------------------------------------

enum class Neighboring { AddRemove, Replace };

inline double mean_sensitivity(int64_t n, Neighboring nb) {
    if (n < 1) throw ContractError("privatize: need n >= 1");
    return (nb == Neighboring::Replace ? 2.0 : 1.0) / static_cast<double>(n);
}

inline Tensor privatize_mean(const Tensor& mu, int64_t n, double eps, double delta, Neighboring nb,
                             Rng& rng) {
    double sens = mean_sensitivity(n, nb);
    double stddev = accounting::gaussian_mech_sigma(sens, eps, delta);
    Tensor out = mu;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += stddev * rng.normal();
    return out;
}

// Noise drawn once for the d(d+1)/2 upper-triangle entries (diagonal
// included) and mirrored below, so the perturbed matrix stays symmetric.
inline Tensor privatize_second_moment(const Tensor& m_sec, int64_t n, double eps, double delta,
                                      Neighboring nb, Rng& rng) {
    if (m_sec.ndim() != 2 || m_sec.dim(0) != m_sec.dim(1))
        throw ShapeError("privatize_second_moment: square matrix required");
    double sens = mean_sensitivity(n, nb);  // Frobenius sensitivity is also 2/n (or 1/n)
    double stddev = accounting::gaussian_mech_sigma(sens, eps, delta);
    int d = m_sec.dim(0);
    Tensor out = m_sec;
    for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
            double noise = stddev * rng.normal();
            out[static_cast<int64_t>(i) * d + j] += noise;
            if (j != i) out[static_cast<int64_t>(j) * d + i] += noise;
        }
    return out;
}

struct DpFidOptions {
    Neighboring neighboring = Neighboring::AddRemove;
    bool mean_only = false;   // privatize the mean only (budget is eps1, delta1)
    bool zero_noise = false;  // test hook: bypass noise, reduces to plain fid
    double psd_floor = 1e-8;  // eigenvalue floor for the repaired covariance
};

struct DpFidResult {
    double value = 0;
    double eps_total = 0;
    double delta_total = 0;
};

// Privatizes the private-side statistics and evaluates the Frechet distance
// against the raw public-side statistics. Composed guarantee is
// (eps1+eps2, delta1+delta2), or (eps1, delta1) when mean_only.
inline DpFidResult dp_fid(const FeatureStats& private_raw, const FeatureStats& public_raw,
                          double eps1, double delta1, double eps2, double delta2, uint64_t seed,
                          const DpFidOptions& opt = {}) {
    if (private_raw.dim() != public_raw.dim()) throw ShapeError("dp_fid: dimensions differ");
    if (opt.zero_noise) {
        DpFidResult r;
        r.value = fid(private_raw, public_raw);
        r.eps_total = opt.mean_only ? eps1 : eps1 + eps2;
        r.delta_total = opt.mean_only ? delta1 : delta1 + delta2;
        return r;
    }
    if (!(eps1 > 0 && delta1 > 0 && delta1 < 1)) throw ContractError("dp_fid: bad mean budget");
    if (!opt.mean_only && !(eps2 > 0 && delta2 > 0 && delta2 < 1))
        throw ContractError("dp_fid: bad second-moment budget");

    Rng mean_rng = keyed_rng(seed, "dpfid-mean");
    Tensor mu_t = privatize_mean(private_raw.mu, private_raw.n, eps1, delta1, opt.neighboring,
                                 mean_rng);
    int d = private_raw.dim();
    Tensor sigma_t;
    if (opt.mean_only) {
        sigma_t = private_raw.sigma();
    } else {
        Rng sec_rng = keyed_rng(seed, "dpfid-sec");
        Tensor msec_t = privatize_second_moment(private_raw.m_sec, private_raw.n, eps2, delta2,
                                                opt.neighboring, sec_rng);
        sigma_t = Tensor({d, d});
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                sigma_t[static_cast<int64_t>(i) * d + j] =
                    msec_t[static_cast<int64_t>(i) * d + j] - mu_t[i] * mu_t[j];
        // The perturbed covariance may lose PSD; project eigenvalues up to a
        // small floor (post-processing, no extra privacy cost).
        sigma_t = linalg::clamp_psd(linalg::symmetrize(sigma_t), opt.psd_floor);
    }
    DpFidResult r;
    r.value = fid_from_moments(mu_t, sigma_t, public_raw.mu, public_raw.sigma());
    r.eps_total = opt.mean_only ? eps1 : eps1 + eps2;
    r.delta_total = opt.mean_only ? delta1 : delta1 + delta2;
    return r;
}

// ---------------------------------------------------------------------------
// Reference downstream classifier
// ---------------------------------------------------------------------------

struct ClassifierConfig {
    int width = 8;
    int epochs = 20;
    int batch = 32;
    double lr = 0.05;
    uint64_t seed = 7;
};

namespace detail {

struct Cnn {
    ParamStore params;
    int classes = 0;
    int in_channels = 0;

    static Cnn build(int in_channels, int classes, int width, uint64_t seed) {
        Cnn net;
        net.classes = classes;
        net.in_channels = in_channels;
        auto conv = [&](const std::string& name, int co, int ci, int k) {
            Rng rng(rng_key(seed, "cnn-init", fnv1a64(name)));
            net.params.add(name + ".w",
                           Tensor::randn({co, ci, k, k}, rng, std::sqrt(2.0 / (ci * k * k))),
                           ParamGroup::Backbone);
            net.params.add(name + ".b", Tensor::zeros({co}), ParamGroup::Backbone);
        };
        conv("cls.c1", width, in_channels, 3);
        conv("cls.c2", 2 * width, width, 3);
        conv("cls.c3", 4 * width, 2 * width, 3);
        Rng rng(rng_key(seed, "cnn-init", fnv1a64("cls.fc")));
        net.params.add("cls.fc.w", Tensor::randn({classes, 4 * width}, rng, 0.1),
                       ParamGroup::Backbone);
        net.params.add("cls.fc.b", Tensor::zeros({classes}), ParamGroup::Backbone);
        for (auto& [name, e] : net.params.all()) e.trainable = true;
        return net;
    }

    Val logits(Tape& t, std::map<std::string, Val>& bound, Val x) const {
        auto bind = [&](const std::string& name) {
            auto it = bound.find(name);
            if (it != bound.end()) return it->second;
            Val v = t.leaf(params.entry(name).value, params.entry(name).trainable);
            bound.emplace(name, v);
            return v;
        };
        Val h = conv2d(x, bind("cls.c1.w"), bind("cls.c1.b"), 1, 1);
        h = conv2d(silu(h), bind("cls.c2.w"), bind("cls.c2.b"), 2, 1);
        h = conv2d(silu(h), bind("cls.c3.w"), bind("cls.c3.b"), 2, 1);
        return linear(global_avg_pool(silu(h)), bind("cls.fc.w"), bind("cls.fc.b"));
    }
};

}  // namespace detail

// Trains a small CNN on labeled synthetic images, reports accuracy on the
// held-out real set.
inline double train_eval_classifier(const Tensor& synth_x, const std::vector<int>& synth_y,
                                    const Tensor& real_x, const std::vector<int>& real_y,
                                    const ClassifierConfig& cfg = {}) {
    if (synth_x.ndim() != 4 || synth_x.dim(0) < 1) throw DataError("classifier: empty training set");
    if (static_cast<int>(synth_y.size()) != synth_x.dim(0))
        throw DataError("classifier: label count mismatch");
    int classes = 0;
    for (int y : synth_y) classes = std::max(classes, y + 1);
    std::vector<int> present(static_cast<size_t>(classes), 0);
    for (int y : synth_y) {
        if (y < 0) throw DataError("classifier: negative label");
        present[static_cast<size_t>(y)] = 1;
    }
    if (std::accumulate(present.begin(), present.end(), 0) < 2)
        throw DataError("classifier: need at least 2 classes present");

    detail::Cnn net = detail::Cnn::build(synth_x.dim(1), classes, cfg.width, cfg.seed);
    SgdMomentum opt{cfg.lr, 0.9, {}};
    int n = synth_x.dim(0);
    int64_t per = synth_x.numel() / n;
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    Tape tape;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng = keyed_rng(cfg.seed, "cls-shuffle", static_cast<uint64_t>(epoch));
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);
        for (int start = 0; start < n; start += cfg.batch) {
            int m = std::min(cfg.batch, n - start);
            Tensor xb({m, synth_x.dim(1), synth_x.dim(2), synth_x.dim(3)});
            std::vector<int> yb(static_cast<size_t>(m));
            for (int i = 0; i < m; ++i) {
                int src = order[static_cast<size_t>(start + i)];
                std::copy(synth_x.ptr() + src * per, synth_x.ptr() + (src + 1) * per,
                          xb.ptr() + static_cast<int64_t>(i) * per);
                yb[static_cast<size_t>(i)] = synth_y[static_cast<size_t>(src)];
            }
            tape.clear();
            std::map<std::string, Val> bound;
            Val loss = cross_entropy(net.logits(tape, bound, tape.constant(std::move(xb))), yb);
            tape.backward(loss);
            opt.step(net.params, collect_grads(tape, bound));
        }
    }

    // Evaluation
    int correct = 0;
    int rn = real_x.dim(0);
    if (rn < 1 || static_cast<int>(real_y.size()) != rn)
        throw DataError("classifier: bad evaluation set");
    int64_t rper = real_x.numel() / rn;
    const int chunk = 64;
    for (int start = 0; start < rn; start += chunk) {
        int m = std::min(chunk, rn - start);
        Tensor xb({m, real_x.dim(1), real_x.dim(2), real_x.dim(3)});
        std::copy(real_x.ptr() + start * rper, real_x.ptr() + (start + m) * rper, xb.ptr());
        tape.clear();
        std::map<std::string, Val> bound;
        Val lg = net.logits(tape, bound, tape.constant(std::move(xb)));
        const Tensor& lv = tape.value(lg);
        for (int i = 0; i < m; ++i) {
            int best = 0;
            for (int j = 1; j < classes; ++j)
                if (lv[static_cast<int64_t>(i) * classes + j] >
                    lv[static_cast<int64_t>(i) * classes + best])
                    best = j;
            if (best == real_y[static_cast<size_t>(start + i)]) ++correct;
        }
    }
    return static_cast<double>(correct) / rn;
}

}  // namespace privdiff
