#pragma once

#include <cmath>
#include <vector>

#include "privdiff/errors.hpp"
#include "privdiff/tensor.hpp"

namespace privdiff::linalg {

inline Tensor mat_mul(const Tensor& a, const Tensor& b) {
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("mat_mul: inner extents differ");
    Tensor c({m, n});
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            double av = a[static_cast<int64_t>(i) * k + p];
            for (int j = 0; j < n; ++j)
                c[static_cast<int64_t>(i) * n + j] += av * b[static_cast<int64_t>(p) * n + j];
        }
    return c;
}

inline Tensor symmetrize(const Tensor& a) {
    int d = a.dim(0);
    Tensor s({d, d});
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
            s[static_cast<int64_t>(i) * d + j] =
                0.5 * (a[static_cast<int64_t>(i) * d + j] + a[static_cast<int64_t>(j) * d + i]);
    return s;
}

inline double trace(const Tensor& a) {
    int d = a.dim(0);
    double t = 0;
    for (int i = 0; i < d; ++i) t += a[static_cast<int64_t>(i) * d + i];
    return t;
}

struct EigResult {
    std::vector<double> values;  // unordered
    Tensor vectors;              // column j is the eigenvector of values[j]
};

// Cyclic Jacobi eigendecomposition of a symmetric matrix. Fine for the small
// feature dimensions used here (d <= 64).
inline EigResult jacobi_eigh(const Tensor& sym, int max_sweeps = 64) {
    if (sym.ndim() != 2 || sym.dim(0) != sym.dim(1))
        throw ShapeError("jacobi_eigh: square matrix required");
    int d = sym.dim(0);
    Tensor a = symmetrize(sym);
    Tensor v({d, d});
    for (int i = 0; i < d; ++i) v[static_cast<int64_t>(i) * d + i] = 1.0;

    auto at = [&](int i, int j) -> double& { return a[static_cast<int64_t>(i) * d + j]; };
    auto vt = [&](int i, int j) -> double& { return v[static_cast<int64_t>(i) * d + j]; };

    double scale = 0.0;
    for (int i = 0; i < d; ++i) scale = std::max(scale, std::abs(at(i, i)));
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) scale = std::max(scale, std::abs(at(i, j)));
    double tol = (scale > 0 ? scale : 1.0) * 1e-15;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) off += at(i, j) * at(i, j);
        if (std::sqrt(off) <= tol * d) break;
        for (int p = 0; p < d; ++p) {
            for (int q = p + 1; q < d; ++q) {
                double apq = at(p, q);
                if (std::abs(apq) <= tol * 1e-2) continue;
                double tau = (at(q, q) - at(p, p)) / (2.0 * apq);
                double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = t * c;
                for (int k = 0; k < d; ++k) {
                    double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < d; ++k) {
                    double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < d; ++k) {
                    double vkp = vt(k, p), vkq = vt(k, q);
                    vt(k, p) = c * vkp - s * vkq;
                    vt(k, q) = s * vkp + c * vkq;
                }
            }
        }
    }
    EigResult r;
    r.values.resize(static_cast<size_t>(d));
    for (int i = 0; i < d; ++i) r.values[static_cast<size_t>(i)] = at(i, i);
    r.vectors = std::move(v);
    return r;
}

// Rebuild V f(Lambda) V^T from an eigendecomposition.
inline Tensor rebuild(const EigResult& e, const std::vector<double>& f_values) {
    int d = e.vectors.dim(0);
    Tensor out({d, d});
    for (int k = 0; k < d; ++k) {
        double lam = f_values[static_cast<size_t>(k)];
        for (int i = 0; i < d; ++i) {
            double vik = e.vectors[static_cast<int64_t>(i) * d + k] * lam;
            for (int j = 0; j < d; ++j)
                out[static_cast<int64_t>(i) * d + j] +=
                    vik * e.vectors[static_cast<int64_t>(j) * d + k];
        }
    }
    return out;
}

// Eigenvalue clamp at `floor` (PSD repair).
inline Tensor clamp_psd(const Tensor& sym, double floor) {
    EigResult e = jacobi_eigh(sym);
    std::vector<double> vals = e.values;
    for (double& v : vals) v = std::max(v, floor);
    return rebuild(e, vals);
}

// Symmetric PSD square root with eigenvalues clamped at zero first; rejects
// genuinely negative spectra beyond rounding noise.
inline Tensor psd_sqrt(const Tensor& sym, double neg_tol = 1e-8) {
    EigResult e = jacobi_eigh(sym);
    double top = 0.0;
    for (double v : e.values) top = std::max(top, std::abs(v));
    std::vector<double> vals = e.values;
    for (double& v : vals) {
        if (v < -neg_tol * std::max(1.0, top))
            throw NumericError("psd_sqrt: matrix is not PSD after repair");
        v = std::sqrt(std::max(v, 0.0));
    }
    return rebuild(e, vals);
}

}  // namespace privdiff::linalg
