// Symmetric eigensolver (cyclic Jacobi) sized for verification-scale
// matrices, and the Gram-vs-covariance spectrum comparison.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "xcit/kernels.hpp"
#include "xcit/tensor.hpp"

namespace xcit {

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
// descending. Throws after the sweep budget if the off-diagonal mass has not
// collapsed.
inline std::vector<double> symmetric_eigenvalues(const Tensor<double>& a, int max_sweeps = 50) {
    detail::require(a.rank() == 2 && a.rows() == a.cols(),
                    "symmetric_eigenvalues wants a square matrix, got " + shape_str(a.shape()));
    const std::int64_t n = a.rows();
    std::vector<double> m(static_cast<std::size_t>(n * n));
    for (std::int64_t i = 0; i < n * n; ++i) m[static_cast<std::size_t>(i)] = a[i];
    auto at = [&](std::int64_t r, std::int64_t c) -> double& {
        return m[static_cast<std::size_t>(r * n + c)];
    };

    double fro = 0.0;
    for (double v : m) fro += v * v;
    fro = std::sqrt(fro);
    const double tol = 1e-14 * std::max(fro, 1e-300);

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::int64_t p = 0; p < n; ++p)
            for (std::int64_t q = p + 1; q < n; ++q) off += at(p, q) * at(p, q);
        if (std::sqrt(2.0 * off) <= tol) {
            std::vector<double> eig(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) eig[static_cast<std::size_t>(i)] = at(i, i);
            std::sort(eig.begin(), eig.end(), std::greater<double>());
            return eig;
        }
        for (std::int64_t p = 0; p < n; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (apq == 0.0) continue;
                const double app = at(p, p), aqq = at(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::int64_t k = 0; k < n; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    throw NumericError("jacobi eigensolver did not converge within sweep budget");
}

struct SpectrumPair {
    std::vector<double> gram;        // eigenvalues of X X^T, descending
    std::vector<double> covariance;  // eigenvalues of X^T X, descending

    // Largest gap between the top min(N,d) eigenvalues, scaled by the
    // spectral radius. Forming the products already perturbs the small
    // eigenvalues at machine-epsilon-times-lambda_max, so the per-eigenvalue
    // quotient is not a meaningful metric below that floor.
    double max_relative_gap() const {
        const std::size_t k = std::min(gram.size(), covariance.size());
        double lmax = 0.0;
        for (std::size_t i = 0; i < k; ++i)
            lmax = std::max({lmax, std::abs(gram[i]), std::abs(covariance[i])});
        if (lmax == 0.0) return 0.0;
        double worst = 0.0;
        for (std::size_t i = 0; i < k; ++i)
            worst = std::max(worst, std::abs(gram[i] - covariance[i]) / lmax);
        return worst;
    }
};

inline SpectrumPair spectrum_compare(const Tensor<double>& x) {
    detail::require(x.rank() == 2, "spectrum_compare expects [N,d]");
    detail::require(x.rows() <= 64 && x.cols() <= 64, "spectrum_compare is verification-scale (N,d <= 64)");
    Tensor<double> xt = transpose(x);
    SpectrumPair out;
    out.gram = symmetric_eigenvalues(matmul(x, xt));
    out.covariance = symmetric_eigenvalues(matmul(xt, x));
    return out;
}

}  // namespace xcit
