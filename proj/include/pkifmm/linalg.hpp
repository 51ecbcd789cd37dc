#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace pkifmm {

/// Dense row-major matrix. Plain storage; products and factorizations go
/// through BLAS/LAPACK in linalg.cpp.
struct DenseMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    DenseMatrix() = default;
    DenseMatrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}

    double &operator()(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }
    size_t size() const { return data.size(); }
    double max_abs() const;
};

DenseMatrix transpose(const DenseMatrix &a);
DenseMatrix matmul(const DenseMatrix &a, const DenseMatrix &b);
// y = beta*y + alpha*A*x
void matvec(const DenseMatrix &a, const double *x, double *y, double alpha = 1.0, double beta = 0.0);

enum class SvdAlgorithm { divide_conquer, qr_iteration };

/// SVD factors kept separate (U, S, V^T are never multiplied back together).
/// Two thresholds are deliberately distinct: `rank_threshold` counts the
/// numerical rank (eps * s_max * dim), while `eps_svd` truncates the solve
/// (eps * s_max). Singular values strictly greater than a threshold survive.
struct SvdFactors {
    DenseMatrix u;               // m x k, k = min(m, n)
    std::vector<double> sigma;   // k, descending, all >= 0
    DenseMatrix vt;              // k x n
    double eps_svd = 0.0;        // solve truncation threshold
    double rank_threshold = 0.0; // rank counting threshold
    double kappa = 0.0;          // s_max / s_min over nonzero sigma
    int numerical_rank = 0;
};

SvdFactors svd(const DenseMatrix &a, SvdAlgorithm alg = SvdAlgorithm::divide_conquer);

/// x = V * (S+ * (U^T * b)), evaluated strictly in nested order. Singular
/// values <= eps_svd are treated as zero.
std::vector<double> pinv_apply(const SvdFactors &f, std::span<const double> b);

/// Batched nested apply for many right-hand sides: X = V * (S+ * (U^T * B)).
DenseMatrix pinv_apply_block(const SvdFactors &f, const DenseMatrix &b);

/// Forms the explicit pseudo-inverse V S+ U^T. Negative control for the
/// backward-stability experiment; not used anywhere in the solve pipeline.
DenseMatrix explicit_pinv(const SvdFactors &f);
std::vector<double> pinv_apply_explicit(const SvdFactors &f, std::span<const double> b);

struct KernelSpec;

struct ConditioningReport {
    double kappa = 0.0;
    int numerical_rank = 0;
    int dim = 0;
};

/// Builds the downward check-to-equivalent matrix for the standard surfaces
/// (check edge 1.05, equivalent edge 2.95, unit box) and reports its
/// conditioning.
ConditioningReport conditioning_report(const KernelSpec &kernel, int p);

} // namespace pkifmm
