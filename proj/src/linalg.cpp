#include "pkifmm/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include <cblas.h>
#include <lapacke.h>

#include "pkifmm/geometry.hpp"
#include "pkifmm/kernel.hpp"

namespace pkifmm {

double DenseMatrix::max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::fabs(v));
    return m;
}

DenseMatrix transpose(const DenseMatrix &a) {
    DenseMatrix t(a.cols, a.rows);
    for (int i = 0; i < a.rows; i++)
        for (int j = 0; j < a.cols; j++) t(j, i) = a(i, j);
    return t;
}

DenseMatrix matmul(const DenseMatrix &a, const DenseMatrix &b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
    DenseMatrix c(a.rows, b.cols);
    if (a.rows == 0 || b.cols == 0 || a.cols == 0) return c;
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, a.rows, b.cols, a.cols, 1.0, a.data.data(), a.cols,
                b.data.data(), b.cols, 0.0, c.data.data(), c.cols);
    return c;
}

void matvec(const DenseMatrix &a, const double *x, double *y, double alpha, double beta) {
    if (a.rows == 0) return;
    cblas_dgemv(CblasRowMajor, CblasNoTrans, a.rows, a.cols, alpha, a.data.data(), a.cols, x, 1, beta, y, 1);
}

SvdFactors svd(const DenseMatrix &a, SvdAlgorithm alg) {
    const int m = a.rows, n = a.cols, k = std::min(m, n);
    SvdFactors f;
    f.u = DenseMatrix(m, k);
    f.vt = DenseMatrix(k, n);
    f.sigma.assign(k, 0.0);

    DenseMatrix work = a; // dgesdd/dgesvd destroy the input
    lapack_int info = 0;
    if (alg == SvdAlgorithm::divide_conquer) {
        info = LAPACKE_dgesdd(LAPACK_ROW_MAJOR, 'S', m, n, work.data.data(), n, f.sigma.data(), f.u.data.data(), k,
                              f.vt.data.data(), n);
    } else {
        std::vector<double> superb(k > 1 ? k - 1 : 1);
        info = LAPACKE_dgesvd(LAPACK_ROW_MAJOR, 'S', 'S', m, n, work.data.data(), n, f.sigma.data(),
                              f.u.data.data(), k, f.vt.data.data(), n, superb.data());
    }
    if (info != 0)
        throw std::runtime_error("svd: LAPACK did not converge (info=" + std::to_string(info) + ")");

    const double eps_m = std::numeric_limits<double>::epsilon(); // 2^-52
    const double s_max = f.sigma.empty() ? 0.0 : f.sigma[0];
    f.eps_svd = eps_m * s_max;
    f.rank_threshold = eps_m * s_max * std::max(m, n);
    f.numerical_rank = 0;
    double s_min_nonzero = 0.0;
    for (double s : f.sigma) {
        if (s > f.rank_threshold) f.numerical_rank++;
        if (s > 0.0) s_min_nonzero = s;
    }
    f.kappa = (s_min_nonzero > 0.0) ? s_max / s_min_nonzero : std::numeric_limits<double>::infinity();
    return f;
}

std::vector<double> pinv_apply(const SvdFactors &f, std::span<const double> b) {
    const int m = f.u.rows, k = static_cast<int>(f.sigma.size()), n = f.vt.cols;
    if (static_cast<int>(b.size()) != m) throw std::invalid_argument("pinv_apply: rhs dimension mismatch");
    std::vector<double> t(k, 0.0);
    cblas_dgemv(CblasRowMajor, CblasTrans, m, k, 1.0, f.u.data.data(), k, b.data(), 1, 0.0, t.data(), 1);
    for (int i = 0; i < k; i++) t[i] = (f.sigma[i] > f.eps_svd) ? t[i] / f.sigma[i] : 0.0;
    std::vector<double> x(n, 0.0);
    cblas_dgemv(CblasRowMajor, CblasTrans, k, n, 1.0, f.vt.data.data(), n, t.data(), 1, 0.0, x.data(), 1);
    return x;
}

DenseMatrix pinv_apply_block(const SvdFactors &f, const DenseMatrix &b) {
    const int m = f.u.rows, k = static_cast<int>(f.sigma.size()), n = f.vt.cols;
    if (b.rows != m) throw std::invalid_argument("pinv_apply_block: rhs dimension mismatch");
    DenseMatrix t(k, b.cols);
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, b.cols, m, 1.0, f.u.data.data(), k, b.data.data(), b.cols,
                0.0, t.data.data(), t.cols);
    for (int i = 0; i < k; i++) {
        const double inv = (f.sigma[i] > f.eps_svd) ? 1.0 / f.sigma[i] : 0.0;
        double *row = &t.data[static_cast<size_t>(i) * t.cols];
        for (int j = 0; j < t.cols; j++) row[j] *= inv;
    }
    DenseMatrix x(n, b.cols);
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, n, b.cols, k, 1.0, f.vt.data.data(), n, t.data.data(), t.cols,
                0.0, x.data.data(), x.cols);
    return x;
}

DenseMatrix explicit_pinv(const SvdFactors &f) {
    const int m = f.u.rows, k = static_cast<int>(f.sigma.size()), n = f.vt.cols;
    DenseMatrix vs(n, k); // V * S+
    for (int i = 0; i < n; i++)
        for (int j = 0; j < k; j++)
            vs(i, j) = (f.sigma[j] > f.eps_svd) ? f.vt(j, i) / f.sigma[j] : 0.0;
    DenseMatrix p(n, m);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, n, m, k, 1.0, vs.data.data(), vs.cols, f.u.data.data(), k,
                0.0, p.data.data(), p.cols);
    return p;
}

std::vector<double> pinv_apply_explicit(const SvdFactors &f, std::span<const double> b) {
    if (static_cast<int>(b.size()) != f.u.rows)
        throw std::invalid_argument("pinv_apply_explicit: rhs dimension mismatch");
    DenseMatrix p = explicit_pinv(f);
    std::vector<double> x(p.rows, 0.0);
    matvec(p, b.data(), x.data());
    return x;
}

ConditioningReport conditioning_report(const KernelSpec &kernel, int p) {
    if (p < 4 || p > 24) throw std::invalid_argument("conditioning_report: p out of supported range [4,24]");
    const Vec3 center(0.5, 0.5, 0.5);
    const auto check = surface_points(p, center, kInnerSurfaceScale);
    const auto equiv = surface_points(p, center, kOuterSurfaceScale);
    const DenseMatrix a = kernel_block(kernel, check, equiv);
    const SvdFactors f = svd(a);
    return ConditioningReport{f.kappa, f.numerical_rank, a.cols};
}

} // namespace pkifmm
