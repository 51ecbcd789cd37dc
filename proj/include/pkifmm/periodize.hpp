#pragma once

#include <cstdint>
#include <string>

#include "pkifmm/linalg.hpp"
#include "pkifmm/refsum.hpp"

namespace pkifmm {

/// Equivalent density on a root surface: upward lives on the inner (1.05)
/// cube, downward on the outer (2.95) cube.
struct EquivalentDensity {
    enum class Role { upward, downward };
    std::vector<double> values; // ks * n
    Role role = Role::upward;
};

/// The dense periodizing operator mapping the root upward equivalent density
/// to the downward density that reproduces all periodic images outside the
/// ell-layer near field.
struct PeriodizingOperator {
    DenseMatrix matrix; // (ks n) x (ks n)
    KernelSpec kernel;
    PeriodicSetup setup;
    int p = 0;
    double inner_scale = kInnerSurfaceScale;
    double outer_scale = kOuterSurfaceScale;
    PeriodicMethod method = PeriodicMethod::direct_sp;
    EwaldParams params;
    double residual_max = 0.0;
    std::string created; // ISO timestamp, informational only
};

/// q_ij = K^{P,F}(x_i^{B0,d}, y_j^{B0,u}) over the overlapping 1.05-edge
/// surfaces. Diagonal blocks are finite because the near images are excluded.
DenseMatrix assemble_kpf_matrix(const PeriodicKernelSpec &spec, int p);

/// Solves A T = K^{P,F} column-by-column through one SVD of A applied in
/// nested order, records the worst per-column backward residual, and fails
/// when the 1e-11 residual gate is exceeded.
PeriodizingOperator solve_m2l(const PeriodicKernelSpec &spec, int p);

/// Variant reusing a caller-provided factorization of A (the downward
/// check-to-equivalent matrix at the root scale).
PeriodizingOperator solve_m2l(const PeriodicKernelSpec &spec, int p, const SvdFactors &a_factors);

/// Builds operators for several splitting depths at once. The Ewald methods
/// share a single K^P assembly; only the near-image subtraction differs per
/// ell.
std::vector<PeriodizingOperator> solve_m2l_ells(const PeriodicKernelSpec &spec, int p, std::span<const int> ells,
                                                const SvdFactors &a_factors);

EquivalentDensity apply_m2l(const PeriodizingOperator &op, const EquivalentDensity &upward);

/// q_F^t = sum_j K(x_t, y_j^{B0,d}) phi_j over the n points of the outer
/// root surface; accumulates into `out`.
void far_field_eval(const KernelSpec &kernel, int p, const EquivalentDensity &downward,
                    std::span<const Vec3> targets, std::span<double> out);

void save_operator(const PeriodizingOperator &op, const std::string &path);
PeriodizingOperator load_operator(const std::string &path);

uint64_t crc64(const void *data, size_t len);

} // namespace pkifmm
