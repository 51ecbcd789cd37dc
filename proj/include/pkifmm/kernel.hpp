#pragma once

#include <span>
#include <string_view>

#include <Eigen/Dense>

#include "pkifmm/linalg.hpp"

namespace pkifmm {

using Vec3 = Eigen::Vector3d;

enum class KernelType { laplace, stokeslet };

/// Free-space kernel descriptor. Laplace returns 1/|r| (the 1/4pi factor is
/// omitted); the Stokeslet is (1/8pi)(I/|r| + r r^T/|r|^3). Both map a source
/// value of dimension ks to a target value of dimension kt.
struct KernelSpec {
    KernelType type = KernelType::laplace;
    int ks = 1;
    int kt = 1;

    static KernelSpec laplace() { return KernelSpec{KernelType::laplace, 1, 1}; }
    static KernelSpec stokeslet() { return KernelSpec{KernelType::stokeslet, 3, 3}; }
    static KernelSpec from_name(std::string_view name);
    const char *name() const;
    bool operator==(const KernelSpec &o) const { return type == o.type; }
};

/// Evaluates the kt x ks kernel block (row-major) at x - y.
/// Zero separation is an error; callers exclude self-interaction.
void kernel_eval(const KernelSpec &kernel, const Vec3 &x, const Vec3 &y, double *block);

/// Same, with |r| > 0 guaranteed by the caller.
void kernel_eval_nocheck(const KernelSpec &kernel, const Vec3 &x, const Vec3 &y, double *block);

/// Assembles the (kt*|targets|) x (ks*|sources|) interaction matrix, block
/// (i,j) equal to kernel_eval(targets[i], sources[j]).
DenseMatrix kernel_block(const KernelSpec &kernel, std::span<const Vec3> targets, std::span<const Vec3> sources);

/// Fused apply: out[kt*i..] += sum_j K(targets[i], sources[j] + shift) * density[ks*j..].
/// Pairs with exactly coincident target and source are skipped when
/// skip_coincident is set (the self-interaction convention).
void kernel_block_apply(const KernelSpec &kernel, std::span<const Vec3> targets, std::span<const Vec3> sources,
                        const Vec3 &shift, std::span<const double> density, std::span<double> out,
                        bool skip_coincident = false);

} // namespace pkifmm
