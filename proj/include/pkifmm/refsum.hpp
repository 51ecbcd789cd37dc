#pragma once

#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "pkifmm/geometry.hpp"
#include "pkifmm/kernel.hpp"
#include "pkifmm/linalg.hpp"

namespace pkifmm {

/// Unsupported (kernel, periodicity, method) combinations and provenance
/// mismatches raise this.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Parameters of the periodic reference sums. The Ewald defaults are chosen
/// so that truncation error stays below 1e-14 for the unit box; evaluators
/// widen the effective cutoffs automatically when xi is small. n_images is
/// the image count for singly periodic direct summation.
struct EwaldParams {
    double xi = 8.0;
    int real_shells = 2;
    int wave_cutoff = 64;
    long long n_images = 1000000;

    bool operator==(const EwaldParams &o) const = default;
};

enum class PeriodicMethod { direct_sp, ewald_laplace_dp, ewald_laplace_tp, ewald_stokes_tp_hasimoto };

const char *method_name(PeriodicMethod m);
PeriodicMethod method_from_name(std::string_view name);

/// A kernel together with its periodic summation rule K^P.
struct PeriodicKernelSpec {
    KernelSpec kernel;
    PeriodicSetup setup;
    EwaldParams params;
    PeriodicMethod method = PeriodicMethod::direct_sp;
};

/// Picks the default method for (kernel, periodicity) or throws ConfigError
/// when no method exists (doubly periodic Stokes directs users to the triply
/// periodic path).
PeriodicKernelSpec make_periodic_spec(const KernelSpec &kernel, const PeriodicSetup &setup, EwaldParams params = {});
void validate_method(const PeriodicKernelSpec &spec);

/// K^P(x, y): the periodic Green's function value, kt x ks row-major block.
/// The p=0 self image is included; image coincidence (x - y on the source
/// lattice but x != y) is an error.
void eval_periodic(const PeriodicKernelSpec &spec, const Vec3 &x, const Vec3 &y, double *block);

/// Lattice sum over all p != 0 at zero separation (the value a target sitting
/// exactly on a source sees from the source's images).
void eval_periodic_self_images(const PeriodicKernelSpec &spec, double *block);

/// K^{P,F}(x, y) = K^P - sum of images with max-norm <= ell. For direct_sp
/// this is the tail sum over ell < |p_z| <= n without forming K^P.
void eval_kpf(const PeriodicKernelSpec &spec, const Vec3 &x, const Vec3 &y, double *block);

/// Batched K^P over target/source lists; diagonal pairs with bitwise equal
/// coordinates get the self-image value. Uses separable reciprocal-space
/// assembly for the Ewald methods.
DenseMatrix periodic_block(const PeriodicKernelSpec &spec, std::span<const Vec3> targets,
                           std::span<const Vec3> sources);

/// Batched K^{P,F} over target/source lists.
DenseMatrix kpf_block(const PeriodicKernelSpec &spec, std::span<const Vec3> targets, std::span<const Vec3> sources);

struct CompatReport {
    bool ok = true;
    std::string violated; // empty when ok
    double residual = 0.0;
};

/// Physical solvability of the periodic sum: charge neutrality for Laplace,
/// zero net force for Stokes under SP/DP; triply periodic Stokes admits any
/// net force.
CompatReport check_compatibility(const KernelSpec &kernel, const PeriodicSetup &setup,
                                 std::span<const double> strengths);

/// Ground-truth pairwise evaluator: q_t = sum_s K^P(x_t, y_s) phi_s with the
/// p=0 self pair excluded when a target coincides with a source. O(T*S).
std::vector<double> oracle_system_eval(const PeriodicKernelSpec &spec, std::span<const Vec3> sources,
                                       std::span<const double> strengths, std::span<const Vec3> targets);

/// exp(x^2) * erfc(x), stable for large x. Exposed for tests.
double erfcx(double x);

} // namespace pkifmm
