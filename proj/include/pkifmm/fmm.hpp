#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "pkifmm/geometry.hpp"
#include "pkifmm/kernel.hpp"
#include "pkifmm/linalg.hpp"
#include "pkifmm/periodize.hpp"
#include "pkifmm/refsum.hpp"

namespace pkifmm {

struct KifmmOperators;

/// Shared per-(kernel, p) translation operators at the root scale: the
/// upward/downward check-to-equivalent factorizations, octant M2M/L2L
/// matrices, and M2L matrices cached per octahedral symmetry class. Deeper
/// levels reuse them through the degree -1 homogeneity of both kernels.
std::shared_ptr<const KifmmOperators> kifmm_operators(const KernelSpec &kernel, int p);

/// Downward check (1.05) -> downward equivalent (2.95) factorization at the
/// root scale, shared with the periodizing-operator solve.
const SvdFactors &downward_factors(const KifmmOperators &ops);
const SvdFactors &upward_factors(const KifmmOperators &ops);

/// Adaptive octree over B0 = [0,1)^3 with per-leaf source/target index lists.
class FmmTree {
  public:
    FmmTree(std::vector<Vec3> sources, std::vector<Vec3> targets, int leaf_capacity = 1000, int max_depth = 12);

    int depth() const { return depth_; }
    size_t box_count() const { return boxes_.size(); }
    size_t leaf_count() const;
    int leaf_capacity() const { return leaf_capacity_; }
    uint64_t structure_hash() const;
    const std::vector<Vec3> &sources() const { return sources_; }
    const std::vector<Vec3> &targets() const { return targets_; }

    /// Free-space KIFMM sum: upward pass, M2L translations, downward pass,
    /// direct interactions for adjacent leaves.
    std::vector<double> eval_free_space(const KernelSpec &kernel, int p, std::span<const double> strengths);

    /// Near-field sum over all periodic images with max-norm <= ell: the
    /// free-space sum, wrapped interaction lists for the adjacent image
    /// layer, and a root-level summed translation for layers 2..ell.
    std::vector<double> eval_near_field(const KernelSpec &kernel, int p, std::span<const double> strengths,
                                        const PeriodicSetup &setup);

    /// Root upward equivalent density from the most recent upward pass for
    /// (kernel, p, strengths); runs the pass if none matches.
    EquivalentDensity root_upward_density(const KernelSpec &kernel, int p, std::span<const double> strengths);

  private:
    struct Box {
        int level = 0;
        std::array<int, 3> cell{0, 0, 0};
        int parent = -1;
        std::array<int, 8> child{-1, -1, -1, -1, -1, -1, -1, -1};
        bool leaf = true;
        std::vector<int> src, trg; // point indices, leaves only
        int src_subtree = 0, trg_subtree = 0;
    };
    friend struct FmmTreeTestAccess;

    Vec3 box_center(const Box &b) const;
    void split(int bi);
    void build_lists(const PeriodicSetup *setup);
    void traverse(int bi, int ci, const Vec3i &shift);
    std::vector<double> run(const KernelSpec &kernel, int p, std::span<const double> strengths,
                            const PeriodicSetup *setup);

    std::vector<Vec3> sources_, targets_;
    int leaf_capacity_ = 1000;
    int max_depth_ = 12;
    int depth_ = 0;
    std::vector<Box> boxes_;
    std::vector<std::vector<int>> level_boxes_;

    // interaction lists, keyed by the wrap-offset set they were built for
    struct Lists {
        std::vector<Vec3i> wraps; // image shifts included (beyond zero)
        std::vector<std::vector<std::pair<int, Vec3>>> u;  // leaf-leaf direct, physical shift
        std::vector<std::vector<std::pair<int, Vec3i>>> v; // same-level well-separated, cell offset
        std::vector<std::vector<std::pair<int, Vec3>>> w;  // finer well-separated source boxes
        std::vector<std::vector<std::pair<int, Vec3>>> x;  // coarser source leaves
        bool built = false;
    } lists_;

    // root density from the most recent pass
    struct PassState {
        KernelSpec kernel;
        int p = -1;
        std::vector<double> strengths;
        std::vector<double> root_phi_up;
        bool valid = false;
    } state_;
};

/// Convenience wrapper matching the operation name.
inline FmmTree build_tree(std::vector<Vec3> sources, std::vector<Vec3> targets, int leaf_capacity = 1000) {
    return FmmTree(std::move(sources), std::move(targets), leaf_capacity);
}

/// Standalone upward density for small systems evaluated without a tree:
/// the source field is sampled on the root upward check surface and solved
/// with the upward factorization.
EquivalentDensity direct_root_upward_density(const KernelSpec &kernel, int p, std::span<const Vec3> sources,
                                             std::span<const double> strengths);

enum class EvalMode { fmm, direct };

struct EvalTimings {
    double tree = 0.0, near = 0.0, m2l_apply = 0.0, far = 0.0;
};

struct EvalRequest {
    KernelSpec kernel;
    std::vector<Vec3> sources;
    std::vector<double> strengths; // ks per source
    std::vector<Vec3> targets;
    PeriodicSetup setup;
    int p = 8;
    const PeriodizingOperator *op = nullptr; // required unless periodicity none
    EvalMode mode = EvalMode::fmm;
    int leaf_capacity = 1000;
    bool force = false; // skip the compatibility gate
};

struct EvalResult {
    std::vector<double> potentials;
    EvalTimings timings;
    CompatReport compat;
};

/// Near + far evaluation: near field over ell layers of images, far field
/// through the periodizing operator applied to the root upward density.
EvalResult evaluate(const EvalRequest &request);

} // namespace pkifmm
