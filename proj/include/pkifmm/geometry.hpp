#pragma once

#include <array>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace pkifmm {

using Vec3 = Eigen::Vector3d;
using Vec3i = Eigen::Vector3i;

/// Edge-length factors of the cube check/equivalent surfaces relative to the
/// box edge. Inner: upward equivalent and downward check. Outer: upward check
/// and downward equivalent.
constexpr double kInnerSurfaceScale = 1.05;
constexpr double kOuterSurfaceScale = 2.95;

enum class Periodicity { none, sp, dp, tp };

const char *periodicity_name(Periodicity p);
Periodicity periodicity_from_name(std::string_view name);

/// Periodic problem setup: which axes wrap, the unit box, and the near-field
/// splitting depth ell (image boxes with max-norm <= ell are summed directly).
struct PeriodicSetup {
    Periodicity periodicity = Periodicity::none;
    std::array<bool, 3> axes{false, false, false};
    double box_length = 1.0;
    int ell = 2;

    /// Default axes follow the reference configurations: SP is periodic along
    /// z, DP in the x-y plane, TP in all three directions.
    static PeriodicSetup make(Periodicity p, int ell = 2);
    int dim() const { return int(axes[0]) + int(axes[1]) + int(axes[2]); }
    bool operator==(const PeriodicSetup &o) const {
        return periodicity == o.periodicity && axes == o.axes && box_length == o.box_length && ell == o.ell;
    }
};

/// Number of points of the surface grid: 6(p-1)^2 + 2.
int surface_point_count(int p);

/// Regular grid on the surface of a cube with the given edge length and
/// center, in the fixed ordering documented in docs/surface-ordering.md.
/// No duplicated edge or corner points.
std::vector<Vec3> surface_points(int p, const Vec3 &center, double edge);

/// Integer grid coordinates (each in [0, p-1]) of the points returned by
/// surface_points, in the same order. Used for exact symmetry index maps.
std::vector<Vec3i> surface_grid_indices(int p);

/// All integer offsets supported on the periodic axes with max-norm in
/// [min_norm, max_norm], in a fixed lexicographic order. Excludes zero when
/// min_norm >= 1.
std::vector<Vec3i> image_offsets(const PeriodicSetup &setup, int min_norm, int max_norm);

struct QuadratureGrid {
    std::vector<double> nodes;   // strictly increasing in [0, 1]
    std::vector<double> weights; // sum to 1
    int n_points() const { return static_cast<int>(nodes.size()); }
};

/// Clenshaw-Curtis rule on [0,1]: Chebyshev extrema nodes including both
/// endpoints.
QuadratureGrid clenshaw_curtis(int n);

/// Integrates face-normal samples u(x_ij) over a unit box face:
/// sum_ij u[i*n+j] w_i w_j. `values` must hold n*n samples for the grid's n.
double surface_flux(std::span<const double> values, const QuadratureGrid &grid);

} // namespace pkifmm
