#include "pkifmm/geometry.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace pkifmm {

const char *periodicity_name(Periodicity p) {
    switch (p) {
    case Periodicity::none: return "none";
    case Periodicity::sp: return "sp";
    case Periodicity::dp: return "dp";
    case Periodicity::tp: return "tp";
    }
    return "none";
}

Periodicity periodicity_from_name(std::string_view name) {
    if (name == "none") return Periodicity::none;
    if (name == "sp") return Periodicity::sp;
    if (name == "dp") return Periodicity::dp;
    if (name == "tp") return Periodicity::tp;
    throw std::invalid_argument("unknown periodicity: " + std::string(name));
}

PeriodicSetup PeriodicSetup::make(Periodicity p, int ell) {
    if (ell < 1) throw std::invalid_argument("PeriodicSetup: ell must be >= 1");
    PeriodicSetup s;
    s.periodicity = p;
    s.ell = ell;
    switch (p) {
    case Periodicity::none: break;
    case Periodicity::sp: s.axes = {false, false, true}; break;
    case Periodicity::dp: s.axes = {true, true, false}; break;
    case Periodicity::tp: s.axes = {true, true, true}; break;
    }
    return s;
}

int surface_point_count(int p) { return 6 * (p - 1) * (p - 1) + 2; }

std::vector<Vec3i> surface_grid_indices(int p) {
    if (p < 2) throw std::invalid_argument("surface grid requires p >= 2");
    std::vector<Vec3i> idx;
    idx.reserve(surface_point_count(p));
    idx.emplace_back(0, 0, 0);
    for (int i = 0; i < p - 1; i++)
        for (int j = 0; j < p - 1; j++) idx.emplace_back(0, i + 1, j);
    for (int i = 0; i < p - 1; i++)
        for (int j = 0; j < p - 1; j++) idx.emplace_back(i, 0, j + 1);
    for (int i = 0; i < p - 1; i++)
        for (int j = 0; j < p - 1; j++) idx.emplace_back(i + 1, j, 0);
    const int half = static_cast<int>(idx.size());
    for (int i = 0; i < half; i++)
        idx.emplace_back(p - 1 - idx[i][0], p - 1 - idx[i][1], p - 1 - idx[i][2]);
    return idx;
}

std::vector<Vec3> surface_points(int p, const Vec3 &center, double edge) {
    const auto idx = surface_grid_indices(p);
    std::vector<Vec3> pts(idx.size());
    const double half_edge = 0.5 * edge;
    const double scale = 2.0 / (p - 1);
    for (size_t i = 0; i < idx.size(); i++) {
        // template coordinate in [-1, 1]: -1 + 2*g/(p-1)
        const Vec3 t(idx[i][0] * scale - 1.0, idx[i][1] * scale - 1.0, idx[i][2] * scale - 1.0);
        pts[i] = center + half_edge * t;
    }
    return pts;
}

std::vector<Vec3i> image_offsets(const PeriodicSetup &setup, int min_norm, int max_norm) {
    if (min_norm < 0 || min_norm > max_norm) throw std::invalid_argument("image_offsets: bad norm range");
    std::vector<Vec3i> out;
    const int lx = setup.axes[0] ? max_norm : 0;
    const int ly = setup.axes[1] ? max_norm : 0;
    const int lz = setup.axes[2] ? max_norm : 0;
    for (int ox = -lx; ox <= lx; ox++)
        for (int oy = -ly; oy <= ly; oy++)
            for (int oz = -lz; oz <= lz; oz++) {
                const int norm = std::max({std::abs(ox), std::abs(oy), std::abs(oz)});
                if (norm < min_norm || norm > max_norm) continue;
                out.emplace_back(ox, oy, oz);
            }
    return out;
}

QuadratureGrid clenshaw_curtis(int n) {
    if (n < 2) throw std::invalid_argument("clenshaw_curtis: n must be >= 2");
    const int nseg = n - 1;
    QuadratureGrid g;
    g.nodes.resize(n);
    g.weights.resize(n);
    for (int i = 0; i < n; i++) g.nodes[i] = 0.5 * (1.0 - std::cos(M_PI * i / nseg));
    // weights for [-1,1], halved for the map to [0,1]
    for (int i = 0; i <= nseg; i++) {
        double s = 0.0;
        for (int j = 1; j <= nseg / 2; j++) {
            const double b = (2 * j == nseg) ? 1.0 : 2.0;
            s += b / (4.0 * j * j - 1.0) * std::cos(2.0 * M_PI * j * i / nseg);
        }
        double w = (2.0 / nseg) * (1.0 - s);
        if (i == 0 || i == nseg) w *= 0.5;
        g.weights[i] = 0.5 * w;
    }
    return g;
}

double surface_flux(std::span<const double> values, const QuadratureGrid &grid) {
    const int n = grid.n_points();
    if (static_cast<int>(values.size()) != n * n)
        throw std::invalid_argument("surface_flux: expected n*n samples, got " + std::to_string(values.size()));
    double acc = 0.0;
    for (int i = 0; i < n; i++) {
        double row = 0.0;
        for (int j = 0; j < n; j++) row += values[static_cast<size_t>(i) * n + j] * grid.weights[j];
        acc += row * grid.weights[i];
    }
    return acc;
}

} // namespace pkifmm
