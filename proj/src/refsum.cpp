#include "pkifmm/refsum.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <mutex>
#include <string>

#include <cblas.h>

namespace pkifmm {

namespace {

constexpr double kSqrtPi = 1.7724538509055160273;
constexpr double kOneOver8Pi = 1.0 / (8.0 * M_PI);
constexpr double kTwoPi = 2.0 * M_PI;

// erfc arguments beyond this contribute below 1e-300
constexpr double kErfcCut = 27.0;

int eff_real_shells(const EwaldParams &pa) {
    return std::max(pa.real_shells, static_cast<int>(std::ceil(kErfcCut / pa.xi - 0.5)));
}

int eff_wave_cutoff(const EwaldParams &pa) {
    return std::min(pa.wave_cutoff, static_cast<int>(std::ceil(2.2 * pa.xi)) + 2);
}

double wrap_unit(double x) { return x - std::round(x); }

Vec3 wrap_axes(const Vec3 &r, const std::array<bool, 3> &axes) {
    return Vec3(axes[0] ? wrap_unit(r[0]) : r[0], axes[1] ? wrap_unit(r[1]) : r[1], axes[2] ? wrap_unit(r[2]) : r[2]);
}

using Mat3 = Eigen::Matrix3d;

// ---------------------------------------------------------------------------
// Triply periodic Laplace (classical erfc/Gaussian split, zero box mean)

double laplace_tp_real(const Vec3 &rw, const EwaldParams &pa, bool skip_zero_image) {
    const double xi = pa.xi;
    const int s = eff_real_shells(pa);
    const double cut2 = (kErfcCut / xi) * (kErfcCut / xi);
    double acc = 0.0;
    for (int i = -s; i <= s; i++)
        for (int j = -s; j <= s; j++)
            for (int k = -s; k <= s; k++) {
                const double dx = rw[0] + i, dy = rw[1] + j, dz = rw[2] + k;
                const double d2 = dx * dx + dy * dy + dz * dz;
                if (d2 == 0.0) {
                    if (skip_zero_image) continue;
                    return std::numeric_limits<double>::infinity();
                }
                if (d2 > cut2) continue;
                const double d = std::sqrt(d2);
                acc += std::erfc(xi * d) / d;
            }
    return acc;
}

double laplace_tp_wave(const Vec3 &rw, const EwaldParams &pa) {
    const double xi = pa.xi;
    const int m = eff_wave_cutoff(pa);
    const double inv4xi2 = 1.0 / (4.0 * xi * xi);
    double acc = 0.0;
    for (int i = -m; i <= m; i++)
        for (int j = -m; j <= m; j++)
            for (int k = -m; k <= m; k++) {
                if (i == 0 && j == 0 && k == 0) continue;
                const double kx = kTwoPi * i, ky = kTwoPi * j, kz = kTwoPi * k;
                const double k2 = kx * kx + ky * ky + kz * kz;
                acc += 4.0 * M_PI * std::exp(-k2 * inv4xi2) / k2 * std::cos(kx * rw[0] + ky * rw[1] + kz * rw[2]);
            }
    return acc;
}

double laplace_tp_point(const Vec3 &rw, const EwaldParams &pa, bool self) {
    double v = laplace_tp_real(rw, pa, self) + laplace_tp_wave(rw, pa) - M_PI / (pa.xi * pa.xi);
    if (self) v -= 2.0 * pa.xi / kSqrtPi;
    return v;
}

// ---------------------------------------------------------------------------
// Doubly periodic Laplace (2D reciprocal form with e^{±kz} erfc combinations)

// e^{kz} erfc(k/2xi + xi z) + e^{-kz} erfc(k/2xi - xi z), evaluated without
// overflow through erfcx.
double theta_sum(double k, double xi, double z) {
    const double u = k / (2.0 * xi);
    const double v = xi * z;
    const double g = std::exp(-u * u - v * v);
    double acc = 0.0;
    for (const double s : {1.0, -1.0}) {
        const double w = u + s * v;
        if (w >= 0.0) {
            acc += g * erfcx(w);
        } else {
            acc += 2.0 * std::exp(2.0 * u * s * v) - g * erfcx(-w);
        }
    }
    return acc;
}

double laplace_dp_k0(double z, double xi) {
    return -2.0 * M_PI * (z * std::erf(xi * z) + std::exp(-xi * xi * z * z) / (xi * kSqrtPi));
}

double laplace_dp_real(const Vec3 &rw, const EwaldParams &pa, bool skip_zero_image) {
    const double xi = pa.xi;
    const int s = eff_real_shells(pa);
    const double cut2 = (kErfcCut / xi) * (kErfcCut / xi);
    double acc = 0.0;
    for (int i = -s; i <= s; i++)
        for (int j = -s; j <= s; j++) {
            const double dx = rw[0] + i, dy = rw[1] + j, dz = rw[2];
            const double d2 = dx * dx + dy * dy + dz * dz;
            if (d2 == 0.0) {
                if (skip_zero_image) continue;
                return std::numeric_limits<double>::infinity();
            }
            if (d2 > cut2) continue;
            const double d = std::sqrt(d2);
            acc += std::erfc(xi * d) / d;
        }
    return acc;
}

double laplace_dp_wave(const Vec3 &rw, const EwaldParams &pa) {
    const double xi = pa.xi;
    const int m = eff_wave_cutoff(pa);
    double acc = 0.0;
    for (int i = -m; i <= m; i++)
        for (int j = -m; j <= m; j++) {
            if (i == 0 && j == 0) continue;
            const double kx = kTwoPi * i, ky = kTwoPi * j;
            const double kn = std::sqrt(kx * kx + ky * ky);
            acc += M_PI * theta_sum(kn, xi, rw[2]) / kn * std::cos(kx * rw[0] + ky * rw[1]);
        }
    return acc + laplace_dp_k0(rw[2], xi);
}

double laplace_dp_point(const Vec3 &rw, const EwaldParams &pa, bool self) {
    double v = laplace_dp_real(rw, pa, self) + laplace_dp_wave(rw, pa);
    if (self) v -= 2.0 * pa.xi / kSqrtPi;
    return v;
}

// ---------------------------------------------------------------------------
// Triply periodic Stokeslet, Hasimoto convention (k=0 removed: zero box-mean
// velocity). Formulas in the 8*pi-free convention; the prefactor is applied
// at the end.

void stokes_real_accum(double xi, const Vec3 &d, double d2, Mat3 &acc) {
    const double r = std::sqrt(d2);
    const double e = std::exp(-xi * xi * d2);
    const double erfc_r = std::erfc(xi * r);
    const double c_gauss = 2.0 * xi / kSqrtPi * e;
    const Mat3 dd = d * d.transpose();
    acc += erfc_r * (Mat3::Identity() / r + dd / (d2 * r)) + c_gauss * (dd / d2 - Mat3::Identity());
}

void stokes_tp_real(const Vec3 &rw, const EwaldParams &pa, bool self, Mat3 &acc) {
    const double xi = pa.xi;
    const int s = eff_real_shells(pa);
    const double cut2 = (kErfcCut / xi) * (kErfcCut / xi);
    for (int i = -s; i <= s; i++)
        for (int j = -s; j <= s; j++)
            for (int k = -s; k <= s; k++) {
                const Vec3 d(rw[0] + i, rw[1] + j, rw[2] + k);
                const double d2 = d.squaredNorm();
                if (d2 == 0.0) continue; // self handled by the -4 xi/sqrt(pi) term
                if (d2 > cut2) continue;
                stokes_real_accum(xi, d, d2, acc);
            }
    if (self) acc -= 4.0 * xi / kSqrtPi * Mat3::Identity();
}

void stokes_tp_wave(const Vec3 &rw, const EwaldParams &pa, Mat3 &acc) {
    const double xi = pa.xi;
    const int m = eff_wave_cutoff(pa);
    const double inv4xi2 = 1.0 / (4.0 * xi * xi);
    for (int i = -m; i <= m; i++)
        for (int j = -m; j <= m; j++)
            for (int k = -m; k <= m; k++) {
                if (i == 0 && j == 0 && k == 0) continue;
                const Vec3 kv(kTwoPi * i, kTwoPi * j, kTwoPi * k);
                const double k2 = kv.squaredNorm();
                const double u2 = k2 * inv4xi2;
                const double b = 8.0 * M_PI * (1.0 + u2) * std::exp(-u2) / (k2 * k2);
                acc += b * (k2 * Mat3::Identity() - kv * kv.transpose()) * std::cos(kv.dot(rw));
            }
}

void stokes_tp_point(const Vec3 &rw, const EwaldParams &pa, bool self, double *block) {
    Mat3 acc = Mat3::Zero();
    stokes_tp_real(rw, pa, self, acc);
    stokes_tp_wave(rw, pa, acc);
    acc *= kOneOver8Pi;
    for (int a = 0; a < 3; a++)
        for (int b = 0; b < 3; b++) block[a * 3 + b] = acc(a, b);
}

// ---------------------------------------------------------------------------
// Singly periodic direct summation (periodic along z). The Laplace tail over
// p in [P0, n] is converted to even-order Legendre moments with power sums
// S_k = sum_p p^-(k+1), so the truncated n-image sum is reproduced exactly
// without the O(n) per-pair loop.

constexpr int kSpP0 = 64;
constexpr int kSpMaxOrder = 18; // even orders up to this; (2/64)^18 ~ 1e-28

struct SpPowerSums {
    std::array<double, kSpMaxOrder + 1> s{};
};

const SpPowerSums &sp_power_sums(long long n) {
    static std::map<long long, SpPowerSums> cache;
    static std::mutex mtx;
    std::lock_guard<std::mutex> lock(mtx);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    SpPowerSums ps;
    for (long long p = n; p >= kSpP0; p--) {
        const double inv = 1.0 / static_cast<double>(p);
        double t = inv;
        for (int k = 0; k <= kSpMaxOrder; k++) {
            ps.s[k] += t;
            t *= inv;
        }
    }
    return cache.emplace(n, ps).first->second;
}

// sum over pz in [lo, hi] of 1/|r - pz ez| + 1/|r + pz ez|, lo >= 1
double laplace_sp_range(const Vec3 &r, long long lo, long long hi, const SpPowerSums *ps) {
    double acc = 0.0;
    const long long direct_hi = std::min<long long>(hi, kSpP0 - 1);
    for (long long p = lo; p <= direct_hi; p++) {
        const double zm = r[2] - p, zp = r[2] + p;
        acc += 1.0 / std::sqrt(r[0] * r[0] + r[1] * r[1] + zm * zm);
        acc += 1.0 / std::sqrt(r[0] * r[0] + r[1] * r[1] + zp * zp);
    }
    if (hi >= kSpP0) {
        const double rho2 = r.squaredNorm();
        const double rho = std::sqrt(rho2);
        acc += 2.0 * ps->s[0]; // k = 0 moment
        if (rho >= 1e-300) {
            const double c = r[2] / rho;
            double pkm2 = 1.0, pkm1 = c; // P_0, P_1
            double rho_k = rho;
            for (int k = 2; k <= kSpMaxOrder; k++) {
                const double pk = ((2.0 * k - 1.0) * c * pkm1 - (k - 1.0) * pkm2) / k;
                pkm2 = pkm1;
                pkm1 = pk;
                rho_k *= rho;
                if (k % 2 == 0) acc += 2.0 * rho_k * pk * ps->s[k];
            }
        }
    }
    return acc;
}

void stokeslet_free_accum(const Vec3 &d, Mat3 &acc) {
    const double d2 = d.squaredNorm();
    const double rinv = 1.0 / std::sqrt(d2);
    acc += rinv * Mat3::Identity() + (d * d.transpose()) * (rinv / d2);
}

// sum over pz in [lo, hi] of both-sign Stokeslet images (8*pi-free convention)
void stokes_sp_range(const Vec3 &r, long long lo, long long hi, Mat3 &acc) {
    for (long long p = lo; p <= hi; p++) {
        stokeslet_free_accum(Vec3(r[0], r[1], r[2] - p), acc);
        stokeslet_free_accum(Vec3(r[0], r[1], r[2] + p), acc);
    }
}

void sp_point(const PeriodicKernelSpec &spec, const Vec3 &r, bool self, double *block) {
    const long long n = spec.params.n_images;
    if (spec.kernel.type == KernelType::laplace) {
        const SpPowerSums *ps = (n >= kSpP0) ? &sp_power_sums(n) : nullptr;
        double v = laplace_sp_range(r, 1, n, ps);
        if (!self) v += 1.0 / r.norm();
        block[0] = v;
        return;
    }
    Mat3 acc = Mat3::Zero();
    stokes_sp_range(r, 1, n, acc);
    if (!self) stokeslet_free_accum(r, acc);
    acc *= kOneOver8Pi;
    for (int a = 0; a < 3; a++)
        for (int b = 0; b < 3; b++) block[a * 3 + b] = acc(a, b);
}

void sp_tail(const PeriodicKernelSpec &spec, const Vec3 &r, double *block) {
    const long long n = spec.params.n_images;
    const int ell = spec.setup.ell;
    if (spec.kernel.type == KernelType::laplace) {
        const SpPowerSums *ps = (n >= kSpP0) ? &sp_power_sums(n) : nullptr;
        block[0] = laplace_sp_range(r, ell + 1, n, ps);
        return;
    }
    Mat3 acc = Mat3::Zero();
    stokes_sp_range(r, ell + 1, n, acc);
    acc *= kOneOver8Pi;
    for (int a = 0; a < 3; a++)
        for (int b = 0; b < 3; b++) block[a * 3 + b] = acc(a, b);
}

// ---------------------------------------------------------------------------

void periodic_point_dispatch(const PeriodicKernelSpec &spec, const Vec3 &r, bool self, double *block) {
    switch (spec.method) {
    case PeriodicMethod::direct_sp:
        sp_point(spec, r, self, block);
        return;
    case PeriodicMethod::ewald_laplace_tp:
        block[0] = laplace_tp_point(wrap_axes(r, spec.setup.axes), spec.params, self);
        return;
    case PeriodicMethod::ewald_laplace_dp:
        block[0] = laplace_dp_point(wrap_axes(r, spec.setup.axes), spec.params, self);
        return;
    case PeriodicMethod::ewald_stokes_tp_hasimoto:
        stokes_tp_point(wrap_axes(r, spec.setup.axes), spec.params, self, block);
        return;
    }
}

void check_image_coincidence(const PeriodicKernelSpec &spec, const Vec3 &r) {
    if (spec.method == PeriodicMethod::direct_sp) {
        if (r[0] == 0.0 && r[1] == 0.0 && std::abs(r[2] - std::round(r[2])) < 1e-12)
            throw std::invalid_argument("eval_periodic: target coincides with a source image");
        return;
    }
    const Vec3 rw = wrap_axes(r, spec.setup.axes);
    if (rw.norm() < 1e-12)
        throw std::invalid_argument("eval_periodic: target coincides with a source image");
}

struct WaveColumn {
    Vec3 k;
    double knorm2 = 0.0;
};

// half reciprocal lattice: first nonzero component of m positive
std::vector<Vec3i> half_wave_indices(int m, bool two_d) {
    std::vector<Vec3i> out;
    const int mz = two_d ? 0 : m;
    for (int i = -m; i <= m; i++)
        for (int j = -m; j <= m; j++)
            for (int k = -mz; k <= mz; k++) {
                if (i == 0 && j == 0 && k == 0) continue;
                if (i < 0) continue;
                if (i == 0 && j < 0) continue;
                if (i == 0 && j == 0 && k < 0) continue;
                out.emplace_back(i, j, k);
            }
    return out;
}

// out(kt*i+a, ks*j+b) += wave part of the TP Ewald sum, via the separable
// cos/sin factorization over a half reciprocal lattice.
void add_wave_tp(const PeriodicKernelSpec &spec, std::span<const Vec3> targets, std::span<const Vec3> sources,
                 DenseMatrix &out) {
    const bool stokes = spec.kernel.type == KernelType::stokeslet;
    const double xi = spec.params.xi;
    const double inv4xi2 = 1.0 / (4.0 * xi * xi);
    const auto kidx = half_wave_indices(eff_wave_cutoff(spec.params), false);
    const int nt = static_cast<int>(targets.size()), ns = static_cast<int>(sources.size());
    const int rows_t = (stokes ? 3 : 1) * nt, rows_s = (stokes ? 3 : 1) * ns;
    const int cols_per_k = stokes ? 4 : 2;

    const int chunk = std::max<int>(1, (1 << 24) / std::max(rows_t + rows_s, 1)); // ~128MB per factor pair
    std::vector<double> ft, fs;
    for (size_t k0 = 0; k0 < kidx.size(); k0 += chunk) {
        const int nk = static_cast<int>(std::min<size_t>(chunk, kidx.size() - k0));
        const int w = nk * cols_per_k;
        ft.assign(static_cast<size_t>(rows_t) * w, 0.0);
        fs.assign(static_cast<size_t>(rows_s) * w, 0.0);
        for (int h = 0; h < nk; h++) {
            const Vec3i &m = kidx[k0 + h];
            const Vec3 kv(kTwoPi * m[0], kTwoPi * m[1], kTwoPi * m[2]);
            const double k2 = kv.squaredNorm();
            const double u2 = k2 * inv4xi2;
            if (!stokes) {
                const double s = std::sqrt(8.0 * M_PI * std::exp(-u2) / k2);
                for (int i = 0; i < nt; i++) {
                    const double ph = kv.dot(targets[i]);
                    ft[static_cast<size_t>(i) * w + 2 * h] = s * std::cos(ph);
                    ft[static_cast<size_t>(i) * w + 2 * h + 1] = s * std::sin(ph);
                }
                for (int j = 0; j < ns; j++) {
                    const double ph = kv.dot(sources[j]);
                    fs[static_cast<size_t>(j) * w + 2 * h] = s * std::cos(ph);
                    fs[static_cast<size_t>(j) * w + 2 * h + 1] = s * std::sin(ph);
                }
            } else {
                const double s = std::sqrt(2.0 * (1.0 + u2) * std::exp(-u2) / k2);
                const Vec3 khat = kv / std::sqrt(k2);
                int amin = 0;
                if (std::abs(khat[1]) < std::abs(khat[amin])) amin = 1;
                if (std::abs(khat[2]) < std::abs(khat[amin])) amin = 2;
                Vec3 e1 = khat.cross(Vec3::Unit(amin)).normalized();
                Vec3 e2 = khat.cross(e1);
                for (int i = 0; i < nt; i++) {
                    const double ph = kv.dot(targets[i]);
                    const double c = s * std::cos(ph), sn = s * std::sin(ph);
                    for (int a = 0; a < 3; a++) {
                        double *row = &ft[static_cast<size_t>(3 * i + a) * w + 4 * h];
                        row[0] = c * e1[a];
                        row[1] = sn * e1[a];
                        row[2] = c * e2[a];
                        row[3] = sn * e2[a];
                    }
                }
                for (int j = 0; j < ns; j++) {
                    const double ph = kv.dot(sources[j]);
                    const double c = s * std::cos(ph), sn = s * std::sin(ph);
                    for (int a = 0; a < 3; a++) {
                        double *row = &fs[static_cast<size_t>(3 * j + a) * w + 4 * h];
                        row[0] = c * e1[a];
                        row[1] = sn * e1[a];
                        row[2] = c * e2[a];
                        row[3] = sn * e2[a];
                    }
                }
            }
        }
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, rows_t, rows_s, w, 1.0, ft.data(), w, fs.data(), w, 1.0,
                    out.data.data(), out.cols);
    }
}

// z-grouped assembly of the DP Laplace wave part plus the k=0 slab term
void add_wave_dp(const PeriodicKernelSpec &spec, std::span<const Vec3> targets, std::span<const Vec3> sources,
                 DenseMatrix &out) {
    const double xi = spec.params.xi;
    const auto kidx = half_wave_indices(eff_wave_cutoff(spec.params), true);
    const int nh = static_cast<int>(kidx.size());
    const int nt = static_cast<int>(targets.size()), ns = static_cast<int>(sources.size());

    auto group_by_z = [](std::span<const Vec3> pts, std::vector<double> &zvals, std::vector<std::vector<int>> &groups) {
        std::map<double, int> ids;
        for (int i = 0; i < static_cast<int>(pts.size()); i++) {
            auto [it, inserted] = ids.emplace(pts[i][2], static_cast<int>(zvals.size()));
            if (inserted) {
                zvals.push_back(pts[i][2]);
                groups.emplace_back();
            }
            groups[it->second].push_back(i);
        }
    };
    std::vector<double> zt, zs;
    std::vector<std::vector<int>> gt, gs;
    group_by_z(targets, zt, gt);
    group_by_z(sources, zs, gs);

    // trig factors over the half lattice
    std::vector<double> ct(static_cast<size_t>(nt) * nh), st(static_cast<size_t>(nt) * nh);
    std::vector<double> cs(static_cast<size_t>(ns) * nh), ss(static_cast<size_t>(ns) * nh);
    std::vector<double> knorm(nh);
    for (int h = 0; h < nh; h++) {
        const double kx = kTwoPi * kidx[h][0], ky = kTwoPi * kidx[h][1];
        knorm[h] = std::sqrt(kx * kx + ky * ky);
        for (int i = 0; i < nt; i++) {
            const double ph = kx * targets[i][0] + ky * targets[i][1];
            ct[static_cast<size_t>(i) * nh + h] = std::cos(ph);
            st[static_cast<size_t>(i) * nh + h] = std::sin(ph);
        }
        for (int j = 0; j < ns; j++) {
            const double ph = kx * sources[j][0] + ky * sources[j][1];
            cs[static_cast<size_t>(j) * nh + h] = std::cos(ph);
            ss[static_cast<size_t>(j) * nh + h] = std::sin(ph);
        }
    }

    std::vector<double> lam(nh), ta, tb, prod;
    for (size_t a = 0; a < gt.size(); a++) {
        for (size_t b = 0; b < gs.size(); b++) {
            const double z = zt[a] - zs[b];
            for (int h = 0; h < nh; h++) lam[h] = 2.0 * M_PI * theta_sum(knorm[h], xi, z) / knorm[h];
            const double k0 = laplace_dp_k0(z, xi);
            const auto &ia = gt[a];
            const auto &jb = gs[b];
            const int na = static_cast<int>(ia.size()), nb = static_cast<int>(jb.size());
            // gather scaled target rows: [sqrt(lam)*cos, sqrt(lam)*sin]
            ta.assign(static_cast<size_t>(na) * 2 * nh, 0.0);
            tb.assign(static_cast<size_t>(nb) * 2 * nh, 0.0);
            for (int r = 0; r < na; r++) {
                const double *crow = &ct[static_cast<size_t>(ia[r]) * nh];
                const double *srow = &st[static_cast<size_t>(ia[r]) * nh];
                double *dst = &ta[static_cast<size_t>(r) * 2 * nh];
                for (int h = 0; h < nh; h++) {
                    dst[2 * h] = lam[h] * crow[h];
                    dst[2 * h + 1] = lam[h] * srow[h];
                }
            }
            for (int r = 0; r < nb; r++) {
                const double *crow = &cs[static_cast<size_t>(jb[r]) * nh];
                const double *srow = &ss[static_cast<size_t>(jb[r]) * nh];
                double *dst = &tb[static_cast<size_t>(r) * 2 * nh];
                for (int h = 0; h < nh; h++) {
                    dst[2 * h] = crow[h];
                    dst[2 * h + 1] = srow[h];
                }
            }
            prod.assign(static_cast<size_t>(na) * nb, 0.0);
            if (nh > 0)
                cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, na, nb, 2 * nh, 1.0, ta.data(), 2 * nh,
                            tb.data(), 2 * nh, 0.0, prod.data(), nb);
            for (int r = 0; r < na; r++)
                for (int c = 0; c < nb; c++)
                    out(ia[r], jb[c]) += prod[static_cast<size_t>(r) * nb + c] + k0;
        }
    }
}

// real-space (plus constants and self corrections) part of the Ewald block
void add_real_block(const PeriodicKernelSpec &spec, std::span<const Vec3> targets, std::span<const Vec3> sources,
                    DenseMatrix &out) {
    const int nt = static_cast<int>(targets.size()), ns = static_cast<int>(sources.size());
    const bool stokes = spec.kernel.type == KernelType::stokeslet;
    const double xi = spec.params.xi;
    bool coincidence = false;
#pragma omp parallel for schedule(dynamic, 8) reduction(|| : coincidence)
    for (int i = 0; i < nt; i++) {
        for (int j = 0; j < ns; j++) {
            const bool self = targets[i] == sources[j];
            const Vec3 r = targets[i] - sources[j];
            const Vec3 rw = wrap_axes(r, spec.setup.axes);
            if (!self && rw.norm() < 1e-12) {
                coincidence = true;
                continue;
            }
            if (!stokes) {
                double v = 0.0;
                if (spec.method == PeriodicMethod::ewald_laplace_tp)
                    v = laplace_tp_real(rw, spec.params, self) - M_PI / (xi * xi);
                else
                    v = laplace_dp_real(rw, spec.params, self);
                if (self) v -= 2.0 * xi / kSqrtPi;
                out(i, j) += v;
            } else {
                Mat3 acc = Mat3::Zero();
                stokes_tp_real(rw, spec.params, self, acc);
                acc *= kOneOver8Pi;
                for (int a = 0; a < 3; a++)
                    for (int b = 0; b < 3; b++) out(3 * i + a, 3 * j + b) += acc(a, b);
            }
        }
    }
    if (coincidence) throw std::invalid_argument("periodic_block: target coincides with a source image");
}

} // namespace

double erfcx(double x) {
    if (x < 0.0) {
        if (x < -26.0) throw std::invalid_argument("erfcx: argument too negative");
        return 2.0 * std::exp(x * x) - erfcx(-x);
    }
    if (x <= 12.0) return std::exp(x * x) * std::erfc(x);
    // asymptotic series: 1/(x sqrt(pi)) * sum (-1)^k (2k-1)!!/(2x^2)^k
    const double inv2x2 = 1.0 / (2.0 * x * x);
    double term = 1.0, acc = 1.0;
    for (int k = 1; k <= 12; k++) {
        term *= -(2.0 * k - 1.0) * inv2x2;
        acc += term;
        if (std::abs(term) < 1e-18) break;
    }
    return acc / (x * kSqrtPi);
}

const char *method_name(PeriodicMethod m) {
    switch (m) {
    case PeriodicMethod::direct_sp: return "direct_sp";
    case PeriodicMethod::ewald_laplace_dp: return "ewald_laplace_dp";
    case PeriodicMethod::ewald_laplace_tp: return "ewald_laplace_tp";
    case PeriodicMethod::ewald_stokes_tp_hasimoto: return "ewald_stokes_tp_hasimoto";
    }
    return "direct_sp";
}

PeriodicMethod method_from_name(std::string_view name) {
    if (name == "direct_sp") return PeriodicMethod::direct_sp;
    if (name == "ewald_laplace_dp") return PeriodicMethod::ewald_laplace_dp;
    if (name == "ewald_laplace_tp") return PeriodicMethod::ewald_laplace_tp;
    if (name == "ewald_stokes_tp_hasimoto") return PeriodicMethod::ewald_stokes_tp_hasimoto;
    throw std::invalid_argument("unknown periodic method: " + std::string(name));
}

void validate_method(const PeriodicKernelSpec &spec) {
    if (spec.setup.box_length != 1.0)
        throw ConfigError("periodic reference kernels are defined for the unit box only");
    const Periodicity p = spec.setup.periodicity;
    const KernelType k = spec.kernel.type;
    bool ok = false;
    switch (spec.method) {
    case PeriodicMethod::direct_sp: ok = (p == Periodicity::sp); break;
    case PeriodicMethod::ewald_laplace_dp: ok = (p == Periodicity::dp && k == KernelType::laplace); break;
    case PeriodicMethod::ewald_laplace_tp: ok = (p == Periodicity::tp && k == KernelType::laplace); break;
    case PeriodicMethod::ewald_stokes_tp_hasimoto: ok = (p == Periodicity::tp && k == KernelType::stokeslet); break;
    }
    if (!ok)
        throw ConfigError(std::string("periodic method ") + method_name(spec.method) + " does not apply to kernel " +
                          spec.kernel.name() + " with periodicity " + periodicity_name(p));
}

PeriodicKernelSpec make_periodic_spec(const KernelSpec &kernel, const PeriodicSetup &setup, EwaldParams params) {
    PeriodicKernelSpec spec{kernel, setup, params, PeriodicMethod::direct_sp};
    switch (setup.periodicity) {
    case Periodicity::none:
        throw ConfigError("periodicity 'none' has no periodic reference kernel");
    case Periodicity::sp:
        spec.method = PeriodicMethod::direct_sp;
        break;
    case Periodicity::dp:
        if (kernel.type == KernelType::stokeslet)
            throw ConfigError("doubly periodic Stokes Ewald is not available; use the triply periodic path");
        spec.method = PeriodicMethod::ewald_laplace_dp;
        break;
    case Periodicity::tp:
        spec.method = kernel.type == KernelType::laplace ? PeriodicMethod::ewald_laplace_tp
                                                         : PeriodicMethod::ewald_stokes_tp_hasimoto;
        break;
    }
    validate_method(spec);
    return spec;
}

void eval_periodic(const PeriodicKernelSpec &spec, const Vec3 &x, const Vec3 &y, double *block) {
    validate_method(spec);
    const Vec3 r = x - y;
    if (x == y) throw std::invalid_argument("eval_periodic: zero separation; use the self-image evaluation");
    check_image_coincidence(spec, r);
    periodic_point_dispatch(spec, r, false, block);
}

void eval_periodic_self_images(const PeriodicKernelSpec &spec, double *block) {
    validate_method(spec);
    periodic_point_dispatch(spec, Vec3::Zero(), true, block);
}

void eval_kpf(const PeriodicKernelSpec &spec, const Vec3 &x, const Vec3 &y, double *block) {
    validate_method(spec);
    const Vec3 r = x - y;
    if (spec.method == PeriodicMethod::direct_sp) {
        sp_tail(spec, r, block);
        return;
    }
    const bool self = (x == y);
    if (!self) check_image_coincidence(spec, r);
    periodic_point_dispatch(spec, r, self, block);
    // subtract near images with max-norm <= ell (self pair already excluded)
    const int kt = spec.kernel.kt, ks = spec.kernel.ks;
    double near[9];
    for (const Vec3i &d : image_offsets(spec.setup, self ? 1 : 0, spec.setup.ell)) {
        const Vec3 img(y[0] + d[0], y[1] + d[1], y[2] + d[2]);
        kernel_eval(spec.kernel, x, img, near);
        for (int a = 0; a < kt * ks; a++) block[a] -= near[a];
    }
}

DenseMatrix periodic_block(const PeriodicKernelSpec &spec, std::span<const Vec3> targets,
                           std::span<const Vec3> sources) {
    validate_method(spec);
    const int kt = spec.kernel.kt, ks = spec.kernel.ks;
    const int nt = static_cast<int>(targets.size()), ns = static_cast<int>(sources.size());
    DenseMatrix out(kt * nt, ks * ns);
    if (spec.method == PeriodicMethod::direct_sp) {
        if (spec.kernel.type == KernelType::laplace && spec.params.n_images >= kSpP0)
            sp_power_sums(spec.params.n_images); // prime the cache outside the parallel loop
#pragma omp parallel for schedule(dynamic, 8)
        for (int i = 0; i < nt; i++) {
            double block[9];
            for (int j = 0; j < ns; j++) {
                periodic_point_dispatch(spec, targets[i] - sources[j], targets[i] == sources[j], block);
                for (int a = 0; a < kt; a++)
                    for (int b = 0; b < ks; b++) out(kt * i + a, ks * j + b) = block[a * ks + b];
            }
        }
        return out;
    }
    add_real_block(spec, targets, sources, out);
    if (spec.method == PeriodicMethod::ewald_laplace_dp)
        add_wave_dp(spec, targets, sources, out);
    else
        add_wave_tp(spec, targets, sources, out);
    return out;
}

DenseMatrix kpf_block(const PeriodicKernelSpec &spec, std::span<const Vec3> targets, std::span<const Vec3> sources) {
    validate_method(spec);
    const int kt = spec.kernel.kt, ks = spec.kernel.ks;
    const int nt = static_cast<int>(targets.size()), ns = static_cast<int>(sources.size());
    if (spec.method == PeriodicMethod::direct_sp) {
        DenseMatrix out(kt * nt, ks * ns);
        if (spec.kernel.type == KernelType::laplace && spec.params.n_images >= kSpP0)
            sp_power_sums(spec.params.n_images);
#pragma omp parallel for schedule(dynamic, 8)
        for (int i = 0; i < nt; i++) {
            double block[9];
            for (int j = 0; j < ns; j++) {
                sp_tail(spec, targets[i] - sources[j], block);
                for (int a = 0; a < kt; a++)
                    for (int b = 0; b < ks; b++) out(kt * i + a, ks * j + b) = block[a * ks + b];
            }
        }
        return out;
    }
    DenseMatrix out = periodic_block(spec, targets, sources);
    const auto near = image_offsets(spec.setup, 0, spec.setup.ell);
#pragma omp parallel for schedule(dynamic, 8)
    for (int i = 0; i < nt; i++) {
        double block[9];
        for (int j = 0; j < ns; j++) {
            const bool self = targets[i] == sources[j];
            for (const Vec3i &d : near) {
                if (self && d[0] == 0 && d[1] == 0 && d[2] == 0) continue;
                const Vec3 img(sources[j][0] + d[0], sources[j][1] + d[1], sources[j][2] + d[2]);
                kernel_eval_nocheck(spec.kernel, targets[i], img, block);
                for (int a = 0; a < kt; a++)
                    for (int b = 0; b < ks; b++) out(kt * i + a, ks * j + b) -= block[a * ks + b];
            }
        }
    }
    return out;
}

CompatReport check_compatibility(const KernelSpec &kernel, const PeriodicSetup &setup,
                                 std::span<const double> strengths) {
    CompatReport rep;
    if (setup.periodicity == Periodicity::none) return rep;
    if (kernel.type == KernelType::stokeslet && setup.periodicity == Periodicity::tp) return rep;

    const int ks = kernel.ks;
    const size_t n = strengths.size() / ks;
    double abs_total = 0.0;
    for (double v : strengths) abs_total += std::fabs(v);
    double worst = 0.0;
    for (int a = 0; a < ks; a++) {
        double s = 0.0;
        for (size_t i = 0; i < n; i++) s += strengths[i * ks + a];
        worst = std::max(worst, std::fabs(s));
    }
    if (worst > 1e-12 * abs_total) {
        rep.ok = false;
        rep.residual = worst;
        rep.violated = kernel.type == KernelType::laplace ? "neutrality: net charge must vanish"
                                                          : "neutrality: net force must vanish";
    }
    return rep;
}

std::vector<double> oracle_system_eval(const PeriodicKernelSpec &spec, std::span<const Vec3> sources,
                                       std::span<const double> strengths, std::span<const Vec3> targets) {
    validate_method(spec);
    const auto compat = check_compatibility(spec.kernel, spec.setup, strengths);
    if (!compat.ok)
        throw ConfigError("oracle_system_eval: compatibility violation (" + compat.violated +
                          ", residual=" + std::to_string(compat.residual) + ")");
    const int kt = spec.kernel.kt, ks = spec.kernel.ks;
    const DenseMatrix blocks = periodic_block(spec, targets, sources);
    std::vector<double> out(static_cast<size_t>(kt) * targets.size(), 0.0);
    matvec(blocks, strengths.data(), out.data());
    return out;
}

} // namespace pkifmm
