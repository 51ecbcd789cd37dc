#include "pkifmm/periodize.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "pkifmm/geometry.hpp"

namespace pkifmm {

namespace {

using json = nlohmann::json;

constexpr char kMagic[6] = {'P', 'K', 'M', '2', 'L', '\x01'};
constexpr double kResidualGate = 1e-11;

std::string iso_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::string axes_string(const PeriodicSetup &s) {
    std::string a;
    if (s.axes[0]) a += 'x';
    if (s.axes[1]) a += 'y';
    if (s.axes[2]) a += 'z';
    return a;
}

} // namespace

uint64_t crc64(const void *data, size_t len) {
    // CRC-64/XZ (ECMA-182 polynomial, reflected)
    static const auto table = [] {
        std::array<uint64_t, 256> t{};
        for (uint64_t i = 0; i < 256; i++) {
            uint64_t c = i;
            for (int k = 0; k < 8; k++) c = (c & 1) ? (c >> 1) ^ 0xC96C5795D7870F42ull : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint64_t crc = ~0ull;
    const auto *p = static_cast<const unsigned char *>(data);
    for (size_t i = 0; i < len; i++) crc = table[(crc ^ p[i]) & 0xff] ^ (crc >> 8);
    return ~crc;
}

DenseMatrix assemble_kpf_matrix(const PeriodicKernelSpec &spec, int p) {
    validate_method(spec);
    const Vec3 center(0.5, 0.5, 0.5);
    const auto dn_check = surface_points(p, center, kInnerSurfaceScale);
    const auto up_equiv = dn_check; // the two surfaces coincide point-for-point
    return kpf_block(spec, dn_check, up_equiv);
}

namespace {

PeriodizingOperator finish_operator(const PeriodicKernelSpec &spec, int p, const DenseMatrix &q,
                                    const SvdFactors &a_factors) {
    const Vec3 center(0.5, 0.5, 0.5);
    DenseMatrix t = pinv_apply_block(a_factors, q);

    // backward residual per column: max|A col - q col| / max|q col|
    const auto dn_check = surface_points(p, center, kInnerSurfaceScale);
    const auto dn_equiv = surface_points(p, center, kOuterSurfaceScale);
    const DenseMatrix a = kernel_block(spec.kernel, dn_check, dn_equiv);
    const DenseMatrix r = matmul(a, t);
    double residual_max = 0.0;
    int worst_col = -1;
    for (int j = 0; j < q.cols; j++) {
        double num = 0.0, den = 0.0;
        for (int i = 0; i < q.rows; i++) {
            num = std::max(num, std::fabs(r(i, j) - q(i, j)));
            den = std::max(den, std::fabs(q(i, j)));
        }
        const double rel = (den > 0.0) ? num / den : num;
        if (rel > residual_max) {
            residual_max = rel;
            worst_col = j;
        }
    }
    if (residual_max > kResidualGate)
        throw std::runtime_error("solve_m2l: backward residual " + std::to_string(residual_max) +
                                 " exceeds gate at column " + std::to_string(worst_col));

    PeriodizingOperator op;
    op.matrix = std::move(t);
    op.kernel = spec.kernel;
    op.setup = spec.setup;
    op.p = p;
    op.method = spec.method;
    op.params = spec.params;
    op.residual_max = residual_max;
    op.created = iso_now();
    return op;
}

} // namespace

PeriodizingOperator solve_m2l(const PeriodicKernelSpec &spec, int p, const SvdFactors &a_factors) {
    return finish_operator(spec, p, assemble_kpf_matrix(spec, p), a_factors);
}

std::vector<PeriodizingOperator> solve_m2l_ells(const PeriodicKernelSpec &spec, int p, std::span<const int> ells,
                                                const SvdFactors &a_factors) {
    std::vector<PeriodizingOperator> ops;
    if (spec.method == PeriodicMethod::direct_sp) {
        for (int ell : ells) {
            PeriodicKernelSpec s = spec;
            s.setup.ell = ell;
            ops.push_back(finish_operator(s, p, assemble_kpf_matrix(s, p), a_factors));
        }
        return ops;
    }
    validate_method(spec);
    const Vec3 center(0.5, 0.5, 0.5);
    const auto pts = surface_points(p, center, kInnerSurfaceScale);
    const DenseMatrix kp = periodic_block(spec, pts, pts);
    const int kt = spec.kernel.kt, ks = spec.kernel.ks;
    const int n = static_cast<int>(pts.size());
    for (int ell : ells) {
        PeriodicKernelSpec s = spec;
        s.setup.ell = ell;
        DenseMatrix q = kp;
        const auto near = image_offsets(s.setup, 0, ell);
        for (int i = 0; i < n; i++) {
            double block[9];
            for (int j = 0; j < n; j++) {
                const bool self = pts[i] == pts[j];
                for (const Vec3i &d : near) {
                    if (self && d[0] == 0 && d[1] == 0 && d[2] == 0) continue;
                    kernel_eval_nocheck(s.kernel, pts[i], pts[j] + Vec3(d[0], d[1], d[2]), block);
                    for (int a = 0; a < kt; a++)
                        for (int b = 0; b < ks; b++) q(kt * i + a, ks * j + b) -= block[a * ks + b];
                }
            }
        }
        ops.push_back(finish_operator(s, p, q, a_factors));
    }
    return ops;
}

PeriodizingOperator solve_m2l(const PeriodicKernelSpec &spec, int p) {
    const Vec3 center(0.5, 0.5, 0.5);
    const auto dn_check = surface_points(p, center, kInnerSurfaceScale);
    const auto dn_equiv = surface_points(p, center, kOuterSurfaceScale);
    const SvdFactors f = svd(kernel_block(spec.kernel, dn_check, dn_equiv));
    return solve_m2l(spec, p, f);
}

EquivalentDensity apply_m2l(const PeriodizingOperator &op, const EquivalentDensity &upward) {
    if (upward.role != EquivalentDensity::Role::upward)
        throw std::invalid_argument("apply_m2l: expected an upward equivalent density");
    if (static_cast<int>(upward.values.size()) != op.matrix.cols)
        throw std::invalid_argument("apply_m2l: density length " + std::to_string(upward.values.size()) +
                                    " does not match operator dimension " + std::to_string(op.matrix.cols));
    EquivalentDensity down;
    down.role = EquivalentDensity::Role::downward;
    down.values.assign(op.matrix.rows, 0.0);
    matvec(op.matrix, upward.values.data(), down.values.data());
    return down;
}

void far_field_eval(const KernelSpec &kernel, int p, const EquivalentDensity &downward,
                    std::span<const Vec3> targets, std::span<double> out) {
    if (downward.role != EquivalentDensity::Role::downward)
        throw std::invalid_argument("far_field_eval: expected a downward equivalent density");
    const Vec3 center(0.5, 0.5, 0.5);
    const auto dn_equiv = surface_points(p, center, kOuterSurfaceScale);
    if (downward.values.size() != dn_equiv.size() * static_cast<size_t>(kernel.ks))
        throw std::invalid_argument("far_field_eval: density length does not match p");
    const int nt = static_cast<int>(targets.size());
#pragma omp parallel for schedule(static)
    for (int i = 0; i < nt; i++) {
        kernel_block_apply(kernel, targets.subspan(i, 1), dn_equiv, Vec3::Zero(), downward.values,
                           out.subspan(static_cast<size_t>(i) * kernel.kt, kernel.kt));
    }
}

void save_operator(const PeriodizingOperator &op, const std::string &path) {
    const auto &m = op.matrix;
    const uint64_t payload_crc = crc64(m.data.data(), m.data.size() * sizeof(double));
    json header = {
        {"format", "pkm2l"},
        {"version", 1},
        {"kernel", op.kernel.name()},
        {"ks", op.kernel.ks},
        {"kt", op.kernel.kt},
        {"periodicity", periodicity_name(op.setup.periodicity)},
        {"periodic_axes", axes_string(op.setup)},
        {"ell", op.setup.ell},
        {"p", op.p},
        {"n", surface_point_count(op.p)},
        {"inner_scale", op.inner_scale},
        {"outer_scale", op.outer_scale},
        {"method", method_name(op.method)},
        {"params",
         {{"xi", op.params.xi},
          {"real_shells", op.params.real_shells},
          {"wave_cutoff", op.params.wave_cutoff},
          {"n_images", op.params.n_images}}},
        {"residual_max", op.residual_max},
        {"rows", m.rows},
        {"cols", m.cols},
        {"payload_crc64", payload_crc},
        {"created", op.created},
    };
    const std::string hs = header.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_operator: cannot open " + path);
    f.write(kMagic, sizeof kMagic);
    const uint64_t hlen = hs.size();
    char lenbuf[8];
    for (int i = 0; i < 8; i++) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
    f.write(lenbuf, 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(reinterpret_cast<const char *>(m.data.data()),
            static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("save_operator: write failed for " + path);
}

PeriodizingOperator load_operator(const std::string &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_operator: cannot open " + path);
    char magic[6];
    f.read(magic, 6);
    if (!f || std::memcmp(magic, kMagic, 6) != 0)
        throw std::runtime_error("load_operator: bad magic in " + path);
    char lenbuf[8];
    f.read(lenbuf, 8);
    uint64_t hlen = 0;
    for (int i = 0; i < 8; i++) hlen |= static_cast<uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    if (!f || hlen > (1ull << 20)) throw std::runtime_error("load_operator: bad header length in " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("load_operator: truncated header in " + path);
    const json header = json::parse(hs);

    PeriodizingOperator op;
    op.kernel = KernelSpec::from_name(header.at("kernel").get<std::string>());
    op.setup.periodicity = periodicity_from_name(header.at("periodicity").get<std::string>());
    const std::string axes = header.at("periodic_axes").get<std::string>();
    op.setup.axes = {axes.find('x') != std::string::npos, axes.find('y') != std::string::npos,
                     axes.find('z') != std::string::npos};
    op.setup.ell = header.at("ell").get<int>();
    op.p = header.at("p").get<int>();
    op.inner_scale = header.at("inner_scale").get<double>();
    op.outer_scale = header.at("outer_scale").get<double>();
    op.method = method_from_name(header.at("method").get<std::string>());
    op.params.xi = header.at("params").at("xi").get<double>();
    op.params.real_shells = header.at("params").at("real_shells").get<int>();
    op.params.wave_cutoff = header.at("params").at("wave_cutoff").get<int>();
    op.params.n_images = header.at("params").at("n_images").get<long long>();
    op.residual_max = header.at("residual_max").get<double>();
    op.created = header.value("created", "");

    const int rows = header.at("rows").get<int>(), cols = header.at("cols").get<int>();
    const int n = surface_point_count(op.p);
    if (rows != op.kernel.ks * n || cols != op.kernel.ks * n || header.at("n").get<int>() != n)
        throw std::runtime_error("load_operator: inconsistent dimensions in " + path);
    op.matrix = DenseMatrix(rows, cols);
    f.read(reinterpret_cast<char *>(op.matrix.data.data()),
           static_cast<std::streamsize>(op.matrix.data.size() * sizeof(double)));
    if (!f) throw std::runtime_error("load_operator: truncated payload in " + path);
    const uint64_t crc = crc64(op.matrix.data.data(), op.matrix.data.size() * sizeof(double));
    if (crc != header.at("payload_crc64").get<uint64_t>())
        throw std::runtime_error("load_operator: payload CRC mismatch in " + path);
    return op;
}

} // namespace pkifmm
