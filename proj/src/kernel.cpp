#include "pkifmm/kernel.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace pkifmm {

namespace {
constexpr double kOneOver8Pi = 1.0 / (8.0 * M_PI);

[[noreturn]] void throw_coincident(const Vec3 &x, const Vec3 &y, int ti = -1, int si = -1) {
    std::ostringstream os;
    os << "kernel evaluation at zero separation: target (" << x[0] << ", " << x[1] << ", " << x[2] << ") and source ("
       << y[0] << ", " << y[1] << ", " << y[2] << ")";
    if (ti >= 0) os << " [target index " << ti << ", source index " << si << "]";
    throw std::invalid_argument(os.str());
}
} // namespace

KernelSpec KernelSpec::from_name(std::string_view name) {
    if (name == "laplace") return laplace();
    if (name == "stokeslet" || name == "stokes") return stokeslet();
    throw std::invalid_argument("unknown kernel name: " + std::string(name));
}

const char *KernelSpec::name() const { return type == KernelType::laplace ? "laplace" : "stokeslet"; }

void kernel_eval_nocheck(const KernelSpec &kernel, const Vec3 &x, const Vec3 &y, double *block) {
    const double rx = x[0] - y[0], ry = x[1] - y[1], rz = x[2] - y[2];
    const double r2 = rx * rx + ry * ry + rz * rz;
    if (kernel.type == KernelType::laplace) {
        block[0] = 1.0 / std::sqrt(r2);
        return;
    }
    const double rinv = 1.0 / std::sqrt(r2);
    const double rinv3 = rinv / r2;
    block[0] = kOneOver8Pi * (rinv + rx * rx * rinv3);
    block[1] = kOneOver8Pi * (rx * ry * rinv3);
    block[2] = kOneOver8Pi * (rx * rz * rinv3);
    block[3] = block[1];
    block[4] = kOneOver8Pi * (rinv + ry * ry * rinv3);
    block[5] = kOneOver8Pi * (ry * rz * rinv3);
    block[6] = block[2];
    block[7] = block[5];
    block[8] = kOneOver8Pi * (rinv + rz * rz * rinv3);
}

void kernel_eval(const KernelSpec &kernel, const Vec3 &x, const Vec3 &y, double *block) {
    if (x == y) throw_coincident(x, y);
    kernel_eval_nocheck(kernel, x, y, block);
}

DenseMatrix kernel_block(const KernelSpec &kernel, std::span<const Vec3> targets, std::span<const Vec3> sources) {
    const int kt = kernel.kt, ks = kernel.ks;
    const int nt = static_cast<int>(targets.size()), ns = static_cast<int>(sources.size());
    DenseMatrix m(kt * nt, ks * ns);
    long bad_pair = -1;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < nt; i++) {
        double block[9];
        for (int j = 0; j < ns; j++) {
            if (targets[i] == sources[j]) {
#pragma omp critical
                bad_pair = static_cast<long>(i) * ns + j;
                continue;
            }
            kernel_eval_nocheck(kernel, targets[i], sources[j], block);
            for (int a = 0; a < kt; a++)
                for (int b = 0; b < ks; b++) m(kt * i + a, ks * j + b) = block[a * ks + b];
        }
    }
    if (bad_pair >= 0) {
        const int i = static_cast<int>(bad_pair / ns), j = static_cast<int>(bad_pair % ns);
        throw_coincident(targets[i], sources[j], i, j);
    }
    return m;
}

void kernel_block_apply(const KernelSpec &kernel, std::span<const Vec3> targets, std::span<const Vec3> sources,
                        const Vec3 &shift, std::span<const double> density, std::span<double> out,
                        bool skip_coincident) {
    const int kt = kernel.kt, ks = kernel.ks;
    const int nt = static_cast<int>(targets.size()), ns = static_cast<int>(sources.size());
    // coincident pairs contribute zero through the branchless select below;
    // they are an input error unless the caller asked to skip them
    int coincident = 0;
    if (kernel.type == KernelType::laplace) {
        for (int i = 0; i < nt; i++) {
            const double tx = targets[i][0] - shift[0], ty = targets[i][1] - shift[1], tz = targets[i][2] - shift[2];
            double acc = 0.0;
            for (int j = 0; j < ns; j++) {
                const double rx = tx - sources[j][0];
                const double ry = ty - sources[j][1];
                const double rz = tz - sources[j][2];
                const double r2 = rx * rx + ry * ry + rz * rz;
                const double rinv = (r2 > 0.0) ? 1.0 / std::sqrt(r2) : 0.0;
                coincident += (r2 == 0.0);
                acc += density[j] * rinv;
            }
            out[i] += acc;
        }
    } else {
        for (int i = 0; i < nt; i++) {
            const double tx = targets[i][0] - shift[0], ty = targets[i][1] - shift[1], tz = targets[i][2] - shift[2];
            double a0 = 0.0, a1 = 0.0, a2 = 0.0;
            for (int j = 0; j < ns; j++) {
                const double rx = tx - sources[j][0];
                const double ry = ty - sources[j][1];
                const double rz = tz - sources[j][2];
                const double r2 = rx * rx + ry * ry + rz * rz;
                const double rinv = (r2 > 0.0) ? 1.0 / std::sqrt(r2) : 0.0;
                coincident += (r2 == 0.0);
                const double f0 = density[3 * j], f1 = density[3 * j + 1], f2 = density[3 * j + 2];
                const double rdotf = (rx * f0 + ry * f1 + rz * f2) * rinv * rinv;
                a0 += (f0 + rx * rdotf) * rinv;
                a1 += (f1 + ry * rdotf) * rinv;
                a2 += (f2 + rz * rdotf) * rinv;
            }
            out[kt * i + 0] += kOneOver8Pi * a0;
            out[kt * i + 1] += kOneOver8Pi * a1;
            out[kt * i + 2] += kOneOver8Pi * a2;
        }
    }
    if (coincident > 0 && !skip_coincident)
        throw std::invalid_argument("kernel_block_apply: " + std::to_string(coincident) +
                                    " coincident target/source pairs");
    (void)ks;
}

} // namespace pkifmm
