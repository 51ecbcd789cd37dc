#include "pkifmm/error_report.hpp"

#include <cmath>
#include <stdexcept>

namespace pkifmm {

ErrorReport compute_error_report(std::span<const double> result, std::span<const double> reference) {
    if (result.size() != reference.size() || result.empty())
        throw std::invalid_argument("compute_error_report: vectors must have equal nonzero length");
    ErrorReport r;
    r.n_components = static_cast<int>(result.size());
    double sum_abs = 0.0, sum_sq = 0.0, ref_sq = 0.0;
    for (size_t i = 0; i < result.size(); i++) {
        const double d = result[i] - reference[i];
        const double ad = std::fabs(d);
        r.max_abs = std::max(r.max_abs, ad);
        sum_abs += ad;
        sum_sq += d * d;
        ref_sq += reference[i] * reference[i];
    }
    r.avg_abs = sum_abs / r.n_components;
    r.rms = std::sqrt(sum_sq / r.n_components);
    if (ref_sq > 0.0) {
        r.rel_l2 = std::sqrt(sum_sq / ref_sq);
    } else {
        r.rel_l2 = 0.0;
        r.rel_l2_defined = false;
    }
    return r;
}

} // namespace pkifmm
