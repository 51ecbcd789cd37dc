#pragma once

#include <span>

namespace pkifmm {

/// Error metrics over a flattened component vector: maximum absolute,
/// average absolute, root mean square, and relative L2.
struct ErrorReport {
    double max_abs = 0.0;
    double avg_abs = 0.0;
    double rms = 0.0;
    double rel_l2 = 0.0;
    bool rel_l2_defined = true; // false when the reference norm is zero
    int n_components = 0;
};

ErrorReport compute_error_report(std::span<const double> result, std::span<const double> reference);

} // namespace pkifmm
