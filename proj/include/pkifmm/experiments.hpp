#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pkifmm/fmm.hpp"

namespace pkifmm::experiments {

struct ExperimentOptions {
    std::string out_dir = ".";
    std::string operator_dir; // empty: $PKIFMM_OPERATOR_DIR, else out_dir/operators
    uint64_t seed = 12345;
    std::vector<int> p_list;  // experiment-specific default when empty
    long long n_images = 1000000;
    bool full_scale = false;  // 97^3 target grid instead of 11^3
    bool write_files = true;
    int threads = 0;          // 0: leave as-is
};

struct CheckResult {
    std::string name;
    bool pass = false;
    double value = 0.0;
    std::string detail;
};

struct ExperimentReport {
    std::string name;
    std::vector<CheckResult> checks;
    std::vector<std::pair<std::string, std::vector<std::string>>> csv_files; // (filename, lines incl. header)
    bool pass() const {
        for (const auto &c : checks)
            if (!c.pass) return false;
        return true;
    }
};

const std::vector<std::string> &experiment_names();

/// Runs one named experiment; writes CSV and a JSON summary under
/// options.out_dir when write_files is set.
ExperimentReport run_experiment(const std::string &name, const ExperimentOptions &options);

/// Loads the operator from the cache directory or builds and stores it.
/// The downward factorization is shared with the FMM operator registry.
std::shared_ptr<const PeriodizingOperator> get_or_build_operator(const PeriodicKernelSpec &spec, int p,
                                                                 const std::string &dir);

/// Same for a set of splitting depths sharing one reference-kernel assembly.
std::vector<std::shared_ptr<const PeriodizingOperator>>
get_or_build_operators_ells(const PeriodicKernelSpec &spec, int p, const std::vector<int> &ells,
                            const std::string &dir);

std::string resolve_operator_dir(const ExperimentOptions &options);

/// Tensor grid of Clenshaw-Curtis nodes per axis, scaled by (1 - 1e-9) to
/// stay inside the half-open box.
std::vector<Vec3> chebyshev_targets(int per_axis);

/// The alternating four-charge chain on the box axis.
void madelung_configuration(std::vector<Vec3> &sources, std::vector<double> &charges, std::vector<Vec3> &targets);

/// The opposite-force pair used by the accuracy tests.
void dipole_configuration(std::vector<Vec3> &sources, std::vector<double> &forces);

} // namespace pkifmm::experiments
