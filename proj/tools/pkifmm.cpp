#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "pkifmm/experiments.hpp"
#include "pkifmm/fmm.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

using json = nlohmann::json;
using namespace pkifmm;

void set_threads(int threads) {
#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#endif
    (void)threads;
}

bool parse_point_line(const std::string &line, std::vector<double> &fields) {
    fields.clear();
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        try {
            size_t pos = 0;
            fields.push_back(std::stod(tok, &pos));
        } catch (const std::exception &) {
            return false;
        }
    }
    return !fields.empty();
}

void read_points_csv(const std::string &path, int value_cols, std::vector<Vec3> &points,
                     std::vector<double> &values) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string line;
    std::vector<double> fields;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        lineno++;
        if (line.empty() || line[0] == '#') continue;
        if (!parse_point_line(line, fields)) {
            if (points.empty()) continue; // header line
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": unparseable row");
        }
        if (static_cast<int>(fields.size()) != 3 + value_cols)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(3 + value_cols) + " columns, got " +
                                     std::to_string(fields.size()));
        points.emplace_back(fields[0], fields[1], fields[2]);
        for (int a = 0; a < value_cols; a++) values.push_back(fields[3 + a]);
    }
}

int cmd_precompute(const std::string &kernel_name, const std::string &periodicity_name_in, int ell, int p,
                   long long n_images, double xi, int wave_cutoff, int real_shells, const std::string &out,
                   int threads) {
    set_threads(threads);
    const KernelSpec kernel = KernelSpec::from_name(kernel_name);
    PeriodicSetup setup = PeriodicSetup::make(periodicity_from_name(periodicity_name_in), ell);
    EwaldParams params;
    params.n_images = n_images;
    params.xi = xi;
    params.wave_cutoff = wave_cutoff;
    params.real_shells = real_shells;
    const PeriodicKernelSpec spec = make_periodic_spec(kernel, setup, params);

    const auto t0 = std::chrono::steady_clock::now();
    const auto ops = kifmm_operators(kernel, p);
    const SvdFactors &f = downward_factors(*ops);
    const PeriodizingOperator op = solve_m2l(spec, p, f);
    save_operator(op, out);
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::cout << "operator " << out << "\n"
              << "  kernel " << kernel.name() << "  periodicity " << periodicity_name(setup.periodicity) << "  ell "
              << ell << "  p " << p << "  dim " << op.matrix.rows << "\n"
              << "  residual_max " << op.residual_max << "\n"
              << "  kappa(A) " << f.kappa << "  rank " << f.numerical_rank << "/" << op.matrix.rows << "\n"
              << "  wall_seconds " << dt << std::endl;
    return 0;
}

int cmd_eval(const std::string &op_path, const std::string &sources_path, const std::string &targets_path,
             const std::string &out_path, const std::string &mode, int leaf_capacity, bool force, int threads) {
    set_threads(threads);
    const PeriodizingOperator op = load_operator(op_path);

    EvalRequest req;
    req.kernel = op.kernel;
    req.setup = op.setup;
    req.p = op.p;
    req.op = &op;
    req.mode = (mode == "direct") ? EvalMode::direct : EvalMode::fmm;
    req.leaf_capacity = leaf_capacity;
    req.force = force;
    std::vector<double> dummy;
    read_points_csv(sources_path, op.kernel.ks, req.sources, req.strengths);
    read_points_csv(targets_path, 0, req.targets, dummy);

    const EvalResult res = evaluate(req);

    json out = {{"kernel", op.kernel.name()},
                {"periodicity", periodicity_name(op.setup.periodicity)},
                {"p", op.p},
                {"ell", op.setup.ell},
                {"n_targets", req.targets.size()},
                {"potentials", res.potentials},
                {"timings",
                 {{"tree", res.timings.tree},
                  {"near", res.timings.near},
                  {"m2l_apply", res.timings.m2l_apply},
                  {"far", res.timings.far}}},
                {"compatibility",
                 {{"ok", res.compat.ok}, {"violated", res.compat.violated}, {"residual", res.compat.residual}}}};
    std::ofstream f(out_path);
    if (!f) throw std::runtime_error("cannot write " + out_path);
    f << out.dump(2) << '\n';
    std::cout << "wrote " << out_path << " (near " << res.timings.near << "s, far " << res.timings.far << "s)"
              << std::endl;
    return 0;
}

int cmd_experiment(const std::string &name, experiments::ExperimentOptions options) {
    const auto report = experiments::run_experiment(name, options);
    bool all_pass = true;
    for (const auto &c : report.checks) {
        std::cout << (c.pass ? "PASS" : "FAIL") << "  " << report.name << ":" << c.name << "  value=" << c.value
                  << "  (" << c.detail << ")" << std::endl;
        all_pass = all_pass && c.pass;
    }
    if (report.checks.empty()) std::cout << "done  " << report.name << " (no threshold checks)" << std::endl;
    return all_pass ? 0 : 2;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"periodized kernel-independent FMM: operator precomputation, evaluation, experiments"};
    app.require_subcommand(1);

    auto *pre = app.add_subcommand("precompute", "build and store a periodizing operator");
    std::string kernel = "laplace", periodicity = "tp", out = "operator.pkm2l";
    int ell = 2, p = 8, wave_cutoff = 64, real_shells = 2, threads = 0;
    long long n_images = 1000000;
    double xi = 8.0;
    pre->add_option("--kernel", kernel, "laplace | stokeslet")->capture_default_str();
    pre->add_option("--periodicity", periodicity, "sp | dp | tp")->capture_default_str();
    pre->add_option("--ell", ell, "near-field image layers")->capture_default_str();
    pre->add_option("--p", p, "surface points per cube edge")->capture_default_str();
    pre->add_option("--n-images", n_images, "image count for SP direct summation")->capture_default_str();
    pre->add_option("--xi", xi, "Ewald splitting parameter")->capture_default_str();
    pre->add_option("--wave-cutoff", wave_cutoff, "reciprocal shell cutoff")->capture_default_str();
    pre->add_option("--real-shells", real_shells, "real-space shell cutoff")->capture_default_str();
    pre->add_option("--out", out, "output operator file")->capture_default_str();
    pre->add_option("--threads", threads, "worker threads (0: default)");

    auto *ev = app.add_subcommand("eval", "evaluate a periodic N-body sum with a stored operator");
    std::string op_path, sources_path, targets_path, out_path = "results.json", mode = "fmm";
    int leaf_capacity = 1000;
    bool force = false;
    ev->add_option("--operator", op_path, "operator file")->required();
    ev->add_option("--sources", sources_path, "CSV x,y,z,s1[,s2,s3]")->required();
    ev->add_option("--targets", targets_path, "CSV x,y,z")->required();
    ev->add_option("--out", out_path, "output JSON")->capture_default_str();
    ev->add_option("--mode", mode, "fmm | direct")->capture_default_str();
    ev->add_option("--leaf-capacity", leaf_capacity, "octree leaf capacity")->capture_default_str();
    ev->add_flag("--force", force, "skip the compatibility gate");
    ev->add_option("--threads", threads, "worker threads (0: default)");

    auto *ex = app.add_subcommand("experiment", "run a named experiment and report pass/fail");
    std::string exp_name;
    experiments::ExperimentOptions opts;
    std::string p_list_str;
    ex->add_option("name", exp_name,
                   "one of: madelung1d stokes-tp-force stokes-tp-dipole laplace-dp-pair ell-sweep svd-bench "
                   "conditioning scaling")
        ->required();
    ex->add_option("--out-dir", opts.out_dir, "report output directory")->capture_default_str();
    ex->add_option("--operator-dir", opts.operator_dir, "operator cache (default: $PKIFMM_OPERATOR_DIR)");
    ex->add_option("--seed", opts.seed, "RNG seed")->capture_default_str();
    ex->add_option("--p-list", p_list_str, "comma-separated p values");
    ex->add_option("--n-images", opts.n_images, "SP direct image count")->capture_default_str();
    ex->add_flag("--full-scale", opts.full_scale, "97^3 target grid instead of 11^3");
    ex->add_option("--threads", opts.threads, "worker threads (0: default)");

    try {
        app.parse(argc, argv);
        if (pre->parsed())
            return cmd_precompute(kernel, periodicity, ell, p, n_images, xi, wave_cutoff, real_shells, out, threads);
        if (ev->parsed())
            return cmd_eval(op_path, sources_path, targets_path, out_path, mode, leaf_capacity, force, threads);
        if (ex->parsed()) {
            if (!p_list_str.empty()) {
                std::stringstream ss(p_list_str);
                std::string tok;
                while (std::getline(ss, tok, ',')) opts.p_list.push_back(std::stoi(tok));
            }
            return cmd_experiment(exp_name, opts);
        }
    } catch (const CLI::ParseError &e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 1;
}
