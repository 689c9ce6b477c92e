#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "smlmreg/em.hpp"
#include "smlmreg/io.hpp"
#include "smlmreg/metrics.hpp"
#include "smlmreg/simulation.hpp"

namespace smlmreg {

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

struct CleaningResult {
    std::vector<ObservedCloud> clouds;             // retained points in the common frame
    std::vector<std::vector<bool>> removed;        // per input point
    std::vector<std::vector<bool>> outlier_class;  // removed because the outlier class won
    double variance_threshold = 0.0;
    std::size_t removed_count() const {
        std::size_t n = 0;
        for (const auto& r : removed) n += static_cast<std::size_t>(std::count(r.begin(), r.end(), true));
        return n;
    }
};

inline double median(std::vector<double> v) {
    if (v.empty()) throw ValidationError("median of an empty list");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double hi = v[mid];
    if (v.size() % 2 == 1) return hi;
    const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lo + hi);
}

/// Drops points whose most probable class is the outlier class or a component
/// with σ_k² > factor × median σ². Retained points are mapped into the common
/// frame together with their rotated covariances.
inline CleaningResult clean_registered_clouds(const std::vector<ObservedCloud>& clouds,
                                              const std::vector<RigidTransform>& transforms,
                                              const GmmModel& gmm, Mode mode = Mode::proposed_sage,
                                              double factor = 2.5) {
    EStepOptions opts;
    opts.mode = mode;
    opts.dense_budget = std::numeric_limits<std::size_t>::max();
    const EStepState state = e_step(clouds, transforms, gmm, opts);

    CleaningResult out;
    out.variance_threshold = factor * median(gmm.variances);
    for (std::size_t j = 0; j < clouds.size(); ++j) {
        const auto& cp = state.clouds[j];
        const auto& cloud = clouds[j];
        std::vector<bool> removed(cloud.size(), false);
        std::vector<bool> as_outlier(cloud.size(), false);
        std::vector<Point3> pts;
        std::vector<CovMat3> covs;
        for (std::size_t i = 0; i < cloud.size(); ++i) {
            double best = cp.outlier_responsibility[i];
            std::optional<std::uint32_t> best_k;
            for (auto q = cp.offsets[i]; q < cp.offsets[i + 1]; ++q) {
                if (cp.entries[q].responsibility > best) {
                    best = cp.entries[q].responsibility;
                    best_k = cp.entries[q].component;
                }
            }
            if (!best_k) {
                removed[i] = as_outlier[i] = true;
            } else if (gmm.variances[*best_k] > out.variance_threshold) {
                removed[i] = true;
            } else {
                pts.push_back(transforms[j].apply(cloud.point(i)));
                covs.push_back(rotate_covariance(cloud.noise(i), transforms[j].rotation()));
            }
        }
        if (!pts.empty()) out.clouds.emplace_back(cloud.id(), std::move(pts), std::move(covs));
        out.removed.push_back(std::move(removed));
        out.outlier_class.push_back(std::move(as_outlier));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Models by name
// ---------------------------------------------------------------------------

/// "triplets", "centriole", or a path to a PLY file.
inline GroundTruthModel make_model(const std::string& name, int n_points, std::uint64_t seed) {
    if (name == "triplets") return generate_triplets();
    if (name == "centriole") return generate_centriole(n_points, seed);
    auto m = load_mesh_model(name, n_points, seed);
    m.name = std::filesystem::path(name).stem().string();
    return m;
}

inline int default_components(const GroundTruthModel& model) {
    if (model.name == "triplets") return 54;
    if (model.name == "centriole") return 1500;
    return 2500;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepSpec {
    std::string model = "triplets";
    int n_points = 2000;
    std::vector<double> sigmas{0.01};
    std::vector<double> rs{1.0, 5.0, 10.0};
    int replicates = 10;
    int n_views = 5;
    int restarts = 5;
    double init_std_deg = 30.0;
    std::uint64_t seed = 0;
    std::optional<int> n_components;
    std::optional<double> sigma_spatial_std_factor;  // multiple of σ
    NoiseInterpretation interpretation = NoiseInterpretation::variance;
    RegistrationConfig registration;  // mode, seed and n_components are set per run
    bool record_timing = false;

    void validate() const {
        if (sigmas.empty()) throw ValidationError("sweep needs at least one sigma value");
        if (rs.empty()) throw ValidationError("sweep needs at least one r value");
        if (replicates < 1) throw ValidationError("replicates must be >= 1");
        if (restarts < 1) throw ValidationError("restarts must be >= 1");
        if (n_views < 2) throw ValidationError("n_views must be >= 2");
        if (!(init_std_deg >= 0.0)) throw ValidationError("init_std_deg must be >= 0");
        for (double s : sigmas) {
            if (!(s > 0.0)) throw ValidationError("sigma values must be positive");
        }
        for (double r : rs) {
            if (!(r >= 1.0)) throw ValidationError("r values must be >= 1");
        }
    }
};

struct SweepRow {
    std::string model;
    double sigma = 0.0;
    double r = 0.0;
    int replicate = 0;
    Mode mode = Mode::proposed_sage;
    double mean_err_deg = std::numeric_limits<double>::quiet_NaN();
    double std_err_deg = std::numeric_limits<double>::quiet_NaN();
    double loglik = std::numeric_limits<double>::quiet_NaN();
    int iters = 0;
    double seconds = 0.0;
    std::string error;  // empty unless the cell failed
    bool failed() const { return !error.empty(); }
};

inline const char* sweep_header() {
    return "model,sigma,r,replicate,mode,mean_err_deg,std_err_deg,loglik,iters,seconds";
}

inline void write_sweep_row(std::ostream& out, const SweepRow& row) {
    out << row.model << ',' << format_real(row.sigma) << ',' << format_real(row.r) << ',' << row.replicate << ','
        << to_string(row.mode) << ',' << format_real(row.mean_err_deg) << ',' << format_real(row.std_err_deg) << ','
        << format_real(row.loglik) << ',' << row.iters << ',' << format_real(row.seconds) << '\n';
}

struct CellSeeds {
    std::uint64_t simulation;
    std::uint64_t perturbation;
    std::uint64_t registration;
};

inline CellSeeds cell_seeds(std::uint64_t master, std::size_t sigma_index, std::size_t r_index, int replicate) {
    const std::uint64_t cell = derive_seed(master, {stream::sweep_cell, sigma_index, r_index,
                                                    static_cast<std::uint64_t>(replicate)});
    return {derive_seed(cell, {1}), derive_seed(cell, {2}), derive_seed(cell, {3})};
}

/// One (σ, r, replicate) cell: simulate, perturb, and register in both modes.
/// Returns the proposed row then the baseline row.
inline std::vector<SweepRow> run_cell(const SweepSpec& spec, const GroundTruthModel& model, std::size_t sigma_index,
                                      std::size_t r_index, int replicate) {
    const double sigma = spec.sigmas.at(sigma_index);
    const double r = spec.rs.at(r_index);
    const CellSeeds seeds = cell_seeds(spec.seed, sigma_index, r_index, replicate);

    std::vector<SweepRow> rows;
    for (Mode mode : {Mode::proposed_sage, Mode::baseline_jrmpc}) {
        SweepRow row;
        row.model = model.name;
        row.sigma = sigma;
        row.r = r;
        row.replicate = replicate;
        row.mode = mode;
        rows.push_back(row);
    }
    try {
        AcquisitionSpec acq;
        acq.sigma = sigma;
        acq.r = r;
        if (spec.sigma_spatial_std_factor) acq.sigma_spatial_std = *spec.sigma_spatial_std_factor * sigma;
        acq.n_views = spec.n_views;
        acq.rng_seed = seeds.simulation;
        acq.interpretation = spec.interpretation;
        const SimulatedViews sim = simulate_views(model, acq);
        const auto init = perturb_rotations(sim.true_transforms, spec.init_std_deg, seeds.perturbation);
        const SymmetrySpec symmetry{model.symmetry_order};

        for (auto& row : rows) {
            try {
                RegistrationConfig config = spec.registration;
                config.mode = row.mode;
                config.rng_seed = seeds.registration;
                config.n_components = spec.n_components.value_or(default_components(model));
                const auto t0 = std::chrono::steady_clock::now();
                const RestartSummary res = register_with_restarts(sim.clouds, init, config, spec.restarts);
                const auto t1 = std::chrono::steady_clock::now();
                const ErrorReport err = pairwise_error(res.best.transforms, sim.true_transforms, symmetry);
                row.mean_err_deg = err.mean_deg;
                row.std_err_deg = err.std_deg;
                row.loglik = res.best.final_loglik();
                row.iters = res.best.iterations;
                if (spec.record_timing) row.seconds = std::chrono::duration<double>(t1 - t0).count();
            } catch (const std::exception& e) {
                row.error = e.what();
            }
        }
    } catch (const std::exception& e) {
        for (auto& row : rows) row.error = e.what();
    }
    return rows;
}

/// Worker count: SMLMREG_WORKERS if set and positive, else the hardware
/// concurrency (at least 1).
inline unsigned sweep_workers() {
    if (const char* env = std::getenv("SMLMREG_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
        throw ValidationError("SMLMREG_WORKERS must be a positive integer");
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs every cell of the sweep and returns the rows in cell order
/// (σ, then r, then replicate; proposed before baseline). Cells run on a
/// thread pool; the row order and content do not depend on the schedule.
inline std::vector<SweepRow> run_sweep_rows(const SweepSpec& spec, unsigned workers = 0,
                                            const std::function<void(const SweepRow&)>& on_row = {}) {
    spec.validate();
    if (workers == 0) workers = sweep_workers();
    const GroundTruthModel model = make_model(spec.model, spec.n_points, spec.seed);

    struct Cell {
        std::size_t s, r;
        int rep;
    };
    std::vector<Cell> cells;
    for (std::size_t s = 0; s < spec.sigmas.size(); ++s) {
        for (std::size_t r = 0; r < spec.rs.size(); ++r) {
            for (int rep = 0; rep < spec.replicates; ++rep) cells.push_back({s, r, rep});
        }
    }

    std::vector<std::vector<SweepRow>> results(cells.size());
    std::vector<bool> done(cells.size(), false);
    std::size_t emitted = 0;
    std::mutex sink;
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= cells.size()) return;
            auto rows = run_cell(spec, model, cells[c].s, cells[c].r, cells[c].rep);
            std::lock_guard lock(sink);
            results[c] = std::move(rows);
            done[c] = true;
            while (emitted < cells.size() && done[emitted]) {
                if (on_row) {
                    for (const auto& row : results[emitted]) on_row(row);
                }
                ++emitted;
            }
        }
    };
    const unsigned n_threads = std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(cells.size(), 1)));
    if (n_threads <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }

    std::vector<SweepRow> rows;
    for (auto& r : results) {
        for (auto& row : r) rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace smlmreg
