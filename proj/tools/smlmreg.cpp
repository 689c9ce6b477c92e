#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smlmreg/manifest.hpp"

namespace fs = std::filesystem;
using namespace smlmreg;

namespace {

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::vector<ObservedCloud> load_clouds(const std::vector<std::string>& paths) {
    std::vector<ObservedCloud> clouds;
    for (const auto& p : paths) clouds.push_back(parse_cloud_csv(p, fs::path(p).stem().string()));
    return clouds;
}

std::vector<RigidTransform> load_or_identity(const std::string& path, std::size_t n) {
    if (path.empty()) return std::vector<RigidTransform>(n, RigidTransform::identity());
    auto t = parse_transforms(path);
    if (t.size() != n) {
        throw LengthMismatch("transform file has " + std::to_string(t.size()) + " rows for " + std::to_string(n) +
                             " clouds");
    }
    return t;
}

NoiseInterpretation parse_interpretation(const std::string& s) {
    if (s == "variance") return NoiseInterpretation::variance;
    if (s == "std_dev" || s == "std") return NoiseInterpretation::std_dev;
    throw ValidationError("noise interpretation must be 'variance' or 'std_dev'");
}

struct RegistrationFlags {
    std::string mode = "proposed";
    int n_components = 54;
    double outlier_fraction = 0.1;
    int max_iters = 100;
    double tol = 1e-6;
    int samples_per_point = 1;
    std::optional<double> variance_floor;
    std::optional<double> initial_variance;
    bool update_weights = false;
    std::size_t dense_budget = 5'000'000;
    double truncation_threshold = 1e-12;

    void attach(CLI::App* app, bool with_components = true) {
        app->add_option("--mode", mode, "proposed | baseline");
        if (with_components) app->add_option("--n-components,-K", n_components, "number of GMM components");
        app->add_option("--outlier-fraction", outlier_fraction, "gamma");
        app->add_option("--max-iters", max_iters);
        app->add_option("--tol", tol, "relative log-likelihood tolerance");
        app->add_option("--samples-per-point", samples_per_point);
        app->add_option("--variance-floor", variance_floor);
        app->add_option("--initial-variance", initial_variance);
        app->add_flag("--update-weights", update_weights, "update component weights in the GMM step");
        app->add_option("--dense-budget", dense_budget);
        app->add_option("--truncation-threshold", truncation_threshold);
    }

    RegistrationConfig config(std::uint64_t seed) const {
        RegistrationConfig c;
        c.mode = parse_mode(mode);
        c.n_components = n_components;
        c.outlier_fraction = outlier_fraction;
        c.max_iters = max_iters;
        c.rel_loglik_tol = tol;
        c.samples_per_point = samples_per_point;
        c.variance_floor = variance_floor;
        c.initial_variance = initial_variance;
        c.fix_weights = !update_weights;
        c.dense_budget = dense_budget;
        c.truncation_threshold = truncation_threshold;
        c.rng_seed = seed;
        c.validate();
        return c;
    }
};

int cmd_simulate(const std::string& model_name, int n_points, double sigma, double r,
                 std::optional<double> spatial_std, double outlier_fraction, int n_views, std::uint64_t seed,
                 double init_std, const std::string& interpretation, const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(out_dir);
    const GroundTruthModel model = make_model(model_name, n_points, seed);
    AcquisitionSpec spec;
    spec.sigma = sigma;
    spec.r = r;
    spec.sigma_spatial_std = spatial_std;
    spec.outlier_fraction = outlier_fraction;
    spec.n_views = n_views;
    spec.rng_seed = derive_seed(seed, {stream::simulation});
    spec.interpretation = parse_interpretation(interpretation);
    const SimulatedViews sim = simulate_views(model, spec);
    const auto init = perturb_rotations(sim.true_transforms, init_std, derive_seed(seed, {stream::perturbation}));

    RunManifest m;
    m.command = "simulate";
    m.seed = seed;
    m.config = {{"model", model_name},
                {"n_points", n_points},
                {"sigma", sigma},
                {"r", r},
                {"sigma_spatial_std", spec.spatial_std()},
                {"outlier_fraction", outlier_fraction},
                {"n_views", n_views},
                {"init_std_deg", init_std},
                {"noise_interpretation", interpretation},
                {"symmetry_order", model.symmetry_order}};
    if (model_name != "triplets" && model_name != "centriole") m.inputs.push_back(model_name);
    for (std::size_t j = 0; j < sim.clouds.size(); ++j) {
        const auto p = join(out_dir, "view_" + std::to_string(j) + ".csv");
        write_cloud_csv(p, sim.clouds[j]);
        m.outputs.push_back(p);
    }
    const auto truth = join(out_dir, "truth.csv");
    export_transforms(sim.true_transforms, truth);
    const auto init_path = join(out_dir, "init.csv");
    export_transforms(init, init_path);
    const auto model_path = join(out_dir, "model.csv");
    {
        auto out = open_output(model_path);
        write_points_csv(out, model.points);
    }
    const auto mask_path = join(out_dir, "outliers.csv");
    {
        auto out = open_output(mask_path);
        out << "view,index\n";
        for (std::size_t j = 0; j < sim.outlier_mask.size(); ++j) {
            for (std::size_t i = 0; i < sim.outlier_mask[j].size(); ++i) {
                if (sim.outlier_mask[j][i]) out << j << ',' << i << '\n';
            }
        }
    }
    for (const auto& p : {truth, init_path, model_path, mask_path}) m.outputs.push_back(p);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.write(join(out_dir, "manifest.json"));
    std::cout << "wrote " << sim.clouds.size() << " views to " << out_dir << '\n';
    return 0;
}

int cmd_register(const std::vector<std::string>& cloud_paths, const std::string& init_path,
                 const RegistrationFlags& flags, int restarts, std::uint64_t seed, const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto clouds = load_clouds(cloud_paths);
    const auto init = load_or_identity(init_path, clouds.size());
    const RegistrationConfig config = flags.config(seed);
    fs::create_directories(out_dir);

    const RestartSummary res = register_with_restarts(clouds, init, config, restarts);
    const auto tf_path = join(out_dir, "transforms.csv");
    const auto gmm_path = join(out_dir, "gmm.csv");
    const auto trace_path = join(out_dir, "trace.csv");
    export_transforms(res.best.transforms, tf_path);
    export_gmm(res.best.gmm, gmm_path);
    {
        auto out = open_output(trace_path);
        write_trace_csv(out, res.best.trace.values);
    }

    RunManifest m;
    m.command = "register";
    m.seed = seed;
    m.mode = to_string(config.mode);
    m.config = to_json(config);
    m.config["restarts"] = restarts;
    m.config["hull_volume"] = res.best.gmm.hull_volume;
    m.config["outlier_weight"] = res.best.gmm.outlier_weight();
    m.config["variance_floor_used"] = res.best.variance_floor;
    m.config["iterations"] = res.best.iterations;
    m.config["converged"] = res.best.converged;
    m.config["best_restart"] = res.best_index;
    m.inputs = cloud_paths;
    if (!init_path.empty()) m.inputs.push_back(init_path);
    m.outputs = {tf_path, gmm_path, trace_path};
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.write(join(out_dir, "manifest.json"));
    std::cout << "final log-likelihood " << format_real(res.best.final_loglik()) << " after "
              << res.best.iterations << " iterations" << (res.best.converged ? " (converged)" : "") << '\n';
    return 0;
}

int cmd_evaluate(const std::string& est_path, const std::string& truth_path, int order, const std::string& out) {
    const auto est = parse_transforms(est_path);
    const auto truth = parse_transforms(truth_path);
    const ErrorReport rep = pairwise_error(est, truth, SymmetrySpec{order});
    if (!out.empty()) {
        auto f = open_output(out);
        f << "i,j,error_deg\n";
        for (Eigen::Index i = 0; i < rep.pairwise_deg.rows(); ++i) {
            for (Eigen::Index j = i + 1; j < rep.pairwise_deg.cols(); ++j) {
                f << i << ',' << j << ',' << format_real(rep.pairwise_deg(i, j)) << '\n';
            }
        }
    }
    std::cout << "mean_err_deg," << format_real(rep.mean_deg) << "\nstd_err_deg," << format_real(rep.std_deg)
              << '\n';
    return 0;
}

int cmd_clean(const std::vector<std::string>& cloud_paths, const std::string& tf_path, const std::string& gmm_path,
              std::optional<double> hull_volume, const std::string& mode, double factor, bool ply,
              const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto clouds = load_clouds(cloud_paths);
    const auto transforms = load_or_identity(tf_path, clouds.size());
    const double h = hull_volume.value_or(outlier_volume(clouds, transforms));
    const GmmModel gmm = parse_gmm(gmm_path, h);
    const CleaningResult res = clean_registered_clouds(clouds, transforms, gmm, parse_mode(mode), factor);
    fs::create_directories(out_dir);

    RunManifest m;
    m.command = "clean";
    m.mode = mode;
    m.config = {{"factor", factor}, {"hull_volume", h}, {"variance_threshold", res.variance_threshold}};
    m.inputs = cloud_paths;
    m.inputs.push_back(tf_path);
    m.inputs.push_back(gmm_path);
    std::size_t kept = 0;
    for (std::size_t j = 0; j < clouds.size(); ++j) {
        std::vector<Point3> pts;
        std::vector<CovMat3> covs;
        for (std::size_t i = 0; i < clouds[j].size(); ++i) {
            if (res.removed[j][i]) continue;
            pts.push_back(transforms[j].apply(clouds[j].point(i)));
            covs.push_back(rotate_covariance(clouds[j].noise(i), transforms[j].rotation()));
        }
        kept += pts.size();
        const std::string stem = "cleaned_" + fs::path(cloud_paths[j]).stem().string();
        if (ply) {
            const auto p = join(out_dir, stem + ".ply");
            write_ply(p, pts);
            m.outputs.push_back(p);
        } else if (!pts.empty()) {
            const auto p = join(out_dir, stem + ".csv");
            write_cloud_csv(p, ObservedCloud(stem, std::move(pts), std::move(covs)));
            m.outputs.push_back(p);
        }
    }
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.write(join(out_dir, "manifest.json"));
    std::cout << "kept " << kept << " of " << total_points(clouds) << " points\n";
    return 0;
}

int cmd_export(const std::vector<std::string>& cloud_paths, const std::string& tf_path, const std::string& gmm_path,
               const std::string& format, const std::string& out_dir) {
    if (format != "ply" && format != "csv") throw ValidationError("format must be 'ply' or 'csv'");
    const auto clouds = load_clouds(cloud_paths);
    const auto transforms = load_or_identity(tf_path, clouds.size());
    fs::create_directories(out_dir);
    for (std::size_t j = 0; j < clouds.size(); ++j) {
        std::vector<Point3> pts;
        for (const auto& p : clouds[j].points()) pts.push_back(transforms[j].apply(p));
        const std::string stem = "registered_" + fs::path(cloud_paths[j]).stem().string();
        if (format == "ply") {
            write_ply(join(out_dir, stem + ".ply"), pts);
        } else {
            auto out = open_output(join(out_dir, stem + ".csv"));
            write_points_csv(out, pts);
        }
    }
    if (!gmm_path.empty()) {
        const GmmModel gmm = parse_gmm(gmm_path, 1.0);
        if (format == "ply") {
            write_ply(join(out_dir, "gmm_means.ply"), gmm.means);
        } else {
            auto out = open_output(join(out_dir, "gmm_means.csv"));
            write_points_csv(out, gmm.means);
        }
    }
    std::cout << "exported " << clouds.size() << " clouds to " << out_dir << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multiview registration of point clouds with anisotropic localization noise"};
    app.require_subcommand(1);

    // simulate
    auto* sim = app.add_subcommand("simulate", "generate noisy views of a model");
    std::string sim_model = "triplets", sim_interp = "variance", sim_out;
    int sim_points = 2000, sim_views = 5;
    double sim_sigma = 0.01, sim_r = 1.0, sim_outliers = 0.1, sim_init = 30.0;
    std::optional<double> sim_spatial;
    std::uint64_t sim_seed = 0;
    sim->add_option("--model", sim_model, "triplets | centriole | path to a PLY file");
    sim->add_option("--n-points", sim_points);
    sim->add_option("--sigma", sim_sigma);
    sim->add_option("--r", sim_r);
    sim->add_option("--sigma-spatial-std", sim_spatial);
    sim->add_option("--outlier-fraction", sim_outliers);
    sim->add_option("--n-views", sim_views);
    sim->add_option("--init-std", sim_init, "std of the initial Euler angle perturbation, degrees");
    sim->add_option("--noise-interpretation", sim_interp, "variance | std_dev");
    sim->add_option("--seed", sim_seed)->required();
    sim->add_option("--out", sim_out)->required();

    // register
    auto* reg = app.add_subcommand("register", "jointly register point clouds");
    std::vector<std::string> reg_clouds;
    std::string reg_init, reg_out;
    int reg_restarts = 1;
    std::uint64_t reg_seed = 0;
    RegistrationFlags reg_flags;
    reg->add_option("clouds", reg_clouds, "cloud CSV files")->required();
    reg->add_option("--init", reg_init, "initial transforms CSV");
    reg->add_option("--restarts", reg_restarts);
    reg->add_option("--seed", reg_seed)->required();
    reg->add_option("--out", reg_out)->required();
    reg_flags.attach(reg);

    // sweep
    auto* sw = app.add_subcommand("sweep", "error sweep over sigma and r");
    SweepSpec spec;
    std::string sw_out, sw_interp = "variance";
    std::optional<int> sw_components;
    unsigned sw_workers = 0;
    RegistrationFlags sw_flags;
    sw->add_option("--model", spec.model, "triplets | centriole | path to a PLY file");
    sw->add_option("--n-points", spec.n_points);
    sw->add_option("--sigma", spec.sigmas)->delimiter(',');
    sw->add_option("--r", spec.rs)->delimiter(',');
    sw->add_option("--replicates", spec.replicates);
    sw->add_option("--n-views", spec.n_views);
    sw->add_option("--restarts", spec.restarts);
    sw->add_option("--init-std", spec.init_std_deg);
    sw->add_option("--seed", spec.seed);
    sw->add_option("--n-components,-K", sw_components);
    sw->add_option("--sigma-spatial-factor", spec.sigma_spatial_std_factor, "per-point level std as a multiple of sigma");
    sw->add_option("--noise-interpretation", sw_interp);
    sw->add_option("--workers", sw_workers, "worker threads (0: SMLMREG_WORKERS or hardware)");
    sw->add_flag("--timing", spec.record_timing, "fill the seconds column with wall time");
    sw->add_option("--out", sw_out)->required();
    sw_flags.attach(sw, false);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "pairwise rotation error against ground truth");
    std::string ev_est, ev_truth, ev_out;
    int ev_order = 1;
    ev->add_option("--estimated", ev_est)->required();
    ev->add_option("--truth", ev_truth)->required();
    ev->add_option("--symmetry", ev_order, "cyclic symmetry order about z");
    ev->add_option("--out", ev_out, "pairwise error CSV");

    // clean
    auto* cl = app.add_subcommand("clean", "remove outliers and points of wide components");
    std::vector<std::string> cl_clouds;
    std::string cl_tf, cl_gmm, cl_mode = "proposed", cl_out;
    std::optional<double> cl_h;
    double cl_factor = 2.5;
    bool cl_ply = false;
    cl->add_option("clouds", cl_clouds)->required();
    cl->add_option("--transforms", cl_tf)->required();
    cl->add_option("--gmm", cl_gmm)->required();
    cl->add_option("--hull-volume", cl_h, "outlier class volume (default: bounding box of the registered data)");
    cl->add_option("--mode", cl_mode);
    cl->add_option("--factor", cl_factor, "variance threshold as a multiple of the median");
    cl->add_flag("--ply", cl_ply, "write PLY instead of CSV");
    cl->add_option("--out", cl_out)->required();

    // export
    auto* ex = app.add_subcommand("export", "write registered clouds and GMM means");
    std::vector<std::string> ex_clouds;
    std::string ex_tf, ex_gmm, ex_format = "ply", ex_out;
    ex->add_option("clouds", ex_clouds)->required();
    ex->add_option("--transforms", ex_tf)->required();
    ex->add_option("--gmm", ex_gmm);
    ex->add_option("--format", ex_format, "ply | csv");
    ex->add_option("--out", ex_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*sim) {
            return cmd_simulate(sim_model, sim_points, sim_sigma, sim_r, sim_spatial, sim_outliers, sim_views,
                                sim_seed, sim_init, sim_interp, sim_out);
        }
        if (*reg) return cmd_register(reg_clouds, reg_init, reg_flags, reg_restarts, reg_seed, reg_out);
        if (*sw) {
            spec.n_components = sw_components;
            spec.interpretation = parse_interpretation(sw_interp);
            spec.registration = sw_flags.config(0);
            const auto out = run_sweep(spec, sw_out, sw_workers);
            std::size_t failed = 0;
            for (const auto& row : out.rows) failed += row.failed();
            std::cout << "wrote " << out.rows.size() << " rows to " << out.csv_path;
            if (failed) std::cout << " (" << failed << " failed)";
            std::cout << '\n';
            return 0;
        }
        if (*ev) return cmd_evaluate(ev_est, ev_truth, ev_order, ev_out);
        if (*cl) return cmd_clean(cl_clouds, cl_tf, cl_gmm, cl_h, cl_mode, cl_factor, cl_ply, cl_out);
        if (*ex) return cmd_export(ex_clouds, ex_tf, ex_gmm, ex_format, ex_out);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
