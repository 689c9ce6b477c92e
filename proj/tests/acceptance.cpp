#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "smlmreg/pipeline.hpp"

using namespace smlmreg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

ObservedCloud random_cloud(std::mt19937_64& rng, int n, double noise_scale, const std::string& id) {
    std::normal_distribution<double> g;
    std::vector<Point3> pts;
    std::vector<CovMat3> covs;
    for (int i = 0; i < n; ++i) {
        pts.emplace_back(g(rng), g(rng), g(rng));
        covs.push_back(noise_scale > 0 ? CovMat3::from_matrix(oracle::random_spd(rng, noise_scale, noise_scale))
                                       : CovMat3::zero());
    }
    return ObservedCloud(id, std::move(pts), std::move(covs));
}

RigidTransform random_transform(std::mt19937_64& rng, double t_scale = 1.0) {
    std::normal_distribution<double> g;
    return {oracle::random_rotation(rng), t_scale * Vec3(g(rng), g(rng), g(rng))};
}

double param_distance(const IterationOutput& a, const IterationOutput& b) {
    double d = 0.0;
    for (std::size_t j = 0; j < a.transforms.size(); ++j) {
        d = std::max(d, (a.transforms[j].rotation() - b.transforms[j].rotation()).cwiseAbs().maxCoeff());
        d = std::max(d, (a.transforms[j].translation() - b.transforms[j].translation()).cwiseAbs().maxCoeff());
    }
    for (std::size_t k = 0; k < a.gmm.size(); ++k) {
        d = std::max(d, (a.gmm.means[k] - b.gmm.means[k]).cwiseAbs().maxCoeff());
        d = std::max(d, std::abs(a.gmm.variances[k] - b.gmm.variances[k]));
    }
    return d;
}

Outcome noise_free_reduction() {
    std::mt19937_64 rng(101);
    std::vector<ObservedCloud> clouds;
    std::vector<RigidTransform> tf;
    for (int j = 0; j < 3; ++j) {
        clouds.push_back(random_cloud(rng, 200, 0.0, "v" + std::to_string(j)));
        tf.push_back(random_transform(rng));
    }
    RegistrationConfig prop;
    prop.n_components = 10;
    prop.rng_seed = 5;
    RegistrationConfig base = prop;
    base.mode = Mode::baseline_jrmpc;
    Engine init = make_engine(prop.rng_seed, {stream::gmm_init});
    const GmmModel g0 = gmm_init(clouds, tf, prop, init);
    const double floor = resolve_variance_floor(clouds, tf, prop);

    IterationOutput p{tf, g0, 0.0}, b{tf, g0, 0.0};
    double worst = 0.0;
    const int iters = prop.max_iters;
    for (int it = 1; it <= iters; ++it) {
        p = sage_iteration(clouds, p.transforms, p.gmm, prop, floor, prop.rng_seed, static_cast<std::uint64_t>(it));
        b = sage_iteration(clouds, b.transforms, b.gmm, base, floor, base.rng_seed, static_cast<std::uint64_t>(it));
        worst = std::max(worst, param_distance(p, b));
    }
    return {worst <= 1e-10, fmt("max parameter difference %.3g over %d iterations (tol 1e-10)", worst, iters)};
}

Outcome baseline_monotonicity() {
    double worst_drop = 0.0;
    const auto model = generate_triplets();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        AcquisitionSpec acq;
        acq.r = 5.0;
        acq.rng_seed = 200 + seed;
        const auto sim = simulate_views(model, acq);
        const auto init = perturb_rotations(sim.true_transforms, 30.0, 300 + seed);
        RegistrationConfig cfg;
        cfg.mode = Mode::baseline_jrmpc;
        cfg.max_iters = 50;
        cfg.rel_loglik_tol = 0.0;
        cfg.rng_seed = 400 + seed;
        const auto res = run_registration(sim.clouds, init, cfg);
        const auto& v = res.trace.values;
        if (v.size() != 51) return {false, fmt("seed %d stopped after %zu values", static_cast<int>(seed), v.size())};
        for (std::size_t i = 1; i < v.size(); ++i) worst_drop = std::max(worst_drop, v[i - 1] - v[i]);
    }
    return {worst_drop <= 1e-8, fmt("largest decrease %.3g over 5 seeds x 50 iterations (slack 1e-8)", worst_drop)};
}

Outcome posterior_oracle() {
    std::mt19937_64 rng(303);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0.05, 1.0);
    double worst_mean = 0.0, worst_cov = 0.0;
    for (int t = 0; t < 20; ++t) {
        const double sigma2 = u(rng);
        const Mat3 noise = oracle::random_spd(rng, 0.3 * u(rng), 0.1 * sigma2);
        const RigidTransform tf = random_transform(rng);
        const Point3 y(g(rng), g(rng), g(rng));
        const Vec3 mu = tf.apply(y) + std::sqrt(sigma2) * Vec3(g(rng), g(rng), g(rng));
        const auto post = posterior_gain_and_mean(y, CovMat3::from_matrix(noise), tf, mu, sigma2);
        const Mat3 s = tf.rotation() * noise * tf.rotation().transpose();
        const auto grid = oracle::grid_posterior(tf.apply(y), s, mu, sigma2, 81);
        const double h = grid.cell;
        worst_mean = std::max(worst_mean, (post.denoised - grid.mean).cwiseAbs().maxCoeff() / h);
        worst_cov = std::max(worst_cov, (post.posterior_cov - grid.cov).cwiseAbs().maxCoeff() / (h * h));
    }
    const bool ok = worst_mean <= 1e-3 && worst_cov <= 1e-3;
    return {ok, fmt("20 instances: worst mean error %.3g cells, worst covariance error %.3g cells^2 (tol 1e-3)",
                    worst_mean, worst_cov)};
}

Outcome marginal_oracle() {
    std::mt19937_64 rng(404);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0.05, 1.0);
    double worst_z = 0.0;
    constexpr int n = 1'000'000;
    for (int t = 0; t < 20; ++t) {
        const double sigma2 = u(rng);
        const Mat3 noise = oracle::random_spd(rng, 0.2 * u(rng), 0.01);
        const RigidTransform tf = random_transform(rng);
        const Point3 y(g(rng), g(rng), g(rng));
        const Vec3 mu = tf.apply(y) + std::sqrt(sigma2) * Vec3(g(rng), g(rng), g(rng));
        const double value = marginal_component_density(y, CovMat3::from_matrix(noise), tf, mu, sigma2);
        // Integrate over the clean point y' ~ N(ȳ, Σ̄) of the component density at φ(y').
        const Mat3 l = noise.llt().matrixL();
        const Mat3 comp = sigma2 * Mat3::Identity();
        double s1 = 0.0, s2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const Point3 clean = y + l * Vec3(g(rng), g(rng), g(rng));
            const double f = oracle::normal_pdf(tf.apply(clean), mu, comp);
            s1 += f;
            s2 += f * f;
        }
        const double mean = s1 / n;
        const double se = std::sqrt((s2 / n - mean * mean) / (n - 1));
        worst_z = std::max(worst_z, std::abs(value - mean) / se);
    }
    return {worst_z <= 3.0, fmt("20 instances, 1e6 samples each: worst deviation %.2f standard errors (tol 3)", worst_z)};
}

Outcome procrustes_optimality() {
    std::mt19937_64 rng(505);
    double worst_gap = -INFINITY;
    double worst_det = 0.0;
    for (int t = 0; t < 50; ++t) {
        const auto pairs = oracle::random_pairs(rng, 20 + t, t % 2 == 0 ? 0.3 : 2.0);
        const auto sol = weighted_procrustes(pairs);
        const double f = procrustes_objective(pairs, sol);
        const double numeric = oracle::numeric_pose_fit(pairs, rng, 4).objective;
        const double random = oracle::random_search_objective(pairs, rng, 10'000);
        worst_gap = std::max(worst_gap, f - std::min(numeric, random));
        worst_det = std::max(worst_det, std::abs(sol.rotation().determinant() - 1.0));
    }
    const bool ok = worst_gap <= 1e-8 && worst_det <= 1e-12;
    return {ok, fmt("50 instances: worst objective excess over oracles %.3g (tol 1e-8), |det-1| <= %.2g", worst_gap,
                    worst_det)};
}

struct CellStats {
    double proposed = 0.0;
    double baseline = 0.0;
    int failures = 0;
};

SweepSpec triplet_spec(std::vector<double> rs) {
    SweepSpec spec;
    spec.model = "triplets";
    spec.sigmas = {0.01};
    spec.rs = std::move(rs);
    spec.replicates = 10;
    spec.n_views = 5;
    spec.restarts = 5;
    spec.init_std_deg = 30.0;
    spec.seed = 0;
    return spec;
}

CellStats cell(const std::vector<SweepRow>& rows, double r) {
    CellStats s;
    int np = 0, nb = 0;
    for (const auto& row : rows) {
        if (row.r != r) continue;
        if (row.failed()) {
            ++s.failures;
            continue;
        }
        if (row.mode == Mode::proposed_sage) {
            s.proposed += row.mean_err_deg;
            ++np;
        } else {
            s.baseline += row.mean_err_deg;
            ++nb;
        }
    }
    s.proposed /= std::max(np, 1);
    s.baseline /= std::max(nb, 1);
    return s;
}

Outcome fig5_instance() {
    const auto c = cell(run_sweep_rows(triplet_spec({10.0})), 10.0);
    const bool ok = c.failures == 0 && c.proposed < 5.0 && c.baseline > 2.0 * c.proposed;
    return {ok, fmt("r=10, 10 replicates: proposed %.2f deg, baseline %.2f deg, ratio %.2f (need proposed < 5 and "
                    "ratio > 2), %d failed runs",
                    c.proposed, c.baseline, c.baseline / c.proposed, c.failures)};
}

Outcome fig4_trend() {
    const auto rows = run_sweep_rows(triplet_spec({1.0, 5.0, 10.0}));
    const auto r1 = cell(rows, 1.0), r5 = cell(rows, 5.0), r10 = cell(rows, 10.0);
    const double comparable = std::max(r1.proposed, r1.baseline) / std::min(r1.proposed, r1.baseline);
    const double growth_p = r10.proposed / r1.proposed;
    const double growth_b = r10.baseline / r1.baseline;
    const bool ok = r1.failures + r5.failures + r10.failures == 0 && comparable < 2.0 && growth_p < growth_b;
    return {ok, fmt("proposed %.2f/%.2f/%.2f, baseline %.2f/%.2f/%.2f deg at r=1/5/10; r=1 ratio %.2f (< 2); "
                    "growth r10/r1 proposed %.2f vs baseline %.2f",
                    r1.proposed, r5.proposed, r10.proposed, r1.baseline, r5.baseline, r10.baseline, comparable,
                    growth_p, growth_b)};
}

Outcome symmetry_metric() {
    std::mt19937_64 rng(808);
    double worst_sym = 0.0, worst_gauge = 0.0;
    for (int t = 0; t < 20; ++t) {
        std::vector<Mat3> truth, est;
        for (int j = 0; j < 5; ++j) {
            truth.push_back(oracle::random_rotation(rng));
            est.push_back(truth.back().transpose());
        }
        const int k = 1 + t % 8;
        est[t % 5] = rotation_z(2.0 * std::numbers::pi * k / 9.0) * est[t % 5];
        worst_sym = std::max(worst_sym, pairwise_error(est, truth, {9}).pairwise_deg.maxCoeff());

        std::vector<Mat3> noisy;
        for (const auto& r : est) noisy.push_back(oracle::expmap(0.2 * Vec3::Random()) * r);
        const Mat3 gauge = oracle::random_rotation(rng);
        std::vector<Mat3> moved;
        for (const auto& r : noisy) moved.push_back(gauge * r);
        const auto a = pairwise_error(noisy, truth, {9}).pairwise_deg;
        const auto b = pairwise_error(moved, truth, {9}).pairwise_deg;
        worst_gauge = std::max(worst_gauge, (a - b).cwiseAbs().maxCoeff() * std::numbers::pi / 180.0);
    }
    const bool ok = worst_sym <= 1e-10 && worst_gauge <= 1e-10;
    return {ok, fmt("worst symmetric-pose error %.3g deg, worst gauge change %.3g rad (tol 1e-10)", worst_sym,
                    worst_gauge)};
}

Outcome cleaning_efficacy() {
    std::mt19937_64 rng(909);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> u(0.0, 10.0);
    // 20 tight components in a 10-unit box plus one wide junk component.
    std::vector<Vec3> means;
    std::vector<double> vars;
    for (int k = 0; k < 20; ++k) {
        means.emplace_back(1.0 + 0.8 * u(rng), 1.0 + 0.8 * u(rng), 1.0 + 0.4 * u(rng));
        vars.push_back(0.01);
    }
    const Vec3 junk(5.0, 5.0, 8.5);
    means.push_back(junk);
    vars.push_back(0.25);
    const int signal_per = 15, junk_n = 60, uniform_n = 60;
    const double total = 20.0 * signal_per + junk_n + uniform_n;

    GmmModel gmm;
    gmm.means = means;
    gmm.variances = vars;
    const double p_out = uniform_n / total;
    for (int k = 0; k < 20; ++k) gmm.weights.push_back(signal_per / total);
    gmm.weights.push_back(junk_n / total);
    gmm.weights.push_back(p_out);
    gmm.hull_volume = 1000.0;

    std::vector<ObservedCloud> clouds;
    std::vector<RigidTransform> tf;
    std::vector<std::vector<bool>> is_outlier;
    for (int j = 0; j < 3; ++j) {
        std::vector<Point3> pts;
        std::vector<bool> lab;
        for (int k = 0; k < 20; ++k) {
            for (int i = 0; i < signal_per; ++i) {
                pts.push_back(means[k] + 0.1 * Vec3(g(rng), g(rng), g(rng)));
                lab.push_back(false);
            }
        }
        for (int i = 0; i < junk_n; ++i) {
            pts.push_back(junk + 0.5 * Vec3(g(rng), g(rng), g(rng)));
            lab.push_back(true);
        }
        for (int i = 0; i < uniform_n; ++i) {
            pts.push_back(Vec3(u(rng), u(rng), u(rng)));
            lab.push_back(true);
        }
        const RigidTransform t = random_transform(rng, 3.0);
        std::vector<Point3> local;
        for (const auto& p : pts) local.push_back(t.apply_inverse(p));
        clouds.emplace_back("v" + std::to_string(j), local, std::vector<CovMat3>(local.size(), CovMat3::isotropic(1e-4)));
        tf.push_back(t);
        is_outlier.push_back(lab);
    }
    const auto res = clean_registered_clouds(clouds, tf, gmm);
    double out_total = 0, out_removed = 0, sig_total = 0, sig_removed = 0;
    for (std::size_t j = 0; j < clouds.size(); ++j) {
        for (std::size_t i = 0; i < is_outlier[j].size(); ++i) {
            if (is_outlier[j][i]) {
                ++out_total;
                out_removed += res.removed[j][i];
            } else {
                ++sig_total;
                sig_removed += res.removed[j][i];
            }
        }
    }
    const double out_rate = out_removed / out_total, sig_rate = sig_removed / sig_total;
    return {out_rate >= 0.95 && sig_rate <= 0.05,
            fmt("removed %.1f%% of labeled outliers (>= 95%%) and %.1f%% of signal (<= 5%%)", 100 * out_rate,
                100 * sig_rate)};
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SMLMREG_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome reproducibility() {
    const fs::path dir = fs::temp_directory_path() / ("smlmreg_accept_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    const std::string d = dir.string();
    if (run_cli("simulate --model triplets --r 5 --seed 11 --out " + d + "/sim") != 0) {
        return {false, "simulate failed"};
    }
    std::string views;
    for (int j = 0; j < 5; ++j) views += " " + d + "/sim/view_" + std::to_string(j) + ".csv";
    std::vector<std::string> diffs;
    for (const char* run : {"a", "b"}) {
        if (run_cli("register" + views + " --init " + d + "/sim/init.csv --restarts 2 --seed 12 --out " + d + "/reg_" +
                    run) != 0) {
            return {false, "register failed"};
        }
    }
    for (const char* f : {"transforms.csv", "gmm.csv", "trace.csv"}) {
        if (slurp(dir / "reg_a" / f) != slurp(dir / "reg_b" / f) || slurp(dir / "reg_a" / f).empty()) diffs.push_back(f);
    }
    const std::string sweep = "sweep --sigma 0.01 --r 1,10 --replicates 2 --n-views 3 --restarts 2 --max-iters 20 --seed 13";
    if (run_cli(sweep + " --workers 1 --out " + d + "/sw_a") != 0 ||
        run_cli(sweep + " --workers 3 --out " + d + "/sw_b") != 0) {
        return {false, "sweep failed"};
    }
    if (slurp(dir / "sw_a" / "sweep.csv") != slurp(dir / "sw_b" / "sweep.csv")) diffs.push_back("sweep.csv");
    fs::remove_all(dir);
    std::string detail = "register outputs and sweep.csv identical across two runs";
    if (!diffs.empty()) {
        detail = "differing files:";
        for (const auto& f : diffs) detail += " " + f;
    }
    return {diffs.empty(), detail};
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"noise-free reduction", noise_free_reduction},
        {"baseline monotonicity", baseline_monotonicity},
        {"posterior oracle", posterior_oracle},
        {"marginal oracle", marginal_oracle},
        {"procrustes optimality", procrustes_optimality},
        {"triplets r=10 instance", fig5_instance},
        {"r-sweep trend", fig4_trend},
        {"symmetry metric", symmetry_metric},
        {"cleaning efficacy", cleaning_efficacy},
        {"reproducibility", reproducibility},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("criterion %zu %s: %s (%s) [%.1f s]\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str(), secs);
        std::fflush(stdout);
        failed += !o.pass;
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
