#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Eigenvalues>

#include "smlmreg/core.hpp"
#include "smlmreg/gaussian.hpp"
#include "smlmreg/procrustes.hpp"
#include "smlmreg/random.hpp"

namespace smlmreg {

// ---------------------------------------------------------------------------
// E-step state
// ---------------------------------------------------------------------------

/// Posterior quantities for one (point, component) pair.
///
/// In baseline mode the clean point is the observation itself: `denoised` holds
/// φ(ȳ), `gain` is the identity and `posterior_cov` is zero.
struct PosteriorEntry {
    std::uint32_t component = 0;
    double responsibility = 0.0;  // α_jik
    Mat3 gain = Mat3::Identity();  // W_jik
    Point3 denoised = Point3::Zero();  // ŷ_jik
    Mat3 posterior_cov = Mat3::Zero();  // (I − W_jik)σ_k²
};

/// Ragged per-cloud storage: the entries of point i are
/// entries[offsets[i] .. offsets[i+1]).
struct CloudPosterior {
    std::vector<std::size_t> offsets{0};
    std::vector<PosteriorEntry> entries;
    std::vector<double> outlier_responsibility;  // α_ji,K+1
    std::vector<Point3> samples;                 // y^s, samples_per_point per entry

    std::size_t n_points() const noexcept { return offsets.size() - 1; }
    std::span<const PosteriorEntry> point_entries(std::size_t i) const {
        return {entries.data() + offsets[i], offsets[i + 1] - offsets[i]};
    }
};

struct EStepState {
    Mode mode = Mode::proposed_sage;
    bool truncated = false;  // responsibilities below the threshold were dropped
    int samples_per_point = 0;  // 0 until sample_clean_points has run
    double log_likelihood = 0.0;  // at the parameters the E-step was computed with
    std::vector<CloudPosterior> clouds;
};

struct EStepOptions {
    Mode mode = Mode::proposed_sage;
    std::size_t dense_budget = 5'000'000;
    double truncation_threshold = 1e-12;

    static EStepOptions from(const RegistrationConfig& c) {
        return {c.mode, c.dense_budget, c.truncation_threshold};
    }
};

namespace detail {

inline void check_inputs(const std::vector<ObservedCloud>& clouds,
                         const std::vector<RigidTransform>& transforms, const GmmModel& gmm) {
    if (clouds.size() != transforms.size()) {
        throw LengthMismatch("expected one transform per cloud");
    }
    gmm.validate();
}

inline double log_outlier_term(const GmmModel& gmm) {
    const double p = gmm.outlier_weight();
    return p > 0.0 ? std::log(p) - std::log(gmm.hull_volume) : -std::numeric_limits<double>::infinity();
}

inline Mat3 rotated_noise(const ObservedCloud& cloud, std::size_t i, const RigidTransform& t, Mode mode) {
    if (mode == Mode::baseline_jrmpc) return Mat3::Zero();
    const CovMat3& n = cloud.noise(i);
    if (n.is_zero()) return Mat3::Zero();
    return rotate_covariance(n, t.rotation()).matrix();
}

}  // namespace detail

/// Responsibilities (with the uniform outlier class in the normalizer) and, in
/// proposed mode, the per-component posterior of the clean point.
inline EStepState e_step(const std::vector<ObservedCloud>& clouds,
                         const std::vector<RigidTransform>& transforms, const GmmModel& gmm,
                         const EStepOptions& opts) {
    detail::check_inputs(clouds, transforms, gmm);
    const std::size_t k_count = gmm.size();
    const bool proposed = opts.mode == Mode::proposed_sage;
    const bool truncate = k_count * total_points(clouds) > opts.dense_budget;
    const double log_out = detail::log_outlier_term(gmm);

    std::vector<double> log_w(k_count);
    for (std::size_t k = 0; k < k_count; ++k) {
        log_w[k] = gmm.weights[k] > 0.0 ? std::log(gmm.weights[k]) : -std::numeric_limits<double>::infinity();
    }

    EStepState state;
    state.mode = opts.mode;
    state.truncated = truncate;
    state.clouds.resize(clouds.size());

    std::vector<double> log_gamma(k_count + 1);
    std::vector<ComponentTerms> terms(proposed ? k_count : 0);
    for (std::size_t j = 0; j < clouds.size(); ++j) {
        const auto& cloud = clouds[j];
        const auto& tf = transforms[j];
        auto& cp = state.clouds[j];
        cp.offsets.assign(1, 0);
        cp.offsets.reserve(cloud.size() + 1);
        cp.entries.reserve(truncate ? cloud.size() * 4 : cloud.size() * k_count);
        cp.outlier_responsibility.resize(cloud.size());

        for (std::size_t i = 0; i < cloud.size(); ++i) {
            const Point3 x = tf.apply(cloud.point(i));
            const Mat3 s = detail::rotated_noise(cloud, i, tf, opts.mode);
            for (std::size_t k = 0; k < k_count; ++k) {
                if (proposed) {
                    terms[k] = component_terms(x, s, gmm.means[k], gmm.variances[k], true);
                    log_gamma[k] = log_w[k] + terms[k].log_density;
                } else {
                    log_gamma[k] = log_w[k] +
                                   component_terms(x, s, gmm.means[k], gmm.variances[k], false).log_density;
                }
            }
            log_gamma[k_count] = log_out;
            const double log_norm = log_sum_exp(log_gamma);
            if (!std::isfinite(log_norm)) {
                throw SingularCovariance("point has zero likelihood under every class");
            }
            state.log_likelihood += log_norm;
            cp.outlier_responsibility[i] = std::exp(log_out - log_norm);
            for (std::size_t k = 0; k < k_count; ++k) {
                const double a = std::exp(log_gamma[k] - log_norm);
                if (truncate && a < opts.truncation_threshold) continue;
                PosteriorEntry e;
                e.component = static_cast<std::uint32_t>(k);
                e.responsibility = a;
                if (proposed) {
                    e.gain = terms[k].gain;
                    e.denoised = terms[k].denoised;
                    e.posterior_cov = terms[k].posterior_cov;
                } else {
                    e.denoised = x;
                }
                cp.entries.push_back(e);
            }
            cp.offsets.push_back(cp.entries.size());
        }
    }
    return state;
}

inline EStepState e_step(const std::vector<ObservedCloud>& clouds,
                         const std::vector<RigidTransform>& transforms, const GmmModel& gmm,
                         const RegistrationConfig& config) {
    return e_step(clouds, transforms, gmm, EStepOptions::from(config));
}

/// Draws y^s for every stored (j,i,k): ŷ^s ~ N(ŷ, (I − W)σ²), mapped back to the
/// cloud frame with the transform the E-step used. Each (iteration, j, i, k)
/// has its own stream derived from `seed`, so results do not depend on
/// evaluation order.
inline void sample_clean_points(EStepState& state, const std::vector<RigidTransform>& transforms,
                                std::uint64_t seed, std::uint64_t iteration, int samples_per_point = 1) {
    if (state.mode != Mode::proposed_sage) {
        throw ValidationError("sampling is only defined in proposed mode");
    }
    if (samples_per_point < 1) throw ValidationError("samples_per_point must be >= 1");
    if (transforms.size() != state.clouds.size()) throw LengthMismatch("expected one transform per cloud");
    state.samples_per_point = samples_per_point;

    for (std::size_t j = 0; j < state.clouds.size(); ++j) {
        auto& cp = state.clouds[j];
        const auto& tf = transforms[j];
        cp.samples.assign(cp.entries.size() * static_cast<std::size_t>(samples_per_point), Point3::Zero());
        for (std::size_t i = 0; i < cp.n_points(); ++i) {
            for (std::size_t e = cp.offsets[i]; e < cp.offsets[i + 1]; ++e) {
                const auto& entry = cp.entries[e];
                Mat3 factor;
                const bool degenerate = entry.posterior_cov.isZero(0.0);
                if (!degenerate) {
                    Eigen::LLT<Mat3> llt(entry.posterior_cov);
                    if (llt.info() == Eigen::Success) {
                        factor = llt.matrixL();
                    } else {
                        // Semi-definite up to rounding: clamp negative eigenvalues.
                        Eigen::SelfAdjointEigenSolver<Mat3> eig(entry.posterior_cov);
                        const Vec3 root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
                        factor = eig.eigenvectors() * root.asDiagonal();
                    }
                }
                SplitMix64 gen(derive_seed(seed, {stream::sampling, iteration, j, i, entry.component}));
                std::normal_distribution<double> normal(0.0, 1.0);
                for (int s = 0; s < samples_per_point; ++s) {
                    Point3 draw = entry.denoised;
                    if (!degenerate) {
                        const Vec3 z(normal(gen), normal(gen), normal(gen));
                        draw += factor * z;
                    }
                    cp.samples[e * samples_per_point + s] = tf.apply_inverse(draw);
                }
            }
        }
    }
}

/// Rigid update: per cloud, weighted Procrustes of the source points onto the
/// component means with weights α/σ². Sources are the sampled clean points in
/// proposed mode and the observations in baseline mode.
///
/// When a cloud's cross-covariance is rank deficient the previous rotation is
/// kept and only the translation is refit; when all its weights vanish the
/// previous transform is returned unchanged.
inline std::vector<RigidTransform> m_rigid(const std::vector<ObservedCloud>& clouds, const EStepState& state,
                                           const GmmModel& gmm,
                                           const std::vector<RigidTransform>& previous) {
    if (clouds.size() != state.clouds.size() || previous.size() != clouds.size()) {
        throw LengthMismatch("m_rigid: clouds, state and transforms differ in length");
    }
    const bool proposed = state.mode == Mode::proposed_sage;
    if (proposed && state.samples_per_point < 1) {
        throw ValidationError("m_rigid in proposed mode requires sampled clean points");
    }
    std::vector<RigidTransform> out;
    out.reserve(clouds.size());
    for (std::size_t j = 0; j < clouds.size(); ++j) {
        const auto& cp = state.clouds[j];
        WeightedProcrustes acc;
        const int sp = proposed ? state.samples_per_point : 1;
        for (std::size_t i = 0; i < cp.n_points(); ++i) {
            for (std::size_t e = cp.offsets[i]; e < cp.offsets[i + 1]; ++e) {
                const auto& entry = cp.entries[e];
                const double w = entry.responsibility / gmm.variances[entry.component] / sp;
                const Vec3& target = gmm.means[entry.component];
                if (proposed) {
                    for (int s = 0; s < sp; ++s) acc.add(cp.samples[e * sp + s], target, w);
                } else {
                    acc.add(clouds[j].point(i), target, w);
                }
            }
        }
        try {
            out.push_back(acc.solve());
        } catch (const DegenerateConfiguration& ex) {
            if (ex.rank() == 0 && !(acc.total_weight() > 0.0)) {
                out.push_back(previous[j]);
            } else {
                out.push_back(acc.solve_translation(previous[j].rotation()));
            }
        }
    }
    return out;
}

/// GMM update from an E-step computed with the current transforms.
/// μ_k = Σαŷ/Σα and σ_k² = trace(Σ_k)/3 with
/// Σ_k = Σα[(ŷ − μ_k)(ŷ − μ_k)ᵀ + (I − W)σ_k²]/Σα, floored at `variance_floor`.
/// Components with no responsibility mass keep their previous parameters.
inline GmmModel m_gmm(const EStepState& state, const GmmModel& gmm, const RegistrationConfig& config,
                      double variance_floor) {
    const std::size_t k_count = gmm.size();
    std::vector<double> mass(k_count, 0.0);
    std::vector<Vec3> weighted_sum(k_count, Vec3::Zero());
    for (const auto& cp : state.clouds) {
        for (const auto& e : cp.entries) {
            mass[e.component] += e.responsibility;
            weighted_sum[e.component] += e.responsibility * e.denoised;
        }
    }

    GmmModel out = gmm;
    for (std::size_t k = 0; k < k_count; ++k) {
        if (mass[k] > 0.0) out.means[k] = weighted_sum[k] / mass[k];
    }

    std::vector<double> scatter(k_count, 0.0);
    for (const auto& cp : state.clouds) {
        for (const auto& e : cp.entries) {
            const double spread = (e.denoised - out.means[e.component]).squaredNorm() + e.posterior_cov.trace();
            scatter[e.component] += e.responsibility * spread;
        }
    }
    for (std::size_t k = 0; k < k_count; ++k) {
        if (mass[k] > 0.0) out.variances[k] = std::max(scatter[k] / (3.0 * mass[k]), variance_floor);
        else out.variances[k] = std::max(out.variances[k], variance_floor);
    }

    if (!config.fix_weights) {
        double total = 0.0;
        for (double m : mass) total += m;
        if (total > 0.0) {
            const double inlier_mass = 1.0 - gmm.outlier_weight();
            for (std::size_t k = 0; k < k_count; ++k) out.weights[k] = inlier_mass * mass[k] / total;
            out.weights[k_count] = gmm.outlier_weight();
        }
    }
    return out;
}

/// Σ_ji log(Σ_k p_k N(φ(ȳ); μ_k, σ_k²I + RΣ̄Rᵀ) + p_{K+1}/h). The noise term is
/// dropped in baseline mode.
inline double log_likelihood(const std::vector<ObservedCloud>& clouds,
                             const std::vector<RigidTransform>& transforms, const GmmModel& gmm,
                             Mode mode = Mode::proposed_sage) {
    detail::check_inputs(clouds, transforms, gmm);
    const std::size_t k_count = gmm.size();
    std::vector<double> terms(k_count + 1);
    terms[k_count] = detail::log_outlier_term(gmm);
    double total = 0.0;
    for (std::size_t j = 0; j < clouds.size(); ++j) {
        for (std::size_t i = 0; i < clouds[j].size(); ++i) {
            const Point3 x = transforms[j].apply(clouds[j].point(i));
            const Mat3 s = detail::rotated_noise(clouds[j], i, transforms[j], mode);
            for (std::size_t k = 0; k < k_count; ++k) {
                terms[k] = (gmm.weights[k] > 0.0 ? std::log(gmm.weights[k])
                                                 : -std::numeric_limits<double>::infinity()) +
                           component_terms(x, s, gmm.means[k], gmm.variances[k], false).log_density;
            }
            total += log_sum_exp(terms);
        }
    }
    return total;
}

/// Default floor: (1e-4 × diagonal of the transformed data bounding box)².
inline double resolve_variance_floor(const std::vector<ObservedCloud>& clouds,
                                     const std::vector<RigidTransform>& transforms,
                                     const RegistrationConfig& config) {
    if (config.variance_floor) return *config.variance_floor;
    const double d = transformed_bounding_box(clouds, transforms).diagonal();
    const double floor = (1e-4 * d) * (1e-4 * d);
    return floor > 0.0 ? floor : std::numeric_limits<double>::min();
}

/// Volume h of the uniform outlier class: the bounding-box volume, or a cube
/// on the largest extent for flat data.
inline double outlier_volume(const BoundingBox& box) {
    const double vol = box.volume();
    if (vol > 0.0) return vol;
    const double e = std::max(box.extent().maxCoeff(), 1.0);
    return e * e * e;
}

inline double outlier_volume(const std::vector<ObservedCloud>& clouds, const std::vector<RigidTransform>& transforms) {
    return outlier_volume(transformed_bounding_box(clouds, transforms));
}

/// Means: K distinct transformed points drawn uniformly without replacement.
/// Variances: (bounding-box diagonal / 2)². Weights: equal component weights
/// with p_{K+1} = γ/(1+γ). Hull volume: bounding-box volume.
inline GmmModel gmm_init(const std::vector<ObservedCloud>& clouds,
                         const std::vector<RigidTransform>& transforms, const RegistrationConfig& config,
                         Engine& rng) {
    config.validate();
    if (clouds.size() != transforms.size()) throw LengthMismatch("expected one transform per cloud");
    const std::size_t n = total_points(clouds);
    const auto k_count = static_cast<std::size_t>(config.n_components);
    if (n < k_count) {
        throw InsufficientPoints("need at least K = " + std::to_string(k_count) + " points, got " +
                                 std::to_string(n));
    }

    std::vector<Point3> all;
    all.reserve(n);
    for (std::size_t j = 0; j < clouds.size(); ++j) {
        for (const auto& p : clouds[j].points()) all.push_back(transforms[j].apply(p));
    }

    // Partial Fisher-Yates over indices.
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t k = 0; k < k_count; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, n - 1);
        std::swap(idx[k], idx[pick(rng)]);
    }

    const BoundingBox box = bounding_box(all);
    const double half_diag = 0.5 * box.diagonal();
    const double floor = resolve_variance_floor(clouds, transforms, config);

    GmmModel g;
    g.means.reserve(k_count);
    for (std::size_t k = 0; k < k_count; ++k) g.means.push_back(all[idx[k]]);
    g.variances.assign(k_count, std::max(config.initial_variance.value_or(half_diag * half_diag), floor));
    const double gamma = config.outlier_fraction;
    const double inlier = 1.0 / (1.0 + gamma);
    g.weights.assign(k_count, inlier / static_cast<double>(k_count));
    g.weights.push_back(gamma / (1.0 + gamma));
    g.hull_volume = outlier_volume(box);
    return g;
}

// ---------------------------------------------------------------------------
// Iterations and the driver
// ---------------------------------------------------------------------------

struct IterationOutput {
    std::vector<RigidTransform> transforms;
    GmmModel gmm;
    double loglik = 0.0;
};

/// One iteration: E-step → (sample) → M-rigid, then a second E-step with the
/// new transforms → M-GMM, then the log-likelihood at the new parameters.
/// Both modes use this schedule; they differ in the noise term and in whether
/// the rigid step sees sampled clean points or the observations.
inline IterationOutput sage_iteration(const std::vector<ObservedCloud>& clouds,
                                      const std::vector<RigidTransform>& transforms, const GmmModel& gmm,
                                      const RegistrationConfig& config, double variance_floor,
                                      std::uint64_t seed, std::uint64_t iteration) {
    const auto opts = EStepOptions::from(config);
    EStepState first = e_step(clouds, transforms, gmm, opts);
    if (config.mode == Mode::proposed_sage) {
        sample_clean_points(first, transforms, seed, iteration, config.samples_per_point);
    }
    IterationOutput out;
    out.transforms = m_rigid(clouds, first, gmm, transforms);
    first = {};
    const EStepState second = e_step(clouds, out.transforms, gmm, opts);
    out.gmm = m_gmm(second, gmm, config, variance_floor);
    out.loglik = log_likelihood(clouds, out.transforms, out.gmm, config.mode);
    return out;
}

struct LikelihoodTrace {
    Mode mode = Mode::proposed_sage;
    std::vector<double> values;  // values[0] is at the initial parameters
};

struct RegistrationResult {
    std::vector<RigidTransform> transforms;
    GmmModel gmm;
    LikelihoodTrace trace;
    int iterations = 0;
    bool converged = false;
    double variance_floor = 0.0;
    double final_loglik() const { return trace.values.back(); }
};

/// Stopping rule. Baseline: |ΔL|/|L| of consecutive values. Proposed: the
/// same test on the 5-iteration moving average, which damps sampling noise.
inline bool has_converged(const std::vector<double>& values, Mode mode, double tol) {
    if (mode == Mode::baseline_jrmpc) {
        if (values.size() < 2) return false;
        const double cur = values.back();
        const double prev = values[values.size() - 2];
        return std::abs(cur - prev) <= tol * std::abs(cur);
    }
    constexpr std::size_t window = 5;
    if (values.size() < window + 1) return false;
    auto avg = [&](std::size_t end) {
        double s = 0.0;
        for (std::size_t i = end - window; i < end; ++i) s += values[i];
        return s / window;
    };
    const double cur = avg(values.size());
    const double prev = avg(values.size() - 1);
    return std::abs(cur - prev) <= tol * std::abs(cur);
}

/// Full registration from a given initialization of the transforms.
inline RegistrationResult run_registration(const std::vector<ObservedCloud>& clouds,
                                           const std::vector<RigidTransform>& init_transforms,
                                           const RegistrationConfig& config) {
    config.validate();
    if (clouds.size() < 2) throw ValidationError("registration needs at least two clouds");
    if (init_transforms.size() != clouds.size()) throw LengthMismatch("expected one initial transform per cloud");

    RegistrationResult result;
    result.variance_floor = resolve_variance_floor(clouds, init_transforms, config);
    Engine init_rng = make_engine(config.rng_seed, {stream::gmm_init});
    result.gmm = gmm_init(clouds, init_transforms, config, init_rng);
    result.transforms = init_transforms;
    result.trace.mode = config.mode;
    result.trace.values.push_back(log_likelihood(clouds, result.transforms, result.gmm, config.mode));

    for (int it = 1; it <= config.max_iters; ++it) {
        auto step = sage_iteration(clouds, result.transforms, result.gmm, config, result.variance_floor,
                                   config.rng_seed, static_cast<std::uint64_t>(it));
        result.transforms = std::move(step.transforms);
        result.gmm = std::move(step.gmm);
        result.trace.values.push_back(step.loglik);
        result.iterations = it;
        if (has_converged(result.trace.values, config.mode, config.rel_loglik_tol)) {
            result.converged = true;
            break;
        }
    }
    return result;
}

struct RestartSummary {
    RegistrationResult best;
    std::size_t best_index = 0;
    std::vector<double> final_logliks;
};

/// Runs `restarts` independent GMM initializations (seeds derived from
/// config.rng_seed) and keeps the one with the highest final log-likelihood.
inline RestartSummary register_with_restarts(const std::vector<ObservedCloud>& clouds,
                                             const std::vector<RigidTransform>& init_transforms,
                                             const RegistrationConfig& config, int restarts) {
    if (restarts < 1) throw ValidationError("restarts must be >= 1");
    RestartSummary summary;
    for (int r = 0; r < restarts; ++r) {
        RegistrationConfig c = config;
        c.rng_seed = derive_seed(config.rng_seed, {stream::restart, static_cast<std::uint64_t>(r)});
        RegistrationResult res = run_registration(clouds, init_transforms, c);
        summary.final_logliks.push_back(res.final_loglik());
        if (r == 0 || res.final_loglik() > summary.best.final_loglik()) {
            summary.best = std::move(res);
            summary.best_index = static_cast<std::size_t>(r);
        }
    }
    return summary;
}

}  // namespace smlmreg
