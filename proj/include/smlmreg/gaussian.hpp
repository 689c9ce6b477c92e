#pragma once

#include <cmath>
#include <numbers>

#include <Eigen/Cholesky>

#include "smlmreg/core.hpp"

namespace smlmreg {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Returns R·Σ·Rᵀ (the noise covariance expressed in the registered frame).
inline CovMat3 rotate_covariance(const CovMat3& cov, const Mat3& rotation) {
    return CovMat3::from_matrix(rotation * cov.matrix() * rotation.transpose());
}

struct GaussianDensity {
    Vec3 mean = Vec3::Zero();
    Mat3 cov = Mat3::Identity();
};

namespace detail {

/// Cholesky of a covariance that must be positive definite; retries once with
/// a 1e-12-of-trace jitter before giving up.
inline Eigen::LLT<Mat3> checked_llt(const Mat3& cov) {
    Eigen::LLT<Mat3> llt(cov);
    if (llt.info() == Eigen::Success) return llt;
    const double jitter = kPsdJitterFraction * std::abs(cov.trace());
    if (jitter > 0.0 && std::isfinite(jitter)) {
        llt.compute(cov + jitter * Mat3::Identity());
        if (llt.info() == Eigen::Success) return llt;
    }
    throw SingularCovariance("covariance is not positive definite");
}

inline double logpdf_from_llt(const Vec3& diff, const Eigen::LLT<Mat3>& llt) {
    const Mat3& l = llt.matrixLLT();
    const Vec3 z = llt.matrixL().solve(diff);
    const double log_det = 2.0 * (std::log(l(0, 0)) + std::log(l(1, 1)) + std::log(l(2, 2)));
    return -0.5 * (3.0 * kLog2Pi + log_det + z.squaredNorm());
}

}  // namespace detail

/// log N(x; mean, cov), evaluated through a Cholesky factor.
inline double gaussian_logpdf(const Point3& x, const GaussianDensity& g) {
    return detail::logpdf_from_llt(x - g.mean, detail::checked_llt(g.cov));
}

/// Per-component quantities for one observed point already mapped into the
/// registered frame: x = φ(ȳ) and S = R Σ̄ Rᵀ.
struct ComponentTerms {
    double log_density = 0.0;  // log N(x; μ, σ²I + S)
    Mat3 gain = Mat3::Identity();             // W = σ²(σ²I + S)⁻¹
    Vec3 denoised = Vec3::Zero();             // ŷ = W(x − μ) + μ
    Mat3 posterior_cov = Mat3::Zero();        // (I − W)σ²
};

/// Evaluates the marginal density and, when requested, the Gaussian posterior of
/// the clean point under component (μ, σ²I). One Cholesky factorization serves both.
inline ComponentTerms component_terms(const Point3& x, const Mat3& rotated_noise,
                                      const Vec3& mu, double sigma2, bool with_posterior) {
    Mat3 total = rotated_noise;
    total.diagonal().array() += sigma2;
    const auto llt = detail::checked_llt(total);
    ComponentTerms out;
    const Vec3 diff = x - mu;
    out.log_density = detail::logpdf_from_llt(diff, llt);
    if (with_posterior) {
        // (σ²I + S)⁻¹ commutes with S, so both products below are symmetric.
        out.gain = sigma2 * llt.solve(Mat3::Identity());
        out.gain = 0.5 * (out.gain + out.gain.transpose()).eval();
        out.denoised = out.gain * diff + mu;
        out.posterior_cov = sigma2 * llt.solve(rotated_noise);
        out.posterior_cov = 0.5 * (out.posterior_cov + out.posterior_cov.transpose()).eval();
    }
    return out;
}

/// log of N(φ(ȳ); μ, σ²I + RΣ̄Rᵀ), the component density with the clean point
/// integrated out.
inline double log_marginal_component_density(const Point3& y_obs, const CovMat3& noise,
                                             const RigidTransform& t, const Vec3& mu, double sigma2) {
    if (!(sigma2 > 0.0)) throw SingularCovariance("component variance must be positive");
    const Mat3 s = rotate_covariance(noise, t.rotation()).matrix();
    return component_terms(t.apply(y_obs), s, mu, sigma2, false).log_density;
}

inline double marginal_component_density(const Point3& y_obs, const CovMat3& noise,
                                         const RigidTransform& t, const Vec3& mu, double sigma2) {
    return std::exp(log_marginal_component_density(y_obs, noise, t, mu, sigma2));
}

struct PosteriorGain {
    Mat3 gain;           // W
    Point3 denoised;     // ŷ
    Mat3 posterior_cov;  // (I − W)σ²
};

/// Posterior of the clean registered point given the observation and one
/// component: mean ŷ and covariance (I − W)σ².
inline PosteriorGain posterior_gain_and_mean(const Point3& y_obs, const CovMat3& noise,
                                             const RigidTransform& t, const Vec3& mu, double sigma2) {
    if (!(sigma2 > 0.0)) throw SingularCovariance("component variance must be positive");
    const Mat3 s = rotate_covariance(noise, t.rotation()).matrix();
    const auto terms = component_terms(t.apply(y_obs), s, mu, sigma2, true);
    return {terms.gain, terms.denoised, terms.posterior_cov};
}

/// Numerically stable log(Σ exp(v)).
template <typename Range>
double log_sum_exp(const Range& values) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : values) mx = std::max(mx, v);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double v : values) s += std::exp(v - mx);
    return mx + std::log(s);
}

}  // namespace smlmreg
