#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "smlmreg/errors.hpp"

namespace smlmreg {

using Point3 = Eigen::Vector3d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline bool is_finite(const Point3& p) {
    return std::isfinite(p.x()) && std::isfinite(p.y()) && std::isfinite(p.z());
}

constexpr double kRotationTolerance = 1e-9;
constexpr double kPsdJitterFraction = 1e-12;

// ---------------------------------------------------------------------------
// CovMat3
// ---------------------------------------------------------------------------

/// Symmetric positive semi-definite 3x3 matrix stored as its upper triangle.
/// Entries are variances (squared length units).
class CovMat3 {
public:
    CovMat3() = default;

    /// Unchecked construction from the six unique entries.
    static CovMat3 from_entries(double xx, double yy, double zz,
                                double xy = 0.0, double xz = 0.0, double yz = 0.0) {
        CovMat3 c;
        c.e_ = {xx, yy, zz, xy, xz, yz};
        return c;
    }

    static CovMat3 diagonal(double xx, double yy, double zz) {
        return from_entries(xx, yy, zz);
    }

    static CovMat3 isotropic(double v) { return diagonal(v, v, v); }

    static CovMat3 zero() { return CovMat3{}; }

    /// Takes the symmetric part of m; no PSD check.
    static CovMat3 from_matrix(const Mat3& m) {
        return from_entries(m(0, 0), m(1, 1), m(2, 2),
                            0.5 * (m(0, 1) + m(1, 0)),
                            0.5 * (m(0, 2) + m(2, 0)),
                            0.5 * (m(1, 2) + m(2, 1)));
    }

    /// Builds and checks positive semi-definiteness; throws NotPSD.
    static CovMat3 checked(double xx, double yy, double zz,
                           double xy = 0.0, double xz = 0.0, double yz = 0.0) {
        CovMat3 c = from_entries(xx, yy, zz, xy, xz, yz);
        if (!c.is_psd()) {
            throw NotPSD("covariance matrix is not positive semi-definite");
        }
        return c;
    }

    double xx() const noexcept { return e_[0]; }
    double yy() const noexcept { return e_[1]; }
    double zz() const noexcept { return e_[2]; }
    double xy() const noexcept { return e_[3]; }
    double xz() const noexcept { return e_[4]; }
    double yz() const noexcept { return e_[5]; }

    /// Six unique entries in the order xx, yy, zz, xy, xz, yz.
    const std::array<double, 6>& entries() const noexcept { return e_; }

    Mat3 matrix() const {
        Mat3 m;
        m << e_[0], e_[3], e_[4],
             e_[3], e_[1], e_[5],
             e_[4], e_[5], e_[2];
        return m;
    }

    double trace() const noexcept { return e_[0] + e_[1] + e_[2]; }

    bool is_zero() const noexcept {
        return std::all_of(e_.begin(), e_.end(), [](double v) { return v == 0.0; });
    }

    /// Cholesky with a diagonal jitter of 1e-12 of the trace.
    bool is_psd() const {
        for (double v : e_) {
            if (!std::isfinite(v)) return false;
        }
        const double tr = trace();
        if (tr < 0.0) return false;
        const double jitter = std::max(kPsdJitterFraction * tr, std::numeric_limits<double>::min());
        Eigen::LLT<Mat3> llt(matrix() + jitter * Mat3::Identity());
        return llt.info() == Eigen::Success;
    }

    friend bool operator==(const CovMat3&, const CovMat3&) = default;

private:
    std::array<double, 6> e_{0, 0, 0, 0, 0, 0};
};

// ---------------------------------------------------------------------------
// ObservedCloud
// ---------------------------------------------------------------------------

/// One acquisition: points with their known per-point noise covariance.
class ObservedCloud {
public:
    ObservedCloud(std::string id, std::vector<Point3> points, std::vector<CovMat3> noise_covs)
        : id_(std::move(id)), points_(std::move(points)), covs_(std::move(noise_covs)) {
        if (points_.size() != covs_.size()) {
            throw LengthMismatch("cloud '" + id_ + "': points and noise covariances differ in length");
        }
        if (points_.empty()) {
            throw TooFewPoints("cloud '" + id_ + "' is empty");
        }
        for (std::size_t i = 0; i < points_.size(); ++i) {
            if (!is_finite(points_[i])) {
                throw ValidationError("cloud '" + id_ + "': non-finite point at index " + std::to_string(i));
            }
        }
    }

    const std::string& id() const noexcept { return id_; }
    std::size_t size() const noexcept { return points_.size(); }
    const std::vector<Point3>& points() const noexcept { return points_; }
    const std::vector<CovMat3>& noise_covs() const noexcept { return covs_; }
    const Point3& point(std::size_t i) const { return points_[i]; }
    const CovMat3& noise(std::size_t i) const { return covs_[i]; }

private:
    std::string id_;
    std::vector<Point3> points_;
    std::vector<CovMat3> covs_;
};

inline std::size_t total_points(const std::vector<ObservedCloud>& clouds) {
    std::size_t n = 0;
    for (const auto& c : clouds) n += c.size();
    return n;
}

// ---------------------------------------------------------------------------
// Rotations and rigid transforms
// ---------------------------------------------------------------------------

enum class RotationRepair { reject, nearest };

inline Mat3 nearest_rotation(const Mat3& m) {
    Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Mat3 u = svd.matrixU();
    const Mat3 v = svd.matrixV();
    Mat3 d = Mat3::Identity();
    d(2, 2) = (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    return u * d * v.transpose();
}

inline bool is_rotation(const Mat3& m, double tol = kRotationTolerance) {
    if (!m.allFinite()) return false;
    const double ortho = (m.transpose() * m - Mat3::Identity()).norm();
    return ortho <= tol && std::abs(m.determinant() - 1.0) <= tol;
}

/// Returns m when it is a proper rotation within tolerance. Otherwise either
/// throws NotARotation or projects onto SO(3) by polar decomposition.
inline Mat3 validate_rotation(const Mat3& m, RotationRepair repair = RotationRepair::reject) {
    if (is_rotation(m)) return m;
    if (repair == RotationRepair::nearest && m.allFinite() && m.determinant() > 0.0) {
        return nearest_rotation(m);
    }
    const double ortho = m.allFinite() ? (m.transpose() * m - Mat3::Identity()).norm() : INFINITY;
    throw NotARotation("matrix is not a rotation (orthogonality residual " + std::to_string(ortho) +
                       ", det " + std::to_string(m.determinant()) + ")");
}

class RigidTransform {
public:
    RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

    RigidTransform(const Mat3& rotation, const Vec3& translation)
        : rotation_(validate_rotation(rotation)), translation_(translation) {
        if (!translation_.allFinite()) throw ValidationError("translation is not finite");
    }

    static RigidTransform identity() { return {}; }

    const Mat3& rotation() const noexcept { return rotation_; }
    const Vec3& translation() const noexcept { return translation_; }

    Point3 apply(const Point3& p) const { return rotation_ * p + translation_; }

    /// x -> R^T (x - t)
    Point3 apply_inverse(const Point3& p) const { return rotation_.transpose() * (p - translation_); }

    /// (this ∘ other)(x) = this(other(x))
    RigidTransform compose(const RigidTransform& other) const {
        RigidTransform out;
        out.rotation_ = rotation_ * other.rotation_;
        out.translation_ = rotation_ * other.translation_ + translation_;
        return out;
    }

    RigidTransform inverse() const {
        RigidTransform out;
        out.rotation_ = rotation_.transpose();
        out.translation_ = -(rotation_.transpose() * translation_);
        return out;
    }

private:
    Mat3 rotation_;
    Vec3 translation_;
};

// ---------------------------------------------------------------------------
// GMM with uniform outlier class
// ---------------------------------------------------------------------------

/// K isotropic Gaussian components plus a uniform outlier class of volume h.
/// weights holds K+1 entries, the last one being the outlier mass.
struct GmmModel {
    std::vector<Vec3> means;
    std::vector<double> variances;
    std::vector<double> weights;
    double hull_volume = 1.0;

    std::size_t size() const noexcept { return means.size(); }
    double outlier_weight() const { return weights.back(); }

    void validate(double variance_floor = 0.0) const {
        const std::size_t k = means.size();
        if (k == 0) throw ValidationError("GMM has no components");
        if (variances.size() != k || weights.size() != k + 1) {
            throw LengthMismatch("GMM arrays have inconsistent lengths");
        }
        if (!(hull_volume > 0.0) || !std::isfinite(hull_volume)) {
            throw ValidationError("GMM hull volume must be positive");
        }
        double sum = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("GMM weight is negative or not finite");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-12) throw ValidationError("GMM weights do not sum to one");
        for (double v : variances) {
            if (!(v > 0.0) || v < variance_floor || !std::isfinite(v)) {
                throw ValidationError("GMM variance below floor or not positive");
            }
        }
        for (const auto& m : means) {
            if (!m.allFinite()) throw ValidationError("GMM mean is not finite");
        }
    }
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Mode { proposed_sage, baseline_jrmpc };

inline const char* to_string(Mode m) {
    return m == Mode::proposed_sage ? "proposed_sage" : "baseline_jrmpc";
}

inline Mode parse_mode(const std::string& s) {
    if (s == "proposed_sage" || s == "proposed" || s == "sage") return Mode::proposed_sage;
    if (s == "baseline_jrmpc" || s == "baseline" || s == "jrmpc") return Mode::baseline_jrmpc;
    throw ValidationError("unknown mode '" + s + "'");
}

struct RegistrationConfig {
    int n_components = 54;
    double outlier_fraction = 0.1;  // gamma = p_{K+1} / (K p_1)
    int max_iters = 100;
    double rel_loglik_tol = 1e-6;
    std::uint64_t rng_seed = 0;
    Mode mode = Mode::proposed_sage;
    int samples_per_point = 1;                 // ignored in baseline mode
    std::optional<double> variance_floor;      // default (1e-4 * bbox diagonal)^2
    std::optional<double> initial_variance;    // default (bbox diagonal / 2)^2
    bool fix_weights = true;
    std::size_t dense_budget = 5'000'000;      // K * N above which tiny responsibilities are dropped
    double truncation_threshold = 1e-12;

    void validate() const {
        if (n_components < 1) throw ValidationError("n_components must be >= 1");
        if (!(outlier_fraction >= 0.0 && outlier_fraction < 1.0)) {
            throw ValidationError("outlier_fraction must lie in [0, 1)");
        }
        if (max_iters < 1) throw ValidationError("max_iters must be >= 1");
        if (!(rel_loglik_tol >= 0.0)) throw ValidationError("rel_loglik_tol must be >= 0");
        if (mode == Mode::proposed_sage && samples_per_point < 1) {
            throw ValidationError("samples_per_point must be >= 1");
        }
        if (variance_floor && !(*variance_floor > 0.0)) {
            throw ValidationError("variance_floor must be positive");
        }
        if (initial_variance && !(*initial_variance > 0.0)) {
            throw ValidationError("initial_variance must be positive");
        }
    }
};

// ---------------------------------------------------------------------------
// Small geometry helpers shared by several modules
// ---------------------------------------------------------------------------

struct BoundingBox {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());

    void extend(const Point3& p) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    bool empty() const { return !(lo.x() <= hi.x()); }
    Vec3 extent() const { return empty() ? Vec3::Zero() : Vec3(hi - lo); }
    double diagonal() const { return extent().norm(); }
    double volume() const {
        const Vec3 e = extent();
        return e.x() * e.y() * e.z();
    }
    bool contains(const Point3& p, double slack = 0.0) const {
        return (p.array() >= lo.array() - slack).all() && (p.array() <= hi.array() + slack).all();
    }
};

inline BoundingBox bounding_box(const std::vector<Point3>& pts) {
    BoundingBox b;
    for (const auto& p : pts) b.extend(p);
    return b;
}

inline BoundingBox transformed_bounding_box(const std::vector<ObservedCloud>& clouds,
                                            const std::vector<RigidTransform>& transforms) {
    BoundingBox b;
    for (std::size_t j = 0; j < clouds.size(); ++j) {
        for (const auto& p : clouds[j].points()) b.extend(transforms[j].apply(p));
    }
    return b;
}

inline Mat3 rotation_about_axis(const Vec3& axis, double angle) {
    return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

inline Mat3 rotation_z(double angle) { return rotation_about_axis(Vec3::UnitZ(), angle); }

}  // namespace smlmreg
