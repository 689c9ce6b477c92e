#pragma once

#include <span>
#include <vector>

#include <Eigen/SVD>

#include "smlmreg/core.hpp"

namespace smlmreg {

struct Correspondence {
    Point3 source;
    Point3 target;
    double weight = 1.0;
};

/// Weighted least-squares rigid alignment, accumulated one pair at a time.
///
/// Minimizes Σ w‖R·s + t − m‖² over R ∈ SO(3), t ∈ R³. Moments are kept
/// relative to the first source/target seen, which keeps the cross-covariance
/// accurate when the data sit far from the origin.
class WeightedProcrustes {
public:
    void add(const Point3& source, const Point3& target, double weight) {
        if (!(weight >= 0.0) || !std::isfinite(weight)) {
            throw ValidationError("correspondence weight must be finite and non-negative");
        }
        if (weight == 0.0) return;
        if (!anchored_) {
            src_anchor_ = source;
            dst_anchor_ = target;
            anchored_ = true;
        }
        const Vec3 s = source - src_anchor_;
        const Vec3 m = target - dst_anchor_;
        w_ += weight;
        ws_ += weight * s;
        wm_ += weight * m;
        wsm_ += weight * s * m.transpose();
    }

    void add(const Correspondence& c) { add(c.source, c.target, c.weight); }

    double total_weight() const noexcept { return w_; }

    Point3 source_centroid() const { return src_anchor_ + ws_ / w_; }
    Point3 target_centroid() const { return dst_anchor_ + wm_ / w_; }

    /// Σ w (s − s̄)(m − m̄)ᵀ
    Mat3 cross_covariance() const {
        return wsm_ - ws_ * wm_.transpose() / w_;
    }

    /// Closed-form optimum. Throws DegenerateConfiguration when the total weight
    /// vanishes or the cross-covariance has rank < 2.
    RigidTransform solve() const {
        if (!(w_ > 0.0)) throw DegenerateConfiguration("all correspondence weights are zero", 0);
        const Mat3 h = cross_covariance();
        Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
        const Vec3 sv = svd.singularValues();
        const double tol = 1e-12 * std::max(sv(0), std::numeric_limits<double>::min());
        const int rank = (sv(0) > 0.0) + (sv(1) > tol) + (sv(2) > tol);
        if (rank < 2) {
            throw DegenerateConfiguration("cross-covariance rank " + std::to_string(rank) +
                                              " leaves the rotation unidentifiable",
                                          rank);
        }
        const Mat3 u = svd.matrixU();
        const Mat3 v = svd.matrixV();
        Mat3 d = Mat3::Identity();
        d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
        Mat3 r = v * d * u.transpose();
        r = validate_rotation(r, RotationRepair::nearest);
        return RigidTransform(r, target_centroid() - r * source_centroid());
    }

    /// Optimal translation for a fixed rotation.
    RigidTransform solve_translation(const Mat3& rotation) const {
        if (!(w_ > 0.0)) throw DegenerateConfiguration("all correspondence weights are zero", 0);
        return RigidTransform(rotation, target_centroid() - rotation * source_centroid());
    }

private:
    bool anchored_ = false;
    Point3 src_anchor_ = Point3::Zero();
    Point3 dst_anchor_ = Point3::Zero();
    double w_ = 0.0;
    Vec3 ws_ = Vec3::Zero();
    Vec3 wm_ = Vec3::Zero();
    Mat3 wsm_ = Mat3::Zero();
};

inline RigidTransform weighted_procrustes(std::span<const Correspondence> pairs) {
    WeightedProcrustes acc;
    for (const auto& c : pairs) acc.add(c);
    return acc.solve();
}

/// Σ w‖R·s + t − m‖²
inline double procrustes_objective(std::span<const Correspondence> pairs, const Mat3& rotation,
                                   const Vec3& translation) {
    double f = 0.0;
    for (const auto& c : pairs) f += c.weight * (rotation * c.source + translation - c.target).squaredNorm();
    return f;
}

inline double procrustes_objective(std::span<const Correspondence> pairs, const RigidTransform& t) {
    return procrustes_objective(pairs, t.rotation(), t.translation());
}

}  // namespace smlmreg
