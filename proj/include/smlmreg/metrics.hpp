#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "smlmreg/core.hpp"

namespace smlmreg {

/// Geodesic angle between two rotations, arccos((tr(a·bᵀ) − 1)/2) in radians,
/// evaluated as atan2(sin θ, cos θ) so it stays accurate near 0 and π.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
    const Mat3 d = a * b.transpose();
    const double c = (d.trace() - 1.0) / 2.0;
    const double s = 0.5 * Vec3(d(2, 1) - d(1, 2), d(0, 2) - d(2, 0), d(1, 0) - d(0, 1)).norm();
    return std::atan2(s, c);
}

struct ErrorReport {
    Eigen::MatrixXd pairwise_deg;  // M×M, zero diagonal
    double mean_deg = 0.0;         // over unordered pairs i < j
    double std_deg = 0.0;          // population standard deviation over the same pairs
};

struct SymmetrySpec {
    int order = 1;              // cyclic order n; 1 disables the minimization
    Vec3 axis = Vec3::UnitZ();  // symmetry axis in the model frame
};

/// Pairwise rotation error of an estimate against ground truth.
///
/// `truth` holds the acquisition rotations (model frame → cloud frame) and
/// `estimated` the registration rotations (cloud frame → common frame). For
/// each pair, R̂_ij = R̂_iᵀR̂_j is compared with R̃_ij(k) = R̃_i·Rz(k)ᵀ·R̃_jᵀ for
/// every symmetric pose k, keeping min(θ, π − θ) and then the minimum over k.
inline ErrorReport pairwise_error(const std::vector<Mat3>& estimated, const std::vector<Mat3>& truth,
                                  const SymmetrySpec& symmetry = {}) {
    if (estimated.size() != truth.size()) {
        throw LengthMismatch("estimated and true transform lists differ in length");
    }
    if (symmetry.order < 1) throw ValidationError("symmetry order must be >= 1");
    const std::size_t m = estimated.size();

    std::vector<Mat3> sym;
    for (int k = 0; k < symmetry.order; ++k) {
        sym.push_back(rotation_about_axis(symmetry.axis, 2.0 * std::numbers::pi * k / symmetry.order));
    }

    ErrorReport rep;
    rep.pairwise_deg = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    std::vector<double> values;
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i + 1; j < m; ++j) {
            const Mat3 est_ij = estimated[i].transpose() * estimated[j];
            double best = std::numeric_limits<double>::infinity();
            for (const auto& rz : sym) {
                const Mat3 true_ij = truth[i] * rz.transpose() * truth[j].transpose();
                const double theta = rotation_angle_between(est_ij, true_ij);
                best = std::min(best, std::min(theta, std::numbers::pi - theta));
            }
            const double deg = best * 180.0 / std::numbers::pi;
            rep.pairwise_deg(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = deg;
            rep.pairwise_deg(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = deg;
            values.push_back(deg);
        }
    }
    if (!values.empty()) {
        double s = 0.0;
        for (double v : values) s += v;
        rep.mean_deg = s / static_cast<double>(values.size());
        double ss = 0.0;
        for (double v : values) ss += (v - rep.mean_deg) * (v - rep.mean_deg);
        rep.std_deg = std::sqrt(ss / static_cast<double>(values.size()));
    }
    return rep;
}

inline ErrorReport pairwise_error(const std::vector<RigidTransform>& estimated,
                                  const std::vector<RigidTransform>& truth, const SymmetrySpec& symmetry = {}) {
    std::vector<Mat3> e, t;
    for (const auto& x : estimated) e.push_back(x.rotation());
    for (const auto& x : truth) t.push_back(x.rotation());
    return pairwise_error(e, t, symmetry);
}

}  // namespace smlmreg
