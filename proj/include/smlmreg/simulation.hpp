#pragma once

#include <algorithm>
#include <cmath>
#include <iterator>
#include <numeric>
#include <optional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "smlmreg/core.hpp"
#include "smlmreg/io.hpp"
#include "smlmreg/random.hpp"

namespace smlmreg {

struct GroundTruthModel {
    std::string name;
    std::vector<Point3> points;
    int symmetry_order = 1;  // cyclic order about z
};

/// Shape parameters shared by the two C9 models. Lengths are in model units;
/// the barrel spans z ∈ [−length/2, length/2] with the wider end at the bottom.
struct BarrelGeometry {
    double bottom_radius = 4.0;
    double top_radius = 3.0;
    double length = 4.0;
    double tube_angular_step = 0.14;  // radians between consecutive tubes of a triplet
    double tube_radial_step = -0.48;  // radial offset between consecutive tubes of a triplet
    double tube_radius = 0.12;        // cross-section radius of a tube (centriole only)
};

namespace detail {

/// Position of tube `m` of the triplet in sector `s` at normalized height h ∈ [0, 1].
inline Point3 tube_axis_point(const BarrelGeometry& g, int sector, int tube, double h) {
    const double base_angle = 2.0 * std::numbers::pi * sector / 9.0;
    const double radius = g.bottom_radius + (g.top_radius - g.bottom_radius) * h + g.tube_radial_step * tube;
    const double angle = base_angle + g.tube_angular_step * tube;
    return {radius * std::cos(angle), radius * std::sin(angle), -0.5 * g.length + g.length * h};
}

}  // namespace detail

/// 54 points: 9 triplets (C9 about z), each tube represented by its bottom and
/// top end.
inline GroundTruthModel generate_triplets(const BarrelGeometry& g = {}) {
    GroundTruthModel m;
    m.name = "triplets";
    m.symmetry_order = 9;
    for (int s = 0; s < 9; ++s) {
        for (int t = 0; t < 3; ++t) {
            m.points.push_back(detail::tube_axis_point(g, s, t, 0.0));
            m.points.push_back(detail::tube_axis_point(g, s, t, 1.0));
        }
    }
    return m;
}

/// Points sampled uniformly on 27 tube surfaces (9 triplets × 3 tubes) laid on
/// a tapered barrel. The tube cross-section is taken in the xy plane.
inline GroundTruthModel generate_centriole(int n_points = 2000, std::uint64_t seed = 0,
                                           const BarrelGeometry& g = {}) {
    if (n_points < 54) throw ValidationError("centriole model needs at least 54 points");
    GroundTruthModel m;
    m.name = "centriole";
    m.symmetry_order = 9;
    Engine rng = make_engine(seed, {stream::simulation, 0xce});
    std::uniform_int_distribution<int> pick_tube(0, 26);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int n = 0; n < n_points; ++n) {
        const int tube = pick_tube(rng);
        const double h = unit(rng);
        const double phi = 2.0 * std::numbers::pi * unit(rng);
        const Point3 axis = detail::tube_axis_point(g, tube / 3, tube % 3, h);
        m.points.push_back(axis + g.tube_radius * Point3(std::cos(phi), std::sin(phi), 0.0));
    }
    return m;
}

/// Samples n_points from a point or mesh file. With n_points ≤ vertex count the
/// vertices are subsampled uniformly without replacement (order preserved);
/// with more requested points and a triangle mesh, points are drawn
/// area-weighted on the surface.
inline GroundTruthModel load_mesh_model(const PlyMesh& mesh, int n_points, std::uint64_t seed = 0,
                                        std::string name = "mesh") {
    GroundTruthModel m;
    m.name = std::move(name);
    m.symmetry_order = 1;
    if (n_points < 1) throw ValidationError("n_points must be >= 1");
    const auto n = static_cast<std::size_t>(n_points);
    const std::size_t nv = mesh.vertices.size();
    Engine rng = make_engine(seed, {stream::mesh_sampling});
    if (n <= nv) {
        if (n == nv) {
            m.points = mesh.vertices;
            return m;
        }
        std::vector<std::size_t> idx(nv);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::vector<std::size_t> chosen;
        std::sample(idx.begin(), idx.end(), std::back_inserter(chosen), n, rng);
        for (auto i : chosen) m.points.push_back(mesh.vertices[i]);
        return m;
    }
    if (mesh.triangles.empty()) {
        throw TooFewPoints("file has " + std::to_string(nv) + " points but " + std::to_string(n) +
                           " were requested");
    }
    std::vector<double> areas;
    for (const auto& t : mesh.triangles) {
        const Vec3 a = mesh.vertices[t[1]] - mesh.vertices[t[0]];
        const Vec3 b = mesh.vertices[t[2]] - mesh.vertices[t[0]];
        areas.push_back(0.5 * a.cross(b).norm());
    }
    std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t s = 0; s < n; ++s) {
        const auto& t = mesh.triangles[pick(rng)];
        double u = unit(rng), v = unit(rng);
        if (u + v > 1.0) {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        const Vec3& p0 = mesh.vertices[t[0]];
        m.points.push_back(p0 + u * (mesh.vertices[t[1]] - p0) + v * (mesh.vertices[t[2]] - p0));
    }
    return m;
}

inline GroundTruthModel load_mesh_model(const std::string& path, int n_points, std::uint64_t seed = 0) {
    return load_mesh_model(parse_ply_mesh(path), n_points, seed, "mesh");
}

/// How the diagonal entries (σ, σ, rσ) of the acquisition noise are read.
enum class NoiseInterpretation { variance, std_dev };

struct AcquisitionSpec {
    double sigma = 0.01;
    double r = 1.0;
    std::optional<double> sigma_spatial_std;  // default 0.2·σ
    double outlier_fraction = 0.10;
    int n_views = 5;
    std::uint64_t rng_seed = 0;
    NoiseInterpretation interpretation = NoiseInterpretation::variance;

    double spatial_std() const { return sigma_spatial_std.value_or(0.2 * sigma); }

    void validate() const {
        if (!(sigma >= 0.0)) throw ValidationError("sigma must be >= 0");
        if (!(r >= 1.0)) throw ValidationError("r must be >= 1");
        if (!(spatial_std() >= 0.0)) throw ValidationError("sigma_spatial_std must be >= 0");
        if (!(outlier_fraction >= 0.0 && outlier_fraction < 1.0)) {
            throw ValidationError("outlier_fraction must lie in [0, 1)");
        }
        if (n_views < 1) throw ValidationError("n_views must be >= 1");
    }
};

struct SimulatedViews {
    std::vector<ObservedCloud> clouds;
    std::vector<RigidTransform> true_transforms;  // model frame → acquisition frame
    std::vector<std::vector<bool>> outlier_mask;
    std::vector<std::vector<Point3>> clean_points;  // before the noise draw
};

/// Uniformly distributed rotation (normalized Gaussian quaternion).
inline Mat3 random_rotation(Engine& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    return q.toRotationMatrix();
}

/// Per view: rotate the model, replace a fraction of its points by uniform draws
/// in the rotated model's bounding box, then perturb every point with
/// N(0, diag(s, s, r·s)) where s ~ N(σ, std²) clamped to ≥ σ/10. The recorded
/// covariance is exactly the generating one.
inline SimulatedViews simulate_views(const GroundTruthModel& model, const AcquisitionSpec& spec) {
    spec.validate();
    if (model.points.empty()) throw TooFewPoints("model has no points");
    const std::size_t n = model.points.size();
    const auto n_out = static_cast<std::size_t>(std::llround(spec.outlier_fraction * static_cast<double>(n)));
    SimulatedViews out;
    for (int j = 0; j < spec.n_views; ++j) {
        Engine rng = make_engine(spec.rng_seed, {stream::simulation, static_cast<std::uint64_t>(j)});
        const Mat3 rot = random_rotation(rng);
        std::vector<Point3> pts;
        pts.reserve(n);
        for (const auto& p : model.points) pts.push_back(rot * p);
        const BoundingBox box = bounding_box(pts);

        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t k = 0; k < n_out; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, n - 1);
            std::swap(idx[k], idx[pick(rng)]);
        }
        std::vector<bool> mask(n, false);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (std::size_t k = 0; k < n_out; ++k) {
            mask[idx[k]] = true;
            pts[idx[k]] = box.lo + Vec3(unit(rng), unit(rng), unit(rng)).cwiseProduct(box.extent());
        }

        std::normal_distribution<double> level(spec.sigma, spec.spatial_std());
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::vector<Point3> noisy;
        std::vector<CovMat3> covs;
        noisy.reserve(n);
        covs.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double s = std::max(level(rng), spec.sigma / 10.0);
            CovMat3 c = spec.interpretation == NoiseInterpretation::variance
                            ? CovMat3::diagonal(s, s, spec.r * s)
                            : CovMat3::diagonal(s * s, s * s, spec.r * spec.r * s * s);
            const Vec3 z(gauss(rng), gauss(rng), gauss(rng));
            noisy.push_back(pts[i] + Vec3(std::sqrt(c.xx()), std::sqrt(c.yy()), std::sqrt(c.zz())).cwiseProduct(z));
            covs.push_back(c);
        }
        out.clouds.emplace_back("view" + std::to_string(j), std::move(noisy), std::move(covs));
        out.true_transforms.emplace_back(rot, Vec3::Zero());
        out.outlier_mask.push_back(std::move(mask));
        out.clean_points.push_back(std::move(pts));
    }
    return out;
}

/// Initial registration transforms: the exact alignment R̃ᵀ with its ZYX Euler
/// angles perturbed by independent N(0, std²) draws (degrees). std = 0 returns
/// the exact alignment.
inline std::vector<RigidTransform> perturb_rotations(const std::vector<RigidTransform>& truth, double std_degrees,
                                                     std::uint64_t seed) {
    if (!(std_degrees >= 0.0)) throw ValidationError("perturbation std must be >= 0");
    std::vector<RigidTransform> out;
    const double std_rad = std_degrees * std::numbers::pi / 180.0;
    for (std::size_t j = 0; j < truth.size(); ++j) {
        const Mat3 exact = truth[j].rotation().transpose();
        if (std_degrees == 0.0) {
            out.emplace_back(exact, Vec3::Zero());
            continue;
        }
        Engine rng = make_engine(seed, {stream::perturbation, j});
        std::normal_distribution<double> n(0.0, std_rad);
        const Vec3 euler = exact.eulerAngles(2, 1, 0);
        const double a = euler(0) + n(rng);
        const double b = euler(1) + n(rng);
        const double c = euler(2) + n(rng);
        const Mat3 r = (Eigen::AngleAxisd(a, Vec3::UnitZ()) * Eigen::AngleAxisd(b, Vec3::UnitY()) *
                        Eigen::AngleAxisd(c, Vec3::UnitX()))
                           .toRotationMatrix();
        out.emplace_back(validate_rotation(r, RotationRepair::nearest), Vec3::Zero());
    }
    return out;
}

}  // namespace smlmreg
