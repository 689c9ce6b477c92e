#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "smlmreg/metrics.hpp"
#include "smlmreg/simulation.hpp"

using namespace smlmreg;

namespace {

// Smallest distance from p to any point of the set.
double nearest(const std::vector<Point3>& set, const Point3& p) {
    double best = INFINITY;
    for (const auto& q : set) best = std::min(best, (q - p).norm());
    return best;
}

}  // namespace

TEST(Triplets, FiftyFourPointsWithC9Symmetry) {
    const auto m = generate_triplets();
    ASSERT_EQ(m.points.size(), 54u);
    EXPECT_EQ(m.symmetry_order, 9);
    for (int k = 1; k < 9; ++k) {
        const Mat3 rz = rotation_z(2.0 * std::numbers::pi * k / 9.0);
        for (const auto& p : m.points) EXPECT_LT(nearest(m.points, rz * p), 1e-12);
    }
    Vec3 c = Vec3::Zero();
    for (const auto& p : m.points) c += p;
    c /= 54.0;
    EXPECT_LT(c.head<2>().norm(), 1e-12);
}

TEST(Centriole, DefaultSizeAndSectorBalance) {
    const auto m = generate_centriole();
    ASSERT_EQ(m.points.size(), 2000u);
    EXPECT_EQ(m.symmetry_order, 9);
    std::vector<int> hist(9, 0);
    for (const auto& p : m.points) {
        double a = std::atan2(p.y(), p.x());
        if (a < 0) a += 2.0 * std::numbers::pi;
        // Sector s spans a wedge starting slightly before 2πs/9.
        const int s = static_cast<int>(std::floor((a + std::numbers::pi / 9.0) / (2.0 * std::numbers::pi / 9.0))) % 9;
        ++hist[s];
    }
    // Multinomial with p = 1/9: std ≈ 14; allow 5 std.
    for (int h : hist) EXPECT_NEAR(h, 2000.0 / 9.0, 70.0);
}

TEST(Centriole, SeedDeterminism) {
    EXPECT_EQ(generate_centriole(500, 3).points, generate_centriole(500, 3).points);
    EXPECT_NE(generate_centriole(500, 3).points, generate_centriole(500, 4).points);
    EXPECT_THROW(generate_centriole(10), ValidationError);
}

TEST(MeshModel, SubsampleAndSurfaceSampling) {
    PlyMesh mesh;
    mesh.vertices = {Point3(0, 0, 0), Point3(1, 0, 0), Point3(0, 1, 0), Point3(0, 0, 1)};
    mesh.triangles = {{0, 1, 2}, {0, 1, 3}};
    EXPECT_EQ(load_mesh_model(mesh, 4).points, mesh.vertices);

    const auto sub = load_mesh_model(mesh, 3, 1);
    ASSERT_EQ(sub.points.size(), 3u);
    std::set<std::array<double, 3>> distinct;
    for (const auto& p : sub.points) distinct.insert({p.x(), p.y(), p.z()});
    EXPECT_EQ(distinct.size(), 3u);

    const auto dense = load_mesh_model(mesh, 500, 2);
    ASSERT_EQ(dense.points.size(), 500u);
    for (const auto& p : dense.points) {
        // Every sample lies on one of the two faces.
        const bool on_xy = std::abs(p.z()) < 1e-15 && p.x() >= -1e-15 && p.y() >= -1e-15 && p.x() + p.y() <= 1 + 1e-12;
        const bool on_xz = std::abs(p.y()) < 1e-15 && p.x() >= -1e-15 && p.z() >= -1e-15 && p.x() + p.z() <= 1 + 1e-12;
        EXPECT_TRUE(on_xy || on_xz);
    }

    PlyMesh cloud_only;
    cloud_only.vertices = mesh.vertices;
    EXPECT_THROW(load_mesh_model(cloud_only, 10), TooFewPoints);
}

TEST(Simulate, OutlierCountPerView) {
    GroundTruthModel m = generate_centriole(2000, 1);
    AcquisitionSpec spec;
    spec.rng_seed = 4;
    const auto sim = simulate_views(m, spec);
    ASSERT_EQ(sim.clouds.size(), 5u);
    for (const auto& mask : sim.outlier_mask) EXPECT_EQ(std::count(mask.begin(), mask.end(), true), 200);
}

TEST(Simulate, IsotropicEqualNoiseWhenRIsOneAndNoSpread) {
    AcquisitionSpec spec;
    spec.r = 1.0;
    spec.sigma_spatial_std = 0.0;
    spec.sigma = 0.02;
    const auto sim = simulate_views(generate_triplets(), spec);
    for (const auto& c : sim.clouds) {
        for (const auto& cov : c.noise_covs()) EXPECT_EQ(cov, CovMat3::isotropic(0.02));
    }
}

TEST(Simulate, NoiseFreeGivesRotatedCopies) {
    AcquisitionSpec spec;
    spec.sigma = 0.0;
    spec.outlier_fraction = 0.0;
    spec.rng_seed = 8;
    const auto m = generate_triplets();
    const auto sim = simulate_views(m, spec);
    for (std::size_t j = 0; j < sim.clouds.size(); ++j) {
        for (std::size_t i = 0; i < m.points.size(); ++i) {
            EXPECT_EQ(sim.clouds[j].point(i), sim.true_transforms[j].apply(m.points[i]));
        }
    }
}

TEST(Simulate, NoiseMomentsFollowCovariance) {
    // Pool normalized residuals over many points: they should be standard normal.
    AcquisitionSpec spec;
    spec.sigma = 0.04;
    spec.r = 4.0;
    spec.outlier_fraction = 0.0;
    spec.n_views = 4;
    spec.rng_seed = 9;
    const auto m = generate_centriole(3000, 2);
    const auto sim = simulate_views(m, spec);
    double s1 = 0, s2 = 0;
    std::size_t n = 0;
    double sz = 0, sx = 0;
    for (std::size_t j = 0; j < sim.clouds.size(); ++j) {
        for (std::size_t i = 0; i < m.points.size(); ++i) {
            const Vec3 d = sim.clouds[j].point(i) - sim.clean_points[j][i];
            const auto& c = sim.clouds[j].noise(i);
            const Vec3 z(d.x() / std::sqrt(c.xx()), d.y() / std::sqrt(c.yy()), d.z() / std::sqrt(c.zz()));
            for (int a = 0; a < 3; ++a) {
                s1 += z(a);
                s2 += z(a) * z(a);
                ++n;
            }
            sx += c.xx();
            sz += c.zz();
        }
    }
    const double mean = s1 / static_cast<double>(n);
    const double var = s2 / static_cast<double>(n) - mean * mean;
    EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(static_cast<double>(n)));
    EXPECT_NEAR(var, 1.0, 4.0 * std::sqrt(2.0 / static_cast<double>(n)));
    EXPECT_NEAR(sz / sx, 4.0, 1e-12);
}

TEST(Simulate, StdDevInterpretationSquaresEntries) {
    AcquisitionSpec spec;
    spec.sigma = 0.1;
    spec.r = 3.0;
    spec.sigma_spatial_std = 0.0;
    spec.interpretation = NoiseInterpretation::std_dev;
    const auto sim = simulate_views(generate_triplets(), spec);
    const auto& c = sim.clouds[0].noise(0);
    EXPECT_NEAR(c.xx(), 0.01, 1e-15);
    EXPECT_NEAR(c.zz(), 0.09, 1e-15);
}

TEST(Simulate, Validation) {
    AcquisitionSpec spec;
    spec.r = 0.5;
    EXPECT_THROW(simulate_views(generate_triplets(), spec), ValidationError);
    spec = {};
    spec.outlier_fraction = 1.0;
    EXPECT_THROW(simulate_views(generate_triplets(), spec), ValidationError);
}

TEST(Perturb, ZeroStdIsExact) {
    AcquisitionSpec spec;
    spec.rng_seed = 3;
    const auto sim = simulate_views(generate_triplets(), spec);
    const auto init = perturb_rotations(sim.true_transforms, 0.0, 1);
    EXPECT_LT(pairwise_error(init, sim.true_transforms).mean_deg, 1e-6);
    for (std::size_t j = 0; j < init.size(); ++j) {
        EXPECT_LT((init[j].rotation() * sim.true_transforms[j].rotation() - Mat3::Identity()).norm(), 1e-12);
    }
}

TEST(Perturb, ThirtyDegreesLandsInSanityBand) {
    AcquisitionSpec spec;
    spec.n_views = 20;
    spec.rng_seed = 5;
    const auto sim = simulate_views(generate_triplets(), spec);
    const auto init = perturb_rotations(sim.true_transforms, 30.0, 6);
    const double err = pairwise_error(init, sim.true_transforms).mean_deg;
    EXPECT_GT(err, 20.0);
    EXPECT_LT(err, 80.0);
    EXPECT_THROW(perturb_rotations(sim.true_transforms, -1.0, 0), ValidationError);
}
