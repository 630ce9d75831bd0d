#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <icreg/transform.hpp>

#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace icreg;

namespace {

DisplacementField<double> constant_field(Dims d, Vec3 v)
{
    DisplacementField<double> u(d);
    for (int k = 0; k < 3; ++k)
        for (auto& x : u.component(k))
            x = v[k];
    return u;
}

} // namespace

TEST(Affine, IdentityAndTranslationFields)
{
    const Dims d{4, 3, 5};
    for (double x : affine_to_field<double>(AffineTransform::identity(), d).data())
        EXPECT_EQ(x, 0.0);
    const auto t = affine_to_field<double>(AffineTransform::translation({1, 2, 3}), d);
    for (std::size_t i = 0; i < t.voxels(); ++i)
        EXPECT_EQ(t.vec(i), (Vec3{1, 2, 3}));
}

TEST(Affine, RotationMatchesPerVoxelEvaluation)
{
    AffineTransform a;
    a.m = {{{0, -1, 0, 2}, {1, 0, 0, 0}, {0, 0, 1, 0}}};
    const Dims d{3, 3, 3};
    const auto u = affine_to_field<double>(a, d);
    for (std::size_t z = 0; z < 3; ++z)
        for (std::size_t y = 0; y < 3; ++y)
            for (std::size_t x = 0; x < 3; ++x) {
                const auto ref = oracle::affine_displacement(a, double(x), double(y), double(z));
                for (int k = 0; k < 3; ++k)
                    EXPECT_EQ(u.at(k, x, y, z), ref[k]);
            }
}

TEST(Affine, InverseAndValidation)
{
    AffineTransform a;
    a.m = {{{1.1, 0.1, 0, 2}, {-0.05, 0.95, 0.02, -1}, {0, 0.03, 1.02, 0.5}}};
    const auto b = a.inverse();
    for (const Vec3& p : {Vec3{0, 0, 0}, Vec3{3, -2, 7}}) {
        const Vec3 q = b.apply(a.apply(p));
        for (int k = 0; k < 3; ++k)
            EXPECT_NEAR(q[k], p[k], 1e-12);
    }
    AffineTransform flat;
    flat.m = {{{1, 0, 0, 0}, {1, 0, 0, 0}, {0, 0, 1, 0}}};
    EXPECT_THROW(flat.validate(), Error);
}

TEST(Warp, IdentityIsBitwise)
{
    const auto v = fixtures::random_texture({6, 5, 4}, 2, 1.0, 1);
    EXPECT_TRUE(warp(v, affine_to_field<double>(AffineTransform::identity(), v.dims())) == v);
    EXPECT_TRUE(warp(v, DisplacementField<double>(v.dims())) == v);
}

TEST(Warp, IntegerShiftReplicatesBorder)
{
    const auto v = fixtures::random_texture({5, 4, 3}, 1, 1.0, 2);
    const auto w = warp(v, constant_field(v.dims(), {1, 0, 0}));
    for (std::size_t z = 0; z < 3; ++z)
        for (std::size_t y = 0; y < 4; ++y) {
            for (std::size_t x = 0; x + 1 < 5; ++x)
                EXPECT_EQ(w.at(0, x, y, z), v.at(0, x + 1, y, z));
            EXPECT_EQ(w.at(0, 4, y, z), v.at(0, 4, y, z));
        }
}

TEST(Warp, HalfShiftOnRamp)
{
    Volume<double> v(1, Dims{6, 3, 3});
    for (std::size_t i = 0; i < v.voxels(); ++i)
        v.data()[i] = 3.0 * double(i % 6);
    const auto w = warp(v, constant_field(v.dims(), {0.5, 0, 0}));
    for (std::size_t x = 0; x + 1 < 6; ++x)
        EXPECT_NEAR(w.at(0, x, 1, 1), v.at(0, x, 1, 1) + 1.5, 1e-12);
}

TEST(Warp, DimensionMismatchThrows)
{
    EXPECT_THROW(warp(Volume<double>(1, Dims{4, 4, 4}), DisplacementField<double>(Dims{4, 4, 5})), Error);
}

TEST(Compose, IdentityElements)
{
    const auto u = fixtures::smooth_random_field({7, 6, 5}, 1.5, 2.0, 3);
    const DisplacementField<double> zero(u.dims());
    EXPECT_TRUE(compose(zero, u) == u);
    EXPECT_TRUE(compose(u, zero) == u);
}

TEST(Compose, OppositeShiftsCancelInInterior)
{
    const Dims d{8, 8, 8};
    const auto r = compose(constant_field(d, {-1, -2, 1}), constant_field(d, {1, 2, -1}));
    for (std::size_t z = 1; z < 7; ++z)
        for (std::size_t y = 0; y < 6; ++y)
            for (std::size_t x = 0; x < 7; ++x)
                for (int k = 0; k < 3; ++k)
                    EXPECT_EQ(r.at(k, x, y, z), 0.0);
    const auto s = compose(constant_field(d, {0.5, 1, 0}), constant_field(d, {1, 0.25, 1}));
    for (int k = 0; k < 3; ++k)
        EXPECT_EQ(s.at(k, 3, 3, 3), (Vec3{1.5, 1.25, 1})[k]);
}

TEST(Compose, MatchesPerVoxelOracle)
{
    for (unsigned seed = 0; seed < 5; ++seed) {
        const auto a = fixtures::smooth_random_field({8, 8, 8}, 1.0, 2.5, 10 + seed);
        const auto b = fixtures::smooth_random_field({8, 8, 8}, 1.0, 2.5, 20 + seed);
        const auto c = compose(a, b);
        const auto ref = oracle::compose(a, b);
        for (int k = 0; k < 3; ++k)
            for (std::size_t i = 0; i < c.voxels(); ++i)
                EXPECT_NEAR(c.component(k)[i], ref[k][i], 1e-12);
    }
}

TEST(Compose, AssociativeInInteriorForSmoothSmallFields)
{
    // Exact when every intermediate point stays in the interior of a region
    // where the fields are affine; use affine fields.
    AffineTransform a, b, c;
    a.m = {{{1.01, 0, 0, 0.3}, {0, 0.99, 0.01, -0.2}, {0, 0, 1, 0.1}}};
    b.m = {{{1, 0.02, 0, -0.4}, {0, 1, 0, 0.25}, {0.01, 0, 1, 0}}};
    c.m = {{{0.98, 0, 0, 0.2}, {0, 1.02, 0, 0.1}, {0, 0, 1, -0.3}}};
    const Dims d{12, 12, 12};
    const auto ua = affine_to_field<double>(a, d), ub = affine_to_field<double>(b, d),
               uc = affine_to_field<double>(c, d);
    const auto left = compose(compose(ua, ub), uc);
    const auto right = compose(ua, compose(ub, uc));
    for (std::size_t z = 3; z < 9; ++z)
        for (std::size_t y = 3; y < 9; ++y)
            for (std::size_t x = 3; x < 9; ++x)
                for (int k = 0; k < 3; ++k)
                    EXPECT_NEAR(left.at(k, x, y, z), right.at(k, x, y, z), 1e-6);
}

TEST(IcResidual, AliasOfCompose)
{
    const auto a = fixtures::smooth_random_field({6, 6, 6}, 1.0, 1.0, 1);
    const auto b = fixtures::smooth_random_field({6, 6, 6}, 1.0, 1.0, 2);
    EXPECT_TRUE(ic_residual(a, b) == compose(a, b));
    const DisplacementField<double> zero(a.dims());
    for (double x : ic_residual(zero, zero).data())
        EXPECT_EQ(x, 0.0);
}

TEST(Upsample, ConstantAndZero)
{
    const auto up = upsample_field(constant_field({4, 4, 4}, {1, 0, 0}), {8, 8, 8});
    EXPECT_EQ(up.dims(), (Dims{8, 8, 8}));
    for (std::size_t i = 0; i < up.voxels(); ++i)
        EXPECT_EQ(up.vec(i), (Vec3{2, 0, 0}));
    for (double x : upsample_field(DisplacementField<double>({3, 4, 5}), {5, 7, 10}).data())
        EXPECT_EQ(x, 0.0);
    EXPECT_THROW(upsample_field(DisplacementField<double>({4, 4, 4}), {10, 8, 8}), Error);
}

TEST(Upsample, LinearComponentMatches1DOracle)
{
    DisplacementField<double> u({5, 2, 2});
    for (std::size_t z = 0; z < 2; ++z)
        for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t x = 0; x < 5; ++x)
                u.at(0, x, y, z) = 0.5 * double(x) - 1.0;
    const auto up = upsample_field(u, {9, 3, 3});
    for (std::size_t x = 0; x < 9; ++x) {
        // 1D: position x * 4/8 on the coarse axis, linear interpolation.
        const double p = double(x) * 4.0 / 8.0;
        const auto i0 = std::size_t(std::floor(p));
        const double f = p - double(i0);
        const double v0 = u.at(0, i0, 0, 0), v1 = u.at(0, std::min<std::size_t>(i0 + 1, 4), 0, 0);
        EXPECT_NEAR(up.at(0, x, 1, 1), 2.0 * ((1 - f) * v0 + f * v1), 1e-12);
    }
}

TEST(Upsample, RoundTripOfConstant)
{
    const auto u = constant_field({5, 6, 7}, {0.75, -1.5, 2});
    const auto back = downsample_field(upsample_field(u, {10, 11, 13}));
    EXPECT_EQ(back.dims(), u.dims());
    for (std::size_t i = 0; i < back.voxels(); ++i)
        for (int k = 0; k < 3; ++k)
            EXPECT_NEAR(back.vec(i)[k], u.vec(i)[k], 1e-12);
}

TEST(WarpLandmarks, ShiftsAndOracle)
{
    LandmarkSet pts;
    pts.add({"a", 1, 2, 3});
    pts.add({"b", 2.5, 1.25, 0.5});
    const auto moved = warp_landmarks(pts, constant_field({6, 6, 6}, {1, 2, 3}));
    EXPECT_EQ(moved.points.find("a")->x, 2.0);
    EXPECT_EQ(moved.points.find("b")->z, 3.5);
    EXPECT_TRUE(moved.clamped.empty());
    EXPECT_TRUE(warp_landmarks(pts, DisplacementField<double>({6, 6, 6})).points == pts);

    const auto u = fixtures::smooth_random_field({8, 8, 8}, 1.5, 2.0, 9);
    const auto r = warp_landmarks(pts, u);
    const Landmark& b = *r.points.find("b");
    EXPECT_NEAR(b.x, 2.5 + oracle::interpolate(oracle::component(u, 0), u.dims(), 2.5, 1.25, 0.5), 1e-12);
    EXPECT_NEAR(b.y, 1.25 + oracle::interpolate(oracle::component(u, 1), u.dims(), 2.5, 1.25, 0.5), 1e-12);
    EXPECT_NEAR(b.z, 0.5 + oracle::interpolate(oracle::component(u, 2), u.dims(), 2.5, 1.25, 0.5), 1e-12);

    LandmarkSet outside;
    outside.add({"far", 9.5, 1, 1});
    EXPECT_EQ(warp_landmarks(outside, u).clamped, std::vector<std::string>{"far"});
}

TEST(WarpLandmarks, ConsistentWithVolumeWarp)
{
    // Pulling the target-grid landmark through u lands where the warped
    // volume takes its intensity from: a Gaussian blob at the moved point in
    // the source shows up centered at the landmark in the warped volume.
    const Dims d{24, 24, 24};
    const auto u = fixtures::smooth_random_field(d, 4.0, 1.0, 5);
    LandmarkSet pts;
    pts.add({"p", 11.3, 12.6, 10.8});
    const Landmark q = *warp_landmarks(pts, u).points.find("p");
    Volume<double> src(1, d);
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const double r2 = (x - q.x) * (x - q.x) + (y - q.y) * (y - q.y) + (z - q.z) * (z - q.z);
                src.at(0, x, y, z) = std::exp(-r2 / 2.0);
            }
    const auto w = warp(src, u);
    double m = 0, cx = 0, cy = 0, cz = 0;
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const double v = w.at(0, x, y, z);
                m += v;
                cx += v * double(x);
                cy += v * double(y);
                cz += v * double(z);
            }
    EXPECT_NEAR(cx / m, 11.3, 0.2);
    EXPECT_NEAR(cy / m, 12.6, 0.2);
    EXPECT_NEAR(cz / m, 10.8, 0.2);
}
