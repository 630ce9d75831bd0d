#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <icreg/pipeline.hpp>

#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace icreg;

namespace {

double max_norm(const DisplacementField<double>& u)
{
    double m = 0.0;
    for (std::size_t i = 0; i < u.voxels(); ++i) {
        const Vec3 v = u.vec(i);
        m = std::max(m, std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]));
    }
    return m;
}

PipelineConfig quick_config()
{
    PipelineConfig c;
    c.affine.iterations = 20;
    c.nonrigid.iterations = {6, 4};
    c.ic.bidirectional_iterations = 3;
    c.ic.final_iterations = 3;
    return c;
}

} // namespace

TEST(AffineRegister, SelfRegistrationStaysNearIdentity)
{
    const auto s = fixtures::blob_phantom({32, 32, 32}, 2, 40, 1);
    const auto r = affine_register(s, s, AffineStageConfig{});
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j)
            EXPECT_LT(std::abs(r.transform.m[i][j] - (i == j)), 0.01);
        EXPECT_LT(std::abs(r.transform.m[i][3]), 0.1);
    }
    EXPECT_EQ(r.trace.size(), 100u);
}

TEST(AffineRegister, RecoversTranslationAlongX)
{
    const auto s = fixtures::blob_phantom({48, 48, 48}, 2, 60, 2);
    const auto t = warp(s, affine_to_field<double>(AffineTransform::translation({3, 0, 0}), s.dims()));
    const auto a = affine_register(s, t, AffineStageConfig{}).transform;
    EXPECT_GE(a.m[0][3], 2.5);
    EXPECT_LE(a.m[0][3], 3.5);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (i != j) {
                EXPECT_LT(std::abs(a.m[i][j]), 0.05);
            }
}

TEST(AffineRegister, ConstantInputGivesIdentityWithWarning)
{
    const Volume<double> c(1, Dims{16, 16, 16}, {1, 1, 1}, 0.0);
    const auto r = affine_register(c, c, AffineStageConfig{});
    EXPECT_EQ(r.transform, AffineTransform::identity());
    ASSERT_EQ(r.warnings.size(), 1u);
}

TEST(NonrigidRegister, ZeroIterationsReturnInitialization)
{
    const auto s = fixtures::random_texture({16, 16, 16}, 1, 1.0, 1);
    NonrigidSchedule sch = NonrigidSchedule::from(PipelineConfig{});
    sch.iterations = {0, 0};
    const auto r0 = nonrigid_register(s, s, static_cast<const DisplacementField<double>*>(nullptr), sch);
    for (double x : r0.field.data())
        EXPECT_EQ(x, 0.0);
    const auto init = fixtures::smooth_random_field(s.dims(), 2.0, 2.0, 3);
    EXPECT_TRUE(nonrigid_register(s, s, &init, sch).field == init);
}

TEST(NonrigidRegister, SelfRegistrationHoldsFieldNearZero)
{
    for (unsigned seed = 0; seed < 3; ++seed) {
        const auto s = fixtures::random_texture({24, 24, 24}, 2, 1.0, 10 + seed);
        const auto r = nonrigid_register(s, s, static_cast<const DisplacementField<double>*>(nullptr),
                                         NonrigidSchedule::from(PipelineConfig{}));
        EXPECT_LT(max_norm(r.field), 0.2);
        ASSERT_EQ(r.traces.size(), 2u);
        EXPECT_EQ(r.traces[0].size(), 40u);
        EXPECT_EQ(r.traces[1].size(), 20u);
        EXPECT_NEAR(r.combined_objective, 0.5 * r.level_objectives[0] + r.level_objectives[1], 1e-15);
    }
}

TEST(NonrigidRegister, ImprovesObjectiveOnShiftedPair)
{
    const auto s = fixtures::random_texture({24, 24, 24}, 2, 1.0, 1);
    const auto u = fixtures::smooth_random_field(s.dims(), 5.0, 2.0, 2);
    const auto t = warp(s, u);
    NonrigidSchedule sch = NonrigidSchedule::from(PipelineConfig{});
    sch.theta = {100, 200};
    const auto r = nonrigid_register(s, t, static_cast<const DisplacementField<double>*>(nullptr), sch);
    EXPECT_LT(r.final_objective, r.initial_objective);
    EXPECT_LT(fixtures::mean_endpoint_error(r.field, u, 4),
              fixtures::mean_endpoint_error(DisplacementField<double>(s.dims()), u, 4));
}

TEST(IcErrorMap, MatchesOracleAndSpecialCases)
{
    for (unsigned seed = 0; seed < 5; ++seed) {
        const auto a = fixtures::smooth_random_field({8, 7, 6}, 1.0, 2.0, seed);
        const auto b = fixtures::smooth_random_field({8, 7, 6}, 1.0, 2.0, seed + 100);
        const auto m = ic_error_map(a, b);
        const auto ref = oracle::ic_map(a, b);
        for (std::size_t i = 0; i < ref.size(); ++i)
            EXPECT_NEAR(m.data()[i], ref[i], 1e-12);
    }
    const auto a = fixtures::smooth_random_field({6, 6, 6}, 1.0, 2.0, 7);
    const auto m = ic_error_map(a, DisplacementField<double>(a.dims()));
    for (std::size_t i = 0; i < a.voxels(); ++i) {
        const Vec3 v = a.vec(i);
        EXPECT_EQ(m.data()[i], std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]));
    }
    const Dims d{8, 8, 8};
    const auto fwd = affine_to_field<double>(AffineTransform::translation({1, -1, 2}), d);
    const auto bwd = affine_to_field<double>(AffineTransform::translation({-1, 1, -2}), d);
    const auto zero = ic_error_map(fwd, bwd);
    for (std::size_t z = 2; z < 6; ++z)
        for (std::size_t y = 1; y < 7; ++y)
            for (std::size_t x = 1; x < 7; ++x)
                EXPECT_EQ(zero.at(0, x, y, z), 0.0);
}

TEST(IcWeightMask, ZeroMapPeakAndOracle)
{
    const Dims d{7, 6, 8};
    for (double x : ic_weight_mask(Volume<double>(1, d), 2.0, 2.0).values())
        EXPECT_EQ(x, 1.0);

    Volume<double> peak(1, d);
    peak.at(0, 3, 3, 3) = 4.0;
    peak.at(0, 3, 4, 3) = 1.0;
    const auto m = ic_weight_mask(peak, 0.0, 1.0);
    for (std::size_t i = 0; i < peak.voxels(); ++i)
        EXPECT_EQ(m.values()[i], 1.0 - peak.data()[i] / 4.0);

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> uni(0, 3);
    for (unsigned k = 0; k < 5; ++k) {
        Volume<double> map(1, d);
        for (auto& x : map.data())
            x = uni(rng);
        const auto w = ic_weight_mask(map, 2.0, 2.0);
        const auto ref = oracle::ic_mask(oracle::channel(map, 0), d, 2.0, 2.0);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            EXPECT_NEAR(w.values()[i], ref[i], 1e-12);
            EXPECT_GE(w.values()[i], 0.0);
            EXPECT_LE(w.values()[i], 1.0);
        }
    }
    Volume<double> neg(1, d);
    neg.at(0, 0, 0, 0) = -1.0;
    EXPECT_THROW(ic_weight_mask(neg, 1.0, 2.0), Error);
}

TEST(IcWeightMask, RaisingOneValueNeverRaisesItsWeight)
{
    Volume<double> map(1, Dims{5, 5, 5});
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> uni(0, 1);
    for (auto& x : map.data())
        x = uni(rng);
    map.at(0, 0, 0, 0) = 2.0; // fixed maximum
    const auto before = ic_weight_mask(map, 0.0, 2.0);
    for (std::size_t i : {7u, 31u, 64u}) {
        Volume<double> raised = map;
        raised.data()[i] = std::min(1.9, raised.data()[i] + 0.5);
        EXPECT_LE(ic_weight_mask(raised, 0.0, 2.0).values()[i], before.values()[i]);
    }
}

TEST(RunPipeline, AllIterationsZeroReturnsAffineField)
{
    const auto s = fixtures::blob_phantom({24, 24, 24}, 2, 30, 1);
    const auto t = warp(s, affine_to_field<double>(AffineTransform::translation({1.5, 0, -1}), s.dims()));
    PipelineConfig c;
    c.affine.pyramid_levels_down = 1;
    c.affine.iterations = 30;
    c.nonrigid.iterations = {0, 0};
    c.ic.bidirectional_iterations = 0;
    c.ic.final_iterations = 0;
    const auto r = run_pipeline(s, t, static_cast<const DisplacementField<double>*>(nullptr), c);
    EXPECT_FALSE(r.report.affine_skipped);
    EXPECT_TRUE(r.field == affine_to_field<double>(r.report.affine, t.dims(), t.spacing()));
}

TEST(RunPipeline, ExternalFieldSkipsAffine)
{
    const auto s = fixtures::random_texture({16, 16, 16}, 1, 1.0, 1);
    const auto init = fixtures::smooth_random_field(s.dims(), 2.0, 1.0, 2);
    PipelineConfig c = quick_config();
    c.nonrigid.iterations = {0, 0};
    c.ic.bidirectional_iterations = 0;
    c.ic.final_iterations = 0;
    const auto r = run_pipeline(s, s, &init, c);
    EXPECT_TRUE(r.report.affine_skipped);
    EXPECT_TRUE(r.field == init);
    EXPECT_EQ(r.report.stages.front().name, "nonrigid");
}

TEST(RunPipeline, SelfRegistrationIsQuiet)
{
    // The mask is normalized by the largest IC error, so its mean reflects the
    // shape of the error distribution rather than its size. Noise textures sit
    // lower (about 0.87 to 0.90) than this piecewise smooth phantom.
    const auto s = fixtures::blob_phantom({48, 48, 48}, 2, 60, 1);
    const auto r = run_pipeline(s, s, static_cast<const DisplacementField<double>*>(nullptr), PipelineConfig{});
    EXPECT_LT(max_norm(r.field), 0.3);
    ASSERT_TRUE(r.report.mask.has_value());
    EXPECT_GT(r.report.mask->mean, 0.95);
    std::vector<std::string> names;
    for (const auto& st : r.report.stages)
        names.push_back(st.name);
    EXPECT_EQ(names, (std::vector<std::string>{"affine", "nonrigid", "bidirectional-backward",
                                               "bidirectional-forward", "weighted"}));
}

TEST(RunPipeline, DeterministicAcrossRuns)
{
    const auto s = fixtures::random_texture({16, 16, 16}, 2, 1.0, 6);
    const auto t = warp(s, fixtures::smooth_random_field(s.dims(), 3.0, 1.5, 7));
    const auto a = run_pipeline(s, t, static_cast<const DisplacementField<double>*>(nullptr), quick_config());
    const auto b = run_pipeline(s, t, static_cast<const DisplacementField<double>*>(nullptr), quick_config());
    EXPECT_TRUE(a.field == b.field);
    EXPECT_TRUE(a.mask->grid() == b.mask->grid());
}

TEST(RunPipeline, AllOnesMaskReproducesUnweightedPass)
{
    const auto s = fixtures::random_texture({16, 16, 16}, 2, 1.0, 8);
    const auto t = warp(s, fixtures::smooth_random_field(s.dims(), 3.0, 1.5, 9));
    const auto init = fixtures::smooth_random_field(s.dims(), 3.0, 1.0, 10);
    const auto sch = NonrigidSchedule::full_resolution(PipelineConfig{}, 5, 25000);
    const auto ones = WeightMask<double>::ones(s.dims());
    const auto a = nonrigid_register(s, t, &init, sch);
    const auto b = nonrigid_register(s, t, &init, sch, &ones);
    EXPECT_TRUE(a.field == b.field);
    EXPECT_EQ(a.traces, b.traces);
}

TEST(RunPipeline, ErrorsNameTheStage)
{
    Volume<double> s(1, Dims{8, 8, 8});
    s.at(0, 1, 1, 1) = std::nan("");
    try {
        run_pipeline(s, s, static_cast<const DisplacementField<double>*>(nullptr), quick_config());
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("stage normalize"), std::string::npos) << e.what();
    }
    EXPECT_THROW(run_pipeline(Volume<double>(1, Dims{8, 8, 8}), Volume<double>(2, Dims{8, 8, 8}),
                              static_cast<const DisplacementField<double>*>(nullptr), quick_config()),
                 Error);
}
