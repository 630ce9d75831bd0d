#pragma once

// The registration method end to end:
//
//   1. channel normalization
//   2. affine instance optimization at a coarse pyramid level
//   3. multilevel nonrigid instance optimization (coarse to fine)
//   4. bidirectional re-registration at full resolution
//   5. inverse-consistency error -> weight mask
//   6. a final nonrigid pass with the mask weighting both objective terms
//
// Step 2 is skipped when an externally computed initial field is supplied.
//
// Optimization variables are expressed in align-corners normalized
// coordinates of the level grid ([-1, 1] across each axis), so the learning
// rate and regularization weights do not depend on the grid size in voxels.
// Fields handed in and out are always in voxels.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "adam.hpp"
#include "common.hpp"
#include "config.hpp"
#include "objective.hpp"
#include "transform.hpp"
#include "volume.hpp"

namespace icreg {

/// Iteration schedule of one nonrigid call; entry i belongs to level i,
/// ordered coarse to fine, the last level being full resolution.
struct NonrigidSchedule {
    std::vector<int> iterations;
    std::vector<double> theta;
    int ncc_window = 3;
    double lr0 = 0.003;
    double decay = 1.0;
    double epsilon = 1e-5;

    static NonrigidSchedule from(const PipelineConfig& c)
    {
        return {c.nonrigid.iterations, c.nonrigid.theta, c.nonrigid.ncc_window, c.nonrigid.lr0, c.nonrigid.decay,
                c.epsilon};
    }

    /// Single full-resolution level with the nonrigid window and rate.
    static NonrigidSchedule full_resolution(const PipelineConfig& c, int iterations, double theta)
    {
        return {{iterations}, {theta}, c.nonrigid.ncc_window, c.nonrigid.lr0, c.nonrigid.decay, c.epsilon};
    }

    std::size_t levels() const { return iterations.size(); }
};

template <class Real>
struct NonrigidResult {
    DisplacementField<Real> field;
    /// Loss per iteration, one list per level (coarse to fine).
    std::vector<std::vector<double>> traces;
    /// Level objective at the end of each level.
    std::vector<double> level_objectives;
    /// sum_i 1/2^(N-i) * level_objectives[i]
    double combined_objective = 0.0;
    /// Full-resolution objective (finest theta) before and after.
    double initial_objective = 0.0;
    double final_objective = 0.0;
};

struct AffineResult {
    AffineTransform transform;
    std::vector<double> trace;
    std::vector<std::string> warnings;
};

namespace detail {

/// Half-extent of each axis: voxel units per normalized unit.
inline Vec3 half_extent(const Dims& d)
{
    return {0.5 * double(d.nx - 1), 0.5 * double(d.ny - 1), 0.5 * double(d.nz - 1)};
}

template <class Real>
bool all_channels_constant(const Volume<Real>& v)
{
    for (std::size_t c = 0; c < v.channels(); ++c) {
        auto ch = v.channel(c);
        const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
        if (*lo != *hi)
            return false;
    }
    return true;
}

template <class Real>
WeightMask<Real> downsample_mask(const WeightMask<Real>& m)
{
    Volume<Real> g = downsample(m.grid());
    for (auto& v : g.data())
        v = std::clamp(v, Real(0), Real(1));
    return WeightMask<Real>(std::move(g));
}

template <class F>
auto run_stage(const std::string& name, F&& f)
{
    try {
        return f();
    } catch (const std::exception& e) {
        throw Error("stage " + name + ": " + e.what());
    }
}

} // namespace detail

/// Affine instance optimization. Both volumes are reduced
/// `pyramid_levels_down` times, the 12 matrix entries are optimized from
/// identity against -LNCC, and the result is returned in full-resolution
/// voxel coordinates.
template <class Real>
AffineResult affine_register(const Volume<Real>& source, const Volume<Real>& target, const AffineStageConfig& cfg,
                             double epsilon = 1e-5)
{
    detail::require_same_dims(source.dims(), target.dims(), "affine_register");
    if (source.channels() != target.channels())
        throw Error("affine_register: channel count mismatch");
    AffineResult result;
    if (detail::all_channels_constant(source) || detail::all_channels_constant(target)) {
        result.warnings.push_back("affine: constant input volume, similarity is undefined; returning identity");
        return result;
    }

    Volume<Real> s = source, t = target;
    for (int l = 0; l < cfg.pyramid_levels_down; ++l) {
        s = downsample(s);
        t = downsample(t);
    }
    const Dims& d = t.dims();
    const Vec3 half = detail::half_extent(d);
    ObjectiveConfig ocfg;
    ocfg.ncc_window = cfg.ncc_window;
    ocfg.epsilon = epsilon;

    // Parameters: normalized-coordinate matrix rows (9) then translation (3).
    // Voxel form: p' = c + D (A q + t), q = D^-1 (p - c), D = diag(half), c = half.
    auto to_voxel = [&](std::span<const Real> p) {
        AffineTransform a;
        for (int i = 0; i < 3; ++i) {
            double ti = half[i] + half[i] * p[9 + i];
            for (int j = 0; j < 3; ++j) {
                a.m[i][j] = half[i] * p[3 * i + j] / half[j];
                ti -= a.m[i][j] * half[j];
            }
            a.m[i][3] = ti;
        }
        return a;
    };

    LossAndGrad<Real> loss = [&](std::span<const Real> p, std::span<Real> g) {
        const auto u = affine_to_field<Real>(to_voxel(p), d, t.spacing());
        DisplacementField<Real> gu;
        const double value = evaluate_objective(s, t, u, ocfg, static_cast<const WeightMask<Real>*>(nullptr), &gu).value;
        for (int i = 0; i < 3; ++i) {
            auto gi = gu.component(i);
            for (int j = 0; j < 4; ++j) {
                // du_i/dA[i][j] = half_i * q_j ; du_i/dt_i = half_i
                const double sum = detail::ordered_sum(d.nz, [&](std::size_t z) {
                    double acc = 0.0;
                    for (std::size_t y = 0; y < d.ny; ++y)
                        for (std::size_t x = 0; x < d.nx; ++x) {
                            const double pos[3] = {double(x), double(y), double(z)};
                            const double q = j < 3 ? (pos[j] - half[j]) / half[j] : 1.0;
                            acc += gi[gu.index(x, y, z)] * q;
                        }
                    return acc;
                });
                g[j < 3 ? std::size_t(3 * i + j) : std::size_t(9 + i)] = static_cast<Real>(half[i] * sum);
            }
        }
        return value;
    };

    std::vector<Real> p0{1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
    AdamConfig acfg;
    acfg.lr0 = cfg.lr0;
    acfg.decay = cfg.decay;
    auto r = minimize(loss, std::move(p0), cfg.iterations, acfg);
    result.trace = std::move(r.trace);

    AffineTransform a = to_voxel(r.params);
    const double scale = std::ldexp(1.0, cfg.pyramid_levels_down);
    for (int i = 0; i < 3; ++i)
        a.m[i][3] *= scale;
    if (!(std::abs(a.det()) > 1e-9))
        throw Error("affine_register: degenerate result (|det A| <= 1e-9)");
    a.validate();
    result.transform = a;
    return result;
}

/// Multilevel nonrigid instance optimization. The initial field (zero when
/// absent) is resampled to every level and an increment on top of it is
/// optimized coarse to fine; the increment is carried between levels with
/// upsample_field.
template <class Real>
NonrigidResult<Real> nonrigid_register(const Volume<Real>& source, const Volume<Real>& target,
                                       const DisplacementField<Real>* u_init, const NonrigidSchedule& sch,
                                       const WeightMask<Real>* mask = nullptr)
{
    const std::size_t levels = sch.levels();
    if (levels == 0 || sch.theta.size() != levels)
        throw Error("nonrigid_register: schedule needs one iteration count and one theta per level");
    detail::require_same_dims(source.dims(), target.dims(), "nonrigid_register");
    if (source.channels() != target.channels())
        throw Error("nonrigid_register: channel count mismatch");
    if (u_init)
        detail::require_same_dims(u_init->dims(), target.dims(), "nonrigid_register initial field");
    if (mask)
        detail::require_same_dims(mask->dims(), target.dims(), "nonrigid_register mask");

    // Pyramid index 0 is full resolution.
    std::vector<Volume<Real>> sp{source}, tp{target};
    std::vector<DisplacementField<Real>> init{u_init ? *u_init : DisplacementField<Real>(target.dims(), target.spacing())};
    std::vector<std::optional<WeightMask<Real>>> mp{mask ? std::optional<WeightMask<Real>>(*mask) : std::nullopt};
    for (std::size_t l = 1; l < levels; ++l) {
        sp.push_back(downsample(sp.back()));
        tp.push_back(downsample(tp.back()));
        init.push_back(u_init ? downsample_field(init.back())
                              : DisplacementField<Real>(tp.back().dims(), tp.back().spacing()));
        mp.push_back(mask ? std::optional<WeightMask<Real>>(detail::downsample_mask(*mp.back())) : std::nullopt);
    }

    auto level_cfg = [&](std::size_t level_index, std::size_t pyr) {
        ObjectiveConfig c;
        c.ncc_window = sch.ncc_window;
        c.epsilon = sch.epsilon;
        c.theta = sch.theta[level_index];
        const Vec3 half = detail::half_extent(tp[pyr].dims());
        c.reg_scale = {1.0 / half[0], 1.0 / half[1], 1.0 / half[2]};
        return c;
    };
    auto mask_at = [&](std::size_t pyr) -> const WeightMask<Real>* { return mp[pyr] ? &*mp[pyr] : nullptr; };

    NonrigidResult<Real> result;
    const ObjectiveConfig full_cfg = level_cfg(levels - 1, 0);
    result.initial_objective = evaluate_objective(source, target, init[0], full_cfg, mask).value;

    int total_iterations = 0;
    for (int it : sch.iterations)
        total_iterations += it;

    DisplacementField<Real> delta(tp[levels - 1].dims(), tp[levels - 1].spacing());
    for (std::size_t li = 0; li < levels; ++li) {
        const std::size_t pyr = levels - 1 - li;
        if (li > 0)
            delta = upsample_field(delta, tp[pyr].dims());
        const ObjectiveConfig cfg = level_cfg(li, pyr);
        const Vec3 half = detail::half_extent(tp[pyr].dims());
        const std::size_t n = tp[pyr].voxels();
        const DisplacementField<Real>& base = init[pyr];
        const WeightMask<Real>* m = mask_at(pyr);

        auto compose_level = [&](std::span<const Real> p) {
            DisplacementField<Real> u = base;
            for (int k = 0; k < 3; ++k) {
                auto uk = u.component(k);
                for (std::size_t i = 0; i < n; ++i)
                    uk[i] += static_cast<Real>(p[k * n + i] * half[k]);
            }
            return u;
        };

        std::vector<Real> p0(3 * n);
        for (int k = 0; k < 3; ++k) {
            auto dk = delta.component(k);
            for (std::size_t i = 0; i < n; ++i)
                p0[k * n + i] = static_cast<Real>(dk[i] / half[k]);
        }

        LossAndGrad<Real> loss = [&](std::span<const Real> p, std::span<Real> g) {
            const auto u = compose_level(p);
            DisplacementField<Real> gu;
            const double value = evaluate_objective(sp[pyr], tp[pyr], u, cfg, m, &gu).value;
            for (int k = 0; k < 3; ++k) {
                auto gk = gu.component(k);
                for (std::size_t i = 0; i < n; ++i)
                    g[k * n + i] = static_cast<Real>(gk[i] * half[k]);
            }
            return value;
        };

        AdamConfig acfg;
        acfg.lr0 = sch.lr0;
        acfg.decay = sch.decay;
        auto r = minimize(loss, std::move(p0), sch.iterations[li], acfg);
        result.traces.push_back(std::move(r.trace));
        if (sch.iterations[li] > 0) {
            for (int k = 0; k < 3; ++k) {
                auto dk = delta.component(k);
                for (std::size_t i = 0; i < n; ++i)
                    dk[i] = static_cast<Real>(r.params[k * n + i] * half[k]);
            }
        }
        result.level_objectives.push_back(evaluate_objective(sp[pyr], tp[pyr], compose_level(r.params), cfg, m).value);
        result.combined_objective += std::ldexp(1.0, -int(levels - 1 - li)) * result.level_objectives.back();
    }

    if (total_iterations == 0) {
        result.field = init[0];
    } else {
        result.field = init[0];
        for (int k = 0; k < 3; ++k) {
            auto uk = result.field.component(k);
            auto dk = delta.component(k);
            for (std::size_t i = 0; i < uk.size(); ++i)
                uk[i] += dk[i];
        }
    }
    result.final_objective = evaluate_objective(source, target, result.field, full_cfg, mask).value;
    return result;
}

/// Per-voxel magnitude of the inverse-consistency residual.
template <class Real>
Volume<Real> ic_error_map(const DisplacementField<Real>& u_st, const DisplacementField<Real>& u_ts)
{
    const DisplacementField<Real> r = ic_residual(u_st, u_ts);
    Volume<Real> out(1, r.dims(), r.spacing());
    auto o = out.channel(0);
    detail::parallel_for(r.voxels(), [&](std::size_t i) {
        const Vec3 v = r.vec(i);
        o[i] = static_cast<Real>(std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]));
    });
    return out;
}

/// mask = smooth(1 - (map / max(map))^power, sigma), clamped to [0, 1].
/// An all-zero map yields an all-ones mask.
template <class Real>
WeightMask<Real> ic_weight_mask(const Volume<Real>& ic_map, double sigma, double power)
{
    if (ic_map.channels() != 1)
        throw Error("ic_weight_mask: map must have one channel");
    if (!(power > 0.0))
        throw Error("ic_weight_mask: power must be > 0");
    auto v = ic_map.channel(0);
    double mx = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!(v[i] >= 0) || !std::isfinite(double(v[i])))
            throw Error("ic_weight_mask: map value at voxel " + std::to_string(i) + " is negative or non-finite");
        mx = std::max(mx, double(v[i]));
    }
    Volume<Real> m0(1, ic_map.dims(), ic_map.spacing());
    auto m = m0.channel(0);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double w = mx > 0.0 ? double(v[i]) / mx : 0.0;
        m[i] = static_cast<Real>(1.0 - std::pow(w, power));
    }
    Volume<Real> smooth = gaussian_smooth(m0, sigma);
    for (auto& x : smooth.data())
        x = std::clamp(x, Real(0), Real(1));
    return WeightMask<Real>(std::move(smooth));
}

struct StageReport {
    std::string name;
    double initial_objective = 0.0;
    double final_objective = 0.0;
    std::vector<std::vector<double>> traces;
    std::vector<double> level_objectives;
    double combined_objective = 0.0;
    double seconds = 0.0;
};

struct RegistrationReport {
    bool affine_skipped = false;
    AffineTransform affine;
    std::vector<StageReport> stages;
    std::optional<MaskDiagnostics> mask;
    std::vector<std::string> warnings;
};

template <class Real>
struct PipelineResult {
    DisplacementField<Real> field;
    RegistrationReport report;
    std::optional<WeightMask<Real>> mask;
    /// Forward field before the weighted pass, and the backward field.
    DisplacementField<Real> forward;
    DisplacementField<Real> backward;
};

namespace detail {

class StageTimer {
public:
    StageTimer() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const
    {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

template <class Real>
StageReport stage_from(const std::string& name, const NonrigidResult<Real>& r, double seconds)
{
    return {name, r.initial_objective, r.final_objective, r.traces, r.level_objectives, r.combined_objective, seconds};
}

template <class Real>
void warn_constant_channels(const Volume<Real>& v, const char* which, std::vector<std::string>& warnings)
{
    for (std::size_t c = 0; c < v.channels(); ++c) {
        auto ch = v.channel(c);
        const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
        if (*lo == *hi)
            warnings.push_back(std::string(which) + " channel " + std::to_string(c) + " is constant");
    }
}

} // namespace detail

/// Runs the complete method on raw (unnormalized) volumes. `u_external`, when
/// given, replaces the affine stage as the initial forward field.
template <class Real>
PipelineResult<Real> run_pipeline(const Volume<Real>& source_raw, const Volume<Real>& target_raw,
                                  const DisplacementField<Real>* u_external, const PipelineConfig& cfg)
{
    cfg.validate();
    if (source_raw.channels() != target_raw.channels())
        throw Error("run_pipeline: source has " + std::to_string(source_raw.channels()) + " channels, target has " +
                    std::to_string(target_raw.channels()));
    detail::require_same_dims(source_raw.dims(), target_raw.dims(), "run_pipeline");
    if (u_external)
        detail::require_same_dims(u_external->dims(), target_raw.dims(), "run_pipeline initial field");

    PipelineResult<Real> out;
    RegistrationReport& rep = out.report;

    const auto normalized = detail::run_stage("normalize", [&] {
        return std::pair{normalize_channels(source_raw), normalize_channels(target_raw)};
    });
    const Volume<Real>& source = normalized.first;
    const Volume<Real>& target = normalized.second;
    detail::warn_constant_channels(source, "source", rep.warnings);
    detail::warn_constant_channels(target, "target", rep.warnings);

    DisplacementField<Real> u;
    if (u_external) {
        rep.affine_skipped = true;
        u = *u_external;
    } else {
        detail::StageTimer timer;
        auto a = detail::run_stage("affine", [&] { return affine_register(source, target, cfg.affine, cfg.epsilon); });
        rep.affine = a.transform;
        rep.warnings.insert(rep.warnings.end(), a.warnings.begin(), a.warnings.end());
        u = affine_to_field<Real>(a.transform, target.dims(), target.spacing());
        StageReport s;
        s.name = "affine";
        s.traces.push_back(a.trace);
        s.initial_objective = a.trace.empty() ? 0.0 : a.trace.front();
        s.final_objective = a.trace.empty() ? 0.0 : a.trace.back();
        s.seconds = timer.seconds();
        rep.stages.push_back(std::move(s));
    }

    const NonrigidSchedule main = NonrigidSchedule::from(cfg);
    const double last_theta = cfg.nonrigid.theta.back();
    const NonrigidSchedule bidir =
        NonrigidSchedule::full_resolution(cfg, cfg.ic.bidirectional_iterations, last_theta);
    const NonrigidSchedule final_pass = NonrigidSchedule::full_resolution(cfg, cfg.ic.final_iterations, cfg.ic.final_theta);

    {
        detail::StageTimer timer;
        auto r = detail::run_stage("nonrigid", [&] { return nonrigid_register(source, target, &u, main); });
        u = std::move(r.field);
        rep.stages.push_back(detail::stage_from("nonrigid", r, timer.seconds()));
    }

    DisplacementField<Real> u_ts;
    {
        detail::StageTimer timer;
        const AffineTransform inv = rep.affine.inverse();
        const auto back_init = affine_to_field<Real>(inv, target.dims(), target.spacing());
        auto rb = detail::run_stage("bidirectional-backward",
                                    [&] { return nonrigid_register(target, source, &back_init, bidir); });
        u_ts = std::move(rb.field);
        rep.stages.push_back(detail::stage_from("bidirectional-backward", rb, timer.seconds()));
    }
    {
        detail::StageTimer timer;
        auto rf =
            detail::run_stage("bidirectional-forward", [&] { return nonrigid_register(source, target, &u, bidir); });
        u = std::move(rf.field);
        rep.stages.push_back(detail::stage_from("bidirectional-forward", rf, timer.seconds()));
    }

    WeightMask<Real> mask = detail::run_stage("ic-mask", [&] {
        return ic_weight_mask(ic_error_map(u, u_ts), cfg.ic.sigma, cfg.ic.power);
    });
    rep.mask = mask.diagnostics();

    {
        detail::StageTimer timer;
        auto r = detail::run_stage("weighted", [&] { return nonrigid_register(source, target, &u, final_pass, &mask); });
        out.field = std::move(r.field);
        rep.stages.push_back(detail::stage_from("weighted", r, timer.seconds()));
    }
    out.forward = std::move(u);
    out.backward = std::move(u_ts);
    out.mask = std::move(mask);
    return out;
}

} // namespace icreg
