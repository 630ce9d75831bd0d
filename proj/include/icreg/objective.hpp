#pragma once

// Registration objective for one pyramid level:
//
//   objective(u) = -LNCC(warp(S, u), T) + theta * Reg(u)
//
// LNCC is the signed local normalized cross-correlation over a cubic window,
// averaged over voxels and channels. Reg is the diffusive penalty, the mean
// squared forward difference of every displacement component. NCC has to be
// maximized and Reg minimized, so the similarity enters negated and the
// whole objective is minimized.
//
// Windows always hold w^3 samples; indices that leave the grid are clamped
// to the border, the same policy used by interpolation and smoothing.
//
// An optional weight mask multiplies each voxel's NCC value and each voxel's
// regularizer term. Both terms are then normalized by the mask sum instead
// of the voxel count, so theta keeps its meaning with and without a mask.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "transform.hpp"
#include "volume.hpp"

namespace icreg {

struct ObjectiveConfig {
    int ncc_window = 3;
    double epsilon = 1e-5;
    double theta = 0.0;
    /// Converts voxel displacements of each component into the units the
    /// regularizer is measured in. Identity by default.
    Vec3 reg_scale{1.0, 1.0, 1.0};

    void validate() const
    {
        if (ncc_window < 3 || ncc_window % 2 == 0)
            throw Error("ObjectiveConfig: ncc_window must be odd and >= 3, got " + std::to_string(ncc_window));
        if (!(epsilon > 0.0))
            throw Error("ObjectiveConfig: epsilon must be > 0");
        if (!(theta >= 0.0) || !std::isfinite(theta))
            throw Error("ObjectiveConfig: theta must be finite and >= 0");
    }
};

struct MaskDiagnostics {
    double min = 0.0;
    double max = 0.0;
    double mean = 0.0;
    double fraction_below_half = 0.0;
};

/// Checks that a single-channel grid is a valid weight mask and returns its
/// summary statistics. Throws on any value outside [0, 1] or non-finite.
template <class Real>
MaskDiagnostics apply_mask_contract(const Volume<Real>& m)
{
    if (m.channels() != 1)
        throw Error("weight mask must have exactly one channel");
    auto v = m.channel(0);
    MaskDiagnostics d{1.0, 0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double x = v[i];
        if (!std::isfinite(x) || x < 0.0 || x > 1.0)
            throw Error("weight mask value out of [0,1] at voxel " + std::to_string(i) + ": " + std::to_string(x));
        d.min = std::min(d.min, x);
        d.max = std::max(d.max, x);
    }
    const Dims& dims = m.dims();
    const std::size_t plane = dims.nx * dims.ny;
    const double sum = detail::ordered_sum(dims.nz, [&](std::size_t z) {
        double s = 0.0;
        for (std::size_t i = z * plane; i < (z + 1) * plane; ++i)
            s += v[i];
        return s;
    });
    const auto below = std::count_if(v.begin(), v.end(), [](Real x) { return x < Real(0.5); });
    d.mean = sum / double(v.size());
    d.fraction_below_half = double(below) / double(v.size());
    return d;
}

/// Per-voxel weights in [0, 1] on a level grid.
template <class Real = double>
class WeightMask {
public:
    WeightMask() = default;
    explicit WeightMask(Volume<Real> grid) : grid_(std::move(grid)) { diagnostics_ = apply_mask_contract(grid_); }

    static WeightMask ones(const Dims& dims, const Vec3& spacing = {1, 1, 1})
    {
        return WeightMask(Volume<Real>(1, dims, spacing, Real(1)));
    }

    const Dims& dims() const { return grid_.dims(); }
    std::span<const Real> values() const& { return grid_.channel(0); }
    std::vector<Real> values() && { return std::move(grid_).data(); }
    const Volume<Real>& grid() const { return grid_; }
    const MaskDiagnostics& diagnostics() const { return diagnostics_; }

private:
    Volume<Real> grid_;
    MaskDiagnostics diagnostics_;
};

namespace detail {

/// out[i] = sum over o in [-r, r] of in[clamp(i + o)]
template <class Real>
void box_line(const Real* in, Real* out, std::size_t n, std::ptrdiff_t r)
{
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::ptrdiff_t o = -r; o <= r; ++o)
            acc += in[clamp_index(static_cast<std::ptrdiff_t>(i) + o, n)];
        out[i] = static_cast<Real>(acc);
    }
}

/// Adjoint of box_line: out[clamp(i + o)] += in[i].
template <class Real>
void box_line_adjoint(const Real* in, Real* out, std::size_t n, std::ptrdiff_t r)
{
    std::fill(out, out + n, Real(0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::ptrdiff_t o = -r; o <= r; ++o)
            out[clamp_index(static_cast<std::ptrdiff_t>(i) + o, n)] += in[i];
}

/// Clamped cubic box sum (adjoint when `adjoint` is set). `tmp` is scratch
/// of the same size. `in` and `out` may alias.
template <class Real>
void box_filter(const Real* in, Real* out, Real* tmp, const Dims& d, int window, bool adjoint)
{
    const std::ptrdiff_t r = window / 2;
    auto line = [&](const Real* a, Real* b, std::size_t n) {
        if (adjoint)
            box_line_adjoint(a, b, n, r);
        else
            box_line(a, b, n, r);
    };
    for_each_line(in, tmp, d, 0, line);
    for_each_line(tmp, out, d, 1, line);
    for_each_line(out, tmp, d, 2, line);
    std::copy(tmp, tmp + d.voxels(), out);
}

/// Sum over z-slices of f(i) for every voxel index i of the slice, with
/// slices accumulated in order.
template <class F>
double ordered_voxel_sum(const Dims& d, F&& f)
{
    const std::size_t plane = d.nx * d.ny;
    return ordered_sum(d.nz, [&](std::size_t z) {
        double s = 0.0;
        for (std::size_t i = z * plane; i < (z + 1) * plane; ++i)
            s += f(i);
        return s;
    });
}

/// Weighted sum of per-voxel NCC for one channel pair. When `dF` is given it
/// receives d(weighted sum)/d(a) for every voxel.
template <class Real>
double ncc_channel(std::span<const Real> a, std::span<const Real> b, const Dims& d, int window, double eps,
                   const Real* weights, Real* dF)
{
    const std::size_t n = d.voxels();
    std::vector<Real> sa(n), sb(n), saa(n), sbb(n), sab(n), tmp(n);
    for (std::size_t i = 0; i < n; ++i)
        tmp[i] = a[i] * a[i];
    box_filter(tmp.data(), saa.data(), sa.data(), d, window, false);
    for (std::size_t i = 0; i < n; ++i)
        tmp[i] = b[i] * b[i];
    box_filter(tmp.data(), sbb.data(), sa.data(), d, window, false);
    for (std::size_t i = 0; i < n; ++i)
        tmp[i] = a[i] * b[i];
    box_filter(tmp.data(), sab.data(), sa.data(), d, window, false);
    box_filter(b.data(), sb.data(), tmp.data(), d, window, false);
    box_filter(a.data(), sa.data(), tmp.data(), d, window, false);

    const double count = double(window) * window * window;

    // Per voxel: ncc value, and (for the gradient) its partial derivatives
    // with respect to the five window sums, already multiplied by the weight.
    auto voxel = [&](std::size_t i, double* coef) {
        const double ma = sa[i] / count, mb = sb[i] / count;
        const double va = saa[i] / count - ma * ma;
        const double vb = sbb[i] / count - mb * mb;
        if (va < eps && vb < eps) {
            if (coef)
                coef[0] = coef[1] = coef[2] = 0.0;
            return 0.0;
        }
        const double cov = sab[i] / count - ma * mb;
        const double denom = va * vb + eps;
        const double root = std::sqrt(denom);
        const double ncc = cov / root;
        if (coef) {
            const double w = weights ? double(weights[i]) : 1.0;
            // d ncc / d var_a = -cov * vb / (2 denom^1.5)
            const double dva = -0.5 * cov * vb / (denom * root);
            coef[0] = w * (-mb / root - 2.0 * ma * dva) / count; // d/dSa
            coef[1] = w * dva / count;                           // d/dSaa
            coef[2] = w * (1.0 / root) / count;                  // d/dSab
        }
        return ncc;
    };

    double total = 0.0;
    if (!dF) {
        total = ordered_voxel_sum(d, [&](std::size_t i) {
            const double w = weights ? double(weights[i]) : 1.0;
            return w * voxel(i, nullptr);
        });
        return total;
    }

    // Coefficients overwrite the window sums in place; each voxel reads and
    // writes only its own entries.
    total = ordered_voxel_sum(d, [&](std::size_t i) {
        double coef[3];
        const double w = weights ? double(weights[i]) : 1.0;
        const double v = voxel(i, coef);
        sb[i] = static_cast<Real>(coef[0]);
        sbb[i] = static_cast<Real>(coef[1]);
        sab[i] = static_cast<Real>(coef[2]);
        return w * v;
    });
    box_filter(sb.data(), sb.data(), tmp.data(), d, window, true);
    box_filter(sbb.data(), sbb.data(), tmp.data(), d, window, true);
    box_filter(sab.data(), sab.data(), tmp.data(), d, window, true);
    parallel_for(d.nz, [&](std::size_t z) {
        const std::size_t plane = d.nx * d.ny;
        for (std::size_t i = z * plane; i < (z + 1) * plane; ++i)
            dF[i] = static_cast<Real>(double(sb[i]) + 2.0 * a[i] * double(sbb[i]) + b[i] * double(sab[i]));
    });
    return total;
}

template <class Real>
double mask_sum(const Dims& d, const WeightMask<Real>* mask)
{
    if (!mask)
        return double(d.voxels());
    require_same_dims(mask->dims(), d, "weight mask");
    auto m = mask->values();
    const double s = ordered_voxel_sum(d, [&](std::size_t i) { return double(m[i]); });
    if (!(s > 0.0))
        throw Error("weight mask sums to zero; weighted mean is undefined");
    return s;
}

} // namespace detail

/// Mean (or mask-weighted mean) over voxels and channels of the windowed NCC.
template <class Real>
double local_ncc(const Volume<Real>& warped, const Volume<Real>& target, const ObjectiveConfig& cfg,
                 const WeightMask<Real>* mask = nullptr)
{
    cfg.validate();
    detail::require_same_dims(warped.dims(), target.dims(), "local_ncc");
    if (warped.channels() != target.channels())
        throw Error("local_ncc: channel count mismatch");
    const double msum = detail::mask_sum(target.dims(), mask);
    const Real* w = mask ? mask->values().data() : nullptr;
    double total = 0.0;
    for (std::size_t c = 0; c < warped.channels(); ++c)
        total += detail::ncc_channel(warped.channel(c), target.channel(c), target.dims(), cfg.ncc_window, cfg.epsilon,
                                     w, static_cast<Real*>(nullptr));
    return total / (double(warped.channels()) * msum);
}

namespace detail {

template <class Real>
double reg_sum(const DisplacementField<Real>& u, const Vec3& scale, const Real* w)
{
    const Dims& d = u.dims();
    const std::size_t sx = 1, sy = d.nx, sz = d.nx * d.ny;
    return ordered_sum(d.nz, [&](std::size_t z) {
        double s = 0.0;
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t i = u.index(x, y, z);
                double term = 0.0;
                for (int k = 0; k < 3; ++k) {
                    const Real* c = u.component(k).data();
                    double g = 0.0;
                    if (x + 1 < d.nx) {
                        const double dx = c[i + sx] - c[i];
                        g += dx * dx;
                    }
                    if (y + 1 < d.ny) {
                        const double dy = c[i + sy] - c[i];
                        g += dy * dy;
                    }
                    if (z + 1 < d.nz) {
                        const double dz = c[i + sz] - c[i];
                        g += dz * dz;
                    }
                    term += scale[k] * scale[k] * g;
                }
                s += (w ? double(w[i]) : 1.0) * term;
            }
        return s;
    });
}

/// Adds factor * d(reg_sum)/du to grad.
template <class Real>
void add_reg_gradient(const DisplacementField<Real>& u, const Vec3& scale, const Real* w, double factor,
                      DisplacementField<Real>& grad)
{
    const Dims& d = u.dims();
    const std::size_t stride[3] = {1, d.nx, d.nx * d.ny};
    parallel_for(d.nz, [&](std::size_t z) {
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t i = u.index(x, y, z);
                const std::size_t pos[3] = {x, y, z};
                for (int k = 0; k < 3; ++k) {
                    const Real* c = u.component(k).data();
                    double g = 0.0;
                    for (int a = 0; a < 3; ++a) {
                        if (pos[a] + 1 < d[a])
                            g -= (w ? double(w[i]) : 1.0) * (c[i + stride[a]] - c[i]);
                        if (pos[a] > 0) {
                            const std::size_t j = i - stride[a];
                            g += (w ? double(w[j]) : 1.0) * (c[i] - c[j]);
                        }
                    }
                    grad.component(k)[i] += static_cast<Real>(factor * 2.0 * scale[k] * scale[k] * g);
                }
            }
    });
}

} // namespace detail

/// Mean (or mask-weighted mean) over voxels and the three components of the
/// squared forward-difference gradient. Differences past the far border are
/// zero. `scale` multiplies each component before differencing.
template <class Real>
double diffusive_reg(const DisplacementField<Real>& u, const WeightMask<Real>* mask = nullptr,
                     const Vec3& scale = {1.0, 1.0, 1.0})
{
    const double msum = detail::mask_sum(u.dims(), mask);
    return detail::reg_sum(u, scale, mask ? mask->values().data() : nullptr) / (3.0 * msum);
}

struct ObjectiveTerms {
    double value = 0.0;
    double similarity = 0.0;     // LNCC, higher is better
    double regularization = 0.0; // Reg(u), unscaled by theta
};

/// Evaluates the objective and, when `grad` is non-null, its exact gradient
/// with respect to every displacement component (voxel units).
template <class Real>
ObjectiveTerms evaluate_objective(const Volume<Real>& source, const Volume<Real>& target,
                                  const DisplacementField<Real>& u, const ObjectiveConfig& cfg,
                                  const WeightMask<Real>* mask = nullptr, DisplacementField<Real>* grad = nullptr)
{
    cfg.validate();
    detail::require_same_dims(source.dims(), target.dims(), "objective");
    detail::require_same_dims(u.dims(), target.dims(), "objective");
    if (source.channels() != target.channels())
        throw Error("objective: channel count mismatch");
    const Dims& d = target.dims();
    const std::size_t n = d.voxels();
    const std::size_t channels = target.channels();
    const double msum = detail::mask_sum(d, mask);
    const Real* w = mask ? mask->values().data() : nullptr;

    if (grad)
        *grad = DisplacementField<Real>(d, u.spacing());

    std::vector<Real> warped(n), dF(grad ? n : 0);
    const double sim_scale = 1.0 / (double(channels) * msum);
    double ncc_total = 0.0;
    auto ux = u.component(0), uy = u.component(1), uz = u.component(2);
    for (std::size_t c = 0; c < channels; ++c) {
        const Real* src = source.channel(c).data();
        detail::parallel_for(d.nz, [&](std::size_t z) {
            for (std::size_t y = 0; y < d.ny; ++y)
                for (std::size_t x = 0; x < d.nx; ++x) {
                    const std::size_t i = u.index(x, y, z);
                    warped[i] = static_cast<Real>(
                        detail::sample(src, d, double(x) + ux[i], double(y) + uy[i], double(z) + uz[i]));
                }
        });
        ncc_total += detail::ncc_channel(std::span<const Real>(warped), target.channel(c), d, cfg.ncc_window,
                                         cfg.epsilon, w, grad ? dF.data() : nullptr);
        if (!grad)
            continue;
        auto gx = grad->component(0), gy = grad->component(1), gz = grad->component(2);
        detail::parallel_for(d.nz, [&](std::size_t z) {
            for (std::size_t y = 0; y < d.ny; ++y)
                for (std::size_t x = 0; x < d.nx; ++x) {
                    const std::size_t i = u.index(x, y, z);
                    double ds[3];
                    detail::sample_with_gradient(src, d, double(x) + ux[i], double(y) + uy[i], double(z) + uz[i], ds);
                    const double g = -sim_scale * dF[i];
                    gx[i] += static_cast<Real>(g * ds[0]);
                    gy[i] += static_cast<Real>(g * ds[1]);
                    gz[i] += static_cast<Real>(g * ds[2]);
                }
        });
    }

    ObjectiveTerms t;
    t.similarity = ncc_total * sim_scale;
    t.regularization = detail::reg_sum(u, cfg.reg_scale, w) / (3.0 * msum);
    t.value = -t.similarity + cfg.theta * t.regularization;
    if (grad && cfg.theta > 0.0)
        detail::add_reg_gradient(u, cfg.reg_scale, w, cfg.theta / (3.0 * msum), *grad);
    return t;
}

template <class Real>
double objective_value(const Volume<Real>& source, const Volume<Real>& target, const DisplacementField<Real>& u,
                       const ObjectiveConfig& cfg, const WeightMask<Real>* mask = nullptr)
{
    return evaluate_objective(source, target, u, cfg, mask).value;
}

template <class Real>
DisplacementField<Real> objective_gradient(const Volume<Real>& source, const Volume<Real>& target,
                                           const DisplacementField<Real>& u, const ObjectiveConfig& cfg,
                                           const WeightMask<Real>* mask = nullptr)
{
    DisplacementField<Real> g;
    evaluate_objective(source, target, u, cfg, mask, &g);
    return g;
}

} // namespace icreg
