#pragma once

// Multi-channel 3D scalar grids.
//
// Storage order is channel-major, then z, then y, with x varying fastest:
//   index(c, x, y, z) = ((c * nz + z) * ny + y) * nx + x
// which matches the NIfTI payload order for dim = [nx, ny, nz, channels].

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"

namespace icreg {

template <class Real = double>
class Volume {
public:
    using value_type = Real;

    Volume() = default;

    Volume(std::size_t channels, Dims dims, Vec3 spacing = {1.0, 1.0, 1.0}, Real fill = Real(0))
        : dims_(dims), spacing_(spacing), channels_(channels)
    {
        if (channels == 0)
            throw Error("Volume: channel count must be >= 1");
        if (dims.nx < 2 || dims.ny < 2 || dims.nz < 2)
            throw Error("Volume: every dimension must be >= 2, got " + dims.str());
        for (double s : spacing)
            if (!(s > 0.0) || !std::isfinite(s))
                throw Error("Volume: spacing must be positive and finite");
        data_.assign(channels * dims.voxels(), fill);
    }

    std::size_t channels() const { return channels_; }
    const Dims& dims() const { return dims_; }
    const Vec3& spacing() const { return spacing_; }
    void set_spacing(const Vec3& s) { spacing_ = s; }
    std::size_t voxels() const { return dims_.voxels(); }
    bool empty() const { return data_.empty(); }

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const
    {
        return (z * dims_.ny + y) * dims_.nx + x;
    }

    Real& at(std::size_t c, std::size_t x, std::size_t y, std::size_t z)
    {
        return data_[c * voxels() + index(x, y, z)];
    }
    Real at(std::size_t c, std::size_t x, std::size_t y, std::size_t z) const
    {
        return data_[c * voxels() + index(x, y, z)];
    }

    std::span<Real> channel(std::size_t c) { return {data_.data() + c * voxels(), voxels()}; }
    std::span<const Real> channel(std::size_t c) const { return {data_.data() + c * voxels(), voxels()}; }

    std::span<Real> data() & { return data_; }
    std::span<const Real> data() const& { return data_; }
    // a span into a dying temporary would dangle, so hand over the storage
    std::vector<Real> data() && { return std::move(data_); }

    friend bool operator==(const Volume& a, const Volume& b)
    {
        return a.dims_ == b.dims_ && a.channels_ == b.channels_ && a.spacing_ == b.spacing_ && a.data_ == b.data_;
    }

private:
    Dims dims_{};
    Vec3 spacing_{1.0, 1.0, 1.0};
    std::size_t channels_ = 0;
    std::vector<Real> data_;
};

namespace detail {

/// Interpolation cell along one axis: clamped coordinate, lower index and
/// fraction. `inside` is false when the coordinate was clamped, in which
/// case the sample does not vary with the coordinate.
struct AxisCell {
    std::size_t i0;
    double frac;
    bool inside;
};

inline AxisCell axis_cell(double p, std::size_t n)
{
    const double hi = static_cast<double>(n - 1);
    if (p < 0.0)
        return {0, 0.0, false};
    if (p > hi)
        return {n - 2, 1.0, false};
    auto i0 = static_cast<std::size_t>(std::floor(p));
    if (i0 > n - 2)
        i0 = n - 2;
    return {i0, p - static_cast<double>(i0), true};
}

inline double lerp1(double a, double b, double f) { return (1.0 - f) * a + f * b; }

/// Trilinear sample of one scalar grid with border replication. Exact at
/// grid nodes, including the last node of each axis.
template <class Real>
double sample(const Real* grid, const Dims& d, double x, double y, double z)
{
    const AxisCell cx = axis_cell(x, d.nx), cy = axis_cell(y, d.ny), cz = axis_cell(z, d.nz);
    const std::size_t sy = d.nx, sz = d.nx * d.ny;
    const Real* p = grid + cz.i0 * sz + cy.i0 * sy + cx.i0;
    const double fx = cx.frac, fy = cy.frac, fz = cz.frac;
    const double c00 = lerp1(p[0], p[1], fx);
    const double c10 = lerp1(p[sy], p[sy + 1], fx);
    const double c01 = lerp1(p[sz], p[sz + 1], fx);
    const double c11 = lerp1(p[sz + sy], p[sz + sy + 1], fx);
    return lerp1(lerp1(c00, c10, fy), lerp1(c01, c11, fy), fz);
}

/// Trilinear sample together with its partial derivatives with respect to
/// the sampling coordinate. Derivatives are zero along clamped axes.
template <class Real>
double sample_with_gradient(const Real* grid, const Dims& d, double x, double y, double z, double grad[3])
{
    const AxisCell cx = axis_cell(x, d.nx), cy = axis_cell(y, d.ny), cz = axis_cell(z, d.nz);
    const std::size_t sy = d.nx, sz = d.nx * d.ny;
    const Real* p = grid + cz.i0 * sz + cy.i0 * sy + cx.i0;
    const double fx = cx.frac, fy = cy.frac, fz = cz.frac;
    const double v000 = p[0], v100 = p[1], v010 = p[sy], v110 = p[sy + 1];
    const double v001 = p[sz], v101 = p[sz + 1], v011 = p[sz + sy], v111 = p[sz + sy + 1];

    const double c00 = lerp1(v000, v100, fx);
    const double c10 = lerp1(v010, v110, fx);
    const double c01 = lerp1(v001, v101, fx);
    const double c11 = lerp1(v011, v111, fx);
    const double c0 = lerp1(c00, c10, fy);
    const double c1 = lerp1(c01, c11, fy);

    if (cx.inside) {
        const double d0 = lerp1(v100 - v000, v110 - v010, fy);
        const double d1 = lerp1(v101 - v001, v111 - v011, fy);
        grad[0] = lerp1(d0, d1, fz);
    } else {
        grad[0] = 0.0;
    }
    grad[1] = cy.inside ? lerp1(c10 - c00, c11 - c01, fz) : 0.0;
    grad[2] = cz.inside ? c1 - c0 : 0.0;
    return lerp1(c0, c1, fz);
}

/// Applies `fn(in_line, out_line, n)` to every line of a grid along `axis`.
/// Lines are gathered into contiguous buffers so `fn` sees unit stride.
template <class Real, class Fn>
void for_each_line(const Real* in, Real* out, const Dims& d, int axis, Fn&& fn)
{
    const std::size_t n = d[axis];
    const std::size_t stride = axis == 0 ? 1 : axis == 1 ? d.nx : d.nx * d.ny;
    // Outer loop over z-slices (or y-rows for the z axis) keeps work per task even.
    const std::size_t outer = axis == 2 ? d.ny : d.nz;
    parallel_for(outer, [&](std::size_t o) {
        std::vector<Real> src(n), dst(n);
        auto run = [&](std::size_t base) {
            for (std::size_t i = 0; i < n; ++i)
                src[i] = in[base + i * stride];
            fn(src.data(), dst.data(), n);
            for (std::size_t i = 0; i < n; ++i)
                out[base + i * stride] = dst[i];
        };
        if (axis == 0) {
            for (std::size_t y = 0; y < d.ny; ++y)
                run((o * d.ny + y) * d.nx);
        } else if (axis == 1) {
            for (std::size_t x = 0; x < d.nx; ++x)
                run(o * d.nx * d.ny + x);
        } else {
            for (std::size_t x = 0; x < d.nx; ++x)
                run(o * d.nx + x);
        }
    });
}

/// 1D correlation with a symmetric kernel of radius (k.size()-1)/2 and
/// clamped borders.
template <class Real>
void convolve_line(const Real* in, Real* out, std::size_t n, const std::vector<double>& k)
{
    const auto r = static_cast<std::ptrdiff_t>(k.size() / 2);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::ptrdiff_t o = -r; o <= r; ++o)
            acc += k[static_cast<std::size_t>(o + r)] * in[clamp_index(static_cast<std::ptrdiff_t>(i) + o, n)];
        out[i] = static_cast<Real>(acc);
    }
}

template <class Real>
void separable_filter(std::span<const Real> in, std::span<Real> out, const Dims& d, const std::vector<double>& k)
{
    std::vector<Real> tmp(in.size());
    auto line = [&](const Real* a, Real* b, std::size_t n) { convolve_line(a, b, n, k); };
    for_each_line(in.data(), out.data(), d, 0, line);
    for_each_line(out.data(), tmp.data(), d, 1, line);
    for_each_line(tmp.data(), out.data(), d, 2, line);
}

} // namespace detail

/// Discrete Gaussian: radius ceil(3 sigma), weights normalized to sum 1.
inline std::vector<double> gaussian_kernel(double sigma)
{
    if (!(sigma >= 0.0) || !std::isfinite(sigma))
        throw Error("gaussian_kernel: sigma must be finite and >= 0, got " + std::to_string(sigma));
    if (sigma == 0.0)
        return {1.0};
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = w;
        sum += w;
    }
    for (double& w : k)
        w /= sum;
    return k;
}

/// Rescales each channel to [0, 1] independently. A constant channel maps
/// to all zeros.
template <class Real>
Volume<Real> normalize_channels(const Volume<Real>& v)
{
    Volume<Real> out = v;
    for (std::size_t c = 0; c < v.channels(); ++c) {
        auto src = v.channel(c);
        for (std::size_t i = 0; i < src.size(); ++i)
            if (!std::isfinite(static_cast<double>(src[i])))
                throw Error("normalize_channels: non-finite value in channel " + std::to_string(c) + " at voxel " +
                            std::to_string(i));
        const auto [lo, hi] = std::minmax_element(src.begin(), src.end());
        const Real mn = *lo, mx = *hi;
        auto dst = out.channel(c);
        if (mx == mn) {
            std::fill(dst.begin(), dst.end(), Real(0));
            continue;
        }
        const Real range = mx - mn;
        for (std::size_t i = 0; i < src.size(); ++i)
            dst[i] = (src[i] - mn) / range;
    }
    return out;
}

/// Trilinear interpolation with border replication.
template <class Real>
double trilinear_sample(const Volume<Real>& v, const GridPoint& p, std::size_t c)
{
    if (c >= v.channels())
        throw Error("trilinear_sample: channel " + std::to_string(c) + " out of range");
    return detail::sample(v.channel(c).data(), v.dims(), p.x, p.y, p.z);
}

template <class Real>
Volume<Real> gaussian_smooth(const Volume<Real>& v, double sigma)
{
    const auto k = gaussian_kernel(sigma);
    if (k.size() == 1)
        return v;
    Volume<Real> out(v.channels(), v.dims(), v.spacing());
    for (std::size_t c = 0; c < v.channels(); ++c)
        detail::separable_filter(v.channel(c), out.channel(c), v.dims(), k);
    return out;
}

/// One pyramid step: Gaussian (sigma 1) then keep even indices.
template <class Real>
Volume<Real> downsample(const Volume<Real>& v)
{
    const Dims& d = v.dims();
    if (d.nx < 4 || d.ny < 4 || d.nz < 4)
        throw Error("downsample: every dimension must be >= 4, got " + d.str());
    const Volume<Real> smooth = gaussian_smooth(v, 1.0);
    const Dims h{(d.nx + 1) / 2, (d.ny + 1) / 2, (d.nz + 1) / 2};
    const Vec3& s = v.spacing();
    Volume<Real> out(v.channels(), h, {2.0 * s[0], 2.0 * s[1], 2.0 * s[2]});
    for (std::size_t c = 0; c < v.channels(); ++c)
        detail::parallel_for(h.nz, [&](std::size_t z) {
            for (std::size_t y = 0; y < h.ny; ++y)
                for (std::size_t x = 0; x < h.nx; ++x)
                    out.at(c, x, y, z) = smooth.at(c, 2 * x, 2 * y, 2 * z);
        });
    return out;
}

} // namespace icreg
