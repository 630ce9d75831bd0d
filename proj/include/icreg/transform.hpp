#pragma once

// Affine transforms and dense displacement fields.
//
// A displacement field lives on the target grid and pulls from the source:
//   warped(x) = source(x + u(x))
// Vectors are expressed in voxels of the field's own grid.

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "landmarks.hpp"
#include "volume.hpp"

namespace icreg {

/// 3x4 matrix [A | t] mapping voxel coordinate p to A p + t.
struct AffineTransform {
    std::array<std::array<double, 4>, 3> m{{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}}};

    static AffineTransform identity() { return {}; }

    static AffineTransform translation(const Vec3& t)
    {
        AffineTransform a;
        for (int i = 0; i < 3; ++i)
            a.m[i][3] = t[i];
        return a;
    }

    Vec3 apply(const Vec3& p) const
    {
        Vec3 q{};
        for (int i = 0; i < 3; ++i)
            q[i] = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        return q;
    }

    double det() const
    {
        return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
               m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    }

    void validate() const
    {
        for (const auto& row : m)
            for (double v : row)
                if (!std::isfinite(v))
                    throw Error("AffineTransform: non-finite entry");
        if (!(std::abs(det()) > 1e-9))
            throw Error("AffineTransform: singular linear part (|det| <= 1e-9)");
    }

    AffineTransform inverse() const
    {
        validate();
        const double d = det();
        AffineTransform r;
        auto& a = m;
        r.m[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / d;
        r.m[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / d;
        r.m[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / d;
        r.m[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / d;
        r.m[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / d;
        r.m[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / d;
        r.m[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / d;
        r.m[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / d;
        r.m[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / d;
        for (int i = 0; i < 3; ++i)
            r.m[i][3] = -(r.m[i][0] * a[0][3] + r.m[i][1] * a[1][3] + r.m[i][2] * a[2][3]);
        return r;
    }

    friend bool operator==(const AffineTransform&, const AffineTransform&) = default;
};

template <class Real = double>
class DisplacementField {
public:
    using value_type = Real;

    DisplacementField() = default;

    explicit DisplacementField(Dims dims, Vec3 spacing = {1.0, 1.0, 1.0})
        : dims_(dims), spacing_(spacing), data_(3 * dims.voxels(), Real(0))
    {
        if (dims.nx < 2 || dims.ny < 2 || dims.nz < 2)
            throw Error("DisplacementField: every dimension must be >= 2, got " + dims.str());
    }

    const Dims& dims() const { return dims_; }
    const Vec3& spacing() const { return spacing_; }
    void set_spacing(const Vec3& s) { spacing_ = s; }
    std::size_t voxels() const { return dims_.voxels(); }
    bool empty() const { return data_.empty(); }

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const
    {
        return (z * dims_.ny + y) * dims_.nx + x;
    }

    std::span<Real> component(int k) { return {data_.data() + static_cast<std::size_t>(k) * voxels(), voxels()}; }
    std::span<const Real> component(int k) const
    {
        return {data_.data() + static_cast<std::size_t>(k) * voxels(), voxels()};
    }

    Real& at(int k, std::size_t x, std::size_t y, std::size_t z) { return component(k)[index(x, y, z)]; }
    Real at(int k, std::size_t x, std::size_t y, std::size_t z) const { return component(k)[index(x, y, z)]; }

    Vec3 vec(std::size_t i) const
    {
        const std::size_t n = voxels();
        return {static_cast<double>(data_[i]), static_cast<double>(data_[n + i]), static_cast<double>(data_[2 * n + i])};
    }

    /// Trilinear interpolation of the three components at p, clamped.
    Vec3 sample(double x, double y, double z) const
    {
        return {detail::sample(component(0).data(), dims_, x, y, z),
                detail::sample(component(1).data(), dims_, x, y, z),
                detail::sample(component(2).data(), dims_, x, y, z)};
    }

    std::span<Real> data() & { return data_; }
    std::span<const Real> data() const& { return data_; }
    // a span into a dying temporary would dangle, so hand over the storage
    std::vector<Real> data() && { return std::move(data_); }

    void check_finite() const
    {
        for (std::size_t i = 0; i < data_.size(); ++i)
            if (!std::isfinite(static_cast<double>(data_[i])))
                throw Error("DisplacementField: non-finite value at flat index " + std::to_string(i));
    }

    friend bool operator==(const DisplacementField& a, const DisplacementField& b)
    {
        return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.data_ == b.data_;
    }

private:
    Dims dims_{};
    Vec3 spacing_{1.0, 1.0, 1.0};
    std::vector<Real> data_;
};

namespace detail {

inline void require_same_dims(const Dims& a, const Dims& b, const char* op)
{
    if (!(a == b))
        throw Error(std::string(op) + ": dimension mismatch " + a.str() + " vs " + b.str());
}

} // namespace detail

/// u(p) = A p + t - p on every grid node.
template <class Real = double>
DisplacementField<Real> affine_to_field(const AffineTransform& a, const Dims& dims, const Vec3& spacing = {1, 1, 1})
{
    a.validate();
    DisplacementField<Real> u(dims, spacing);
    auto ux = u.component(0), uy = u.component(1), uz = u.component(2);
    detail::parallel_for(dims.nz, [&](std::size_t z) {
        for (std::size_t y = 0; y < dims.ny; ++y)
            for (std::size_t x = 0; x < dims.nx; ++x) {
                const Vec3 p{double(x), double(y), double(z)};
                const Vec3 q = a.apply(p);
                const std::size_t i = u.index(x, y, z);
                ux[i] = static_cast<Real>(q[0] - p[0]);
                uy[i] = static_cast<Real>(q[1] - p[1]);
                uz[i] = static_cast<Real>(q[2] - p[2]);
            }
    });
    return u;
}

/// out(c, x) = v(c, x + u(x)).
template <class Real>
Volume<Real> warp(const Volume<Real>& v, const DisplacementField<Real>& u)
{
    detail::require_same_dims(v.dims(), u.dims(), "warp");
    const Dims& d = v.dims();
    Volume<Real> out(v.channels(), d, v.spacing());
    auto ux = u.component(0), uy = u.component(1), uz = u.component(2);
    detail::parallel_for(d.nz, [&](std::size_t z) {
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t i = v.index(x, y, z);
                const double px = double(x) + ux[i], py = double(y) + uy[i], pz = double(z) + uz[i];
                for (std::size_t c = 0; c < v.channels(); ++c)
                    out.channel(c)[i] = static_cast<Real>(detail::sample(v.channel(c).data(), d, px, py, pz));
            }
    });
    return out;
}

/// out(x) = inner(x) + outer(x + inner(x)); warping by the result equals
/// warping by `inner` and then by `outer`.
template <class Real>
DisplacementField<Real> compose(const DisplacementField<Real>& outer, const DisplacementField<Real>& inner)
{
    detail::require_same_dims(outer.dims(), inner.dims(), "compose");
    const Dims& d = inner.dims();
    DisplacementField<Real> out(d, inner.spacing());
    detail::parallel_for(d.nz, [&](std::size_t z) {
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t i = inner.index(x, y, z);
                const Vec3 a = inner.vec(i);
                const Vec3 b = outer.sample(double(x) + a[0], double(y) + a[1], double(z) + a[2]);
                for (int k = 0; k < 3; ++k)
                    out.component(k)[i] = static_cast<Real>(a[k] + b[k]);
            }
    });
    return out;
}

/// Inverse-consistency residual: forward field composed over the backward
/// one. Zero wherever the pair are exact inverses.
template <class Real>
DisplacementField<Real> ic_residual(const DisplacementField<Real>& u_st, const DisplacementField<Real>& u_ts)
{
    return compose(u_st, u_ts);
}

/// Carries a field one pyramid step up: align-corners resampling onto
/// `target`, then vectors doubled.
template <class Real>
DisplacementField<Real> upsample_field(const DisplacementField<Real>& u, const Dims& target)
{
    const Dims& s = u.dims();
    for (int a = 0; a < 3; ++a)
        if (target[a] + 1 < 2 * s[a] || target[a] > 2 * s[a] + 1)
            throw Error("upsample_field: target " + target.str() + " is not one pyramid step above " + s.str());
    const Vec3& sp = u.spacing();
    DisplacementField<Real> out(target, {sp[0] / 2.0, sp[1] / 2.0, sp[2] / 2.0});
    Vec3 scale{};
    for (int a = 0; a < 3; ++a)
        scale[a] = double(s[a] - 1) / double(target[a] - 1);
    detail::parallel_for(target.nz, [&](std::size_t z) {
        for (std::size_t y = 0; y < target.ny; ++y)
            for (std::size_t x = 0; x < target.nx; ++x) {
                const Vec3 v = u.sample(double(x) * scale[0], double(y) * scale[1], double(z) * scale[2]);
                const std::size_t i = out.index(x, y, z);
                for (int k = 0; k < 3; ++k)
                    out.component(k)[i] = static_cast<Real>(2.0 * v[k]);
            }
    });
    return out;
}

/// Carries a field one pyramid step down, matching `downsample` for
/// volumes: smoothed and decimated components, vectors halved.
template <class Real>
DisplacementField<Real> downsample_field(const DisplacementField<Real>& u)
{
    Volume<Real> as_volume(3, u.dims(), u.spacing());
    std::copy(u.data().begin(), u.data().end(), as_volume.data().begin());
    const Volume<Real> coarse = downsample(as_volume);
    DisplacementField<Real> out(coarse.dims(), coarse.spacing());
    auto src = coarse.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] = static_cast<Real>(0.5 * src[i]);
    return out;
}

struct WarpedLandmarks {
    LandmarkSet points;
    /// Ids of points that fell outside the field extent and were sampled
    /// at the clamped border.
    std::vector<std::string> clamped;
};

/// p' = p + u(p) for every point; ids preserved.
template <class Real>
WarpedLandmarks warp_landmarks(const LandmarkSet& points, const DisplacementField<Real>& u)
{
    WarpedLandmarks out;
    const Dims& d = u.dims();
    for (const auto& p : points) {
        const bool outside = p.x < 0 || p.y < 0 || p.z < 0 || p.x > double(d.nx - 1) || p.y > double(d.ny - 1) ||
                             p.z > double(d.nz - 1);
        if (outside)
            out.clamped.push_back(p.id);
        const Vec3 v = u.sample(p.x, p.y, p.z);
        out.points.add({p.id, p.x + v[0], p.y + v[1], p.z + v[2]});
    }
    return out;
}

} // namespace icreg
