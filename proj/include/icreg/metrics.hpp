#pragma once

// Landmark-based evaluation: median landmark distance in mm, the fraction of
// landmarks that got closer, and smoothness statistics of a field.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "common.hpp"
#include "landmarks.hpp"
#include "transform.hpp"

namespace icreg {

/// Distances in mm between equally-identified points of two sets, in the
/// order of `a`.
inline std::vector<double> landmark_distances(const LandmarkSet& a, const LandmarkSet& b, const Vec3& spacing)
{
    std::vector<std::string> missing;
    for (const auto& p : a)
        if (!b.find(p.id))
            missing.push_back(p.id);
    for (const auto& p : b)
        if (!a.find(p.id))
            missing.push_back(p.id);
    if (!missing.empty()) {
        std::string msg = "landmark id sets differ; unmatched ids:";
        for (const auto& id : missing)
            msg += " " + id;
        throw Error(msg);
    }
    std::vector<double> out;
    out.reserve(a.size());
    for (const auto& p : a) {
        const Landmark& q = *b.find(p.id);
        const double dx = (p.x - q.x) * spacing[0], dy = (p.y - q.y) * spacing[1], dz = (p.z - q.z) * spacing[2];
        out.push_back(std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    return out;
}

/// Median; the mean of the two central values for even counts.
inline double median(std::vector<double> v)
{
    if (v.empty())
        throw Error("median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double case_mae(const LandmarkSet& warped_target, const LandmarkSet& source, const Vec3& spacing)
{
    if (warped_target.empty() && source.empty())
        throw Error("case_mae: no landmarks");
    return median(landmark_distances(warped_target, source, spacing));
}

/// Fraction of landmarks whose distance strictly decreased. Ties count as
/// not improved.
inline double robustness(const std::vector<double>& before, const std::vector<double>& after)
{
    if (before.empty())
        throw Error("robustness: no landmarks");
    if (before.size() != after.size())
        throw Error("robustness: before/after lengths differ");
    std::size_t improved = 0;
    for (std::size_t i = 0; i < before.size(); ++i)
        if (after[i] < before[i])
            ++improved;
    return double(improved) / double(before.size());
}

struct JacobianStats {
    double fraction_nonpositive = 0.0;
    double stddev = 0.0;
    double mean = 0.0;
};

/// Determinant of I + grad(u) by central differences at interior voxels.
template <class Real>
JacobianStats jacobian_stats(const DisplacementField<Real>& u)
{
    const Dims& d = u.dims();
    if (d.nx < 3 || d.ny < 3 || d.nz < 3)
        throw Error("jacobian_stats: every dimension must be >= 3");
    const std::size_t sx = 1, sy = d.nx, sz = d.nx * d.ny;
    const std::size_t interior = (d.nx - 2) * (d.ny - 2) * (d.nz - 2);
    std::vector<double> jac(interior);
    detail::parallel_for(d.nz - 2, [&](std::size_t zi) {
        const std::size_t z = zi + 1;
        std::size_t o = zi * (d.ny - 2) * (d.nx - 2);
        for (std::size_t y = 1; y + 1 < d.ny; ++y)
            for (std::size_t x = 1; x + 1 < d.nx; ++x, ++o) {
                const std::size_t i = u.index(x, y, z);
                double j[3][3];
                for (int k = 0; k < 3; ++k) {
                    const Real* c = u.component(k).data();
                    j[k][0] = 0.5 * (c[i + sx] - c[i - sx]);
                    j[k][1] = 0.5 * (c[i + sy] - c[i - sy]);
                    j[k][2] = 0.5 * (c[i + sz] - c[i - sz]);
                    j[k][k] += 1.0;
                }
                jac[o] = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                         j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                         j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
            }
    });
    JacobianStats s;
    double sum = 0.0;
    std::size_t nonpos = 0;
    for (double v : jac) {
        sum += v;
        if (v <= 0.0)
            ++nonpos;
    }
    s.mean = sum / double(interior);
    double ss = 0.0;
    for (double v : jac)
        ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / double(interior));
    s.fraction_nonpositive = double(nonpos) / double(interior);
    return s;
}

struct CaseScore {
    std::string case_id;
    double mae_mm = 0.0;
    double robustness = 0.0;
    std::vector<double> distances_before;
    std::vector<double> distances_after;
    std::optional<JacobianStats> smoothness;
    std::vector<std::string> warnings;
};

/// Scores one case. `warped_target` are the target landmarks after warping,
/// `target_before` the same landmarks unwarped, `source` the reference.
inline CaseScore score_case(std::string case_id, const LandmarkSet& warped_target, const LandmarkSet& target_before,
                            const LandmarkSet& source, const Vec3& spacing)
{
    CaseScore s;
    s.case_id = std::move(case_id);
    s.distances_after = landmark_distances(warped_target, source, spacing);
    // Align "before" distances to the id order of the warped set.
    LandmarkSet ordered;
    for (const auto& p : warped_target) {
        const Landmark* q = target_before.find(p.id);
        if (!q)
            throw Error("score_case: id '" + p.id + "' missing from the unwarped landmarks");
        ordered.add(*q);
    }
    if (ordered.size() != target_before.size())
        throw Error("score_case: unwarped landmarks contain ids absent from the warped set");
    s.distances_before = landmark_distances(ordered, source, spacing);
    s.mae_mm = median(s.distances_after);
    s.robustness = robustness(s.distances_before, s.distances_after);
    return s;
}

/// Column order of the delimited score table.
inline constexpr const char* score_table_header =
    "case_id,mae_mm,robustness,fraction_nonpositive_jacobian,stddev_jacobian";

inline void write_score_row(std::ostream& os, const CaseScore& s)
{
    const auto old = os.precision(10);
    os << s.case_id << ',' << s.mae_mm << ',' << s.robustness << ',';
    if (s.smoothness)
        os << s.smoothness->fraction_nonpositive << ',' << s.smoothness->stddev;
    else
        os << ',';
    os << '\n';
    os.precision(old);
}

} // namespace icreg
