#pragma once

// Central finite-difference check of objective_gradient over every voxel and
// component.

#include <cmath>
#include <random>

#include <icreg/objective.hpp>

#include "synthetic.hpp"

namespace icreg::fixtures {

struct GradCheck {
    double max_relative = 0.0; // over entries with |analytic| >= 1e-6
    double max_absolute_small = 0.0; // over entries with |analytic| < 1e-6
    std::size_t entries = 0;
};

/// Random displacement whose sample points x + u(x) stay at least 0.05
/// voxel away from grid planes, so a step of h never crosses a kink of the
/// trilinear interpolant.
inline DisplacementField<double> kink_free_field(Dims d, double amplitude, unsigned seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> whole(-int(amplitude), int(amplitude));
    std::uniform_real_distribution<double> frac(0.05, 0.95);
    DisplacementField<double> u(d);
    for (auto& x : u.data())
        x = double(whole(rng)) + frac(rng);
    return u;
}

inline GradCheck check_gradient(const Volume<double>& s, const Volume<double>& t, DisplacementField<double> u,
                                const ObjectiveConfig& cfg, double h = 1e-4,
                                const WeightMask<double>* mask = nullptr)
{
    const auto g = objective_gradient(s, t, u, cfg, mask);
    GradCheck r;
    auto data = u.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double keep = data[i];
        data[i] = keep + h;
        const double fp = objective_value(s, t, u, cfg, mask);
        data[i] = keep - h;
        const double fm = objective_value(s, t, u, cfg, mask);
        data[i] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        const double a = g.data()[i];
        if (std::abs(a) < 1e-6)
            r.max_absolute_small = std::max(r.max_absolute_small, std::abs(a - fd));
        else
            r.max_relative = std::max(r.max_relative, std::abs(a - fd) / std::abs(a));
        ++r.entries;
    }
    return r;
}

} // namespace icreg::fixtures
