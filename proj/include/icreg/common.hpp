#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace icreg {

/// Every library failure surfaces as this type; the message names the
/// operation and the offending value where one exists.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Vec3 = std::array<double, 3>;

/// Voxel counts per axis.
struct Dims {
    std::size_t nx = 0;
    std::size_t ny = 0;
    std::size_t nz = 0;

    constexpr std::size_t voxels() const { return nx * ny * nz; }
    constexpr std::size_t operator[](int axis) const { return axis == 0 ? nx : axis == 1 ? ny : nz; }
    friend constexpr bool operator==(const Dims&, const Dims&) = default;

    std::string str() const
    {
        return "(" + std::to_string(nx) + ", " + std::to_string(ny) + ", " + std::to_string(nz) + ")";
    }
};

/// Continuous voxel coordinate; voxel centers sit at integers, 0-based.
struct GridPoint {
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;
};

namespace detail {

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t n)
{
    if (i < 0)
        return 0;
    if (static_cast<std::size_t>(i) >= n)
        return n - 1;
    return static_cast<std::size_t>(i);
}

/// Runs f(i) for i in [0, n). Iterations must not touch shared state.
template <class F>
void parallel_for(std::size_t n, F&& f)
{
    const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < count; ++i)
        f(static_cast<std::size_t>(i));
}

/// Sum of f(i) over [0, n). Partials are produced in parallel and then
/// accumulated in index order, so the result does not depend on the
/// thread count.
template <class F>
double ordered_sum(std::size_t n, F&& f)
{
    std::vector<double> partial(n, 0.0);
    parallel_for(n, [&](std::size_t i) { partial[i] = f(i); });
    double total = 0.0;
    for (double p : partial)
        total += p;
    return total;
}

inline void set_thread_count(int threads)
{
#ifdef _OPENMP
    if (threads > 0)
        omp_set_num_threads(threads);
#else
    (void)threads;
#endif
}

} // namespace detail
} // namespace icreg
