#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "groupreg/volume.hpp"

namespace testing_helpers {

using namespace groupreg;

inline DisplacementField field_from(const Grid3& grid, const std::function<Vec3(double, double, double)>& fn) {
    const std::size_t v = grid.size();
    std::vector<double> c(3 * v);
    std::size_t i = 0;
    for (int z = 0; z < grid.dims[0]; ++z)
        for (int y = 0; y < grid.dims[1]; ++y)
            for (int x = 0; x < grid.dims[2]; ++x, ++i) {
                const Vec3 d = fn(z, y, x);
                c[i] = d[0];
                c[v + i] = d[1];
                c[2 * v + i] = d[2];
            }
    return DisplacementField(grid, std::move(c));
}

inline Volume volume_from(const Grid3& grid, const std::function<double(double, double, double)>& fn) {
    std::vector<double> data(grid.size());
    std::size_t i = 0;
    for (int z = 0; z < grid.dims[0]; ++z)
        for (int y = 0; y < grid.dims[1]; ++y)
            for (int x = 0; x < grid.dims[2]; ++x, ++i) data[i] = fn(z, y, x);
    return Volume(grid, std::move(data));
}

/// Smooth sinusoidal field: amplitude `amp` voxels per component with
/// wavelength `wavelength` voxels, so the largest derivative is about
/// 2*pi*amp/wavelength.
inline DisplacementField sinusoid_field(const Grid3& grid, double amp, double wavelength, double phase = 0.0) {
    const double k = 2.0 * M_PI / wavelength;
    return field_from(grid, [=](double z, double y, double x) {
        return Vec3{amp * std::sin(k * x + phase), amp * std::cos(k * z + 0.5 * phase),
                    amp * std::sin(k * y + 0.3 + phase)};
    });
}

/// Largest |a - b| over interior voxels (a band of `border` voxels excluded).
inline double interior_max_diff(const DisplacementField& a, const DisplacementField& b, int border) {
    const auto& d = a.dims();
    double worst = 0.0;
    for (int z = border; z < d[0] - border; ++z)
        for (int y = border; y < d[1] - border; ++y)
            for (int x = border; x < d[2] - border; ++x) {
                const Vec3 p = a.at(z, y, x), q = b.at(z, y, x);
                for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(p[c] - q[c]));
            }
    return worst;
}

inline double interior_max_abs(const DisplacementField& a, int border) {
    return interior_max_diff(a, DisplacementField::zeros(a.grid()), border);
}

inline Volume random_volume(const Grid3& grid, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(grid.size());
    for (double& x : v) x = dist(rng);
    return Volume(grid, std::move(v));
}

inline std::vector<double> to_vector(std::span<const double> s) { return std::vector<double>(s.begin(), s.end()); }

} // namespace testing_helpers
