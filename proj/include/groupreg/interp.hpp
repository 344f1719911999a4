#pragma once

// Trilinear interpolation kernels shared by warping, field algebra and the
// network's interpolation layers. Sampling outside the grid clamps the
// coordinate to the nearest valid position.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "groupreg/volume.hpp"

namespace groupreg::interp {

struct AxisWeight {
    int i0;       // lower neighbour, always in [0, n-2]
    double t;     // weight of i0 + 1
    bool inside;  // false when the coordinate was clamped
};

inline AxisWeight axis_weight(double p, int n) noexcept {
    const double hi = static_cast<double>(n - 1);
    const bool inside = p >= 0.0 && p <= hi;
    const double q = std::clamp(p, 0.0, hi);
    int i0 = static_cast<int>(std::floor(q));
    if (i0 > n - 2) i0 = n - 2;
    return {i0, q - i0, inside};
}

/// Trilinear sample of a scalar volume at continuous (z, y, x).
double sample(std::span<const double> data, const Dims3& dims, const Vec3& p) noexcept;

/// Sample plus the partial derivatives with respect to (z, y, x). Derivatives
/// along clamped axes are zero.
double sample_with_gradient(std::span<const double> data, const Dims3& dims, const Vec3& p, Vec3& grad) noexcept;

/// Adjoint of `sample` with respect to the data: adds `value` times the
/// trilinear weights into `data`.
void scatter(std::span<double> data, const Dims3& dims, const Vec3& p, double value) noexcept;

/// Vector sample of a component-major 3-channel field.
Vec3 sample_vector(std::span<const double> components, const Dims3& dims, const Vec3& p) noexcept;

/// Corner-aligned separable trilinear resampling between two grids: target
/// index j on an axis maps to source coordinate j * (n_src - 1) / (n_dst - 1).
/// Works on channel-major multi-channel buffers.
class Resampler {
public:
    Resampler(Dims3 from, Dims3 to);

    const Dims3& from() const noexcept { return from_; }
    const Dims3& to() const noexcept { return to_; }

    /// out[c] = R in[c] for each channel. `out` is resized.
    void apply(std::span<const double> in, int channels, std::vector<double>& out) const;
    /// grad_in[c] = R^T grad_out[c]. `grad_in` is resized and overwritten.
    void adjoint(std::span<const double> grad_out, int channels, std::vector<double>& grad_in) const;

private:
    struct Tap {
        int i0;
        double t;
    };
    Dims3 from_;
    Dims3 to_;
    std::array<std::vector<Tap>, 3> taps_;
};

} // namespace groupreg::interp
