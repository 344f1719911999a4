#pragma once

// Displacement-field algebra. A transformation is always T(x) = x + D(x);
// only the displacement D is stored. Every sampling operation is trilinear
// with border clamping.

#include "groupreg/volume.hpp"

namespace groupreg {

struct InversionParams {
    int max_iters = 50;
    double tol = 0.01;  // max per-component update, voxels

    void validate() const;
};

struct InversionResult {
    DisplacementField field;
    bool converged = false;
    int iterations = 0;
    double last_update = 0.0;  // max-abs component change of the final iteration
};

/// output(x) = moving(x + D(x)).
Volume warp(const Volume& moving, const DisplacementField& field);

/// Resamples each component onto `target_dims` (corner-aligned). Component
/// values are not rescaled: they already are original-resolution voxel units.
DisplacementField rescale_field(const DisplacementField& field, const Dims3& target_dims);

/// Fixed-point inverse: v <- -D(x + v), starting from v = 0.
InversionResult invert_field(const DisplacementField& field, const InversionParams& params = {});

/// Displacement of outer∘inner: D_outer(x + D_inner(x)) + D_inner(x).
DisplacementField compose(const DisplacementField& outer, const DisplacementField& inner);

/// Field taking phase-m coordinates to phase-n coordinates:
/// compose(D_n, invert(D_m)). `converged` reflects the inversion of D_m.
InversionResult pairwise_field(const FieldSet& fields, std::size_t m, std::size_t n,
                               const InversionParams& params = {});

/// p -> p + D(p). Landmarks must be zero-based and inside the field grid.
LandmarkSet transport_landmarks(const LandmarkSet& lm, const DisplacementField& field);

/// Largest absolute forward difference of any component along any axis.
double max_spatial_derivative(const DisplacementField& field);

} // namespace groupreg
