#pragma once

// Groupwise registration objective: local NCC similarity against the implicit
// template, image-weighted smoothness, and cyclic consistency. Every term has
// an analytic gradient so the objective can be back-propagated into the
// displacement fields (and from there into the network).

#include <span>
#include <vector>

#include "groupreg/volume.hpp"

namespace groupreg {

/// Added under the NCC square root so flat windows stay finite.
inline constexpr double kNccEpsilon = 1e-5;

struct LossWeights {
    double lambda0 = 1e-3;  // smoothness
    double lambda1 = 1e-2;  // cyclic
    int ncc_window = 5;
    /// Treat the template gradient in the smoothness term as a constant.
    bool block_template_gradient = false;

    void validate() const;
};

struct LossBreakdown {
    double similarity = 0.0;
    double smoothness = 0.0;
    double cyclic = 0.0;
    double total = 0.0;
};

/// Mean over voxels of the windowed correlation coefficient. Window statistics
/// only use voxels inside the grid, so border windows are truncated.
double local_ncc(const Volume& f, const Volume& g, int window);

/// -(1/N) sum_n local_ncc(warped_n, template).
double similarity_loss(const ImageGroup& warped, const Volume& tmpl, int window);

/// Forward-difference L1 field gradient weighted by exp(-|template gradient|).
/// The forward difference at the last index of an axis is zero.
double smoothness_loss(const FieldSet& fields, const Volume& tmpl);

/// RMS over voxels and components of the per-voxel displacement sum.
double cyclic_loss(const FieldSet& fields);

LossBreakdown total_loss(const ImageGroup& warped, const Volume& tmpl, const FieldSet& fields,
                         const LossWeights& weights);

namespace kernels {

// Raw-buffer kernels. `n` counts volumes/fields packed back to back; fields
// are component-major per phase (3 * V values each). Gradients are
// accumulated (+=) after multiplication by `scale`.

double local_ncc(const Dims3& dims, std::span<const double> f, std::span<const double> g, int window,
                 std::span<double> grad_f = {}, std::span<double> grad_g = {}, double scale = 1.0);

double smoothness(const Dims3& dims, std::span<const double> fields, std::size_t n, std::span<const double> tmpl,
                  std::span<double> grad_fields = {}, std::span<double> grad_tmpl = {}, double scale = 1.0);

double cyclic(const Dims3& dims, std::span<const double> fields, std::size_t n,
              std::span<double> grad_fields = {}, double scale = 1.0);

} // namespace kernels

/// The full objective evaluated from the unwarped images and a packed set of
/// displacement fields: warp, implicit template, losses, and optionally the
/// gradient with respect to every displacement component.
struct GroupObjective {
    LossBreakdown loss;
    std::vector<double> grad_fields;  // empty unless requested
    std::vector<double> warped;       // N * V
    std::vector<double> tmpl;         // V
};

GroupObjective evaluate_group_objective(const ImageGroup& images, std::span<const double> fields,
                                        const LossWeights& weights, bool want_gradient);

} // namespace groupreg
