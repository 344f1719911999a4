#pragma once

// Landmark accuracy (TRE), repeatability, and the figure exports: TRE
// histograms, loss curves and intensity-difference maps written as PGM images
// with CSV companions.

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "groupreg/field_ops.hpp"
#include "groupreg/oneshot.hpp"
#include "groupreg/volume.hpp"

namespace groupreg {

struct TREStats {
    std::vector<double> errors;  // mm, one per landmark
    double mean = 0.0;
    double std = 0.0;   // population
    double rmse = 0.0;  // sqrt(mean of squared errors)
    static constexpr std::array<double, 3> kThresholds{1.0, 1.5, 2.0};
    /// Fraction of landmarks with error <= each threshold.
    std::array<double, 3> fraction_below{};
};

TREStats compute_stats(std::vector<double> errors);

/// ||(moved - reference) * spacing||_2 per landmark.
TREStats tre(const LandmarkSet& moved, const LandmarkSet& reference, const Vec3& spacing);

struct Evaluation {
    TREStats stats;
    bool inversion_converged = true;
    std::size_t source_phase = 0;
    std::size_t target_phase = 0;
};

/// Transports `source` (annotated in phase m) with the m -> n pairwise field
/// and compares against `target` (annotated in phase n).
Evaluation evaluate_registration(const FieldSet& fields, const LandmarkSet& source, const LandmarkSet& target,
                                 std::size_t m, std::size_t n, const Vec3& spacing,
                                 const InversionParams& params = {});

struct PhaseLandmarks {
    std::size_t phase;
    LandmarkSet landmarks;
};

/// One Evaluation per target (e.g. T00 -> T10 ... T50).
std::vector<Evaluation> evaluate_phases(const FieldSet& fields, const PhaseLandmarks& source,
                                        const std::vector<PhaseLandmarks>& targets, const Vec3& spacing,
                                        const InversionParams& params = {});

struct Repeatability {
    double mean = 0.0;
    double std = 0.0;
};

/// Distance of every landmark of every run to its cross-run mean position,
/// summarized over all landmarks and runs.
Repeatability repeatability(const std::vector<LandmarkSet>& runs, const Vec3& spacing);

struct Histogram {
    double bin_width = 0.5;
    std::vector<std::size_t> counts;  // last bin collects everything beyond
};

Histogram tre_histogram(const std::vector<double>& errors, double bin_width = 0.5, std::size_t bins = 20);

nlohmann::json stats_to_json(const TREStats& stats, bool include_errors = true);
std::string format_stats_table(const std::vector<std::pair<std::string, TREStats>>& rows);

// ---------------------------------------------------------------------------
// Image exports.

/// 8-bit grayscale image, row-major.
struct GrayImage {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> pixels;
};

void write_pgm(const GrayImage& image, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

struct SliceSpec {
    int axis = 0;   // 0 = z (axial), 1 = y (coronal), 2 = x (sagittal)
    int index = 0;
};

/// Pixel = clamp(round(127.5 + 127.5 * diff / range), 0, 255).
unsigned char difference_to_gray(double diff, double range);

/// Phase n minus the template mapped into phase n (through the inverse of
/// D_n). Writes diff_<label>.pgm and diff_<label>.csv per phase and returns
/// the PGM paths.
std::vector<std::filesystem::path> export_difference_maps(const ImageGroup& group, const FieldSet& fields,
                                                          const Volume& tmpl, const SliceSpec& slice,
                                                          const std::filesystem::path& out_dir, double range = 0.5,
                                                          const InversionParams& params = {});

/// 2D difference slices (phase minus mapped template) without writing files.
std::vector<std::vector<double>> difference_slices(const ImageGroup& group, const FieldSet& fields,
                                                   const Volume& tmpl, const SliceSpec& slice,
                                                   const InversionParams& params = {});

void write_histogram(const Histogram& h, const std::filesystem::path& pgm, const std::filesystem::path& csv);
void write_loss_curve(const std::vector<LossBreakdown>& trace, const std::filesystem::path& pgm);

} // namespace groupreg
