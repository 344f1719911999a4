#pragma once

// Dataset ingestion, preprocessing, synthetic phantoms and on-disk formats.
// File layouts are documented in docs/formats.md.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "groupreg/volume.hpp"

namespace groupreg {

enum class AxisOrder { xyz, zyx };

struct LandmarkFile {
    std::filesystem::path path;
    std::size_t phase_index = 0;
    LandmarkConvention convention = LandmarkConvention::one_based;
    AxisOrder axis_order = AxisOrder::xyz;
};

struct PhaseFile {
    std::string label;
    std::filesystem::path path;
};

/// Everything needed to read one headerless case from disk.
struct CaseMeta {
    std::string case_id;
    Dims3 dims{};      // (D, H, W)
    Vec3 spacing{};    // (sz, sy, sx) mm
    double intensity_offset = 0.0;
    double intensity_divisor = 1000.0;
    std::vector<PhaseFile> phases;
    std::vector<LandmarkFile> landmarks;
    int crop_margin = 8;
};

/// Reads a JSON manifest. Relative paths resolve against `root` when given,
/// otherwise against the manifest's directory.
CaseMeta load_manifest(const std::filesystem::path& manifest,
                       const std::optional<std::filesystem::path>& root = std::nullopt);

struct CaseData {
    ImageGroup group;                  // raw intensities
    std::vector<LandmarkSet> landmarks;  // zero-based (z, y, x)
    std::vector<std::size_t> landmark_phases;
};

CaseData load_case(const CaseMeta& meta);

/// Headerless signed 16-bit little-endian volume, x fastest.
Volume read_raw_int16(const std::filesystem::path& path, const Grid3& grid);

/// Whitespace-separated triples, one landmark per line.
LandmarkSet read_landmarks(const std::filesystem::path& path, LandmarkConvention convention, AxisOrder order);
void write_landmarks(const LandmarkSet& lm, const std::filesystem::path& path, AxisOrder order);

/// v -> (v - offset) / divisor.
Volume normalize(const Volume& volume, double divisor = 1000.0, double offset = 0.0);

struct CropBox {
    Dims3 lo{};  // inclusive
    Dims3 hi{};  // inclusive
};

struct CropResult {
    ImageGroup group;
    std::vector<LandmarkSet> landmarks;
    Dims3 offset{};  // original = cropped + offset
};

/// Box = [floor(min) - margin, ceil(max) + margin] over every landmark of
/// every set, clamped to the grid.
CropBox landmark_crop_box(const Grid3& grid, const std::vector<LandmarkSet>& landmark_sets, int margin);
CropResult crop(const ImageGroup& group, const std::vector<LandmarkSet>& landmark_sets, const CropBox& box);
CropResult crop_to_landmarks(const ImageGroup& group, const std::vector<LandmarkSet>& landmark_sets, int margin);

// ---------------------------------------------------------------------------
// Synthetic phantom with analytic motion.
//
// Phase n is the base texture seen through T_n(x) = x + D_n(x) with
//   D_n(x) = A * s_n * g(x) * (1, 0.5 sin(pi u_x), 0.5 cos(pi u_y))
// where u_a = x_a / (dim_a - 1), g(x) = prod_a sin^2(pi u_a), and
// s_n = sin(2 pi n / N) for periodic specs, n / (N - 1) otherwise.
// The phase image satisfies I_n(x + D_n(x)) = B(x).

struct PhantomSpec {
    Dims3 dims{48, 48, 48};
    int num_phases = 5;
    double max_amplitude = 5.0;  // voxels
    int num_landmarks = 100;
    std::uint64_t seed = 0;
    bool periodic = true;

    void validate() const;
};

struct Phantom {
    ImageGroup group;
    FieldSet truth;                    // D_n sampled on the grid
    std::vector<LandmarkSet> landmarks;  // per phase, zero-based, row-aligned
    LandmarkSet anatomy;               // the landmarks in template (base) space
};

/// Analytic D_n at a continuous point.
Vec3 phantom_displacement(const PhantomSpec& spec, int phase, const Vec3& p);
Phantom make_phantom(const PhantomSpec& spec);

// ---------------------------------------------------------------------------
// Field and volume files.

void write_field(const DisplacementField& field, const std::filesystem::path& path);
DisplacementField read_field(const std::filesystem::path& path);

void write_volume(const Volume& volume, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);

struct FieldSetFile {
    FieldSet fields;
    std::vector<std::string> phase_labels;
    Dims3 crop_offset{};
};

/// Directory with fieldset.json and one .dvf file per phase.
void write_fieldset(const FieldSetFile& set, const std::filesystem::path& dir);
FieldSetFile read_fieldset(const std::filesystem::path& dir);

} // namespace groupreg
