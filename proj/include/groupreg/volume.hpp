#pragma once

// Core grid, volume and displacement-field types.
//
// Memory layout is (z, y, x) slowest-to-fastest everywhere. Displacement
// vectors are ordered (dz, dy, dx) and expressed in voxel units of the grid
// they live on. All types validate on construction and are immutable after.

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace groupreg {

using Dims3 = std::array<int, 3>;     // (D, H, W)
using Vec3 = std::array<double, 3>;   // (z, y, x)

/// Error raised for contract violations. `code()` is a short machine-readable
/// token (e.g. "dims_mismatch") reported by the CLI.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

struct Grid3 {
    Dims3 dims{2, 2, 2};
    Vec3 spacing{1.0, 1.0, 1.0};

    /// Validating factory: every dim >= 2, every spacing > 0.
    static Grid3 make(Dims3 dims, Vec3 spacing = {1.0, 1.0, 1.0});

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int z, int y, int x) const noexcept {
        return (static_cast<std::size_t>(z) * dims[1] + y) * dims[2] + x;
    }
    bool contains(const Vec3& p) const noexcept;

    /// Warping compatibility: equal dims. Spacing is only used for mm conversion.
    bool compatible(const Grid3& other) const noexcept { return dims == other.dims; }
};

std::string to_string(const Dims3& d);

class Volume {
public:
    Volume(Grid3 grid, std::vector<double> data);

    const Grid3& grid() const noexcept { return grid_; }
    const Dims3& dims() const noexcept { return grid_.dims; }
    std::size_t size() const noexcept { return data_.size(); }
    std::span<const double> data() const noexcept { return data_; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }
    double at(int z, int y, int x) const noexcept { return data_[grid_.index(z, y, x)]; }

private:
    Grid3 grid_;
    std::vector<double> data_;
};

Volume make_volume(Dims3 dims, Vec3 spacing, std::vector<double> data);

class ImageGroup {
public:
    /// Labels default to "T00", "T10", ... when empty.
    explicit ImageGroup(std::vector<Volume> volumes, std::vector<std::string> phase_labels = {});

    std::size_t size() const noexcept { return volumes_.size(); }
    const Grid3& grid() const noexcept { return volumes_.front().grid(); }
    const Volume& operator[](std::size_t n) const noexcept { return volumes_[n]; }
    const std::vector<Volume>& volumes() const noexcept { return volumes_; }
    const std::vector<std::string>& phase_labels() const noexcept { return labels_; }

private:
    std::vector<Volume> volumes_;
    std::vector<std::string> labels_;
};

/// Component-major storage: all dz values, then all dy, then all dx.
class DisplacementField {
public:
    DisplacementField(Grid3 grid, std::vector<double> components);
    static DisplacementField zeros(const Grid3& grid);
    static DisplacementField constant(const Grid3& grid, const Vec3& v);

    const Grid3& grid() const noexcept { return grid_; }
    const Dims3& dims() const noexcept { return grid_.dims; }
    std::size_t voxels() const noexcept { return grid_.size(); }
    std::span<const double> components() const noexcept { return data_; }
    std::span<const double> component(int c) const noexcept {
        return std::span<const double>(data_).subspan(c * voxels(), voxels());
    }
    Vec3 at(std::size_t i) const noexcept {
        const std::size_t v = voxels();
        return {data_[i], data_[v + i], data_[2 * v + i]};
    }
    Vec3 at(int z, int y, int x) const noexcept { return at(grid_.index(z, y, x)); }

private:
    Grid3 grid_;
    std::vector<double> data_;
};

class FieldSet {
public:
    explicit FieldSet(std::vector<DisplacementField> fields);
    /// Also checks that the count matches the group it registers.
    static FieldSet for_group(const ImageGroup& group, std::vector<DisplacementField> fields);
    static FieldSet zeros(const Grid3& grid, std::size_t n);

    std::size_t size() const noexcept { return fields_.size(); }
    const Grid3& grid() const noexcept { return fields_.front().grid(); }
    const DisplacementField& operator[](std::size_t n) const noexcept { return fields_[n]; }
    const std::vector<DisplacementField>& fields() const noexcept { return fields_; }

private:
    std::vector<DisplacementField> fields_;
};

enum class LandmarkConvention { zero_based, one_based };

/// Landmarks are stored in (z, y, x) order as continuous voxel coordinates.
/// File readers map the source axis order onto this.
struct LandmarkSet {
    std::vector<Vec3> points;
    LandmarkConvention convention = LandmarkConvention::zero_based;

    std::size_t size() const noexcept { return points.size(); }
};

/// Throws if any point falls outside `grid` under the set's own convention.
void check_inside(const LandmarkSet& lm, const Grid3& grid);

LandmarkSet convert_landmarks(const LandmarkSet& lm, LandmarkConvention target, const Grid3& grid);

} // namespace groupreg
