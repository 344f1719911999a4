#include "groupreg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace groupreg {

namespace {

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

} // namespace

Grid3 Grid3::make(Dims3 dims, Vec3 spacing) {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 2) {
            throw Error("invalid_dims", "grid dims must all be >= 2, got " + to_string(dims));
        }
        if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
            throw Error("invalid_spacing", "grid spacing must be positive and finite");
        }
    }
    return Grid3{dims, spacing};
}

bool Grid3::contains(const Vec3& p) const noexcept {
    for (int a = 0; a < 3; ++a) {
        if (!(p[a] >= 0.0 && p[a] <= dims[a] - 1)) return false;
    }
    return true;
}

std::string to_string(const Dims3& d) {
    std::ostringstream os;
    os << d[0] << "x" << d[1] << "x" << d[2];
    return os.str();
}

Volume::Volume(Grid3 grid, std::vector<double> data) : grid_(Grid3::make(grid.dims, grid.spacing)), data_(std::move(data)) {
    if (data_.size() != grid_.size()) {
        throw Error("dims_mismatch", "volume data length " + std::to_string(data_.size()) + " does not match grid " +
                                         to_string(grid_.dims) + " (" + std::to_string(grid_.size()) + " voxels)");
    }
    if (!all_finite(data_)) throw Error("non_finite", "volume data contains NaN or Inf");
}

Volume make_volume(Dims3 dims, Vec3 spacing, std::vector<double> data) {
    return Volume(Grid3::make(dims, spacing), std::move(data));
}

ImageGroup::ImageGroup(std::vector<Volume> volumes, std::vector<std::string> phase_labels)
    : volumes_(std::move(volumes)), labels_(std::move(phase_labels)) {
    if (volumes_.size() < 2) throw Error("group_too_small", "an image group needs at least 2 volumes");
    for (const auto& v : volumes_) {
        if (!v.grid().compatible(volumes_.front().grid())) {
            throw Error("dims_mismatch", "all volumes of a group must share one grid");
        }
    }
    if (labels_.empty()) {
        for (std::size_t n = 0; n < volumes_.size(); ++n) {
            std::ostringstream os;
            os << 'T' << std::setw(2) << std::setfill('0') << n * 10;
            labels_.push_back(os.str());
        }
    }
    if (labels_.size() != volumes_.size()) throw Error("label_mismatch", "phase label count differs from volume count");
}

DisplacementField::DisplacementField(Grid3 grid, std::vector<double> components)
    : grid_(Grid3::make(grid.dims, grid.spacing)), data_(std::move(components)) {
    if (data_.size() != 3 * grid_.size()) {
        throw Error("dims_mismatch", "field component array length " + std::to_string(data_.size()) +
                                         " does not equal 3x" + std::to_string(grid_.size()));
    }
    if (!all_finite(data_)) throw Error("non_finite", "displacement field contains NaN or Inf");
}

DisplacementField DisplacementField::zeros(const Grid3& grid) {
    return DisplacementField(grid, std::vector<double>(3 * grid.size(), 0.0));
}

DisplacementField DisplacementField::constant(const Grid3& grid, const Vec3& v) {
    std::vector<double> data(3 * grid.size());
    for (int c = 0; c < 3; ++c) std::fill_n(data.begin() + c * grid.size(), grid.size(), v[c]);
    return DisplacementField(grid, std::move(data));
}

FieldSet::FieldSet(std::vector<DisplacementField> fields) : fields_(std::move(fields)) {
    if (fields_.empty()) throw Error("empty_fieldset", "a field set needs at least one field");
    for (const auto& f : fields_) {
        if (!f.grid().compatible(fields_.front().grid())) {
            throw Error("dims_mismatch", "all fields of a set must share one grid");
        }
    }
}

FieldSet FieldSet::for_group(const ImageGroup& group, std::vector<DisplacementField> fields) {
    FieldSet set(std::move(fields));
    if (set.size() != group.size()) {
        throw Error("count_mismatch", "field set has " + std::to_string(set.size()) + " fields but the group has " +
                                          std::to_string(group.size()) + " phases");
    }
    if (!set.grid().compatible(group.grid())) throw Error("dims_mismatch", "field set grid differs from group grid");
    return set;
}

FieldSet FieldSet::zeros(const Grid3& grid, std::size_t n) {
    return FieldSet(std::vector<DisplacementField>(n, DisplacementField::zeros(grid)));
}

void check_inside(const LandmarkSet& lm, const Grid3& grid) {
    const double shift = lm.convention == LandmarkConvention::one_based ? 1.0 : 0.0;
    for (std::size_t k = 0; k < lm.points.size(); ++k) {
        const auto& p = lm.points[k];
        const Vec3 q{p[0] - shift, p[1] - shift, p[2] - shift};
        if (!grid.contains(q)) {
            std::ostringstream os;
            os << "landmark " << k << " (" << p[0] << ", " << p[1] << ", " << p[2] << ") lies outside grid "
               << to_string(grid.dims);
            throw Error("landmark_outside", os.str());
        }
    }
}

LandmarkSet convert_landmarks(const LandmarkSet& lm, LandmarkConvention target, const Grid3& grid) {
    LandmarkSet out = lm;
    if (lm.convention != target) {
        const double delta = target == LandmarkConvention::zero_based ? -1.0 : 1.0;
        for (auto& p : out.points) {
            for (double& c : p) c += delta;
        }
        out.convention = target;
    }
    check_inside(out, grid);
    return out;
}

} // namespace groupreg
