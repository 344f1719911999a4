#include "groupreg/field_ops.hpp"

#include <cmath>

#include "groupreg/interp.hpp"

namespace groupreg {

void InversionParams::validate() const {
    if (max_iters < 1) throw Error("invalid_params", "inversion max_iters must be >= 1");
    if (!(tol > 0.0)) throw Error("invalid_params", "inversion tolerance must be positive");
}

namespace {

void require_same_dims(const Dims3& a, const Dims3& b, const char* what) {
    if (a != b) throw Error("dims_mismatch", std::string(what) + ": dims " + to_string(a) + " vs " + to_string(b));
}

template <class F>
void for_each_voxel(const Dims3& d, F&& f) {
    std::size_t i = 0;
    for (int z = 0; z < d[0]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[2]; ++x, ++i) f(i, z, y, x);
}

} // namespace

Volume warp(const Volume& moving, const DisplacementField& field) {
    require_same_dims(moving.dims(), field.dims(), "warp");
    const Dims3& d = moving.dims();
    const auto comp = field.components();
    const std::size_t v = field.voxels();
    std::vector<double> out(v);
    for_each_voxel(d, [&](std::size_t i, int z, int y, int x) {
        const Vec3 p{z + comp[i], y + comp[v + i], x + comp[2 * v + i]};
        out[i] = interp::sample(moving.data(), d, p);
    });
    return Volume(moving.grid(), std::move(out));
}

DisplacementField rescale_field(const DisplacementField& field, const Dims3& target_dims) {
    Vec3 spacing{};
    for (int a = 0; a < 3; ++a) {
        if (target_dims[a] < 2) throw Error("invalid_dims", "rescale target dims must be >= 2, got " + to_string(target_dims));
        spacing[a] = field.grid().spacing[a] * (field.dims()[a] - 1) / (target_dims[a] - 1);
    }
    const interp::Resampler resampler(field.dims(), target_dims);
    std::vector<double> out;
    resampler.apply(field.components(), 3, out);
    return DisplacementField(Grid3::make(target_dims, spacing), std::move(out));
}

InversionResult invert_field(const DisplacementField& field, const InversionParams& params) {
    params.validate();
    const Dims3& d = field.dims();
    const std::size_t v = field.voxels();
    const auto comp = field.components();
    std::vector<double> cur(3 * v, 0.0), next(3 * v);

    InversionResult result{DisplacementField::zeros(field.grid()), false, 0, 0.0};
    for (int it = 1; it <= params.max_iters; ++it) {
        double max_update = 0.0;
        for_each_voxel(d, [&](std::size_t i, int z, int y, int x) {
            const Vec3 p{z + cur[i], y + cur[v + i], x + cur[2 * v + i]};
            const Vec3 s = interp::sample_vector(comp, d, p);
            for (int c = 0; c < 3; ++c) {
                next[c * v + i] = -s[c];
                max_update = std::max(max_update, std::abs(next[c * v + i] - cur[c * v + i]));
            }
        });
        cur.swap(next);
        result.iterations = it;
        result.last_update = max_update;
        if (max_update <= params.tol) {
            result.converged = true;
            break;
        }
    }
    result.field = DisplacementField(field.grid(), std::move(cur));
    return result;
}

DisplacementField compose(const DisplacementField& outer, const DisplacementField& inner) {
    require_same_dims(outer.dims(), inner.dims(), "compose");
    const Dims3& d = inner.dims();
    const std::size_t v = inner.voxels();
    const auto in = inner.components();
    std::vector<double> out(3 * v);
    for_each_voxel(d, [&](std::size_t i, int z, int y, int x) {
        const Vec3 u{in[i], in[v + i], in[2 * v + i]};
        const Vec3 s = interp::sample_vector(outer.components(), d, {z + u[0], y + u[1], x + u[2]});
        for (int c = 0; c < 3; ++c) out[c * v + i] = s[c] + u[c];
    });
    return DisplacementField(inner.grid(), std::move(out));
}

InversionResult pairwise_field(const FieldSet& fields, std::size_t m, std::size_t n, const InversionParams& params) {
    if (m >= fields.size() || n >= fields.size()) {
        throw Error("invalid_index", "phase index out of range for a field set of size " + std::to_string(fields.size()));
    }
    InversionResult inv = invert_field(fields[m], params);
    inv.field = compose(fields[n], inv.field);
    return inv;
}

LandmarkSet transport_landmarks(const LandmarkSet& lm, const DisplacementField& field) {
    if (lm.convention != LandmarkConvention::zero_based) {
        throw Error("landmark_convention", "landmark transport expects zero-based coordinates");
    }
    check_inside(lm, field.grid());
    LandmarkSet out = lm;
    for (auto& p : out.points) {
        const Vec3 s = interp::sample_vector(field.components(), field.dims(), p);
        for (int c = 0; c < 3; ++c) p[c] += s[c];
    }
    return out;
}

double max_spatial_derivative(const DisplacementField& field) {
    const Dims3& d = field.dims();
    const std::size_t v = field.voxels();
    const auto comp = field.components();
    const std::size_t stride[3] = {static_cast<std::size_t>(d[1]) * d[2], static_cast<std::size_t>(d[2]), 1};
    double best = 0.0;
    for_each_voxel(d, [&](std::size_t i, int z, int y, int x) {
        const int pos[3] = {z, y, x};
        for (int a = 0; a < 3; ++a) {
            if (pos[a] + 1 >= d[a]) continue;
            for (int c = 0; c < 3; ++c) {
                best = std::max(best, std::abs(comp[c * v + i + stride[a]] - comp[c * v + i]));
            }
        }
    });
    return best;
}

} // namespace groupreg
