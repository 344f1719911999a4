#include "groupreg/interp.hpp"

namespace groupreg::interp {

double sample(std::span<const double> data, const Dims3& dims, const Vec3& p) noexcept {
    const AxisWeight wz = axis_weight(p[0], dims[0]);
    const AxisWeight wy = axis_weight(p[1], dims[1]);
    const AxisWeight wx = axis_weight(p[2], dims[2]);
    const std::size_t sy = dims[2];
    const std::size_t sz = static_cast<std::size_t>(dims[1]) * dims[2];
    const double* b = data.data() + wz.i0 * sz + wy.i0 * sy + wx.i0;

    const double c00 = b[0] * (1.0 - wx.t) + b[1] * wx.t;
    const double c01 = b[sy] * (1.0 - wx.t) + b[sy + 1] * wx.t;
    const double c10 = b[sz] * (1.0 - wx.t) + b[sz + 1] * wx.t;
    const double c11 = b[sz + sy] * (1.0 - wx.t) + b[sz + sy + 1] * wx.t;
    const double c0 = c00 * (1.0 - wy.t) + c01 * wy.t;
    const double c1 = c10 * (1.0 - wy.t) + c11 * wy.t;
    return c0 * (1.0 - wz.t) + c1 * wz.t;
}

double sample_with_gradient(std::span<const double> data, const Dims3& dims, const Vec3& p, Vec3& grad) noexcept {
    const AxisWeight wz = axis_weight(p[0], dims[0]);
    const AxisWeight wy = axis_weight(p[1], dims[1]);
    const AxisWeight wx = axis_weight(p[2], dims[2]);
    const std::size_t sy = dims[2];
    const std::size_t sz = static_cast<std::size_t>(dims[1]) * dims[2];
    const double* b = data.data() + wz.i0 * sz + wy.i0 * sy + wx.i0;

    const double v000 = b[0], v001 = b[1], v010 = b[sy], v011 = b[sy + 1];
    const double v100 = b[sz], v101 = b[sz + 1], v110 = b[sz + sy], v111 = b[sz + sy + 1];

    const double c00 = v000 * (1.0 - wx.t) + v001 * wx.t;
    const double c01 = v010 * (1.0 - wx.t) + v011 * wx.t;
    const double c10 = v100 * (1.0 - wx.t) + v101 * wx.t;
    const double c11 = v110 * (1.0 - wx.t) + v111 * wx.t;
    const double c0 = c00 * (1.0 - wy.t) + c01 * wy.t;
    const double c1 = c10 * (1.0 - wy.t) + c11 * wy.t;

    grad[0] = wz.inside ? (c1 - c0) : 0.0;
    grad[1] = wy.inside ? ((c01 - c00) * (1.0 - wz.t) + (c11 - c10) * wz.t) : 0.0;
    if (wx.inside) {
        const double d0 = (v001 - v000) * (1.0 - wy.t) + (v011 - v010) * wy.t;
        const double d1 = (v101 - v100) * (1.0 - wy.t) + (v111 - v110) * wy.t;
        grad[2] = d0 * (1.0 - wz.t) + d1 * wz.t;
    } else {
        grad[2] = 0.0;
    }
    return c0 * (1.0 - wz.t) + c1 * wz.t;
}

void scatter(std::span<double> data, const Dims3& dims, const Vec3& p, double value) noexcept {
    const AxisWeight wz = axis_weight(p[0], dims[0]);
    const AxisWeight wy = axis_weight(p[1], dims[1]);
    const AxisWeight wx = axis_weight(p[2], dims[2]);
    const std::size_t sy = dims[2];
    const std::size_t sz = static_cast<std::size_t>(dims[1]) * dims[2];
    double* b = data.data() + wz.i0 * sz + wy.i0 * sy + wx.i0;

    const double z0 = value * (1.0 - wz.t), z1 = value * wz.t;
    const double a00 = z0 * (1.0 - wy.t), a01 = z0 * wy.t, a10 = z1 * (1.0 - wy.t), a11 = z1 * wy.t;
    b[0] += a00 * (1.0 - wx.t);
    b[1] += a00 * wx.t;
    b[sy] += a01 * (1.0 - wx.t);
    b[sy + 1] += a01 * wx.t;
    b[sz] += a10 * (1.0 - wx.t);
    b[sz + 1] += a10 * wx.t;
    b[sz + sy] += a11 * (1.0 - wx.t);
    b[sz + sy + 1] += a11 * wx.t;
}

Vec3 sample_vector(std::span<const double> components, const Dims3& dims, const Vec3& p) noexcept {
    const std::size_t v = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    return {sample(components.subspan(0, v), dims, p), sample(components.subspan(v, v), dims, p),
            sample(components.subspan(2 * v, v), dims, p)};
}

Resampler::Resampler(Dims3 from, Dims3 to) : from_(from), to_(to) {
    for (int a = 0; a < 3; ++a) {
        if (from[a] < 2 || to[a] < 2) throw Error("invalid_dims", "resampling requires dims >= 2 on every axis");
        taps_[a].resize(to[a]);
        for (int j = 0; j < to[a]; ++j) {
            const double src = static_cast<double>(j) * (from[a] - 1) / static_cast<double>(to[a] - 1);
            const AxisWeight w = axis_weight(src, from[a]);
            taps_[a][j] = {w.i0, w.t};
        }
    }
}

namespace {

// Interpolates along one axis of a (d0, d1, d2) buffer; `axis` is replaced
// by taps.size() in the output.
template <class Taps>
void along_axis(const double* in, const Dims3& in_dims, int axis, const Taps& taps, double* out) {
    std::size_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= in_dims[a];
    for (int a = axis + 1; a < 3; ++a) inner *= in_dims[a];
    const std::size_t n_in = in_dims[axis];
    const std::size_t n_out = taps.size();
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = in + o * n_in * inner;
        double* dst = out + o * n_out * inner;
        for (std::size_t j = 0; j < n_out; ++j) {
            const double t = taps[j].t;
            const double* s0 = src + taps[j].i0 * inner;
            const double* s1 = s0 + inner;
            double* d = dst + j * inner;
            for (std::size_t i = 0; i < inner; ++i) d[i] = s0[i] * (1.0 - t) + s1[i] * t;
        }
    }
}

template <class Taps>
void along_axis_adjoint(const double* gout, const Dims3& in_dims, int axis, const Taps& taps,
                        double* gin) {
    std::size_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= in_dims[a];
    for (int a = axis + 1; a < 3; ++a) inner *= in_dims[a];
    const std::size_t n_in = in_dims[axis];
    const std::size_t n_out = taps.size();
    std::fill(gin, gin + outer * n_in * inner, 0.0);
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = gout + o * n_out * inner;
        double* dst = gin + o * n_in * inner;
        for (std::size_t j = 0; j < n_out; ++j) {
            const double t = taps[j].t;
            double* d0 = dst + taps[j].i0 * inner;
            double* d1 = d0 + inner;
            const double* s = src + j * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                d0[i] += s[i] * (1.0 - t);
                d1[i] += s[i] * t;
            }
        }
    }
}

std::size_t volume_of(const Dims3& d) { return static_cast<std::size_t>(d[0]) * d[1] * d[2]; }

} // namespace

void Resampler::apply(std::span<const double> in, int channels, std::vector<double>& out) const {
    const std::size_t vin = volume_of(from_), vout = volume_of(to_);
    out.resize(channels * vout);
    if (from_ == to_) {
        std::copy(in.begin(), in.begin() + channels * vin, out.begin());
        return;
    }
    const Dims3 dx{from_[0], from_[1], to_[2]};
    const Dims3 dy{from_[0], to_[1], to_[2]};
    std::vector<double> bx(volume_of(dx)), by(volume_of(dy));
    for (int c = 0; c < channels; ++c) {
        along_axis(in.data() + c * vin, from_, 2, taps_[2], bx.data());
        along_axis(bx.data(), dx, 1, taps_[1], by.data());
        along_axis(by.data(), dy, 0, taps_[0], out.data() + c * vout);
    }
}

void Resampler::adjoint(std::span<const double> grad_out, int channels, std::vector<double>& grad_in) const {
    const std::size_t vin = volume_of(from_), vout = volume_of(to_);
    grad_in.resize(channels * vin);
    if (from_ == to_) {
        std::copy(grad_out.begin(), grad_out.begin() + channels * vout, grad_in.begin());
        return;
    }
    const Dims3 dx{from_[0], from_[1], to_[2]};
    const Dims3 dy{from_[0], to_[1], to_[2]};
    std::vector<double> bx(volume_of(dx)), by(volume_of(dy));
    for (int c = 0; c < channels; ++c) {
        along_axis_adjoint(grad_out.data() + c * vout, dy, 0, taps_[0], by.data());
        along_axis_adjoint(by.data(), dx, 1, taps_[1], bx.data());
        along_axis_adjoint(bx.data(), from_, 2, taps_[2], grad_in.data() + c * vin);
    }
}

} // namespace groupreg::interp
