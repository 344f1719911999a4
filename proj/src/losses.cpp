#include "groupreg/losses.hpp"

#include <cmath>

#include "groupreg/interp.hpp"

namespace groupreg {

void LossWeights::validate() const {
    if (!(lambda0 >= 0.0) || !(lambda1 >= 0.0)) throw Error("invalid_weights", "loss weights must be non-negative");
    if (ncc_window < 3 || ncc_window % 2 == 0) {
        throw Error("invalid_window", "NCC window must be odd and >= 3, got " + std::to_string(ncc_window));
    }
}

namespace kernels {

namespace {

std::size_t voxels_of(const Dims3& d) { return static_cast<std::size_t>(d[0]) * d[1] * d[2]; }

// Truncated box sum of half-width r along one axis.
void box_axis(const double* in, double* out, const Dims3& d, int axis, int r) {
    std::size_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= d[a];
    for (int a = axis + 1; a < 3; ++a) inner *= d[a];
    const int n = d[axis];
    for (std::size_t o = 0; o < outer; ++o) {
        const double* src = in + o * n * inner;
        double* dst = out + o * n * inner;
        for (int i = 0; i < n; ++i) {
            double* row = dst + i * inner;
            std::fill(row, row + inner, 0.0);
            const int lo = std::max(0, i - r), hi = std::min(n - 1, i + r);
            for (int j = lo; j <= hi; ++j) {
                const double* s = src + j * inner;
                for (std::size_t k = 0; k < inner; ++k) row[k] += s[k];
            }
        }
    }
}

// Separable truncated box sum; `scratch` must hold V values.
void box_sum(std::span<const double> in, std::span<double> out, std::span<double> scratch, const Dims3& d, int r) {
    box_axis(in.data(), out.data(), d, 2, r);
    box_axis(out.data(), scratch.data(), d, 1, r);
    box_axis(scratch.data(), out.data(), d, 0, r);
}

std::vector<double> window_counts(const Dims3& d, int r) {
    std::array<std::vector<double>, 3> c;
    for (int a = 0; a < 3; ++a) {
        c[a].resize(d[a]);
        for (int i = 0; i < d[a]; ++i) c[a][i] = std::min(d[a] - 1, i + r) - std::max(0, i - r) + 1;
    }
    std::vector<double> m(voxels_of(d));
    std::size_t i = 0;
    for (int z = 0; z < d[0]; ++z)
        for (int y = 0; y < d[1]; ++y)
            for (int x = 0; x < d[2]; ++x) m[i++] = c[0][z] * c[1][y] * c[2][x];
    return m;
}

} // namespace

double local_ncc(const Dims3& dims, std::span<const double> f, std::span<const double> g, int window,
                 std::span<double> grad_f, std::span<double> grad_g, double scale) {
    const std::size_t v = voxels_of(dims);
    const int r = window / 2;
    const bool want_grad = !grad_f.empty() || !grad_g.empty();

    std::vector<double> ff(v), gg(v), fg(v), scratch(v);
    for (std::size_t i = 0; i < v; ++i) {
        ff[i] = f[i] * f[i];
        gg[i] = g[i] * g[i];
        fg[i] = f[i] * g[i];
    }
    std::vector<double> sf(v), sg(v), sff(v), sgg(v), sfg(v);
    box_sum(f, sf, scratch, dims, r);
    box_sum(g, sg, scratch, dims, r);
    box_sum(ff, sff, scratch, dims, r);
    box_sum(gg, sgg, scratch, dims, r);
    box_sum(fg, sfg, scratch, dims, r);
    const std::vector<double> m = window_counts(dims, r);

    double total = 0.0;
    // Reuse the squared buffers as per-voxel adjoints of the window sums.
    std::vector<double>& a_sf = ff;
    std::vector<double>& a_sg = gg;
    std::vector<double>& a_sfg = fg;
    std::vector<double> a_sff(want_grad ? v : 0), a_sgg(want_grad ? v : 0);
    const double mean_scale = scale / static_cast<double>(v);
    for (std::size_t i = 0; i < v; ++i) {
        const double cross = sfg[i] - sf[i] * sg[i] / m[i];
        const double vf = sff[i] - sf[i] * sf[i] / m[i];
        const double vg = sgg[i] - sg[i] * sg[i] / m[i];
        const double s = std::sqrt(vf * vg + kNccEpsilon);
        total += cross / s;
        if (want_grad) {
            const double inv_s = 1.0 / s;
            const double k = -cross * inv_s * inv_s * inv_s * 0.5;
            const double d_vf = k * vg, d_vg = k * vf;
            a_sfg[i] = mean_scale * inv_s;
            a_sff[i] = mean_scale * d_vf;
            a_sgg[i] = mean_scale * d_vg;
            a_sf[i] = mean_scale * (-sg[i] * inv_s - 2.0 * sf[i] * d_vf) / m[i];
            a_sg[i] = mean_scale * (-sf[i] * inv_s - 2.0 * sg[i] * d_vg) / m[i];
        }
    }
    if (want_grad) {
        // The truncated box sum is self-adjoint.
        std::vector<double> b_sf(v), b_sg(v), b_sff(v), b_sgg(v), b_sfg(v);
        box_sum(a_sf, b_sf, scratch, dims, r);
        box_sum(a_sg, b_sg, scratch, dims, r);
        box_sum(a_sff, b_sff, scratch, dims, r);
        box_sum(a_sgg, b_sgg, scratch, dims, r);
        box_sum(a_sfg, b_sfg, scratch, dims, r);
        for (std::size_t i = 0; i < v; ++i) {
            if (!grad_f.empty()) grad_f[i] += b_sf[i] + 2.0 * f[i] * b_sff[i] + g[i] * b_sfg[i];
            if (!grad_g.empty()) grad_g[i] += b_sg[i] + 2.0 * g[i] * b_sgg[i] + f[i] * b_sfg[i];
        }
    }
    return total / static_cast<double>(v);
}

double smoothness(const Dims3& d, std::span<const double> fields, std::size_t n, std::span<const double> tmpl,
                  std::span<double> grad_fields, std::span<double> grad_tmpl, double scale) {
    const std::size_t v = voxels_of(d);
    const std::size_t stride[3] = {static_cast<std::size_t>(d[1]) * d[2], static_cast<std::size_t>(d[2]), 1};
    const double norm = 1.0 / (3.0 * static_cast<double>(n) * static_cast<double>(v));
    const bool gf = !grad_fields.empty(), gt = !grad_tmpl.empty();

    double total = 0.0;
    for (int a = 0; a < 3; ++a) {
        const std::size_t s = stride[a];
        std::size_t i = 0;
        for (int z = 0; z < d[0]; ++z)
            for (int y = 0; y < d[1]; ++y)
                for (int x = 0; x < d[2]; ++x, ++i) {
                    const int pos[3] = {z, y, x};
                    if (pos[a] + 1 >= d[a]) continue;
                    const double dt = tmpl[i + s] - tmpl[i];
                    const double w = std::exp(-std::abs(dt));
                    double l1 = 0.0;
                    for (std::size_t k = 0; k < n; ++k) {
                        for (int c = 0; c < 3; ++c) {
                            const std::size_t base = (3 * k + c) * v + i;
                            const double dd = fields[base + s] - fields[base];
                            l1 += std::abs(dd);
                            if (gf && dd != 0.0) {
                                const double gval = scale * norm * w * (dd > 0.0 ? 1.0 : -1.0);
                                grad_fields[base + s] += gval;
                                grad_fields[base] -= gval;
                            }
                        }
                    }
                    total += l1 * w;
                    if (gt && dt != 0.0) {
                        const double gval = -scale * norm * l1 * w * (dt > 0.0 ? 1.0 : -1.0);
                        grad_tmpl[i + s] += gval;
                        grad_tmpl[i] -= gval;
                    }
                }
    }
    return total * norm;
}

double cyclic(const Dims3& d, std::span<const double> fields, std::size_t n, std::span<double> grad_fields,
              double scale) {
    const std::size_t v = voxels_of(d);
    std::vector<double> sum(3 * v, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        const double* f = fields.data() + 3 * k * v;
        for (std::size_t j = 0; j < 3 * v; ++j) sum[j] += f[j];
    }
    double sq = 0.0;
    for (double s : sum) sq += s * s;
    const double denom = 3.0 * static_cast<double>(v);
    const double value = std::sqrt(sq / denom);
    if (!grad_fields.empty() && value > 0.0) {
        const double k0 = scale / (denom * value);
        for (std::size_t k = 0; k < n; ++k) {
            double* gk = grad_fields.data() + 3 * k * v;
            for (std::size_t j = 0; j < 3 * v; ++j) gk[j] += k0 * sum[j];
        }
    }
    return value;
}

} // namespace kernels

namespace {

void require_dims(const Dims3& a, const Dims3& b) {
    if (a != b) throw Error("dims_mismatch", "loss inputs have dims " + to_string(a) + " and " + to_string(b));
}

void require_window(int window) {
    if (window < 3 || window % 2 == 0) {
        throw Error("invalid_window", "NCC window must be odd and >= 3, got " + std::to_string(window));
    }
}

std::vector<double> pack_fields(const FieldSet& fields) {
    std::vector<double> packed;
    packed.reserve(3 * fields.grid().size() * fields.size());
    for (const auto& f : fields.fields()) packed.insert(packed.end(), f.components().begin(), f.components().end());
    return packed;
}

} // namespace

double local_ncc(const Volume& f, const Volume& g, int window) {
    require_dims(f.dims(), g.dims());
    require_window(window);
    return kernels::local_ncc(f.dims(), f.data(), g.data(), window);
}

double similarity_loss(const ImageGroup& warped, const Volume& tmpl, int window) {
    require_dims(warped.grid().dims, tmpl.dims());
    double sum = 0.0;
    for (const auto& w : warped.volumes()) sum += local_ncc(w, tmpl, window);
    return -sum / static_cast<double>(warped.size());
}

double smoothness_loss(const FieldSet& fields, const Volume& tmpl) {
    require_dims(fields.grid().dims, tmpl.dims());
    const auto packed = pack_fields(fields);
    return kernels::smoothness(tmpl.dims(), packed, fields.size(), tmpl.data());
}

double cyclic_loss(const FieldSet& fields) {
    const auto packed = pack_fields(fields);
    return kernels::cyclic(fields.grid().dims, packed, fields.size());
}

LossBreakdown total_loss(const ImageGroup& warped, const Volume& tmpl, const FieldSet& fields,
                         const LossWeights& weights) {
    weights.validate();
    if (fields.size() != warped.size()) throw Error("count_mismatch", "field count differs from warped group size");
    LossBreakdown out;
    out.similarity = similarity_loss(warped, tmpl, weights.ncc_window);
    out.smoothness = smoothness_loss(fields, tmpl);
    out.cyclic = cyclic_loss(fields);
    out.total = out.similarity + weights.lambda0 * out.smoothness + weights.lambda1 * out.cyclic;
    return out;
}

GroupObjective evaluate_group_objective(const ImageGroup& images, std::span<const double> fields,
                                        const LossWeights& weights, bool want_gradient) {
    weights.validate();
    const Dims3& d = images.grid().dims;
    const std::size_t v = images.grid().size();
    const std::size_t n = images.size();
    if (fields.size() != 3 * v * n) throw Error("dims_mismatch", "packed field buffer does not match the group");

    GroupObjective out;
    out.warped.resize(n * v);
    out.tmpl.assign(v, 0.0);
    // Image gradients at the sample points, needed for the warp adjoint.
    std::vector<double> sample_grad(want_gradient ? 3 * n * v : 0);

    for (std::size_t k = 0; k < n; ++k) {
        const auto img = images[k].data();
        const double* f = fields.data() + 3 * k * v;
        double* w = out.warped.data() + k * v;
        std::size_t i = 0;
        for (int z = 0; z < d[0]; ++z)
            for (int y = 0; y < d[1]; ++y)
                for (int x = 0; x < d[2]; ++x, ++i) {
                    const Vec3 p{z + f[i], y + f[v + i], x + f[2 * v + i]};
                    if (want_gradient) {
                        Vec3 g;
                        w[i] = interp::sample_with_gradient(img, d, p, g);
                        for (int c = 0; c < 3; ++c) sample_grad[(3 * k + c) * v + i] = g[c];
                    } else {
                        w[i] = interp::sample(img, d, p);
                    }
                    out.tmpl[i] += w[i];
                }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    for (double& t : out.tmpl) t *= inv_n;

    std::vector<double> grad_warped(want_gradient ? n * v : 0, 0.0);
    std::vector<double> grad_tmpl(want_gradient ? v : 0, 0.0);
    if (want_gradient) out.grad_fields.assign(3 * n * v, 0.0);

    double ncc_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        std::span<const double> wk(out.warped.data() + k * v, v);
        std::span<double> gk = want_gradient ? std::span<double>(grad_warped.data() + k * v, v) : std::span<double>{};
        ncc_sum += kernels::local_ncc(d, wk, out.tmpl, weights.ncc_window, gk,
                                      want_gradient ? std::span<double>(grad_tmpl) : std::span<double>{}, -inv_n);
    }
    out.loss.similarity = -ncc_sum * inv_n;

    std::span<double> gfields = want_gradient ? std::span<double>(out.grad_fields) : std::span<double>{};
    std::span<double> gtmpl_smooth =
        want_gradient && !weights.block_template_gradient ? std::span<double>(grad_tmpl) : std::span<double>{};
    out.loss.smoothness = kernels::smoothness(d, fields, n, out.tmpl, gfields, gtmpl_smooth, weights.lambda0);
    out.loss.cyclic = kernels::cyclic(d, fields, n, gfields, weights.lambda1);
    out.loss.total = out.loss.similarity + weights.lambda0 * out.loss.smoothness + weights.lambda1 * out.loss.cyclic;

    if (want_gradient) {
        for (std::size_t k = 0; k < n; ++k) {
            for (std::size_t i = 0; i < v; ++i) {
                const double gw = grad_warped[k * v + i] + grad_tmpl[i] * inv_n;
                for (int c = 0; c < 3; ++c) {
                    out.grad_fields[(3 * k + c) * v + i] += gw * sample_grad[(3 * k + c) * v + i];
                }
            }
        }
    }
    return out;
}

} // namespace groupreg
