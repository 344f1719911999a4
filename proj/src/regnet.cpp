#include "groupreg/regnet.hpp"

#include <Eigen/Core>
#include <cmath>
#include <random>

#include "groupreg/interp.hpp"

namespace groupreg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

constexpr int kTaps = 27;
// Upper bound on the im2col buffer, in doubles.
constexpr std::size_t kColumnBudget = std::size_t{4} << 20;

struct BlockSpec {
    std::string prefix;
    int in_channels;
    int out_channels;
    int level;
};

std::vector<BlockSpec> block_specs(const NetConfig& c) {
    std::vector<BlockSpec> specs;
    const int levels = c.num_downscales;
    for (int l = 0; l <= levels; ++l) {
        const int in = l == 0 ? c.num_phases : c.level_channels(l - 1);
        specs.push_back({"enc" + std::to_string(l), in, c.level_channels(l), l});
    }
    for (int l = levels - 1; l >= 0; --l) {
        specs.push_back({"dec" + std::to_string(l), c.level_channels(l + 1) + c.level_channels(l), c.level_channels(l), l});
    }
    return specs;
}

int slab_depth(int in_channels, const Dims3& d) {
    const std::size_t per_slice = static_cast<std::size_t>(in_channels) * kTaps * d[1] * d[2];
    return static_cast<int>(std::clamp<std::size_t>(kColumnBudget / std::max<std::size_t>(per_slice, 1), 1, d[0]));
}

// Columns for output slices [z0, z0 + nz): row (ci * 27 + tap), column voxel.
void im2col(const Tensor& x, int z0, int nz, std::vector<double>& col) {
    const Dims3& d = x.dims;
    const std::size_t hw = static_cast<std::size_t>(d[1]) * d[2];
    const std::size_t cols = nz * hw;
    col.assign(static_cast<std::size_t>(x.channels) * kTaps * cols, 0.0);
    for (int ci = 0; ci < x.channels; ++ci) {
        const double* src = x.data.data() + ci * x.voxels();
        for (int kz = 0; kz < 3; ++kz)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    double* row = col.data() + (static_cast<std::size_t>(ci) * kTaps + kz * 9 + ky * 3 + kx) * cols;
                    for (int z = 0; z < nz; ++z) {
                        const int sz = z0 + z + kz - 1;
                        if (sz < 0 || sz >= d[0]) continue;
                        for (int y = 0; y < d[1]; ++y) {
                            const int sy = y + ky - 1;
                            if (sy < 0 || sy >= d[1]) continue;
                            const double* s = src + (static_cast<std::size_t>(sz) * d[1] + sy) * d[2];
                            double* o = row + (static_cast<std::size_t>(z) * d[1] + y) * d[2];
                            const int lo = kx == 0 ? 1 : 0;
                            const int hi = kx == 2 ? d[2] - 1 : d[2];
                            for (int xx = lo; xx < hi; ++xx) o[xx] = s[xx + kx - 1];
                        }
                    }
                }
    }
}

void col2im_add(const std::vector<double>& col, int z0, int nz, Tensor& dx) {
    const Dims3& d = dx.dims;
    const std::size_t hw = static_cast<std::size_t>(d[1]) * d[2];
    const std::size_t cols = nz * hw;
    for (int ci = 0; ci < dx.channels; ++ci) {
        double* dst = dx.data.data() + ci * dx.voxels();
        for (int kz = 0; kz < 3; ++kz)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    const double* row =
                        col.data() + (static_cast<std::size_t>(ci) * kTaps + kz * 9 + ky * 3 + kx) * cols;
                    for (int z = 0; z < nz; ++z) {
                        const int sz = z0 + z + kz - 1;
                        if (sz < 0 || sz >= d[0]) continue;
                        for (int y = 0; y < d[1]; ++y) {
                            const int sy = y + ky - 1;
                            if (sy < 0 || sy >= d[1]) continue;
                            double* s = dst + (static_cast<std::size_t>(sz) * d[1] + sy) * d[2];
                            const double* o = row + (static_cast<std::size_t>(z) * d[1] + y) * d[2];
                            const int lo = kx == 0 ? 1 : 0;
                            const int hi = kx == 2 ? d[2] - 1 : d[2];
                            for (int xx = lo; xx < hi; ++xx) s[xx + kx - 1] += o[xx];
                        }
                    }
                }
    }
}

// 3x3x3 convolution, stride 1, zero padding 1.
Tensor conv3d(const Tensor& x, const Param& w, const Param& b) {
    const int cout = w.shape[0];
    const int k = x.channels * kTaps;
    Tensor y{cout, x.dims, std::vector<double>(static_cast<std::size_t>(cout) * x.voxels())};
    const std::size_t hw = static_cast<std::size_t>(x.dims[1]) * x.dims[2];
    const Eigen::Map<const RowMat> wm(w.values.data(), cout, k);
    const int step = slab_depth(x.channels, x.dims);
    std::vector<double> col;
    for (int z0 = 0; z0 < x.dims[0]; z0 += step) {
        const int nz = std::min(step, x.dims[0] - z0);
        const Eigen::Index cols = static_cast<Eigen::Index>(nz * hw);
        im2col(x, z0, nz, col);
        const Eigen::Map<const RowMat> cm(col.data(), k, cols);
        StridedMap ym(y.data.data() + z0 * hw, cout, cols, Eigen::OuterStride<>(static_cast<Eigen::Index>(y.voxels())));
        ym.noalias() = wm * cm;
    }
    for (int co = 0; co < cout; ++co) {
        double* row = y.data.data() + co * y.voxels();
        for (std::size_t i = 0; i < y.voxels(); ++i) row[i] += b.values[co];
    }
    return y;
}

// Accumulates dW and db; writes dX when requested.
void conv3d_backward(const Tensor& x, const Param& w, const Tensor& dy, std::vector<double>& dw,
                     std::vector<double>& db, Tensor* dx) {
    const int cout = w.shape[0];
    const int k = x.channels * kTaps;
    const std::size_t hw = static_cast<std::size_t>(x.dims[1]) * x.dims[2];
    const Eigen::Map<const RowMat> wm(w.values.data(), cout, k);
    Eigen::Map<RowMat> dwm(dw.data(), cout, k);
    if (dx) *dx = Tensor{x.channels, x.dims, std::vector<double>(x.data.size(), 0.0)};
    const int step = slab_depth(x.channels, x.dims);
    std::vector<double> col;
    RowMat dcol;
    for (int z0 = 0; z0 < x.dims[0]; z0 += step) {
        const int nz = std::min(step, x.dims[0] - z0);
        const Eigen::Index cols = static_cast<Eigen::Index>(nz * hw);
        im2col(x, z0, nz, col);
        const Eigen::Map<const RowMat> cm(col.data(), k, cols);
        const ConstStridedMap dym(dy.data.data() + z0 * hw, cout, cols,
                                  Eigen::OuterStride<>(static_cast<Eigen::Index>(dy.voxels())));
        dwm.noalias() += dym * cm.transpose();
        if (dx) {
            dcol.noalias() = wm.transpose() * dym;
            std::copy(dcol.data(), dcol.data() + dcol.size(), col.begin());
            col2im_add(col, z0, nz, *dx);
        }
    }
    for (int co = 0; co < cout; ++co) {
        const double* row = dy.data.data() + co * dy.voxels();
        double s = 0.0;
        for (std::size_t i = 0; i < dy.voxels(); ++i) s += row[i];
        db[co] += s;
    }
}

void instance_norm(const Tensor& x, const Param& gamma, const Param& beta, ForwardCache::Block& blk) {
    const std::size_t v = x.voxels();
    blk.normalized = Tensor{x.channels, x.dims, std::vector<double>(x.data.size())};
    blk.pre_act = Tensor{x.channels, x.dims, std::vector<double>(x.data.size())};
    blk.inv_std.resize(x.channels);
    for (int c = 0; c < x.channels; ++c) {
        const double* in = x.data.data() + c * v;
        double mean = 0.0;
        for (std::size_t i = 0; i < v; ++i) mean += in[i];
        mean /= static_cast<double>(v);
        double var = 0.0;
        for (std::size_t i = 0; i < v; ++i) var += (in[i] - mean) * (in[i] - mean);
        var /= static_cast<double>(v);
        const double inv_std = 1.0 / std::sqrt(var + kNormEpsilon);
        blk.inv_std[c] = inv_std;
        double* xh = blk.normalized.data.data() + c * v;
        double* pa = blk.pre_act.data.data() + c * v;
        for (std::size_t i = 0; i < v; ++i) {
            xh[i] = (in[i] - mean) * inv_std;
            pa[i] = gamma.values[c] * xh[i] + beta.values[c];
        }
    }
}

Tensor leaky(const Tensor& x, double slope) {
    Tensor y = x;
    for (double& v : y.data) v = v > 0.0 ? v : slope * v;
    return y;
}

Tensor resample(const Tensor& x, const Dims3& to) {
    Tensor y{x.channels, to, {}};
    interp::Resampler(x.dims, to).apply(x.data, x.channels, y.data);
    return y;
}

Tensor concat(const Tensor& a, const Tensor& b) {
    Tensor y{a.channels + b.channels, a.dims, a.data};
    y.data.insert(y.data.end(), b.data.begin(), b.data.end());
    return y;
}

void check_finite(const Tensor& t, std::size_t layer) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw Error("non_finite", "network layer " + std::to_string(layer) + " produced non-finite values");
        }
    }
}

} // namespace

void NetConfig::validate() const {
    if (num_phases < 1) throw Error("invalid_config", "num_phases must be >= 1");
    if (num_downscales < 1) throw Error("invalid_config", "num_downscales must be >= 1");
    if (base_channels < 1) throw Error("invalid_config", "base_channels must be >= 1");
    if (!(inference_scale > 0.0 && inference_scale <= 1.0)) throw Error("invalid_config", "inference_scale must lie in (0, 1]");
    if (!(leaky_slope >= 0.0)) throw Error("invalid_config", "leaky_slope must be non-negative");
    if (kernel_size != 3) throw Error("invalid_config", "only 3x3x3 kernels are supported");
}

Dims3 NetConfig::internal_dims(const Dims3& dims) const {
    Dims3 out{};
    for (int a = 0; a < 3; ++a) out[a] = static_cast<int>(std::floor(dims[a] * inference_scale + 0.5));
    return out;
}

std::vector<Dims3> NetConfig::level_dims(const Dims3& input_dims) const {
    std::vector<Dims3> dims{internal_dims(input_dims)};
    for (int l = 1; l <= num_downscales; ++l) {
        const Dims3& p = dims.back();
        dims.push_back({(p[0] + 1) / 2, (p[1] + 1) / 2, (p[2] + 1) / 2});
    }
    for (const auto& d : dims) {
        if (d[0] < 2 || d[1] < 2 || d[2] < 2) {
            throw Error("dims_too_small", "input " + to_string(input_dims) + " is too small for " +
                                              std::to_string(num_downscales) + " downscales at scale " +
                                              std::to_string(inference_scale));
        }
    }
    return dims;
}

std::size_t NetWeights::count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.values.size();
    return n;
}

const Param& NetWeights::find(const std::string& name) const {
    for (const auto& p : params) {
        if (p.name == name) return p;
    }
    throw Error("unknown_param", "no parameter named " + name);
}

Param& NetWeights::find(const std::string& name) {
    return const_cast<Param&>(static_cast<const NetWeights&>(*this).find(name));
}

NetWeights build_network(const NetConfig& config, std::uint64_t seed) {
    config.validate();
    NetWeights w{config, {}};
    std::mt19937_64 rng(seed);
    auto kernel = [&](const std::string& name, int cout, int cin) {
        const int fan_in = cin * kTaps;
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Param p{name, {cout, cin, 3, 3, 3}, std::vector<double>(static_cast<std::size_t>(cout) * fan_in)};
        for (double& v : p.values) v = dist(rng);
        w.params.push_back(std::move(p));
    };
    auto filled = [&](const std::string& name, int n, double value) {
        w.params.push_back({name, {n}, std::vector<double>(n, value)});
    };
    for (const auto& b : block_specs(config)) {
        kernel(b.prefix + ".conv.weight", b.out_channels, b.in_channels);
        filled(b.prefix + ".conv.bias", b.out_channels, 0.0);
        filled(b.prefix + ".norm.weight", b.out_channels, 1.0);
        filled(b.prefix + ".norm.bias", b.out_channels, 0.0);
    }
    kernel("out.conv.weight", 3 * config.num_phases, config.base_channels);
    filled("out.conv.bias", 3 * config.num_phases, 0.0);
    return w;
}

std::size_t weight_count(const NetConfig& config) {
    std::size_t n = 0;
    for (const auto& b : block_specs(config)) {
        n += static_cast<std::size_t>(b.out_channels) * (b.in_channels * kTaps + 3);
    }
    n += static_cast<std::size_t>(3 * config.num_phases) * (config.base_channels * kTaps + 1);
    return n;
}

Tensor network_forward(const NetWeights& weights, const Tensor& input, ForwardCache* cache) {
    const NetConfig& c = weights.config;
    if (input.channels != c.num_phases) {
        throw Error("count_mismatch", "network expects " + std::to_string(c.num_phases) + " input channels, got " +
                                          std::to_string(input.channels));
    }
    const int levels = c.num_downscales;
    std::vector<Dims3> dims{input.dims};
    for (int l = 1; l <= levels; ++l) {
        const Dims3& p = dims.back();
        dims.push_back({(p[0] + 1) / 2, (p[1] + 1) / 2, (p[2] + 1) / 2});
        if (dims.back()[0] < 2 || dims.back()[1] < 2 || dims.back()[2] < 2) {
            throw Error("dims_too_small", "network input " + to_string(input.dims) + " too small for its downscales");
        }
    }
    const auto specs = block_specs(c);
    ForwardCache local;
    ForwardCache& fc = cache ? *cache : local;
    fc.level_dims = dims;
    fc.blocks.assign(specs.size(), {});

    auto run_block = [&](std::size_t b, Tensor in) {
        const auto& p = weights.params;
        auto& blk = fc.blocks[b];
        Tensor conv = conv3d(in, p[4 * b], p[4 * b + 1]);
        instance_norm(conv, p[4 * b + 2], p[4 * b + 3], blk);
        Tensor out = leaky(blk.pre_act, c.leaky_slope);
        check_finite(out, b);
        blk.input = std::move(in);
        return out;
    };

    std::vector<Tensor> enc(levels + 1);
    enc[0] = run_block(0, input);
    for (int l = 1; l <= levels; ++l) enc[l] = run_block(l, resample(enc[l - 1], dims[l]));
    Tensor cur = enc[levels];
    std::size_t b = levels + 1;
    for (int l = levels - 1; l >= 0; --l, ++b) cur = run_block(b, concat(resample(cur, dims[l]), enc[l]));

    Tensor out = conv3d(cur, weights.params[4 * b], weights.params[4 * b + 1]);
    check_finite(out, b);
    fc.final_input = std::move(cur);
    return out;
}

std::vector<std::vector<double>> network_backward(const NetWeights& weights, const ForwardCache& fc,
                                                  const Tensor& grad_output) {
    const NetConfig& c = weights.config;
    const auto& p = weights.params;
    std::vector<std::vector<double>> grads;
    for (const auto& prm : p) grads.emplace_back(prm.values.size(), 0.0);

    const int levels = c.num_downscales;
    const std::size_t nblocks = fc.blocks.size();
    const std::size_t fb = nblocks;  // index of the output conv

    // Gradient with respect to a block's output; returns gradient w.r.t. its input.
    auto block_backward = [&](std::size_t b, const Tensor& dout) {
        const auto& blk = fc.blocks[b];
        const std::size_t v = dout.voxels();
        Tensor dconv{dout.channels, dout.dims, std::vector<double>(dout.data.size())};
        auto& dgamma = grads[4 * b + 2];
        auto& dbeta = grads[4 * b + 3];
        for (int ch = 0; ch < dout.channels; ++ch) {
            const double* g = dout.data.data() + ch * v;
            const double* pa = blk.pre_act.data.data() + ch * v;
            const double* xh = blk.normalized.data.data() + ch * v;
            double* dx = dconv.data.data() + ch * v;
            const double gamma = p[4 * b + 2].values[ch];
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (std::size_t i = 0; i < v; ++i) {
                const double dpa = pa[i] > 0.0 ? g[i] : c.leaky_slope * g[i];
                dgamma[ch] += dpa * xh[i];
                dbeta[ch] += dpa;
                const double dxh = dpa * gamma;
                dx[i] = dxh;
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh[i];
            }
            const double inv_v = 1.0 / static_cast<double>(v);
            const double k = blk.inv_std[ch];
            for (std::size_t i = 0; i < v; ++i) dx[i] = k * (dx[i] - inv_v * sum_dxh - xh[i] * inv_v * sum_dxh_xh);
        }
        Tensor din;
        conv3d_backward(blk.input, p[4 * b], dconv, grads[4 * b], grads[4 * b + 1], &din);
        return din;
    };

    Tensor dcur;
    conv3d_backward(fc.final_input, p[4 * fb], grad_output, grads[4 * fb], grads[4 * fb + 1], &dcur);

    std::vector<Tensor> denc(levels + 1);
    std::size_t b = nblocks - 1;
    for (int l = 0; l < levels; ++l, --b) {
        // Decoder block at level l (visited in reverse order of the forward pass).
        Tensor din = block_backward(b, dcur);
        const int up_ch = c.level_channels(l + 1);
        const std::size_t v = din.voxels();
        Tensor dup{up_ch, din.dims, std::vector<double>(din.data.begin(), din.data.begin() + up_ch * v)};
        Tensor dskip{din.channels - up_ch, din.dims, std::vector<double>(din.data.begin() + up_ch * v, din.data.end())};
        denc[l] = std::move(dskip);
        Tensor dprev{up_ch, fc.level_dims[l + 1], {}};
        interp::Resampler(fc.level_dims[l + 1], din.dims).adjoint(dup.data, up_ch, dprev.data);
        dcur = std::move(dprev);
    }
    // dcur is now the gradient w.r.t. the bottleneck output enc[levels].
    for (int l = levels; l >= 0; --l) {
        Tensor dout = std::move(dcur);
        if (l < levels) {
            for (std::size_t i = 0; i < dout.data.size(); ++i) dout.data[i] += denc[l].data[i];
        }
        Tensor din = block_backward(static_cast<std::size_t>(l), dout);
        if (l > 0) {
            Tensor dprev{din.channels, fc.level_dims[l - 1], {}};
            interp::Resampler(fc.level_dims[l - 1], din.dims).adjoint(din.data, din.channels, dprev.data);
            dcur = std::move(dprev);
        }
    }
    return grads;
}

Tensor stack_group(const ImageGroup& group, const NetConfig& config) {
    const Dims3& d = group.grid().dims;
    const std::size_t v = group.grid().size();
    std::vector<double> stacked;
    stacked.reserve(group.size() * v);
    for (const auto& vol : group.volumes()) stacked.insert(stacked.end(), vol.data().begin(), vol.data().end());
    const Dims3 inner = config.internal_dims(d);
    Tensor t{static_cast<int>(group.size()), inner, {}};
    interp::Resampler(d, inner).apply(stacked, t.channels, t.data);
    return t;
}

FieldSet output_to_fields(const Tensor& output, const Grid3& grid) {
    if (output.channels % 3 != 0) throw Error("invalid_output", "network output channels must be a multiple of 3");
    std::vector<double> full;
    interp::Resampler(output.dims, grid.dims).apply(output.data, output.channels, full);
    const std::size_t v = grid.size();
    std::vector<DisplacementField> fields;
    for (int n = 0; n < output.channels / 3; ++n) {
        fields.emplace_back(grid, std::vector<double>(full.begin() + 3 * n * v, full.begin() + 3 * (n + 1) * v));
    }
    return FieldSet(std::move(fields));
}

FieldSet forward(const NetWeights& weights, const ImageGroup& group) {
    if (static_cast<int>(group.size()) != weights.config.num_phases) {
        throw Error("count_mismatch", "network built for " + std::to_string(weights.config.num_phases) +
                                          " phases, group has " + std::to_string(group.size()));
    }
    weights.config.level_dims(group.grid().dims);
    const Tensor out = network_forward(weights, stack_group(group, weights.config));
    return FieldSet::for_group(group, output_to_fields(out, group.grid()).fields());
}

} // namespace groupreg
