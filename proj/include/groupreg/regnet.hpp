#pragma once

// U-Net style displacement network. One conv-norm-activation block per
// level; interpolation layers change scale; instance normalization; skip
// connections by channel concatenation. The stacked group is run at a
// reduced scale and the 3N output channels are resampled back to the
// original grid.

#include <cstdint>
#include <string>
#include <vector>

#include "groupreg/volume.hpp"

namespace groupreg {

struct NetConfig {
    int num_phases = 10;
    int num_downscales = 3;
    int base_channels = 32;
    double inference_scale = 0.5;
    double leaky_slope = 0.2;
    int kernel_size = 3;

    void validate() const;
    /// Channels produced by encoder level l (base * 2^l).
    int level_channels(int level) const { return base_channels << level; }
    /// Grid the network runs at for an input of `dims` (round half up per axis).
    Dims3 internal_dims(const Dims3& dims) const;
    /// Spatial dims of every level; throws when any dim drops below 2.
    std::vector<Dims3> level_dims(const Dims3& input_dims) const;

    bool operator==(const NetConfig&) const = default;
};

/// Instance-normalization epsilon.
inline constexpr double kNormEpsilon = 1e-5;

struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<double> values;
};

struct NetWeights {
    NetConfig config;
    std::vector<Param> params;

    std::size_t count() const;
    const Param& find(const std::string& name) const;
    Param& find(const std::string& name);
};

/// Deterministic given (config, seed). Kernels use the uniform variance-scaling
/// rule bound = 1/sqrt(fan_in); biases and norm shifts start at zero, norm
/// scales at one.
NetWeights build_network(const NetConfig& config, std::uint64_t seed);

/// Number of trainable values implied by a config.
std::size_t weight_count(const NetConfig& config);

/// Channel-major activations.
struct Tensor {
    int channels = 0;
    Dims3 dims{};
    std::vector<double> data;

    std::size_t voxels() const noexcept { return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]; }
};

/// Per-layer activations kept for the backward pass.
struct ForwardCache {
    struct Block {
        Tensor input;       // after resampling / concatenation
        Tensor normalized;  // x_hat of instance norm
        Tensor pre_act;     // gamma * x_hat + beta
        std::vector<double> inv_std;
    };
    std::vector<Dims3> level_dims;
    std::vector<Block> blocks;  // encoder 0..L, decoder L-1..0
    Tensor final_input;
};

/// Runs the encoder-decoder on an input already at the internal scale.
/// Output has 3 * num_phases channels on the same grid.
Tensor network_forward(const NetWeights& weights, const Tensor& input, ForwardCache* cache = nullptr);

/// Gradients in the same layout as `weights.params`.
std::vector<std::vector<double>> network_backward(const NetWeights& weights, const ForwardCache& cache,
                                                  const Tensor& grad_output);

/// Stacks the group as channels at the internal scale.
Tensor stack_group(const ImageGroup& group, const NetConfig& config);

/// Splits a 3N-channel output into fields on the original grid.
FieldSet output_to_fields(const Tensor& output, const Grid3& grid);

/// Full inference: stack, downscale, network, split, upscale.
FieldSet forward(const NetWeights& weights, const ImageGroup& group);

} // namespace groupreg
