#include <cmath>
#include <limits>
#include <random>

#include "doctest.h"

#include "groupreg/oneshot.hpp"
#include "groupreg/regnet.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace groupreg;
using namespace testing_helpers;

namespace {

ImageGroup textured_group(const Dims3& dims, int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Grid3 grid = Grid3::make(dims);
    std::vector<Volume> v;
    for (int k = 0; k < n; ++k) v.emplace_back(grid, oracle::smooth_texture(dims, rng));
    return ImageGroup(std::move(v));
}

NetConfig tiny(int phases, int downscales = 1, int base = 4) {
    NetConfig c;
    c.num_phases = phases;
    c.num_downscales = downscales;
    c.base_channels = base;
    return c;
}

} // namespace

TEST_SUITE("regnet") {

TEST_CASE("build_network is deterministic in (config, seed)") {
    const NetConfig c = tiny(3, 2, 4);
    const NetWeights a = build_network(c, 5), b = build_network(c, 5), d = build_network(c, 6);
    REQUIRE(a.params.size() == b.params.size());
    bool any_diff = false;
    for (std::size_t k = 0; k < a.params.size(); ++k) {
        CHECK(a.params[k].name == b.params[k].name);
        CHECK(a.params[k].values == b.params[k].values);
        any_diff = any_diff || a.params[k].values != d.params[k].values;
    }
    CHECK(any_diff);
}

TEST_CASE("default configuration channel schedule") {
    NetConfig c;  // N = 10, base 32, 3 downscales
    const NetWeights w = build_network(c, 0);
    CHECK(w.find("enc0.conv.weight").shape == std::vector<int>{32, 10, 3, 3, 3});
    CHECK(w.find("enc1.conv.weight").shape[0] == 64);
    CHECK(w.find("enc2.conv.weight").shape[0] == 128);
    CHECK(w.find("enc3.conv.weight").shape[0] == 256);
    CHECK(w.find("dec2.conv.weight").shape == std::vector<int>{128, 256 + 128, 3, 3, 3});
    CHECK(w.find("dec0.conv.weight").shape == std::vector<int>{32, 64 + 32, 3, 3, 3});
    CHECK(w.find("out.conv.weight").shape == std::vector<int>{30, 32, 3, 3, 3});
    CHECK(w.find("out.conv.bias").shape == std::vector<int>{30});
    CHECK(w.count() == weight_count(c));
    for (int l = 0; l <= 3; ++l) CHECK(c.level_channels(l) == (32 << l));
}

TEST_CASE("initialization follows the variance-scaling bound") {
    const NetWeights w = build_network(tiny(2, 2, 8), 1);
    for (const auto& p : w.params) {
        if (p.shape.size() == 5) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(p.shape[1] * 27));
            double mx = 0.0;
            for (double v : p.values) mx = std::max(mx, std::abs(v));
            CHECK(mx <= bound);
            CHECK(mx > 0.5 * bound);
        } else if (p.name.find("norm.weight") != std::string::npos) {
            for (double v : p.values) CHECK(v == 1.0);
        } else {
            for (double v : p.values) CHECK(v == 0.0);
        }
    }
}

TEST_CASE("weight count depends only on the architecture") {
    NetConfig a = tiny(5, 3, 8), b = a;
    b.inference_scale = 1.0;
    CHECK(weight_count(a) == weight_count(b));
    CHECK(build_network(a, 0).count() == weight_count(a));
}

TEST_CASE("shape arithmetic") {
    NetConfig c = tiny(5, 3, 4);
    CHECK(c.internal_dims({83, 157, 240}) == Dims3{42, 79, 120});
    CHECK(c.internal_dims({96, 96, 96}) == Dims3{48, 48, 48});

    const ImageGroup g = textured_group({96, 96, 96}, 5, 3);
    const Tensor in = stack_group(g, c);
    CHECK(in.channels == 5);
    CHECK(in.dims == Dims3{48, 48, 48});
    const NetWeights w = build_network(c, 0);
    const Tensor out = network_forward(w, in);
    CHECK(out.channels == 15);
    CHECK(out.dims == Dims3{48, 48, 48});
    const FieldSet fs = forward(w, g);
    CHECK(fs.size() == 5);
    for (const auto& f : fs.fields()) CHECK(f.dims() == Dims3{96, 96, 96});

    SUBCASE("odd dims come back at the original size") {
        NetConfig c2 = tiny(2, 2, 2);
        const ImageGroup odd = textured_group({19, 13, 11}, 2, 4);
        const FieldSet f2 = forward(build_network(c2, 0), odd);
        CHECK(f2[0].dims() == Dims3{19, 13, 11});
    }
    SUBCASE("too small inputs are rejected") {
        NetConfig c3 = tiny(2, 3, 2);
        CHECK_THROWS_AS(c3.level_dims({12, 12, 12}), Error);
        CHECK_THROWS_AS(forward(build_network(c3, 0), textured_group({12, 12, 12}, 2, 5)), Error);
    }
}

TEST_CASE("zero final layer yields zero fields") {
    const NetConfig c = tiny(3, 2, 4);
    NetWeights w = build_network(c, 9);
    for (double& v : w.find("out.conv.weight").values) v = 0.0;
    const FieldSet fs = forward(w, textured_group({16, 16, 16}, 3, 6));
    for (const auto& f : fs.fields())
        for (double v : f.components()) CHECK(v == 0.0);
}

TEST_CASE("forward is pure") {
    const NetConfig c = tiny(2, 2, 4);
    const NetWeights w = build_network(c, 10);
    const ImageGroup g = textured_group({16, 16, 16}, 2, 7);
    const FieldSet a = forward(w, g), b = forward(w, g);
    for (std::size_t n = 0; n < 2; ++n) CHECK(to_vector(a[n].components()) == to_vector(b[n].components()));
}

TEST_CASE("non-finite activations name the layer") {
    const NetConfig c = tiny(2, 1, 4);
    NetWeights w = build_network(c, 0);
    w.find("enc1.conv.bias").values[0] = std::numeric_limits<double>::quiet_NaN();
    try {
        forward(w, textured_group({16, 16, 16}, 2, 8));
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == "non_finite");
        CHECK(std::string(e.what()).find("layer") != std::string::npos);
    }
}

TEST_CASE("instance normalization standardizes every channel") {
    const NetConfig c = tiny(3, 2, 6);
    const NetWeights w = build_network(c, 11);
    Tensor in = stack_group(textured_group({24, 24, 24}, 3, 9), c);
    ForwardCache cache;
    network_forward(w, in, &cache);
    REQUIRE(!cache.blocks.empty());
    for (const auto& b : cache.blocks) {
        const std::size_t v = b.normalized.voxels();
        for (int ch = 0; ch < b.normalized.channels; ++ch) {
            double mean = 0.0, var = 0.0;
            for (std::size_t i = 0; i < v; ++i) mean += b.normalized.data[ch * v + i];
            mean /= static_cast<double>(v);
            for (std::size_t i = 0; i < v; ++i) var += std::pow(b.normalized.data[ch * v + i] - mean, 2);
            var /= static_cast<double>(v);
            CHECK(std::abs(mean) < 1e-4);
            CHECK(std::abs(var - 1.0) < 1e-3);
        }
    }
}

TEST_CASE("network backward matches finite differences of a linear readout") {
    const NetConfig c = tiny(2, 2, 3);
    NetWeights w = build_network(c, 12);
    const Tensor in = stack_group(textured_group({12, 12, 12}, 2, 10), c);
    std::mt19937_64 rng(13);
    ForwardCache cache;
    const Tensor out = network_forward(w, in, &cache);
    Tensor probe{out.channels, out.dims, oracle::random_values(out.data.size(), rng)};
    const auto grads = network_backward(w, cache, probe);
    auto readout = [&] {
        const Tensor o = network_forward(w, in);
        double s = 0.0;
        for (std::size_t i = 0; i < o.data.size(); ++i) s += o.data[i] * probe.data[i];
        return s;
    };
    double worst = 0.0;
    for (std::size_t k = 0; k < w.params.size(); ++k) {
        auto& vals = w.params[k].values;
        std::uniform_int_distribution<std::size_t> pick(0, vals.size() - 1);
        for (int r = 0; r < 2; ++r) {
            const std::size_t j = pick(rng);
            const double num = oracle::central_difference(readout, vals[j], 1e-5);
            worst = std::max(worst, oracle::rel_error(grads[k][j], num, 1e-3));
        }
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("loss gradient with respect to weights matches finite differences") {
    // 16^3, N = 2, base 4, one downscale. The objective is piecewise smooth
    // (leaky activation, trilinear cells, L1 terms); a step of 1e-5 keeps the
    // central difference inside one smooth piece.
    const NetConfig c = tiny(2, 1, 4);
    NetWeights w = build_network(c, 14);
    const ImageGroup g = textured_group({16, 16, 16}, 2, 15);
    const LossWeights lw;
    const StepEvaluation base = evaluate_step(w, g, lw, true);
    std::mt19937_64 rng(16);
    auto loss = [&] { return evaluate_step(w, g, lw, false).loss.total; };
    int sampled = 0;
    double worst = 0.0;
    for (std::size_t k = 0; k < w.params.size(); ++k) {
        auto& vals = w.params[k].values;
        std::uniform_int_distribution<std::size_t> pick(0, vals.size() - 1);
        for (int r = 0; r < 3; ++r) {
            const std::size_t j = pick(rng);
            const double num = oracle::central_difference(loss, vals[j], 1e-5);
            worst = std::max(worst, oracle::rel_error(base.grads[k][j], num, 1e-6));
            ++sampled;
        }
    }
    CHECK(sampled >= 20);
    CHECK(worst < 1e-2);
}

}
