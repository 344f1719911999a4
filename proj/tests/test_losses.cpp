#include <cmath>
#include <random>

#include "doctest.h"

#include "groupreg/field_ops.hpp"
#include "groupreg/losses.hpp"
#include "groupreg/oneshot.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace groupreg;
using namespace testing_helpers;

namespace {

oracle::Field split(const DisplacementField& f) {
    return {to_vector(f.component(0)), to_vector(f.component(1)), to_vector(f.component(2))};
}

std::vector<oracle::Field> split(const FieldSet& fs) {
    std::vector<oracle::Field> out;
    for (const auto& f : fs.fields()) out.push_back(split(f));
    return out;
}

FieldSet random_fields(const Grid3& grid, std::size_t n, std::mt19937_64& rng, double amp) {
    std::vector<DisplacementField> f;
    for (std::size_t k = 0; k < n; ++k) f.emplace_back(grid, oracle::random_values(3 * grid.size(), rng, -amp, amp));
    return FieldSet(std::move(f));
}

std::vector<double> pack(const FieldSet& fs) {
    std::vector<double> out;
    for (const auto& f : fs.fields()) out.insert(out.end(), f.components().begin(), f.components().end());
    return out;
}

} // namespace

TEST_SUITE("losses") {

TEST_CASE("loss terms match brute-force oracles on random instances") {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> dim(2, 9), phases(1, 4);
    const int windows[] = {3, 5, 7};
    for (int trial = 0; trial < 20; ++trial) {
        const Grid3 grid = Grid3::make({dim(rng), dim(rng), dim(rng)});
        const int n = phases(rng);
        const int w = windows[trial % 3];
        const Volume f = random_volume(grid, rng), g = random_volume(grid, rng);
        const auto fs = random_fields(grid, n, rng, 2.0);
        const auto fd = to_vector(f.data()), gd = to_vector(g.data());
        CHECK(std::abs(local_ncc(f, g, w) - oracle::ncc(fd, gd, grid.dims, w)) < 1e-6);
        CHECK(std::abs(smoothness_loss(fs, g) - oracle::smoothness(split(fs), gd, grid.dims)) < 1e-6);
        CHECK(std::abs(cyclic_loss(fs) - oracle::cyclic(split(fs), grid.dims)) < 1e-6);
    }
}

TEST_CASE("local_ncc examples") {
    std::mt19937_64 rng(7);
    const Grid3 grid = Grid3::make({12, 12, 12});
    const Volume f(grid, oracle::smooth_texture(grid.dims, rng));
    SUBCASE("self correlation is about one") {
        const double r = local_ncc(f, f, 5);
        CHECK(r <= 1.0);
        CHECK(r > 1.0 - 1e-3);
    }
    SUBCASE("positive affine maps leave the value unchanged") {
        std::vector<double> g(f.size());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = 2.5 * f[i] + 0.7;
        CHECK(std::abs(local_ncc(f, Volume(grid, g), 5) - local_ncc(f, f, 5)) < 1e-5);
    }
    SUBCASE("fixed 7^3 pseudo-random pair against the oracle") {
        std::mt19937_64 r2(77);
        const Grid3 g7 = Grid3::make({7, 7, 7});
        const auto a = oracle::random_values(343, r2), b = oracle::random_values(343, r2);
        CHECK(std::abs(local_ncc(Volume(g7, a), Volume(g7, b), 5) - oracle::ncc(a, b, g7.dims, 5)) < 1e-6);
    }
    SUBCASE("window and dims are validated") {
        CHECK_THROWS_AS(local_ncc(f, f, 4), Error);
        CHECK_THROWS_AS(local_ncc(f, Volume(Grid3::make({12, 12, 11}), std::vector<double>(12 * 12 * 11)), 5), Error);
    }
}

TEST_CASE("local_ncc symmetry, bounds and affine invariance over random trials") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> scale(0.2, 5.0), shift(-3.0, 3.0);
    for (int trial = 0; trial < 100; ++trial) {
        const Grid3 grid = Grid3::make({6 + trial % 3, 7, 6});
        const Volume f(grid, oracle::smooth_texture(grid.dims, rng));
        const Volume g = random_volume(grid, rng);
        const double fg = local_ncc(f, g, 3);
        CHECK(std::abs(fg - local_ncc(g, f, 3)) < 1e-9);
        CHECK(fg >= -1.0);
        CHECK(fg <= 1.0);
        const double a = scale(rng), b = shift(rng);
        std::vector<double> fa(f.size());
        for (std::size_t i = 0; i < fa.size(); ++i) fa[i] = a * f[i] + b;
        CHECK(std::abs(local_ncc(Volume(grid, fa), g, 3) - fg) < 1e-5);
    }
}

TEST_CASE("similarity_loss") {
    std::mt19937_64 rng(8);
    const Grid3 grid = Grid3::make({10, 10, 10});
    const Volume t(grid, oracle::smooth_texture(grid.dims, rng));
    SUBCASE("perfect alignment gives about -1") {
        const double s = similarity_loss(ImageGroup({t, t, t}), t, 5);
        CHECK(s >= -1.0);
        CHECK(s < -1.0 + 1e-3);
    }
    SUBCASE("is the negative mean of per-image correlations") {
        const Volume a = random_volume(grid, rng), b = random_volume(grid, rng);
        const double expect = -(oracle::ncc(to_vector(a.data()), to_vector(t.data()), grid.dims, 5) +
                                oracle::ncc(to_vector(b.data()), to_vector(t.data()), grid.dims, 5)) /
                              2.0;
        CHECK(std::abs(similarity_loss(ImageGroup({a, b}), t, 5) - expect) < 1e-6);
        // ncc values {1, 0} would give -0.5: the mean is a plain arithmetic mean.
        const double na = local_ncc(a, t, 5), nt = local_ncc(t, t, 5);
        CHECK(similarity_loss(ImageGroup({t, a}), t, 5) == doctest::Approx(-(na + nt) / 2.0).epsilon(1e-12));
    }
}

TEST_CASE("smoothness_loss") {
    const Grid3 grid = Grid3::make({8, 8, 8});
    std::mt19937_64 rng(9);
    const Volume t = random_volume(grid, rng);
    CHECK(smoothness_loss(FieldSet({DisplacementField::constant(grid, {1, -2, 3})}), t) == 0.0);
    CHECK(smoothness_loss(FieldSet::zeros(grid, 3), t) == 0.0);

    SUBCASE("unit ramp in x on a constant template") {
        const auto f = field_from(grid, [](double, double, double x) { return Vec3{0, 0, x}; });
        const Volume c(grid, std::vector<double>(grid.size(), 0.3));
        const double got = smoothness_loss(FieldSet({f}), c);
        CHECK(std::abs(got - (1.0 / 3.0) * (7.0 / 8.0)) < 1e-6);
        CHECK(std::abs(got - oracle::smoothness({split(f)}, to_vector(c.data()), grid.dims)) < 1e-6);
    }
    SUBCASE("decreases as a rough field is blended toward zero") {
        const DisplacementField rough(grid, oracle::random_values(3 * grid.size(), rng, -2, 2));
        double prev = std::numeric_limits<double>::infinity();
        for (double lam : {1.0, 0.5, 0.25, 0.0}) {
            std::vector<double> c(rough.components().begin(), rough.components().end());
            for (double& v : c) v *= lam;
            const double s = smoothness_loss(FieldSet({DisplacementField(grid, c)}), t);
            CHECK(s < prev);
            CHECK(s >= 0.0);
            prev = s;
        }
        CHECK(prev == 0.0);
    }
}

TEST_CASE("cyclic_loss") {
    const Grid3 grid = Grid3::make({6, 5, 4});
    std::mt19937_64 rng(10);
    const DisplacementField d(grid, oracle::random_values(3 * grid.size(), rng));
    std::vector<double> neg(d.components().begin(), d.components().end());
    for (double& v : neg) v = -v;
    CHECK(cyclic_loss(FieldSet({d, DisplacementField(grid, neg)})) == 0.0);
    CHECK(cyclic_loss(FieldSet::zeros(grid, 4)) == 0.0);
    const auto c = DisplacementField::constant(grid, {1, 0, 0});
    CHECK(cyclic_loss(FieldSet({c, c, c})) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-12));
}

TEST_CASE("total_loss combines the terms with the configured weights") {
    std::mt19937_64 rng(12);
    const Grid3 grid = Grid3::make({7, 6, 8});
    const Volume a = random_volume(grid, rng), b = random_volume(grid, rng), t = random_volume(grid, rng);
    const ImageGroup warped({a, b});
    const auto fs = random_fields(grid, 2, rng, 1.5);

    const LossWeights w;  // 1e-3, 1e-2
    const LossBreakdown l = total_loss(warped, t, fs, w);
    const double sim = similarity_loss(warped, t, 5), smo = smoothness_loss(fs, t), cyc = cyclic_loss(fs);
    CHECK(std::abs(l.similarity - sim) < 1e-12);
    CHECK(std::abs(l.smoothness - smo) < 1e-12);
    CHECK(std::abs(l.cyclic - cyc) < 1e-12);
    CHECK(std::abs(l.total - (sim + 1e-3 * smo + 1e-2 * cyc)) < 1e-9);
    CHECK(l.total == l.similarity + w.lambda0 * l.smoothness + w.lambda1 * l.cyclic);

    const LossBreakdown z = total_loss(warped, t, fs, LossWeights{0.0, 0.0, 5, false});
    CHECK(z.total == z.similarity);

    SUBCASE("aligned group with zero fields sits at the floor") {
        const Volume tex(grid, oracle::smooth_texture(grid.dims, rng));
        const LossBreakdown f =
            total_loss(ImageGroup({tex, tex}), tex, FieldSet::zeros(grid, 2), LossWeights{1e-3, 0.0, 5, false});
        CHECK(f.total < -1.0 + 1e-3);
        CHECK(f.smoothness == 0.0);
    }
    SUBCASE("repeat evaluations are identical") {
        const LossBreakdown again = total_loss(warped, t, fs, w);
        CHECK(again.total == l.total);
        CHECK(again.similarity == l.similarity);
    }
    SUBCASE("weights are validated") {
        CHECK_THROWS_AS(total_loss(warped, t, fs, LossWeights{-1.0, 0.0, 5, false}), Error);
        CHECK_THROWS_AS(total_loss(warped, t, fs, LossWeights{0.0, 0.0, 1, false}), Error);
    }
}

TEST_CASE("group objective matches the loss functions on warped images") {
    std::mt19937_64 rng(13);
    const Grid3 grid = Grid3::make({8, 8, 8});
    const ImageGroup images({Volume(grid, oracle::smooth_texture(grid.dims, rng)),
                             Volume(grid, oracle::smooth_texture(grid.dims, rng)),
                             Volume(grid, oracle::smooth_texture(grid.dims, rng))});
    const auto fs = random_fields(grid, 3, rng, 1.5);
    const auto obj = evaluate_group_objective(images, pack(fs), LossWeights{}, false);
    std::vector<Volume> warped;
    for (std::size_t n = 0; n < 3; ++n) warped.push_back(warp(images[n], fs[n]));
    const ImageGroup wg(warped);
    const Volume tmpl = implicit_template(wg);
    const LossBreakdown expect = total_loss(wg, tmpl, fs, LossWeights{});
    CHECK(obj.loss.total == doctest::Approx(expect.total).epsilon(1e-12));
    CHECK(obj.loss.similarity == doctest::Approx(expect.similarity).epsilon(1e-12));
    CHECK(obj.loss.smoothness == doctest::Approx(expect.smoothness).epsilon(1e-12));
    CHECK(obj.loss.cyclic == doctest::Approx(expect.cyclic).epsilon(1e-12));
}

TEST_CASE("displacement gradient of the total loss matches central differences") {
    std::mt19937_64 rng(14);
    const Grid3 grid = Grid3::make({8, 8, 8});
    std::vector<Volume> vols;
    for (int n = 0; n < 3; ++n) vols.emplace_back(grid, oracle::smooth_texture(grid.dims, rng));
    const ImageGroup images(vols);
    std::vector<double> packed = pack(random_fields(grid, 3, rng, 1.2));
    const LossWeights w{1e-1, 1e-1, 5, false};  // larger weights exercise every term
    const auto obj = evaluate_group_objective(images, packed, w, true);
    auto f = [&] { return evaluate_group_objective(images, packed, w, false).loss.total; };
    std::uniform_int_distribution<std::size_t> pick(0, packed.size() - 1);
    double worst = 0.0;
    for (int i = 0; i < 60; ++i) {
        const std::size_t k = pick(rng);
        const double num = oracle::central_difference(f, packed[k], 1e-3);
        worst = std::max(worst, oracle::rel_error(obj.grad_fields[k], num, 1e-6));
    }
    CHECK(worst < 1e-3);

}

}
