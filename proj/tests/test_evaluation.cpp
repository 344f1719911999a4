#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"

#include "groupreg/dataio.hpp"
#include "groupreg/evaluation.hpp"
#include "groupreg/oneshot.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace groupreg;
using namespace testing_helpers;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "groupreg_eval" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

LandmarkSet points(std::vector<Vec3> p) { return LandmarkSet{std::move(p), LandmarkConvention::zero_based}; }

FieldSet zero_fields(const Grid3& grid, std::size_t n) {
    std::vector<DisplacementField> f(n, DisplacementField::zeros(grid));
    return FieldSet(std::move(f));
}

Phantom small_phantom() {
    PhantomSpec s;
    s.dims = {32, 32, 32};
    s.num_phases = 5;
    s.max_amplitude = 3.0;
    s.num_landmarks = 60;
    s.seed = 2;
    return make_phantom(s);
}

} // namespace

TEST_SUITE("evaluation") {

TEST_CASE("tre on hand-computed examples") {
    const Vec3 spacing{2.5, 1.0, 1.0};
    const TREStats s = tre(points({{1, 1, 1}, {0, 0, 0}}), points({{0, 0, 0}, {0, 0, 0}}), spacing);
    REQUIRE(s.errors.size() == 2);
    CHECK(s.errors[0] == doctest::Approx(std::sqrt(2.5 * 2.5 + 1 + 1)));
    CHECK(s.errors[1] == 0.0);
    CHECK(s.mean == doctest::Approx(std::sqrt(8.25) / 2));
    CHECK(s.std == doctest::Approx(std::sqrt(8.25) / 2));
    CHECK(s.rmse == doctest::Approx(std::sqrt(8.25 / 2)));
    CHECK(s.fraction_below[0] == 0.5);

    const TREStats exact = tre(points({{0, 0, 1.5}}), points({{0, 0, 0}}), {1, 1, 1});
    CHECK(exact.fraction_below == std::array<double, 3>{0.0, 1.0, 1.0});
}

TEST_CASE("tre input validation") {
    CHECK_THROWS_AS(tre(points({{0, 0, 0}}), points({{0, 0, 0}, {1, 1, 1}}), {1, 1, 1}), Error);
    LandmarkSet one_based{{{1, 1, 1}}, LandmarkConvention::one_based};
    CHECK_THROWS_AS(tre(points({{0, 0, 0}}), one_based, {1, 1, 1}), Error);
}

TEST_CASE("tre properties") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(-20, 20);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Vec3> a(30), b(30);
        for (int k = 0; k < 30; ++k) {
            a[k] = {u(rng), u(rng), u(rng)};
            b[k] = {u(rng), u(rng), u(rng)};
        }
        const Vec3 spacing{2.5, 0.97, 0.97};
        const TREStats s = tre(points(a), points(b), spacing);
        CHECK(s.rmse * s.rmse == doctest::Approx(s.mean * s.mean + s.std * s.std).epsilon(1e-10));
        for (double e : s.errors) CHECK(e >= 0.0);
        const Vec3 t{u(rng), u(rng), u(rng)};
        for (int k = 0; k < 30; ++k)
            for (int ax = 0; ax < 3; ++ax) {
                a[k][ax] += t[ax];
                b[k][ax] += t[ax];
            }
        const TREStats moved = tre(points(a), points(b), spacing);
        for (int k = 0; k < 30; ++k) CHECK(moved.errors[k] == doctest::Approx(s.errors[k]).epsilon(1e-9));
    }
}

TEST_CASE("evaluate_registration") {
    const Phantom p = small_phantom();
    const Vec3 spacing = p.group.grid().spacing;

    SUBCASE("zero fields reproduce the pre-registration error") {
        const FieldSet zero = zero_fields(p.group.grid(), 5);
        for (std::size_t n = 1; n < 5; ++n) {
            const Evaluation e = evaluate_registration(zero, p.landmarks[0], p.landmarks[n], 0, n, spacing);
            const TREStats pre = tre(p.landmarks[0], p.landmarks[n], spacing);
            CHECK(e.inversion_converged);
            CHECK(e.source_phase == 0);
            CHECK(e.target_phase == n);
            for (std::size_t k = 0; k < pre.errors.size(); ++k) CHECK(e.stats.errors[k] == doctest::Approx(pre.errors[k]));
        }
    }
    SUBCASE("ground-truth fields land every landmark") {
        double worst = 0.0;
        for (std::size_t m = 0; m < 5; ++m)
            for (std::size_t n = 0; n < 5; ++n) {
                if (m == n) continue;
                const Evaluation e = evaluate_registration(p.truth, p.landmarks[m], p.landmarks[n], m, n, spacing);
                CHECK(e.inversion_converged);
                worst = std::max(worst, e.stats.mean);
            }
        CHECK(worst < 0.05 * std::max({spacing[0], spacing[1], spacing[2]}));
    }
    SUBCASE("same source and target phase") {
        const Evaluation e = evaluate_registration(p.truth, p.landmarks[2], p.landmarks[2], 2, 2, spacing);
        CHECK(e.stats.mean < InversionParams{}.tol);
    }
    SUBCASE("one entry per target phase") {
        std::vector<PhaseLandmarks> targets;
        for (std::size_t n = 1; n < 5; ++n) targets.push_back({n, p.landmarks[n]});
        const auto evs = evaluate_phases(p.truth, {0, p.landmarks[0]}, targets, spacing);
        REQUIRE(evs.size() == 4);
        for (std::size_t i = 0; i < 4; ++i) CHECK(evs[i].target_phase == i + 1);
    }
}

TEST_CASE("repeatability") {
    const Vec3 s{1, 1, 1};
    const Repeatability r = repeatability({points({{1, 0, 0}}), points({{-1, 0, 0}})}, s);
    CHECK(r.mean == doctest::Approx(1.0));
    CHECK(r.std == doctest::Approx(0.0));
    const Repeatability same = repeatability({points({{3, 4, 5}}), points({{3, 4, 5}}), points({{3, 4, 5}})}, s);
    CHECK(same.mean == 0.0);
    const Repeatability scaled = repeatability({points({{1, 0, 0}}), points({{-1, 0, 0}})}, {2.5, 1, 1});
    CHECK(scaled.mean == doctest::Approx(2.5));
    CHECK_THROWS_AS(repeatability({points({{0, 0, 0}})}, s), Error);
}

TEST_CASE("histogram") {
    std::mt19937_64 rng(5);
    const auto errors = oracle::random_values(300, rng, 0.0, 15.0);
    const Histogram h = tre_histogram(errors, 0.5, 20);
    REQUIRE(h.counts.size() == 20);
    std::size_t total = 0;
    for (auto c : h.counts) total += c;
    CHECK(total == 300);
    const Histogram edges = tre_histogram({0.0, 0.49, 0.5, 9.99, 10.0, 50.0}, 0.5, 20);
    CHECK(edges.counts[0] == 2);
    CHECK(edges.counts[1] == 1);
    CHECK(edges.counts[19] == 3);
}

TEST_CASE("stats json") {
    const TREStats s = compute_stats({1.0, 2.0, 3.0});
    const auto j = stats_to_json(s);
    CHECK(j.at("count") == 3);
    CHECK(j.at("mean_mm").get<double>() == doctest::Approx(2.0));
    CHECK(j.at("errors_mm").size() == 3);
    CHECK(!stats_to_json(s, false).contains("errors_mm"));
    CHECK(format_stats_table({{"T00->T50", s}}).find("T00->T50") != std::string::npos);
}

TEST_CASE("gray mapping and PGM files") {
    CHECK(difference_to_gray(0.0, 0.5) == 128);
    CHECK(difference_to_gray(0.5, 0.5) == 255);
    CHECK(difference_to_gray(-0.5, 0.5) == 0);
    CHECK(difference_to_gray(9.0, 0.5) == 255);
    CHECK(difference_to_gray(-9.0, 0.5) == 0);
    CHECK(difference_to_gray(0.25, 0.5) == 191);

    const fs::path dir = scratch("pgm");
    GrayImage img{7, 3, {}};
    for (int i = 0; i < 21; ++i) img.pixels.push_back(static_cast<unsigned char>(i * 12));
    write_pgm(img, dir / "a.pgm");
    const GrayImage back = read_pgm(dir / "a.pgm");
    CHECK(back.width == 7);
    CHECK(back.height == 3);
    CHECK(back.pixels == img.pixels);
}

TEST_CASE("difference maps") {
    const fs::path dir = scratch("diff");
    std::mt19937_64 rng(8);
    const Grid3 grid = Grid3::make({6, 7, 8});
    std::vector<Volume> vols;
    for (int n = 0; n < 3; ++n) vols.push_back(random_volume(grid, rng));
    const ImageGroup g(vols, {"T00", "T10", "T20"});
    const FieldSet zero = zero_fields(grid, 3);
    std::vector<double> mean(grid.size(), 0.0);
    for (const auto& v : vols)
        for (std::size_t i = 0; i < grid.size(); ++i) mean[i] += v[i] / 3.0;
    const Volume tmpl(grid, mean);

    SUBCASE("zero fields give phase minus template, one file per phase") {
        const auto paths = export_difference_maps(g, zero, tmpl, {0, 2}, dir, 0.5);
        REQUIRE(paths.size() == 3);
        for (const auto& p : paths) CHECK(fs::exists(p));
        CHECK(fs::exists(dir / "diff_T10.csv"));
        const auto slices = difference_slices(g, zero, tmpl, {0, 2});
        for (std::size_t n = 0; n < 3; ++n) {
            REQUIRE(slices[n].size() == 7 * 8);
            for (int y = 0; y < 7; ++y)
                for (int x = 0; x < 8; ++x) CHECK(slices[n][y * 8 + x] == doctest::Approx(vols[n].at(2, y, x) - tmpl.at(2, y, x)));
        }
        const GrayImage img = read_pgm(paths[1]);
        CHECK(img.width == 8);
        CHECK(img.height == 7);
        CHECK(img.pixels[3 * 8 + 4] == difference_to_gray(vols[1].at(2, 3, 4) - tmpl.at(2, 3, 4), 0.5));
    }
    SUBCASE("other slice orientations") {
        const auto cor = difference_slices(g, zero, tmpl, {1, 3});
        CHECK(cor[0].size() == 6 * 8);
        CHECK(cor[0][5 * 8 + 1] == doctest::Approx(vols[0].at(5, 3, 1) - tmpl.at(5, 3, 1)));
        const auto sag = difference_slices(g, zero, tmpl, {2, 7});
        CHECK(sag[2].size() == 6 * 7);
        CHECK(sag[2][4 * 7 + 6] == doctest::Approx(vols[2].at(4, 6, 7) - tmpl.at(4, 6, 7)));
    }
    SUBCASE("invalid requests") {
        CHECK_THROWS_AS(export_difference_maps(g, zero, tmpl, {0, 6}, dir), Error);
        CHECK_THROWS_AS(export_difference_maps(g, zero, tmpl, {3, 0}, dir), Error);
        CHECK_THROWS_AS(export_difference_maps(g, zero, tmpl, {0, 1}, dir, 0.0), Error);
    }
    SUBCASE("ground truth brings the residual down to the interpolation floor") {
        const Phantom p = small_phantom();
        const Volume base = p.group[0];
        const auto with_truth = difference_slices(p.group, p.truth, base, {0, 16});
        const auto without = difference_slices(p.group, zero_fields(p.group.grid(), 5), base, {0, 16});
        for (std::size_t n = 1; n < 5; ++n) {
            double floor = 0.0, raw = 0.0;
            for (int y = 4; y < 28; ++y)
                for (int x = 4; x < 28; ++x) {
                    floor = std::max(floor, std::abs(with_truth[n][y * 32 + x]));
                    raw = std::max(raw, std::abs(without[n][y * 32 + x]));
                }
            CHECK(floor < 0.25 * raw);
        }
    }
    SUBCASE("registered identical phases stay within twice the phantom floor") {
        const Phantom p = small_phantom();
        double noise = 0.0;
        const auto truth_maps = difference_slices(p.group, p.truth, p.group[0], {0, 16});
        for (std::size_t n = 1; n < 5; ++n)
            for (int y = 4; y < 28; ++y)
                for (int x = 4; x < 28; ++x) noise = std::max(noise, std::abs(truth_maps[n][y * 32 + x]));

        const ImageGroup same({p.group[0], p.group[0], p.group[0]});
        RegConfig c;
        c.net.num_phases = 3;
        c.net.num_downscales = 2;
        c.net.base_channels = 4;
        c.n_iter_min = 10;
        c.max_iters = 30;
        c.seed = 6;
        const RegistrationResult r = register_group(same, c);
        std::vector<Volume> warped;
        for (std::size_t n = 0; n < 3; ++n) warped.push_back(warp(same[n], r.fields[n]));
        const Volume tmpl = implicit_template(ImageGroup(std::move(warped)));
        const auto maps = difference_slices(same, r.fields, tmpl, {0, 16});
        double worst = 0.0;
        for (const auto& m : maps)
            for (int y = 4; y < 28; ++y)
                for (int x = 4; x < 28; ++x) worst = std::max(worst, std::abs(m[y * 32 + x]));
        MESSAGE("noise floor " << noise << ", identical-phase residual " << worst);
        CHECK(worst < 2.0 * noise);
    }
}

TEST_CASE("figure exports") {
    const fs::path dir = scratch("fig");
    write_histogram(tre_histogram({0.2, 0.7, 0.8, 3.0}), dir / "h.pgm", dir / "h.csv");
    std::ifstream csv(dir / "h.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "bin_start_mm,bin_end_mm,count");
    CHECK(read_pgm(dir / "h.pgm").width > 0);

    std::vector<LossBreakdown> trace;
    for (int i = 0; i < 10; ++i) {
        LossBreakdown l;
        l.similarity = -0.5 - 0.04 * i;
        trace.push_back(l);
    }
    write_loss_curve(trace, dir / "loss.pgm");
    const GrayImage curve = read_pgm(dir / "loss.pgm");
    CHECK(curve.width == 480);
    CHECK(curve.height == 200);
}

}
