#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "pseg/preprocess.hpp"

using namespace pseg;

namespace {

VoxelGrid line_grid(std::vector<double> v) {
    const int n = static_cast<int>(v.size());
    return VoxelGrid({n, 1, 1}, {1, 1, 1}, std::move(v));
}

}  // namespace

TEST_CASE("window presets carry the published width/level pairs") {
    CHECK(WindowPreset::brain().width == 80);
    CHECK(WindowPreset::brain().level == 40);
    CHECK(WindowPreset::abdomen().width == 400);
    CHECK(WindowPreset::abdomen().level == 40);
    CHECK(WindowPreset::bone().width == 1800);
    CHECK(WindowPreset::bone().level == 400);
    CHECK(WindowPreset::lung().width == 1500);
    CHECK(WindowPreset::lung().level == -600);
    CHECK(WindowPreset::mediastinum().width == 400);
    CHECK(WindowPreset::mediastinum().level == 40);
    CHECK_THROWS_AS(WindowPreset::named("liver"), Error);
    CHECK_THROWS_AS(WindowPreset::custom(0, 10), Error);
}

TEST_CASE("window_ct endpoint mapping") {
    auto out = window_ct(line_grid({-160, 40, 240, -1000, 1000}), WindowPreset::abdomen());
    CHECK(out.kind() == IntensityKind::normalized_0_255);
    CHECK(out.values()[0] == 0.0);
    CHECK(out.values()[1] == 127.5);
    CHECK(out.values()[2] == 255.0);
    CHECK(out.values()[3] == 0.0);
    CHECK(out.values()[4] == 255.0);
    auto lung = window_ct(line_grid({-1350}), WindowPreset::lung());
    CHECK(lung.values()[0] == 0.0);
    CHECK_THROWS_AS(window_ct(out, WindowPreset::abdomen()), Error);
}

TEST_CASE("window_ct is monotone and idempotent on re-windowed data") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1200, 1200);
    std::vector<double> v(500);
    for (auto& x : v) x = u(rng);
    std::sort(v.begin(), v.end());
    auto preset = WindowPreset::abdomen();
    auto out = window_ct(line_grid(v), preset);
    for (std::size_t i = 1; i < v.size(); ++i) CHECK(out.values()[i] >= out.values()[i - 1]);

    // map back into HU space, re-window: identical output
    std::vector<double> hu(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) hu[i] = out.values()[i] / 255.0 * preset.width + (preset.level - preset.width / 2);
    auto again = window_ct(line_grid(hu), preset);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(again.values()[i] == doctest::Approx(out.values()[i]).epsilon(1e-12));
}

TEST_CASE("percentile_normalize on 1..1000 matches the sorted-array oracle") {
    std::vector<double> v(1000);
    for (int i = 0; i < 1000; ++i) v[i] = i + 1;
    std::shuffle(v.begin(), v.end(), std::mt19937_64(3));
    auto bounds = foreground_bounds(line_grid(v));
    // oracle: h = (n-1) q / 100 on sorted 1..1000 => value = 1 + h
    CHECK(bounds.lo == doctest::Approx(1 + 999 * 0.005).epsilon(1e-14));
    CHECK(bounds.hi == doctest::Approx(1 + 999 * 0.995).epsilon(1e-14));
    CHECK(bounds.lo == doctest::Approx(5.995).epsilon(1e-12));
    CHECK(bounds.hi == doctest::Approx(995.005).epsilon(1e-12));

    auto out = percentile_normalize(line_grid(v));
    auto [mn, mx] = std::minmax_element(out.values().begin(), out.values().end());
    CHECK(*mn == 0.0);
    CHECK(*mx == 255.0);
}

TEST_CASE("percentile_normalize degenerate and error cases") {
    auto c = percentile_normalize(line_grid({5, 5, 5, 0}));
    for (double x : c.values()) CHECK(x == 0.0);
    CHECK_THROWS_AS(percentile_normalize(line_grid({0, -1, -3})), Error);
}

TEST_CASE("percentile_normalize is invariant under positive affine rescaling") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.1, 50);
    std::vector<double> v(300), w(300);
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = u(rng);
        w[i] = 3.5 * v[i] + 2.0;  // stays positive: same foreground, same ranks
    }
    auto a = percentile_normalize(line_grid(v));
    auto b = percentile_normalize(line_grid(w));
    for (std::size_t i = 0; i < v.size(); ++i) {
        CHECK(a.values()[i] == doctest::Approx(b.values()[i]).epsilon(1e-9));
        CHECK(a.values()[i] >= 0.0);
        CHECK(a.values()[i] <= 255.0);
    }
}

TEST_CASE("identity resample reproduces the image within 1e-5") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 255);
    for (Dims d : {Dims{7, 5, 4}, Dims{40, 3, 2}, Dims{1, 1, 6}}) {
        std::vector<double> v(d.voxels());
        for (auto& x : v) x = u(rng);
        VoxelGrid g(d, {0.8, 0.8, 2.5}, v);
        auto r = resample(g, d, g.spacing());
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(r.values()[i] - v[i]) < 1e-5);
    }
}

TEST_CASE("cubic resampling reproduces a linear ramp away from borders") {
    const int n = 40;
    std::vector<double> v(n);
    for (int i = 0; i < n; ++i) v[i] = 3.0 * i - 7.0;
    VoxelGrid g({n, 1, 1}, {1, 1, 1}, v);
    // upsample x2.5: target spacing 0.4
    const int m = resampled_count(n, 1.0, 0.4);
    auto r = resample(g, {m, 1, 1}, {0.4, 1, 1});
    for (int i = 0; i < m; ++i) {
        const double x = i * 0.4;
        if (x < 8 || x > n - 9) continue;
        CHECK(std::abs(r.values()[i] - (3.0 * x - 7.0)) < 1e-4);
    }
}

TEST_CASE("cubic resampling commutes with an intensity shift") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0, 100);
    Dims d{9, 8, 5};
    std::vector<double> v(d.voxels()), w(d.voxels());
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = u(rng);
        w[i] = v[i] + 37.0;
    }
    Dims t{13, 6, 11};
    Spacing ts{0.7, 1.4, 0.45};
    auto a = resample(VoxelGrid(d, {1, 1, 1}, v), t, ts);
    auto b = resample(VoxelGrid(d, {1, 1, 1}, w), t, ts);
    for (std::size_t i = 0; i < a.values().size(); ++i) CHECK(std::abs(b.values()[i] - a.values()[i] - 37.0) < 1e-9);
}

TEST_CASE("nearest-neighbour x2 upscaling of a checkerboard yields 2x2 blocks") {
    LabelMask m({2, 2, 1}, {1, 1, 1}, {1, 2, 2, 1});
    auto r = resample(m, {4, 4, 1}, {0.5, 0.5, 1});
    const std::vector<std::uint8_t> expect = {1, 1, 2, 2, 1, 1, 2, 2, 2, 2, 1, 1, 2, 2, 1, 1};
    CHECK(std::equal(expect.begin(), expect.end(), r.labels().begin()));
}

TEST_CASE("mask resampling never invents labels") {
    std::mt19937_64 rng(5);
    LabelMask m({6, 5, 4}, {1, 1, 1});
    for (auto& v : m.labels()) v = static_cast<std::uint8_t>((rng() % 4) * 2);
    auto r = resample(m, {11, 3, 9}, {0.55, 1.7, 0.45});
    for (int id : r.object_ids()) CHECK(m.object_ids().count(id) == 1);
}

TEST_CASE("axial spacing rule") {
    VoxelGrid g({4, 4, 30}, {1, 1, 1});
    LabelMask m = LabelMask::like(g);
    auto [g2, m2] = enforce_axial_spacing(g, m);
    CHECK(g2.spacing().sz == 3.0);
    CHECK(g2.dims().nz == 10);
    CHECK(m2.dims() == g2.dims());
    CHECK(m2.spacing() == g2.spacing());

    VoxelGrid thick({4, 4, 7}, {1, 1, 5});
    auto [g3, m3] = enforce_axial_spacing(thick, LabelMask::like(thick));
    CHECK(g3.dims().nz == 7);
    CHECK(g3.spacing().sz == 5.0);

    VoxelGrid exact({4, 4, 7}, {1, 1, 3});
    auto [g4, m4] = enforce_axial_spacing(exact, LabelMask::like(exact));
    CHECK(g4.dims().nz == 7);
    CHECK(g4.spacing().sz == 3.0);
}
