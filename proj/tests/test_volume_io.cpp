#include "doctest.h"

#include <cstring>
#include <random>

#include "pseg/io.hpp"
#include "pseg/volume.hpp"

using namespace pseg;

namespace {

// Hand-built NIfTI-1 file, independent of write_nifti1.
Bytes make_nifti(std::int16_t nx, std::int16_t ny, std::int16_t nz, std::int16_t datatype, std::int16_t bitpix,
                 const std::vector<std::uint8_t>& payload, float slope = 0.0f, float inter = 0.0f) {
    Bytes b(352, 0);
    auto put = [&](std::size_t off, const void* src, std::size_t n) { std::memcpy(b.data() + off, src, n); };
    const std::int32_t hdr = 348;
    put(0, &hdr, 4);
    const std::int16_t dim[8] = {3, nx, ny, nz, 1, 1, 1, 1};
    put(40, dim, 16);
    put(70, &datatype, 2);
    put(72, &bitpix, 2);
    const float pixdim[8] = {1, 1, 1, 1, 0, 0, 0, 0};
    put(76, pixdim, 32);
    const float off = 352;
    put(108, &off, 4);
    put(112, &slope, 4);
    put(116, &inter, 4);
    put(344, "n+1\0", 4);
    b.resize(352 + payload.size());
    if (!payload.empty()) std::memcpy(b.data() + 352, payload.data(), payload.size());
    return b;
}

std::vector<std::uint8_t> float_payload(const std::vector<float>& v) {
    std::vector<std::uint8_t> out(v.size() * 4);
    std::memcpy(out.data(), v.data(), out.size());
    return out;
}

}  // namespace

TEST_CASE("read_nifti1 maps header fields and payload") {
    auto bytes = make_nifti(2, 2, 2, 16, 32, float_payload({0, 1, 2, 3, 4, 5, 6, 7}));
    auto g = read_nifti1(bytes);
    CHECK(g.dims() == Dims{2, 2, 2});
    CHECK(g.spacing() == Spacing{1, 1, 1});
    CHECK(g.kind() == IntensityKind::raw);
    for (int i = 0; i < 8; ++i) CHECK(g.values()[i] == i);
}

TEST_CASE("read_nifti1 applies scl_slope / scl_inter") {
    auto g = read_nifti1(make_nifti(2, 2, 2, 16, 32, float_payload({0, 1, 2, 3, 4, 5, 6, 7}), 2.0f, 1.0f));
    for (int i = 0; i < 8; ++i) CHECK(g.values()[i] == 2 * i + 1);
}

TEST_CASE("read_nifti1 handles uint8 and int16 payloads") {
    auto u8 = read_nifti1(make_nifti(2, 1, 1, 2, 8, {7, 250}));
    CHECK(u8.values()[1] == 250);
    std::vector<std::uint8_t> p(4);
    const std::int16_t vals[2] = {-1000, 1200};
    std::memcpy(p.data(), vals, 4);
    auto i16 = read_nifti1(make_nifti(2, 1, 1, 4, 16, p));
    CHECK(i16.values()[0] == -1000);
    CHECK(i16.values()[1] == 1200);
}

TEST_CASE("read_nifti1 error paths") {
    auto expect_kind = [](const Bytes& b, ErrorKind k) {
        try {
            read_nifti1(b);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.kind() == k);
        }
    };
    Bytes gz = {0x1f, 0x8b, 0x08, 0x00};
    expect_kind(gz, ErrorKind::compressed);
    try {
        read_nifti1(gz);
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("compressed not supported") != std::string::npos);
    }

    auto good = make_nifti(2, 2, 2, 16, 32, float_payload({0, 1, 2, 3, 4, 5, 6, 7}));
    auto bad_magic = good;
    bad_magic[345] = 'X';
    expect_kind(bad_magic, ErrorKind::format);

    auto truncated = good;
    truncated.resize(truncated.size() - 3);
    expect_kind(truncated, ErrorKind::truncated);
    expect_kind(Bytes(100, 0), ErrorKind::truncated);

    expect_kind(make_nifti(2, 1, 1, 64, 64, std::vector<std::uint8_t>(16)), ErrorKind::unsupported);
}

TEST_CASE("write_nifti1 round trips dims, spacing and float32 values bit-exactly") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> dim(1, 16);
    std::uniform_real_distribution<float> val(-1e4f, 1e4f);
    for (int trial = 0; trial < 60; ++trial) {
        Dims d{dim(rng), dim(rng), dim(rng)};
        std::vector<double> v(d.voxels());
        for (auto& x : v) x = val(rng);
        VoxelGrid g(d, {0.5, 1.25, 3.0}, v);
        auto back = read_nifti1(write_nifti1(g));
        REQUIRE(back.dims() == d);
        CHECK(back.spacing() == g.spacing());
        CHECK(std::equal(back.values().begin(), back.values().end(), g.values().begin()));
    }
    VoxelGrid one({1, 1, 1}, {1, 1, 3}, {42.5});
    auto back = read_nifti1(write_nifti1(one));
    CHECK(back.values()[0] == 42.5);
    CHECK(back.spacing().sz == 3.0);
}

TEST_CASE("mask NIfTI and interchange round trips") {
    LabelMask m({3, 2, 2}, {1, 1, 2}, {0, 1, 2, 0, 0, 1, 3, 3, 0, 0, 1, 0});
    CHECK(read_nifti1_mask(write_nifti1(m)) == m);
    CHECK(decode_interchange_mask(encode_interchange(m)) == m);
    CHECK(m.object_ids() == std::set<int>{1, 2, 3});
}

TEST_CASE("interchange format round trips and rejects bad input") {
    VoxelGrid g({2, 3, 1}, {0.7, 0.7, 2.5}, {1.5, -2, 3.25, 4, 5, 1e-3}, IntensityKind::raw);
    auto back = decode_interchange(encode_interchange(g));
    CHECK(back.dims() == g.dims());
    CHECK(back.spacing() == g.spacing());
    CHECK(std::equal(back.values().begin(), back.values().end(), g.values().begin()));

    auto bytes = encode_interchange(g, PayloadType::float32);
    auto head_end = std::find(bytes.begin(), bytes.end(), '\n');
    CHECK(std::string(bytes.begin(), head_end).find("\"dtype\":\"float32\"") != std::string::npos);
    bytes.pop_back();
    CHECK_THROWS_AS(decode_interchange(bytes), Error);
    CHECK_THROWS_AS(decode_interchange(Bytes{'{', '}'}), Error);
}

TEST_CASE("middle_slice_index uses floor(nz/2)") {
    CHECK(middle_slice_index(Dims{4, 4, 9}) == 4);
    CHECK(middle_slice_index(Dims{4, 4, 8}) == 4);
    CHECK(middle_slice_index(Dims{4, 4, 1}) == 0);
    VoxelGrid a({2, 2, 7}, {1, 1, 1});
    VoxelGrid b({2, 2, 7}, {1, 1, 1}, std::vector<double>(28, 9.0));
    CHECK(middle_slice_index(a) == middle_slice_index(b));
    for (int nz = 1; nz < 40; ++nz) {
        const int m = middle_slice_index(Dims{1, 1, nz});
        CHECK(m >= 0);
        CHECK(m < nz);
    }
}

TEST_CASE("extract/insert slice") {
    std::mt19937_64 rng(9);
    LabelMask m({5, 4, 6}, {1, 1, 1});
    for (auto& v : m.labels()) v = static_cast<std::uint8_t>(rng() % 3);
    const auto original = m;
    for (int z = 0; z < 6; ++z) {
        insert_slice(m, z, extract_slice(m, z));
        CHECK(m == original);
    }
    const auto before = m.foreground_count();
    const auto slice_fg = extract_slice(m, 2).foreground_count();
    insert_slice(m, 2, Mask2D(5, 4));
    CHECK(m.foreground_count() == before - slice_fg);

    VoxelGrid g({5, 4, 6}, {1, 1, 1});
    CHECK_THROWS_AS(extract_slice(g, 6), Error);
    CHECK_THROWS_AS(extract_slice(g, -1), Error);
    CHECK_THROWS_AS(insert_slice(m, 0, Mask2D(4, 4)), Error);
}

TEST_CASE("geometric primitives validate their invariants") {
    Dims d{32, 32, 10};
    CHECK_NOTHROW((BoundingBox2D{4, 8, 8, 24, 24}.validate(d)));
    CHECK_NOTHROW((BoundingBox2D{0, 0, 0, 32, 32}.validate(d)));
    CHECK_THROWS_AS((BoundingBox2D{4, 24, 8, 8, 24}.validate(d)), Error);
    CHECK_THROWS_AS((BoundingBox2D{4, 8, 8, 33, 24}.validate(d)), Error);
    CHECK_THROWS_AS((BoundingBox2D{10, 8, 8, 24, 24}.validate(d)), Error);
    CHECK_THROWS_AS((SliceRange{5, 4}.validate(10)), Error);
    CHECK_THROWS_AS((SliceRange{0, 10}.validate(10)), Error);
    CHECK_NOTHROW(SliceRange{3, 3}.validate(10));
    CHECK_THROWS_AS((BoundingBox3D{0, 0, 4, 4, 3, 3}.validate(d)), Error);

    LabelMask m({8, 8, 4}, {1, 1, 1});
    m.at(2, 3, 1) = 1;
    m.at(5, 6, 2) = 1;
    auto box = tight_box(m);
    CHECK(box == BoundingBox3D{2, 3, 6, 7, 1, 3});
    CHECK(z_extent(m) == SliceRange{1, 2});
    CHECK(tight_box(extract_slice(m, 2), 2) == BoundingBox2D{2, 5, 6, 6, 7});
    CHECK_THROWS_AS(tight_box(extract_slice(m, 0), 0), Error);
}

TEST_CASE("VoxelGrid invariants") {
    CHECK_THROWS_AS(VoxelGrid({2, 2, 2}, {1, 0, 1}), Error);
    CHECK_THROWS_AS(VoxelGrid({2, 2, 2}, {1, 1, 1}, std::vector<double>(7)), Error);
    VoxelGrid g({1, 1, 2}, {1, 1, 1}, {0.0, 300.0}, IntensityKind::normalized_0_255);
    CHECK_THROWS_AS(g.validate(), Error);
}
