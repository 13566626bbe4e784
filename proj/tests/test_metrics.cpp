#include "doctest.h"

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "pseg/metrics.hpp"

using namespace pseg;

namespace {

LabelMask random_mask(Dims d, Spacing s, std::mt19937_64& rng, double density) {
    std::bernoulli_distribution b(density);
    std::vector<std::uint8_t> v(d.voxels());
    for (auto& x : v) x = b(rng);
    return LabelMask(d, s, std::move(v));
}

LabelMask blob_mask(Dims d, Spacing s, double cx, double cy, double cz, double r) {
    LabelMask m(d, s);
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                const double dx = (x - cx) * s.sx, dy = (y - cy) * s.sy, dz = (z - cz) * s.sz;
                m.at(x, y, z) = dx * dx + dy * dy + dz * dz <= r * r;
            }
    return m;
}

struct Coord {
    int x, y, z;
};

// Surface by explicit 6-neighbour inspection, distances by all-pairs search.
std::vector<Coord> brute_surface(const LabelMask& m) {
    const auto d = m.dims();
    std::vector<Coord> out;
    auto fg = [&](int x, int y, int z) {
        return x >= 0 && y >= 0 && z >= 0 && x < d.nx && y < d.ny && z < d.nz && m.at(x, y, z) != 0;
    };
    const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                if (!fg(x, y, z)) continue;
                bool edge = false;
                for (auto& o : off) edge |= !fg(x + o[0], y + o[1], z + o[2]);
                if (edge) out.push_back({x, y, z});
            }
    return out;
}

double brute_nsd(const LabelMask& p, const LabelMask& r, Spacing s, double tol) {
    auto sp = brute_surface(p), sr = brute_surface(r);
    if (sp.empty() && sr.empty()) return 1.0;
    if (sp.empty() || sr.empty()) return 0.0;
    auto within = [&](const std::vector<Coord>& from, const std::vector<Coord>& to) {
        int n = 0;
        for (const auto& a : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& b : to) {
                const double dx = (a.x - b.x) * s.sx, dy = (a.y - b.y) * s.sy, dz = (a.z - b.z) * s.sz;
                best = std::min(best, dx * dx + dy * dy + dz * dz);
            }
            n += best <= tol * tol;
        }
        return n;
    };
    return double(within(sp, sr) + within(sr, sp)) / double(sp.size() + sr.size());
}

// Exact two-sided p-value by enumerating every sign assignment.
double brute_wilcoxon_p(const std::vector<double>& diff) {
    const int n = static_cast<int>(diff.size());
    std::vector<double> rank(diff.size());
    for (int i = 0; i < n; ++i) {
        int less = 0, equal = 0;
        for (int j = 0; j < n; ++j) {
            less += std::abs(diff[j]) < std::abs(diff[i]);
            equal += std::abs(diff[j]) == std::abs(diff[i]);
        }
        rank[i] = less + (equal + 1) / 2.0;
    }
    double total = 0, wplus = 0;
    for (int i = 0; i < n; ++i) {
        total += rank[i];
        if (diff[i] > 0) wplus += rank[i];
    }
    const double obs = std::min(wplus, total - wplus);
    long hits = 0;
    for (long mask = 0; mask < (1L << n); ++mask) {
        double w = 0;
        for (int i = 0; i < n; ++i)
            if (mask >> i & 1) w += rank[i];
        hits += std::min(w, total - w) <= obs + 1e-9;
    }
    return std::min(1.0, double(hits) / double(1L << n));
}

}  // namespace

TEST_CASE("dsc values") {
    Dims d{4, 1, 1};
    LabelMask a(d, {}, {1, 1, 0, 0}), b(d, {}, {0, 1, 1, 0}), e(d, {});
    CHECK(dsc(a, a) == 1.0);
    CHECK(dsc(a, b) == 0.5);
    CHECK(dsc(e, e) == 1.0);
    CHECK(dsc(a, e) == 0.0);
    CHECK(dsc(e, a) == 0.0);
    LabelMask multi(d, {}, {2, 3, 0, 0});
    CHECK(dsc(multi, a) == 1.0);
    CHECK_THROWS_AS(dsc(a, LabelMask({2, 2, 1}, {})), Error);

    std::mt19937_64 rng(1);
    for (int t = 0; t < 50; ++t) {
        auto p = random_mask({6, 5, 4}, {}, rng, 0.4), q = random_mask({6, 5, 4}, {}, rng, 0.4);
        CHECK(dsc(p, q) == dsc(q, p));
        // same permutation applied to both
        std::vector<std::size_t> perm(p.labels().size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<std::uint8_t> pp, qq;
        for (auto i : perm) {
            pp.push_back(p.labels()[i]);
            qq.push_back(q.labels()[i]);
        }
        CHECK(dsc(LabelMask(p.dims(), {}, pp), LabelMask(q.dims(), {}, qq)) == doctest::Approx(dsc(p, q)).epsilon(1e-15));
    }
}

TEST_CASE("nsd hand geometry") {
    Dims d{8, 1, 1};
    LabelMask a(d, {1, 1, 1}), b(d, {1, 1, 1});
    a.at(1, 0, 0) = 1;
    b.at(4, 0, 0) = 1;
    CHECK(nsd(a, b, 2.0) == 0.0);
    CHECK(nsd(a, b, 4.0) == 1.0);
    CHECK(nsd(a, b, 3.0) == 1.0);
    CHECK(nsd(a, b, Spacing{0.5, 1, 1}, 2.0) == 1.0);
    CHECK(nsd(a, a, 0.01) == 1.0);
    LabelMask e(d, {});
    CHECK(nsd(e, e) == 1.0);
    CHECK(nsd(a, e) == 0.0);
    CHECK_THROWS_AS(nsd(a, b, 0.0), Error);
    CHECK_THROWS_AS(nsd(a, b, -1.0), Error);
    CHECK_THROWS_AS(nsd(a, LabelMask({4, 2, 1}, {})), Error);
}

TEST_CASE("distance transform matches brute force") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 30; ++t) {
        Dims d{1 + int(rng() % 9), 1 + int(rng() % 9), 1 + int(rng() % 9)};
        Spacing s{0.5 + (rng() % 100) / 40.0, 0.5 + (rng() % 100) / 40.0, 0.5 + (rng() % 100) / 40.0};
        auto m = random_mask(d, s, rng, 0.1);
        std::vector<std::uint8_t> sites(m.labels().begin(), m.labels().end());
        auto edt = squared_distance_transform(sites, d, s);
        for (int z = 0; z < d.nz; ++z)
            for (int y = 0; y < d.ny; ++y)
                for (int x = 0; x < d.nx; ++x) {
                    double best = std::numeric_limits<double>::infinity();
                    for (int c = 0; c < d.nz; ++c)
                        for (int b = 0; b < d.ny; ++b)
                            for (int a = 0; a < d.nx; ++a) {
                                if (!m.at(a, b, c)) continue;
                                const double dx = (x - a) * s.sx, dy = (y - b) * s.sy, dz = (z - c) * s.sz;
                                best = std::min(best, dx * dx + dy * dy + dz * dz);
                            }
                    const double got = edt[m.index(x, y, z)];
                    if (std::isinf(best)) CHECK(std::isinf(got));
                    else CHECK(std::abs(got - best) <= 1e-9 * std::max(1.0, best));
                }
    }
}

TEST_CASE("nsd matches the all-pairs oracle on random 12^3 masks") {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        Spacing s{1.0, 1.0 + (rng() % 4) * 0.25, 2.5};
        Dims d{12, 12, 12};
        LabelMask p = t % 2 ? random_mask(d, s, rng, 0.3) : blob_mask(d, s, 5.5, 6, 6, 5 + (rng() % 10) * 0.3);
        LabelMask q = blob_mask(d, s, 6 + (rng() % 3), 6, 5.5, 4 + (rng() % 10) * 0.3);
        for (double tol : {0.5, 1.0, 2.0, 3.3}) {
            CHECK(std::abs(nsd(p, q, tol) - brute_nsd(p, q, s, tol)) < 1e-12);
        }
    }
}

TEST_CASE("nsd is monotone in the tolerance and saturates") {
    std::mt19937_64 rng(4);
    Spacing s{0.8, 0.8, 2.0};
    Dims d{16, 16, 8};
    for (int t = 0; t < 10; ++t) {
        auto p = random_mask(d, s, rng, 0.05);
        auto q = blob_mask(d, s, 7, 8, 4, 4);
        double prev = 0;
        for (double tol = 0.1; tol < 40; tol += 0.7) {
            const double v = nsd(p, q, tol);
            CHECK(v >= prev);
            CHECK(v <= 1.0);
            prev = v;
        }
        const double diameter = std::sqrt(std::pow(16 * 0.8, 2) * 2 + 16.0 * 16.0);
        CHECK(nsd(p, q, diameter) == 1.0);
    }
}

TEST_CASE("2d nsd uses four-neighbour surfaces") {
    Mask2D a(5, 5), b(5, 5);
    for (int y = 1; y < 4; ++y)
        for (int x = 1; x < 4; ++x) a.at(x, y) = b.at(x, y) = 1;
    CHECK(nsd(a, b, 1.0, 1.0, 0.5) == 1.0);
    b.at(2, 2) = 0;  // hole adds an inner surface ring
    CHECK(nsd(a, b, 1.0, 1.0, 0.5) == 1.0);
    Mask2D c(5, 5);
    c.at(2, 2) = 1;
    // 4 of the 8 ring pixels are 1 mm from the centre, and the centre is 1 mm from the ring
    CHECK(nsd(a, c, 1.0, 1.0, 1.0) == doctest::Approx(5.0 / 9.0));
}

TEST_CASE("video metrics average frame scores") {
    Dims d{4, 4, 2};
    LabelMask ref(d, {});
    ref.at(1, 1, 0) = ref.at(2, 2, 1) = 1;
    auto same = video_metrics(ref, ref);
    CHECK(same.dsc == 1.0);
    CHECK(same.nsd == 1.0);
    REQUIRE(same.per_frame);
    CHECK(same.per_frame->size() == 2);

    LabelMask half = ref;
    half.at(2, 2, 1) = 0;
    auto h = video_metrics(half, ref);
    CHECK(h.dsc == 0.5);
    CHECK((*h.per_frame)[0].dsc == 1.0);
    CHECK((*h.per_frame)[1].dsc == 0.0);

    LabelMask one({4, 4, 1}, {});
    one.at(1, 1, 0) = 1;
    LabelMask other({4, 4, 1}, {});
    other.at(1, 1, 0) = other.at(2, 1, 0) = 1;
    const auto single = video_metrics(one, other);
    CHECK(single.dsc == dsc(extract_slice(one, 0), extract_slice(other, 0)));
    CHECK_THROWS_AS(video_metrics(one, ref), Error);
    CHECK(same.to_json().find("per_frame") != std::string::npos);
}

TEST_CASE("wilcoxon exact values") {
    std::vector<double> a{1, 2, 3, 4, 5, 6}, z(6, 0.0);
    auto r = wilcoxon_signed_rank(a, z);
    CHECK(r.exact);
    CHECK(r.w_minus == 0.0);
    CHECK(r.statistic == 0.0);
    CHECK(r.p_value == doctest::Approx(0.03125).epsilon(1e-12));
    CHECK(r.significant());

    auto eq = wilcoxon_signed_rank(a, a);
    CHECK(eq.p_value == 1.0);
    CHECK(eq.n == 0);
    CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2, 3}, {0, 0, 0}), Error);
    CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2}, {0}), Error);

    std::mt19937_64 rng(5);
    for (int t = 0; t < 40; ++t) {
        const int n = 5 + static_cast<int>(rng() % 10);
        std::vector<double> x(n), y(n), diff;
        for (int i = 0; i < n; ++i) {
            // coarse values make ties and zeros common
            x[i] = static_cast<double>(rng() % 7);
            y[i] = static_cast<double>(rng() % 7);
            if (x[i] != y[i]) diff.push_back(x[i] - y[i]);
        }
        if (diff.size() < 5) continue;
        auto w = wilcoxon_signed_rank(x, y);
        CHECK(w.p_value == doctest::Approx(brute_wilcoxon_p(diff)).epsilon(1e-12));
    }
}

TEST_CASE("wilcoxon exact and normal branches agree at n = 20") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n01;
    for (int t = 0; t < 50; ++t) {
        std::vector<double> x(20), y(20);
        const double shift = (t % 5) * 0.2;
        for (int i = 0; i < 20; ++i) {
            x[i] = n01(rng) + shift;
            y[i] = n01(rng);
        }
        auto e = wilcoxon_signed_rank(x, y, WilcoxonMethod::exact);
        auto a = wilcoxon_signed_rank(x, y, WilcoxonMethod::normal);
        CHECK(e.exact);
        CHECK_FALSE(a.exact);
        CHECK(e.statistic == a.statistic);
        CHECK(std::abs(e.p_value - a.p_value) < 0.01);
    }
    std::vector<double> big(30), zero(30, 0.0);
    for (int i = 0; i < 30; ++i) big[i] = i % 3 ? i + 1.0 : -(i + 1.0);
    CHECK_FALSE(wilcoxon_signed_rank(big, zero).exact);
}

TEST_CASE("quantiles and csv summary") {
    CHECK(quantile({1, 2, 3, 4}, 0.5) == 2.5);
    CHECK(quantile({4, 1, 3, 2}, 0.25) == 1.75);
    CHECK(quantile({7}, 0.9) == 7);
    CHECK_THROWS_AS(quantile({}, 0.5), Error);
    std::vector<CaseMetrics> rows{{"c1", "liver", 0.9, 0.8}, {"c2", "liver", 0.7, 0.6}, {"c3", "liver", 0.8, 1.0}};
    auto s = summarize(rows);
    CHECK(s.dsc_median == doctest::Approx(0.8));
    CHECK(s.dsc_q3 - s.dsc_q1 == doctest::Approx(0.1));
    const auto csv = metrics_csv(rows);
    CHECK(csv.rfind("case_id,target,dsc,nsd\nc1,liver,0.900000,0.800000\n", 0) == 0);
    CHECK(csv.find("median,,0.800000,0.800000\n") != std::string::npos);
    CHECK(csv.find("iqr,,0.100000,0.200000\n") != std::string::npos);
}
