#include "doctest.h"

#include <atomic>
#include <condition_variable>
#include <random>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "pseg/io.hpp"
#include "pseg/server.hpp"
#include "pseg/training.hpp"

using namespace pseg;
using nlohmann::json;

namespace {

// Fills the box on every slice of the range. Optionally blocks inside
// inference until released, and tracks concurrent calls.
class BoxSegmenter : public Segmenter {
public:
    std::atomic<int> active{0};
    std::atomic<int> max_active{0};
    std::atomic<int> calls{0};
    std::chrono::milliseconds delay{0};

    void hold() {
        std::lock_guard lk(m_);
        held_ = true;
    }
    void release() {
        {
            std::lock_guard lk(m_);
            held_ = false;
        }
        cv_.notify_all();
    }
    void wait_entered(int n) {
        std::unique_lock lk(m_);
        cv_.wait(lk, [&] { return entered_ >= n; });
    }

    Mask2D segment_slice(const VoxelGrid& volume, const BoundingBox2D& box) override {
        enter();
        Mask2D m(volume.dims().nx, volume.dims().ny);
        fill(m, box);
        leave();
        return m;
    }

    LabelMask propagate(const VoxelGrid& volume, const PropagationPlan& plan) override {
        enter();
        LabelMask out = LabelMask::like(volume);
        for (int z = plan.range.top; z <= plan.range.bottom; ++z) {
            Mask2D m(volume.dims().nx, volume.dims().ny);
            if (auto it = plan.refined_masks.find(z); it != plan.refined_masks.end()) {
                m = it->second;
            } else {
                fill(m, *plan.box);
            }
            insert_slice(out, z, m);
        }
        leave();
        return out;
    }

    std::string checkpoint_id() const override { return "box-double"; }

private:
    static void fill(Mask2D& m, const BoundingBox2D& b) {
        for (int y = b.y_min; y < b.y_max; ++y)
            for (int x = b.x_min; x < b.x_max; ++x) m.at(x, y) = 1;
    }
    void enter() {
        ++calls;
        int now = ++active;
        int prev = max_active.load();
        while (now > prev && !max_active.compare_exchange_weak(prev, now)) {
        }
        std::unique_lock lk(m_);
        ++entered_;
        cv_.notify_all();
        cv_.wait(lk, [&] { return !held_; });
        lk.unlock();
        if (delay.count() > 0) std::this_thread::sleep_for(delay);
    }
    void leave() { --active; }

    std::mutex m_;
    std::condition_variable cv_;
    bool held_ = false;
    int entered_ = 0;
};

VoxelGrid normalized_volume(Dims d = {16, 16, 16}) {
    VoxelGrid g(d, {1, 1, 2}, IntensityKind::normalized_0_255);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 255);
    for (auto& v : g.values()) v = u(rng);
    return g;
}

VoxelGrid raw_volume(Dims d = {16, 16, 16}) {
    VoxelGrid g(d, {1, 1, 2}, IntensityKind::raw);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(-1000, 1500);
    for (auto& v : g.values()) v = u(rng);
    return g;
}

std::string upload_body(const VoxelGrid& g) {
    auto b = encode_interchange(g);
    return {b.begin(), b.end()};
}

std::string id_of(const ServiceResponse& r) { return json::parse(r.body).at("session_id"); }

std::string roi_body(int top, int bottom, std::vector<int> box) {
    return json{{"start_slice", top}, {"end_slice", bottom}, {"box", box}}.dump();
}

std::string refine_body(int z, const Mask2D& m) {
    return json{{"slice", z}, {"mask", json::parse(rle_encode(m))}}.dump();
}

struct Fixture {
    std::shared_ptr<BoxSegmenter> seg = std::make_shared<BoxSegmenter>();
    AnnotationService svc;

    explicit Fixture(ServerConfig cfg = {}) : svc({{"default", seg}}, cfg) {}

    std::string session(const VoxelGrid& g = normalized_volume()) {
        auto r = svc.create_session(upload_body(g));
        REQUIRE(r.status == 201);
        return id_of(r);
    }
    // uploaded normalized -> roi -> segment-middle -> propagate
    std::string completed() {
        auto id = session();
        REQUIRE(svc.set_roi(id, roi_body(4, 10, {3, 3, 9, 9})).status == 200);
        REQUIRE(svc.segment_middle(id).status == 200);
        REQUIRE(svc.propagate(id).status == 200);
        return id;
    }
};

}  // namespace

TEST_CASE("rle wire format") {
    std::vector<std::uint8_t> v{0, 0, 1, 1, 1, 0};
    auto j = json::parse(rle_encode(v, {6}));
    CHECK(j["rle"] == json::array({2, 3, 1}));
    std::vector<std::uint8_t> w{1, 1, 0, 2};
    CHECK(json::parse(rle_encode(w, {2, 2}))["rle"] == json::array({0, 2, 1, 1}));
    auto [dims, back] = rle_decode(rle_encode(w, {2, 2}));
    CHECK(dims == std::vector<int>{2, 2});
    CHECK(back == std::vector<std::uint8_t>{1, 1, 0, 1});

    std::mt19937_64 rng(1);
    for (int t = 0; t < 50; ++t) {
        LabelMask m({7, 5, 3}, {1, 1, 1});
        for (auto& x : m.labels()) x = rng() % 3 == 0;
        auto [d, vals] = rle_decode(rle_encode(m));
        CHECK(d == std::vector<int>{7, 5, 3});
        CHECK(std::equal(vals.begin(), vals.end(), m.labels().begin(), m.labels().end()));
    }
    Mask2D m2(4, 3);
    m2.at(1, 2) = 1;
    CHECK(rle_decode_2d(rle_encode(m2)) == m2);

    CHECK_THROWS_AS(rle_decode(R"({"dims":[2,2],"rle":[1,1]})"), Error);
    CHECK_THROWS_AS(rle_decode(R"({"dims":[2,2],"rle":[3,3]})"), Error);
    CHECK_THROWS_AS(rle_decode(R"({"dims":[2,2],"rle":[-1,5]})"), Error);
    CHECK_THROWS_AS(rle_decode(R"({"dims":[0],"rle":[]})"), Error);
    CHECK_THROWS_AS(rle_decode("not json"), Error);
}

TEST_CASE("mru cache matches a list simulation") {
    MruCache<std::string, int> c(2);
    c.put("A", 1);
    c.put("B", 2);
    CHECK(c.put("C", 3) == std::optional<std::string>("A"));
    CHECK(!c.get("A"));
    CHECK(c.keys() == std::vector<std::string>{"C", "B"});
    CHECK(c.get("B") == 2);
    CHECK(c.put("D", 4) == std::optional<std::string>("C"));
    CHECK(c.keys() == std::vector<std::string>{"D", "B"});

    // oracle: a plain vector, front = most recent
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t cap = 1 + rng() % 4;
        MruCache<int, int> cache(cap);
        std::vector<std::pair<int, int>> sim;
        for (int step = 0; step < 60; ++step) {
            const int key = static_cast<int>(rng() % 7);
            auto pos = std::find_if(sim.begin(), sim.end(), [&](auto& kv) { return kv.first == key; });
            if (rng() % 2) {
                auto got = cache.get(key);
                if (pos == sim.end()) {
                    CHECK(!got);
                } else {
                    CHECK(got == pos->second);
                    auto kv = *pos;
                    sim.erase(pos);
                    sim.insert(sim.begin(), kv);
                }
            } else {
                const int val = step;
                auto evicted = cache.put(key, val);
                std::optional<int> expect;
                if (pos != sim.end()) sim.erase(pos);
                sim.insert(sim.begin(), {key, val});
                if (sim.size() > cap) {
                    expect = sim.back().first;
                    sim.pop_back();
                }
                CHECK(evicted == expect);
            }
            std::vector<int> keys;
            for (auto& kv : sim) keys.push_back(kv.first);
            CHECK(cache.keys() == keys);
            CHECK(cache.size() <= cap);
        }
    }
    using IntCache = MruCache<int, int>;
    CHECK_THROWS_AS(IntCache(0), Error);
}

TEST_CASE("session upload") {
    ServerConfig cfg;
    cfg.max_upload_bytes = 40000;
    Fixture f(cfg);
    auto body = upload_body(normalized_volume());
    auto a = f.svc.create_session(body);
    auto b = f.svc.create_session(body);
    CHECK(a.status == 201);
    CHECK(b.status == 201);
    CHECK(id_of(a) != id_of(b));

    CHECK(f.svc.create_session(body.substr(0, body.size() - 9)).status == 400);
    CHECK(f.svc.create_session("garbage").status == 400);
    CHECK(f.svc.create_session(body, "nope").status == 400);
    CHECK(f.svc.create_session(upload_body(normalized_volume({16, 16, 24}))).status == 413);

    auto s = json::parse(f.svc.get_session(id_of(a)).body);
    CHECK(s["state"] == "normalized");
    CHECK(s["dims"] == json::array({16, 16, 16}));
    CHECK(f.svc.get_session("missing").status == 404);
    CHECK(f.svc.delete_session(id_of(b)).status == 200);
    CHECK(f.svc.get_session(id_of(b)).status == 404);
}

TEST_CASE("preprocess presets") {
    Fixture f;
    auto id = f.session(raw_volume());
    CHECK(json::parse(f.svc.get_session(id).body)["state"] == "uploaded");
    CHECK(f.svc.preprocess(id, R"({"preset":"nope"})").status == 400);
    CHECK(f.svc.preprocess(id, R"({})").status == 400);
    CHECK(f.svc.preprocess(id, "{").status == 400);
    auto r = f.svc.preprocess(id, R"({"preset":"abdomen"})");
    CHECK(r.status == 200);
    CHECK(json::parse(r.body)["preprocessing"] == "window:abdomen");
    CHECK(f.svc.preprocess(id, R"({"preset":"abdomen"})").status == 409);
    CHECK(f.svc.preprocess(id, R"({"percentile":true})").status == 409);

    auto s = json::parse(f.svc.get_session(id).body);
    CHECK(s["intensity_kind"] == "normalized_0_255");

    auto p = f.session(raw_volume());
    CHECK(f.svc.preprocess(p, R"({"percentile":true})").status == 200);
    auto w = f.session(raw_volume());
    CHECK(f.svc.preprocess(w, R"({"window":[400,40]})").status == 200);
    CHECK(f.svc.preprocess(f.session(raw_volume()), R"({"window":[-1,40]})").status == 400);
}

TEST_CASE("abdomen preset bounds the served volume") {
    // the result of the window is checked through a propagation that copies intensities
    class Probe : public BoxSegmenter {
    public:
        double lo = 1e9, hi = -1e9;
        Mask2D segment_slice(const VoxelGrid& v, const BoundingBox2D& b) override {
            for (double x : v.values()) lo = std::min(lo, x), hi = std::max(hi, x);
            return BoxSegmenter::segment_slice(v, b);
        }
    };
    auto probe = std::make_shared<Probe>();
    AnnotationService svc({{"default", probe}});
    auto id = id_of(svc.create_session(upload_body(raw_volume())));
    REQUIRE(svc.preprocess(id, R"({"preset":"abdomen"})").status == 200);
    REQUIRE(svc.set_roi(id, roi_body(0, 15, {0, 0, 4, 4})).status == 200);
    REQUIRE(svc.segment_middle(id).status == 200);
    CHECK(probe->lo == 0.0);
    CHECK(probe->hi == 255.0);
}

TEST_CASE("illegal workflow paths") {
    Fixture f;
    Mask2D m(16, 16);
    m.at(5, 5) = 1;

    SUBCASE("propagate before roi") { CHECK(f.svc.propagate(f.session()).status == 409); }
    SUBCASE("segment-middle before roi") { CHECK(f.svc.segment_middle(f.session()).status == 409); }
    SUBCASE("refine before segment-middle") {
        auto id = f.session();
        REQUIRE(f.svc.set_roi(id, roi_body(2, 8, {2, 2, 6, 6})).status == 200);
        CHECK(f.svc.refine(id, refine_body(5, m)).status == 409);
        CHECK(f.svc.propagate(id).status == 409);
    }
    SUBCASE("accept before propagate") {
        auto id = f.session();
        CHECK(f.svc.accept(id).status == 409);
        REQUIRE(f.svc.set_roi(id, roi_body(2, 8, {2, 2, 6, 6})).status == 200);
        REQUIRE(f.svc.segment_middle(id).status == 200);
        CHECK(f.svc.accept(id).status == 409);
    }
    SUBCASE("result before propagate") { CHECK(f.svc.result(f.session()).status == 409); }
    SUBCASE("roi before preprocess") {
        CHECK(f.svc.set_roi(f.session(raw_volume()), roi_body(2, 8, {2, 2, 6, 6})).status == 409);
    }
    SUBCASE("preprocess an uploaded normalized volume") {
        CHECK(f.svc.preprocess(f.session(), R"({"preset":"brain"})").status == 409);
    }
    SUBCASE("preprocess after roi") {
        auto id = f.session(raw_volume());
        REQUIRE(f.svc.preprocess(id, R"({"preset":"brain"})").status == 200);
        REQUIRE(f.svc.set_roi(id, roi_body(2, 8, {2, 2, 6, 6})).status == 200);
        CHECK(f.svc.preprocess(id, R"({"preset":"brain"})").status == 409);
    }
    SUBCASE("box outside the image") {
        CHECK(f.svc.set_roi(f.session(), roi_body(2, 8, {2, 2, 17, 6})).status == 422);
    }
    SUBCASE("empty box") { CHECK(f.svc.set_roi(f.session(), roi_body(2, 8, {4, 4, 4, 6})).status == 422); }
    SUBCASE("box slice outside the roi") {
        CHECK(f.svc.set_roi(f.session(), roi_body(2, 8, {9, 2, 2, 6, 6})).status == 422);
    }
    SUBCASE("range outside the volume") {
        CHECK(f.svc.set_roi(f.session(), roi_body(2, 16, {2, 2, 6, 6})).status == 422);
    }
    SUBCASE("refine outside the roi") {
        auto id = f.session();
        REQUIRE(f.svc.set_roi(id, roi_body(2, 8, {2, 2, 6, 6})).status == 200);
        REQUIRE(f.svc.segment_middle(id).status == 200);
        CHECK(f.svc.refine(id, refine_body(9, m)).status == 422);
        CHECK(f.svc.refine(id, refine_body(5, Mask2D(8, 8))).status == 422);
        CHECK(f.svc.refine(id, R"({"slice":5})").status == 400);
    }
    SUBCASE("accept with pending refinements") {
        auto id = f.completed();
        REQUIRE(f.svc.refine(id, refine_body(5, m)).status == 200);
        CHECK(f.svc.accept(id).status == 409);
        REQUIRE(f.svc.propagate(id).status == 200);
        CHECK(f.svc.accept(id).status == 200);
    }
    SUBCASE("mutations after accept") {
        auto id = f.completed();
        REQUIRE(f.svc.accept(id).status == 200);
        CHECK(f.svc.accept(id).status == 409);
        CHECK(f.svc.propagate(id).status == 409);
        CHECK(f.svc.segment_middle(id).status == 409);
        CHECK(f.svc.refine(id, refine_body(5, m)).status == 409);
        CHECK(f.svc.set_roi(id, roi_body(2, 8, {2, 2, 6, 6})).status == 409);
        CHECK(f.svc.result(id).status == 200);
    }
    SUBCASE("unknown session") {
        CHECK(f.svc.propagate("x").status == 404);
        CHECK(f.svc.result("x").status == 404);
        CHECK(f.svc.set_roi("x", roi_body(0, 1, {0, 0, 1, 1})).status == 404);
    }
}

TEST_CASE("workflow state machine against a reference model") {
    // Reference: stage index plus dirty / has_result flags.
    enum St { uploaded, normalized, roi_set, segmented, propagated, accepted };
    struct Ref {
        St st = uploaded;
        bool dirty = false;
        bool has_result = false;
    };
    enum Op { pre, roi, roi_bad, seg, ref, ref_bad, prop, res, acc, n_ops };

    auto expect = [](Ref& r, Op op) -> int {
        switch (op) {
            case pre:
                if (r.st != uploaded) return 409;
                r.st = normalized;
                return 200;
            case roi:
            case roi_bad:
                if (r.st == uploaded || r.st == accepted) return 409;
                if (op == roi_bad) return 422;
                r.st = roi_set;
                r.dirty = false;
                return 200;
            case seg:
                if (r.st != roi_set && r.st != segmented && r.st != propagated) return 409;
                r.st = segmented;
                return 200;
            case ref:
            case ref_bad:
                if (r.st != segmented && r.st != propagated) return 409;
                if (op == ref_bad) return 422;
                if (r.st == propagated) r.dirty = true;
                return 200;
            case prop:
                if (r.st != segmented && r.st != propagated) return 409;
                r.st = propagated;
                r.dirty = false;
                r.has_result = true;
                return 200;
            case res: return r.has_result ? 200 : 409;
            case acc:
                if (r.st != propagated || r.dirty) return 409;
                r.st = accepted;
                return 200;
            default: return 0;
        }
    };

    Fixture f;
    Mask2D m(16, 16);
    m.at(3, 4) = 1;
    std::mt19937_64 rng(11);
    int ok = 0, conflicts = 0, unprocessable = 0;
    std::set<std::vector<int>> legal_paths;
    for (int trial = 0; trial < 400; ++trial) {
        Ref r;
        auto id = f.session(raw_volume());
        std::vector<int> path;
        for (int step = 0; step < 14; ++step) {
            // half uniform, half a legal move from the current state
            static const std::vector<Op> legal[] = {{pre}, {roi}, {roi, seg}, {roi, seg, ref, prop},
                                                    {roi, seg, ref, prop, acc}, {res}};
            const auto& moves = legal[r.st];
            Op op = rng() % 2 ? static_cast<Op>(rng() % n_ops) : moves[rng() % moves.size()];
            int want = expect(r, op);
            int got = 0;
            switch (op) {
                case pre: got = f.svc.preprocess(id, R"({"preset":"abdomen"})").status; break;
                case roi: got = f.svc.set_roi(id, roi_body(3, 11, {2, 2, 8, 8})).status; break;
                case roi_bad: got = f.svc.set_roi(id, roi_body(3, 11, {2, 2, 20, 8})).status; break;
                case seg: got = f.svc.segment_middle(id).status; break;
                case ref: got = f.svc.refine(id, refine_body(7, m)).status; break;
                case ref_bad: got = f.svc.refine(id, refine_body(13, m)).status; break;
                case prop: got = f.svc.propagate(id).status; break;
                case res: got = f.svc.result(id).status; break;
                case acc: got = f.svc.accept(id).status; break;
                default: break;
            }
            INFO("trial " << trial << " step " << step << " op " << op);
            REQUIRE(got == want);
            ok += got == 200;
            conflicts += got == 409;
            unprocessable += got == 422;
            if (got == 200 && op != res) path.push_back(op);
        }
        auto s = json::parse(f.svc.get_session(id).body);
        const char* names[] = {"uploaded", "normalized", "roi_set", "segmented", "propagated", "accepted"};
        CHECK(s["state"] == names[r.st]);
        legal_paths.insert(path);
    }
    CHECK(ok > 500);
    CHECK(conflicts > 100);
    CHECK(unprocessable > 10);
    // every transition edge of the reference graph was exercised
    std::set<std::pair<int, int>> edges;
    for (const auto& p : legal_paths)
        for (std::size_t i = 0; i + 1 < p.size(); ++i) edges.insert({p[i], p[i + 1]});
    for (auto e : std::vector<std::pair<int, int>>{{pre, roi},   {roi, seg},   {seg, prop}, {prop, acc},
                                                   {prop, ref},  {ref, prop},  {seg, ref},  {ref, ref},
                                                   {prop, roi},  {prop, seg},  {seg, seg},  {roi, roi},
                                                   {prop, prop}, {seg, roi},   {ref, seg}})
    {
        INFO("edge " << e.first << "->" << e.second);
        CHECK(edges.count(e) == 1);
    }
}

TEST_CASE("one inference in flight per session") {
    Fixture f;
    auto a = f.session();
    auto b = f.session();
    for (auto& id : {a, b}) {
        REQUIRE(f.svc.set_roi(id, roi_body(2, 12, {2, 2, 6, 6})).status == 200);
        REQUIRE(f.svc.segment_middle(id).status == 200);
    }
    f.seg->hold();
    const int before = f.seg->calls;
    int first = 0;
    std::thread t([&] { first = f.svc.propagate(a).status; });
    f.seg->wait_entered(before + 1);

    CHECK(f.svc.propagate(a).status == 423);
    CHECK(f.svc.segment_middle(a).status == 423);
    Mask2D m(16, 16);
    CHECK(f.svc.refine(a, refine_body(4, m)).status == 423);
    CHECK(f.svc.set_roi(a, roi_body(2, 12, {2, 2, 6, 6})).status == 423);
    CHECK(f.svc.delete_session(a).status == 423);
    CHECK(json::parse(f.svc.get_session(a).body)["in_flight"] == true);

    // another session is not blocked
    int second = 0;
    std::thread u([&] { second = f.svc.propagate(b).status; });
    f.seg->wait_entered(before + 2);
    CHECK(f.seg->max_active == 2);
    f.seg->release();
    t.join();
    u.join();
    CHECK(first == 200);
    CHECK(second == 200);
    CHECK(json::parse(f.svc.get_session(a).body)["in_flight"] == false);
    CHECK(f.svc.propagate(a).status == 200);
}

TEST_CASE("hammering one session never interleaves inference") {
    Fixture f;
    f.seg->delay = std::chrono::milliseconds(2);
    auto id = f.completed();
    f.seg->max_active = 0;
    std::atomic<int> ok{0}, locked{0};
    std::vector<std::thread> ts;
    for (int i = 0; i < 8; ++i) {
        ts.emplace_back([&] {
            for (int k = 0; k < 20; ++k) {
                int s = f.svc.propagate(id).status;
                ok += s == 200;
                locked += s == 423;
            }
        });
    }
    for (auto& t : ts) t.join();
    CHECK(f.seg->max_active == 1);
    CHECK(ok + locked == 160);
    CHECK(ok >= 1);
    CHECK(locked >= 1);
}

TEST_CASE("result cache eviction order") {
    SUBCASE("recompute on miss") {
        ServerConfig cfg;
        cfg.cache_capacity = 2;
        Fixture f(cfg);
        auto A = f.completed();
        auto first = json::parse(f.svc.result(A).body);
        auto B = f.completed();
        auto C = f.completed();
        CHECK(f.svc.cached_sessions() == std::vector<std::string>{C, B});
        const int calls = f.seg->calls;
        auto again = json::parse(f.svc.result(A).body);
        CHECK(again["cached"] == false);
        CHECK(f.seg->calls == calls + 1);
        CHECK(again["mask"] == first["mask"]);
        CHECK(again["provenance"] == first["provenance"]);
        CHECK(f.svc.cached_sessions() == std::vector<std::string>{A, C});
        CHECK(json::parse(f.svc.result(A).body)["cached"] == true);
    }
    SUBCASE("gone on miss") {
        ServerConfig cfg;
        cfg.cache_capacity = 2;
        cfg.miss_policy = CacheMissPolicy::gone;
        Fixture f(cfg);
        auto A = f.completed();
        auto B = f.completed();
        auto C = f.completed();
        CHECK(f.svc.result(A).status == 410);
        CHECK(f.svc.result(B).status == 200);
        auto D = f.completed();
        CHECK(f.svc.cached_sessions() == std::vector<std::string>{D, B});
        CHECK(f.svc.result(C).status == 410);
        CHECK(f.svc.result(B).status == 200);
        CHECK(f.svc.result(D).status == 200);
    }
}

TEST_CASE("refined slices drive the next propagation") {
    Fixture f;
    auto id = f.completed();
    auto res = json::parse(f.svc.result(id).body);
    auto prov = res["provenance"];
    CHECK(prov["checkpoint_id"] == "box-double");
    CHECK(prov["model"] == "default");
    CHECK(prov["prompt"]["box"] == json::array({7, 3, 3, 9, 9}));
    CHECK(prov["range"] == json::array({4, 10}));
    CHECK(prov["refined_slices"].empty());

    Mask2D m(16, 16);
    m.at(12, 12) = 1;
    REQUIRE(f.svc.refine(id, refine_body(5, m)).status == 200);
    // result still serves the previous propagation until re-propagated
    CHECK(json::parse(f.svc.result(id).body)["provenance"]["refined_slices"].empty());
    auto p = json::parse(f.svc.propagate(id).body);
    CHECK(p["provenance"]["refined_slices"] == json::array({5}));
    auto [dims, vals] = rle_decode(p["mask"].dump());
    LabelMask out({dims[0], dims[1], dims[2]}, {1, 1, 1}, vals);
    CHECK(extract_slice(out, 5) == m);
    for (int z = 0; z < 16; ++z) {
        if (z < 4 || z > 10) CHECK(extract_slice(out, z).foreground_count() == 0);
    }
}

TEST_CASE("happy path with a trained model stays inside the roi") {
    Model<float> model{ModelConfig{}};
    std::mt19937_64 rng(7);
    SyntheticConfig sc;
    sc.dims = {64, 64, 16};
    sc.max_radius_z = 6;
    std::vector<TrainItem> data;
    for (int i = 0; i < 4; ++i) {
        auto c = make_synthetic_volume(sc, rng);
        data.push_back({std::move(c.volume), std::move(c.mask), 1, "ct", false});
    }
    TrainConfig cfg;
    cfg.lr_other = 2e-3;
    cfg.lr_encoder = 1.2e-3;
    cfg.epochs = 25;
    cfg.samples_per_epoch = 4;
    cfg.frames_per_sample = 4;
    cfg.seed = 1;
    train(model, data, cfg);
    model.set_checkpoint_id("toy-ckpt");
    auto shared = std::make_shared<const Model<float>>(std::move(model));

    AnnotationService svc({{"default", std::make_shared<ModelSegmenter>(shared)}});
    auto c = make_synthetic_volume(sc, rng);
    auto id = id_of(svc.create_session(upload_body(c.volume)));
    auto ext = z_extent(c.mask);
    const int z = (ext.top + ext.bottom) / 2;
    auto box = tight_box(extract_slice(c.mask, z), z);
    const int top = std::max(ext.top, z - 2), bottom = std::min(ext.bottom, z + 2);
    REQUIRE(svc.set_roi(id, roi_body(top, bottom, {z, box.x_min, box.y_min, box.x_max, box.y_max})).status == 200);
    auto mid = json::parse(svc.segment_middle(id).body);
    CHECK(mid["slice"] == z);
    CHECK(rle_decode_2d(mid["mask"].dump()).foreground_count() > 0);
    auto p = svc.propagate(id);
    REQUIRE(p.status == 200);
    auto body = json::parse(p.body);
    CHECK(body["provenance"]["checkpoint_id"] == "toy-ckpt");
    auto [dims, vals] = rle_decode(body["mask"].dump());
    LabelMask out({dims[0], dims[1], dims[2]}, c.mask.spacing(), vals);
    CHECK(out.foreground_count() > 0);
    for (int k = 0; k < 16; ++k) {
        const auto n = extract_slice(out, k).foreground_count();
        if (k < top || k > bottom) CHECK(n == 0);
    }
    auto acc = svc.accept(id);
    REQUIRE(acc.status == 200);
    CHECK(json::parse(acc.body)["mask"] == body["mask"]);
}

TEST_CASE("http binding") {
    Fixture f([] {
        ServerConfig c;
        c.max_upload_bytes = 100000;
        return c;
    }());
    std::ostringstream log;
    HttpServer http(f.svc, &log);
    const int port = http.bind("127.0.0.1", 0);
    REQUIRE(port > 0);
    http.start_background();

    httplib::Client cli("127.0.0.1", port);
    auto up = cli.Post("/sessions", upload_body(normalized_volume()), "application/octet-stream");
    REQUIRE(up);
    CHECK(up->status == 201);
    const std::string id = json::parse(up->body)["session_id"];

    auto bad = cli.Post("/sessions", std::string("xx"), "application/octet-stream");
    CHECK(bad->status == 400);
    auto big = cli.Post("/sessions", std::string(200000, 'x'), "application/octet-stream");
    REQUIRE(big);
    CHECK(big->status == 413);

    CHECK(cli.Post("/sessions/" + id + "/propagate", "", "application/json")->status == 409);
    CHECK(cli.Post("/sessions/" + id + "/roi", roi_body(4, 10, {3, 3, 9, 9}), "application/json")->status == 200);
    auto mid = cli.Post("/sessions/" + id + "/segment-middle", "", "application/json");
    CHECK(mid->status == 200);
    CHECK(json::parse(mid->body)["slice"] == 7);
    CHECK(cli.Post("/sessions/" + id + "/propagate", "", "application/json")->status == 200);
    auto res = cli.Get("/sessions/" + id + "/result");
    CHECK(res->status == 200);
    CHECK(json::parse(res->body)["provenance"]["range"] == json::array({4, 10}));
    CHECK(cli.Get("/sessions/" + id)->status == 200);
    CHECK(cli.Get("/sessions/nope/result")->status == 404);
    CHECK(cli.Post("/sessions/" + id + "/accept", "", "application/json")->status == 200);
    CHECK(cli.Get("/health")->status == 200);
    http.stop();

    std::istringstream lines(log.str());
    std::string line;
    int n = 0;
    while (std::getline(lines, line)) {
        auto j = json::parse(line);
        CHECK(j.contains("method"));
        CHECK(j.contains("status"));
        ++n;
    }
    CHECK(n >= 12);
}
