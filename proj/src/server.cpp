#include "pseg/server.hpp"

#include <atomic>
#include <chrono>
#include <iomanip>
#include <random>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "pseg/io.hpp"
#include "pseg/preprocess.hpp"

namespace pseg {

using nlohmann::json;

// ---------------------------------------------------------------------------
// RLE

namespace {

json rle_json(std::span<const std::uint8_t> labels, const std::vector<int>& dims) {
    std::size_t n = 1;
    for (int d : dims) {
        if (d < 1) fail(ErrorKind::shape, "rle dims must be positive");
        n *= static_cast<std::size_t>(d);
    }
    if (n != labels.size()) fail(ErrorKind::shape, "rle dims do not match the payload size");
    std::vector<std::size_t> runs;
    bool fg = false;
    std::size_t run = 0;
    for (auto v : labels) {
        if ((v != 0) != fg) {
            runs.push_back(run);
            run = 0;
            fg = !fg;
        }
        ++run;
    }
    runs.push_back(run);
    return json{{"dims", dims}, {"rle", runs}};
}

std::pair<std::vector<int>, std::vector<std::uint8_t>> rle_from_json(const json& j) {
    if (!j.is_object() || !j.contains("dims") || !j.contains("rle"))
        fail(ErrorKind::format, "rle payload needs dims and rle");
    const auto& jd = j.at("dims");
    const auto& jr = j.at("rle");
    if (!jd.is_array() || jd.empty() || jd.size() > 3 || !jr.is_array())
        fail(ErrorKind::format, "rle dims/rle must be arrays");
    std::vector<int> dims;
    std::size_t n = 1;
    for (const auto& d : jd) {
        if (!d.is_number_integer() || d.get<long long>() < 1 || d.get<long long>() > (1 << 20))
            fail(ErrorKind::format, "rle dims must be positive integers");
        dims.push_back(d.get<int>());
        n *= static_cast<std::size_t>(dims.back());
    }
    std::vector<std::uint8_t> out;
    out.reserve(n);
    bool fg = false;
    for (const auto& r : jr) {
        if (!r.is_number_integer() || r.get<long long>() < 0) fail(ErrorKind::format, "rle runs must be >= 0");
        auto len = r.get<std::uint64_t>();
        if (len > n - out.size()) fail(ErrorKind::format, "rle runs exceed the dims");
        out.insert(out.end(), len, fg ? 1 : 0);
        fg = !fg;
    }
    if (out.size() != n) fail(ErrorKind::format, "rle runs do not cover the dims");
    return {dims, std::move(out)};
}

json parse_json(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("invalid JSON: ") + e.what());
    }
}

Mask2D mask2d_from_json(const json& j) {
    auto [dims, values] = rle_from_json(j);
    if (dims.size() == 3 && dims[2] != 1) fail(ErrorKind::shape, "2D mask must have nz = 1");
    if (dims.size() < 2) fail(ErrorKind::shape, "2D mask needs [nx, ny]");
    Mask2D m(dims[0], dims[1]);
    m.labels = std::move(values);
    return m;
}

}  // namespace

std::string rle_encode(std::span<const std::uint8_t> labels, const std::vector<int>& dims) {
    return rle_json(labels, dims).dump();
}

std::string rle_encode(const LabelMask& mask) {
    const auto& d = mask.dims();
    return rle_encode(mask.labels(), {d.nx, d.ny, d.nz});
}

std::string rle_encode(const Mask2D& mask) { return rle_encode(mask.labels, {mask.nx, mask.ny}); }

std::pair<std::vector<int>, std::vector<std::uint8_t>> rle_decode(const std::string& json_text) {
    return rle_from_json(parse_json(json_text));
}

Mask2D rle_decode_2d(const std::string& json_text) { return mask2d_from_json(parse_json(json_text)); }

// ---------------------------------------------------------------------------

Mask2D ModelSegmenter::segment_slice(const VoxelGrid& volume, const BoundingBox2D& box) {
    return pseg::segment_slice(volume, box, *model_);
}

LabelMask ModelSegmenter::propagate(const VoxelGrid& volume, const PropagationPlan& plan) {
    return pseg::propagate(volume, plan, *model_).mask;
}

// ---------------------------------------------------------------------------

namespace {

enum class Stage { uploaded, normalized, roi_set, segmented, propagated, accepted };

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::uploaded: return "uploaded";
        case Stage::normalized: return "normalized";
        case Stage::roi_set: return "roi_set";
        case Stage::segmented: return "segmented";
        case Stage::propagated: return "propagated";
        case Stage::accepted: return "accepted";
    }
    return "?";
}

ServiceResponse reply(int status, const json& body) { return {status, body.dump()}; }

ServiceResponse error_reply(int status, const std::string& message) {
    return reply(status, json{{"error", message}, {"status", status}});
}

double now_seconds() {
    using namespace std::chrono;
    return duration<double>(system_clock::now().time_since_epoch()).count();
}

json box_json(const BoundingBox2D& b) { return {b.slice_index, b.x_min, b.y_min, b.x_max, b.y_max}; }

}  // namespace

struct AnnotationService::Session {
    std::string id;
    std::string model_name;
    std::shared_ptr<Segmenter> segmenter;
    std::shared_ptr<const VoxelGrid> volume;
    std::string preprocessing = "none";
    Stage stage = Stage::uploaded;
    std::optional<SliceRange> range;
    std::optional<BoundingBox2D> box;
    std::map<int, Mask2D> drafts;
    std::map<int, Mask2D> refined;
    /// Refinements arrived after the last propagation.
    bool dirty = false;
    /// Plan and provenance of the last propagation; used to recompute on a cache miss.
    std::optional<PropagationPlan> last_plan;
    int result_version = 0;
    std::optional<LabelMask> final_mask;
    bool in_flight = false;
    double last_activity = 0.0;
    std::mutex mutex;
};

// Lock token for the one in-flight inference of a session.
class AnnotationService::InFlight {
public:
    explicit InFlight(Session& s) : s_(s) {}
    ~InFlight() {
        std::lock_guard lk(s_.mutex);
        s_.in_flight = false;
    }
    InFlight(const InFlight&) = delete;
    InFlight& operator=(const InFlight&) = delete;

private:
    Session& s_;
};

AnnotationService::AnnotationService(std::map<std::string, std::shared_ptr<Segmenter>> models, ServerConfig config)
    : models_(std::move(models)), config_(std::move(config)), cache_(config_.cache_capacity) {
    if (!models_.count("default") || !models_.at("default")) fail(ErrorKind::usage, "a \"default\" model is required");
    salt_ = std::random_device{}();
    salt_ = (salt_ << 32) ^ std::random_device{}();
}

std::string AnnotationService::new_id() {
    // splitmix64 over a counter: unique per process, not guessable in order
    std::uint64_t z = salt_ + 0x9E3779B97F4A7C15ull * ++counter_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    z ^= z >> 31;
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << z;
    return os.str();
}

std::shared_ptr<AnnotationService::Session> AnnotationService::find(const std::string& id) {
    std::lock_guard lk(mutex_);
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : it->second;
}

ServiceResponse AnnotationService::create_session(const std::string& body, const std::string& model_name) {
    if (body.size() > config_.max_upload_bytes) return error_reply(413, "upload exceeds max_upload_bytes");
    const std::string name = model_name.empty() ? "default" : model_name;
    auto mit = models_.find(name);
    if (mit == models_.end()) return error_reply(400, "unknown model '" + name + "'");
    VoxelGrid grid;
    try {
        grid = decode_interchange(Bytes(body.begin(), body.end()));
        grid.validate();
    } catch (const Error& e) {
        return error_reply(400, std::string("malformed volume: ") + e.what());
    }
    auto s = std::make_shared<Session>();
    s->model_name = name;
    s->segmenter = mit->second;
    if (grid.kind() == IntensityKind::normalized_0_255) {
        s->stage = Stage::normalized;
        s->preprocessing = "uploaded_normalized";
    }
    s->volume = std::make_shared<const VoxelGrid>(std::move(grid));
    s->last_activity = now_seconds();
    {
        std::lock_guard lk(mutex_);
        s->id = new_id();
        sessions_[s->id] = s;
    }
    return reply(201, json{{"session_id", s->id}});
}

ServiceResponse AnnotationService::get_session(const std::string& id) {
    auto s = find(id);
    if (!s) return error_reply(404, "unknown session");
    std::lock_guard lk(s->mutex);
    const auto& d = s->volume->dims();
    const auto& sp = s->volume->spacing();
    json j{{"session_id", s->id},
           {"state", stage_name(s->stage)},
           {"model", s->model_name},
           {"checkpoint_id", s->segmenter->checkpoint_id()},
           {"dims", {d.nx, d.ny, d.nz}},
           {"spacing", {sp.sx, sp.sy, sp.sz}},
           {"intensity_kind", to_string(s->volume->kind())},
           {"preprocessing", s->preprocessing},
           {"in_flight", s->in_flight},
           {"dirty", s->dirty},
           {"result_version", s->result_version},
           {"last_activity", s->last_activity}};
    if (s->range && s->box) {
        j["roi"] = {{"start_slice", s->range->top}, {"end_slice", s->range->bottom}, {"box", box_json(*s->box)}};
    } else {
        j["roi"] = nullptr;
    }
    json drafts = json::array(), refined = json::array();
    for (const auto& kv : s->drafts) drafts.push_back(kv.first);
    for (const auto& kv : s->refined) refined.push_back(kv.first);
    j["drafts"] = drafts;
    j["refined"] = refined;
    return reply(200, j);
}

ServiceResponse AnnotationService::delete_session(const std::string& id) {
    std::lock_guard lk(mutex_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) return error_reply(404, "unknown session");
    {
        std::lock_guard sl(it->second->mutex);
        if (it->second->in_flight) return error_reply(423, "inference in flight");
    }
    sessions_.erase(it);
    cache_.erase(id);
    return reply(200, json{{"deleted", id}});
}

ServiceResponse AnnotationService::preprocess(const std::string& id, const std::string& body) {
    auto s = find(id);
    if (!s) return error_reply(404, "unknown session");
    json req;
    try {
        req = parse_json(body.empty() ? "{}" : body);
    } catch (const Error& e) {
        return error_reply(400, e.what());
    }
    std::lock_guard lk(s->mutex);
    if (s->in_flight) return error_reply(423, "inference in flight");
    if (s->stage != Stage::uploaded) return error_reply(409, "volume already normalized");
    VoxelGrid out;
    std::string applied;
    try {
        if (req.contains("preset")) {
            if (!req["preset"].is_string()) return error_reply(400, "preset must be a string");
            auto preset = WindowPreset::named(req["preset"].get<std::string>());
            out = window_ct(*s->volume, preset);
            applied = "window:" + preset.name;
        } else if (req.contains("window")) {
            const auto& w = req["window"];
            if (!w.is_array() || w.size() != 2 || !w[0].is_number() || !w[1].is_number())
                return error_reply(400, "window must be [width, level]");
            out = window_ct(*s->volume, WindowPreset::custom(w[0].get<double>(), w[1].get<double>()));
            applied = "window:custom";
        } else if (req.contains("percentile")) {
            out = percentile_normalize(*s->volume);
            applied = "percentile";
        } else {
            return error_reply(400, "expected preset, window or percentile");
        }
    } catch (const Error& e) {
        return error_reply(400, e.what());
    }
    s->volume = std::make_shared<const VoxelGrid>(std::move(out));
    s->preprocessing = applied;
    s->stage = Stage::normalized;
    s->last_activity = now_seconds();
    return reply(200, json{{"state", stage_name(s->stage)}, {"preprocessing", applied}});
}

ServiceResponse AnnotationService::set_roi(const std::string& id, const std::string& body) {
    auto s = find(id);
    if (!s) return error_reply(404, "unknown session");
    json req;
    try {
        req = parse_json(body);
    } catch (const Error& e) {
        return error_reply(400, e.what());
    }
    if (!req.is_object() || !req.contains("start_slice") || !req.contains("end_slice") || !req.contains("box") ||
        !req["start_slice"].is_number_integer() || !req["end_slice"].is_number_integer() || !req["box"].is_array())
        return error_reply(400, "roi needs start_slice, end_slice and box");
    const auto& jb = req["box"];
    if (jb.size() != 4 && jb.size() != 5) return error_reply(400, "box must be [x0,y0,x1,y1] or [z,x0,y0,x1,y1]");
    for (const auto& v : jb)
        if (!v.is_number_integer()) return error_reply(400, "box entries must be integers");

    std::lock_guard lk(s->mutex);
    if (s->in_flight) return error_reply(423, "inference in flight");
    if (s->stage == Stage::uploaded) return error_reply(409, "preprocess the volume first");
    if (s->stage == Stage::accepted) return error_reply(409, "session already accepted");

    const Dims& d = s->volume->dims();
    SliceRange range{req["start_slice"].get<int>(), req["end_slice"].get<int>()};
    if (range.top > range.bottom) std::swap(range.top, range.bottom);
    BoundingBox2D box;
    std::size_t o = jb.size() == 5 ? 1 : 0;
    box.slice_index = o ? jb[0].get<int>() : (range.top + range.bottom) / 2;
    box.x_min = jb[o].get<int>();
    box.y_min = jb[o + 1].get<int>();
    box.x_max = jb[o + 2].get<int>();
    box.y_max = jb[o + 3].get<int>();
    try {
        range.validate(d.nz);
        box.validate(d);
    } catch (const Error& e) {
        return error_reply(422, e.what());
    }
    if (!range.contains(box.slice_index)) return error_reply(422, "box slice outside the ROI range");

    s->range = range;
    s->box = box;
    s->drafts.clear();
    s->refined.clear();
    s->dirty = false;
    s->stage = Stage::roi_set;
    s->last_activity = now_seconds();
    return reply(200, json{{"state", stage_name(s->stage)},
                           {"start_slice", range.top},
                           {"end_slice", range.bottom},
                           {"box", box_json(box)}});
}

ServiceResponse AnnotationService::segment_middle(const std::string& id) {
    auto s = find(id);
    if (!s) return error_reply(404, "unknown session");
    std::shared_ptr<const VoxelGrid> volume;
    BoundingBox2D box;
    {
        std::lock_guard lk(s->mutex);
        if (s->in_flight) return error_reply(423, "inference in flight");
        if (s->stage != Stage::roi_set && s->stage != Stage::segmented && s->stage != Stage::propagated)
            return error_reply(409, std::string("segment-middle not allowed in state ") + stage_name(s->stage));
        s->in_flight = true;
        volume = s->volume;
        box = *s->box;
    }
    InFlight token(*s);
    Mask2D mask;
    try {
        mask = s->segmenter->segment_slice(*volume, box);
    } catch (const Error& e) {
        return error_reply(500, e.what());
    }
    std::lock_guard lk(s->mutex);
    s->drafts[box.slice_index] = mask;
    s->refined.erase(box.slice_index);
    s->stage = Stage::segmented;
    s->last_activity = now_seconds();
    return reply(200, json{{"slice", box.slice_index}, {"mask", rle_json(mask.labels, {mask.nx, mask.ny})}});
}

ServiceResponse AnnotationService::refine(const std::string& id, const std::string& body) {
    auto s = find(id);
    if (!s) return error_reply(404, "unknown session");
    int z = 0;
    Mask2D mask;
    try {
        json req = parse_json(body);
        if (!req.is_object() || !req.contains("slice") || !req["slice"].is_number_integer() || !req.contains("mask"))
            return error_reply(400, "refine needs slice and mask");
        z = req["slice"].get<int>();
        mask = mask2d_from_json(req["mask"]);
    } catch (const Error& e) {
        return error_reply(400, e.what());
    }
    std::lock_guard lk(s->mutex);
    if (s->in_flight) return error_reply(423, "inference in flight");
    if (s->stage != Stage::segmented && s->stage != Stage::propagated)
        return error_reply(409, std::string("refine not allowed in state ") + stage_name(s->stage));
    const Dims& d = s->volume->dims();
    if (mask.nx != d.nx || mask.ny != d.ny) return error_reply(422, "mask size does not match the volume");
    if (!s->range->contains(z)) return error_reply(422, "slice outside the ROI range");
    s->refined[z] = std::move(mask);
    if (s->stage == Stage::propagated) s->dirty = true;
    s->last_activity = now_seconds();
    json refined = json::array();
    for (const auto& kv : s->refined) refined.push_back(kv.first);
    return reply(200, json{{"state", stage_name(s->stage)}, {"refined", refined}, {"dirty", s->dirty}});
}

AnnotationService::Result AnnotationService::run_propagation(Session& s) {
    // called with in_flight held; reads plan/volume under the session lock
    std::shared_ptr<const VoxelGrid> volume;
    PropagationPlan plan;
    std::shared_ptr<Segmenter> seg;
    std::string model_name, preprocessing;
    int version = 0;
    {
        std::lock_guard lk(s.mutex);
        volume = s.volume;
        plan = *s.last_plan;
        seg = s.segmenter;
        model_name = s.model_name;
        preprocessing = s.preprocessing;
        version = s.result_version;
    }
    LabelMask mask = seg->propagate(*volume, plan);
    json refined = json::array();
    for (const auto& kv : plan.refined_masks) refined.push_back(kv.first);
    json prov{{"checkpoint_id", seg->checkpoint_id()},
              {"model", model_name},
              {"preprocessing", preprocessing},
              {"prompt", {{"box", box_json(*plan.box)}, {"prompt_slice", plan.prompt_slice}}},
              {"range", {plan.range.top, plan.range.bottom}},
              {"refined_slices", refined},
              {"version", version}};
    const auto& d = mask.dims();
    return {rle_json(mask.labels(), {d.nx, d.ny, d.nz}).dump(), prov.dump()};
}

ServiceResponse AnnotationService::propagate(const std::string& id) {
    auto s = find(id);
    if (!s) return error_reply(404, "unknown session");
    {
        std::lock_guard lk(s->mutex);
        if (s->in_flight) return error_reply(423, "inference in flight");
        if (s->stage != Stage::segmented && s->stage != Stage::propagated)
            return error_reply(409, std::string("propagate not allowed in state ") + stage_name(s->stage));
        s->in_flight = true;
        PropagationPlan plan;
        plan.prompt_slice = s->box->slice_index;
        plan.range = *s->range;
        plan.box = *s->box;
        plan.refined_masks = s->refined;
        s->last_plan = plan;
        ++s->result_version;
    }
    InFlight token(*s);
    Result r;
    try {
        r = run_propagation(*s);
    } catch (const Error& e) {
        std::lock_guard lk(s->mutex);
        s->last_plan.reset();
        if (s->stage == Stage::propagated) s->stage = Stage::segmented;
        return error_reply(500, e.what());
    }
    {
        std::lock_guard lk(s->mutex);
        s->stage = Stage::propagated;
        s->dirty = false;
        s->last_activity = now_seconds();
    }
    {
        std::lock_guard lk(mutex_);
        cache_.put(id, r);
    }
    return reply(200, json{{"mask", json::parse(r.mask_json)}, {"provenance", json::parse(r.provenance_json)}});
}

ServiceResponse AnnotationService::result(const std::string& id) {
    auto s = find(id);
    if (!s) return error_reply(404, "unknown session");
    {
        std::lock_guard lk(s->mutex);
        if (!s->last_plan) return error_reply(409, "no propagation yet");
    }
    std::optional<Result> hit;
    {
        std::lock_guard lk(mutex_);
        hit = cache_.get(id);
    }
    bool cached = hit.has_value();
    if (!hit) {
        if (config_.miss_policy == CacheMissPolicy::gone) return error_reply(410, "result evicted from the cache");
        {
            std::lock_guard lk(s->mutex);
            if (s->in_flight) return error_reply(423, "inference in flight");
            s->in_flight = true;
        }
        InFlight token(*s);
        try {
            hit = run_propagation(*s);
        } catch (const Error& e) {
            return error_reply(500, e.what());
        }
        std::lock_guard lk(mutex_);
        cache_.put(id, *hit);
    }
    {
        std::lock_guard lk(s->mutex);
        s->last_activity = now_seconds();
    }
    return reply(200, json{{"mask", json::parse(hit->mask_json)},
                           {"provenance", json::parse(hit->provenance_json)},
                           {"cached", cached}});
}

ServiceResponse AnnotationService::accept(const std::string& id) {
    auto s = find(id);
    if (!s) return error_reply(404, "unknown session");
    {
        std::lock_guard lk(s->mutex);
        if (s->in_flight) return error_reply(423, "inference in flight");
        if (s->stage != Stage::propagated) return error_reply(409, "nothing propagated to accept");
        if (s->dirty) return error_reply(409, "refinements pending; propagate first");
    }
    auto r = result(id);
    if (r.status != 200) return r;
    auto body = json::parse(r.body);
    std::lock_guard lk(s->mutex);
    if (s->stage != Stage::propagated || s->dirty) return error_reply(409, "session changed during accept");
    s->stage = Stage::accepted;
    s->last_activity = now_seconds();
    return reply(200, json{{"state", stage_name(s->stage)}, {"mask", body["mask"]}, {"provenance", body["provenance"]}});
}

std::vector<std::string> AnnotationService::cached_sessions() const {
    std::lock_guard lk(mutex_);
    return cache_.keys();
}

// ---------------------------------------------------------------------------
// HTTP binding

struct HttpServer::Impl {
    AnnotationService& service;
    std::ostream* log;
    std::mutex log_mutex;
    httplib::Server server;
    std::thread thread;

    Impl(AnnotationService& s, std::ostream* l) : service(s), log(l) {}
};

namespace {

void send(httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
}

}  // namespace

HttpServer::HttpServer(AnnotationService& service, std::ostream* request_log)
    : impl_(std::make_unique<Impl>(service, request_log)) {
    auto& svr = impl_->server;
    auto& svc = impl_->service;
    const int threads = std::max(1, svc.config().threads);
    svr.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    svr.set_payload_max_length(svc.config().max_upload_bytes);
    svr.set_default_headers({{"Access-Control-Allow-Origin", "*"}});

    svr.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });
    svr.Get("/health", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"status":"ok"})", "application/json");
    });
    svr.Post("/sessions", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.create_session(req.body, req.get_param_value("model")));
    });
    svr.Get(R"(/sessions/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.get_session(req.matches[1]));
    });
    svr.Delete(R"(/sessions/([^/]+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.delete_session(req.matches[1]));
    });
    svr.Post(R"(/sessions/([^/]+)/preprocess)", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.preprocess(req.matches[1], req.body));
    });
    svr.Post(R"(/sessions/([^/]+)/roi)", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.set_roi(req.matches[1], req.body));
    });
    svr.Post(R"(/sessions/([^/]+)/segment-middle)", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.segment_middle(req.matches[1]));
    });
    svr.Post(R"(/sessions/([^/]+)/refine)", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.refine(req.matches[1], req.body));
    });
    svr.Post(R"(/sessions/([^/]+)/propagate)", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.propagate(req.matches[1]));
    });
    svr.Get(R"(/sessions/([^/]+)/result)", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.result(req.matches[1]));
    });
    svr.Post(R"(/sessions/([^/]+)/accept)", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.accept(req.matches[1]));
    });
    svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string msg = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            msg = e.what();
        } catch (...) {
        }
        res.status = 500;
        res.set_content(json{{"error", msg}, {"status", 500}}.dump(), "application/json");
    });
    svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) return;
        std::string msg = res.status == 413 ? "upload exceeds max_upload_bytes" : httplib::status_message(res.status);
        res.set_content(json{{"error", msg}, {"status", res.status}}.dump(), "application/json");
    });
    if (impl_->log) {
        auto* impl = impl_.get();
        svr.set_logger([impl](const httplib::Request& req, const httplib::Response& res) {
            json line{{"ts", now_seconds()},
                      {"method", req.method},
                      {"path", req.path},
                      {"status", res.status},
                      {"request_bytes", req.body.size()},
                      {"response_bytes", res.body.size()}};
            std::lock_guard lk(impl->log_mutex);
            *impl->log << line.dump() << '\n';
            impl->log->flush();
        });
    }
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
    int bound = port == 0 ? impl_->server.bind_to_any_port(host)
                          : (impl_->server.bind_to_port(host, port) ? port : -1);
    if (bound < 0) fail(ErrorKind::io, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::start_background() {
    impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
}

void HttpServer::stop() {
    impl_->server.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace pseg
