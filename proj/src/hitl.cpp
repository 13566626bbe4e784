#include "pseg/hitl.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

#include "json.hpp"
#include "pseg/metrics.hpp"
#include "pseg/preprocess.hpp"
#include "pseg/propagate.hpp"

namespace pseg {

using json = nlohmann::json;

const char* to_string(CaseStatus s) noexcept {
    switch (s) {
        case CaseStatus::pending: return "pending";
        case CaseStatus::auto_segmented: return "auto_segmented";
        case CaseStatus::revised: return "revised";
        case CaseStatus::accepted: return "accepted";
    }
    return "?";
}

CaseStatus case_status_from_string(const std::string& name) {
    for (auto s : {CaseStatus::pending, CaseStatus::auto_segmented, CaseStatus::revised, CaseStatus::accepted}) {
        if (name == to_string(s)) return s;
    }
    fail(ErrorKind::format, "unknown case status '" + name + "'");
}

bool legal_transition(CaseStatus from, CaseStatus to) noexcept {
    switch (from) {
        case CaseStatus::pending: return to == CaseStatus::auto_segmented;
        case CaseStatus::auto_segmented:
        case CaseStatus::revised: return to == CaseStatus::revised || to == CaseStatus::accepted;
        case CaseStatus::accepted: return false;
    }
    return false;
}

std::string TransitionEvent::to_json() const {
    return json{{"round", round_index},
                {"case_id", case_id},
                {"from", pseg::to_string(from)},
                {"transition", pseg::to_string(to)},
                {"timestamp", timestamp},
                {"actor", actor}}
        .dump();
}

TransitionEvent TransitionEvent::from_json(const std::string& line) {
    try {
        auto j = json::parse(line);
        TransitionEvent e;
        e.round_index = j.at("round").get<int>();
        e.case_id = j.at("case_id").get<std::string>();
        e.from = case_status_from_string(j.at("from").get<std::string>());
        e.to = case_status_from_string(j.at("transition").get<std::string>());
        e.timestamp = j.at("timestamp").get<double>();
        e.actor = j.at("actor").get<std::string>();
        return e;
    } catch (const json::exception& ex) {
        fail(ErrorKind::format, std::string("event log: ") + ex.what());
    }
}

double wall_clock() {
    using namespace std::chrono;
    return duration<double>(system_clock::now().time_since_epoch()).count();
}

// ---------------------------------------------------------------------------
// AnnotationRound

AnnotationRound::AnnotationRound(int round_index, std::vector<std::string> case_ids, std::string checkpoint_ref,
                                 Clock clock)
    : round_index_(round_index),
      case_ids_(std::move(case_ids)),
      checkpoint_ref_(std::move(checkpoint_ref)),
      clock_(std::move(clock)) {
    for (const auto& id : case_ids_) {
        CaseRecord r;
        r.case_id = id;
        r.checkpoint_id = checkpoint_ref_;
        if (!cases_.emplace(id, r).second) fail(ErrorKind::usage, "duplicate case id '" + id + "' in round");
    }
}

CaseRecord& AnnotationRound::find(const std::string& case_id) {
    auto it = cases_.find(case_id);
    if (it == cases_.end()) fail(ErrorKind::usage, "case '" + case_id + "' is not part of this round");
    return it->second;
}

const CaseRecord& AnnotationRound::find(const std::string& case_id) const {
    return const_cast<AnnotationRound*>(this)->find(case_id);
}

void AnnotationRound::apply(const TransitionEvent& e) {
    auto& r = find(e.case_id);
    if (r.status != e.from || !legal_transition(e.from, e.to)) {
        fail(ErrorKind::state, "case '" + e.case_id + "': illegal transition " + to_string(r.status) + " -> " +
                                   to_string(e.to));
    }
    if (e.to == CaseStatus::accepted && r.needs_revision && r.revision_count == 0) {
        fail(ErrorKind::state, "case '" + e.case_id + "' has an empty draft and must be revised before acceptance");
    }
    if (!(e.timestamp >= r.first_timestamp) && r.first_timestamp >= 0) {
        fail(ErrorKind::state, "case '" + e.case_id + "': timestamps must not go backwards");
    }
    if (r.first_timestamp < 0) r.first_timestamp = e.timestamp;
    r.seconds = e.timestamp - r.first_timestamp;
    if (e.to == CaseStatus::revised) ++r.revision_count;
    r.status = e.to;
    events_.push_back(e);
}

void AnnotationRound::transition(const std::string& case_id, CaseStatus to, const std::string& actor) {
    std::lock_guard lock(*mutex_);
    TransitionEvent e{round_index_, case_id, find(case_id).status, to, clock_(), actor};
    apply(e);
    if (sink_) sink_(e);
}

void AnnotationRound::set_prompt(const std::string& case_id, const std::optional<BoundingBox2D>& box,
                                 int prompt_slice) {
    std::lock_guard lock(*mutex_);
    auto& r = find(case_id);
    r.prompt = box;
    r.prompt_slice = prompt_slice;
}

void AnnotationRound::flag_for_revision(const std::string& case_id) {
    std::lock_guard lock(*mutex_);
    find(case_id).needs_revision = true;
}

void AnnotationRound::set_frames(const std::string& case_id, int frames) {
    std::lock_guard lock(*mutex_);
    if (frames < 0) fail(ErrorKind::usage, "frame count must be non-negative");
    find(case_id).frames = frames;
}

CaseRecord AnnotationRound::record(const std::string& case_id) const {
    std::lock_guard lock(*mutex_);
    return find(case_id);
}

bool AnnotationRound::complete() const {
    std::lock_guard lock(*mutex_);
    return std::all_of(cases_.begin(), cases_.end(),
                       [](const auto& kv) { return kv.second.status == CaseStatus::accepted; });
}

std::vector<TransitionEvent> AnnotationRound::events() const {
    std::lock_guard lock(*mutex_);
    return events_;
}

std::string AnnotationRound::event_log_jsonl() const {
    std::string out;
    for (const auto& e : events()) out += e.to_json() + "\n";
    return out;
}

AnnotationRound AnnotationRound::replay(int round_index, const std::vector<std::string>& case_ids,
                                        const std::string& checkpoint_ref, const std::string& jsonl) {
    AnnotationRound r(round_index, case_ids, checkpoint_ref, [] { return 0.0; });
    std::istringstream in(jsonl);
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        auto e = TransitionEvent::from_json(line);
        if (e.round_index != round_index) {
            fail(ErrorKind::format, "event log line " + std::to_string(n) + " belongs to round " +
                                        std::to_string(e.round_index));
        }
        r.apply(e);
    }
    return r;
}

// ---------------------------------------------------------------------------
// oracles

std::optional<SliceRange> PassThroughOracle::choose_range(const std::string& case_id, const VoxelGrid&) {
    auto it = ranges_.find(case_id);
    if (it == ranges_.end()) return std::nullopt;
    return it->second;
}

const LabelMask& GroundTruthOracle::truth(const std::string& case_id) const {
    auto it = truth_.find(case_id);
    if (it == truth_.end()) fail(ErrorKind::usage, "no reference mask for case '" + case_id + "'");
    return it->second;
}

std::optional<Mask2D> GroundTruthOracle::revise_slice(const std::string& case_id, int z, const Mask2D& draft) {
    auto ref = extract_slice(truth(case_id).binary(1), z);
    if (ref == draft) return std::nullopt;
    return ref;
}

std::optional<SliceRange> GroundTruthOracle::choose_range(const std::string& case_id, const VoxelGrid&) {
    return z_extent(truth(case_id));
}

std::optional<LabelMask> GroundTruthOracle::revise_volume(const std::string& case_id, const LabelMask& draft) {
    auto ref = truth(case_id).binary(1);
    if (ref.labels().size() == draft.labels().size() &&
        std::equal(ref.labels().begin(), ref.labels().end(), draft.labels().begin())) {
        return std::nullopt;
    }
    return ref;
}

// ---------------------------------------------------------------------------
// rounds

std::map<std::string, CaseOutcome> run_round(AnnotationRound& round, const std::vector<HitlCase>& cases,
                                             const Model<float>& model, RevisionOracle& oracle,
                                             const std::string& actor) {
    std::map<std::string, CaseOutcome> out;
    for (const auto& c : cases) {
        if (!c.box) fail(ErrorKind::usage, "case '" + c.case_id + "' has no prompt");
        const int z = c.box->slice_index;
        round.set_prompt(c.case_id, c.box, z);
        CaseOutcome o;
        o.draft_slice = segment_slice(c.volume, *c.box, model);
        if (o.draft_slice.foreground_count() == 0) round.flag_for_revision(c.case_id);
        auto revised_slice = oracle.revise_slice(c.case_id, z, o.draft_slice);

        auto range = oracle.choose_range(c.case_id, c.volume);
        if (!range) fail(ErrorKind::state, "case '" + c.case_id + "': slice range unset at propagation");
        o.range = *range;
        round.set_frames(c.case_id, range->size());

        PropagationPlan plan;
        plan.prompt_slice = z;
        plan.range = *range;
        plan.box = c.box;
        if (revised_slice) plan.refined_masks[z] = *revised_slice;
        o.draft = propagate(c.volume, plan, model).mask;
        round.transition(c.case_id, CaseStatus::auto_segmented, "model");
        if (revised_slice) round.transition(c.case_id, CaseStatus::revised, actor);

        auto revised = oracle.revise_volume(c.case_id, o.draft);
        if (revised) round.transition(c.case_id, CaseStatus::revised, actor);
        const auto rec = round.record(c.case_id);
        if (!(rec.needs_revision && rec.revision_count == 0)) {
            round.transition(c.case_id, CaseStatus::accepted, actor);
            o.accepted = revised ? *revised : o.draft;
        }
        out.emplace(c.case_id, std::move(o));
    }
    return out;
}

// ---------------------------------------------------------------------------
// hard-case selection

std::vector<DisagreementRecord> select_from_masks(const std::vector<MaskPair>& pairs) {
    std::vector<DisagreementRecord> recs;
    for (const auto& p : pairs) recs.push_back({p.case_id, p.group, dsc(p.from_3d_box, p.from_2d_boxes), false});
    std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) {
        return std::tie(a.group, a.case_id) < std::tie(b.group, b.case_id);
    });
    for (std::size_t i = 0; i < recs.size();) {
        std::size_t j = i, best = i;
        for (; j < recs.size() && recs[j].group == recs[i].group; ++j) {
            if (recs[j].dsc_between_modes < recs[best].dsc_between_modes) best = j;
        }
        recs[best].selected = true;
        i = j;
    }
    return recs;
}

std::vector<DisagreementRecord> select_hard_cases(const std::vector<HardCaseInput>& cases,
                                                  const Model<float>& model) {
    std::vector<MaskPair> pairs;
    for (const auto& c : cases) {
        if (c.boxes2d.empty()) fail(ErrorKind::usage, "case '" + c.case_id + "' has no per-slice boxes");
        c.box3d.validate(c.volume.dims());
        const SliceRange range{c.box3d.z_min, c.box3d.z_max - 1};
        const int mid = (range.top + range.bottom) / 2;
        auto a = segment_3d(c.volume, c.box3d.on_slice(mid), range, model).mask;
        auto b = segment_per_slice_boxes(c.volume, c.boxes2d, model);
        pairs.push_back({c.case_id, c.group, std::move(a), std::move(b)});
    }
    return select_from_masks(pairs);
}

// ---------------------------------------------------------------------------
// lesion concatenation

ConcatResult concat_lesions_axial(const std::vector<std::pair<VoxelGrid, LabelMask>>& crops, int target_size) {
    if (crops.empty()) fail(ErrorKind::usage, "concat_lesions_axial: no crops");
    std::vector<VoxelGrid> grids;
    std::vector<LabelMask> masks;
    ConcatResult out;
    int nz = 0;
    for (const auto& [g, m] : crops) {
        if (m.dims() != g.dims()) fail(ErrorKind::shape, "concat_lesions_axial: crop mask does not match its image");
        const auto& d = g.dims();
        const auto& s = g.spacing();
        ConcatEntry e{nz, d.nz, d, s};
        if (target_size > 0 && (d.nx != target_size || d.ny != target_size)) {
            const Spacing fitted{s.sx * d.nx / target_size, s.sy * d.ny / target_size, s.sz};
            grids.push_back(resample(g, {target_size, target_size, d.nz}, fitted));
            masks.push_back(resample(m, {target_size, target_size, d.nz}, fitted));
        } else {
            grids.push_back(g);
            masks.push_back(m);
        }
        if (grids.back().dims().nx != grids.front().dims().nx || grids.back().dims().ny != grids.front().dims().ny) {
            fail(ErrorKind::shape, "concat_lesions_axial: crops have different in-plane sizes");
        }
        nz += d.nz;
        out.manifest.push_back(e);
    }
    const Dims dims{grids[0].dims().nx, grids[0].dims().ny, nz};
    std::vector<double> values;
    std::vector<std::uint8_t> labels;
    values.reserve(dims.voxels());
    labels.reserve(dims.voxels());
    for (std::size_t i = 0; i < grids.size(); ++i) {
        values.insert(values.end(), grids[i].values().begin(), grids[i].values().end());
        labels.insert(labels.end(), masks[i].labels().begin(), masks[i].labels().end());
    }
    out.volume = VoxelGrid(dims, grids[0].spacing(), std::move(values), grids[0].kind());
    out.mask = LabelMask(dims, grids[0].spacing(), std::move(labels));
    return out;
}

namespace {

template <typename Grid, typename Elem>
std::vector<Grid> split_impl(const Grid& stacked, std::span<const Elem> data,
                             const std::vector<ConcatEntry>& manifest) {
    const auto& d = stacked.dims();
    std::vector<Grid> out;
    for (const auto& e : manifest) {
        if (e.z_begin < 0 || e.nz < 1 || e.z_begin + e.nz > d.nz) fail(ErrorKind::range, "split_concat: entry outside the stack");
        const auto begin = data.begin() + static_cast<std::ptrdiff_t>(e.z_begin * d.slice_voxels());
        std::vector<Elem> part(begin, begin + static_cast<std::ptrdiff_t>(e.nz * d.slice_voxels()));
        const Dims sub{d.nx, d.ny, e.nz};
        const auto& od = e.original_dims;
        const auto& os = e.original_spacing;
        const bool same_plane = od.nx == d.nx && od.ny == d.ny;
        const Spacing fitted = same_plane ? os : Spacing{os.sx * od.nx / d.nx, os.sy * od.ny / d.ny, os.sz};
        Grid piece = [&] {
            if constexpr (std::is_same_v<Grid, VoxelGrid>) return Grid(sub, fitted, std::move(part), stacked.kind());
            else return Grid(sub, fitted, std::move(part));
        }();
        if (!same_plane) piece = resample(piece, od, os);
        out.push_back(std::move(piece));
    }
    return out;
}

}  // namespace

std::vector<LabelMask> split_concat(const LabelMask& stacked, const std::vector<ConcatEntry>& manifest) {
    return split_impl<LabelMask, std::uint8_t>(stacked, stacked.labels(), manifest);
}

std::vector<VoxelGrid> split_concat(const VoxelGrid& stacked, const std::vector<ConcatEntry>& manifest) {
    return split_impl<VoxelGrid, double>(stacked, stacked.values(), manifest);
}

// ---------------------------------------------------------------------------
// reporting

RoundTimes round_times(const AnnotationRound& round) {
    RoundTimes t;
    t.round_index = round.round_index();
    for (const auto& id : round.case_ids()) {
        const auto r = round.record(id);
        if (r.status != CaseStatus::accepted) continue;
        t.seconds.push_back(r.seconds);
        t.frames.push_back(r.frames);
    }
    return t;
}

RoundReport round_report(const std::vector<RoundTimes>& rounds) {
    RoundReport rep;
    int cum_cases = 0;
    double cum_seconds = 0;
    for (const auto& r : rounds) {
        if (r.seconds.empty()) {
            rep.warnings.push_back("round " + std::to_string(r.round_index) + " has no completed cases; omitted");
            continue;
        }
        RoundReportRow row;
        row.round_index = r.round_index;
        row.cases = static_cast<int>(r.seconds.size());
        for (double s : r.seconds) {
            if (s < 0) fail(ErrorKind::usage, "negative annotation time");
            row.total_seconds += s;
        }
        for (int f : r.frames) row.frames += f;
        row.mean_seconds_per_case = row.total_seconds / row.cases;
        row.mean_seconds_per_frame = row.frames > 0 ? row.total_seconds / row.frames : 0.0;
        cum_cases += row.cases;
        cum_seconds += row.total_seconds;
        row.cumulative_cases = cum_cases;
        row.cumulative_seconds = cum_seconds;
        rep.rows.push_back(row);
    }
    return rep;
}

std::string RoundReport::to_csv() const {
    std::ostringstream os;
    os << "round,cases,frames,total_seconds,mean_seconds_per_case,mean_seconds_per_frame,cumulative_cases,"
          "cumulative_seconds\n";
    for (const auto& r : rows) {
        os << r.round_index << ',' << r.cases << ',' << r.frames << ',' << r.total_seconds << ','
           << r.mean_seconds_per_case << ',' << r.mean_seconds_per_frame << ',' << r.cumulative_cases << ','
           << r.cumulative_seconds << '\n';
    }
    return os.str();
}

std::string RoundReport::to_json() const {
    json arr = json::array();
    for (const auto& r : rows) {
        arr.push_back({{"round", r.round_index},
                       {"cases", r.cases},
                       {"frames", r.frames},
                       {"total_seconds", r.total_seconds},
                       {"mean_seconds_per_case", r.mean_seconds_per_case},
                       {"mean_seconds_per_frame", r.mean_seconds_per_frame},
                       {"cumulative_cases", r.cumulative_cases},
                       {"cumulative_seconds", r.cumulative_seconds}});
    }
    return json{{"rounds", arr}, {"warnings", warnings}}.dump(2);
}

}  // namespace pseg
