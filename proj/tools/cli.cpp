#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <regex>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "pseg/hitl.hpp"
#include "pseg/io.hpp"
#include "pseg/metrics.hpp"
#include "pseg/model.hpp"
#include "pseg/preprocess.hpp"
#include "pseg/propagate.hpp"
#include "pseg/server.hpp"
#include "pseg/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pseg::cli {

BoundingBox2D parse_box(const std::string& text) {
    static const std::regex re(R"(^\s*z\s*=\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*$)");
    std::smatch m;
    if (!std::regex_match(text, m, re)) fail(ErrorKind::usage, "box must look like z=<slice>,<xmin>,<ymin>,<xmax>,<ymax>: '" + text + "'");
    return {std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3]), std::stoi(m[4]), std::stoi(m[5])};
}

SliceRange parse_range(const std::string& text) {
    static const std::regex re(R"(^\s*(-?\d+)\s*:\s*(-?\d+)\s*$)");
    std::smatch m;
    if (!std::regex_match(text, m, re)) fail(ErrorKind::usage, "range must look like top:bottom: '" + text + "'");
    SliceRange r{std::stoi(m[1]), std::stoi(m[2])};
    if (r.top > r.bottom) fail(ErrorKind::usage, "range top must not exceed bottom: '" + text + "'");
    return r;
}

namespace {

std::string read_text(const std::string& path) {
    auto b = read_file(path);
    return {b.begin(), b.end()};
}

void write_text(const std::string& path, const std::string& text) { write_file(path, Bytes(text.begin(), text.end())); }

std::string case_id_of(const std::string& path) {
    auto name = fs::path(path).filename().string();
    for (const char* ext : {".nii", ".vol"}) {
        const std::string e(ext);
        if (name.size() > e.size() && name.compare(name.size() - e.size(), e.size(), e) == 0)
            return name.substr(0, name.size() - e.size());
    }
    return fs::path(path).stem().string();
}

bool is_volume_file(const fs::path& p) {
    const auto e = p.extension().string();
    return e == ".nii" || e == ".vol";
}

/// Runs f(i) for i in [0, n) on up to `jobs` threads; the first exception wins.
template <typename F>
void parallel_for(int n, int jobs, F f) {
    jobs = std::max(1, std::min(jobs, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first;
    std::mutex m;
    std::vector<std::thread> ts;
    for (int t = 0; t < jobs; ++t) {
        ts.emplace_back([&] {
            for (int i = next++; i < n; i = next++) {
                try {
                    f(i);
                } catch (...) {
                    std::lock_guard lk(m);
                    if (!first) first = std::current_exception();
                }
            }
        });
    }
    for (auto& t : ts) t.join();
    if (first) std::rethrow_exception(first);
}

LabelMask reference_binary(const std::string& path, int label) {
    auto ref = load_mask(path);
    return label > 0 ? ref.binary(label) : ref;
}

// middle slice of the object's extent, tight box there
BoundingBox2D annotator_box(const LabelMask& truth) {
    const auto ext = z_extent(truth);
    const int z = (ext.top + ext.bottom) / 2;
    return tight_box(extract_slice(truth, z), z);
}

struct Options {
    std::uint64_t seed = 0;
    int jobs = 1;
};

// ---------------------------------------------------------------------------

struct PreprocessCmd {
    std::string in, out, preset, window, mask_in, mask_out;
    bool percentile = false, axial = false;
    double min_spacing = 3.0;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("preprocess", "Window or percentile-normalize a volume to [0, 255]");
        c->add_option("--in", in, "Input volume (.nii or .vol)")->required();
        c->add_option("--out", out, "Output volume")->required();
        auto* p = c->add_option("--preset", preset, "CT window preset: brain, abdomen, bone, lung, mediastinum");
        auto* w = c->add_option("--window", window, "Custom CT window as width,level");
        auto* q = c->add_flag("--percentile", percentile, "Foreground 0.5-99.5 percentile normalization (MRI, PET)");
        p->excludes(w)->excludes(q);
        w->excludes(q);
        c->add_flag("--axial-spacing", axial, "Resample along z when the slice spacing is below --min-spacing");
        c->add_option("--min-spacing", min_spacing, "Slice spacing threshold in mm");
        c->add_option("--mask", mask_in, "Mask resampled together with the volume");
        c->add_option("--mask-out", mask_out, "Where to write the resampled mask");
    }

    json run() const {
        VoxelGrid grid = load_volume(in);
        if (!preset.empty()) {
            grid = window_ct(grid, WindowPreset::named(preset));
        } else if (!window.empty()) {
            auto comma = window.find(',');
            if (comma == std::string::npos) fail(ErrorKind::usage, "--window expects width,level");
            grid = window_ct(grid, WindowPreset::custom(std::stod(window.substr(0, comma)), std::stod(window.substr(comma + 1))));
        } else if (percentile) {
            grid = percentile_normalize(grid);
        } else {
            fail(ErrorKind::usage, "one of --preset, --window or --percentile is required");
        }
        json j{{"out", out}};
        if (axial) {
            LabelMask mask = mask_in.empty() ? LabelMask::like(grid) : load_mask(mask_in);
            auto [g, m] = enforce_axial_spacing(grid, mask, min_spacing);
            grid = std::move(g);
            if (!mask_out.empty()) {
                save_mask(mask_out, m);
                j["mask_out"] = mask_out;
            }
        } else if (!mask_out.empty()) {
            fail(ErrorKind::usage, "--mask-out needs --axial-spacing");
        }
        save_volume(out, grid);
        const auto& d = grid.dims();
        j["dims"] = {d.nx, d.ny, d.nz};
        j["spacing"] = {grid.spacing().sx, grid.spacing().sy, grid.spacing().sz};
        return j;
    }
};

struct SegmentCmd {
    std::string volume, model, box, range, plan, out, ref, direction = "both";
    double tolerance = 2.0;
    int label = 1;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("segment", "Box-prompted 3D segmentation of one volume");
        c->add_option("--volume", volume, "Normalized volume (.nii or .vol)")->required();
        c->add_option("--model", model, "Model checkpoint")->required();
        c->add_option("--box", box, "Prompt box z=<slice>,<xmin>,<ymin>,<xmax>,<ymax> (x/y max exclusive)");
        c->add_option("--range", range, "Inclusive slice range top:bottom; without it only the box slice is segmented");
        c->add_option("--direction", direction, "forward, backward or both");
        c->add_option("--plan", plan, "Propagation plan JSON instead of --box/--range");
        c->add_option("--out", out, "Output mask")->required();
        c->add_option("--ref", ref, "Reference mask; prints DSC and NSD");
        c->add_option("--label", label, "Reference label compared against (0 = any nonzero)");
        c->add_option("--tolerance", tolerance, "NSD tolerance in mm");
    }

    json run() const {
        const VoxelGrid grid = load_volume(volume);
        const Model<float> m = load_checkpoint(model);
        LabelMask mask;
        if (!plan.empty()) {
            if (!box.empty() || !range.empty()) fail(ErrorKind::usage, "--plan excludes --box and --range");
            std::map<int, std::string> refs;
            PropagationPlan p = plan_from_json(read_text(plan), &refs);
            const auto base = fs::path(plan).parent_path();
            for (const auto& [z, ref_path] : refs) {
                fs::path rp(ref_path);
                auto slice = load_mask((rp.is_absolute() || base.empty() ? rp : base / rp).string());
                if (slice.dims().nz != 1 || slice.dims().nx != grid.dims().nx || slice.dims().ny != grid.dims().ny)
                    fail(ErrorKind::shape, "refined mask " + ref_path + " must be a single slice of the volume size");
                p.refined_masks[z] = extract_slice(slice, 0);
            }
            mask = propagate(grid, p, m).mask;
        } else {
            if (box.empty()) fail(ErrorKind::usage, "--box or --plan is required");
            const auto b = parse_box(box);
            if (range.empty()) {
                mask = LabelMask::like(grid);
                insert_slice(mask, b.slice_index, segment_slice(grid, b, m));
            } else {
                PropagationPlan p;
                p.prompt_slice = b.slice_index;
                p.range = parse_range(range);
                p.directions = direction_from_string(direction);
                p.box = b;
                mask = propagate(grid, p, m).mask;
            }
        }
        save_mask(out, mask);
        json j{{"out", out}, {"foreground", mask.foreground_count()}, {"checkpoint_id", m.checkpoint_id()}};
        if (!ref.empty()) {
            auto r = evaluate_volume(mask, reference_binary(ref, label), tolerance);
            j["dsc"] = r.dsc;
            j["nsd"] = r.nsd;
        }
        return j;
    }
};

struct SegmentVideoCmd {
    std::string clip, model, out, ref;
    std::vector<std::string> boxes;
    double tolerance = 2.0;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("segment-video", "First-frame box prompts propagated through a clip (z = time)");
        c->add_option("--clip", clip, "Clip volume; frames along z")->required();
        c->add_option("--model", model, "Model checkpoint")->required();
        c->add_option("--box", boxes, "One box per object, on frame 0: z=0,<xmin>,<ymin>,<xmax>,<ymax>")->required();
        c->add_option("--out", out, "Output label mask; object k gets label k")->required();
        c->add_option("--ref", ref, "Reference label mask; prints frame-averaged DSC and NSD per object");
        c->add_option("--tolerance", tolerance, "NSD tolerance in mm");
    }

    json run() const {
        const VoxelGrid grid = load_volume(clip);
        const Model<float> m = load_checkpoint(model);
        std::map<int, Prompt> prompts;
        for (std::size_t i = 0; i < boxes.size(); ++i) prompts[static_cast<int>(i) + 1] = Prompt{parse_box(boxes[i]), {}};
        const VideoResult r = segment_video(grid, prompts, {}, m);
        const LabelMask merged = r.merged();
        save_mask(out, merged);
        json j{{"out", out}, {"objects", boxes.size()}};
        if (!ref.empty()) {
            const LabelMask truth = load_mask(ref);
            json per = json::object();
            for (const auto& [id, mask] : r.masks) {
                auto rep = video_metrics(mask, truth.binary(id), tolerance);
                per[std::to_string(id)] = {{"dsc", rep.dsc}, {"nsd", rep.nsd}};
            }
            j["metrics"] = per;
        }
        return j;
    }
};

struct EvaluateCmd {
    std::string pred, ref, out, target = "fg", spacing;
    double tolerance = 2.0;
    int label = 0;
    bool video = false, header_spacing = true;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("evaluate", "DSC and NSD of predictions against references (files or directories)");
        c->add_option("--pred", pred, "Prediction mask or directory")->required();
        c->add_option("--ref", ref, "Reference mask or directory; files are matched by name")->required();
        c->add_option("--out", out, "CSV output (stdout when omitted)");
        c->add_option("--target", target, "Value of the target column");
        c->add_option("--label", label, "Reference label to compare (0 = any nonzero)");
        c->add_option("--tolerance", tolerance, "NSD tolerance in mm");
        c->add_flag("--video", video, "Frame-wise 2D scores averaged over frames");
        c->add_flag("--spacing-from-header", header_spacing, "Voxel spacing from the reference header (default)");
        c->add_option("--spacing", spacing, "Override spacing as sx,sy,sz");
    }

    json run(const Options& opt, std::ostream& stdout_) const {
        std::vector<std::pair<std::string, std::string>> pairs;  // pred, ref
        if (fs::is_directory(ref)) {
            if (!fs::is_directory(pred)) fail(ErrorKind::usage, "--ref is a directory, so --pred must be one too");
            std::vector<fs::path> refs;
            for (const auto& e : fs::directory_iterator(ref))
                if (e.is_regular_file() && is_volume_file(e.path())) refs.push_back(e.path());
            std::sort(refs.begin(), refs.end());
            for (const auto& r : refs) {
                auto p = fs::path(pred) / r.filename();
                if (!fs::exists(p)) fail(ErrorKind::io, "no prediction for " + r.string() + " (expected " + p.string() + ")");
                pairs.emplace_back(p.string(), r.string());
            }
            if (pairs.empty()) fail(ErrorKind::io, "no .nii or .vol files in " + ref);
        } else {
            pairs.emplace_back(pred, ref);
        }
        std::optional<Spacing> override_spacing;
        if (!spacing.empty()) {
            std::vector<double> v;
            std::stringstream ss(spacing);
            for (std::string tok; std::getline(ss, tok, ',');) v.push_back(std::stod(tok));
            if (v.size() != 3) fail(ErrorKind::usage, "--spacing expects sx,sy,sz");
            override_spacing = Spacing{v[0], v[1], v[2]};
        }
        std::vector<CaseMetrics> rows(pairs.size());
        parallel_for(static_cast<int>(pairs.size()), opt.jobs, [&](int i) {
            const auto& [p, r] = pairs[static_cast<std::size_t>(i)];
            LabelMask pm = load_mask(p);
            LabelMask rm = reference_binary(r, label);
            if (override_spacing) {
                rm = LabelMask(rm.dims(), *override_spacing, {rm.labels().begin(), rm.labels().end()});
            }
            if (pm.dims() != rm.dims()) fail(ErrorKind::shape, p + " and " + r + " differ in size");
            pm = LabelMask(pm.dims(), rm.spacing(), {pm.labels().begin(), pm.labels().end()});
            auto rep = video ? video_metrics(pm, rm, tolerance) : evaluate_volume(pm, rm, tolerance);
            rows[static_cast<std::size_t>(i)] = {case_id_of(r), target, rep.dsc, rep.nsd};
        });
        const auto csv = metrics_csv(rows);
        if (out.empty()) {
            stdout_ << csv;
            return nullptr;
        }
        write_text(out, csv);
        auto s = summarize(rows);
        return {{"out", out}, {"cases", rows.size()}, {"dsc_median", s.dsc_median}, {"nsd_median", s.nsd_median}};
    }
};

struct TrainFlags {
    int epochs = 0, samples = -1, frames = 0;
    double lr_encoder = 0, lr_other = 0;
    std::string loss_log;

    void add(CLI::App* c) {
        c->add_option("--epochs", epochs, "Epochs (default: the command's default)");
        c->add_option("--samples-per-epoch", samples, "Samples drawn per epoch (0 = one per item)");
        c->add_option("--frames", frames, "Frames per training sample");
        c->add_option("--lr-encoder", lr_encoder, "Image-encoder learning rate");
        c->add_option("--lr-other", lr_other, "Learning rate of the other modules");
        c->add_option("--loss-log", loss_log, "CSV of per-step losses");
    }
    void apply(TrainConfig& cfg) const {
        if (epochs > 0) cfg.epochs = epochs;
        if (samples >= 0) cfg.samples_per_epoch = samples;
        if (frames > 0) cfg.frames_per_sample = frames;
        if (lr_encoder > 0) cfg.lr_encoder = lr_encoder;
        if (lr_other > 0) cfg.lr_other = lr_other;
    }
};

json loss_summary(const std::vector<LossRecord>& log, const Model<float>& m, const std::string& out) {
    json j{{"out", out}, {"steps", log.size()}, {"checkpoint_id", m.checkpoint_id()}, {"digest", parameter_digest(m)}};
    if (!log.empty()) {
        j["first_loss"] = log.front().total;
        j["final_loss"] = log.back().total;
    }
    return j;
}

struct TrainCmd {
    std::string manifest, out, config, init;
    TrainFlags flags;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("train", "Train a model from a manifest of volumes and masks");
        c->add_option("--manifest", manifest, "Manifest JSON list of {volume_path, mask_path, modality, object_id}")->required();
        c->add_option("--out", out, "Checkpoint to write")->required();
        c->add_option("--model-config", config, "Model configuration JSON (defaults otherwise)");
        c->add_option("--init", init, "Start from this checkpoint instead of a fresh model");
        flags.add(c);
    }

    json run(const Options& opt) const {
        auto items = load_items(read_manifest(manifest));
        Model<float> m = !init.empty() ? load_checkpoint(init)
                                      : Model<float>(config.empty() ? ModelConfig{} : ModelConfig::from_json(read_text(config)));
        TrainConfig cfg;
        cfg.epochs = 10;
        cfg.seed = opt.seed;
        flags.apply(cfg);
        auto log = train(m, items, cfg);
        save_checkpoint(out, m);
        if (!flags.loss_log.empty()) write_text(flags.loss_log, loss_log_csv(log));
        return loss_summary(log, m, out);
    }
};

struct FinetuneCmd {
    std::string model, manifest, out, ckpt_dir;
    int round = 2;
    TrainFlags flags;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("finetune", "Fine-tune on accepted masks with the round schedule");
        c->add_option("--model", model, "Base checkpoint")->required();
        c->add_option("--manifest", manifest, "Manifest of accepted cases")->required();
        c->add_option("--round", round, "Annotation round being prepared (2 or 3)")->required();
        c->add_option("--out", out, "Checkpoint to write")->required();
        c->add_option("--checkpoint-dir", ckpt_dir, "Write a checkpoint after every epoch here");
        flags.add(c);
    }

    json run(const Options& opt) const {
        auto items = load_items(read_manifest(manifest));
        Model<float> m = load_checkpoint(model);
        TrainConfig base;
        base.seed = opt.seed;
        flags.apply(base);
        auto schedule = RoundSchedule::for_round(round);
        if (flags.epochs > 0) schedule.epochs = flags.epochs;
        if (!ckpt_dir.empty()) fs::create_directories(ckpt_dir);
        auto log = fine_tune(m, items, schedule, base, ckpt_dir);
        save_checkpoint(out, m);
        if (!flags.loss_log.empty()) write_text(flags.loss_log, loss_log_csv(log));
        auto j = loss_summary(log, m, out);
        j["epochs"] = schedule.epochs;
        j["lr_factor"] = schedule.lr_factor;
        return j;
    }
};

struct HitlRoundCmd {
    std::string manifest, model, out_dir, oracle = "gt", actor = "oracle";
    int round = 1;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("hitl-round", "Draft, revise and accept every case of one annotation round");
        c->add_option("--manifest", manifest, "Cases; mask_path holds the reference used by the scripted annotator")->required();
        c->add_option("--model", model, "Checkpoint producing the drafts")->required();
        c->add_option("--round", round, "Round index")->required();
        c->add_option("--out-dir", out_dir, "Accepted masks, event log, times and accepted manifest")->required();
        c->add_option("--oracle", oracle, "gt (replace drafts by the reference) or pass (accept drafts)")
            ->check(CLI::IsMember({"gt", "pass"}));
        c->add_option("--actor", actor, "Actor recorded in the event log");
    }

    json run() const {
        const auto entries = read_manifest(manifest);
        const Model<float> m = load_checkpoint(model);
        fs::create_directories(out_dir);
        std::vector<HitlCase> cases;
        std::vector<std::string> ids;
        std::map<std::string, LabelMask> truth;
        std::map<std::string, SliceRange> ranges;
        std::map<std::string, const ManifestEntry*> by_id;
        for (const auto& e : entries) {
            auto id = case_id_of(e.volume_path);
            if (by_id.count(id)) fail(ErrorKind::usage, "duplicate case id " + id);
            by_id[id] = &e;
            auto gt = load_mask(e.mask_path).binary(e.object_id);
            cases.push_back({id, load_volume(e.volume_path), annotator_box(gt)});
            ids.push_back(id);
            ranges[id] = z_extent(gt);
            truth[id] = std::move(gt);
        }
        AnnotationRound r(round, ids, m.checkpoint_id());
        std::ofstream events(fs::path(out_dir) / ("round" + std::to_string(round) + "_events.jsonl"));
        r.set_event_sink([&](const TransitionEvent& ev) { events << ev.to_json() << '\n' << std::flush; });
        std::unique_ptr<RevisionOracle> o;
        if (oracle == "gt") {
            o = std::make_unique<GroundTruthOracle>(truth);
        } else {
            o = std::make_unique<PassThroughOracle>(ranges);
        }
        auto outcomes = run_round(r, cases, m, *o, actor);

        std::vector<ManifestEntry> accepted;
        json per = json::array();
        for (const auto& id : ids) {
            const auto& oc = outcomes.at(id);
            json row{{"case_id", id}, {"status", to_string(r.status(id))},
                     {"draft_dsc", dsc(oc.draft, truth.at(id))}};
            if (oc.accepted) {
                auto path = (fs::path(out_dir) / (id + "_mask.vol")).string();
                save_mask(path, *oc.accepted);
                accepted.push_back({fs::absolute(by_id.at(id)->volume_path).string(), fs::absolute(path).string(),
                                    by_id.at(id)->modality, 1});
                row["mask"] = path;
            }
            per.push_back(row);
        }
        write_text((fs::path(out_dir) / "accepted.json").string(), write_manifest(accepted));
        auto t = round_times(r);
        const auto times_path = (fs::path(out_dir) / ("round" + std::to_string(round) + "_times.json")).string();
        write_text(times_path, json{{"round", t.round_index}, {"seconds", t.seconds}, {"frames", t.frames}}.dump() + "\n");
        double mean = 0;
        for (const auto& id : ids) mean += dsc(outcomes.at(id).draft, truth.at(id));
        return {{"round", round}, {"cases", per}, {"accepted", accepted.size()},
                {"mean_draft_dsc", ids.empty() ? 0.0 : mean / static_cast<double>(ids.size())},
                {"times", times_path}};
    }
};

struct HitlSelectCmd {
    std::string manifest, model, out;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("hitl-select", "Pick the hardest case per group by 3D-box vs 2D-box disagreement");
        c->add_option("--manifest", manifest, "Cases; the modality field is the group")->required();
        c->add_option("--model", model, "Model checkpoint")->required();
        c->add_option("--out", out, "CSV output (stdout when omitted)");
    }

    json run(std::ostream& stdout_) const {
        const Model<float> m = load_checkpoint(model);
        std::vector<HardCaseInput> cases;
        for (const auto& e : read_manifest(manifest)) {
            auto gt = load_mask(e.mask_path).binary(e.object_id);
            HardCaseInput c{case_id_of(e.volume_path), e.modality, load_volume(e.volume_path), tight_box(gt), {}};
            const auto ext = z_extent(gt);
            for (int z = ext.top; z <= ext.bottom; ++z) {
                auto s = extract_slice(gt, z);
                if (s.foreground_count() > 0) c.boxes2d[z] = tight_box(s, z);
            }
            cases.push_back(std::move(c));
        }
        std::ostringstream csv;
        csv << "case_id,group,dsc_between_modes,selected\n";
        int selected = 0;
        for (const auto& r : select_hard_cases(cases, m)) {
            csv << r.case_id << ',' << r.group << ',' << std::fixed << std::setprecision(6) << r.dsc_between_modes << ','
                << (r.selected ? 1 : 0) << '\n';
            selected += r.selected;
        }
        if (out.empty()) {
            stdout_ << csv.str();
            return nullptr;
        }
        write_text(out, csv.str());
        return {{"out", out}, {"cases", cases.size()}, {"selected", selected}};
    }
};

struct ServeCmd {
    std::string model, host = "127.0.0.1", request_log, miss = "recompute";
    std::vector<std::string> extra;
    int port = 8080, threads = 4;
    std::size_t cache = 4, max_upload = 256u << 20;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("serve", "Run the HTTP annotation server");
        c->add_option("--model", model, "Default checkpoint")->required();
        c->add_option("--extra-model", extra, "Additional selectable checkpoint as name=path");
        c->add_option("--host", host, "Bind address");
        c->add_option("--port", port, "Port (0 picks a free one)");
        c->add_option("--threads", threads, "Worker threads");
        c->add_option("--cache-capacity", cache, "MRU result cache capacity");
        c->add_option("--max-upload-bytes", max_upload, "Largest accepted upload");
        c->add_option("--miss-policy", miss, "recompute or gone")->check(CLI::IsMember({"recompute", "gone"}));
        c->add_option("--request-log", request_log, "JSON-lines request log");
    }

    json run(std::ostream& stdout_) const {
        std::map<std::string, std::shared_ptr<Segmenter>> models;
        auto load = [](const std::string& path) {
            return std::make_shared<ModelSegmenter>(std::make_shared<const Model<float>>(load_checkpoint(path)));
        };
        models["default"] = load(model);
        for (const auto& e : extra) {
            auto eq = e.find('=');
            if (eq == std::string::npos || eq == 0) fail(ErrorKind::usage, "--extra-model expects name=path: " + e);
            models[e.substr(0, eq)] = load(e.substr(eq + 1));
        }
        ServerConfig cfg;
        cfg.host = host;
        cfg.port = port;
        cfg.threads = threads;
        cfg.cache_capacity = cache;
        cfg.max_upload_bytes = max_upload;
        cfg.miss_policy = miss == "gone" ? CacheMissPolicy::gone : CacheMissPolicy::recompute;
        AnnotationService svc(models, cfg);
        std::ofstream log;
        if (!request_log.empty()) {
            log.open(request_log, std::ios::app);
            if (!log) fail(ErrorKind::io, "cannot open " + request_log);
        }
        HttpServer http(svc, request_log.empty() ? nullptr : &log);
        const int bound = http.bind(host, port);
        stdout_ << json{{"listening", host}, {"port", bound}}.dump() << std::endl;
        http.listen();
        return nullptr;
    }
};

struct ReportCmd {
    std::vector<std::string> times;
    std::string out;
    bool as_json = false;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("report", "Annotation time per round from hitl-round times files");
        c->add_option("--times", times, "roundN_times.json files")->required();
        c->add_option("--out", out, "Output file (stdout when omitted)");
        c->add_flag("--json", as_json, "JSON instead of CSV");
    }

    json run(std::ostream& stdout_, std::ostream& err) const {
        std::vector<RoundTimes> rounds;
        for (const auto& path : times) {
            json j;
            try {
                j = json::parse(read_text(path));
                RoundTimes t;
                t.round_index = j.at("round").get<int>();
                t.seconds = j.at("seconds").get<std::vector<double>>();
                t.frames = j.at("frames").get<std::vector<int>>();
                rounds.push_back(std::move(t));
            } catch (const json::exception& e) {
                fail(ErrorKind::format, path + ": " + e.what());
            }
        }
        std::sort(rounds.begin(), rounds.end(), [](auto& a, auto& b) { return a.round_index < b.round_index; });
        auto rep = round_report(rounds);
        for (const auto& w : rep.warnings) err << json{{"warning", w}}.dump() << '\n';
        const auto text = as_json ? rep.to_json() + "\n" : rep.to_csv();
        if (out.empty()) {
            stdout_ << text;
            return nullptr;
        }
        write_text(out, text);
        return {{"out", out}, {"rounds", rep.rows.size()}};
    }
};

struct SynthCmd {
    std::string out_dir, format = "vol", modality = "ct";
    int count = 5, frames = 0, size = 64, slices = 24, distractors = 0;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("synth", "Write synthetic volumes (or clips) with masks and a manifest");
        c->add_option("--out-dir", out_dir, "Output directory")->required();
        c->add_option("--count", count, "Number of cases");
        c->add_option("--size", size, "In-plane size");
        c->add_option("--slices", slices, "Slices per volume");
        c->add_option("--video-frames", frames, "Write moving-blob clips with this many frames instead");
        c->add_option("--distractors", distractors, "Unlabeled bright blobs per volume");
        c->add_option("--modality", modality, "Modality recorded in the manifest");
        c->add_option("--format", format, "vol (exact) or nii")->check(CLI::IsMember({"vol", "nii"}));
    }

    json run(const Options& opt) const {
        fs::create_directories(out_dir);
        std::mt19937_64 rng(opt.seed);
        std::vector<ManifestEntry> entries;
        for (int i = 0; i < count; ++i) {
            SyntheticCase c;
            if (frames > 0) {
                c = make_synthetic_video(size, frames, rng);
            } else {
                SyntheticConfig sc;
                sc.dims = {size, size, slices};
                sc.distractors = distractors;
                c = make_synthetic_volume(sc, rng);
            }
            char name[32];
            std::snprintf(name, sizeof name, "case%03d", i);
            const auto v = (fs::path(out_dir) / (std::string(name) + "." + format)).string();
            const auto mpath = (fs::path(out_dir) / (std::string(name) + "_mask." + format)).string();
            save_volume(v, c.volume);
            save_mask(mpath, c.mask);
            entries.push_back({fs::path(v).filename().string(), fs::path(mpath).filename().string(),
                               frames > 0 ? "video" : modality, 1});
        }
        const auto manifest = (fs::path(out_dir) / "manifest.json").string();
        write_text(manifest, write_manifest(entries));
        return {{"manifest", manifest}, {"cases", count}};
    }
};

void print_error(std::ostream& err, const std::string& kind, const std::string& message) {
    err << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"promptseg: box-prompted 3D and video segmentation with memory propagation"};
    app.name("promptseg");
    app.require_subcommand(1);
    Options opt;
    app.add_option("--seed", opt.seed, "Seed for every random draw");
    app.add_option("--jobs", opt.jobs, "Parallel cases (evaluate)")->check(CLI::PositiveNumber);
    app.footer(
        "Boxes are z=<slice>,<xmin>,<ymin>,<xmax>,<ymax> with exclusive max edges.\n"
        "Ranges are top:bottom, both inclusive.");

    PreprocessCmd pre;
    SegmentCmd seg;
    SegmentVideoCmd vid;
    EvaluateCmd eval;
    TrainCmd train_cmd;
    FinetuneCmd ft;
    HitlRoundCmd hr;
    HitlSelectCmd hs;
    ServeCmd serve;
    ReportCmd report;
    SynthCmd synth;
    pre.add(app);
    seg.add(app);
    vid.add(app);
    eval.add(app);
    train_cmd.add(app);
    ft.add(app);
    hr.add(app);
    hs.add(app);
    serve.add(app);
    report.add(app);
    synth.add(app);
    for (auto* sub : app.get_subcommands({})) sub->footer(app.get_footer());

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        print_error(err, "usage", e.what());
        return 2;
    }

    try {
        json result;
        const auto name = app.get_subcommands().front()->get_name();
        if (name == "preprocess") result = pre.run();
        else if (name == "segment") result = seg.run();
        else if (name == "segment-video") result = vid.run();
        else if (name == "evaluate") result = eval.run(opt, out);
        else if (name == "train") result = train_cmd.run(opt);
        else if (name == "finetune") result = ft.run(opt);
        else if (name == "hitl-round") result = hr.run();
        else if (name == "hitl-select") result = hs.run(out);
        else if (name == "serve") result = serve.run(out);
        else if (name == "report") result = report.run(out, err);
        else if (name == "synth") result = synth.run(opt);
        if (!result.is_null()) out << result.dump() << '\n';
        return 0;
    } catch (const Error& e) {
        print_error(err, to_string(e.kind()), e.what());
        return e.kind() == ErrorKind::usage ? 2 : 1;
    } catch (const std::exception& e) {
        print_error(err, "internal", e.what());
        return 1;
    }
}

}  // namespace pseg::cli
