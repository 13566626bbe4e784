#include "pseg/propagate.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "json.hpp"
#include "pseg/preprocess.hpp"

namespace pseg {

using json = nlohmann::json;
using ad::Graph;

const char* to_string(Direction d) noexcept {
    switch (d) {
        case Direction::forward: return "forward";
        case Direction::backward: return "backward";
        case Direction::both: return "both";
    }
    return "both";
}

Direction direction_from_string(const std::string& name) {
    if (name == "forward") return Direction::forward;
    if (name == "backward") return Direction::backward;
    if (name == "both") return Direction::both;
    fail(ErrorKind::usage, "unknown direction '" + name + "' (forward, backward, both)");
}

void PropagationPlan::validate(const Dims& dims) const {
    range.validate(dims.nz);
    if (!range.contains(prompt_slice)) {
        fail(ErrorKind::range, "prompt slice " + std::to_string(prompt_slice) + " outside range [" +
                                   std::to_string(range.top) + ", " + std::to_string(range.bottom) + "]");
    }
    if (box) {
        box->validate(dims);
        if (box->slice_index != prompt_slice) fail(ErrorKind::usage, "box slice differs from the prompt slice");
    }
    if (!box && !refined_masks.count(prompt_slice)) {
        fail(ErrorKind::usage, "plan needs a box or a refined mask on the prompt slice");
    }
    for (const auto& [z, m] : refined_masks) {
        if (!range.contains(z)) fail(ErrorKind::range, "refined slice " + std::to_string(z) + " outside range");
        if (m.nx != dims.nx || m.ny != dims.ny) fail(ErrorKind::shape, "refined mask size does not match the volume");
    }
}

std::string plan_to_json(const PropagationPlan& plan, const std::map<int, std::string>& refined_refs) {
    json j{{"prompt_slice", plan.prompt_slice},
           {"range", {plan.range.top, plan.range.bottom}},
           {"directions", to_string(plan.directions)}};
    if (plan.box) {
        const auto& b = *plan.box;
        j["box"] = {b.slice_index, b.x_min, b.y_min, b.x_max, b.y_max};
    }
    json refs = json::object();
    for (const auto& [z, ref] : refined_refs) refs[std::to_string(z)] = ref;
    j["refined_masks"] = refs;
    return j.dump();
}

PropagationPlan plan_from_json(const std::string& text, std::map<int, std::string>* refined_refs) {
    PropagationPlan p;
    try {
        const auto j = json::parse(text);
        p.prompt_slice = j.at("prompt_slice").get<int>();
        const auto r = j.at("range").get<std::array<int, 2>>();
        p.range = {r[0], r[1]};
        p.directions = direction_from_string(j.value("directions", std::string("both")));
        if (j.contains("box")) {
            const auto b = j["box"].get<std::array<int, 5>>();
            p.box = BoundingBox2D{b[0], b[1], b[2], b[3], b[4]};
        }
        if (refined_refs && j.contains("refined_masks")) {
            for (const auto& [k, v] : j["refined_masks"].items()) (*refined_refs)[std::stoi(k)] = v.get<std::string>();
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("propagation plan: ") + e.what());
    } catch (const std::invalid_argument&) {
        fail(ErrorKind::format, "propagation plan: refined_masks keys must be slice indices");
    }
    return p;
}

namespace {

// Volume brought to the model's square input size, plus the mapping back.
class FittedVolume {
public:
    FittedVolume(const VoxelGrid& volume, int size) : original_(volume), size_(size) {
        const auto& d = volume.dims();
        resized_ = d.nx != size || d.ny != size;
        if (resized_) {
            const auto& s = volume.spacing();
            fitted_spacing_ = {s.sx * d.nx / size, s.sy * d.ny / size, s.sz};
            fitted_ = resample(volume, {size, size, d.nz}, fitted_spacing_);
            for (double& v : fitted_.values()) v = std::clamp(v, 0.0, 255.0);
        }
    }

    const VoxelGrid& grid() const { return resized_ ? fitted_ : original_; }
    Image2D frame(int z) const { return extract_slice(grid(), z); }

    BoundingBox2D box(const BoundingBox2D& b) const {
        if (!resized_) return b;
        const auto& d = original_.dims();
        BoundingBox2D out = b;
        out.x_min = std::clamp(static_cast<int>(std::floor(b.x_min * static_cast<double>(size_) / d.nx)), 0, size_ - 1);
        out.y_min = std::clamp(static_cast<int>(std::floor(b.y_min * static_cast<double>(size_) / d.ny)), 0, size_ - 1);
        out.x_max = std::clamp(static_cast<int>(std::ceil(b.x_max * static_cast<double>(size_) / d.nx)), out.x_min + 1, size_);
        out.y_max = std::clamp(static_cast<int>(std::ceil(b.y_max * static_cast<double>(size_) / d.ny)), out.y_min + 1, size_);
        return out;
    }

    Mask2D to_model(const Mask2D& m) const {
        if (!resized_) return m;
        LabelMask one({m.nx, m.ny, 1}, {original_.spacing().sx, original_.spacing().sy, 1.0}, m.labels);
        auto r = resample(one, {size_, size_, 1}, {fitted_spacing_.sx, fitted_spacing_.sy, 1.0});
        return extract_slice(r, 0);
    }

    Mask2D to_original(const Mask2D& m) const {
        if (!resized_) return m;
        LabelMask one({size_, size_, 1}, {fitted_spacing_.sx, fitted_spacing_.sy, 1.0}, m.labels);
        const auto& d = original_.dims();
        auto r = resample(one, {d.nx, d.ny, 1}, {original_.spacing().sx, original_.spacing().sy, 1.0});
        return extract_slice(r, 0);
    }

private:
    const VoxelGrid& original_;
    int size_;
    bool resized_ = false;
    VoxelGrid fitted_;
    Spacing fitted_spacing_;
};

struct FrameResult {
    Mask2D mask;  // model resolution
    MemoryEntry<float> entry;
};

FrameResult run_frame(const Model<float>& model, const FittedVolume& fv, int z, const MemoryBank<float>& bank,
                      const Prompt* prompt, const Mask2D* refined) {
    Graph<float> g(false);
    const auto frame = fv.frame(z);
    if (refined) {
        auto features = model.encode_image(g, frame);
        auto m = fv.to_model(*refined);
        return {m, model.encode_memory(g, features, m, z)};
    }
    auto out = model.forward_frame(g, frame, bank, prompt, z);
    const int s = model.config().input_size;
    return {binarize<float>(std::as_const(out.decoded.logits).data(), s, s), std::move(out.entry)};
}

}  // namespace

SegmentResult propagate(const VoxelGrid& volume, const PropagationPlan& plan, const Model<float>& model) {
    plan.validate(volume.dims());
    const FittedVolume fv(volume, model.config().input_size);
    const int cap = model.config().memory_capacity;

    SegmentResult result;
    result.mask = LabelMask(volume.dims(), volume.spacing());

    auto emit = [&](int z, const Mask2D& model_mask, const Mask2D* refined) {
        insert_slice(result.mask, z, refined ? *refined : fv.to_original(model_mask));
    };

    const int p = plan.prompt_slice;
    auto ref_at = [&](int z) -> const Mask2D* {
        auto it = plan.refined_masks.find(z);
        return it == plan.refined_masks.end() ? nullptr : &it->second;
    };

    Prompt prompt;
    if (plan.box) prompt.box = fv.box(*plan.box);
    MemoryBank<float> empty(cap);
    auto seed = run_frame(model, fv, p, empty, &prompt, ref_at(p));
    emit(p, seed.mask, ref_at(p));
    result.prompt_slice_mask = extract_slice(result.mask, p);
    result.empty_prompt_mask = result.prompt_slice_mask.foreground_count() == 0;

    auto pass = [&](int dir) {
        MemoryBank<float> bank(cap);
        bank_insert(bank, seed.entry);
        for (int z = p + dir; plan.range.contains(z); z += dir) {
            auto r = run_frame(model, fv, z, bank, nullptr, ref_at(z));
            emit(z, r.mask, ref_at(z));
            bank_insert(bank, std::move(r.entry));
        }
    };
    if (plan.directions != Direction::backward) pass(+1);
    if (plan.directions != Direction::forward) pass(-1);
    return result;
}

SegmentResult segment_3d(const VoxelGrid& volume, const BoundingBox2D& box, const SliceRange& range,
                         const Model<float>& model) {
    PropagationPlan plan;
    plan.prompt_slice = box.slice_index;
    plan.range = range;
    plan.box = box;
    return propagate(volume, plan, model);
}

Mask2D segment_slice(const VoxelGrid& volume, const BoundingBox2D& box, const Model<float>& model) {
    box.validate(volume.dims());
    const FittedVolume fv(volume, model.config().input_size);
    Prompt prompt;
    prompt.box = fv.box(box);
    MemoryBank<float> empty(model.config().memory_capacity);
    auto r = run_frame(model, fv, box.slice_index, empty, &prompt, nullptr);
    return fv.to_original(r.mask);
}

LabelMask segment_per_slice_boxes(const VoxelGrid& volume, const std::map<int, BoundingBox2D>& boxes,
                                  const Model<float>& model) {
    LabelMask out(volume.dims(), volume.spacing());
    for (const auto& [z, box] : boxes) {
        if (box.slice_index != z) fail(ErrorKind::usage, "per-slice box keyed by " + std::to_string(z) +
                                                              " sits on slice " + std::to_string(box.slice_index));
        insert_slice(out, z, segment_slice(volume, box, model));
    }
    return out;
}

LabelMask VideoResult::merged() const {
    if (masks.empty()) return {};
    LabelMask out(masks.begin()->second.dims(), masks.begin()->second.spacing());
    for (const auto& [id, m] : masks) {
        for (std::size_t i = 0; i < m.labels().size(); ++i) {
            if (m.labels()[i]) out.labels()[i] = static_cast<std::uint8_t>(id);
        }
    }
    return out;
}

VideoResult segment_video(const VoxelGrid& clip, const std::map<int, Prompt>& first_frame_prompts,
                          const std::map<int, std::map<int, Mask2D>>& refined_masks, const Model<float>& model) {
    if (first_frame_prompts.empty()) fail(ErrorKind::usage, "segment_video: no objects prompted");
    const auto& d = clip.dims();
    const FittedVolume fv(clip, model.config().input_size);
    VideoResult result;
    for (const auto& [id, prompt] : first_frame_prompts) {
        if (id < 1 || id > 255) fail(ErrorKind::usage, "segment_video: object ids must be in [1, 255]");
        if (prompt.empty()) fail(ErrorKind::usage, "segment_video: empty prompt for object " + std::to_string(id));
        if (prompt.box && prompt.box->slice_index != 0) {
            fail(ErrorKind::usage, "segment_video: prompts must be on frame 0, object " + std::to_string(id) +
                                       " is on frame " + std::to_string(prompt.box->slice_index));
        }
        if (prompt.box) prompt.box->validate(d);
        static const std::map<int, Mask2D> none;
        auto rit = refined_masks.find(id);
        const auto& refined = rit == refined_masks.end() ? none : rit->second;
        for (const auto& [f, m] : refined) {
            if (f < 0 || f >= d.nz) fail(ErrorKind::range, "segment_video: refined frame " + std::to_string(f) + " out of range");
            if (m.nx != d.nx || m.ny != d.ny) fail(ErrorKind::shape, "segment_video: refined mask size mismatch");
        }
        auto ref_at = [&](int f) -> const Mask2D* {
            auto it = refined.find(f);
            return it == refined.end() ? nullptr : &it->second;
        };

        Prompt p = prompt;
        if (p.box) p.box = fv.box(*p.box);
        LabelMask mask(d, clip.spacing());
        MemoryBank<float> bank(model.config().memory_capacity);
        for (int f = 0; f < d.nz; ++f) {
            auto r = run_frame(model, fv, f, bank, f == 0 ? &p : nullptr, ref_at(f));
            insert_slice(mask, f, ref_at(f) ? *ref_at(f) : fv.to_original(r.mask));
            bank_insert(bank, std::move(r.entry));
        }
        result.masks.emplace(id, std::move(mask));
        result.final_bank_size[id] = bank.size();
    }
    return result;
}

}  // namespace pseg
