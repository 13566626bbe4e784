#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pseg/model.hpp"
#include "pseg/volume.hpp"

namespace pseg {

enum class Direction { forward, backward, both };
const char* to_string(Direction d) noexcept;
Direction direction_from_string(const std::string& name);

/// forward walks toward higher slice indices (range.bottom), backward toward
/// range.top.
struct PropagationPlan {
    int prompt_slice = 0;
    SliceRange range;
    Direction directions = Direction::both;
    std::optional<BoundingBox2D> box;
    /// Human-revised slices; used as prompted conditioning frames and emitted as-is.
    std::map<int, Mask2D> refined_masks;

    void validate(const Dims& dims) const;
};

/// JSON form: {"prompt_slice", "range": [top, bottom], "directions",
/// "box": [z, x_min, y_min, x_max, y_max], "refined_masks": {"<z>": "<ref>"}}.
/// Mask payloads travel separately; refs name them.
std::string plan_to_json(const PropagationPlan& plan, const std::map<int, std::string>& refined_refs = {});
PropagationPlan plan_from_json(const std::string& text, std::map<int, std::string>* refined_refs = nullptr);

struct SegmentResult {
    LabelMask mask;
    /// The prompt slice produced no foreground; propagation still ran.
    bool empty_prompt_mask = false;
    /// 2D mask on the prompt slice (before assembly).
    Mask2D prompt_slice_mask;
};

/// Bank policy used during propagation (see MemoryBank::insert).
template <typename T>
void bank_insert(MemoryBank<T>& bank, MemoryEntry<T> entry) {
    bank.insert(std::move(entry));
}

/// Runs a plan: prompt slice first (box or refined mask), then an independent
/// pass per requested direction, each from a fresh bank seeded with the
/// prompt-slice entry. Voxels outside the range stay background.
SegmentResult propagate(const VoxelGrid& volume, const PropagationPlan& plan, const Model<float>& model);

/// Box on its slice, bidirectional propagation over `range`.
SegmentResult segment_3d(const VoxelGrid& volume, const BoundingBox2D& box, const SliceRange& range,
                         const Model<float>& model);

/// Single-frame segmentation with an empty bank.
Mask2D segment_slice(const VoxelGrid& volume, const BoundingBox2D& box, const Model<float>& model);

/// Independent single-frame segmentation for every listed slice.
LabelMask segment_per_slice_boxes(const VoxelGrid& volume, const std::map<int, BoundingBox2D>& boxes,
                                  const Model<float>& model);

struct VideoResult {
    /// Binary mask per object id.
    std::map<int, LabelMask> masks;
    std::map<int, std::size_t> final_bank_size;

    /// Single label volume; where objects overlap the higher id wins.
    LabelMask merged() const;
};

/// Forward-only propagation from frame 0. Every prompt must sit on frame 0.
/// refined_masks[object][frame] are pinned as prompted entries and emitted as-is.
VideoResult segment_video(const VoxelGrid& clip, const std::map<int, Prompt>& first_frame_prompts,
                          const std::map<int, std::map<int, Mask2D>>& refined_masks, const Model<float>& model);

}  // namespace pseg
