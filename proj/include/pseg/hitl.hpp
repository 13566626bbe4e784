#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "pseg/model.hpp"
#include "pseg/volume.hpp"

namespace pseg {

enum class CaseStatus { pending, auto_segmented, revised, accepted };
const char* to_string(CaseStatus s) noexcept;
CaseStatus case_status_from_string(const std::string& name);

/// pending -> auto_segmented -> [revised]* -> accepted. Nothing is skipped.
bool legal_transition(CaseStatus from, CaseStatus to) noexcept;

struct TransitionEvent {
    int round_index = 0;
    std::string case_id;
    CaseStatus from = CaseStatus::pending;
    CaseStatus to = CaseStatus::pending;
    double timestamp = 0.0;
    std::string actor;

    std::string to_json() const;
    static TransitionEvent from_json(const std::string& line);
};

struct CaseRecord {
    std::string case_id;
    CaseStatus status = CaseStatus::pending;
    /// Wall-clock seconds between the first and the latest transition.
    double seconds = 0.0;
    int revision_count = 0;
    /// Set for empty drafts; acceptance then needs at least one revision.
    bool needs_revision = false;
    int frames = 0;
    std::string checkpoint_id;
    std::optional<BoundingBox2D> prompt;
    int prompt_slice = -1;
    double first_timestamp = -1.0;
};

using Clock = std::function<double()>;
/// Seconds since the epoch from the system clock.
double wall_clock();

/// One annotation round. Single writer per case; transitions are atomic and
/// appended to an in-memory event log (JSON lines) and an optional sink.
class AnnotationRound {
public:
    AnnotationRound(int round_index, std::vector<std::string> case_ids, std::string checkpoint_ref,
                    Clock clock = wall_clock);

    int round_index() const { return round_index_; }
    const std::string& checkpoint_ref() const { return checkpoint_ref_; }
    const std::vector<std::string>& case_ids() const { return case_ids_; }

    /// Throws state on an illegal transition or an unrevised flagged case.
    void transition(const std::string& case_id, CaseStatus to, const std::string& actor);
    void set_prompt(const std::string& case_id, const std::optional<BoundingBox2D>& box, int prompt_slice);
    void flag_for_revision(const std::string& case_id);
    void set_frames(const std::string& case_id, int frames);

    CaseRecord record(const std::string& case_id) const;
    CaseStatus status(const std::string& case_id) const { return record(case_id).status; }
    bool complete() const;
    std::vector<TransitionEvent> events() const;
    std::string event_log_jsonl() const;
    void set_event_sink(std::function<void(const TransitionEvent&)> sink) { sink_ = std::move(sink); }

    /// Rebuilds a round by replaying its event log; every event is re-checked.
    static AnnotationRound replay(int round_index, const std::vector<std::string>& case_ids,
                                  const std::string& checkpoint_ref, const std::string& jsonl);

private:
    CaseRecord& find(const std::string& case_id);
    const CaseRecord& find(const std::string& case_id) const;
    void apply(const TransitionEvent& e);

    int round_index_;
    std::vector<std::string> case_ids_;
    std::string checkpoint_ref_;
    Clock clock_;
    std::map<std::string, CaseRecord> cases_;
    std::vector<TransitionEvent> events_;
    std::function<void(const TransitionEvent&)> sink_;
    std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
};

/// Stand-in for the human annotator.
class RevisionOracle {
public:
    virtual ~RevisionOracle() = default;
    /// Revised 2D mask for the prompt slice, or nullopt to keep the draft.
    virtual std::optional<Mask2D> revise_slice(const std::string& case_id, int z, const Mask2D& draft) = 0;
    /// Start/end slices for propagation, or nullopt if the annotator sets none.
    virtual std::optional<SliceRange> choose_range(const std::string& case_id, const VoxelGrid& volume) = 0;
    /// Revised 3D mask, or nullopt to accept the draft as is.
    virtual std::optional<LabelMask> revise_volume(const std::string& case_id, const LabelMask& draft) = 0;
};

/// Accepts every draft unchanged; the range comes from a fixed table.
class PassThroughOracle : public RevisionOracle {
public:
    explicit PassThroughOracle(std::map<std::string, SliceRange> ranges) : ranges_(std::move(ranges)) {}
    std::optional<Mask2D> revise_slice(const std::string&, int, const Mask2D&) override { return std::nullopt; }
    std::optional<SliceRange> choose_range(const std::string& case_id, const VoxelGrid&) override;
    std::optional<LabelMask> revise_volume(const std::string&, const LabelMask&) override { return std::nullopt; }

private:
    std::map<std::string, SliceRange> ranges_;
};

/// Replaces drafts with the reference whenever they differ from it; the range
/// is the reference z-extent.
class GroundTruthOracle : public RevisionOracle {
public:
    explicit GroundTruthOracle(std::map<std::string, LabelMask> truth) : truth_(std::move(truth)) {}
    std::optional<Mask2D> revise_slice(const std::string& case_id, int z, const Mask2D& draft) override;
    std::optional<SliceRange> choose_range(const std::string& case_id, const VoxelGrid& volume) override;
    std::optional<LabelMask> revise_volume(const std::string& case_id, const LabelMask& draft) override;

private:
    const LabelMask& truth(const std::string& case_id) const;
    std::map<std::string, LabelMask> truth_;
};

struct HitlCase {
    std::string case_id;
    VoxelGrid volume;
    std::optional<BoundingBox2D> box;
};

struct CaseOutcome {
    Mask2D draft_slice;
    /// 3D mask from the model before any volume-level revision.
    LabelMask draft;
    /// Final mask; set once accepted.
    std::optional<LabelMask> accepted;
    SliceRange range;
};

/// Drafts, revises and accepts every case of `round` in order. Cases whose
/// mandatory revision never happens stay auto_segmented.
std::map<std::string, CaseOutcome> run_round(AnnotationRound& round, const std::vector<HitlCase>& cases,
                                             const Model<float>& model, RevisionOracle& oracle,
                                             const std::string& actor = "oracle");

struct HardCaseInput {
    std::string case_id;
    std::string group;
    VoxelGrid volume;
    BoundingBox3D box3d;
    std::map<int, BoundingBox2D> boxes2d;
};

struct DisagreementRecord {
    std::string case_id;
    std::string group;
    double dsc_between_modes = 0.0;
    bool selected = false;
};

struct MaskPair {
    std::string case_id;
    std::string group;
    LabelMask from_3d_box;
    LabelMask from_2d_boxes;
};

/// Marks the lowest-DSC case of every group (ties: smallest case id). Output is
/// sorted by (group, case id), so input order does not matter.
std::vector<DisagreementRecord> select_from_masks(const std::vector<MaskPair>& pairs);

/// 3D-box route (box on the middle slice of the box's z-extent, propagated over
/// that extent) versus independent per-slice boxes.
std::vector<DisagreementRecord> select_hard_cases(const std::vector<HardCaseInput>& cases,
                                                  const Model<float>& model);

struct ConcatEntry {
    int z_begin = 0;
    int nz = 0;
    Dims original_dims;
    Spacing original_spacing;
};

struct ConcatResult {
    VoxelGrid volume;
    LabelMask mask;
    std::vector<ConcatEntry> manifest;
};

/// Stacks crops along z. With target_size > 0 each crop is first resampled
/// in-plane to target_size^2 (cubic image, nearest-neighbour mask); with 0 all
/// crops must already share an in-plane size.
ConcatResult concat_lesions_axial(const std::vector<std::pair<VoxelGrid, LabelMask>>& crops, int target_size = 0);
std::vector<LabelMask> split_concat(const LabelMask& stacked, const std::vector<ConcatEntry>& manifest);
std::vector<VoxelGrid> split_concat(const VoxelGrid& stacked, const std::vector<ConcatEntry>& manifest);

struct RoundReportRow {
    int round_index = 0;
    int cases = 0;
    int frames = 0;
    double total_seconds = 0.0;
    double mean_seconds_per_case = 0.0;
    double mean_seconds_per_frame = 0.0;
    int cumulative_cases = 0;
    double cumulative_seconds = 0.0;
};

struct RoundReport {
    std::vector<RoundReportRow> rows;
    std::vector<std::string> warnings;

    std::string to_csv() const;
    std::string to_json() const;
};

/// Times and frame counts per case.
struct RoundTimes {
    int round_index = 0;
    std::vector<double> seconds;
    std::vector<int> frames;
};

RoundTimes round_times(const AnnotationRound& round);
/// Empty rounds are skipped with a warning.
RoundReport round_report(const std::vector<RoundTimes>& rounds);

}  // namespace pseg
