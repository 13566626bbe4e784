#pragma once

#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "pseg/model.hpp"
#include "pseg/tensor.hpp"
#include "pseg/volume.hpp"

namespace pseg {

struct AugmentConfig {
    double flip_probability = 0.5;
    double affine_probability = 0.5;
    double max_rotation_deg = 15.0;
    double min_scale = 0.9;
    double max_scale = 1.1;
    /// Fraction of the frame size.
    double max_translation = 0.05;
    double color_probability = 0.5;
    double brightness = 0.2;
    double contrast = 0.2;
    /// Single-channel frames are already grayscale, so this is a no-op kept
    /// for configuration parity.
    double grayscale_probability = 0.0;
    /// Video samples pick a temporal stride uniformly from this list.
    std::vector<int> temporal_strides{1, 2, 4};

    static AugmentConfig none();
};

struct TrainConfig {
    double lr_encoder = 3.0e-5;
    double lr_other = 5.0e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double focal_weight = 20.0;
    double dice_weight = 1.0;
    double iou_weight = 1.0;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double dice_smooth = 1.0;
    int epochs = 1;
    int batch_size = 1;
    /// Samples drawn per epoch; 0 means one per dataset item.
    int samples_per_epoch = 0;
    int frames_per_sample = 8;
    std::map<std::string, double> modality_sampling{{"ct", 1.0}, {"mri", 3.0}, {"pet", 40.0}, {"video", 40.0}};
    int box_jitter_min = 0;
    int box_jitter_max = 10;
    AugmentConfig augment;
    std::uint64_t seed = 0;

    void validate() const;
};

// ---------------------------------------------------------------------------
// losses

/// Mean focal loss over pixels; targets must be 0/1.
template <typename T>
ad::Tensor<T> focal_loss(ad::Graph<T>& g, const ad::Tensor<T>& logits, const std::vector<T>& target, T gamma = T(2),
                         T alpha = T(0.25));

/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps), p = sigmoid(logits).
template <typename T>
ad::Tensor<T> dice_loss(ad::Graph<T>& g, const ad::Tensor<T>& logits, const std::vector<T>& target, T smooth = T(1));

template <typename T>
struct LossTerms {
    ad::Tensor<T> total;
    double focal = 0.0;
    double dice = 0.0;
    double iou = 0.0;
};

/// focal_weight * focal + dice_weight * dice + iou_weight * (iou_estimate - IoU)^2,
/// where IoU compares the binarized logits with the target.
template <typename T>
LossTerms<T> total_loss(ad::Graph<T>& g, const ad::Tensor<T>& logits, const std::vector<T>& target,
                        const ad::Tensor<T>& iou_estimate, const TrainConfig& config);

/// IoU between (logits > 0) and a 0/1 target; 1 when both are empty.
template <typename T>
double binary_iou(std::span<const T> logits, const std::vector<T>& target);

// ---------------------------------------------------------------------------
// optimizer

/// AdamW with decoupled weight decay and one learning rate per parameter group.
template <typename T>
class AdamW {
public:
    AdamW(double lr_encoder, double lr_other, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
          double weight_decay = 0.01);
    static AdamW from(const TrainConfig& c) {
        return AdamW(c.lr_encoder, c.lr_other, c.beta1, c.beta2, c.eps, c.weight_decay);
    }

    /// Applies one update using the gradients stored on the parameters
    /// (missing gradient = zero). Throws naming the first non-finite gradient.
    void step(std::vector<NamedParam<T>>& params);
    long steps() const { return t_; }
    double lr(ParamGroup group) const { return group == ParamGroup::encoder ? lr_encoder_ : lr_other_; }

private:
    double lr_encoder_, lr_other_, beta1_, beta2_, eps_, wd_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// samples and augmentation

/// Tight box of the nonzero pixels, each edge moved outward by an independent
/// uniform integer in [jitter_min, jitter_max] (negative values move inward),
/// clamped to the frame. Throws on an empty mask.
BoundingBox2D simulate_box_prompt(const Mask2D& mask, int slice_index, std::mt19937_64& rng, int jitter_min = 0,
                                  int jitter_max = 10);

/// Consecutive frames with binary masks; frame 0 carries the prompt.
struct TrainSample {
    std::vector<Image2D> frames;
    std::vector<Mask2D> masks;
    std::string modality = "ct";
};

/// Frames 0, s, 2s, ... keeping floor(n / s) frames.
TrainSample temporal_subsample(const TrainSample& sample, int stride);

TrainSample augment(const TrainSample& sample, const AugmentConfig& config, std::mt19937_64& rng);

/// Training data item: a normalized volume and the label to segment.
struct TrainItem {
    VoxelGrid volume;
    LabelMask mask;
    int object_id = 1;
    std::string modality = "ct";
    bool is_video = false;
};

/// Up to `frames` consecutive slices inside the object's z-extent, starting at
/// a random slice and walking in a random direction.
TrainSample draw_sample(const TrainItem& item, int frames, std::mt19937_64& rng);

/// Draws item indices with probability proportional to the weight of each
/// item's modality.
class WeightedSampler {
public:
    WeightedSampler(const std::vector<std::string>& modalities, const std::map<std::string, double>& weights);
    int next(std::mt19937_64& rng);
    double probability(int item) const { return probs_.at(static_cast<std::size_t>(item)); }

private:
    std::vector<double> probs_;
    std::discrete_distribution<int> dist_;
};

// ---------------------------------------------------------------------------
// training loop

struct LossRecord {
    int epoch = 0;
    int step = 0;
    double focal = 0.0;
    double dice = 0.0;
    double total = 0.0;
};

std::string loss_log_csv(const std::vector<LossRecord>& log);

/// Forward + backward over one sample (prompted first frame, memory-conditioned
/// rest). Gradients accumulate on the model parameters. Returns summed terms.
template <typename T>
LossRecord accumulate_sample(Model<T>& model, const TrainSample& sample, const TrainConfig& config,
                             std::mt19937_64& rng);

using EpochCallback = std::function<void(int epoch, const std::vector<LossRecord>& log)>;

/// In-plane resample to size x size (cubic image clamped to [0, 255],
/// nearest-neighbour mask). Items already at that size are returned as is.
TrainItem fit_to_input(const TrainItem& item, int size);

/// Trains for config.epochs epochs; returns one record per optimizer step.
/// Items of another in-plane size go through fit_to_input first.
std::vector<LossRecord> train(Model<float>& model, const std::vector<TrainItem>& dataset, const TrainConfig& config,
                              const EpochCallback& on_epoch = {});

struct RoundSchedule {
    int round = 2;
    int epochs = 6;
    double lr_factor = 0.5;

    /// Round 2: 6 epochs, round 3: 15 epochs, both at half the base rate.
    static RoundSchedule for_round(int round);
};

/// Fine-tunes with the base rates scaled by schedule.lr_factor. When
/// checkpoint_dir is non-empty a checkpoint is written after every epoch.
std::vector<LossRecord> fine_tune(Model<float>& model, const std::vector<TrainItem>& dataset,
                                  const RoundSchedule& schedule, TrainConfig base,
                                  const std::string& checkpoint_dir = "");

// ---------------------------------------------------------------------------
// manifests and synthetic data

struct ManifestEntry {
    std::string volume_path;
    std::string mask_path;
    std::string modality;
    int object_id = 1;
};

/// JSON list of {volume_path, mask_path, modality, object_id}. Relative paths
/// resolve against the manifest's directory. Schema errors name path and line.
std::vector<ManifestEntry> read_manifest(const std::string& path);
std::string write_manifest(const std::vector<ManifestEntry>& entries);
std::vector<TrainItem> load_items(const std::vector<ManifestEntry>& entries);

enum class SyntheticShape { sphere, ellipsoid };

struct SyntheticConfig {
    Dims dims{64, 64, 24};
    Spacing spacing{1.0, 1.0, 1.0};
    SyntheticShape shape = SyntheticShape::ellipsoid;
    double min_radius = 7.0;
    double max_radius = 15.0;
    /// Radius along z in slices.
    double min_radius_z = 4.0;
    double max_radius_z = 8.0;
    double background = 50.0;
    double foreground = 180.0;
    double intensity_spread = 20.0;
    double noise_sigma = 10.0;
    /// Extra bright blobs that are not labeled.
    int distractors = 0;
};

struct SyntheticCase {
    VoxelGrid volume;  // normalized_0_255
    LabelMask mask;    // label 1
};

SyntheticCase make_synthetic_volume(const SyntheticConfig& config, std::mt19937_64& rng);

/// A 2D blob moving and deforming smoothly over `frames` frames (z = time).
SyntheticCase make_synthetic_video(int size, int frames, std::mt19937_64& rng, double noise_sigma = 10.0);

}  // namespace pseg
