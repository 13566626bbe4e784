#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pseg/tensor.hpp"
#include "pseg/volume.hpp"

namespace pseg {

struct ModelConfig {
    int input_size = 64;
    int patch_size = 4;
    std::array<int, 4> stage_blocks{1, 1, 2, 1};
    /// Flat (0-based) encoder layer indices that use global attention.
    std::set<int> global_attention_layers{2, 3};
    std::array<int, 4> stage_dims{16, 32, 64, 64};
    /// Width of the FPN outputs, memory attention, prompts and decoder.
    int model_dim = 32;
    int memory_layers = 2;
    int memory_capacity = 8;
    int decoder_output_stride = 4;
    int num_heads = 2;
    int window_size = 4;
    int mlp_ratio = 2;
    /// Channels of the stride-8 / stride-4 decoder upsampling path.
    int upscale_dims_8 = 16;
    int upscale_dims_4 = 16;
    std::uint64_t seed = 0;

    int num_layers() const;
    /// Token grid side of encoder stage s (0..3).
    int stage_grid(int s) const { return input_size / (patch_size << s); }
    /// Memory attention operates on the stride-16 level.
    int memory_grid() const { return stage_grid(2); }
    /// Side of the decoder logits before the final upsampling.
    int low_res_size() const { return input_size / decoder_output_stride; }

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { encoder, other };
const char* to_string(ParamGroup group) noexcept;

template <typename T>
struct NamedParam {
    std::string name;
    ad::Tensor<T> tensor;
    ParamGroup group = ParamGroup::other;
};

struct PointPrompt {
    double x = 0.0;
    double y = 0.0;
    bool positive = true;
};

/// A box and/or points on one frame. Coordinates are in pixels of the
/// model input frame.
struct Prompt {
    std::optional<BoundingBox2D> box;
    std::vector<PointPrompt> points;

    bool empty() const { return !box && points.empty(); }
};

template <typename T>
struct ImageFeatures {
    /// Encoder output per stage, tokens [g*g, stage_dim], strides 4, 8, 16, 32.
    std::array<ad::Tensor<T>, 4> stages;
    /// FPN outputs [g*g, model_dim] at the same strides.
    std::array<ad::Tensor<T>, 4> fpn;
    std::array<int, 4> grid{};
};

template <typename T>
struct MemoryEntry {
    int frame_index = 0;
    /// [memory_grid^2, model_dim]
    ad::Tensor<T> features;
    bool is_prompted = false;
};

/// Bounded memory of past frames. Insertion evicts the oldest unprompted entry
/// when over capacity; when every entry is prompted, the oldest prompted entry
/// other than the first one ever inserted (the anchor) goes instead.
template <typename T>
class MemoryBank {
public:
    explicit MemoryBank(int capacity = 8);

    int capacity() const { return capacity_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::deque<MemoryEntry<T>>& entries() const { return entries_; }

    void insert(MemoryEntry<T> entry);
    void clear();

private:
    int capacity_;
    std::deque<MemoryEntry<T>> entries_;
    // sequence number of the anchor entry, -1 when none
    long anchor_ = -1;
    long next_seq_ = 0;
    std::deque<long> seq_;
};

template <typename T>
struct DecoderOutput {
    /// [input_size, input_size], mask = logits > 0
    ad::Tensor<T> logits;
    /// [low_res^2] logits before the final upsampling
    ad::Tensor<T> low_res_logits;
    /// [1] in [0, 1]
    ad::Tensor<T> iou;
};

template <typename T>
struct FrameOutput {
    DecoderOutput<T> decoded;
    MemoryEntry<T> entry;
};

template <typename T>
class Model {
public:
    explicit Model(ModelConfig config);
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    /// Deep copy with independent parameter storage.
    Model clone() const;

    const ModelConfig& config() const { return config_; }
    std::vector<NamedParam<T>>& params() { return params_; }
    const std::vector<NamedParam<T>>& params() const { return params_; }
    std::size_t parameter_count() const;
    std::size_t parameter_count(ParamGroup group) const;
    void zero_grad();

    /// Identifier recorded in provenance; set by checkpoint load/save.
    const std::string& checkpoint_id() const { return checkpoint_id_; }
    void set_checkpoint_id(std::string id) { checkpoint_id_ = std::move(id); }

    /// Frame intensities are expected on the 0..255 scale.
    ImageFeatures<T> encode_image(ad::Graph<T>& g, const Image2D& frame) const;
    /// Prompt tokens [k, model_dim]; an empty prompt yields the no-prompt token.
    ad::Tensor<T> encode_prompt(ad::Graph<T>& g, const Prompt& prompt) const;
    ad::Tensor<T> attend_memory(ad::Graph<T>& g, const ad::Tensor<T>& features, const MemoryBank<T>& bank) const;
    DecoderOutput<T> decode_mask(ad::Graph<T>& g, const ad::Tensor<T>& conditioned, const ad::Tensor<T>& prompt_tokens,
                                 const ImageFeatures<T>& features) const;
    MemoryEntry<T> encode_memory(ad::Graph<T>& g, const ImageFeatures<T>& features,
                                 const ad::Tensor<T>& low_res_logits, int frame_index, bool is_prompted) const;
    /// Memory entry for a supplied (refined) mask; always prompted.
    MemoryEntry<T> encode_memory(ad::Graph<T>& g, const ImageFeatures<T>& features, const Mask2D& mask,
                                 int frame_index) const;

    /// encode_image -> attend_memory -> decode_mask -> encode_memory. Without a
    /// prompt the bank must be non-empty. The caller inserts the entry.
    FrameOutput<T> forward_frame(ad::Graph<T>& g, const Image2D& frame, const MemoryBank<T>& bank,
                                 const Prompt* prompt, int frame_index) const;

    struct Layers;

private:
    ModelConfig config_;
    std::vector<NamedParam<T>> params_;
    std::shared_ptr<Layers> layers_;
    std::string checkpoint_id_ = "untrained";
};

/// Binarization rule for decoder logits: foreground where logit > 0.
template <typename T>
Mask2D binarize(std::span<const T> logits, int nx, int ny) {
    Mask2D m(nx, ny);
    for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = logits[i] > T(0) ? 1 : 0;
    return m;
}

// Checkpoint layout: one line of JSON manifest (config, parameter names,
// shapes and groups, checkpoint_id) terminated by '\n', then every parameter
// as raw little-endian float32 in manifest order.
std::vector<std::uint8_t> encode_checkpoint(const Model<float>& model);
Model<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const std::string& path, Model<float>& model);
Model<float> load_checkpoint(const std::string& path);

/// Content hash of the parameter payload (hex).
std::string parameter_digest(const Model<float>& model);

extern template class MemoryBank<float>;
extern template class MemoryBank<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace pseg
