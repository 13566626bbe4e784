#include "pseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "json.hpp"
#include "pseg/io.hpp"

namespace pseg {

using json = nlohmann::json;
using ad::Graph;
using ad::Shape;
using ad::Tensor;

// ---------------------------------------------------------------------------
// ModelConfig

int ModelConfig::num_layers() const {
    int n = 0;
    for (int b : stage_blocks) n += b;
    return n;
}

void ModelConfig::validate() const {
    auto bad = [](const std::string& what) { fail(ErrorKind::usage, "model config: " + what); };
    if (patch_size <= 0 || input_size <= 0) bad("input_size and patch_size must be positive");
    if (input_size % (patch_size * 8) != 0) {
        bad("input_size " + std::to_string(input_size) + " not divisible by patch_size * 8");
    }
    for (int b : stage_blocks) {
        if (b < 1) bad("every stage needs at least one block");
    }
    for (int d : stage_dims) {
        if (d <= 0 || d % num_heads != 0) bad("stage dims must be positive multiples of num_heads");
    }
    for (int l : global_attention_layers) {
        if (l < 0 || l >= num_layers()) bad("global attention layer " + std::to_string(l) + " out of range");
    }
    if (num_heads < 1 || model_dim % num_heads != 0 || (model_dim / num_heads) % 4 != 0) {
        bad("model_dim / num_heads must be a multiple of 4");
    }
    if (model_dim % 4 != 0) bad("model_dim must be a multiple of 4");
    if (memory_layers < 0) bad("memory_layers must be non-negative");
    if (memory_capacity < 1) bad("memory_capacity must be >= 1");
    if (decoder_output_stride != patch_size) bad("decoder_output_stride must equal patch_size");
    if (window_size < 1 || mlp_ratio < 1 || upscale_dims_8 < 1 || upscale_dims_4 < 1) bad("non-positive width");
}

namespace {

json config_json(const ModelConfig& c) {
    return json{{"input_size", c.input_size},
                {"patch_size", c.patch_size},
                {"stage_blocks", c.stage_blocks},
                {"global_attention_layers", c.global_attention_layers},
                {"stage_dims", c.stage_dims},
                {"model_dim", c.model_dim},
                {"memory_layers", c.memory_layers},
                {"memory_capacity", c.memory_capacity},
                {"decoder_output_stride", c.decoder_output_stride},
                {"num_heads", c.num_heads},
                {"window_size", c.window_size},
                {"mlp_ratio", c.mlp_ratio},
                {"upscale_dims_8", c.upscale_dims_8},
                {"upscale_dims_4", c.upscale_dims_4},
                {"rope_grid", {c.memory_grid(), c.memory_grid()}},
                {"seed", c.seed}};
}

ModelConfig config_from(const json& j) {
    ModelConfig c;
    try {
        c.input_size = j.at("input_size").get<int>();
        c.patch_size = j.at("patch_size").get<int>();
        c.stage_blocks = j.at("stage_blocks").get<std::array<int, 4>>();
        c.global_attention_layers = j.at("global_attention_layers").get<std::set<int>>();
        c.stage_dims = j.at("stage_dims").get<std::array<int, 4>>();
        c.model_dim = j.at("model_dim").get<int>();
        c.memory_layers = j.at("memory_layers").get<int>();
        c.memory_capacity = j.at("memory_capacity").get<int>();
        c.decoder_output_stride = j.at("decoder_output_stride").get<int>();
        c.num_heads = j.at("num_heads").get<int>();
        c.window_size = j.value("window_size", 4);
        c.mlp_ratio = j.value("mlp_ratio", 2);
        c.upscale_dims_8 = j.value("upscale_dims_8", 16);
        c.upscale_dims_4 = j.value("upscale_dims_4", 16);
        c.seed = j.value("seed", std::uint64_t{0});
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

}  // namespace

std::string ModelConfig::to_json() const { return config_json(*this).dump(); }

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("model config: ") + e.what());
    }
    return config_from(j);
}

const char* to_string(ParamGroup group) noexcept {
    return group == ParamGroup::encoder ? "encoder" : "other";
}

// ---------------------------------------------------------------------------
// MemoryBank

template <typename T>
MemoryBank<T>::MemoryBank(int capacity) : capacity_(capacity) {
    if (capacity < 1) fail(ErrorKind::usage, "memory bank capacity must be >= 1");
}

template <typename T>
void MemoryBank<T>::insert(MemoryEntry<T> entry) {
    const long seq = next_seq_++;
    if (entry.is_prompted && anchor_ < 0) anchor_ = seq;
    entries_.push_back(std::move(entry));
    seq_.push_back(seq);
    if (entries_.size() <= static_cast<std::size_t>(capacity_)) return;

    std::size_t victim = entries_.size();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (!entries_[i].is_prompted) {
            victim = i;
            break;
        }
    }
    if (victim == entries_.size()) {
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (seq_[i] != anchor_) {
                victim = i;
                break;
            }
        }
    }
    entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(victim));
    seq_.erase(seq_.begin() + static_cast<std::ptrdiff_t>(victim));
}

template <typename T>
void MemoryBank<T>::clear() {
    entries_.clear();
    seq_.clear();
    anchor_ = -1;
}

// ---------------------------------------------------------------------------
// layers

namespace {

template <typename T>
struct Lin {
    Tensor<T> w, b;
};
template <typename T>
struct Norm {
    Tensor<T> g, b;
};
template <typename T>
struct Attn {
    Lin<T> q, k, v, o;
};
template <typename T>
struct Mlp {
    Lin<T> fc1, fc2;
};
template <typename T>
struct EncBlock {
    Norm<T> n1;
    Attn<T> attn;
    Norm<T> n2;
    Mlp<T> mlp;
    int stage = 0;
    bool global = false;
};
template <typename T>
struct MemLayer {
    Norm<T> n1;
    Attn<T> self;
    Norm<T> n2;
    Attn<T> cross;
    Norm<T> n3;
    Mlp<T> mlp;
};

template <typename T>
class Builder {
public:
    Builder(std::vector<NamedParam<T>>& out, std::uint64_t seed) : out_(out), rng_(seed) {}

    Tensor<T> weight(const std::string& name, int in, int out, ParamGroup group) {
        const double limit = std::sqrt(6.0 / (in + out));
        std::uniform_real_distribution<double> u(-limit, limit);
        std::vector<T> v(static_cast<std::size_t>(in) * out);
        for (auto& x : v) x = static_cast<T>(u(rng_));
        return add(name, {in, out}, std::move(v), group);
    }
    Tensor<T> constant(const std::string& name, Shape shape, T value, ParamGroup group) {
        std::vector<T> v(ad::numel(shape), value);
        return add(name, std::move(shape), std::move(v), group);
    }
    Tensor<T> embedding(const std::string& name, Shape shape, ParamGroup group) {
        std::normal_distribution<double> n(0.0, 0.02);
        std::vector<T> v(ad::numel(shape));
        for (auto& x : v) x = static_cast<T>(n(rng_));
        return add(name, std::move(shape), std::move(v), group);
    }
    Lin<T> lin(const std::string& name, int in, int out, ParamGroup group, bool bias = true) {
        Lin<T> l;
        l.w = weight(name + ".w", in, out, group);
        if (bias) l.b = constant(name + ".b", {out}, T(0), group);
        return l;
    }
    Norm<T> norm(const std::string& name, int d, ParamGroup group) {
        return {constant(name + ".g", {d}, T(1), group), constant(name + ".b", {d}, T(0), group)};
    }
    Attn<T> attn(const std::string& name, int dq, int dkv, int inner, ParamGroup group) {
        return {lin(name + ".q", dq, inner, group), lin(name + ".k", dkv, inner, group),
                lin(name + ".v", dkv, inner, group), lin(name + ".o", inner, dq, group)};
    }
    Mlp<T> mlp(const std::string& name, int in, int hidden, int out, ParamGroup group) {
        return {lin(name + ".fc1", in, hidden, group), lin(name + ".fc2", hidden, out, group)};
    }

private:
    Tensor<T> add(const std::string& name, Shape shape, std::vector<T> v, ParamGroup group) {
        auto t = Tensor<T>::parameter(std::move(shape), std::move(v));
        out_.push_back({name, t, group});
        return t;
    }

    std::vector<NamedParam<T>>& out_;
    std::mt19937_64 rng_;
};

// Window-major order of a g x g token grid split into w x w windows.
std::vector<int> window_order(int g, int w) {
    std::vector<int> perm;
    perm.reserve(static_cast<std::size_t>(g) * g);
    for (int wy = 0; wy < g / w; ++wy) {
        for (int wx = 0; wx < g / w; ++wx) {
            for (int iy = 0; iy < w; ++iy) {
                for (int ix = 0; ix < w; ++ix) perm.push_back((wy * w + iy) * g + wx * w + ix);
            }
        }
    }
    return perm;
}

std::vector<int> inverse(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
    return inv;
}

// Fixed sinusoidal code of a normalized 2D position: the first d/2 channels
// encode u, the rest v, each as sin/cos pairs over geometric frequencies.
template <typename T>
void sinusoid(double u, double v, int d, double max_freq, T* out) {
    const int k = d / 4;
    for (int i = 0; i < k; ++i) {
        const double f = 2.0 * std::numbers::pi * std::pow(max_freq, k > 1 ? static_cast<double>(i) / (k - 1) : 0.0);
        out[2 * i] = static_cast<T>(std::sin(f * u));
        out[2 * i + 1] = static_cast<T>(std::cos(f * u));
        out[d / 2 + 2 * i] = static_cast<T>(std::sin(f * v));
        out[d / 2 + 2 * i + 1] = static_cast<T>(std::cos(f * v));
    }
}

}  // namespace

template <typename T>
struct Model<T>::Layers {
    Lin<T> patch;
    Tensor<T> pos;
    std::vector<EncBlock<T>> blocks;
    std::array<Lin<T>, 3> down;
    std::array<Lin<T>, 4> lateral;
    std::array<std::vector<int>, 4> window_perm, window_inv;

    std::vector<MemLayer<T>> memory;
    Tensor<T> type_prompted, type_unprompted;

    Tensor<T> corner, point, no_prompt;

    Tensor<T> output_tokens;
    Attn<T> tok_self, t2i, i2t, final_t2i;
    Norm<T> dn1, dn2, dn3, dn4, dn5;
    Mlp<T> dmlp;
    Lin<T> up8, skip8, up4, skip4;
    Norm<T> un8;
    Mlp<T> hyper, iou_head;
    Tensor<T> image_pe;  // constant, [mg^2, D]

    Lin<T> mask_embed, feat_proj;
    Mlp<T> mem_proj;
};

template <typename T>
Model<T>::Model(ModelConfig config) : config_(std::move(config)), layers_(std::make_shared<Layers>()) {
    config_.validate();
    const auto& c = config_;
    auto& L = *layers_;
    Builder<T> b(params_, c.seed);
    const auto enc = ParamGroup::encoder;
    const auto oth = ParamGroup::other;
    const int D = c.model_dim;

    const int g0 = c.stage_grid(0);
    L.patch = b.lin("encoder.patch", c.patch_size * c.patch_size, c.stage_dims[0], enc);
    L.pos = b.embedding("encoder.pos", {g0 * g0, c.stage_dims[0]}, enc);
    int layer = 0;
    for (int s = 0; s < 4; ++s) {
        const int d = c.stage_dims[s];
        for (int i = 0; i < c.stage_blocks[s]; ++i, ++layer) {
            const std::string n = "encoder.layer" + std::to_string(layer);
            EncBlock<T> blk;
            blk.n1 = b.norm(n + ".norm1", d, enc);
            blk.attn = b.attn(n + ".attn", d, d, d, enc);
            blk.n2 = b.norm(n + ".norm2", d, enc);
            blk.mlp = b.mlp(n + ".mlp", d, d * c.mlp_ratio, d, enc);
            blk.stage = s;
            blk.global = c.global_attention_layers.count(layer) > 0;
            L.blocks.push_back(std::move(blk));
        }
        if (s < 3) L.down[s] = b.lin("encoder.down" + std::to_string(s), d, c.stage_dims[s + 1], enc);
        const int g = c.stage_grid(s);
        const int w = std::min(c.window_size, g);
        if (g % w == 0 && w < g) {
            L.window_perm[s] = window_order(g, w);
            L.window_inv[s] = inverse(L.window_perm[s]);
        }
    }
    for (int s = 0; s < 4; ++s) L.lateral[s] = b.lin("neck.lateral" + std::to_string(s), c.stage_dims[s], D, enc);

    for (int i = 0; i < c.memory_layers; ++i) {
        const std::string n = "memory_attention.layer" + std::to_string(i);
        MemLayer<T> m;
        m.n1 = b.norm(n + ".norm1", D, oth);
        m.self = b.attn(n + ".self", D, D, D, oth);
        m.n2 = b.norm(n + ".norm2", D, oth);
        m.cross = b.attn(n + ".cross", D, D, D, oth);
        m.n3 = b.norm(n + ".norm3", D, oth);
        m.mlp = b.mlp(n + ".mlp", D, D * c.mlp_ratio, D, oth);
        L.memory.push_back(std::move(m));
    }
    L.type_prompted = b.embedding("memory_attention.type_prompted", {D}, oth);
    L.type_unprompted = b.embedding("memory_attention.type_unprompted", {D}, oth);

    L.corner = b.embedding("prompt.corner", {2, D}, oth);
    L.point = b.embedding("prompt.point", {2, D}, oth);
    L.no_prompt = b.embedding("prompt.none", {1, D}, oth);

    L.output_tokens = b.embedding("decoder.output_tokens", {2, D}, oth);
    L.tok_self = b.attn("decoder.token_self", D, D, D, oth);
    L.dn1 = b.norm("decoder.norm1", D, oth);
    L.t2i = b.attn("decoder.token_to_image", D, D, D, oth);
    L.dn2 = b.norm("decoder.norm2", D, oth);
    L.dmlp = b.mlp("decoder.mlp", D, D * c.mlp_ratio, D, oth);
    L.dn3 = b.norm("decoder.norm3", D, oth);
    L.i2t = b.attn("decoder.image_to_token", D, D, D, oth);
    L.dn4 = b.norm("decoder.norm4", D, oth);
    L.final_t2i = b.attn("decoder.final_token_to_image", D, D, D, oth);
    L.dn5 = b.norm("decoder.norm5", D, oth);
    L.up8 = b.lin("decoder.up8", D, c.upscale_dims_8, oth);
    L.skip8 = b.lin("decoder.skip8", D, c.upscale_dims_8, oth, false);
    L.un8 = b.norm("decoder.up8_norm", c.upscale_dims_8, oth);
    L.up4 = b.lin("decoder.up4", c.upscale_dims_8, c.upscale_dims_4, oth);
    L.skip4 = b.lin("decoder.skip4", D, c.upscale_dims_4, oth, false);
    L.hyper = b.mlp("decoder.hyper", D, D, c.upscale_dims_4, oth);
    L.iou_head = b.mlp("decoder.iou_head", D, D, 1, oth);

    const int r = c.low_res_size() / c.memory_grid();
    L.mask_embed = b.lin("memory_encoder.mask_embed", r * r, D, oth);
    L.feat_proj = b.lin("memory_encoder.feature_proj", D, D, oth);
    L.mem_proj = b.mlp("memory_encoder.proj", D, D, D, oth);

    const int mg = c.memory_grid();
    std::vector<T> pe(static_cast<std::size_t>(mg) * mg * D);
    for (int y = 0; y < mg; ++y) {
        for (int x = 0; x < mg; ++x) {
            sinusoid((x + 0.5) / mg, (y + 0.5) / mg, D, c.input_size / 4.0,
                     pe.data() + static_cast<std::size_t>(y * mg + x) * D);
        }
    }
    L.image_pe = Tensor<T>::from({mg * mg, D}, std::move(pe));
}

template <typename T>
Model<T> Model<T>::clone() const {
    Model<T> copy(config_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto src = params_[i].tensor.data();
        std::copy(src.begin(), src.end(), copy.params_[i].tensor.data().begin());
    }
    copy.checkpoint_id_ = checkpoint_id_;
    return copy;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

template <typename T>
std::size_t Model<T>::parameter_count(ParamGroup group) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (p.group == group) n += p.tensor.numel();
    }
    return n;
}

template <typename T>
void Model<T>::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

namespace {

template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Lin<T>& l) {
    return g.linear(x, l.w, l.b);
}

template <typename T>
Tensor<T> layernorm(Graph<T>& g, const Tensor<T>& x, const Norm<T>& n) {
    return g.layernorm(x, n.g, n.b);
}

template <typename T>
Tensor<T> mlp(Graph<T>& g, const Tensor<T>& x, const Mlp<T>& m) {
    return linear(g, g.gelu(linear(g, x, m.fc1)), m.fc2);
}

// [N, H*dh] -> [H, N, dh]
template <typename T>
Tensor<T> split_heads(Graph<T>& g, const Tensor<T>& x, int heads) {
    const int n = x.dim(0), d = x.dim(1);
    return g.transpose01(g.reshape(x, {n, heads, d / heads}));
}

// [H, N, dh] -> [N, H*dh]
template <typename T>
Tensor<T> merge_heads(Graph<T>& g, const Tensor<T>& x) {
    const int h = x.dim(0), n = x.dim(1), dh = x.dim(2);
    return g.reshape(g.transpose01(x), {n, h * dh});
}

struct Rope {
    int grid = 0;  // 0 disables
};

// Multi-head attention. Rows of xq / xk are split into `groups` equal
// contiguous blocks that attend only within themselves.
template <typename T>
Tensor<T> mha(Graph<T>& g, const Attn<T>& p, const Tensor<T>& xq, const Tensor<T>& xk, const Tensor<T>& xv, int heads,
              Rope rq = {}, Rope rk = {}, int groups = 1) {
    auto q = split_heads(g, linear(g, xq, p.q), heads);
    auto k = split_heads(g, linear(g, xk, p.k), heads);
    auto v = split_heads(g, linear(g, xv, p.v), heads);
    if (rq.grid) q = g.rope2d(q, rq.grid, rq.grid);
    if (rk.grid) k = g.rope2d(k, rk.grid, rk.grid);
    const int nq = q.dim(1), nk = k.dim(1), dh = q.dim(2);
    if (groups > 1) {
        q = g.reshape(q, {heads * groups, nq / groups, dh});
        k = g.reshape(k, {heads * groups, nk / groups, dh});
        v = g.reshape(v, {heads * groups, nk / groups, dh});
    }
    auto o = g.attention(q, k, v);
    if (groups > 1) o = g.reshape(o, {heads, nq, dh});
    return linear(g, merge_heads(g, o), p.o);
}

}  // namespace

template <typename T>
ImageFeatures<T> Model<T>::encode_image(Graph<T>& g, const Image2D& frame) const {
    const auto& c = config_;
    const auto& L = *layers_;
    if (frame.nx != c.input_size || frame.ny != c.input_size) {
        fail(ErrorKind::shape, "encode_image: frame " + std::to_string(frame.nx) + "x" + std::to_string(frame.ny) +
                                   " but model input is " + std::to_string(c.input_size) + "^2");
    }
    std::vector<T> px(frame.values.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<T>((frame.values[i] / 255.0 - 0.5) / 0.5);
    auto image = Tensor<T>::from({1, c.input_size, c.input_size}, std::move(px));

    ImageFeatures<T> f;
    for (int s = 0; s < 4; ++s) f.grid[s] = c.stage_grid(s);
    auto x = g.add(g.patch_embed(image, L.patch.w, L.patch.b, c.patch_size, c.patch_size), L.pos);
    std::size_t bi = 0;
    for (int s = 0; s < 4; ++s) {
        const int grid = f.grid[s];
        const int w = std::min(c.window_size, grid);
        for (int i = 0; i < c.stage_blocks[s]; ++i, ++bi) {
            const auto& blk = L.blocks[bi];
            auto h = layernorm(g, x, blk.n1);
            Tensor<T> a;
            if (blk.global || L.window_perm[s].empty()) {
                a = mha(g, blk.attn, h, h, h, c.num_heads);
            } else {
                auto hp = g.gather_rows(h, L.window_perm[s]);
                a = mha(g, blk.attn, hp, hp, hp, c.num_heads, {}, {}, (grid / w) * (grid / w));
                a = g.gather_rows(a, L.window_inv[s]);
            }
            x = g.add(x, a);
            x = g.add(x, mlp(g, layernorm(g, x, blk.n2), blk.mlp));
        }
        f.stages[s] = x;
        if (s < 3) x = g.maxpool2x2(linear(g, x, L.down[s]), grid, grid);
    }
    f.fpn[3] = linear(g, f.stages[3], L.lateral[3]);
    for (int s = 2; s >= 0; --s) {
        f.fpn[s] = g.add(linear(g, f.stages[s], L.lateral[s]),
                         g.bilinear_upsample(f.fpn[s + 1], f.grid[s + 1], f.grid[s + 1], 2));
    }
    return f;
}

template <typename T>
Tensor<T> Model<T>::encode_prompt(Graph<T>& g, const Prompt& prompt) const {
    const auto& c = config_;
    const auto& L = *layers_;
    const int D = c.model_dim;
    const double S = c.input_size;
    if (prompt.empty()) return g.add(L.no_prompt, Tensor<T>::zeros({1, D}));

    std::vector<std::array<double, 2>> coords;
    std::vector<int> kinds;  // rows into corner (0,1) or point (2,3)
    if (prompt.box) {
        const auto& b = *prompt.box;
        if (b.x_min < 0 || b.y_min < 0 || b.x_max > c.input_size || b.y_max > c.input_size || b.x_min >= b.x_max ||
            b.y_min >= b.y_max) {
            fail(ErrorKind::range, "encode_prompt: box outside the " + std::to_string(c.input_size) + "^2 frame");
        }
        coords.push_back({b.x_min / S, b.y_min / S});
        coords.push_back({b.x_max / S, b.y_max / S});
        kinds.push_back(0);
        kinds.push_back(1);
    }
    for (const auto& p : prompt.points) {
        if (p.x < 0 || p.y < 0 || p.x >= S || p.y >= S) fail(ErrorKind::range, "encode_prompt: point outside frame");
        coords.push_back({(p.x + 0.5) / S, (p.y + 0.5) / S});
        kinds.push_back(p.positive ? 2 : 3);
    }
    const int k = static_cast<int>(coords.size());
    std::vector<T> pe(static_cast<std::size_t>(k) * D);
    for (int i = 0; i < k; ++i) sinusoid(coords[i][0], coords[i][1], D, S / 4.0, pe.data() + static_cast<std::size_t>(i) * D);
    auto table = g.concat_rows({L.corner, L.point});
    return g.add(g.gather_rows(table, kinds), Tensor<T>::from({k, D}, std::move(pe)));
}

template <typename T>
Tensor<T> Model<T>::attend_memory(Graph<T>& g, const Tensor<T>& features, const MemoryBank<T>& bank) const {
    const auto& c = config_;
    const auto& L = *layers_;
    const int mg = c.memory_grid();
    if (features.rank() != 2 || features.dim(0) != mg * mg || features.dim(1) != c.model_dim) {
        fail(ErrorKind::shape, "attend_memory: features " + ad::shape_str(features.shape()) + " do not match the " +
                                   std::to_string(mg) + "x" + std::to_string(mg) + " memory grid");
    }
    Tensor<T> memory;
    if (!bank.empty()) {
        std::vector<Tensor<T>> parts;
        for (const auto& e : bank.entries()) {
            if (e.features.shape() != features.shape()) fail(ErrorKind::shape, "attend_memory: bank entry grid mismatch");
            parts.push_back(g.add(e.features, e.is_prompted ? L.type_prompted : L.type_unprompted));
        }
        memory = parts.size() == 1 ? parts[0] : g.concat_rows(parts);
    }
    auto x = features;
    for (const auto& m : L.memory) {
        auto h = layernorm(g, x, m.n1);
        x = g.add(x, mha(g, m.self, h, h, h, c.num_heads, {mg}, {mg}));
        if (memory.defined()) {
            h = layernorm(g, x, m.n2);
            x = g.add(x, mha(g, m.cross, h, memory, memory, c.num_heads, {mg}, {mg}));
        }
        x = g.add(x, mlp(g, layernorm(g, x, m.n3), m.mlp));
    }
    return x;
}

template <typename T>
DecoderOutput<T> Model<T>::decode_mask(Graph<T>& g, const Tensor<T>& conditioned, const Tensor<T>& prompt_tokens,
                                       const ImageFeatures<T>& features) const {
    const auto& c = config_;
    const auto& L = *layers_;
    const int mg = c.memory_grid(), D = c.model_dim, H = c.num_heads;
    if (conditioned.rank() != 2 || conditioned.dim(0) != mg * mg || conditioned.dim(1) != D ||
        prompt_tokens.rank() != 2 || prompt_tokens.dim(1) != D) {
        fail(ErrorKind::shape, "decode_mask: features " + ad::shape_str(conditioned.shape()) + " prompts " +
                                   ad::shape_str(prompt_tokens.shape()));
    }
    auto tokens = g.concat_rows({L.output_tokens, prompt_tokens});
    const auto& tpe = tokens;
    auto src = conditioned;
    auto src_pe = g.add(src, L.image_pe);

    auto q = layernorm(g, g.add(tokens, mha(g, L.tok_self, tokens, tokens, tokens, H)), L.dn1);
    q = layernorm(g, g.add(q, mha(g, L.t2i, g.add(q, tpe), src_pe, src, H)), L.dn2);
    q = layernorm(g, g.add(q, mlp(g, q, L.dmlp)), L.dn3);
    auto qk = g.add(q, tpe);
    src = layernorm(g, g.add(src, mha(g, L.i2t, src_pe, qk, q, H)), L.dn4);
    src_pe = g.add(src, L.image_pe);
    q = layernorm(g, g.add(q, mha(g, L.final_t2i, g.add(q, tpe), src_pe, src, H)), L.dn5);

    auto iou_tok = g.slice_rows(q, 0, 1);
    auto mask_tok = g.slice_rows(q, 1, 1);

    auto u8 = g.add(linear(g, g.bilinear_upsample(src, mg, mg, 2), L.up8), g.linear(features.fpn[1], L.skip8.w, {}));
    u8 = g.gelu(layernorm(g, u8, L.un8));
    auto u4 = g.add(linear(g, g.bilinear_upsample(u8, 2 * mg, 2 * mg, 2), L.up4),
                    g.linear(features.fpn[0], L.skip4.w, {}));
    u4 = g.gelu(u4);

    const int lr = c.low_res_size();
    auto hyper = g.reshape(mlp(g, mask_tok, L.hyper), {c.upscale_dims_4, 1});
    auto low = g.matmul(u4, hyper);  // [lr*lr, 1]
    DecoderOutput<T> out;
    out.low_res_logits = g.reshape(low, {lr * lr});
    out.logits = g.reshape(g.bilinear_upsample(low, lr, lr, c.decoder_output_stride), {c.input_size, c.input_size});
    out.iou = g.reshape(g.sigmoid(mlp(g, iou_tok, L.iou_head)), {1});
    return out;
}

template <typename T>
MemoryEntry<T> Model<T>::encode_memory(Graph<T>& g, const ImageFeatures<T>& features,
                                       const Tensor<T>& low_res_logits, int frame_index, bool is_prompted) const {
    const auto& c = config_;
    const auto& L = *layers_;
    const int lr = c.low_res_size();
    if (low_res_logits.numel() != static_cast<std::size_t>(lr) * lr) {
        fail(ErrorKind::shape, "encode_memory: logits " + ad::shape_str(low_res_logits.shape()));
    }
    auto probs = g.reshape(g.sigmoid(low_res_logits), {1, lr, lr});
    const int r = lr / c.memory_grid();
    auto m = g.patch_embed(probs, L.mask_embed.w, L.mask_embed.b, r, r);
    auto h = g.add(m, linear(g, features.fpn[2], L.feat_proj));
    return {frame_index, mlp(g, h, L.mem_proj), is_prompted};
}

template <typename T>
MemoryEntry<T> Model<T>::encode_memory(Graph<T>& g, const ImageFeatures<T>& features, const Mask2D& mask,
                                       int frame_index) const {
    const auto& c = config_;
    const auto& L = *layers_;
    if (mask.nx != c.input_size || mask.ny != c.input_size) fail(ErrorKind::shape, "encode_memory: mask size");
    const int lr = c.low_res_size(), f = c.decoder_output_stride;
    std::vector<T> pooled(static_cast<std::size_t>(lr) * lr, T(0));
    for (int y = 0; y < c.input_size; ++y) {
        for (int x = 0; x < c.input_size; ++x) {
            if (mask.at(x, y)) pooled[static_cast<std::size_t>(y / f) * lr + x / f] += T(1);
        }
    }
    for (auto& p : pooled) p /= static_cast<T>(f * f);
    auto probs = Tensor<T>::from({1, lr, lr}, std::move(pooled));
    const int r = lr / c.memory_grid();
    auto m = g.patch_embed(probs, L.mask_embed.w, L.mask_embed.b, r, r);
    auto h = g.add(m, linear(g, features.fpn[2], L.feat_proj));
    return {frame_index, mlp(g, h, L.mem_proj), true};
}

template <typename T>
FrameOutput<T> Model<T>::forward_frame(Graph<T>& g, const Image2D& frame, const MemoryBank<T>& bank,
                                       const Prompt* prompt, int frame_index) const {
    const bool prompted = prompt != nullptr && !prompt->empty();
    if (!prompted && bank.empty()) fail(ErrorKind::usage, "forward_frame: unprompted frame with an empty memory bank");
    auto features = encode_image(g, frame);
    auto tokens = encode_prompt(g, prompted ? *prompt : Prompt{});
    auto conditioned = attend_memory(g, features.fpn[2], bank);
    FrameOutput<T> out;
    out.decoded = decode_mask(g, conditioned, tokens, features);
    out.entry = encode_memory(g, features, out.decoded.low_res_logits, frame_index, prompted);
    return out;
}

template class MemoryBank<float>;
template class MemoryBank<double>;
template class Model<float>;
template class Model<double>;

// ---------------------------------------------------------------------------
// checkpoints

std::string parameter_digest(const Model<float>& model) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (const auto& p : model.params()) {
        for (float v : p.tensor.data()) {
            std::uint8_t b[4];
            std::memcpy(b, &v, 4);
            for (auto x : b) {
                h ^= x;
                h *= 1099511628211ULL;
            }
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::vector<std::uint8_t> encode_checkpoint(const Model<float>& model) {
    json params = json::array();
    std::size_t total = 0;
    for (const auto& p : model.params()) {
        params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"group", to_string(p.group)}});
        total += p.tensor.numel();
    }
    json manifest{{"format", "promptseg-checkpoint"},
                  {"version", 1},
                  {"checkpoint_id", model.checkpoint_id()},
                  {"config", config_json(model.config())},
                  {"params", params}};
    const std::string head = manifest.dump() + "\n";
    std::vector<std::uint8_t> out(head.begin(), head.end());
    const std::size_t off = out.size();
    out.resize(off + total * 4);
    std::size_t pos = off;
    for (const auto& p : model.params()) {
        std::memcpy(out.data() + pos, p.tensor.data().data(), p.tensor.numel() * 4);
        pos += p.tensor.numel() * 4;
    }
    return out;
}

Model<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t('\n'));
    if (nl == bytes.end()) fail(ErrorKind::format, "checkpoint: missing manifest line");
    json manifest;
    try {
        manifest = json::parse(bytes.begin(), nl);
    } catch (const json::exception& e) {
        fail(ErrorKind::format, std::string("checkpoint manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "promptseg-checkpoint") fail(ErrorKind::format, "checkpoint: wrong format tag");
    Model<float> model(config_from(manifest.at("config")));
    const auto& params = manifest.at("params");
    if (params.size() != model.params().size()) {
        fail(ErrorKind::format, "checkpoint: parameter count does not match the config");
    }
    std::size_t pos = static_cast<std::size_t>(nl - bytes.begin()) + 1;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = model.params()[i];
        if (params[i].at("name").get<std::string>() != p.name || params[i].at("shape").get<Shape>() != p.tensor.shape()) {
            fail(ErrorKind::format, "checkpoint: parameter " + std::to_string(i) + " (" +
                                        params[i].at("name").get<std::string>() + ") does not match " + p.name);
        }
        const std::size_t n = p.tensor.numel() * 4;
        if (pos + n > bytes.size()) fail(ErrorKind::truncated, "checkpoint: payload truncated at " + p.name);
        std::memcpy(p.tensor.data().data(), bytes.data() + pos, n);
        pos += n;
    }
    if (pos != bytes.size()) fail(ErrorKind::format, "checkpoint: trailing bytes after payload");
    model.set_checkpoint_id(manifest.value("checkpoint_id", parameter_digest(model)));
    return model;
}

void save_checkpoint(const std::string& path, Model<float>& model) {
    model.set_checkpoint_id(parameter_digest(model));
    write_file(path, encode_checkpoint(model));
}

Model<float> load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace pseg
