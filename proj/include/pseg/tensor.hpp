#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pseg/error.hpp"

namespace pseg::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::size_t numel(const Shape& shape);

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty means "no gradient"
    bool requires_grad = false;
};

/// Shared handle to a dense row-major array. Copies alias the same storage.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, T value);
    static Tensor from(Shape shape, std::vector<T> values);
    /// Leaf that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<T> values);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    /// Extent of axis `axis`; negative counts from the back.
    int dim(int axis) const;
    std::size_t numel() const { return impl_->value.size(); }

    std::span<const T> data() const { return impl_->value; }
    std::span<T> data() { return impl_->value; }
    const T& operator[](std::size_t i) const { return impl_->value[i]; }
    T item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> grad() { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }

    /// Value copy cut off from any graph.
    Tensor detach() const;

    const std::shared_ptr<TensorData<T>>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorData<T>> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorData<T>> impl_;

    template <typename>
    friend class Graph;
};

/// Records differentiable operations in creation (topological) order and
/// replays them in reverse on backward(). A graph built with record=false
/// computes values only.
///
/// Broadcasting is limited to a trailing-suffix operand (e.g. a bias of shape
/// [D] added to [N, D]); every other shape mismatch throws.
template <typename T>
class Graph {
public:
    explicit Graph(bool record = true) : record_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_; }
    std::size_t size() const { return tape_.size(); }

    // elementwise
    Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
    Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
    Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
    Tensor<T> scale(const Tensor<T>& a, T factor);
    Tensor<T> add_scalar(const Tensor<T>& a, T value);
    Tensor<T> sigmoid(const Tensor<T>& a);
    Tensor<T> gelu(const Tensor<T>& a);
    Tensor<T> relu(const Tensor<T>& a);

    // reductions
    Tensor<T> sum(const Tensor<T>& a);
    Tensor<T> mean(const Tensor<T>& a);

    // linear algebra
    /// a [..., K] x b [K, N]; or batched a [B, M, K] x b [B, K, N].
    Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
    /// x [..., in] * weight [in, out] (+ bias [out]).
    Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

    // normalization / attention
    Tensor<T> softmax(const Tensor<T>& a, int axis = -1);
    Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));
    /// softmax(q k^T / sqrt(d) + mask) v with q [B, Nq, d], k [B, Nk, d], v [B, Nk, dv].
    /// `mask` (optional) is an additive constant [Nq, Nk].
    Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                        const Tensor<T>& mask = {});

    // spatial
    /// Strided patch embedding of image [C, H, W] with weight [C*p*p, D] and
    /// bias [D] into tokens [Ho*Wo, D], Ho = (H - p) / stride + 1.
    Tensor<T> patch_embed(const Tensor<T>& image, const Tensor<T>& weight, const Tensor<T>& bias, int patch,
                          int stride);
    /// Bilinear upsampling of token grid x [h*w, C] by an integer factor,
    /// half-pixel centres with edge clamping.
    Tensor<T> bilinear_upsample(const Tensor<T>& x, int grid_h, int grid_w, int factor);
    /// 2x2 max pooling of token grid x [h*w, C] (h, w even).
    Tensor<T> maxpool2x2(const Tensor<T>& x, int grid_h, int grid_w);
    /// Rotary embedding over a 2D grid. x [..., N, d] with N a multiple of
    /// grid_h*grid_w (token i sits at cell i mod grid_h*grid_w) and d % 4 == 0.
    /// The first d/2 channels rotate by row, the last d/2 by column.
    Tensor<T> rope2d(const Tensor<T>& x, int grid_h, int grid_w, T base_theta = T(10000));

    // layout
    Tensor<T> reshape(const Tensor<T>& a, Shape shape);
    /// [A, B, C] -> [B, A, C]
    Tensor<T> transpose01(const Tensor<T>& a);
    /// rows of a 2D tensor picked by index (backward scatter-adds).
    Tensor<T> gather_rows(const Tensor<T>& a, std::vector<int> rows);
    Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);
    Tensor<T> slice_rows(const Tensor<T>& a, int start, int count);

    /// Registers an op whose forward the caller has already computed.
    /// `backward` receives the output gradient and must accumulate into the
    /// inputs through accumulate_grad().
    using BackwardFn = std::function<void(std::span<const T> out_grad)>;
    Tensor<T> custom(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs, BackwardFn backward);
    static std::span<T> accumulate_grad(const Tensor<T>& t);

    /// Reverse-mode sweep from a scalar loss. A graph can be consumed once.
    void backward(const Tensor<T>& loss);

private:
    bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) const;
    Tensor<T> make(Shape shape, std::vector<T> value, bool requires_grad) const;
    void record(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

    bool record_;
    bool consumed_ = false;
    std::vector<std::function<void()>> tape_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace pseg::ad
