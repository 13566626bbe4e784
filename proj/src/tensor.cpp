#include "pseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace pseg::ad {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
    fail(ErrorKind::shape, std::string(op) + ": " + detail);
}

void check_shape(const Shape& shape) {
    for (int d : shape) {
        if (d <= 0) fail(ErrorKind::shape, "tensor extents must be positive, got " + shape_str(shape));
    }
}

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int M, int K, int N, const T* A, const T* B, T* C) {
    for (int m = 0; m < M; ++m) {
        T* c = C + static_cast<std::size_t>(m) * N;
        const T* a = A + static_cast<std::size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + static_cast<std::size_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int M, int K, int N, const T* A, const T* B, T* C) {
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<std::size_t>(k) * M;
        const T* b = B + static_cast<std::size_t>(k) * N;
        for (int m = 0; m < M; ++m) {
            const T av = a[m];
            T* c = C + static_cast<std::size_t>(m) * N;
            for (int n = 0; n < N; ++n) c[n] += av * b[n];
        }
    }
}

template <typename T>
std::vector<T> transposed(int rows, int cols, const T* A) {
    std::vector<T> out(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(c) * rows + r] = A[static_cast<std::size_t>(r) * cols + c];
    }
    return out;
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(int M, int K, int N, const T* A, const T* B, T* C) {
    auto bt = transposed(N, K, B);
    gemm_nn(M, K, N, A, bt.data(), C);
}

// Rotates consecutive channel pairs of each row by the per-cell angle table;
// sign = -1 applies the inverse rotation.
template <typename T>
void rotate_pairs(const T* in, T* out, std::size_t rows, int tokens, int cells, int pairs, const T* cs, const T* sn,
                  T sign) {
    const int d = 4 * pairs;
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t cell = (r % static_cast<std::size_t>(tokens)) % static_cast<std::size_t>(cells);
        const T* c = cs + cell * 2 * pairs;
        const T* s = sn + cell * 2 * pairs;
        for (int p = 0; p < 2 * pairs; ++p) {
            const std::size_t i = r * d + 2 * p;
            const T a = in[i], b = in[i + 1];
            out[i] = a * c[p] - sign * b * s[p];
            out[i + 1] = sign * a * s[p] + b * c[p];
        }
    }
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
    return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    check_shape(shape);
    auto impl = std::make_shared<TensorData<T>>();
    impl->value.assign(ad::numel(shape), value);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
    check_shape(shape);
    if (values.size() != ad::numel(shape)) {
        fail(ErrorKind::shape, "tensor of shape " + shape_str(shape) + " given " + std::to_string(values.size()) +
                                   " values");
    }
    auto impl = std::make_shared<TensorData<T>>();
    impl->shape = std::move(shape);
    impl->value = std::move(values);
    return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
    auto t = from(std::move(shape), std::move(values));
    t.impl_->requires_grad = true;
    return t;
}

template <typename T>
int Tensor<T>::dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) fail(ErrorKind::shape, "axis out of range for shape " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
    if (numel() != 1) fail(ErrorKind::shape, "item() on tensor of shape " + shape_str(shape()));
    return impl_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    auto impl = std::make_shared<TensorData<T>>();
    impl->shape = impl_->shape;
    impl->value = impl_->value;
    return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Graph plumbing

template <typename T>
bool Graph<T>::any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!record_) return false;
    for (const auto* t : inputs) {
        if (t->defined() && t->requires_grad()) return true;
    }
    return false;
}

template <typename T>
Tensor<T> Graph<T>::make(Shape shape, std::vector<T> value, bool requires_grad) const {
    auto impl = std::make_shared<TensorData<T>>();
    impl->shape = std::move(shape);
    impl->value = std::move(value);
    impl->requires_grad = requires_grad;
    return Tensor<T>(std::move(impl));
}

template <typename T>
std::span<T> Graph<T>::accumulate_grad(const Tensor<T>& t) {
    auto& g = t.impl()->grad;
    if (g.empty()) g.assign(t.impl()->value.size(), T(0));
    return g;
}

namespace {

template <typename T>
std::span<T> gbuf(const std::shared_ptr<TensorData<T>>& t) {
    if (t->grad.empty()) t->grad.assign(t->value.size(), T(0));
    return t->grad;
}

}  // namespace

template <typename T>
void Graph<T>::backward(const Tensor<T>& loss) {
    if (consumed_) fail(ErrorKind::state, "backward: graph already consumed");
    if (!record_) fail(ErrorKind::state, "backward: graph was built without recording");
    if (loss.numel() != 1) fail(ErrorKind::shape, "backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) fail(ErrorKind::usage, "backward: loss does not depend on any parameter");
    consumed_ = true;
    gbuf(loss.impl())[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    tape_.clear();
}

template <typename T>
Tensor<T> Graph<T>::custom(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                           BackwardFn backward) {
    check_shape(shape);
    if (value.size() != ad::numel(shape)) shape_error("custom", "value size does not match " + shape_str(shape));
    bool rg = false;
    if (record_) {
        for (const auto& t : inputs) rg = rg || (t.defined() && t.requires_grad());
    }
    auto out = make(std::move(shape), std::move(value), rg);
    if (rg) {
        auto o = out.impl();
        record([o, fn = std::move(backward)] {
            if (!o->grad.empty()) fn(o->grad);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> Graph<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!is_suffix(b.shape(), a.shape())) shape_error("add", shape_str(a.shape()) + " + " + shape_str(b.shape()));
    const std::size_t n = a.numel(), m = b.numel();
    std::vector<T> v(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < n; ++i) v[i] += b[i % m];
    const bool rg = any_requires_grad({&a, &b});
    auto out = make(a.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl(), bi = b.impl(), n, m] {
            if (o->grad.empty()) return;
            if (ai->requires_grad) {
                auto g = gbuf(ai);
                for (std::size_t i = 0; i < n; ++i) g[i] += o->grad[i];
            }
            if (bi->requires_grad) {
                auto g = gbuf(bi);
                for (std::size_t i = 0; i < n; ++i) g[i % m] += o->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (!is_suffix(b.shape(), a.shape())) shape_error("sub", shape_str(a.shape()) + " - " + shape_str(b.shape()));
    const std::size_t n = a.numel(), m = b.numel();
    std::vector<T> v(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < n; ++i) v[i] -= b[i % m];
    const bool rg = any_requires_grad({&a, &b});
    auto out = make(a.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl(), bi = b.impl(), n, m] {
            if (o->grad.empty()) return;
            if (ai->requires_grad) {
                auto g = gbuf(ai);
                for (std::size_t i = 0; i < n; ++i) g[i] += o->grad[i];
            }
            if (bi->requires_grad) {
                auto g = gbuf(bi);
                for (std::size_t i = 0; i < n; ++i) g[i % m] -= o->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (!is_suffix(b.shape(), a.shape())) shape_error("mul", shape_str(a.shape()) + " * " + shape_str(b.shape()));
    const std::size_t n = a.numel(), m = b.numel();
    std::vector<T> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = a[i] * b[i % m];
    const bool rg = any_requires_grad({&a, &b});
    auto out = make(a.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl(), bi = b.impl(), n, m] {
            if (o->grad.empty()) return;
            if (ai->requires_grad) {
                auto g = gbuf(ai);
                for (std::size_t i = 0; i < n; ++i) g[i] += o->grad[i] * bi->value[i % m];
            }
            if (bi->requires_grad) {
                auto g = gbuf(bi);
                for (std::size_t i = 0; i < n; ++i) g[i % m] += o->grad[i] * ai->value[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::scale(const Tensor<T>& a, T factor) {
    std::vector<T> v(a.data().begin(), a.data().end());
    for (auto& x : v) x *= factor;
    const bool rg = any_requires_grad({&a});
    auto out = make(a.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl(), factor] {
            if (o->grad.empty()) return;
            auto g = gbuf(ai);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i] * factor;
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::add_scalar(const Tensor<T>& a, T value) {
    std::vector<T> v(a.data().begin(), a.data().end());
    for (auto& x : v) x += value;
    const bool rg = any_requires_grad({&a});
    auto out = make(a.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl()] {
            if (o->grad.empty()) return;
            auto g = gbuf(ai);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::sigmoid(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const T x = a[i];
        if (x >= 0) {
            v[i] = T(1) / (T(1) + std::exp(-x));
        } else {
            const T e = std::exp(x);
            v[i] = e / (T(1) + e);
        }
    }
    const bool rg = any_requires_grad({&a});
    auto out = make(a.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl()] {
            if (o->grad.empty()) return;
            auto g = gbuf(ai);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T s = o->value[i];
                g[i] += o->grad[i] * s * (T(1) - s);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::gelu(const Tensor<T>& a) {
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const T x = a[i];
        v[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }
    const bool rg = any_requires_grad({&a});
    auto out = make(a.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl(), inv_sqrt2] {
            if (o->grad.empty()) return;
            const T inv_sqrt2pi = T(0.3989422804014327);
            auto g = gbuf(ai);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const T x = ai->value[i];
                const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
                g[i] += o->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::relu(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] > 0 ? a[i] : T(0);
    const bool rg = any_requires_grad({&a});
    auto out = make(a.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl()] {
            if (o->grad.empty()) return;
            auto g = gbuf(ai);
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (ai->value[i] > 0) g[i] += o->grad[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> Graph<T>::sum(const Tensor<T>& a) {
    T acc = 0;
    for (T x : a.data()) acc += x;
    const bool rg = any_requires_grad({&a});
    auto out = make({}, {acc}, rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl()] {
            if (o->grad.empty()) return;
            auto g = gbuf(ai);
            for (auto& x : g) x += o->grad[0];
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Tensor<T> Graph<T>::matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (b.rank() == 2) return linear(a, b, {});
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        shape_error("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    const std::size_t sa = static_cast<std::size_t>(M) * K, sb = static_cast<std::size_t>(K) * N,
                      sc = static_cast<std::size_t>(M) * N;
    std::vector<T> v(static_cast<std::size_t>(B) * sc, T(0));
    for (int i = 0; i < B; ++i) gemm_nn(M, K, N, a.data().data() + i * sa, b.data().data() + i * sb, v.data() + i * sc);
    const bool rg = any_requires_grad({&a, &b});
    auto out = make({B, M, N}, std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl(), bi = b.impl(), B, M, K, N, sa, sb, sc] {
            if (o->grad.empty()) return;
            for (int i = 0; i < B; ++i) {
                const T* go = o->grad.data() + i * sc;
                if (ai->requires_grad) gemm_nt(M, N, K, go, bi->value.data() + i * sb, gbuf(ai).data() + i * sa);
                if (bi->requires_grad) gemm_tn(K, M, N, ai->value.data() + i * sa, go, gbuf(bi).data() + i * sb);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (weight.rank() != 2 || x.dim(-1) != weight.dim(0)) {
        shape_error("linear", "input " + shape_str(x.shape()) + " with weight " + shape_str(weight.shape()));
    }
    const int in = weight.dim(0), outd = weight.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd)) {
        shape_error("linear", "bias " + shape_str(bias.shape()) + " for output width " + std::to_string(outd));
    }
    const int rows = static_cast<int>(x.numel() / static_cast<std::size_t>(in));
    std::vector<T> v(static_cast<std::size_t>(rows) * outd, T(0));
    if (bias.defined()) {
        for (int r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), v.begin() + static_cast<std::ptrdiff_t>(r) * outd);
    }
    gemm_nn(rows, in, outd, x.data().data(), weight.data().data(), v.data());
    Shape shape = x.shape();
    shape.back() = outd;
    const bool rg = any_requires_grad({&x, &weight, &bias});
    auto out = make(std::move(shape), std::move(v), rg);
    if (rg) {
        std::shared_ptr<TensorData<T>> bi = bias.defined() ? bias.impl() : nullptr;
        record([o = out.impl(), xi = x.impl(), wi = weight.impl(), bi, rows, in, outd] {
            if (o->grad.empty()) return;
            const T* go = o->grad.data();
            if (xi->requires_grad) gemm_nt(rows, outd, in, go, wi->value.data(), gbuf(xi).data());
            if (wi->requires_grad) gemm_tn(in, rows, outd, xi->value.data(), go, gbuf(wi).data());
            if (bi && bi->requires_grad) {
                auto g = gbuf(bi);
                for (int r = 0; r < rows; ++r) {
                    for (int c = 0; c < outd; ++c) g[c] += go[static_cast<std::size_t>(r) * outd + c];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / layernorm / attention

template <typename T>
Tensor<T> Graph<T>::softmax(const Tensor<T>& a, int axis) {
    const int r = a.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) shape_error("softmax", "axis out of range for " + shape_str(a.shape()));
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.dim(i));
    for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(a.dim(i));
    const auto len = static_cast<std::size_t>(a.dim(axis));
    std::vector<T> v(a.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = a[base];
            for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, a[base + k * inner]);
            T total = 0;
            for (std::size_t k = 0; k < len; ++k) {
                const T e = std::exp(a[base + k * inner] - mx);
                v[base + k * inner] = e;
                total += e;
            }
            for (std::size_t k = 0; k < len; ++k) v[base + k * inner] /= total;
        }
    }
    const bool rg = any_requires_grad({&a});
    auto out = make(a.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl(), outer, inner, len] {
            if (o->grad.empty()) return;
            auto g = gbuf(ai);
            for (std::size_t ou = 0; ou < outer; ++ou) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = ou * len * inner + in;
                    T dot = 0;
                    for (std::size_t k = 0; k < len; ++k) dot += o->grad[base + k * inner] * o->value[base + k * inner];
                    for (std::size_t k = 0; k < len; ++k) {
                        const std::size_t i = base + k * inner;
                        g[i] += o->value[i] * (o->grad[i] - dot);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    const int D = x.dim(-1);
    if (gamma.numel() != static_cast<std::size_t>(D) || beta.numel() != static_cast<std::size_t>(D)) {
        shape_error("layernorm", "input " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                                     " beta " + shape_str(beta.shape()));
    }
    const std::size_t rows = x.numel() / static_cast<std::size_t>(D);
    std::vector<T> v(x.numel()), xhat(x.numel()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.data().data() + r * D;
        T mu = 0;
        for (int i = 0; i < D; ++i) mu += xr[i];
        mu /= static_cast<T>(D);
        T var = 0;
        for (int i = 0; i < D; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<T>(D);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (int i = 0; i < D; ++i) {
            const std::size_t k = r * D + i;
            xhat[k] = (xr[i] - mu) * rstd[r];
            v[k] = xhat[k] * gamma[i] + beta[i];
        }
    }
    const bool rg = any_requires_grad({&x, &gamma, &beta});
    auto out = make(x.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat = std::move(xhat),
                rstd = std::move(rstd), rows, D] {
            if (o->grad.empty()) return;
            const T* go = o->grad.data();
            if (gi->requires_grad) {
                auto gg = gbuf(gi);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (int i = 0; i < D; ++i) gg[i] += go[r * D + i] * xhat[r * D + i];
                }
            }
            if (bi->requires_grad) {
                auto gb = gbuf(bi);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (int i = 0; i < D; ++i) gb[i] += go[r * D + i];
                }
            }
            if (xi->requires_grad) {
                auto gx = gbuf(xi);
                for (std::size_t r = 0; r < rows; ++r) {
                    T m1 = 0, m2 = 0;
                    for (int i = 0; i < D; ++i) {
                        const T dxh = go[r * D + i] * gi->value[i];
                        m1 += dxh;
                        m2 += dxh * xhat[r * D + i];
                    }
                    m1 /= static_cast<T>(D);
                    m2 /= static_cast<T>(D);
                    for (int i = 0; i < D; ++i) {
                        const T dxh = go[r * D + i] * gi->value[i];
                        gx[r * D + i] += rstd[r] * (dxh - m1 - xhat[r * D + i] * m2);
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& mask) {
    if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || q.dim(0) != k.dim(0) || k.dim(0) != v.dim(0) ||
        q.dim(2) != k.dim(2) || k.dim(1) != v.dim(1)) {
        shape_error("attention", "q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
                                     shape_str(v.shape()));
    }
    const int B = q.dim(0), Nq = q.dim(1), Nk = k.dim(1), d = q.dim(2), dv = v.dim(2);
    if (mask.defined() && (mask.rank() != 2 || mask.dim(0) != Nq || mask.dim(1) != Nk)) {
        shape_error("attention", "mask " + shape_str(mask.shape()) + " for scores [" + std::to_string(Nq) + "," +
                                     std::to_string(Nk) + "]");
    }
    const T inv = T(1) / std::sqrt(static_cast<T>(d));
    const std::size_t sq = static_cast<std::size_t>(Nq) * d, sk = static_cast<std::size_t>(Nk) * d,
                      sv = static_cast<std::size_t>(Nk) * dv, so = static_cast<std::size_t>(Nq) * dv,
                      sp = static_cast<std::size_t>(Nq) * Nk;
    std::vector<T> probs(static_cast<std::size_t>(B) * sp, T(0));
    std::vector<T> outv(static_cast<std::size_t>(B) * so, T(0));
    for (int b = 0; b < B; ++b) {
        T* p = probs.data() + b * sp;
        gemm_nt(Nq, d, Nk, q.data().data() + b * sq, k.data().data() + b * sk, p);
        for (int i = 0; i < Nq; ++i) {
            T* row = p + static_cast<std::size_t>(i) * Nk;
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j < Nk; ++j) {
                row[j] *= inv;
                if (mask.defined()) row[j] += mask[static_cast<std::size_t>(i) * Nk + j];
                mx = std::max(mx, row[j]);
            }
            T total = 0;
            for (int j = 0; j < Nk; ++j) {
                row[j] = std::exp(row[j] - mx);
                total += row[j];
            }
            for (int j = 0; j < Nk; ++j) row[j] /= total;
        }
        gemm_nn(Nq, Nk, dv, p, v.data().data() + b * sv, outv.data() + b * so);
    }
    const bool rg = any_requires_grad({&q, &k, &v});
    auto out = make({B, Nq, dv}, std::move(outv), rg);
    if (rg) {
        record([o = out.impl(), qi = q.impl(), ki = k.impl(), vi = v.impl(), probs = std::move(probs), B, Nq, Nk, d,
                dv, inv, sq, sk, sv, so, sp] {
            if (o->grad.empty()) return;
            std::vector<T> dp(sp);
            for (int b = 0; b < B; ++b) {
                const T* p = probs.data() + b * sp;
                const T* go = o->grad.data() + b * so;
                if (vi->requires_grad) gemm_tn(Nk, Nq, dv, p, go, gbuf(vi).data() + b * sv);
                if (!qi->requires_grad && !ki->requires_grad) continue;
                std::fill(dp.begin(), dp.end(), T(0));
                gemm_nt(Nq, dv, Nk, go, vi->value.data() + b * sv, dp.data());
                for (int i = 0; i < Nq; ++i) {
                    T* drow = dp.data() + static_cast<std::size_t>(i) * Nk;
                    const T* prow = p + static_cast<std::size_t>(i) * Nk;
                    T dot = 0;
                    for (int j = 0; j < Nk; ++j) dot += drow[j] * prow[j];
                    for (int j = 0; j < Nk; ++j) drow[j] = prow[j] * (drow[j] - dot) * inv;
                }
                if (qi->requires_grad) gemm_nn(Nq, Nk, d, dp.data(), ki->value.data() + b * sk, gbuf(qi).data() + b * sq);
                if (ki->requires_grad) gemm_tn(Nk, Nq, d, dp.data(), qi->value.data() + b * sq, gbuf(ki).data() + b * sk);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// spatial

template <typename T>
Tensor<T> Graph<T>::patch_embed(const Tensor<T>& image, const Tensor<T>& weight, const Tensor<T>& bias, int patch,
                                int stride) {
    if (image.rank() != 3 || patch <= 0 || stride <= 0) {
        shape_error("patch_embed", "image " + shape_str(image.shape()) + " patch " + std::to_string(patch) +
                                       " stride " + std::to_string(stride));
    }
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    const int K = C * patch * patch;
    if (H < patch || W < patch || weight.rank() != 2 || weight.dim(0) != K) {
        shape_error("patch_embed", "image " + shape_str(image.shape()) + " weight " + shape_str(weight.shape()) +
                                       " patch " + std::to_string(patch));
    }
    const int Ho = (H - patch) / stride + 1, Wo = (W - patch) / stride + 1;
    // im2col index table: col[t*K + j] = flat image index
    std::vector<std::size_t> src(static_cast<std::size_t>(Ho) * Wo * K);
    std::vector<T> col(src.size());
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            const std::size_t t = static_cast<std::size_t>(oy) * Wo + ox;
            for (int c = 0; c < C; ++c) {
                for (int py = 0; py < patch; ++py) {
                    for (int px = 0; px < patch; ++px) {
                        const std::size_t j = (static_cast<std::size_t>(c) * patch + py) * patch + px;
                        const std::size_t s =
                            (static_cast<std::size_t>(c) * H + oy * stride + py) * W + ox * stride + px;
                        src[t * K + j] = s;
                        col[t * K + j] = image[s];
                    }
                }
            }
        }
    }
    const int D = weight.dim(1);
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != D)) {
        shape_error("patch_embed", "bias " + shape_str(bias.shape()) + " for width " + std::to_string(D));
    }
    const int T_ = Ho * Wo;
    std::vector<T> v(static_cast<std::size_t>(T_) * D, T(0));
    if (bias.defined()) {
        for (int t = 0; t < T_; ++t) std::copy(bias.data().begin(), bias.data().end(), v.begin() + static_cast<std::ptrdiff_t>(t) * D);
    }
    gemm_nn(T_, K, D, col.data(), weight.data().data(), v.data());
    const bool rg = any_requires_grad({&image, &weight, &bias});
    auto out = make({T_, D}, std::move(v), rg);
    if (rg) {
        std::shared_ptr<TensorData<T>> bi = bias.defined() ? bias.impl() : nullptr;
        record([o = out.impl(), ii = image.impl(), wi = weight.impl(), bi, src = std::move(src), col = std::move(col),
                T_, K, D] {
            if (o->grad.empty()) return;
            const T* go = o->grad.data();
            if (wi->requires_grad) gemm_tn(K, T_, D, col.data(), go, gbuf(wi).data());
            if (bi && bi->requires_grad) {
                auto g = gbuf(bi);
                for (int t = 0; t < T_; ++t) {
                    for (int c = 0; c < D; ++c) g[c] += go[static_cast<std::size_t>(t) * D + c];
                }
            }
            if (ii->requires_grad) {
                std::vector<T> dcol(src.size(), T(0));
                gemm_nt(T_, D, K, go, wi->value.data(), dcol.data());
                auto g = gbuf(ii);
                for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += dcol[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::bilinear_upsample(const Tensor<T>& x, int grid_h, int grid_w, int factor) {
    if (factor < 1 || x.rank() != 2 || x.dim(0) != grid_h * grid_w) {
        shape_error("bilinear_upsample", "input " + shape_str(x.shape()) + " grid " + std::to_string(grid_h) + "x" +
                                             std::to_string(grid_w) + " factor " + std::to_string(factor));
    }
    const int C = x.dim(1), H = grid_h * factor, W = grid_w * factor;
    struct Tap {
        int i0, i1;
        T w;
    };
    auto taps = [factor](int n_out, int n_in) {
        std::vector<Tap> t(static_cast<std::size_t>(n_out));
        for (int o = 0; o < n_out; ++o) {
            T s = (static_cast<T>(o) + T(0.5)) / static_cast<T>(factor) - T(0.5);
            s = std::clamp(s, T(0), static_cast<T>(n_in - 1));
            const int i0 = static_cast<int>(std::floor(s));
            const int i1 = std::min(i0 + 1, n_in - 1);
            t[o] = {i0, i1, s - static_cast<T>(i0)};
        }
        return t;
    };
    auto ty = taps(H, grid_h);
    auto tx = taps(W, grid_w);
    std::vector<T> v(static_cast<std::size_t>(H) * W * C, T(0));
    const T* xs = x.data().data();
    for (int oy = 0; oy < H; ++oy) {
        const auto& a = ty[oy];
        for (int ox = 0; ox < W; ++ox) {
            const auto& b = tx[ox];
            const T w00 = (T(1) - a.w) * (T(1) - b.w), w01 = (T(1) - a.w) * b.w, w10 = a.w * (T(1) - b.w),
                    w11 = a.w * b.w;
            const T* p00 = xs + (static_cast<std::size_t>(a.i0) * grid_w + b.i0) * C;
            const T* p01 = xs + (static_cast<std::size_t>(a.i0) * grid_w + b.i1) * C;
            const T* p10 = xs + (static_cast<std::size_t>(a.i1) * grid_w + b.i0) * C;
            const T* p11 = xs + (static_cast<std::size_t>(a.i1) * grid_w + b.i1) * C;
            T* o = v.data() + (static_cast<std::size_t>(oy) * W + ox) * C;
            for (int c = 0; c < C; ++c) o[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
        }
    }
    const bool rg = any_requires_grad({&x});
    auto out = make({H * W, C}, std::move(v), rg);
    if (rg) {
        record([o = out.impl(), xi = x.impl(), ty = std::move(ty), tx = std::move(tx), H, W, C, grid_w] {
            if (o->grad.empty()) return;
            auto g = gbuf(xi);
            for (int oy = 0; oy < H; ++oy) {
                const auto& a = ty[oy];
                for (int ox = 0; ox < W; ++ox) {
                    const auto& b = tx[ox];
                    const T w00 = (T(1) - a.w) * (T(1) - b.w), w01 = (T(1) - a.w) * b.w, w10 = a.w * (T(1) - b.w),
                            w11 = a.w * b.w;
                    const T* go = o->grad.data() + (static_cast<std::size_t>(oy) * W + ox) * C;
                    T* g00 = g.data() + (static_cast<std::size_t>(a.i0) * grid_w + b.i0) * C;
                    T* g01 = g.data() + (static_cast<std::size_t>(a.i0) * grid_w + b.i1) * C;
                    T* g10 = g.data() + (static_cast<std::size_t>(a.i1) * grid_w + b.i0) * C;
                    T* g11 = g.data() + (static_cast<std::size_t>(a.i1) * grid_w + b.i1) * C;
                    for (int c = 0; c < C; ++c) {
                        g00[c] += w00 * go[c];
                        g01[c] += w01 * go[c];
                        g10[c] += w10 * go[c];
                        g11[c] += w11 * go[c];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::maxpool2x2(const Tensor<T>& x, int grid_h, int grid_w) {
    if (x.rank() != 2 || x.dim(0) != grid_h * grid_w || grid_h % 2 != 0 || grid_w % 2 != 0) {
        shape_error("maxpool2x2", "input " + shape_str(x.shape()) + " grid " + std::to_string(grid_h) + "x" +
                                      std::to_string(grid_w));
    }
    const int C = x.dim(1), Ho = grid_h / 2, Wo = grid_w / 2;
    std::vector<T> v(static_cast<std::size_t>(Ho) * Wo * C);
    std::vector<std::size_t> arg(v.size());
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            for (int c = 0; c < C; ++c) {
                std::size_t best = (static_cast<std::size_t>(2 * oy) * grid_w + 2 * ox) * C + c;
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::size_t s = (static_cast<std::size_t>(2 * oy + dy) * grid_w + 2 * ox + dx) * C + c;
                        if (x[s] > x[best]) best = s;
                    }
                }
                const std::size_t o = (static_cast<std::size_t>(oy) * Wo + ox) * C + c;
                v[o] = x[best];
                arg[o] = best;
            }
        }
    }
    const bool rg = any_requires_grad({&x});
    auto out = make({Ho * Wo, C}, std::move(v), rg);
    if (rg) {
        record([o = out.impl(), xi = x.impl(), arg = std::move(arg)] {
            if (o->grad.empty()) return;
            auto g = gbuf(xi);
            for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += o->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::rope2d(const Tensor<T>& x, int grid_h, int grid_w, T base_theta) {
    if (x.rank() < 2) shape_error("rope2d", "input " + shape_str(x.shape()) + " needs [..., N, d]");
    const int N = x.dim(-2), d = x.dim(-1);
    const int cells = grid_h * grid_w;
    if (d % 4 != 0) fail(ErrorKind::shape, "rope2d: head dim " + std::to_string(d) + " not divisible by 4");
    if (cells <= 0 || N % cells != 0) {
        shape_error("rope2d", "token count " + std::to_string(N) + " is not a multiple of grid " +
                                  std::to_string(grid_h) + "x" + std::to_string(grid_w));
    }
    const int pairs = d / 4;
    // per-cell cos/sin: [cells, 2*pairs]; first `pairs` by row, next `pairs` by column
    std::vector<T> cs(static_cast<std::size_t>(cells) * 2 * pairs), sn(cs.size());
    for (int cell = 0; cell < cells; ++cell) {
        const T row = static_cast<T>(cell / grid_w), col = static_cast<T>(cell % grid_w);
        for (int j = 0; j < pairs; ++j) {
            const T freq = std::pow(base_theta, -T(4) * static_cast<T>(j) / static_cast<T>(d));
            const std::size_t b = static_cast<std::size_t>(cell) * 2 * pairs;
            cs[b + j] = std::cos(row * freq);
            sn[b + j] = std::sin(row * freq);
            cs[b + pairs + j] = std::cos(col * freq);
            sn[b + pairs + j] = std::sin(col * freq);
        }
    }
    const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
    std::vector<T> v(x.numel());
    rotate_pairs(x.data().data(), v.data(), rows, N, cells, pairs, cs.data(), sn.data(), T(1));
    const bool rg = any_requires_grad({&x});
    auto out = make(x.shape(), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), xi = x.impl(), cs = std::move(cs), sn = std::move(sn), rows, N, cells, pairs] {
            if (o->grad.empty()) return;
            std::vector<T> back(o->grad.size());
            rotate_pairs(o->grad.data(), back.data(), rows, N, cells, pairs, cs.data(), sn.data(), T(-1));
            auto g = gbuf(xi);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += back[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layout

template <typename T>
Tensor<T> Graph<T>::reshape(const Tensor<T>& a, Shape shape) {
    check_shape(shape);
    if (ad::numel(shape) != a.numel()) shape_error("reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<T> v(a.data().begin(), a.data().end());
    const bool rg = any_requires_grad({&a});
    auto out = make(std::move(shape), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl()] {
            if (o->grad.empty()) return;
            auto g = gbuf(ai);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::transpose01(const Tensor<T>& a) {
    if (a.rank() != 3) shape_error("transpose01", "expects rank 3, got " + shape_str(a.shape()));
    const int A = a.dim(0), B = a.dim(1), C = a.dim(2);
    std::vector<T> v(a.numel());
    for (int i = 0; i < A; ++i) {
        for (int j = 0; j < B; ++j) {
            std::copy_n(a.data().data() + (static_cast<std::size_t>(i) * B + j) * C, C,
                        v.data() + (static_cast<std::size_t>(j) * A + i) * C);
        }
    }
    const bool rg = any_requires_grad({&a});
    auto out = make({B, A, C}, std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl(), A, B, C] {
            if (o->grad.empty()) return;
            auto g = gbuf(ai);
            for (int i = 0; i < A; ++i) {
                for (int j = 0; j < B; ++j) {
                    const T* src = o->grad.data() + (static_cast<std::size_t>(j) * A + i) * C;
                    T* dst = g.data() + (static_cast<std::size_t>(i) * B + j) * C;
                    for (int c = 0; c < C; ++c) dst[c] += src[c];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::gather_rows(const Tensor<T>& a, std::vector<int> rows) {
    if (a.rank() < 1 || rows.empty()) shape_error("gather_rows", "input " + shape_str(a.shape()));
    const int n = a.dim(0);
    const std::size_t width = a.numel() / static_cast<std::size_t>(n);
    std::vector<T> v(rows.size() * width);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= n) fail(ErrorKind::range, "gather_rows: row index out of range");
        std::copy_n(a.data().data() + static_cast<std::size_t>(rows[r]) * width, width, v.data() + r * width);
    }
    Shape shape = a.shape();
    shape[0] = static_cast<int>(rows.size());
    const bool rg = any_requires_grad({&a});
    auto out = make(std::move(shape), std::move(v), rg);
    if (rg) {
        record([o = out.impl(), ai = a.impl(), rows = std::move(rows), width] {
            if (o->grad.empty()) return;
            auto g = gbuf(ai);
            for (std::size_t r = 0; r < rows.size(); ++r) {
                const T* src = o->grad.data() + r * width;
                T* dst = g.data() + static_cast<std::size_t>(rows[r]) * width;
                for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) shape_error("concat_rows", "no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        Shape t(p.shape().begin() + 1, p.shape().end());
        if (t != tail) shape_error("concat_rows", shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total += p.dim(0);
        rg = rg || (record_ && p.requires_grad());
    }
    std::vector<T> v;
    v.reserve(numel(tail) * static_cast<std::size_t>(total));
    for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
    Shape shape = parts[0].shape();
    shape[0] = total;
    auto out = make(std::move(shape), std::move(v), rg);
    if (rg) {
        std::vector<std::shared_ptr<TensorData<T>>> ins;
        for (const auto& p : parts) ins.push_back(p.impl());
        record([o = out.impl(), ins = std::move(ins)] {
            if (o->grad.empty()) return;
            std::size_t off = 0;
            for (const auto& in : ins) {
                if (in->requires_grad) {
                    auto g = gbuf(in);
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[off + i];
                }
                off += in->value.size();
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> Graph<T>::slice_rows(const Tensor<T>& a, int start, int count) {
    if (a.rank() < 1 || start < 0 || count <= 0 || start + count > a.dim(0)) {
        shape_error("slice_rows", "rows [" + std::to_string(start) + "," + std::to_string(start + count) + ") of " +
                                      shape_str(a.shape()));
    }
    std::vector<int> rows(static_cast<std::size_t>(count));
    std::iota(rows.begin(), rows.end(), start);
    return gather_rows(a, std::move(rows));
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace pseg::ad
