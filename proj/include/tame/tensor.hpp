#pragma once

// Dense row-major tensors with reverse-mode autodiff on a define-by-run tape.
// Scalar type is a template parameter: double for oracle/gradient-check work,
// float for training speed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tame/error.hpp"

namespace tame {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until needed; same length as data once allocated
    bool requires_grad = false;
    const void* producer = nullptr;  // tape that recorded the op producing this tensor

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        validate_shape(t.impl_->shape);
        t.impl_->data.assign(static_cast<size_t>(shape_numel(t.impl_->shape)), T(0));
        return t;
    }

    static Tensor full(Shape shape, T value) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor scalar(T value) { return full({1}, value); }

    static Tensor from(Shape shape, std::vector<T> values) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        validate_shape(t.impl_->shape);
        TAME_CHECK_SHAPE(static_cast<int64_t>(values.size()) == shape_numel(t.impl_->shape),
                         "value count ", values.size(), " does not match shape ",
                         shape_str(t.impl_->shape));
        t.impl_->data = std::move(values);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t dim() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }
    int64_t size(int64_t axis) const {
        if (axis < 0) axis += dim();
        TAME_CHECK_SHAPE(axis >= 0 && axis < dim(), "axis ", axis, " out of range for ",
                         shape_str(shape()));
        return impl_->shape[static_cast<size_t>(axis)];
    }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }
    T* ptr() { return impl_->data.data(); }
    const T* ptr() const { return impl_->data.data(); }

    T item() const {
        TAME_CHECK_SHAPE(numel() == 1, "item() on tensor of shape ", shape_str(shape()));
        return impl_->data[0];
    }

    T at(std::initializer_list<int64_t> idx) const {
        TAME_CHECK_SHAPE(static_cast<int64_t>(idx.size()) == dim(), "index rank mismatch");
        auto st = row_major_strides(shape());
        int64_t off = 0;
        size_t k = 0;
        for (int64_t i : idx) off += i * st[k++];
        return impl_->data[static_cast<size_t>(off)];
    }

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool grad_defined() const { return impl_ && !impl_->grad.empty(); }
    std::vector<T>& grad() {
        TAME_CHECK_VALUE(grad_defined(), "gradient not populated");
        return impl_->grad;
    }
    const std::vector<T>& grad() const {
        TAME_CHECK_VALUE(grad_defined(), "gradient not populated");
        return impl_->grad;
    }
    void zero_grad() {
        if (grad_defined()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }
    void drop_grad() { impl_->grad.clear(); }

    // Deep copy of the data; gradient state is not carried over.
    Tensor clone() const {
        Tensor t = from(shape(), data());
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    bool all_finite() const {
        for (T v : impl_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

private:
    static void validate_shape(const Shape& s) {
        for (int64_t d : s) TAME_CHECK_SHAPE(d > 0, "non-positive dimension in ", shape_str(s));
    }

    std::shared_ptr<TensorImpl<T>> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

// Ordered record of backward closures. Constructing a Tape makes it the
// active tape for the current thread; destruction restores the previous one.
// A tape and the tensors it references stay on one thread.
template <typename T>
class Tape {
public:
    Tape() : prev_(active_ref()) { active_ref() = this; }
    ~Tape() { active_ref() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
    size_t size() const { return steps_.size(); }

    // Seeds d(loss)/d(loss) = 1 and replays every recorded step in reverse.
    void backward(const Tensor<T>& loss) {
        TAME_CHECK_VALUE(loss.defined() && loss.numel() == 1, "backward expects a scalar loss");
        TAME_CHECK_VALUE(loss.impl()->producer == this,
                         "backward on a tensor not connected to this tape");
        loss.impl()->ensure_grad()[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

private:
    static Tape*& active_ref() {
        thread_local Tape* active = nullptr;
        return active;
    }

    std::vector<std::function<void()>> steps_;
    Tape* prev_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    TAME_CHECK_VALUE(Tape<T>::active() != nullptr, "backward called with no active tape");
    Tape<T>::active()->backward(loss);
}

namespace detail {

template <typename T>
bool wants_grad(const Tensor<T>& t) {
    return t.defined() && t.requires_grad();
}

// Marks the output as produced on the active tape and records the closure,
// provided grad is flowing. Output grad buffer is allocated eagerly so
// backward closures can read it unconditionally.
template <typename T, class F>
void record(std::initializer_list<const Tensor<T>*> inputs, Tensor<T>& out, F&& fn) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) return;
    bool any = false;
    for (const Tensor<T>* in : inputs)
        if (wants_grad(*in)) any = true;
    if (!any) return;
    out.set_requires_grad(true);
    out.impl()->producer = tape;
    out.impl()->ensure_grad();
    tape->record(std::forward<F>(fn));
}

// Right-aligned broadcast of two shapes; only singleton axes may expand.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (size_t i = 0; i < rank; ++i) {
        int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        TAME_CHECK_SHAPE(da == db || da == 1 || db == 1, "cannot broadcast ", shape_str(a),
                         " with ", shape_str(b), " at axis ", i);
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` padded to `rank`, zeroed on broadcast axes.
inline std::vector<int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    auto st = row_major_strides(s);
    std::vector<int64_t> r(out.size(), 0);
    size_t off = out.size() - s.size();
    for (size_t i = 0; i < s.size(); ++i) r[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    return r;
}

// Calls f(a_off, b_off, out_linear) over every coordinate of `out`.
template <class F>
void for_each_broadcast(const Shape& a, const Shape& b, const Shape& out, F&& f) {
    auto sa = broadcast_strides(a, out);
    auto sb = broadcast_strides(b, out);
    size_t rank = out.size();
    std::vector<int64_t> coord(rank, 0);
    int64_t n = shape_numel(out);
    int64_t oa = 0, ob = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        f(oa, ob, lin);
        for (int64_t ax = static_cast<int64_t>(rank) - 1; ax >= 0; --ax) {
            size_t u = static_cast<size_t>(ax);
            if (++coord[u] < out[u]) {
                oa += sa[u];
                ob += sb[u];
                break;
            }
            coord[u] = 0;
            oa -= sa[u] * (out[u] - 1);
            ob -= sb[u] * (out[u] - 1);
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

// Shared skeleton for broadcasting binary ops: fwd(a,b) -> out value,
// bwd(a,b,gy) -> (ga, gb) contributions.
template <typename T, class Fwd, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db) {
    Shape os = broadcast_shape(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    if (a.shape() == b.shape()) {
        int64_t n = a.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
    } else {
        for_each_broadcast(a.shape(), b.shape(), os,
                           [&](int64_t ia, int64_t ib, int64_t io) { po[io] = fwd(pa[ia], pb[ib]); });
    }
    auto ai = a.impl();
    auto bi = b.impl();
    auto oi = out.impl();
    record({&a, &b}, out, [ai, bi, oi, da, db] {
        const std::vector<T>& gy = oi->grad;
        bool ga = ai->requires_grad;
        bool gb = bi->requires_grad;
        if (ga) ai->ensure_grad();
        if (gb) bi->ensure_grad();
        if (ai->shape == bi->shape) {
            int64_t n = static_cast<int64_t>(oi->data.size());
            for (int64_t i = 0; i < n; ++i) {
                if (ga) ai->grad[i] += da(ai->data[i], bi->data[i], gy[i]);
                if (gb) bi->grad[i] += db(ai->data[i], bi->data[i], gy[i]);
            }
        } else {
            for_each_broadcast(ai->shape, bi->shape, oi->shape,
                               [&](int64_t ia, int64_t ib, int64_t io) {
                                   if (ga) ai->grad[ia] += da(ai->data[ia], bi->data[ib], gy[io]);
                                   if (gb) bi->grad[ib] += db(ai->data[ia], bi->data[ib], gy[io]);
                               });
        }
    });
    return out;
}

// Unary op: fwd(x) -> y, bwd uses saved output or input.
template <typename T, class Fwd, class Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd bwd) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.ptr();
    T* po = out.ptr();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
    auto xi = x.impl();
    auto oi = out.impl();
    record({&x}, out, [xi, oi, bwd] {
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        int64_t n2 = static_cast<int64_t>(xi->data.size());
        for (int64_t i = 0; i < n2; ++i) gx[i] += bwd(xi->data[i], oi->data[i], oi->grad[i]);
    });
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
        [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
        [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op(
        a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
        [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary_op(
        x, [c](T v) { return v + c; }, [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T c) {
    return detail::unary_op(
        x, [c](T v) { return v * c; }, [c](T, T, T g) { return g * c; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T xv, T, T g) { return xv > T(0) ? g : T(0); });
}

template <typename T>
T sigmoid_scalar(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary_op(
        x, [](T v) { return sigmoid_scalar(v); },
        [](T, T yv, T g) { return g * yv * (T(1) - yv); });
}

// Hadamard power with a scalar exponent. Negative base with a non-integer
// exponent is a domain error; the derivative at exactly 0 with p < 1 is taken
// as 0 (one-sided subgradient) so saturated sigmoid outputs cannot poison a
// training run with infinities.
template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
    bool integer_p = p == std::floor(p);
    const T* px = x.ptr();
    for (int64_t i = 0; i < x.numel(); ++i)
        TAME_CHECK_VALUE(px[i] >= T(0) || integer_p,
                         "pow with negative base and non-integer exponent");
    return detail::unary_op(
        x, [p](T v) { return std::pow(v, p); },
        [p](T xv, T, T g) {
            if (xv == T(0) && p < T(1)) return T(0);
            return g * p * std::pow(xv, p - T(1));
        });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    TAME_CHECK_SHAPE(shape_numel(new_shape) == x.numel(), "reshape ", shape_str(x.shape()),
                     " -> ", shape_str(new_shape), " changes element count");
    Tensor<T> out = Tensor<T>::from(std::move(new_shape), x.data());
    auto xi = x.impl();
    auto oi = out.impl();
    detail::record({&x}, out, [xi, oi] {
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
    TAME_CHECK_SHAPE(!parts.empty(), "concat of zero tensors");
    Shape os = parts[0].shape();
    if (axis < 0) axis += static_cast<int64_t>(os.size());
    TAME_CHECK_SHAPE(axis >= 0 && axis < static_cast<int64_t>(os.size()), "concat axis out of range");
    int64_t total = 0;
    for (const auto& p : parts) {
        TAME_CHECK_SHAPE(p.dim() == static_cast<int64_t>(os.size()), "concat rank mismatch");
        for (int64_t d = 0; d < p.dim(); ++d)
            TAME_CHECK_SHAPE(d == axis || p.shape()[static_cast<size_t>(d)] == os[static_cast<size_t>(d)],
                             "concat shape mismatch at axis ", d, ": ", shape_str(p.shape()),
                             " vs ", shape_str(os));
        total += p.size(axis);
    }
    os[static_cast<size_t>(axis)] = total;
    Tensor<T> out = Tensor<T>::zeros(os);

    // outer = product of dims before axis, inner = product after.
    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < os.size(); ++d) inner *= os[d];

    int64_t out_axis_stride = total * inner;
    int64_t offset = 0;
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    std::vector<int64_t> offsets;
    for (const auto& p : parts) {
        int64_t len = p.size(axis) * inner;
        const T* src = p.ptr();
        T* dst = out.ptr();
        for (int64_t o = 0; o < outer; ++o)
            std::copy(src + o * len, src + (o + 1) * len, dst + o * out_axis_stride + offset);
        impls.push_back(p.impl());
        offsets.push_back(offset);
        offset += len;
    }

    std::vector<const Tensor<T>*> in_ptrs;
    for (const auto& p : parts) in_ptrs.push_back(&p);
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    Tape<T>* tape = Tape<T>::active();
    if (tape && any) {
        out.set_requires_grad(true);
        out.impl()->producer = tape;
        out.impl()->ensure_grad();
        auto oi = out.impl();
        tape->record([impls, offsets, oi, outer, inner, out_axis_stride] {
            for (size_t k = 0; k < impls.size(); ++k) {
                auto& pi = impls[k];
                if (!pi->requires_grad) continue;
                auto& gp = pi->ensure_grad();
                int64_t len = static_cast<int64_t>(pi->data.size()) / outer;
                for (int64_t o = 0; o < outer; ++o) {
                    const T* gsrc = oi->grad.data() + o * out_axis_stride + offsets[k];
                    T* gdst = gp.data() + o * len;
                    for (int64_t i = 0; i < len; ++i) gdst[i] += gsrc[i];
                }
            }
        });
        (void)inner;
    }
    return out;
}

// out = x[index] along `axis`, with the axis dropped.
template <typename T>
Tensor<T> select_index(const Tensor<T>& x, int64_t axis, int64_t index) {
    if (axis < 0) axis += x.dim();
    TAME_CHECK_SHAPE(axis >= 0 && axis < x.dim(), "select axis out of range");
    TAME_CHECK_VALUE(index >= 0 && index < x.size(axis), "index ", index,
                     " out of range for axis of size ", x.size(axis));
    Shape os;
    for (int64_t d = 0; d < x.dim(); ++d)
        if (d != axis) os.push_back(x.shape()[static_cast<size_t>(d)]);
    if (os.empty()) os.push_back(1);
    Tensor<T> out = Tensor<T>::zeros(os);

    int64_t outer = 1, inner = 1;
    for (int64_t d = 0; d < axis; ++d) outer *= x.shape()[static_cast<size_t>(d)];
    for (int64_t d = axis + 1; d < x.dim(); ++d) inner *= x.shape()[static_cast<size_t>(d)];
    int64_t axis_n = x.size(axis);
    const T* src = x.ptr();
    T* dst = out.ptr();
    for (int64_t o = 0; o < outer; ++o)
        std::copy(src + (o * axis_n + index) * inner, src + (o * axis_n + index + 1) * inner,
                  dst + o * inner);

    auto xi = x.impl();
    auto oi = out.impl();
    detail::record({&x}, out, [xi, oi, outer, inner, axis_n, index] {
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            const T* gsrc = oi->grad.data() + o * inner;
            T* gdst = gx.data() + (o * axis_n + index) * inner;
            for (int64_t i = 0; i < inner; ++i) gdst[i] += gsrc[i];
        }
    });
    return out;
}

// Per-sample channel gather: x is [N, K, ...], indices has N entries,
// output is [N, ...] (the chosen channel per sample).
template <typename T>
Tensor<T> take_channel_per_sample(const Tensor<T>& x, const std::vector<int64_t>& indices) {
    TAME_CHECK_SHAPE(x.dim() >= 2, "take_channel_per_sample expects rank >= 2");
    int64_t n = x.size(0);
    int64_t k = x.size(1);
    TAME_CHECK_SHAPE(static_cast<int64_t>(indices.size()) == n, "index count mismatch");
    int64_t inner = x.numel() / (n * k);
    Shape os;
    os.push_back(n);
    for (int64_t d = 2; d < x.dim(); ++d) os.push_back(x.shape()[static_cast<size_t>(d)]);
    Tensor<T> out = Tensor<T>::zeros(os);
    const T* src = x.ptr();
    T* dst = out.ptr();
    for (int64_t i = 0; i < n; ++i) {
        int64_t c = indices[i];
        TAME_CHECK_VALUE(c >= 0 && c < k, "class index ", c, " out of range [0, ", k, ")");
        std::copy(src + (i * k + c) * inner, src + (i * k + c + 1) * inner, dst + i * inner);
    }
    auto xi = x.impl();
    auto oi = out.impl();
    detail::record({&x}, out, [xi, oi, indices, k, inner] {
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        int64_t n2 = static_cast<int64_t>(indices.size());
        for (int64_t i = 0; i < n2; ++i) {
            const T* gsrc = oi->grad.data() + i * inner;
            T* gdst = gx.data() + (i * k + indices[i]) * inner;
            for (int64_t j = 0; j < inner; ++j) gdst[j] += gsrc[j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions, softmax, linear
// ---------------------------------------------------------------------------

// Reduction over a set of axes; empty axis set is the identity.
template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::vector<int64_t> axes, bool keepdim = false) {
    if (axes.empty()) {
        Tensor<T> out = Tensor<T>::from(x.shape(), x.data());
        auto xi = x.impl();
        auto oi = out.impl();
        detail::record({&x}, out, [xi, oi] {
            if (!xi->requires_grad) return;
            auto& gx = xi->ensure_grad();
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
        });
        return out;
    }
    std::vector<bool> reduced(static_cast<size_t>(x.dim()), false);
    for (int64_t& a : axes) {
        if (a < 0) a += x.dim();
        TAME_CHECK_SHAPE(a >= 0 && a < x.dim(), "reduce axis out of range");
        reduced[static_cast<size_t>(a)] = true;
    }
    Shape os;
    for (int64_t d = 0; d < x.dim(); ++d) {
        if (reduced[static_cast<size_t>(d)]) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(x.shape()[static_cast<size_t>(d)]);
        }
    }
    if (os.empty()) os.push_back(1);
    Tensor<T> out = Tensor<T>::zeros(os);

    // Map each input linear index to its output linear index once.
    auto xst = row_major_strides(x.shape());
    Shape kept_shape(x.shape());
    for (int64_t d = 0; d < x.dim(); ++d)
        if (reduced[static_cast<size_t>(d)]) kept_shape[static_cast<size_t>(d)] = 1;
    auto kst = row_major_strides(kept_shape);

    const T* px = x.ptr();
    T* po = out.ptr();
    int64_t n = x.numel();
    std::vector<int64_t> coord(static_cast<size_t>(x.dim()), 0);
    int64_t ko = 0;
    for (int64_t lin = 0; lin < n; ++lin) {
        po[ko] += px[lin];
        for (int64_t ax = x.dim() - 1; ax >= 0; --ax) {
            size_t u = static_cast<size_t>(ax);
            if (++coord[u] < x.shape()[u]) {
                if (!reduced[u]) ko += kst[u];
                break;
            }
            coord[u] = 0;
            if (!reduced[u]) ko -= kst[u] * (x.shape()[u] - 1);
        }
    }
    (void)xst;

    auto xi = x.impl();
    auto oi = out.impl();
    Shape xshape = x.shape();
    detail::record({&x}, out, [xi, oi, reduced, kst, xshape] {
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        int64_t n2 = static_cast<int64_t>(gx.size());
        std::vector<int64_t> c(xshape.size(), 0);
        int64_t ko2 = 0;
        for (int64_t lin = 0; lin < n2; ++lin) {
            gx[lin] += oi->grad[ko2];
            for (int64_t ax = static_cast<int64_t>(xshape.size()) - 1; ax >= 0; --ax) {
                size_t u = static_cast<size_t>(ax);
                if (++c[u] < xshape[u]) {
                    if (!reduced[u]) ko2 += kst[u];
                    break;
                }
                c[u] = 0;
                if (!reduced[u]) ko2 -= kst[u] * (xshape[u] - 1);
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::vector<int64_t> axes, bool keepdim = false) {
    if (axes.empty()) return reduce_sum(x, axes, keepdim);
    int64_t count = 1;
    for (int64_t a : axes) {
        int64_t aa = a < 0 ? a + x.dim() : a;
        count *= x.size(aa);
    }
    Tensor<T> s = reduce_sum(x, std::move(axes), keepdim);
    return mul_scalar(s, T(1) / static_cast<T>(count));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    std::vector<int64_t> axes(static_cast<size_t>(x.dim()));
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_sum(x, axes);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    std::vector<int64_t> axes(static_cast<size_t>(x.dim()));
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_mean(x, axes);
}

// Numerically stabilized softmax over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    TAME_CHECK_SHAPE(x.dim() >= 1, "softmax expects rank >= 1");
    int64_t k = x.size(-1);
    int64_t rows = x.numel() / k;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.ptr();
    T* po = out.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * k;
        T* yr = po + r * k;
        T m = xr[0];
        for (int64_t i = 1; i < k; ++i) m = std::max(m, xr[i]);
        T denom = T(0);
        for (int64_t i = 0; i < k; ++i) {
            yr[i] = std::exp(xr[i] - m);
            denom += yr[i];
        }
        for (int64_t i = 0; i < k; ++i) yr[i] /= denom;
    }
    auto xi = x.impl();
    auto oi = out.impl();
    detail::record({&x}, out, [xi, oi, rows, k] {
        if (!xi->requires_grad) return;
        auto& gx = xi->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = oi->data.data() + r * k;
            const T* gy = oi->grad.data() + r * k;
            T dot = T(0);
            for (int64_t i = 0; i < k; ++i) dot += gy[i] * y[i];
            for (int64_t i = 0; i < k; ++i) gx[r * k + i] += (gy[i] - dot) * y[i];
        }
    });
    return out;
}

// y = x W^T + b with x: [N, F], W: [O, F], b: [O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    TAME_CHECK_SHAPE(x.dim() == 2 && w.dim() == 2, "linear expects 2-D input and weight");
    int64_t n = x.size(0), f = x.size(1), o = w.size(0);
    TAME_CHECK_SHAPE(w.size(1) == f, "linear: weight columns ", w.size(1),
                     " != input features ", f);
    TAME_CHECK_SHAPE(!b.defined() || (b.dim() == 1 && b.size(0) == o), "linear: bad bias shape");
    Tensor<T> out = Tensor<T>::zeros({n, o});
    const T* px = x.ptr();
    const T* pw = w.ptr();
    T* po = out.ptr();
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < o; ++j) {
            const T* xr = px + i * f;
            const T* wr = pw + j * f;
            T acc = b.defined() ? b.ptr()[j] : T(0);
            for (int64_t t = 0; t < f; ++t) acc += xr[t] * wr[t];
            po[i * o + j] = acc;
        }
    }
    auto xi = x.impl();
    auto wi = w.impl();
    auto bi = b.defined() ? b.impl() : nullptr;
    auto oi = out.impl();
    detail::record({&x, &w, &b}, out, [xi, wi, bi, oi, n, f, o] {
        const T* gy = oi->grad.data();
        if (xi->requires_grad) {
            auto& gx = xi->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < o; ++j) {
                    T g = gy[i * o + j];
                    const T* wr = wi->data.data() + j * f;
                    T* gxr = gx.data() + i * f;
                    for (int64_t t = 0; t < f; ++t) gxr[t] += g * wr[t];
                }
        }
        if (wi->requires_grad) {
            auto& gw = wi->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < o; ++j) {
                    T g = gy[i * o + j];
                    const T* xr = xi->data.data() + i * f;
                    T* gwr = gw.data() + j * f;
                    for (int64_t t = 0; t < f; ++t) gwr[t] += g * xr[t];
                }
        }
        if (bi && bi->requires_grad) {
            auto& gb = bi->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < o; ++j) gb[j] += gy[i * o + j];
        }
    });
    return out;
}

// Argmax over the last axis, ties resolved to the lowest index. Not differentiable.
template <typename T>
std::vector<int64_t> argmax_rows(const Tensor<T>& x) {
    int64_t k = x.size(-1);
    int64_t rows = x.numel() / k;
    std::vector<int64_t> out(static_cast<size_t>(rows));
    const T* px = x.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px + r * k;
        int64_t best = 0;
        for (int64_t i = 1; i < k; ++i)
            if (xr[i] > xr[best]) best = i;
        out[static_cast<size_t>(r)] = best;
    }
    return out;
}

}  // namespace tame
