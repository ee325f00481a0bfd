#pragma once

// Dense row-major tensors with reverse-mode autodiff on an explicit tape.
// Scalar type is a template parameter: double for the verification suites,
// float for training throughput. Ops run eagerly; when a RecordScope is
// active and an input requires gradients, a backward closure is pushed onto
// the tape. Graph::backward replays the tape in reverse execution order,
// which is a valid reverse topological order by construction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mdt/errors.hpp"
#include "mdt/rng.hpp"

namespace mdt {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
};

// ---------------------------------------------------------------------------
// Graph (autodiff tape)
// ---------------------------------------------------------------------------

template <typename T>
class TensorT;

template <typename T>
class GraphT {
public:
    void push(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    // Seeds d(loss)=1 and runs every recorded closure exactly once, in
    // reverse execution order. A second call without reset() is rejected.
    void backward(const TensorT<T>& loss);

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

namespace detail {

template <typename T>
inline GraphT<T>*& active_graph() {
    thread_local GraphT<T>* g = nullptr;
    return g;
}

}  // namespace detail

// Binds a graph as the recording target for the current thread.
template <typename T>
class RecordScope {
public:
    explicit RecordScope(GraphT<T>& g) : prev_(detail::active_graph<T>()) {
        detail::active_graph<T>() = &g;
    }
    ~RecordScope() { detail::active_graph<T>() = prev_; }
    RecordScope(const RecordScope&) = delete;
    RecordScope& operator=(const RecordScope&) = delete;

private:
    GraphT<T>* prev_;
};

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

template <typename T>
class TensorT {
public:
    using Storage = TensorStorage<T>;

    TensorT() = default;

    explicit TensorT(Shape shape) {
        s_ = std::make_shared<Storage>();
        s_->shape = std::move(shape);
        s_->data.assign(shape_numel(s_->shape), T(0));
    }

    TensorT(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        s_ = std::make_shared<Storage>();
        s_->shape = std::move(shape);
        s_->data = std::move(data);
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT full(Shape shape, T value) {
        TensorT t(std::move(shape));
        std::fill(t.s_->data.begin(), t.s_->data.end(), value);
        return t;
    }

    static TensorT scalar(T value) { return full({1}, value); }

    static TensorT randn(Rng& rng, Shape shape, T stddev = T(1)) {
        TensorT t(std::move(shape));
        for (auto& v : t.s_->data) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    size_t rank() const { return s_->shape.size(); }
    size_t dim(size_t i) const { return s_->shape[i]; }
    size_t numel() const { return s_->data.size(); }

    T* data() { return s_->data.data(); }
    const T* data() const { return s_->data.data(); }
    std::vector<T>& vec() { return s_->data; }
    const std::vector<T>& vec() const { return s_->data; }

    T item() const {
        if (numel() != 1) throw ContractError("item() requires a scalar tensor, got " + shape_str(shape()));
        return s_->data[0];
    }

    bool requires_grad() const { return s_ && s_->requires_grad; }
    TensorT& set_requires_grad(bool b) {
        s_->requires_grad = b;
        return *this;
    }

    void ensure_grad() {
        if (s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), T(0));
    }
    void zero_grad() {
        if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
    }
    bool has_grad() const { return s_ && !s_->grad.empty(); }
    T* grad() { return s_->grad.data(); }
    const T* grad() const { return s_->grad.data(); }
    std::vector<T>& grad_vec() { return s_->grad; }

    std::shared_ptr<Storage> storage() const { return s_; }

    TensorT clone() const {
        TensorT t;
        t.s_ = std::make_shared<Storage>();
        t.s_->shape = s_->shape;
        t.s_->data = s_->data;
        return t;
    }

private:
    std::shared_ptr<Storage> s_;
};

template <typename T>
void GraphT<T>::backward(const TensorT<T>& loss) {
    if (consumed_) throw ContractError("Graph::backward called twice without reset");
    if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    auto st = loss.storage();
    if (st->grad.size() != st->data.size()) st->grad.assign(st->data.size(), T(0));
    st->grad[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    consumed_ = true;
}

template <typename T>
bool all_finite(const TensorT<T>& t) {
    for (const T v : t.vec())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

using Tensor64 = TensorT<double>;
using Tensor32 = TensorT<float>;

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace kernels {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
inline void gemm_nn_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                        size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
inline void gemm_nt_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                        size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
inline void gemm_tn_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
                        size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            T* crow = c + p * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
inline bool recording_for(std::initializer_list<const TensorT<T>*> inputs) {
    if (!active_graph<T>()) return false;
    for (const TensorT<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
inline void mark_tracked(TensorT<T>& out) {
    out.set_requires_grad(true);
}

// Returns the grad buffer of `s`, allocating zeros on first use.
template <typename T>
inline std::vector<T>& acc_grad(const std::shared_ptr<TensorStorage<T>>& s) {
    if (s->grad.size() != s->data.size()) s->grad.assign(s->data.size(), T(0));
    return s->grad;
}

// True when the output never received any downstream gradient (dead branch).
template <typename T>
inline bool no_out_grad(const std::shared_ptr<TensorStorage<T>>& s) {
    return s->grad.empty();
}

// Suffix-broadcast check: b's shape must equal the trailing axes of a's
// shape, or b must be a single scalar.
template <typename T>
inline size_t broadcast_block(const TensorT<T>& a, const TensorT<T>& b, const char* opname) {
    if (b.numel() == 1) return 1;
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sb.size() > sa.size())
        throw DimensionError(std::string(opname) + ": rhs rank exceeds lhs, " + shape_str(sa) + " vs " + shape_str(sb));
    const size_t off = sa.size() - sb.size();
    for (size_t i = 0; i < sb.size(); ++i)
        if (sa[off + i] != sb[i])
            throw DimensionError(std::string(opname) + ": shapes not suffix-broadcastable, " + shape_str(sa) +
                                 " vs " + shape_str(sb));
    return b.numel();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    const size_t nb = detail::broadcast_block(a, b, "add");
    TensorT<T> out(a.shape());
    const size_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (nb == 1) {
        const T bv = pb[0];
        for (size_t i = 0; i < n; ++i) po[i] = pa[i] + bv;
    } else {
        for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % nb];
    }
    if (detail::recording_for<T>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, bs, os, n, nb] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            if (as->requires_grad) {
                auto& ga = detail::acc_grad(as);
                for (size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bs->requires_grad) {
                auto& gb = detail::acc_grad(bs);
                for (size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    const size_t nb = detail::broadcast_block(a, b, "sub");
    TensorT<T> out(a.shape());
    const size_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (nb == 1) {
        const T bv = pb[0];
        for (size_t i = 0; i < n; ++i) po[i] = pa[i] - bv;
    } else {
        for (size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i % nb];
    }
    if (detail::recording_for<T>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, bs, os, n, nb] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            if (as->requires_grad) {
                auto& ga = detail::acc_grad(as);
                for (size_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (bs->requires_grad) {
                auto& gb = detail::acc_grad(bs);
                for (size_t i = 0; i < n; ++i) gb[i % nb] -= g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    const size_t nb = detail::broadcast_block(a, b, "mul");
    TensorT<T> out(a.shape());
    const size_t n = a.numel();
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (nb == 1) {
        const T bv = pb[0];
        for (size_t i = 0; i < n; ++i) po[i] = pa[i] * bv;
    } else {
        for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i % nb];
    }
    if (detail::recording_for<T>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, bs, os, n, nb] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            const T* pa2 = as->data.data();
            const T* pb2 = bs->data.data();
            if (as->requires_grad) {
                auto& ga = detail::acc_grad(as);
                if (nb == 1) {
                    const T bv = pb2[0];
                    for (size_t i = 0; i < n; ++i) ga[i] += g[i] * bv;
                } else {
                    for (size_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i % nb];
                }
            }
            if (bs->requires_grad) {
                auto& gb = detail::acc_grad(bs);
                for (size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * pa2[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    TensorT<T> out(a.shape());
    const size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, os, n, c] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            auto& ga = detail::acc_grad(as);
            for (size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
    TensorT<T> out(a.shape());
    const size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] + c;
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, os, n] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            auto& ga = detail::acc_grad(as);
            for (size_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
    return scale(a, T(-1));
}

// Square, used by the quadratic losses.
template <typename T>
TensorT<T> square(const TensorT<T>& a) {
    TensorT<T> out(a.shape());
    const size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pa[i];
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, os, n] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            const T* pa2 = as->data.data();
            auto& ga = detail::acc_grad(as);
            for (size_t i = 0; i < n; ++i) ga[i] += T(2) * g[i] * pa2[i];
        });
    }
    return out;
}

// GELU, tanh approximation; derivative implemented analytically.
template <typename T>
TensorT<T> gelu(const TensorT<T>& a) {
    constexpr double kC = 0.7978845608028653559;  // sqrt(2/pi)
    constexpr double kK = 0.044715;
    TensorT<T> out(a.shape());
    const size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(pa[i]);
        const double t = std::tanh(kC * (x + kK * x * x * x));
        po[i] = static_cast<T>(0.5 * x * (1.0 + t));
    }
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, os, n] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            const T* pa2 = as->data.data();
            auto& ga = detail::acc_grad(as);
            for (size_t i = 0; i < n; ++i) {
                const double x = static_cast<double>(pa2[i]);
                const double u = kC * (x + kK * x * x * x);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kK * x * x);
                const double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                ga[i] += g[i] * static_cast<T>(d);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops (all materialize; no aliased views)
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: numel mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
    TensorT<T> out(std::move(shape), std::vector<T>(a.vec()));
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        const size_t n = a.numel();
        detail::active_graph<T>()->push([as, os, n] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            auto& ga = detail::acc_grad(as);
            for (size_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    }
    return out;
}

namespace detail {

inline std::vector<size_t> row_major_strides(const Shape& s) {
    std::vector<size_t> st(s.size(), 1);
    for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// out[j] = in[perm_map[j]] index plan for a permutation of axes.
inline std::vector<size_t> permute_plan(const Shape& in_shape, const std::vector<size_t>& perm) {
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
    const auto in_st = row_major_strides(in_shape);
    const auto out_st = row_major_strides(out_shape);
    const size_t n = shape_numel(in_shape);
    std::vector<size_t> plan(n);
    std::vector<size_t> idx(perm.size(), 0);
    for (size_t flat = 0; flat < n; ++flat) {
        size_t src = 0;
        for (size_t d = 0; d < perm.size(); ++d) src += idx[d] * in_st[perm[d]];
        plan[flat] = src;
        for (size_t d = perm.size(); d-- > 0;) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    (void)out_st;
    return plan;
}

}  // namespace detail

template <typename T>
TensorT<T> permute(const TensorT<T>& a, const std::vector<size_t>& perm) {
    if (perm.size() != a.rank()) throw DimensionError("permute: perm rank mismatch");
    Shape out_shape(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
    auto plan = std::make_shared<std::vector<size_t>>(detail::permute_plan(a.shape(), perm));
    TensorT<T> out(out_shape);
    const size_t n = a.numel();
    const T* pa = a.data();
    T* po = out.data();
    const size_t* pp = plan->data();
    for (size_t i = 0; i < n; ++i) po[i] = pa[pp[i]];
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, os, plan, n] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            auto& ga = detail::acc_grad(as);
            const size_t* pp2 = plan->data();
            for (size_t i = 0; i < n; ++i) ga[pp2[i]] += g[i];
        });
    }
    return out;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& a, size_t axis, size_t start, size_t len) {
    if (axis >= a.rank()) throw DimensionError("slice: axis out of range");
    if (start + len > a.dim(axis)) throw DimensionError("slice: range exceeds extent");
    Shape out_shape = a.shape();
    out_shape[axis] = len;
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const size_t mid = a.dim(axis);
    TensorT<T> out(out_shape);
    const T* pa = a.data();
    T* po = out.data();
    for (size_t o = 0; o < outer; ++o)
        std::memcpy(po + o * len * inner, pa + (o * mid + start) * inner, len * inner * sizeof(T));
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, os, outer, inner, mid, start, len] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            auto& ga = detail::acc_grad(as);
            for (size_t o = 0; o < outer; ++o) {
                const T* gsrc = g + o * len * inner;
                T* gdst = ga.data() + (o * mid + start) * inner;
                for (size_t i = 0; i < len * inner; ++i) gdst[i] += gsrc[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, size_t axis) {
    if (parts.empty()) throw ContractError("concat: empty input list");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw DimensionError("concat: axis out of range");
    size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != ref.size()) throw DimensionError("concat: rank mismatch");
        for (size_t i = 0; i < ref.size(); ++i)
            if (i != axis && p.dim(i) != ref[i]) throw DimensionError("concat: extent mismatch off-axis");
        total += p.dim(axis);
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= ref[i];
    for (size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    TensorT<T> out(out_shape);
    T* po = out.data();
    size_t off = 0;
    bool track = false;
    for (const auto& p : parts)
        if (p.requires_grad()) track = true;
    track = track && detail::active_graph<T>() != nullptr;
    for (const auto& p : parts) {
        const size_t len = p.dim(axis);
        const T* pp = p.data();
        for (size_t o = 0; o < outer; ++o)
            std::memcpy(po + (o * total + off) * inner, pp + o * len * inner, len * inner * sizeof(T));
        if (track) {
            auto ps = p.storage();
            auto os = out.storage();
            const size_t off_c = off;
            detail::active_graph<T>()->push([ps, os, outer, inner, total, off_c, len] {
                if (!ps->requires_grad || detail::no_out_grad(os)) return;
                const T* g = os->grad.data();
                auto& gp = detail::acc_grad(ps);
                for (size_t o = 0; o < outer; ++o) {
                    const T* gsrc = g + (o * total + off_c) * inner;
                    T* gdst = gp.data() + o * len * inner;
                    for (size_t i = 0; i < len * inner; ++i) gdst[i] += gsrc[i];
                }
            });
        }
        off += len;
    }
    if (track) detail::mark_tracked(out);
    return out;
}

// Selects rows along axis 0; backward scatter-adds. Also serves as the
// embedding lookup (table [V,D], ids -> [N,D]).
template <typename T>
TensorT<T> index_select(const TensorT<T>& a, const std::vector<size_t>& idx) {
    if (a.rank() < 1) throw DimensionError("index_select: rank-0 input");
    const size_t rows = a.dim(0);
    size_t inner = a.numel() / std::max<size_t>(rows, 1);
    for (size_t i : idx)
        if (i >= rows) throw ContractError("index_select: index out of range");
    Shape out_shape = a.shape();
    out_shape[0] = idx.size();
    TensorT<T> out(out_shape);
    const T* pa = a.data();
    T* po = out.data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(po + r * inner, pa + idx[r] * inner, inner * sizeof(T));
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        auto ids = std::make_shared<std::vector<size_t>>(idx);
        detail::active_graph<T>()->push([as, os, ids, inner] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            auto& ga = detail::acc_grad(as);
            for (size_t r = 0; r < ids->size(); ++r) {
                T* gdst = ga.data() + (*ids)[r] * inner;
                const T* gsrc = g + r * inner;
                for (size_t i = 0; i < inner; ++i) gdst[i] += gsrc[i];
            }
        });
    }
    return out;
}

// Tiles an axis of extent 1. Backward sums back over the tiled axis.
template <typename T>
TensorT<T> repeat_axis(const TensorT<T>& a, size_t axis, size_t times) {
    if (axis >= a.rank()) throw DimensionError("repeat_axis: axis out of range");
    if (a.dim(axis) != 1) throw DimensionError("repeat_axis: axis extent must be 1");
    Shape out_shape = a.shape();
    out_shape[axis] = times;
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    TensorT<T> out(out_shape);
    const T* pa = a.data();
    T* po = out.data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t t = 0; t < times; ++t)
            std::memcpy(po + (o * times + t) * inner, pa + o * inner, inner * sizeof(T));
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, os, outer, inner, times] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            auto& ga = detail::acc_grad(as);
            for (size_t o = 0; o < outer; ++o)
                for (size_t t = 0; t < times; ++t) {
                    const T* gsrc = g + (o * times + t) * inner;
                    T* gdst = ga.data() + o * inner;
                    for (size_t i = 0; i < inner; ++i) gdst[i] += gsrc[i];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum(const TensorT<T>& a) {
    T acc = T(0);
    const T* pa = a.data();
    const size_t n = a.numel();
    for (size_t i = 0; i < n; ++i) acc += pa[i];
    TensorT<T> out = TensorT<T>::scalar(acc);
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, os, n] {
            if (detail::no_out_grad(os)) return;
            const T g = os->grad[0];
            auto& ga = detail::acc_grad(as);
            for (size_t i = 0; i < n; ++i) ga[i] += g;
        });
    }
    return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a) {
    if (a.numel() == 0) throw ContractError("mean: empty tensor");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
TensorT<T> sum_axis(const TensorT<T>& a, size_t axis) {
    if (axis >= a.rank()) throw DimensionError("sum_axis: axis out of range");
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= a.dim(i);
    for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
    const size_t mid = a.dim(axis);
    Shape out_shape;
    for (size_t i = 0; i < a.rank(); ++i)
        if (i != axis) out_shape.push_back(a.dim(i));
    if (out_shape.empty()) out_shape = {1};
    TensorT<T> out(out_shape);
    const T* pa = a.data();
    T* po = out.data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t m = 0; m < mid; ++m) {
            const T* src = pa + (o * mid + m) * inner;
            T* dst = po + o * inner;
            for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    if (detail::recording_for<T>({&a})) {
        detail::mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, os, outer, inner, mid] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            auto& ga = detail::acc_grad(as);
            for (size_t o = 0; o < outer; ++o)
                for (size_t m = 0; m < mid; ++m) {
                    T* gdst = ga.data() + (o * mid + m) * inner;
                    const T* gsrc = g + o * inner;
                    for (size_t i = 0; i < inner; ++i) gdst[i] += gsrc[i];
                }
        });
    }
    return out;
}

template <typename T>
TensorT<T> mean_axis(const TensorT<T>& a, size_t axis) {
    return scale(sum_axis(a, axis), T(1) / static_cast<T>(a.dim(axis)));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// a: [..., m, k] (leading axes folded), b: [k, n].
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() < 2 || b.rank() != 2) throw DimensionError("matmul: need a rank>=2, b rank 2");
    const size_t k = a.dim(a.rank() - 1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const size_t n = b.dim(1);
    const size_t m = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    TensorT<T> out(out_shape);
    kernels::gemm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
    if (detail::recording_for<T>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, bs, os, m, k, n] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            if (as->requires_grad) {
                auto& ga = detail::acc_grad(as);
                kernels::gemm_nt_acc(g, bs->data.data(), ga.data(), m, n, k);
            }
            if (bs->requires_grad) {
                auto& gb = detail::acc_grad(bs);
                kernels::gemm_tn_acc(as->data.data(), g, gb.data(), m, k, n);
            }
        });
    }
    return out;
}

// Batched: a [B, m, k] x b [B, k, n] -> [B, m, n].
template <typename T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    TensorT<T> out(Shape{B, m, n});
    for (size_t i = 0; i < B; ++i)
        kernels::gemm_nn_acc(a.data() + i * m * k, b.data() + i * k * n, out.data() + i * m * n, m, k, n);
    if (detail::recording_for<T>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, bs, os, B, m, k, n] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            if (as->requires_grad) {
                auto& ga = detail::acc_grad(as);
                for (size_t i = 0; i < B; ++i)
                    kernels::gemm_nt_acc(g + i * m * n, bs->data.data() + i * k * n, ga.data() + i * m * k, m, n, k);
            }
            if (bs->requires_grad) {
                auto& gb = detail::acc_grad(bs);
                for (size_t i = 0; i < B; ++i)
                    kernels::gemm_tn_acc(as->data.data() + i * m * k, g + i * m * n, gb.data() + i * k * n, m, k, n);
            }
        });
    }
    return out;
}

// Batched with transposed rhs: a [B, m, k] x b [B, n, k] -> [B, m, n].
template <typename T>
TensorT<T> bmm_nt(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw DimensionError("bmm_nt: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    TensorT<T> out(Shape{B, m, n});
    for (size_t i = 0; i < B; ++i)
        kernels::gemm_nt_acc(a.data() + i * m * k, b.data() + i * n * k, out.data() + i * m * n, m, k, n);
    if (detail::recording_for<T>({&a, &b})) {
        detail::mark_tracked(out);
        auto as = a.storage(), bs = b.storage(), os = out.storage();
        detail::active_graph<T>()->push([as, bs, os, B, m, k, n] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            if (as->requires_grad) {
                auto& ga = detail::acc_grad(as);
                for (size_t i = 0; i < B; ++i)
                    kernels::gemm_nn_acc(g + i * m * n, bs->data.data() + i * n * k, ga.data() + i * m * k, m, n, k);
            }
            if (bs->requires_grad) {
                auto& gb = detail::acc_grad(bs);
                for (size_t i = 0; i < B; ++i)
                    kernels::gemm_tn_acc(g + i * m * n, as->data.data() + i * m * k, gb.data() + i * n * k, m, n, k);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalizations and softmax
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
TensorT<T> softmax_last(const TensorT<T>& a, bool log_mode) {
    if (a.rank() < 1 || a.dim(a.rank() - 1) < 1) throw ContractError("softmax: empty reduction axis");
    const size_t d = a.dim(a.rank() - 1);
    const size_t rows = a.numel() / d;
    TensorT<T> out(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    for (size_t r = 0; r < rows; ++r) {
        const T* x = pa + r * d;
        T* y = po + r * d;
        T mx = x[0];
        for (size_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
        T z = T(0);
        for (size_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - mx);
            z += y[i];
        }
        if (log_mode) {
            const T lz = std::log(z);
            for (size_t i = 0; i < d; ++i) y[i] = x[i] - mx - lz;
        } else {
            const T inv = T(1) / z;
            for (size_t i = 0; i < d; ++i) y[i] *= inv;
        }
    }
    if (recording_for<T>({&a})) {
        mark_tracked(out);
        auto as = a.storage(), os = out.storage();
        active_graph<T>()->push([as, os, rows, d, log_mode] {
            if (no_out_grad(os)) return;
            const T* g = os->grad.data();
            const T* y = os->data.data();
            auto& ga = acc_grad(as);
            for (size_t r = 0; r < rows; ++r) {
                const T* gr = g + r * d;
                const T* yr = y + r * d;
                T* gar = ga.data() + r * d;
                T dot = T(0);
                for (size_t i = 0; i < d; ++i) dot += gr[i] * (log_mode ? T(1) : yr[i]);
                if (log_mode) {
                    for (size_t i = 0; i < d; ++i) gar[i] += gr[i] - std::exp(yr[i]) * dot;
                } else {
                    for (size_t i = 0; i < d; ++i) gar[i] += yr[i] * (gr[i] - dot);
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> softmax_axis(const TensorT<T>& a, int axis, bool log_mode) {
    const size_t r = a.rank();
    const int ra = axis < 0 ? axis + static_cast<int>(r) : axis;
    if (ra < 0 || static_cast<size_t>(ra) >= r) throw DimensionError("softmax: axis out of range");
    const size_t ax = static_cast<size_t>(ra);
    if (ax == r - 1) return softmax_last(a, log_mode);
    std::vector<size_t> perm, inv(r);
    for (size_t i = 0; i < r; ++i)
        if (i != ax) perm.push_back(i);
    perm.push_back(ax);
    for (size_t i = 0; i < r; ++i) inv[perm[i]] = i;
    return permute(softmax_last(permute(a, perm), log_mode), inv);
}

}  // namespace detail

template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int axis = -1) {
    return detail::softmax_axis(a, axis, false);
}

template <typename T>
TensorT<T> log_softmax(const TensorT<T>& a, int axis = -1) {
    return detail::softmax_axis(a, axis, true);
}

// Layer norm over the last axis, then affine with gain/bias of shape [d].
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias, T eps) {
    if (x.rank() < 1) throw DimensionError("layer_norm: rank-0 input");
    if (eps <= T(0)) throw ContractError("layer_norm: eps must be positive");
    const size_t d = x.dim(x.rank() - 1);
    if (gain.numel() != d || bias.numel() != d) throw DimensionError("layer_norm: gain/bias extent mismatch");
    const size_t rows = x.numel() / d;
    TensorT<T> out(x.shape());
    // saved per row: inv std and normalized values (recomputed in backward from data)
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    auto means = std::make_shared<std::vector<T>>(rows);
    const T* px = x.data();
    const T* pg = gain.data();
    const T* pb = bias.data();
    T* po = out.data();
    for (size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d;
        T* yr = po + r * d;
        T mu = T(0);
        for (size_t i = 0; i < d; ++i) mu += xr[i];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (size_t i = 0; i < d; ++i) {
            const T c = xr[i] - mu;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        (*means)[r] = mu;
        for (size_t i = 0; i < d; ++i) yr[i] = (xr[i] - mu) * is * pg[i] + pb[i];
    }
    if (detail::recording_for<T>({&x, &gain, &bias})) {
        detail::mark_tracked(out);
        auto xs = x.storage(), gs = gain.storage(), bs = bias.storage(), os = out.storage();
        detail::active_graph<T>()->push([xs, gs, bs, os, inv_std, means, rows, d] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            const T* px2 = xs->data.data();
            const T* pg2 = gs->data.data();
            for (size_t r = 0; r < rows; ++r) {
                const T* gr = g + r * d;
                const T* xr = px2 + r * d;
                const T is = (*inv_std)[r];
                const T mu = (*means)[r];
                if (gs->requires_grad || bs->requires_grad) {
                    if (gs->requires_grad) {
                        auto& gg = detail::acc_grad(gs);
                        for (size_t i = 0; i < d; ++i) gg[i] += gr[i] * (xr[i] - mu) * is;
                    }
                    if (bs->requires_grad) {
                        auto& gb = detail::acc_grad(bs);
                        for (size_t i = 0; i < d; ++i) gb[i] += gr[i];
                    }
                }
                if (xs->requires_grad) {
                    auto& gx = detail::acc_grad(xs);
                    T* gxr = gx.data() + r * d;
                    T s1 = T(0), s2 = T(0);
                    for (size_t i = 0; i < d; ++i) {
                        const T gg = gr[i] * pg2[i];
                        const T xh = (xr[i] - mu) * is;
                        s1 += gg;
                        s2 += gg * xh;
                    }
                    s1 /= static_cast<T>(d);
                    s2 /= static_cast<T>(d);
                    for (size_t i = 0; i < d; ++i) {
                        const T gg = gr[i] * pg2[i];
                        const T xh = (xr[i] - mu) * is;
                        gxr[i] += (gg - s1 - xh * s2) * is;
                    }
                }
            }
        });
    }
    return out;
}

// Row-wise L2 normalization over the last axis.
template <typename T>
TensorT<T> l2_normalize(const TensorT<T>& x, T eps = T(1e-12)) {
    const size_t d = x.dim(x.rank() - 1);
    const size_t rows = x.numel() / d;
    TensorT<T> out(x.shape());
    auto inv_norm = std::make_shared<std::vector<T>>(rows);
    const T* px = x.data();
    T* po = out.data();
    for (size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * d;
        T n2 = T(0);
        for (size_t i = 0; i < d; ++i) n2 += xr[i] * xr[i];
        const T inv = T(1) / std::max(std::sqrt(n2), eps);
        (*inv_norm)[r] = inv;
        for (size_t i = 0; i < d; ++i) po[r * d + i] = xr[i] * inv;
    }
    if (detail::recording_for<T>({&x})) {
        detail::mark_tracked(out);
        auto xs = x.storage(), os = out.storage();
        detail::active_graph<T>()->push([xs, os, inv_norm, rows, d] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            const T* y = os->data.data();
            auto& gx = detail::acc_grad(xs);
            for (size_t r = 0; r < rows; ++r) {
                const T* gr = g + r * d;
                const T* yr = y + r * d;
                T* gxr = gx.data() + r * d;
                T dot = T(0);
                for (size_t i = 0; i < d; ++i) dot += gr[i] * yr[i];
                const T inv = (*inv_norm)[r];
                for (size_t i = 0; i < d; ++i) gxr[i] += (gr[i] - yr[i] * dot) * inv;
            }
        });
    }
    return out;
}

// Inverted dropout. rate == 0 is an exact no-op that draws nothing from rng.
template <typename T>
TensorT<T> dropout(const TensorT<T>& x, double rate, Rng& rng, bool training) {
    if (!training || rate <= 0.0) return x;
    if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
    const size_t n = x.numel();
    auto mask = std::make_shared<std::vector<T>>(n);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    for (size_t i = 0; i < n; ++i) (*mask)[i] = rng.uniform() < rate ? T(0) : keep_scale;
    TensorT<T> out(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (size_t i = 0; i < n; ++i) po[i] = px[i] * (*mask)[i];
    if (detail::recording_for<T>({&x})) {
        detail::mark_tracked(out);
        auto xs = x.storage(), os = out.storage();
        detail::active_graph<T>()->push([xs, os, mask, n] {
            if (detail::no_out_grad(os)) return;
            const T* g = os->grad.data();
            auto& gx = detail::acc_grad(xs);
            for (size_t i = 0; i < n; ++i) gx[i] += g[i] * (*mask)[i];
        });
    }
    return out;
}

}  // namespace mdt
