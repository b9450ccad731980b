#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "proteus/common.hpp"
#include "proteus/tensor.hpp"

namespace proteus {

// ----------------------------- op set -----------------------------

enum class Op {
    leaf,
    matmul,
    add,
    sub,
    mul,
    scale,
    gelu,
    layer_norm,
    softmax,
    log_softmax,
    mean,
    sum,
    reshape,
    transpose,
    concat,
    slice,
    gather_rows,
    mse,
    cross_entropy,
    kl_div,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::scale: return "scale";
        case Op::gelu: return "gelu";
        case Op::layer_norm: return "layer_norm";
        case Op::softmax: return "softmax";
        case Op::log_softmax: return "log_softmax";
        case Op::mean: return "mean";
        case Op::sum: return "sum";
        case Op::reshape: return "reshape";
        case Op::transpose: return "transpose";
        case Op::concat: return "concat";
        case Op::slice: return "slice";
        case Op::gather_rows: return "gather_rows";
        case Op::mse: return "mse";
        case Op::cross_entropy: return "cross_entropy";
        case Op::kl_div: return "kl_div";
    }
    return "?";
}

struct OpAttrs {
    double scalar = 1.0;            // scale
    double eps = 1e-6;              // layer_norm
    std::vector<int64_t> axes;      // mean/sum; empty = all axes
    std::vector<int64_t> perm;      // transpose
    Shape target_shape;             // reshape
    int64_t axis = 0;               // concat / slice / gather_rows
    int64_t start = 0;              // slice
    int64_t stop = 0;               // slice
    std::vector<int64_t> indices;   // gather_rows
    std::vector<int64_t> targets;   // cross_entropy (hard class ids)
};

// ----------------------------- graph node -----------------------------

inline int64_t next_node_id() {
    static std::atomic<int64_t> counter{0};
    return ++counter;
}

template <typename T>
struct Node;

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
    Op op = Op::leaf;
    std::vector<Var<T>> inputs;
    Tensor<T> value;
    Tensor<T> grad;                 // accumulated by backward, empty until then
    bool requires_grad = false;
    OpAttrs attrs;
    std::vector<Tensor<T>> saved;   // op-specific forward intermediates
    int64_t id = next_node_id();

    bool has_grad() const { return !grad.data.empty(); }
    Tensor<T>& grad_buffer() {
        if (!has_grad()) grad = Tensor<T>::zeros(value.shape);
        return grad;
    }
};

inline bool& grad_mode_flag() {
    thread_local bool v = true;
    return v;
}

inline bool grad_enabled() { return grad_mode_flag(); }

// Disables graph recording in scope; used for teacher forward passes.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

template <typename T>
Var<T> make_leaf(Tensor<T> value, bool requires_grad) {
    if (debug_checks() && !value.all_finite())
        throw Error("leaf tensor contains non-finite values, shape " + shape_str(value.shape));
    auto n = std::make_shared<Node<T>>();
    n->op = Op::leaf;
    n->value = std::move(value);
    n->value.requires_grad = requires_grad;
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return make_leaf(std::move(value), false);
}

// ----------------------------- shape helpers -----------------------------

namespace detail {

[[noreturn]] inline void op_fail(Op op, const std::string& msg) {
    throw Error(std::string("op ") + op_name(op) + ": " + msg);
}

// trailing-axis broadcast: shapes equal, one side a suffix of the other, or a
// singleton
inline bool is_suffix_of(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    size_t off = big.size() - small.size();
    for (size_t i = 0; i < small.size(); ++i)
        if (big[off + i] != small[i]) return false;
    return true;
}

inline bool broadcast_ok(const Shape& a, const Shape& b, Shape& out) {
    if (a == b) {
        out = a;
        return true;
    }
    if (shape_numel(b) == 1 || is_suffix_of(b, a)) {
        out = a;
        return true;
    }
    if (shape_numel(a) == 1 || is_suffix_of(a, b)) {
        out = b;
        return true;
    }
    return false;
}

inline std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

// split shape into (outer, axis_dim, inner) around `axis`
inline void axis_split(const Shape& s, int64_t axis, int64_t& outer, int64_t& dim, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
    dim = s[static_cast<size_t>(axis)];
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ----------------------------- forward kernels -----------------------------

namespace detail {

template <typename T>
Tensor<T> fw_elementwise(Op op, const Tensor<T>& a, const Tensor<T>& b) {
    Shape out_shape;
    if (!broadcast_ok(a.shape, b.shape, out_shape))
        op_fail(op, "shapes not broadcastable: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out(out_shape);
    int64_t n = out.numel(), an = a.numel(), bn = b.numel();
    for (int64_t i = 0; i < n; ++i) {
        T x = a[i % an], y = b[i % bn];
        out[i] = op == Op::add ? x + y : op == Op::sub ? x - y : x * y;
    }
    return out;
}

template <typename T>
Tensor<T> fw_matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() < 2 || b.ndim() < 2)
        op_fail(Op::matmul, "inputs must have >= 2 dims, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
    int64_t m = a.shape[a.shape.size() - 2], k = a.shape[a.shape.size() - 1];
    int64_t k2 = b.shape[b.shape.size() - 2], n = b.shape[b.shape.size() - 1];
    if (k != k2)
        op_fail(Op::matmul, "inner dims differ: " + shape_str(a.shape) + " x " + shape_str(b.shape));
    Shape lead_a(a.shape.begin(), a.shape.end() - 2);
    Shape lead_b(b.shape.begin(), b.shape.end() - 2);
    bool b_shared = lead_b.empty() && !lead_a.empty();
    if (!b_shared && lead_a != lead_b)
        op_fail(Op::matmul, "leading dims differ: " + shape_str(a.shape) + " x " + shape_str(b.shape));
    int64_t batch = shape_numel(lead_a);
    Shape out_shape = lead_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<T> out(out_shape);
    const T* ap = a.data.data();
    const T* bp = b.data.data();
    T* op_ = out.data.data();
    parallel_for(batch * m, 8, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            int64_t bi = r / m, i = r % m;
            const T* arow = ap + (bi * m + i) * k;
            const T* bmat = bp + (b_shared ? 0 : bi * k * n);
            T* orow = op_ + (bi * m + i) * n;
            for (int64_t j = 0; j < n; ++j) orow[j] = T(0);
            for (int64_t kk = 0; kk < k; ++kk) {
                T av = arow[kk];
                const T* brow = bmat + kk * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    });
    return out;
}

template <typename T>
T gelu_scalar(T x) {
    return T(0.5) * x * (T(1) + static_cast<T>(std::erf(static_cast<double>(x) / 1.4142135623730950488)));
}

template <typename T>
T gelu_grad_scalar(T x) {
    double xd = static_cast<double>(x);
    double cdf = 0.5 * (1.0 + std::erf(xd / 1.4142135623730950488));
    double pdf = std::exp(-0.5 * xd * xd) / 2.5066282746310005024;
    return static_cast<T>(cdf + xd * pdf);
}

// returns reduced-axis bookkeeping for mean/sum
struct ReducePlan {
    Shape out_shape;
    std::vector<int64_t> out_mult;  // per input axis: out stride if kept, 0 if reduced
    int64_t count = 1;
};

inline ReducePlan reduce_plan(Op op, const Shape& in, const std::vector<int64_t>& axes) {
    size_t nd = in.size();
    std::vector<bool> reduced(nd, false);
    if (axes.empty()) {
        std::fill(reduced.begin(), reduced.end(), true);
    } else {
        for (int64_t ax : axes) {
            if (ax < 0 || ax >= static_cast<int64_t>(nd))
                op_fail(op, "axis " + std::to_string(ax) + " out of range for " + shape_str(in));
            if (reduced[static_cast<size_t>(ax)]) op_fail(op, "duplicate axis " + std::to_string(ax));
            reduced[static_cast<size_t>(ax)] = true;
        }
    }
    ReducePlan plan;
    for (size_t i = 0; i < nd; ++i) {
        if (reduced[i]) plan.count *= in[i];
        else plan.out_shape.push_back(in[i]);
    }
    if (plan.out_shape.empty()) plan.out_shape = {1};
    // strides over kept axes only
    plan.out_mult.assign(nd, 0);
    int64_t acc = 1;
    for (size_t i = nd; i-- > 0;) {
        if (!reduced[i]) {
            plan.out_mult[i] = acc;
            acc *= in[i];
        }
    }
    return plan;
}

template <typename T>
void for_each_reduced(const Tensor<T>& in, const ReducePlan& plan,
                      const std::function<void(int64_t in_flat, int64_t out_flat)>& fn) {
    size_t nd = in.shape.size();
    std::vector<int64_t> coord(nd, 0);
    int64_t n = in.numel();
    for (int64_t i = 0; i < n; ++i) {
        int64_t out_flat = 0;
        for (size_t d = 0; d < nd; ++d) out_flat += coord[d] * plan.out_mult[d];
        fn(i, out_flat);
        for (size_t d = nd; d-- > 0;) {
            if (++coord[d] < in.shape[d]) break;
            coord[d] = 0;
        }
    }
}

template <typename T>
Tensor<T> fw_transpose(const Tensor<T>& in, const std::vector<int64_t>& perm) {
    size_t nd = in.shape.size();
    if (perm.size() != nd) op_fail(Op::transpose, "perm rank != tensor rank for " + shape_str(in.shape));
    std::vector<bool> seen(nd, false);
    Shape out_shape(nd);
    for (size_t i = 0; i < nd; ++i) {
        int64_t p = perm[i];
        if (p < 0 || p >= static_cast<int64_t>(nd) || seen[static_cast<size_t>(p)])
            op_fail(Op::transpose, "invalid permutation");
        seen[static_cast<size_t>(p)] = true;
        out_shape[i] = in.shape[static_cast<size_t>(p)];
    }
    Tensor<T> out(out_shape);
    auto in_strides = strides_of(in.shape);
    std::vector<int64_t> coord(nd, 0);
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
        int64_t src = 0;
        for (size_t d = 0; d < nd; ++d) src += coord[d] * in_strides[static_cast<size_t>(perm[d])];
        out[i] = in[src];
        for (size_t d = nd; d-- > 0;) {
            if (++coord[d] < out.shape[d]) break;
            coord[d] = 0;
        }
    }
    return out;
}

}  // namespace detail

// ----------------------------- apply -----------------------------

template <typename T>
Var<T> apply(Op op, const std::vector<Var<T>>& inputs, OpAttrs attrs = {});

namespace detail {

template <typename T>
Tensor<T> forward_compute(Op op, const std::vector<Var<T>>& in, OpAttrs& attrs,
                          std::vector<Tensor<T>>& saved) {
    auto need = [&](size_t n) {
        if (in.size() != n)
            op_fail(op, "expects " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
    };
    switch (op) {
        case Op::leaf:
            op_fail(op, "cannot apply leaf");
        case Op::add:
        case Op::sub:
        case Op::mul:
            need(2);
            return fw_elementwise(op, in[0]->value, in[1]->value);
        case Op::scale: {
            need(1);
            Tensor<T> out = in[0]->value;
            T s = static_cast<T>(attrs.scalar);
            for (auto& v : out.data) v *= s;
            return out;
        }
        case Op::matmul:
            need(2);
            return fw_matmul(in[0]->value, in[1]->value);
        case Op::gelu: {
            need(1);
            Tensor<T> out = in[0]->value;
            for (auto& v : out.data) v = gelu_scalar(v);
            return out;
        }
        case Op::layer_norm: {
            need(3);
            const Tensor<T>& x = in[0]->value;
            const Tensor<T>& gamma = in[1]->value;
            const Tensor<T>& beta = in[2]->value;
            if (x.ndim() < 1) op_fail(op, "input must have >= 1 dim");
            int64_t d = x.shape.back();
            if (gamma.shape != Shape{d} || beta.shape != Shape{d})
                op_fail(op, "affine params must be [" + std::to_string(d) + "], got " +
                                shape_str(gamma.shape) + " and " + shape_str(beta.shape));
            int64_t rows = x.numel() / d;
            Tensor<T> out(x.shape);
            Tensor<T> xhat(x.shape);
            Tensor<T> rstd({std::max<int64_t>(rows, 1)});
            T eps = static_cast<T>(attrs.eps);
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = x.data.data() + r * d;
                T mu = 0;
                for (int64_t j = 0; j < d; ++j) mu += xr[j];
                mu /= static_cast<T>(d);
                T var = 0;
                for (int64_t j = 0; j < d; ++j) {
                    T c = xr[j] - mu;
                    var += c * c;
                }
                var /= static_cast<T>(d);
                T rs = T(1) / static_cast<T>(std::sqrt(static_cast<double>(var + eps)));
                rstd[r] = rs;
                for (int64_t j = 0; j < d; ++j) {
                    T xh = (xr[j] - mu) * rs;
                    xhat[r * d + j] = xh;
                    out[r * d + j] = xh * gamma[j] + beta[j];
                }
            }
            saved.push_back(std::move(xhat));
            saved.push_back(std::move(rstd));
            return out;
        }
        case Op::softmax:
        case Op::log_softmax: {
            need(1);
            const Tensor<T>& x = in[0]->value;
            if (x.ndim() < 1) op_fail(op, "input must have >= 1 dim");
            int64_t d = x.shape.back();
            int64_t rows = x.numel() / d;
            Tensor<T> out(x.shape);
            Tensor<T> probs(x.shape);
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = x.data.data() + r * d;
                T mx = xr[0];
                for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
                T sum = 0;
                for (int64_t j = 0; j < d; ++j) sum += static_cast<T>(std::exp(static_cast<double>(xr[j] - mx)));
                T lse = mx + static_cast<T>(std::log(static_cast<double>(sum)));
                for (int64_t j = 0; j < d; ++j) {
                    T lp = xr[j] - lse;
                    T p = static_cast<T>(std::exp(static_cast<double>(lp)));
                    probs[r * d + j] = p;
                    out[r * d + j] = op == Op::softmax ? p : lp;
                }
            }
            saved.push_back(std::move(probs));
            return out;
        }
        case Op::mean:
        case Op::sum: {
            need(1);
            const Tensor<T>& x = in[0]->value;
            ReducePlan plan = reduce_plan(op, x.shape, attrs.axes);
            Tensor<T> out(plan.out_shape);
            for_each_reduced(x, plan, [&](int64_t i, int64_t o) { out[o] += x[i]; });
            if (op == Op::mean) {
                T inv = T(1) / static_cast<T>(plan.count);
                for (auto& v : out.data) v *= inv;
            }
            return out;
        }
        case Op::reshape: {
            need(1);
            const Tensor<T>& x = in[0]->value;
            if (shape_numel(attrs.target_shape) != x.numel())
                op_fail(op, "cannot reshape " + shape_str(x.shape) + " to " + shape_str(attrs.target_shape));
            Tensor<T> out = x;
            out.shape = attrs.target_shape;
            return out;
        }
        case Op::transpose:
            need(1);
            return fw_transpose(in[0]->value, attrs.perm);
        case Op::concat: {
            if (in.empty()) op_fail(op, "needs at least one input");
            const Shape& s0 = in[0]->value.shape;
            int64_t axis = attrs.axis;
            if (axis < 0 || axis >= static_cast<int64_t>(s0.size()))
                op_fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(s0));
            Shape out_shape = s0;
            int64_t total = 0;
            for (const auto& v : in) {
                const Shape& s = v->value.shape;
                if (s.size() != s0.size()) op_fail(op, "rank mismatch: " + shape_str(s0) + " vs " + shape_str(s));
                for (size_t d = 0; d < s.size(); ++d)
                    if (static_cast<int64_t>(d) != axis && s[d] != s0[d])
                        op_fail(op, "non-axis dims differ: " + shape_str(s0) + " vs " + shape_str(s));
                total += s[static_cast<size_t>(axis)];
            }
            out_shape[static_cast<size_t>(axis)] = total;
            Tensor<T> out(out_shape);
            int64_t outer, dim0, inner;
            axis_split(out_shape, axis, outer, dim0, inner);
            int64_t off = 0;
            for (const auto& v : in) {
                const Tensor<T>& x = v->value;
                int64_t d = x.shape[static_cast<size_t>(axis)];
                for (int64_t o = 0; o < outer; ++o)
                    std::copy(x.data.begin() + o * d * inner, x.data.begin() + (o + 1) * d * inner,
                              out.data.begin() + (o * dim0 + off) * inner);
                off += d;
            }
            return out;
        }
        case Op::slice: {
            need(1);
            const Tensor<T>& x = in[0]->value;
            int64_t axis = attrs.axis;
            if (axis < 0 || axis >= x.ndim())
                op_fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape));
            int64_t d = x.shape[static_cast<size_t>(axis)];
            if (attrs.start < 0 || attrs.stop > d || attrs.start >= attrs.stop)
                op_fail(op, "range [" + std::to_string(attrs.start) + "," + std::to_string(attrs.stop) +
                                ") invalid for axis size " + std::to_string(d));
            Shape out_shape = x.shape;
            out_shape[static_cast<size_t>(axis)] = attrs.stop - attrs.start;
            Tensor<T> out(out_shape);
            int64_t outer, dim, inner;
            axis_split(x.shape, axis, outer, dim, inner);
            int64_t w = attrs.stop - attrs.start;
            for (int64_t o = 0; o < outer; ++o)
                std::copy(x.data.begin() + (o * dim + attrs.start) * inner,
                          x.data.begin() + (o * dim + attrs.stop) * inner,
                          out.data.begin() + o * w * inner);
            return out;
        }
        case Op::gather_rows: {
            need(1);
            const Tensor<T>& x = in[0]->value;
            int64_t axis = attrs.axis;
            if (axis < 0 || axis >= x.ndim())
                op_fail(op, "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape));
            int64_t d = x.shape[static_cast<size_t>(axis)];
            if (attrs.indices.empty()) op_fail(op, "empty index list");
            for (int64_t ix : attrs.indices)
                if (ix < 0 || ix >= d)
                    op_fail(op, "index " + std::to_string(ix) + " out of range for axis size " + std::to_string(d));
            Shape out_shape = x.shape;
            out_shape[static_cast<size_t>(axis)] = static_cast<int64_t>(attrs.indices.size());
            Tensor<T> out(out_shape);
            int64_t outer, dim, inner;
            axis_split(x.shape, axis, outer, dim, inner);
            int64_t w = static_cast<int64_t>(attrs.indices.size());
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < w; ++j)
                    std::copy(x.data.begin() + (o * dim + attrs.indices[static_cast<size_t>(j)]) * inner,
                              x.data.begin() + (o * dim + attrs.indices[static_cast<size_t>(j)] + 1) * inner,
                              out.data.begin() + (o * w + j) * inner);
            return out;
        }
        case Op::mse: {
            need(2);
            const Tensor<T>& a = in[0]->value;
            const Tensor<T>& b = in[1]->value;
            if (a.shape != b.shape)
                op_fail(op, "shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
            double acc = 0;
            for (int64_t i = 0; i < a.numel(); ++i) {
                double c = static_cast<double>(a[i]) - static_cast<double>(b[i]);
                acc += c * c;
            }
            return Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(a.numel())));
        }
        case Op::cross_entropy: {
            need(1);
            const Tensor<T>& logits = in[0]->value;
            if (logits.ndim() != 2) op_fail(op, "logits must be 2-D, got " + shape_str(logits.shape));
            int64_t bsz = logits.shape[0], k = logits.shape[1];
            if (static_cast<int64_t>(attrs.targets.size()) != bsz)
                op_fail(op, "targets length " + std::to_string(attrs.targets.size()) +
                                " != batch " + std::to_string(bsz));
            for (int64_t t : attrs.targets)
                if (t < 0 || t >= k) op_fail(op, "target " + std::to_string(t) + " out of range K=" + std::to_string(k));
            std::vector<Tensor<T>> inner_saved;
            OpAttrs none;
            Tensor<T> lsm = forward_compute(Op::log_softmax, in, none, inner_saved);
            double acc = 0;
            for (int64_t i = 0; i < bsz; ++i)
                acc -= static_cast<double>(lsm[i * k + attrs.targets[static_cast<size_t>(i)]]);
            saved.push_back(std::move(inner_saved[0]));  // softmax probs
            return Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(bsz)));
        }
        case Op::kl_div: {
            need(2);
            const Tensor<T>& s_logits = in[0]->value;
            const Tensor<T>& t_logits = in[1]->value;
            if (s_logits.ndim() != 2 || s_logits.shape != t_logits.shape)
                op_fail(op, "expects matching 2-D logits, got " + shape_str(s_logits.shape) + " vs " +
                                shape_str(t_logits.shape));
            int64_t bsz = s_logits.shape[0], k = s_logits.shape[1];
            std::vector<Tensor<T>> sv_s, sv_t;
            OpAttrs none;
            Tensor<T> lp_s = forward_compute(Op::log_softmax, std::vector<Var<T>>{in[0]}, none, sv_s);
            Tensor<T> lp_t = forward_compute(Op::log_softmax, std::vector<Var<T>>{in[1]}, none, sv_t);
            Tensor<T>& p_s = sv_s[0];
            Tensor<T>& p_t = sv_t[0];
            Tensor<T> logdiff(s_logits.shape);
            Tensor<T> rowkl({bsz});
            double acc = 0;
            for (int64_t i = 0; i < bsz; ++i) {
                double row = 0;
                for (int64_t j = 0; j < k; ++j) {
                    T ld = lp_t[i * k + j] - lp_s[i * k + j];
                    logdiff[i * k + j] = ld;
                    row += static_cast<double>(p_t[i * k + j]) * static_cast<double>(ld);
                }
                rowkl[i] = static_cast<T>(row);
                acc += row;
            }
            saved.push_back(std::move(p_s));
            saved.push_back(std::move(p_t));
            saved.push_back(std::move(logdiff));
            saved.push_back(std::move(rowkl));
            return Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(bsz)));
        }
    }
    op_fail(op, "unhandled op");
}

}  // namespace detail

template <typename T>
Var<T> apply(Op op, const std::vector<Var<T>>& inputs, OpAttrs attrs) {
    auto node = std::make_shared<Node<T>>();
    node->op = op;
    node->attrs = std::move(attrs);
    std::vector<Tensor<T>> saved;
    node->value = detail::forward_compute(op, inputs, node->attrs, saved);
    if (debug_checks() && !node->value.all_finite())
        throw Error(std::string("op ") + op_name(op) + ": non-finite values in output");
    bool track = grad_enabled();
    bool any_rg = false;
    for (const auto& v : inputs) any_rg = any_rg || v->requires_grad;
    if (track && any_rg) {
        node->inputs = inputs;
        node->requires_grad = true;
        node->saved = std::move(saved);
    }
    return node;
}

// ----------------------------- wrappers -----------------------------

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b) { return proteus::apply(Op::matmul, std::vector<Var<T>>{a, b}); }
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b) { return proteus::apply(Op::add, std::vector<Var<T>>{a, b}); }
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b) { return proteus::apply(Op::sub, std::vector<Var<T>>{a, b}); }
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b) { return proteus::apply(Op::mul, std::vector<Var<T>>{a, b}); }

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
    OpAttrs at;
    at.scalar = s;
    return proteus::apply(Op::scale, std::vector<Var<T>>{a}, at);
}

template <typename T> Var<T> gelu(const Var<T>& a) { return proteus::apply(Op::gelu, std::vector<Var<T>>{a}); }

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = 1e-6) {
    OpAttrs at;
    at.eps = eps;
    return proteus::apply(Op::layer_norm, std::vector<Var<T>>{x, gamma, beta}, at);
}

template <typename T> Var<T> softmax(const Var<T>& a) { return proteus::apply(Op::softmax, std::vector<Var<T>>{a}); }
template <typename T> Var<T> log_softmax(const Var<T>& a) { return proteus::apply(Op::log_softmax, std::vector<Var<T>>{a}); }

template <typename T>
Var<T> mean_axes(const Var<T>& a, std::vector<int64_t> axes = {}) {
    OpAttrs at;
    at.axes = std::move(axes);
    return proteus::apply(Op::mean, std::vector<Var<T>>{a}, at);
}

template <typename T>
Var<T> sum_axes(const Var<T>& a, std::vector<int64_t> axes = {}) {
    OpAttrs at;
    at.axes = std::move(axes);
    return proteus::apply(Op::sum, std::vector<Var<T>>{a}, at);
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape target) {
    OpAttrs at;
    at.target_shape = std::move(target);
    return proteus::apply(Op::reshape, std::vector<Var<T>>{a}, at);
}

template <typename T>
Var<T> transpose(const Var<T>& a, std::vector<int64_t> perm) {
    OpAttrs at;
    at.perm = std::move(perm);
    return proteus::apply(Op::transpose, std::vector<Var<T>>{a}, at);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int64_t axis) {
    OpAttrs at;
    at.axis = axis;
    return proteus::apply(Op::concat, xs, at);
}

template <typename T>
Var<T> slice(const Var<T>& a, int64_t axis, int64_t start, int64_t stop) {
    OpAttrs at;
    at.axis = axis;
    at.start = start;
    at.stop = stop;
    return proteus::apply(Op::slice, std::vector<Var<T>>{a}, at);
}

template <typename T>
Var<T> gather_rows(const Var<T>& a, int64_t axis, std::vector<int64_t> indices) {
    OpAttrs at;
    at.axis = axis;
    at.indices = std::move(indices);
    return proteus::apply(Op::gather_rows, std::vector<Var<T>>{a}, at);
}

template <typename T> Var<T> mse(const Var<T>& a, const Var<T>& b) { return proteus::apply(Op::mse, std::vector<Var<T>>{a, b}); }

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::vector<int64_t> targets) {
    OpAttrs at;
    at.targets = std::move(targets);
    return proteus::apply(Op::cross_entropy, std::vector<Var<T>>{logits}, at);
}

// KL of softmax(teacher_logits) against log_softmax(student_logits), mean over
// batch; both sides go through log_softmax internally for stability
template <typename T>
Var<T> kl_div(const Var<T>& student_logits, const Var<T>& teacher_logits) {
    return proteus::apply(Op::kl_div, std::vector<Var<T>>{student_logits, teacher_logits});
}

// ----------------------------- GradMap & backward -----------------------------

template <typename T>
class GradMap {
public:
    void put(int64_t id, Tensor<T> g) { grads_[id] = std::move(g); }

    bool contains(const Var<T>& v) const { return grads_.count(v->id) != 0; }

    const Tensor<T>& at(const Var<T>& v) const {
        auto it = grads_.find(v->id);
        if (it == grads_.end()) throw Error("GradMap: no gradient recorded for node " + std::to_string(v->id));
        return it->second;
    }

    // zero tensor for registered-but-non-participating leaves
    Tensor<T> get_or_zero(const Var<T>& v) const {
        auto it = grads_.find(v->id);
        if (it != grads_.end()) return it->second;
        return Tensor<T>::zeros(v->value.shape);
    }

    const Tensor<T>* find(const Var<T>& v) const {
        auto it = grads_.find(v->id);
        return it == grads_.end() ? nullptr : &it->second;
    }

    size_t size() const { return grads_.size(); }

    std::unordered_map<int64_t, Tensor<T>>& items() { return grads_; }
    const std::unordered_map<int64_t, Tensor<T>>& items() const { return grads_; }

    double global_norm() const {
        double acc = 0;
        for (const auto& [id, g] : grads_)
            for (T v : g.data) acc += static_cast<double>(v) * static_cast<double>(v);
        return std::sqrt(acc);
    }

private:
    std::unordered_map<int64_t, Tensor<T>> grads_;
};

namespace detail {

template <typename T>
void reduce_into(const Tensor<T>& g_big, Tensor<T>& g_small_buf, double sign = 1.0) {
    int64_t n = g_big.numel(), m = g_small_buf.numel();
    T s = static_cast<T>(sign);
    for (int64_t i = 0; i < n; ++i) g_small_buf[i % m] += s * g_big[i];
}

template <typename T>
void backward_dispatch(Node<T>* node) {
    const Tensor<T>& g = node->grad;
    auto in = [&](size_t i) -> Node<T>* { return node->inputs[i].get(); };
    auto wants = [&](size_t i) { return node->inputs[i]->requires_grad; };
    switch (node->op) {
        case Op::leaf:
            return;
        case Op::add:
        case Op::sub: {
            double sign1 = node->op == Op::sub ? -1.0 : 1.0;
            if (wants(0)) reduce_into(g, in(0)->grad_buffer());
            if (wants(1)) reduce_into(g, in(1)->grad_buffer(), sign1);
            return;
        }
        case Op::mul: {
            const Tensor<T>& a = in(0)->value;
            const Tensor<T>& b = in(1)->value;
            int64_t n = g.numel(), an = a.numel(), bn = b.numel();
            Tensor<T>* ga = wants(0) ? &in(0)->grad_buffer() : nullptr;
            Tensor<T>* gb = wants(1) ? &in(1)->grad_buffer() : nullptr;
            for (int64_t i = 0; i < n; ++i) {
                if (ga) (*ga)[i % an] += g[i] * b[i % bn];
                if (gb) (*gb)[i % bn] += g[i] * a[i % an];
            }
            return;
        }
        case Op::scale: {
            if (!wants(0)) return;
            Tensor<T>& ga = in(0)->grad_buffer();
            T s = static_cast<T>(node->attrs.scalar);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s;
            return;
        }
        case Op::matmul: {
            const Tensor<T>& a = in(0)->value;
            const Tensor<T>& b = in(1)->value;
            int64_t m = a.shape[a.shape.size() - 2], k = a.shape[a.shape.size() - 1];
            int64_t n = b.shape[b.shape.size() - 1];
            bool b_shared = b.ndim() == 2 && a.ndim() > 2;
            int64_t batch = a.numel() / (m * k);
            Tensor<T>* ga = wants(0) ? &in(0)->grad_buffer() : nullptr;
            Tensor<T>* gb = wants(1) ? &in(1)->grad_buffer() : nullptr;
            for (int64_t bi = 0; bi < batch; ++bi) {
                const T* gp = g.data.data() + bi * m * n;
                const T* ap = a.data.data() + bi * m * k;
                const T* bp = b.data.data() + (b_shared ? 0 : bi * k * n);
                if (ga) {
                    T* gap = ga->data.data() + bi * m * k;
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < n; ++j) {
                            T gv = gp[i * n + j];
                            const T* brow = bp + j;
                            for (int64_t kk = 0; kk < k; ++kk) gap[i * k + kk] += gv * brow[kk * n];
                        }
                }
                if (gb) {
                    T* gbp = gb->data.data() + (b_shared ? 0 : bi * k * n);
                    for (int64_t kk = 0; kk < k; ++kk)
                        for (int64_t i = 0; i < m; ++i) {
                            T av = ap[i * k + kk];
                            for (int64_t j = 0; j < n; ++j) gbp[kk * n + j] += av * gp[i * n + j];
                        }
                }
            }
            return;
        }
        case Op::gelu: {
            if (!wants(0)) return;
            const Tensor<T>& x = in(0)->value;
            Tensor<T>& ga = in(0)->grad_buffer();
            for (int64_t i = 0; i < x.numel(); ++i) ga[i] += g[i] * gelu_grad_scalar(x[i]);
            return;
        }
        case Op::layer_norm: {
            const Tensor<T>& xhat = node->saved[0];
            const Tensor<T>& rstd = node->saved[1];
            const Tensor<T>& gamma = in(1)->value;
            int64_t d = xhat.shape.back();
            int64_t rows = xhat.numel() / d;
            Tensor<T>* gx = wants(0) ? &in(0)->grad_buffer() : nullptr;
            Tensor<T>* gg = wants(1) ? &in(1)->grad_buffer() : nullptr;
            Tensor<T>* gb = wants(2) ? &in(2)->grad_buffer() : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                const T* gr = g.data.data() + r * d;
                const T* xh = xhat.data.data() + r * d;
                if (gx) {
                    T m1 = 0, m2 = 0;
                    for (int64_t j = 0; j < d; ++j) {
                        T dxh = gr[j] * gamma[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= static_cast<T>(d);
                    m2 /= static_cast<T>(d);
                    T rs = rstd[r];
                    T* gxr = gx->data.data() + r * d;
                    for (int64_t j = 0; j < d; ++j)
                        gxr[j] += rs * (gr[j] * gamma[j] - m1 - xh[j] * m2);
                }
                if (gg)
                    for (int64_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * xh[j];
                if (gb)
                    for (int64_t j = 0; j < d; ++j) (*gb)[j] += gr[j];
            }
            return;
        }
        case Op::softmax: {
            if (!wants(0)) return;
            const Tensor<T>& y = node->saved[0];
            int64_t d = y.shape.back();
            int64_t rows = y.numel() / d;
            Tensor<T>& ga = in(0)->grad_buffer();
            for (int64_t r = 0; r < rows; ++r) {
                T dot = 0;
                for (int64_t j = 0; j < d; ++j) dot += g[r * d + j] * y[r * d + j];
                for (int64_t j = 0; j < d; ++j) ga[r * d + j] += y[r * d + j] * (g[r * d + j] - dot);
            }
            return;
        }
        case Op::log_softmax: {
            if (!wants(0)) return;
            const Tensor<T>& p = node->saved[0];
            int64_t d = p.shape.back();
            int64_t rows = p.numel() / d;
            Tensor<T>& ga = in(0)->grad_buffer();
            for (int64_t r = 0; r < rows; ++r) {
                T sg = 0;
                for (int64_t j = 0; j < d; ++j) sg += g[r * d + j];
                for (int64_t j = 0; j < d; ++j) ga[r * d + j] += g[r * d + j] - p[r * d + j] * sg;
            }
            return;
        }
        case Op::mean:
        case Op::sum: {
            if (!wants(0)) return;
            const Tensor<T>& x = in(0)->value;
            ReducePlan plan = reduce_plan(node->op, x.shape, node->attrs.axes);
            Tensor<T>& ga = in(0)->grad_buffer();
            T inv = node->op == Op::mean ? T(1) / static_cast<T>(plan.count) : T(1);
            for_each_reduced(x, plan, [&](int64_t i, int64_t o) { ga[i] += g[o] * inv; });
            return;
        }
        case Op::reshape: {
            if (!wants(0)) return;
            Tensor<T>& ga = in(0)->grad_buffer();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            return;
        }
        case Op::transpose: {
            if (!wants(0)) return;
            const auto& perm = node->attrs.perm;
            std::vector<int64_t> inv(perm.size());
            for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
            Tensor<T> gt = fw_transpose(g, inv);
            Tensor<T>& ga = in(0)->grad_buffer();
            for (int64_t i = 0; i < gt.numel(); ++i) ga[i] += gt[i];
            return;
        }
        case Op::concat: {
            int64_t axis = node->attrs.axis;
            int64_t outer, dim, inner;
            axis_split(g.shape, axis, outer, dim, inner);
            int64_t off = 0;
            for (size_t idx = 0; idx < node->inputs.size(); ++idx) {
                const Tensor<T>& x = node->inputs[idx]->value;
                int64_t d = x.shape[static_cast<size_t>(axis)];
                if (wants(idx)) {
                    Tensor<T>& ga = in(idx)->grad_buffer();
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t j = 0; j < d * inner; ++j)
                            ga[o * d * inner + j] += g[(o * dim + off) * inner + j];
                }
                off += d;
            }
            return;
        }
        case Op::slice: {
            if (!wants(0)) return;
            const Tensor<T>& x = in(0)->value;
            int64_t axis = node->attrs.axis;
            int64_t outer, dim, inner;
            axis_split(x.shape, axis, outer, dim, inner);
            int64_t w = node->attrs.stop - node->attrs.start;
            Tensor<T>& ga = in(0)->grad_buffer();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < w * inner; ++j)
                    ga[(o * dim + node->attrs.start) * inner + j] += g[o * w * inner + j];
            return;
        }
        case Op::gather_rows: {
            if (!wants(0)) return;
            const Tensor<T>& x = in(0)->value;
            int64_t axis = node->attrs.axis;
            int64_t outer, dim, inner;
            axis_split(x.shape, axis, outer, dim, inner);
            const auto& idxs = node->attrs.indices;
            int64_t w = static_cast<int64_t>(idxs.size());
            Tensor<T>& ga = in(0)->grad_buffer();
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t j = 0; j < w; ++j)
                    for (int64_t t = 0; t < inner; ++t)
                        ga[(o * dim + idxs[static_cast<size_t>(j)]) * inner + t] += g[(o * w + j) * inner + t];
            return;
        }
        case Op::mse: {
            const Tensor<T>& a = in(0)->value;
            const Tensor<T>& b = in(1)->value;
            T c = g[0] * T(2) / static_cast<T>(a.numel());
            Tensor<T>* ga = wants(0) ? &in(0)->grad_buffer() : nullptr;
            Tensor<T>* gb = wants(1) ? &in(1)->grad_buffer() : nullptr;
            for (int64_t i = 0; i < a.numel(); ++i) {
                T d = (a[i] - b[i]) * c;
                if (ga) (*ga)[i] += d;
                if (gb) (*gb)[i] -= d;
            }
            return;
        }
        case Op::cross_entropy: {
            if (!wants(0)) return;
            const Tensor<T>& p = node->saved[0];
            int64_t bsz = p.shape[0], k = p.shape[1];
            T c = g[0] / static_cast<T>(bsz);
            Tensor<T>& ga = in(0)->grad_buffer();
            for (int64_t i = 0; i < bsz; ++i) {
                int64_t y = node->attrs.targets[static_cast<size_t>(i)];
                for (int64_t j = 0; j < k; ++j)
                    ga[i * k + j] += c * (p[i * k + j] - (j == y ? T(1) : T(0)));
            }
            return;
        }
        case Op::kl_div: {
            const Tensor<T>& p_s = node->saved[0];
            const Tensor<T>& p_t = node->saved[1];
            const Tensor<T>& logdiff = node->saved[2];
            const Tensor<T>& rowkl = node->saved[3];
            int64_t bsz = p_s.shape[0], k = p_s.shape[1];
            T c = g[0] / static_cast<T>(bsz);
            Tensor<T>* gs = wants(0) ? &in(0)->grad_buffer() : nullptr;
            Tensor<T>* gt = wants(1) ? &in(1)->grad_buffer() : nullptr;
            for (int64_t i = 0; i < bsz; ++i)
                for (int64_t j = 0; j < k; ++j) {
                    if (gs) (*gs)[i * k + j] += c * (p_s[i * k + j] - p_t[i * k + j]);
                    if (gt) (*gt)[i * k + j] += c * p_t[i * k + j] * (logdiff[i * k + j] - rowkl[i]);
                }
            return;
        }
    }
}

}  // namespace detail

// Reverse-mode gradients of a scalar loss w.r.t. every requires_grad leaf
// reachable from it. Each node is visited exactly once, in reverse
// topological order.
template <typename T>
GradMap<T> backward(const Var<T>& loss) {
    if (loss->value.numel() != 1)
        throw Error("backward: loss must be scalar, got shape " + shape_str(loss->value.shape));
    // iterative post-order DFS
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    struct Frame {
        Node<T>* node;
        size_t next_child;
    };
    std::vector<Frame> stack;
    if (loss->requires_grad) {
        stack.push_back({loss.get(), 0});
        seen.insert(loss.get());
    }
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child < f.node->inputs.size()) {
            Node<T>* child = f.node->inputs[f.next_child++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    GradMap<T> out;
    if (order.empty()) return out;  // loss does not depend on any parameter
    loss->grad = Tensor<T>::scalar(T(1));
    loss->grad.shape = loss->value.shape;
    for (size_t i = order.size(); i-- > 0;) {
        Node<T>* node = order[i];
        if (!node->has_grad()) continue;  // unreachable via differentiable path
        detail::backward_dispatch(node);
        if (node->op == Op::leaf) {
            if (debug_checks() && !node->grad.all_finite())
                throw Error("backward: non-finite gradient for leaf node " + std::to_string(node->id));
            out.put(node->id, std::move(node->grad));
        }
        node->grad = Tensor<T>();  // release buffer
    }
    return out;
}

}  // namespace proteus
