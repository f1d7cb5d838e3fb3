#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flexssm {

using Shape = std::vector<std::int64_t>;

// thrown when an operation produces NaN/Inf or a training step blows up
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ')';
    return os.str();
}

// Explicit sparse linear operator over the leading axis: row r of the output is
// sum_j w[r,j] * input_row[col[r,j]]. The adjoint is the transpose, which is
// what makes backprop through resize operators exact.
struct SparseLinearMap {
    std::int64_t src_rows = 0;
    std::int64_t dst_rows = 0;
    std::vector<std::int64_t> row_ptr; // dst_rows + 1
    std::vector<std::int64_t> col;
    std::vector<double> w;

    SparseLinearMap transposed() const {
        SparseLinearMap t;
        t.src_rows = dst_rows;
        t.dst_rows = src_rows;
        t.row_ptr.assign(std::size_t(src_rows) + 1, 0);
        for (auto c : col) t.row_ptr[std::size_t(c) + 1]++;
        for (std::int64_t r = 0; r < src_rows; ++r) t.row_ptr[std::size_t(r) + 1] += t.row_ptr[std::size_t(r)];
        t.col.resize(col.size());
        t.w.resize(w.size());
        std::vector<std::int64_t> cursor(t.row_ptr.begin(), t.row_ptr.end() - 1);
        for (std::int64_t r = 0; r < dst_rows; ++r) {
            for (std::int64_t k = row_ptr[std::size_t(r)]; k < row_ptr[std::size_t(r) + 1]; ++k) {
                const auto pos = std::size_t(cursor[std::size_t(col[std::size_t(k)])]++);
                t.col[pos] = r;
                t.w[pos] = w[std::size_t(k)];
            }
        }
        return t;
    }
};

// row permutation that reverses the leading axis
inline SparseLinearMap reversal_map(std::int64_t n) {
    SparseLinearMap m;
    m.src_rows = m.dst_rows = n;
    m.row_ptr.resize(std::size_t(n) + 1);
    m.col.resize(std::size_t(n));
    m.w.assign(std::size_t(n), 1.0);
    for (std::int64_t i = 0; i <= n; ++i) m.row_ptr[std::size_t(i)] = i;
    for (std::int64_t i = 0; i < n; ++i) m.col[std::size_t(i)] = n - 1 - i;
    return m;
}

template <typename S> class Tape;

// Cheap handle into a tape. Values never mutate once recorded; the reverse pass
// relies on that.
template <typename S>
struct Tensor {
    Tape<S>* tape = nullptr;
    std::int64_t id = -1;

    const Shape& shape() const { return tape->shape(id); }
    std::int64_t numel() const { return flexssm::numel(shape()); }
    const std::vector<S>& value() const { return tape->value(id); }
    const std::vector<S>& grad() const { return tape->grad(id); }
    S item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar " + shape_str(shape()));
        return value()[0];
    }
};

template <typename S>
class Tape {
public:
    struct Node {
        Shape shape;
        std::vector<S> value;
        std::vector<S> grad; // sized lazily during backward
        std::vector<std::int64_t> parents;
        std::function<void(Tape&, std::int64_t)> backward;
        bool requires_grad = false;
    };

    bool recording = true;    // false: values only, no graph (evaluation mode)
    bool check_finite = true; // every op verifies its output is finite

    std::int64_t size() const { return std::int64_t(nodes_.size()); }
    std::uint64_t op_count() const { return op_count_; }
    void count_ops(std::uint64_t n) { op_count_ += n; }

    const Shape& shape(std::int64_t id) const { return nodes_[std::size_t(id)].shape; }
    const std::vector<S>& value(std::int64_t id) const { return nodes_[std::size_t(id)].value; }
    bool requires_grad(std::int64_t id) const { return nodes_[std::size_t(id)].requires_grad; }

    const std::vector<S>& grad(std::int64_t id) const {
        auto& n = nodes_[std::size_t(id)];
        if (n.grad.empty()) {
            // an untouched gradient is all zeros
            const_cast<Node&>(n).grad.assign(n.value.size(), S(0));
        }
        return n.grad;
    }

    std::vector<S>& grad_buffer(std::int64_t id) {
        auto& n = nodes_[std::size_t(id)];
        if (n.grad.empty()) n.grad.assign(n.value.size(), S(0));
        return n.grad;
    }

    Tensor<S> leaf(Shape shape, std::vector<S> data, bool requires_grad_flag) {
        if (std::int64_t(data.size()) != flexssm::numel(shape))
            throw std::invalid_argument("leaf: data size does not match shape " + shape_str(shape));
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(data);
        n.requires_grad = requires_grad_flag && recording;
        verify_finite(n.value, "leaf");
        nodes_.push_back(std::move(n));
        return {this, size() - 1};
    }

    Tensor<S> constant(Shape shape, std::vector<S> data) { return leaf(std::move(shape), std::move(data), false); }

    Tensor<S> zeros(Shape shape, bool requires_grad_flag = false) {
        std::vector<S> d(std::size_t(flexssm::numel(shape)), S(0));
        return leaf(std::move(shape), std::move(d), requires_grad_flag);
    }

    Tensor<S> scalar(S v) { return constant({1}, {v}); }

    // records an op result; drops the closure when nothing upstream needs grad
    Tensor<S> record(Shape shape, std::vector<S> value, std::vector<std::int64_t> parents,
                     std::function<void(Tape&, std::int64_t)> backward, const char* opname) {
        verify_finite(value, opname);
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        if (recording) {
            bool need = false;
            for (auto p : parents) need = need || nodes_[std::size_t(p)].requires_grad;
            if (need) {
                n.parents = std::move(parents);
                n.backward = std::move(backward);
                n.requires_grad = true;
            }
        }
        nodes_.push_back(std::move(n));
        return {this, size() - 1};
    }

    // Reverse sweep from `loss` (must be scalar). Leaf gradients accumulate
    // across calls (reset-before-backward is the documented pattern); grads of
    // interior nodes are transient per call.
    void backward(Tensor<S> loss) {
        if (loss.tape != this) throw std::invalid_argument("backward: tensor not on this tape");
        if (loss.numel() != 1) throw std::invalid_argument("backward: loss is not scalar " + shape_str(loss.shape()));
        for (std::int64_t id = 0; id <= loss.id; ++id) {
            Node& n = nodes_[std::size_t(id)];
            if (n.backward) n.grad.clear();
        }
        auto& seed = grad_buffer(loss.id);
        seed[0] += S(1);
        for (std::int64_t id = loss.id; id >= 0; --id) {
            Node& n = nodes_[std::size_t(id)];
            if (!n.backward || n.grad.empty()) continue;
            n.backward(*this, id);
        }
    }

    void zero_grads() {
        for (auto& n : nodes_) n.grad.clear();
    }

    void reset() {
        nodes_.clear();
        op_count_ = 0;
    }

private:
    void verify_finite(const std::vector<S>& v, const char* opname) const {
        if (!check_finite) return;
        for (const S x : v) {
            if (!std::isfinite(double(x)))
                throw numeric_error(std::string(opname) + ": non-finite value produced");
        }
    }

    std::vector<Node> nodes_;
    std::uint64_t op_count_ = 0;
};

namespace detail {

// a valid elementwise pairing: identical shapes, or one shape is a suffix of
// the other (the smaller operand repeats along the leading axes)
template <typename S>
inline void check_broadcast(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    const Shape &sa = a.shape(), &sb = b.shape();
    const Shape& big = sa.size() >= sb.size() ? sa : sb;
    const Shape& small = sa.size() >= sb.size() ? sb : sa;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i) {
        if (big[off + i] != small[i])
            throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    }
}

template <typename S, typename FwdF, typename DaF, typename DbF>
Tensor<S> binary_broadcast(Tensor<S> a, Tensor<S> b, const char* op, FwdF fwd, DaF da, DbF db) {
    check_broadcast(a, b, op);
    Tape<S>& tape = *a.tape;
    const bool a_big = a.numel() >= b.numel();
    const Tensor<S>& big = a_big ? a : b;
    const Tensor<S>& small = a_big ? b : a;
    const std::int64_t n = big.numel();
    const std::int64_t inner = std::max<std::int64_t>(small.numel(), 1);

    const auto& bv = big.value();
    const auto& sv = small.value();
    std::vector<S> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const S x = a_big ? bv[std::size_t(i)] : sv[std::size_t(i % inner)];
        const S y = a_big ? sv[std::size_t(i % inner)] : bv[std::size_t(i)];
        out[std::size_t(i)] = fwd(x, y);
    }
    tape.count_ops(std::uint64_t(n));

    const std::int64_t aid = a.id, bid = b.id;
    auto bw = [aid, bid, a_big, inner, n, da, db](Tape<S>& t, std::int64_t self) {
        const auto& g = t.grad(self);
        const auto& av = t.value(aid);
        const auto& bv2 = t.value(bid);
        auto val_a = [&](std::int64_t i) { return a_big ? av[std::size_t(i)] : av[std::size_t(i % inner)]; };
        auto val_b = [&](std::int64_t i) { return a_big ? bv2[std::size_t(i % inner)] : bv2[std::size_t(i)]; };
        if (t.requires_grad(aid)) {
            auto& ga = t.grad_buffer(aid);
            for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t ia = a_big ? i : i % inner;
                ga[std::size_t(ia)] += da(g[std::size_t(i)], val_a(i), val_b(i));
            }
        }
        if (t.requires_grad(bid)) {
            auto& gb = t.grad_buffer(bid);
            for (std::int64_t i = 0; i < n; ++i) {
                const std::int64_t ib = a_big ? i % inner : i;
                gb[std::size_t(ib)] += db(g[std::size_t(i)], val_a(i), val_b(i));
            }
        }
    };
    return tape.record(big.shape(), std::move(out), {aid, bid}, std::move(bw), op);
}

template <typename S, typename FwdF, typename GradF>
Tensor<S> unary_op(Tensor<S> a, const char* op, FwdF fwd, GradF dfdx) {
    Tape<S>& tape = *a.tape;
    const auto& av = a.value();
    std::vector<S> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    tape.count_ops(av.size());
    const std::int64_t aid = a.id;
    auto bw = [aid, dfdx](Tape<S>& t, std::int64_t self) {
        if (!t.requires_grad(aid)) return;
        const auto& g = t.grad(self);
        const auto& av2 = t.value(aid);
        const auto& yv = t.value(self);
        auto& ga = t.grad_buffer(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(av2[i], yv[i]);
    };
    return tape.record(a.shape(), std::move(out), {aid}, std::move(bw), op);
}

} // namespace detail

template <typename S>
Tensor<S> add(Tensor<S> a, Tensor<S> b) {
    return detail::binary_broadcast(
        a, b, "add", [](S x, S y) { return x + y; }, [](S g, S, S) { return g; }, [](S g, S, S) { return g; });
}

template <typename S>
Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
    return detail::binary_broadcast(
        a, b, "sub", [](S x, S y) { return x - y; }, [](S g, S, S) { return g; }, [](S g, S, S) { return -g; });
}

template <typename S>
Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
    return detail::binary_broadcast(
        a, b, "mul", [](S x, S y) { return x * y; }, [](S g, S, S y) { return g * y; },
        [](S g, S x, S) { return g * x; });
}

template <typename S> Tensor<S> operator+(Tensor<S> a, Tensor<S> b) { return add(a, b); }
template <typename S> Tensor<S> operator-(Tensor<S> a, Tensor<S> b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(Tensor<S> a, Tensor<S> b) { return mul(a, b); }

// multiply by a compile-time-known constant (not differentiable wrt the constant)
template <typename S>
Tensor<S> scale(Tensor<S> a, double c) {
    return detail::unary_op(
        a, "scale", [c](S x) { return S(double(x) * c); }, [c](S, S) { return S(c); });
}

template <typename S>
Tensor<S> exp_op(Tensor<S> a) {
    return detail::unary_op(
        a, "exp", [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> log_op(Tensor<S> a) {
    return detail::unary_op(
        a, "log", [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
Tensor<S> softplus(Tensor<S> a) {
    return detail::unary_op(
        a, "softplus",
        [](S x) {
            // stable: max(x,0) + log1p(exp(-|x|))
            return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
        },
        [](S x, S) { return S(1) / (S(1) + std::exp(-x)); });
}

template <typename S>
Tensor<S> silu(Tensor<S> a) {
    return detail::unary_op(
        a, "silu", [](S x) { return x / (S(1) + std::exp(-x)); },
        [](S x, S) {
            const S sig = S(1) / (S(1) + std::exp(-x));
            return sig * (S(1) + x * (S(1) - sig));
        });
}

template <typename S>
Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
    const Shape &sa = a.shape(), &sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw std::invalid_argument("matmul: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    const std::int64_t m = sa[0], k = sa[1], n = sb[1];
    std::vector<S> out(std::size_t(m * n), S(0));
    {
        const S* pa = a.value().data();
        const S* pb = b.value().data();
        S* pc = out.data();
        for (std::int64_t i = 0; i < m; ++i) {
            for (std::int64_t kk = 0; kk < k; ++kk) {
                const S aik = pa[i * k + kk];
                const S* prow = pb + kk * n;
                S* crow = pc + i * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += aik * prow[j];
            }
        }
    }
    a.tape->count_ops(std::uint64_t(m * n * k));
    const std::int64_t aid = a.id, bid = b.id;
    auto bw = [aid, bid, m, k, n](Tape<S>& t, std::int64_t self) {
        const S* g = t.grad(self).data();
        if (t.requires_grad(aid)) {
            // dA = G * B^T
            auto& ga = t.grad_buffer(aid);
            const S* pb = t.value(bid).data();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) {
                    const S gij = g[i * n + j];
                    for (std::int64_t kk = 0; kk < k; ++kk) ga[std::size_t(i * k + kk)] += gij * pb[kk * n + j];
                }
        }
        if (t.requires_grad(bid)) {
            // dB = A^T * G
            auto& gb = t.grad_buffer(bid);
            const S* pa = t.value(aid).data();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const S aik = pa[i * k + kk];
                    for (std::int64_t j = 0; j < n; ++j) gb[std::size_t(kk * n + j)] += aik * g[i * n + j];
                }
        }
    };
    return a.tape->record({m, n}, std::move(out), {aid, bid}, std::move(bw), "matmul");
}

template <typename S>
Tensor<S> reshape(Tensor<S> a, Shape target) {
    if (numel(target) != a.numel())
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) + " vs " + shape_str(target));
    std::vector<S> out = a.value();
    const std::int64_t aid = a.id;
    auto bw = [aid](Tape<S>& t, std::int64_t self) {
        if (!t.requires_grad(aid)) return;
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
    return a.tape->record(std::move(target), std::move(out), {aid}, std::move(bw), "reshape");
}

template <typename S>
Tensor<S> transpose(Tensor<S> a) {
    const Shape& s = a.shape();
    if (s.size() != 2) throw std::invalid_argument("transpose: expected rank 2, got " + shape_str(s));
    const std::int64_t m = s[0], n = s[1];
    std::vector<S> out(std::size_t(m * n));
    const auto& av = a.value();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[std::size_t(j * m + i)] = av[std::size_t(i * n + j)];
    const std::int64_t aid = a.id;
    auto bw = [aid, m, n](Tape<S>& t, std::int64_t self) {
        if (!t.requires_grad(aid)) return;
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(aid);
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) ga[std::size_t(i * n + j)] += g[std::size_t(j * m + i)];
    };
    return a.tape->record({n, m}, std::move(out), {aid}, std::move(bw), "transpose");
}

template <typename S>
Tensor<S> concat(Tensor<S> a, Tensor<S> b, std::int64_t axis) {
    const Shape &sa = a.shape(), &sb = b.shape();
    if (sa.size() != sb.size() || axis < 0 || axis >= std::int64_t(sa.size()))
        throw std::invalid_argument("concat: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    for (std::size_t i = 0; i < sa.size(); ++i)
        if (std::int64_t(i) != axis && sa[i] != sb[i])
            throw std::invalid_argument("concat: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    Shape so = sa;
    so[std::size_t(axis)] += sb[std::size_t(axis)];
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= sa[std::size_t(i)];
    for (std::size_t i = std::size_t(axis) + 1; i < sa.size(); ++i) inner *= sa[i];
    const std::int64_t ea = sa[std::size_t(axis)], eb = sb[std::size_t(axis)];
    std::vector<S> out(std::size_t(outer * (ea + eb) * inner));
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(av.data() + o * ea * inner, ea * inner, out.data() + o * (ea + eb) * inner);
        std::copy_n(bv.data() + o * eb * inner, eb * inner, out.data() + o * (ea + eb) * inner + ea * inner);
    }
    const std::int64_t aid = a.id, bid = b.id;
    auto bw = [aid, bid, outer, inner, ea, eb](Tape<S>& t, std::int64_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(aid)) {
            auto& ga = t.grad_buffer(aid);
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < ea * inner; ++i)
                    ga[std::size_t(o * ea * inner + i)] += g[std::size_t(o * (ea + eb) * inner + i)];
        }
        if (t.requires_grad(bid)) {
            auto& gb = t.grad_buffer(bid);
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < eb * inner; ++i)
                    gb[std::size_t(o * eb * inner + i)] += g[std::size_t(o * (ea + eb) * inner + ea * inner + i)];
        }
    };
    return a.tape->record(std::move(so), std::move(out), {aid, bid}, std::move(bw), "concat");
}

// contiguous [begin, end) range along one axis
template <typename S>
Tensor<S> slice(Tensor<S> a, std::int64_t axis, std::int64_t begin, std::int64_t end) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= std::int64_t(s.size()) || begin < 0 || end > s[std::size_t(axis)] || begin >= end)
        throw std::invalid_argument("slice: invalid range on " + shape_str(s));
    Shape so = s;
    so[std::size_t(axis)] = end - begin;
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= s[std::size_t(i)];
    for (std::size_t i = std::size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
    const std::int64_t e = s[std::size_t(axis)], eo = end - begin;
    std::vector<S> out(std::size_t(outer * eo * inner));
    const auto& av = a.value();
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(av.data() + (o * e + begin) * inner, eo * inner, out.data() + o * eo * inner);
    const std::int64_t aid = a.id;
    auto bw = [aid, outer, inner, e, eo, begin](Tape<S>& t, std::int64_t self) {
        if (!t.requires_grad(aid)) return;
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(aid);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < eo * inner; ++i)
                ga[std::size_t((o * e + begin) * inner + i)] += g[std::size_t(o * eo * inner + i)];
    };
    return a.tape->record(std::move(so), std::move(out), {aid}, std::move(bw), "slice");
}

namespace detail {
template <typename S>
Tensor<S> reduce_axis(Tensor<S> a, std::int64_t axis, bool mean, const char* op) {
    const Shape& s = a.shape();
    if (axis < 0 || axis >= std::int64_t(s.size()))
        throw std::invalid_argument(std::string(op) + ": invalid axis for " + shape_str(s));
    Shape so;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (std::int64_t(i) != axis) so.push_back(s[i]);
    if (so.empty()) so = {1};
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t i = 0; i < axis; ++i) outer *= s[std::size_t(i)];
    for (std::size_t i = std::size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
    const std::int64_t e = s[std::size_t(axis)];
    const S denom = mean ? S(1) / S(e) : S(1);
    std::vector<S> out(std::size_t(outer * inner), S(0));
    const auto& av = a.value();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t j = 0; j < e; ++j)
            for (std::int64_t i = 0; i < inner; ++i)
                out[std::size_t(o * inner + i)] += av[std::size_t((o * e + j) * inner + i)];
    if (mean)
        for (auto& v : out) v *= denom;
    a.tape->count_ops(std::uint64_t(a.numel()));
    const std::int64_t aid = a.id;
    auto bw = [aid, outer, inner, e, denom](Tape<S>& t, std::int64_t self) {
        if (!t.requires_grad(aid)) return;
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(aid);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t j = 0; j < e; ++j)
                for (std::int64_t i = 0; i < inner; ++i)
                    ga[std::size_t((o * e + j) * inner + i)] += g[std::size_t(o * inner + i)] * denom;
    };
    return a.tape->record(std::move(so), std::move(out), {aid}, std::move(bw), op);
}
} // namespace detail

template <typename S>
Tensor<S> reduce_sum(Tensor<S> a, std::int64_t axis) {
    return detail::reduce_axis(a, axis, false, "sum");
}

template <typename S>
Tensor<S> reduce_mean(Tensor<S> a, std::int64_t axis) {
    return detail::reduce_axis(a, axis, true, "mean");
}

template <typename S>
Tensor<S> sum_all(Tensor<S> a) {
    const auto& av = a.value();
    S acc = 0;
    for (const S v : av) acc += v;
    a.tape->count_ops(av.size());
    const std::int64_t aid = a.id;
    auto bw = [aid](Tape<S>& t, std::int64_t self) {
        if (!t.requires_grad(aid)) return;
        const S g = t.grad(self)[0];
        auto& ga = t.grad_buffer(aid);
        for (auto& v : ga) v += g;
    };
    return a.tape->record({1}, {acc}, {aid}, std::move(bw), "sum");
}

// layer normalization over the last axis, affine
template <typename S>
Tensor<S> layernorm(Tensor<S> x, Tensor<S> gain, Tensor<S> bias, double eps = 1e-5) {
    const Shape& s = x.shape();
    const std::int64_t f = s.back();
    if (gain.numel() != f || bias.numel() != f)
        throw std::invalid_argument("layernorm: shape mismatch " + shape_str(s) + " vs " + shape_str(gain.shape()));
    const std::int64_t rows = x.numel() / f;
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    std::vector<S> out(xv.size());
    auto inv_std = std::make_shared<std::vector<S>>(std::size_t(rows));
    auto xhat = std::make_shared<std::vector<S>>(xv.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* px = xv.data() + r * f;
        S mu = 0;
        for (std::int64_t j = 0; j < f; ++j) mu += px[j];
        mu /= S(f);
        S var = 0;
        for (std::int64_t j = 0; j < f; ++j) var += (px[j] - mu) * (px[j] - mu);
        var /= S(f);
        const S is = S(1) / std::sqrt(var + S(eps));
        (*inv_std)[std::size_t(r)] = is;
        for (std::int64_t j = 0; j < f; ++j) {
            const S xh = (px[j] - mu) * is;
            (*xhat)[std::size_t(r * f + j)] = xh;
            out[std::size_t(r * f + j)] = gv[std::size_t(j)] * xh + bv[std::size_t(j)];
        }
    }
    x.tape->count_ops(std::uint64_t(x.numel()) * 4);
    const std::int64_t xid = x.id, gid = gain.id, bid = bias.id;
    auto bw = [xid, gid, bid, rows, f, inv_std, xhat](Tape<S>& t, std::int64_t self) {
        const auto& g = t.grad(self);
        const auto& gv2 = t.value(gid);
        if (t.requires_grad(gid)) {
            auto& gg = t.grad_buffer(gid);
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < f; ++j)
                    gg[std::size_t(j)] += g[std::size_t(r * f + j)] * (*xhat)[std::size_t(r * f + j)];
        }
        if (t.requires_grad(bid)) {
            auto& gb = t.grad_buffer(bid);
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < f; ++j) gb[std::size_t(j)] += g[std::size_t(r * f + j)];
        }
        if (t.requires_grad(xid)) {
            auto& gx = t.grad_buffer(xid);
            for (std::int64_t r = 0; r < rows; ++r) {
                S mean_gy = 0, mean_gyx = 0;
                for (std::int64_t j = 0; j < f; ++j) {
                    const S gy = g[std::size_t(r * f + j)] * gv2[std::size_t(j)];
                    mean_gy += gy;
                    mean_gyx += gy * (*xhat)[std::size_t(r * f + j)];
                }
                mean_gy /= S(f);
                mean_gyx /= S(f);
                const S is = (*inv_std)[std::size_t(r)];
                for (std::int64_t j = 0; j < f; ++j) {
                    const S gy = g[std::size_t(r * f + j)] * gv2[std::size_t(j)];
                    gx[std::size_t(r * f + j)] += is * (gy - mean_gy - (*xhat)[std::size_t(r * f + j)] * mean_gyx);
                }
            }
        }
    };
    return x.tape->record(s, std::move(out), {xid, gid, bid}, std::move(bw), "layernorm");
}

// depthwise causal 1-D convolution: x is (L, C), kernel (C, k); output row t sees
// rows t-k+1 .. t of x (zero padded on the left), kernel tap k-1 hits the present
template <typename S>
Tensor<S> dwconv_causal(Tensor<S> x, Tensor<S> kernel) {
    const Shape &sx = x.shape(), &sk = kernel.shape();
    if (sx.size() != 2 || sk.size() != 2 || sx[1] != sk[0])
        throw std::invalid_argument("dwconv: shape mismatch " + shape_str(sx) + " vs " + shape_str(sk));
    const std::int64_t L = sx[0], C = sx[1], k = sk[1];
    const auto& xv = x.value();
    const auto& kv = kernel.value();
    std::vector<S> out(std::size_t(L * C), S(0));
    for (std::int64_t t = 0; t < L; ++t)
        for (std::int64_t j = 0; j < k; ++j) {
            const std::int64_t src = t - (k - 1) + j;
            if (src < 0) continue;
            for (std::int64_t c = 0; c < C; ++c)
                out[std::size_t(t * C + c)] += kv[std::size_t(c * k + j)] * xv[std::size_t(src * C + c)];
        }
    x.tape->count_ops(std::uint64_t(L * C * k));
    const std::int64_t xid = x.id, kid = kernel.id;
    auto bw = [xid, kid, L, C, k](Tape<S>& t, std::int64_t self) {
        const auto& g = t.grad(self);
        const auto& xv2 = t.value(xid);
        const auto& kv2 = t.value(kid);
        if (t.requires_grad(xid)) {
            auto& gx = t.grad_buffer(xid);
            for (std::int64_t tt = 0; tt < L; ++tt)
                for (std::int64_t j = 0; j < k; ++j) {
                    const std::int64_t src = tt - (k - 1) + j;
                    if (src < 0) continue;
                    for (std::int64_t c = 0; c < C; ++c)
                        gx[std::size_t(src * C + c)] += kv2[std::size_t(c * k + j)] * g[std::size_t(tt * C + c)];
                }
        }
        if (t.requires_grad(kid)) {
            auto& gk = t.grad_buffer(kid);
            for (std::int64_t tt = 0; tt < L; ++tt)
                for (std::int64_t j = 0; j < k; ++j) {
                    const std::int64_t src = tt - (k - 1) + j;
                    if (src < 0) continue;
                    for (std::int64_t c = 0; c < C; ++c)
                        gk[std::size_t(c * k + j)] += xv2[std::size_t(src * C + c)] * g[std::size_t(tt * C + c)];
                }
        }
    };
    return x.tape->record({L, C}, std::move(out), {xid, kid}, std::move(bw), "dwconv");
}

// mean softmax cross-entropy over rows; logits (n, C) or (C) with one label per row
template <typename S>
Tensor<S> softmax_xent(Tensor<S> logits, const std::vector<std::int64_t>& labels) {
    const Shape& s = logits.shape();
    const std::int64_t C = s.back();
    const std::int64_t n = logits.numel() / C;
    if (std::int64_t(labels.size()) != n)
        throw std::invalid_argument("softmax_xent: label count mismatch with " + shape_str(s));
    for (auto l : labels)
        if (l < 0 || l >= C) throw std::invalid_argument("softmax_xent: label out of range");
    const auto& lv = logits.value();
    auto probs = std::make_shared<std::vector<S>>(lv.size());
    S loss = 0;
    for (std::int64_t r = 0; r < n; ++r) {
        const S* row = lv.data() + r * C;
        S mx = row[0];
        for (std::int64_t j = 1; j < C; ++j) mx = std::max(mx, row[j]);
        S z = 0;
        for (std::int64_t j = 0; j < C; ++j) z += std::exp(row[j] - mx);
        const S lse = mx + std::log(z);
        for (std::int64_t j = 0; j < C; ++j) (*probs)[std::size_t(r * C + j)] = std::exp(row[j] - lse);
        loss += lse - row[labels[std::size_t(r)]];
    }
    loss /= S(n);
    logits.tape->count_ops(std::uint64_t(logits.numel()) * 3);
    const std::int64_t lid = logits.id;
    auto labels_copy = std::make_shared<std::vector<std::int64_t>>(labels);
    auto bw = [lid, n, C, probs, labels_copy](Tape<S>& t, std::int64_t self) {
        if (!t.requires_grad(lid)) return;
        const S g = t.grad(self)[0] / S(n);
        auto& gl = t.grad_buffer(lid);
        for (std::int64_t r = 0; r < n; ++r) {
            for (std::int64_t j = 0; j < C; ++j) gl[std::size_t(r * C + j)] += g * (*probs)[std::size_t(r * C + j)];
            gl[std::size_t(r * C + (*labels_copy)[std::size_t(r)])] -= g;
        }
    };
    return logits.tape->record({1}, {loss}, {lid}, std::move(bw), "softmax_xent");
}

// apply an explicit sparse linear operator over the leading axis; the backward
// pass applies the transpose
template <typename S>
Tensor<S> apply_map(const SparseLinearMap& m, Tensor<S> x) {
    const Shape& s = x.shape();
    if (s.empty() || s[0] != m.src_rows)
        throw std::invalid_argument("apply_map: leading axis " + shape_str(s) + " does not match map rows");
    const std::int64_t inner = x.numel() / s[0];
    Shape so = s;
    so[0] = m.dst_rows;
    const auto& xv = x.value();
    std::vector<S> out(std::size_t(m.dst_rows * inner), S(0));
    for (std::int64_t r = 0; r < m.dst_rows; ++r)
        for (std::int64_t e = m.row_ptr[std::size_t(r)]; e < m.row_ptr[std::size_t(r) + 1]; ++e) {
            const S w = S(m.w[std::size_t(e)]);
            const S* src = xv.data() + m.col[std::size_t(e)] * inner;
            S* dst = out.data() + r * inner;
            for (std::int64_t i = 0; i < inner; ++i) dst[i] += w * src[i];
        }
    x.tape->count_ops(std::uint64_t(std::int64_t(m.w.size()) * inner));
    const std::int64_t xid = x.id;
    auto map_copy = std::make_shared<SparseLinearMap>(m);
    auto bw = [xid, map_copy, inner](Tape<S>& t, std::int64_t self) {
        if (!t.requires_grad(xid)) return;
        const auto& g = t.grad(self);
        auto& gx = t.grad_buffer(xid);
        const auto& mm = *map_copy;
        for (std::int64_t r = 0; r < mm.dst_rows; ++r)
            for (std::int64_t e = mm.row_ptr[std::size_t(r)]; e < mm.row_ptr[std::size_t(r) + 1]; ++e) {
                const S w = S(mm.w[std::size_t(e)]);
                const S* src = g.data() + r * inner;
                S* dst = gx.data() + mm.col[std::size_t(e)] * inner;
                for (std::int64_t i = 0; i < inner; ++i) dst[i] += w * src[i];
            }
    };
    return x.tape->record(std::move(so), std::move(out), {xid}, std::move(bw), "apply_map");
}

template <typename S>
Tensor<S> reverse_rows(Tensor<S> x) {
    return apply_map(reversal_map(x.shape()[0]), x);
}

} // namespace flexssm
