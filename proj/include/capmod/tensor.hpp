#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "capmod/errors.hpp"

namespace capmod {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

template <typename Real>
class Tape;

template <typename Real>
struct TensorStorage {
    Shape shape;
    std::vector<Real> value;
    std::vector<Real> grad;       // empty until the first backward touches it
    std::int64_t node = -1;       // index into the recording tape, -1 for leaves
    Tape<Real>* tape = nullptr;

    std::vector<Real>& grad_buf() {
        if (grad.empty()) grad.assign(value.size(), Real(0));
        return grad;
    }
};

// Dense row-major tensor. Value-semantic handle: copies alias the same
// storage, which is what ties parameters, their gradients and the Adam
// moments together across the training loop.
template <typename Real>
class Tensor {
  public:
    Tensor() : s_(std::make_shared<TensorStorage<Real>>()) {}

    Tensor(Shape shape, std::vector<Real> data) : s_(std::make_shared<TensorStorage<Real>>()) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        s_->shape = std::move(shape);
        s_->value = std::move(data);
    }

    static Tensor zeros(Shape shape) {
        return full(std::move(shape), Real(0));
    }

    static Tensor full(Shape shape, Real v) {
        std::vector<Real> data(shape_numel(shape), v);
        return Tensor(std::move(shape), std::move(data));
    }

    static Tensor scalar(Real v) { return Tensor({1}, {v}); }

    static Tensor vector(std::vector<Real> data) {
        Shape s{data.size()};
        return Tensor(std::move(s), std::move(data));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<Real> data) {
        return Tensor({rows, cols}, std::move(data));
    }

    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t size() const { return s_->value.size(); }
    std::size_t dim(std::size_t i) const { return s_->shape.at(i); }

    std::span<const Real> value() const { return s_->value; }
    std::span<Real> value_mut() { return s_->value; }

    Real at(std::size_t i) const { return s_->value.at(i); }
    Real at(std::size_t r, std::size_t c) const {
        if (rank() != 2) throw ShapeError("2-index access on tensor of shape " + shape_str(shape()));
        return s_->value.at(r * s_->shape[1] + c);
    }

    Real item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return s_->value[0];
    }

    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const Real> grad() const { return s_->grad; }
    std::span<Real> grad_mut() { return s_->grad_buf(); }
    void zero_grad() { s_->grad.clear(); }

    bool finite() const {
        for (Real v : s_->value)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // Deep copy with detached storage (no node, no grad).
    Tensor detached_copy() const {
        return Tensor(s_->shape, s_->value);
    }

    const std::shared_ptr<TensorStorage<Real>>& storage() const { return s_; }

  private:
    std::shared_ptr<TensorStorage<Real>> s_;
};

// Append-only tape of recorded ops, replayed back-to-front by backward().
// Construction activates the tape for the current thread; destruction
// restores the previously active one. Ops record nothing when no tape is
// active, which is the frozen-parameter evaluation mode.
template <typename Real>
class Tape {
  public:
    Tape() : prev_(active_ref()) { active_ref() = this; }
    ~Tape() { active_ref() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    void record(const Tensor<Real>& out, std::function<void()> backprop) {
        out.storage()->node = static_cast<std::int64_t>(nodes_.size());
        out.storage()->tape = this;
        nodes_.push_back(Node{out.storage(), std::move(backprop)});
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    // Accumulates d(loss)/d(leaf) into every leaf's grad buffer.
    // Intermediate (op-output) grads are rebuilt from scratch on each call,
    // so calling backward twice doubles the leaves' gradients.
    void backward(const Tensor<Real>& loss) {
        if (loss.size() != 1)
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
        auto& ls = *loss.storage();
        if (ls.tape != this || ls.node < 0)
            throw ContractError("backward: loss is not recorded on this tape");
        for (std::int64_t i = 0; i <= ls.node; ++i) nodes_[static_cast<std::size_t>(i)].out->grad.clear();
        ls.grad_buf()[0] += Real(1);
        for (std::int64_t i = ls.node; i >= 0; --i) {
            const Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.out->grad.empty()) n.backprop();
        }
    }

  private:
    struct Node {
        std::shared_ptr<TensorStorage<Real>> out;
        std::function<void()> backprop;
    };
    static Tape*& active_ref() {
        static thread_local Tape* a = nullptr;
        return a;
    }
    std::vector<Node> nodes_;
    Tape* prev_;
};

template <typename Real>
void backward(const Tensor<Real>& loss) {
    auto& s = *loss.storage();
    if (s.tape == nullptr || s.node < 0)
        throw ContractError("backward: loss was not recorded (no active tape during forward?)");
    s.tape->backward(loss);
}

namespace detail {

template <typename Real>
using Store = std::shared_ptr<TensorStorage<Real>>;

template <typename Real>
void maybe_record(const Tensor<Real>& out, std::function<void()> fn) {
    if (auto* t = Tape<Real>::active()) t->record(out, std::move(fn));
}

}  // namespace detail

// ---- matmul -----------------------------------------------------------
//
// Supports (m,k)x(k,n), (m,k)x(k) and (k)x(k,n); vectors act as a column
// or row respectively. Backward: dA += dC B^T, dB += A^T dC.
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    std::size_t m, k, n;
    Shape out_shape;
    if (a.rank() == 2 && b.rank() == 2) {
        m = a.dim(0); k = a.dim(1); n = b.dim(1);
        if (b.dim(0) != k)
            throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
        out_shape = {m, n};
    } else if (a.rank() == 2 && b.rank() == 1) {
        m = a.dim(0); k = a.dim(1); n = 1;
        if (b.dim(0) != k)
            throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
        out_shape = {m};
    } else if (a.rank() == 1 && b.rank() == 2) {
        m = 1; k = a.dim(0); n = b.dim(1);
        if (b.dim(0) != k)
            throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
        out_shape = {n};
    } else {
        throw ShapeError("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }

    std::vector<Real> out(m * n, Real(0));
    const Real* av = a.value().data();
    const Real* bv = b.value().data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            Real aik = av[i * k + p];
            if (aik == Real(0)) continue;
            const Real* brow = bv + p * n;
            Real* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }

    Tensor<Real> result(std::move(out_shape), std::move(out));
    detail::maybe_record<Real>(result, [as = a.storage(), bs = b.storage(),
                                        os = result.storage(), m, k, n]() {
        const auto& dc = os->grad;
        auto& da = as->grad_buf();
        auto& db = bs->grad_buf();
        const auto& av = as->value;
        const auto& bv = bs->value;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                Real d = dc[i * n + j];
                if (d == Real(0)) continue;
                for (std::size_t p = 0; p < k; ++p) {
                    da[i * k + p] += d * bv[p * n + j];
                    db[p * n + j] += av[i * k + p] * d;
                }
            }
    });
    return result;
}

// ---- binary elementwise ------------------------------------------------
//
// Shapes must match exactly, or one operand may be a rank-1 vector whose
// length equals the other operand's trailing dimension; the vector is then
// broadcast over rows. No other broadcast is supported.
namespace detail {

// BRows: b broadcast over rows of a; BScalar: b is a single element
// broadcast over all of a (and symmetrically for ARows/AScalar).
enum class BinKind { Same, BRows, ARows, BScalar, AScalar };

template <typename Real>
BinKind bin_kind(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    if (a.shape() == b.shape()) return BinKind::Same;
    if (b.size() == 1) return BinKind::BScalar;
    if (a.size() == 1) return BinKind::AScalar;
    if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) return BinKind::BRows;
    if (b.rank() == 2 && a.rank() == 1 && a.dim(0) == b.dim(1)) return BinKind::ARows;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " neither match nor broadcast");
}

}  // namespace detail

namespace detail {

// Maps a flat index of the full-size operand to the matching index of the
// broadcast operand.
inline std::size_t bcast_index(BinKind kind, std::size_t i, std::size_t small_size) {
    switch (kind) {
        case BinKind::Same: return i;
        case BinKind::BScalar:
        case BinKind::AScalar: return 0;
        default: return i % small_size;
    }
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto kind = detail::bin_kind(a, b, "add");
    bool a_small = (kind == detail::BinKind::ARows || kind == detail::BinKind::AScalar);
    const Tensor<Real>& big = a_small ? b : a;
    const Tensor<Real>& small = a_small ? a : b;
    std::size_t ssz = small.size();
    std::vector<Real> out(big.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = big.at(i) + small.at(detail::bcast_index(kind, i, ssz));
    Tensor<Real> result(big.shape(), std::move(out));
    detail::maybe_record<Real>(result, [bs_big = big.storage(), bs_small = small.storage(),
                                        os = result.storage(), kind, ssz]() {
        const auto& dc = os->grad;
        auto& dbig = bs_big->grad_buf();
        auto& dsmall = bs_small->grad_buf();
        // if both operands share storage the adds land in one buffer,
        // which is the right answer for x + x
        for (std::size_t i = 0; i < dc.size(); ++i) {
            dbig[i] += dc[i];
            dsmall[detail::bcast_index(kind, i, ssz)] += dc[i];
        }
    });
    return result;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    auto kind = detail::bin_kind(a, b, "mul");
    bool a_small = (kind == detail::BinKind::ARows || kind == detail::BinKind::AScalar);
    const Tensor<Real>& big = a_small ? b : a;
    const Tensor<Real>& small = a_small ? a : b;
    std::size_t ssz = small.size();
    std::vector<Real> out(big.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = big.at(i) * small.at(detail::bcast_index(kind, i, ssz));
    Tensor<Real> result(big.shape(), std::move(out));
    detail::maybe_record<Real>(result, [bs_big = big.storage(), bs_small = small.storage(),
                                        os = result.storage(), kind, ssz]() {
        const auto& dc = os->grad;
        auto& dbig = bs_big->grad_buf();
        auto& dsmall = bs_small->grad_buf();
        const auto& vbig = bs_big->value;
        const auto& vsmall = bs_small->value;
        for (std::size_t i = 0; i < dc.size(); ++i) {
            std::size_t si = detail::bcast_index(kind, i, ssz);
            Real da = dc[i] * vsmall[si];
            Real db = dc[i] * vbig[i];
            dbig[i] += da;
            dsmall[si] += db;
        }
    });
    return result;
}

// ---- unary elementwise ---------------------------------------------------

namespace detail {

// dfdx receives (x_i, y_i) so each op states its derivative in whichever
// form is cheapest.
template <typename Real, typename F, typename DF>
Tensor<Real> unary(const Tensor<Real>& x, F f, DF dfdx) {
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.at(i));
    Tensor<Real> result(x.shape(), std::move(out));
    maybe_record<Real>(result, [xs = x.storage(), os = result.storage(), dfdx]() {
        const auto& dy = os->grad;
        auto& dx = xs->grad_buf();
        const auto& xv = xs->value;
        const auto& yv = os->value;
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * dfdx(xv[i], yv[i]);
    });
    return result;
}

}  // namespace detail

template <typename Real>
Tensor<Real> neg(const Tensor<Real>& x) {
    return detail::unary(x, [](Real v) { return -v; }, [](Real, Real) { return Real(-1); });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    return add(a, neg(b));
}

template <typename Real>
Tensor<Real> tanh(const Tensor<Real>& x) {
    return detail::unary(x, [](Real v) { return std::tanh(v); },
                         [](Real, Real y) { return Real(1) - y * y; });
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
    return detail::unary(
        x,
        [](Real v) {
            // split on sign so exp never overflows
            if (v >= Real(0)) return Real(1) / (Real(1) + std::exp(-v));
            Real e = std::exp(v);
            return e / (Real(1) + e);
        },
        [](Real, Real y) { return y * (Real(1) - y); });
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& x) {
    return detail::unary(x, [](Real v) { return v > Real(0) ? v : Real(0); },
                         [](Real v, Real) { return v > Real(0) ? Real(1) : Real(0); });
}

template <typename Real>
Tensor<Real> exp(const Tensor<Real>& x) {
    Tensor<Real> y = detail::unary(x, [](Real v) { return std::exp(v); },
                                   [](Real, Real yv) { return yv; });
    if (!y.finite()) throw DomainError("exp: overflow to non-finite value");
    return y;
}

template <typename Real>
Tensor<Real> log(const Tensor<Real>& x) {
    for (std::size_t i = 0; i < x.size(); ++i)
        if (!(x.at(i) > Real(0)))
            throw DomainError("log: non-positive input " + std::to_string((double)x.at(i)) +
                              " at index " + std::to_string(i));
    return detail::unary(x, [](Real v) { return std::log(v); },
                         [](Real v, Real) { return Real(1) / v; });
}

// ---- softmax ------------------------------------------------------------

// Max-subtracted softmax over a rank-1 tensor. Backward is the
// Jacobian-vector product dx = y .* (dy - <dy, y>).
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x) {
    if (x.rank() != 1 || x.size() == 0)
        throw ShapeError("softmax: expected a non-empty vector, got " + shape_str(x.shape()));
    Real mx = x.at(0);
    for (std::size_t i = 1; i < x.size(); ++i) mx = std::max(mx, x.at(i));
    std::vector<Real> out(x.size());
    Real sum = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x.at(i) - mx);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    Tensor<Real> result(x.shape(), std::move(out));
    detail::maybe_record<Real>(result, [xs = x.storage(), os = result.storage()]() {
        const auto& dy = os->grad;
        const auto& y = os->value;
        auto& dx = xs->grad_buf();
        Real dot = 0;
        for (std::size_t i = 0; i < dy.size(); ++i) dot += dy[i] * y[i];
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += y[i] * (dy[i] - dot);
    });
    return result;
}

// ---- reductions and structure ops ----------------------------------------

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
    Real s = 0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x.at(i);
    Tensor<Real> result = Tensor<Real>::scalar(s);
    detail::maybe_record<Real>(result, [xs = x.storage(), os = result.storage()]() {
        Real d = os->grad[0];
        auto& dx = xs->grad_buf();
        for (auto& v : dx) v += d;
    });
    return result;
}

// Mean along axis 0 of a (m,n) matrix -> n-vector.
template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& x) {
    if (x.rank() != 2 || x.dim(0) == 0)
        throw ShapeError("mean_rows: expected a matrix with >= 1 row, got " +
                         shape_str(x.shape()));
    std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<Real> out(n, Real(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += x.at(i, j);
    for (auto& v : out) v /= static_cast<Real>(m);
    Tensor<Real> result({n}, std::move(out));
    detail::maybe_record<Real>(result, [xs = x.storage(), os = result.storage(), m, n]() {
        const auto& dy = os->grad;
        auto& dx = xs->grad_buf();
        Real inv = Real(1) / static_cast<Real>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += dy[j] * inv;
    });
    return result;
}

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 1) throw ShapeError("concat: rank-1 tensors only");
        total += p.size();
    }
    std::vector<Real> out;
    out.reserve(total);
    for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
    Tensor<Real> result({total}, std::move(out));
    std::vector<detail::Store<Real>> stores;
    stores.reserve(parts.size());
    for (const auto& p : parts) stores.push_back(p.storage());
    detail::maybe_record<Real>(result, [stores = std::move(stores), os = result.storage()]() {
        const auto& dy = os->grad;
        std::size_t off = 0;
        for (const auto& s : stores) {
            auto& dx = s->grad_buf();
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[off + i];
            off += dx.size();
        }
    });
    return result;
}

template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t start, std::size_t len) {
    if (x.rank() != 1 || start + len > x.size())
        throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for " + shape_str(x.shape()));
    std::vector<Real> out(x.value().begin() + start, x.value().begin() + start + len);
    Tensor<Real> result({len}, std::move(out));
    detail::maybe_record<Real>(result, [xs = x.storage(), os = result.storage(), start, len]() {
        const auto& dy = os->grad;
        auto& dx = xs->grad_buf();
        for (std::size_t i = 0; i < len; ++i) dx[start + i] += dy[i];
    });
    return result;
}

template <typename Real>
Tensor<Real> pick(const Tensor<Real>& x, std::size_t index) {
    if (x.rank() != 1 || index >= x.size())
        throw ShapeError("pick: index " + std::to_string(index) + " out of range for " +
                         shape_str(x.shape()));
    Tensor<Real> result = Tensor<Real>::scalar(x.at(index));
    detail::maybe_record<Real>(result, [xs = x.storage(), os = result.storage(), index]() {
        xs->grad_buf()[index] += os->grad[0];
    });
    return result;
}

// Row r of a (rows, cols) matrix as a vector; backward scatters into the row.
// This is the embedding lookup.
template <typename Real>
Tensor<Real> take_row(const Tensor<Real>& x, std::size_t r) {
    if (x.rank() != 2 || r >= x.dim(0))
        throw ShapeError("take_row: row " + std::to_string(r) + " out of range for " +
                         shape_str(x.shape()));
    std::size_t n = x.dim(1);
    std::vector<Real> out(x.value().begin() + r * n, x.value().begin() + (r + 1) * n);
    Tensor<Real> result({n}, std::move(out));
    detail::maybe_record<Real>(result, [xs = x.storage(), os = result.storage(), r, n]() {
        const auto& dy = os->grad;
        auto& dx = xs->grad_buf();
        for (std::size_t i = 0; i < n; ++i) dx[r * n + i] += dy[i];
    });
    return result;
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor<Real> result(std::move(shape), std::vector<Real>(x.value().begin(), x.value().end()));
    detail::maybe_record<Real>(result, [xs = x.storage(), os = result.storage()]() {
        const auto& dy = os->grad;
        auto& dx = xs->grad_buf();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
    return result;
}

// Multiply by a plain constant (not a differentiable input).
template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real c) {
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * c;
    Tensor<Real> result(x.shape(), std::move(out));
    detail::maybe_record<Real>(result, [xs = x.storage(), os = result.storage(), c]() {
        const auto& dy = os->grad;
        auto& dx = xs->grad_buf();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * c;
    });
    return result;
}

template <typename Real>
Tensor<Real> add_const(const Tensor<Real>& x, Real c) {
    std::vector<Real> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) + c;
    Tensor<Real> result(x.shape(), std::move(out));
    detail::maybe_record<Real>(result, [xs = x.storage(), os = result.storage()]() {
        const auto& dy = os->grad;
        auto& dx = xs->grad_buf();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
    return result;
}

}  // namespace capmod
