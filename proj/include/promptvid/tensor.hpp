#pragma once

// Dense row-major tensors with define-by-run reverse-mode autodiff.
//
// The engine is templated on the scalar type: float is the runtime default,
// double exists for the oracle and finite-difference test suites, which need
// tolerances that float cannot reach. Values are immutable after
// construction; only grad buffers mutate. Ops that produce a tensor with no
// differentiable ancestor drop their parent references, so no-grad code
// (sampling, metrics) never accumulates a tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "promptvid/detmath.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/rng.hpp"

namespace promptvid {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string to_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad; // allocated lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backprop;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

template <class T>
inline void check_finite(const std::vector<T>& v, const char* op) {
    for (const T x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            fail(ErrorKind::numeric, std::string("non-finite value produced by ") + op);
        }
    }
}

} // namespace detail

template <class T>
class Tensor {
public:
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    static Tensor from(Shape shape, std::vector<T> data) {
        if (promptvid::numel(shape) != static_cast<std::int64_t>(data.size())) {
            fail(ErrorKind::dimension,
                 "tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + to_string(shape));
        }
        detail::check_finite(data, "tensor construction");
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape) {
        return full(std::move(shape), T(0));
    }

    static Tensor full(Shape shape, T v) {
        std::vector<T> data(static_cast<std::size_t>(promptvid::numel(shape)), v);
        return from(std::move(shape), std::move(data));
    }

    static Tensor randn(Shape shape, RngStream& rng, double stddev = 1.0) {
        std::vector<T> data(static_cast<std::size_t>(promptvid::numel(shape)));
        for (auto& x : data) x = static_cast<T>(rng.normal() * stddev);
        return from(std::move(shape), std::move(data));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }
    std::int64_t extent(std::int64_t axis) const {
        if (axis < 0) axis += rank();
        return node_->shape[static_cast<std::size_t>(axis)];
    }

    const std::vector<T>& values() const { return node_->value; }
    T value_at(std::int64_t flat) const { return node_->value[static_cast<std::size_t>(flat)]; }
    T scalar() const {
        if (numel() != 1) fail(ErrorKind::contract, "scalar() on tensor of shape " + to_string(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        if (!node_->parents.empty()) fail(ErrorKind::contract, "requires_grad can only be set on leaves");
        node_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (node_->grad.empty()) fail(ErrorKind::state, "gradient not populated; run backward first");
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    // Fresh leaf sharing nothing with the tape.
    Tensor detach() const {
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = node_->shape;
        n->value = node_->value;
        return Tensor(std::move(n));
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> data(node_->value.size());
        for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<U>(node_->value[i]);
        return Tensor<U>::from(node_->shape, std::move(data));
    }

    NodePtr node() const { return node_; }
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

private:
    NodePtr node_;
};

namespace detail {

template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, const char* op,
                  std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> backprop) {
    check_finite(value, op);
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    n->requires_grad = rg;
    if (rg) {
        n->parents.reserve(parents.size());
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Tensor<T>(std::move(n));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        fail(ErrorKind::dimension,
             std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
    }
}

// --- raw matmul kernels; accumulation order over the inner index is fixed ---

template <class T>
void mm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (std::int64_t l = 0; l < k; ++l) {
            const T av = a[i * k + l];
            const T* brow = b + l * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,q] += a[m,p] * bt[q,p]^T
template <class T>
void mm_nt(const T* a, const T* bt, T* c, std::int64_t m, std::int64_t p, std::int64_t q) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * p;
        for (std::int64_t j = 0; j < q; ++j) {
            const T* brow = bt + j * p;
            T acc = 0;
            for (std::int64_t l = 0; l < p; ++l) acc += arow[l] * brow[l];
            c[i * q + j] += acc;
        }
    }
}

// c[m,n] += at[p,m]^T * b[p,n]
template <class T>
void mm_tn(const T* at, const T* b, T* c, std::int64_t p, std::int64_t m, std::int64_t n) {
    for (std::int64_t l = 0; l < p; ++l) {
        const T* arow = at + l * m;
        const T* brow = b + l * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

struct BatchMap {
    Shape out_batch;
    std::int64_t count = 1;
    // strides (in units of matrices) into each operand for every out batch dim
    std::vector<std::int64_t> a_stride, b_stride;
};

inline BatchMap broadcast_batches(const Shape& ash, const Shape& bsh, const char* op) {
    Shape ab(ash.begin(), ash.end() - 2), bb(bsh.begin(), bsh.end() - 2);
    std::size_t r = std::max(ab.size(), bb.size());
    BatchMap m;
    m.out_batch.assign(r, 1);
    std::vector<std::int64_t> ae(r, 1), be(r, 1);
    for (std::size_t i = 0; i < ab.size(); ++i) ae[r - ab.size() + i] = ab[i];
    for (std::size_t i = 0; i < bb.size(); ++i) be[r - bb.size() + i] = bb[i];
    for (std::size_t i = 0; i < r; ++i) {
        if (ae[i] == be[i]) m.out_batch[i] = ae[i];
        else if (ae[i] == 1) m.out_batch[i] = be[i];
        else if (be[i] == 1) m.out_batch[i] = ae[i];
        else
            fail(ErrorKind::dimension, std::string(op) + ": batch extents not broadcastable " +
                                           to_string(ash) + " vs " + to_string(bsh));
    }
    m.count = numel(m.out_batch);
    m.a_stride.assign(r, 0);
    m.b_stride.assign(r, 0);
    std::int64_t as = 1, bs = 1;
    for (std::size_t i = r; i-- > 0;) {
        m.a_stride[i] = (ae[i] == 1) ? 0 : as;
        m.b_stride[i] = (be[i] == 1) ? 0 : bs;
        as *= ae[i];
        bs *= be[i];
    }
    return m;
}

inline void batch_offsets(const BatchMap& m, std::int64_t flat, std::int64_t& aoff, std::int64_t& boff) {
    aoff = 0;
    boff = 0;
    for (std::size_t i = m.out_batch.size(); i-- > 0;) {
        std::int64_t idx = flat % m.out_batch[i];
        flat /= m.out_batch[i];
        aoff += idx * m.a_stride[i];
        boff += idx * m.b_stride[i];
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), "add", {a, b},
                              [an, bn](detail::Node<T>& self) {
                                  if (an->requires_grad) {
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                      bn->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
                                  }
                              });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), "sub", {a, b},
                              [an, bn](detail::Node<T>& self) {
                                  if (an->requires_grad) {
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                      bn->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
                                  }
                              });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(a.shape(), std::move(out), "mul", {a, b},
                              [an, bn](detail::Node<T>& self) {
                                  if (an->requires_grad) {
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          an->grad[i] += self.grad[i] * bn->value[i];
                                  }
                                  if (bn->requires_grad) {
                                      bn->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i)
                                          bn->grad[i] += self.grad[i] * an->value[i];
                                  }
                              });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, double s) {
    std::vector<T> out(a.values());
    for (auto& x : out) x = static_cast<T>(x * s);
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), "mul_scalar", {a},
                              [an, s](detail::Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      an->grad[i] += static_cast<T>(self.grad[i] * s);
                              });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, double s) {
    std::vector<T> out(a.values());
    for (auto& x : out) x = static_cast<T>(x + s);
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), "add_scalar", {a},
                              [an](detail::Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
                              });
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
    std::vector<T> out(a.values().size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = static_cast<double>(av[i]);
        out[i] = static_cast<T>(x * detmath::det_sigmoid(x));
    }
    auto an = a.node();
    return detail::make_op<T>(a.shape(), std::move(out), "silu", {a},
                              [an](detail::Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                      double x = static_cast<double>(an->value[i]);
                                      double s = detmath::det_sigmoid(x);
                                      an->grad[i] += static_cast<T>(static_cast<double>(self.grad[i]) *
                                                                    s * (1.0 + x * (1.0 - s)));
                                  }
                              });
}

// x[..., d] + b[d]
template <class T>
Tensor<T> add_bias_lastdim(const Tensor<T>& x, const Tensor<T>& b) {
    if (b.rank() != 1 || x.rank() < 1 || x.extent(-1) != b.extent(0)) {
        fail(ErrorKind::dimension, "add_bias_lastdim: " + to_string(x.shape()) + " vs " + to_string(b.shape()));
    }
    const std::int64_t d = b.extent(0);
    const std::int64_t rows = x.numel() / d;
    std::vector<T> out(x.values());
    const auto& bv = b.values();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(r * d + j)] += bv[static_cast<std::size_t>(j)];
    auto xn = x.node();
    auto bn = b.node();
    return detail::make_op<T>(x.shape(), std::move(out), "add_bias_lastdim", {x, b},
                              [xn, bn, rows, d](detail::Node<T>& self) {
                                  if (xn->requires_grad) {
                                      xn->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                      bn->ensure_grad();
                                      for (std::int64_t r = 0; r < rows; ++r)
                                          for (std::int64_t j = 0; j < d; ++j)
                                              bn->grad[static_cast<std::size_t>(j)] +=
                                                  self.grad[static_cast<std::size_t>(r * d + j)];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.numel()) {
        fail(ErrorKind::dimension, "reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    }
    auto an = a.node();
    return detail::make_op<T>(std::move(shape), std::vector<T>(a.values()), "reshape", {a},
                              [an](detail::Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
                              });
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
    const auto r = static_cast<std::size_t>(a.rank());
    if (axes.size() != r) fail(ErrorKind::dimension, "permute: axes rank mismatch");
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.shape()[static_cast<std::size_t>(axes[i])];

    std::vector<std::int64_t> in_strides(r, 1), out_strides(r, 1);
    for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * a.shape()[i];
    for (std::size_t i = r - 1; i > 0; --i) out_strides[i - 1] = out_strides[i] * out_shape[i];

    // stride of the input along each output axis
    std::vector<std::int64_t> gather(r);
    for (std::size_t i = 0; i < r; ++i) gather[i] = in_strides[static_cast<std::size_t>(axes[i])];

    const auto n = static_cast<std::size_t>(a.numel());
    std::vector<T> out(n);
    std::vector<std::int64_t> src_of(n);
    const auto& av = a.values();
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t src = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
        out[flat] = av[static_cast<std::size_t>(src)];
        src_of[flat] = src;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                src += gather[d];
                break;
            }
            src -= gather[d] * (out_shape[d] - 1);
            idx[d] = 0;
        }
    }
    auto an = a.node();
    return detail::make_op<T>(std::move(out_shape), std::move(out), "permute", {a},
                              [an, src_of = std::move(src_of)](detail::Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      an->grad[static_cast<std::size_t>(src_of[i])] += self.grad[i];
                              });
}

template <class T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
    std::vector<int> axes(static_cast<std::size_t>(a.rank()));
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(a, axes);
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
    std::vector<Tensor<T>> kept;
    for (const auto& p : parts)
        if (p.defined() && p.numel() > 0) kept.push_back(p);
    if (kept.empty()) fail(ErrorKind::contract, "concat: no non-empty inputs");
    if (kept.size() == 1) return kept[0];

    const auto r = kept[0].rank();
    if (axis < 0) axis += static_cast<int>(r);
    Shape out_shape = kept[0].shape();
    std::int64_t total = 0;
    for (const auto& p : kept) {
        if (p.rank() != r) fail(ErrorKind::dimension, "concat: rank mismatch");
        for (std::int64_t d = 0; d < r; ++d) {
            if (d == axis) continue;
            if (p.shape()[static_cast<std::size_t>(d)] != out_shape[static_cast<std::size_t>(d)])
                fail(ErrorKind::dimension, "concat: shape mismatch " + to_string(p.shape()) + " vs " +
                                               to_string(out_shape) + " on non-concat axis");
        }
        total += p.extent(axis);
    }
    out_shape[static_cast<std::size_t>(axis)] = total;

    std::int64_t outer = 1, inner = 1;
    for (std::int64_t d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
    for (std::int64_t d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<std::size_t>(d)];

    std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
    const std::int64_t out_row = total * inner;
    std::int64_t off = 0;
    std::vector<std::int64_t> part_off(kept.size());
    for (std::size_t p = 0; p < kept.size(); ++p) {
        part_off[p] = off;
        const std::int64_t len = kept[p].extent(axis) * inner;
        const auto& pv = kept[p].values();
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(pv.begin() + o * len, len, out.begin() + o * out_row + off);
        off += len;
    }

    std::vector<typename Tensor<T>::NodePtr> pnodes;
    for (const auto& p : kept) pnodes.push_back(p.node());
    std::vector<std::int64_t> plens;
    for (const auto& p : kept) plens.push_back(p.extent(axis) * inner);
    return detail::make_op<T>(std::move(out_shape), std::move(out), "concat", kept,
                              [pnodes, part_off, plens, outer, out_row](detail::Node<T>& self) {
                                  for (std::size_t p = 0; p < pnodes.size(); ++p) {
                                      if (!pnodes[p]->requires_grad) continue;
                                      pnodes[p]->ensure_grad();
                                      for (std::int64_t o = 0; o < outer; ++o)
                                          for (std::int64_t i = 0; i < plens[p]; ++i)
                                              pnodes[p]->grad[static_cast<std::size_t>(o * plens[p] + i)] +=
                                                  self.grad[static_cast<std::size_t>(o * out_row + part_off[p] + i)];
                                  }
                              });
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::int64_t start, std::int64_t len) {
    const auto r = a.rank();
    if (axis < 0) axis += static_cast<int>(r);
    const std::int64_t e = a.extent(axis);
    if (start < 0 || len < 0 || start + len > e) {
        fail(ErrorKind::dimension, "slice: range [" + std::to_string(start) + "," +
                                       std::to_string(start + len) + ") outside extent " + std::to_string(e));
    }
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::int64_t outer = 1, inner = 1;
    for (std::int64_t d = 0; d < axis; ++d) outer *= a.shape()[static_cast<std::size_t>(d)];
    for (std::int64_t d = axis + 1; d < r; ++d) inner *= a.shape()[static_cast<std::size_t>(d)];

    std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
    const auto& av = a.values();
    const std::int64_t in_row = e * inner, out_len = len * inner, off = start * inner;
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(av.begin() + o * in_row + off, out_len, out.begin() + o * out_len);
    auto an = a.node();
    return detail::make_op<T>(std::move(out_shape), std::move(out), "slice", {a},
                              [an, outer, in_row, out_len, off](detail::Node<T>& self) {
                                  an->ensure_grad();
                                  for (std::int64_t o = 0; o < outer; ++o)
                                      for (std::int64_t i = 0; i < out_len; ++i)
                                          an->grad[static_cast<std::size_t>(o * in_row + off + i)] +=
                                              self.grad[static_cast<std::size_t>(o * out_len + i)];
                              });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) fail(ErrorKind::dimension, "matmul: operands must have rank >= 2");
    const std::int64_t m = a.extent(-2), k = a.extent(-1);
    const std::int64_t k2 = b.extent(-2), n = b.extent(-1);
    if (k != k2) {
        fail(ErrorKind::dimension,
             "matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    detail::BatchMap bm = detail::broadcast_batches(a.shape(), b.shape(), "matmul");
    Shape out_shape = bm.out_batch;
    out_shape.push_back(m);
    out_shape.push_back(n);

    std::vector<T> out(static_cast<std::size_t>(numel(out_shape)), T(0));
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::int64_t ob = 0; ob < bm.count; ++ob) {
        std::int64_t ao, bo;
        detail::batch_offsets(bm, ob, ao, bo);
        detail::mm_nn(av.data() + ao * m * k, bv.data() + bo * k * n, out.data() + ob * m * n, m, k, n);
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(std::move(out_shape), std::move(out), "matmul", {a, b},
                              [an, bn, bm, m, k, n](detail::Node<T>& self) {
                                  for (std::int64_t ob = 0; ob < bm.count; ++ob) {
                                      std::int64_t ao, bo;
                                      detail::batch_offsets(bm, ob, ao, bo);
                                      const T* g = self.grad.data() + ob * m * n;
                                      if (an->requires_grad) {
                                          an->ensure_grad();
                                          detail::mm_nt(g, bn->value.data() + bo * k * n,
                                                        an->grad.data() + ao * m * k, m, n, k);
                                      }
                                      if (bn->requires_grad) {
                                          bn->ensure_grad();
                                          detail::mm_tn(an->value.data() + ao * m * k, g,
                                                        bn->grad.data() + bo * k * n, m, k, n);
                                      }
                                  }
                              });
}

// ---------------------------------------------------------------------------
// softmax over the last dimension, max-stabilized
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    if (x.rank() < 1 || x.extent(-1) < 1) {
        fail(ErrorKind::dimension, "softmax_lastdim: empty last dimension in " + to_string(x.shape()));
    }
    const std::int64_t d = x.extent(-1);
    const std::int64_t rows = x.numel() / d;
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    const auto& xv = x.values();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * d;
        T* o = out.data() + r * d;
        double mx = static_cast<double>(in[0]);
        for (std::int64_t j = 1; j < d; ++j) mx = std::max(mx, static_cast<double>(in[j]));
        double sum = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            double e = detmath::det_exp(static_cast<double>(in[j]) - mx);
            o[j] = static_cast<T>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < d; ++j) o[j] = static_cast<T>(o[j] * inv);
    }
    auto xn = x.node();
    return detail::make_op<T>(x.shape(), std::move(out), "softmax_lastdim", {x},
                              [xn, rows, d](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  for (std::int64_t r = 0; r < rows; ++r) {
                                      const T* y = self.value.data() + r * d;
                                      const T* dy = self.grad.data() + r * d;
                                      T* dx = xn->grad.data() + r * d;
                                      T dot = 0;
                                      for (std::int64_t j = 0; j < d; ++j) dot += dy[j] * y[j];
                                      for (std::int64_t j = 0; j < d; ++j) dx[j] += y[j] * (dy[j] - dot);
                                  }
                              });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// GroupNorm over [N, C, ...spatial]; non-affine. Gain/shift live in
// channel_affine so they stay ordinary parameters.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, double eps = 1e-5) {
    if (x.rank() < 2) fail(ErrorKind::dimension, "group_norm: rank must be >= 2");
    const std::int64_t n = x.extent(0), c = x.extent(1);
    if (groups < 1 || c % groups != 0) {
        fail(ErrorKind::dimension, "group_norm: " + std::to_string(groups) + " groups do not divide " +
                                       std::to_string(c) + " channels");
    }
    const std::int64_t spatial = x.numel() / (n * c);
    const std::int64_t gsz = (c / groups) * spatial;
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    std::vector<double> inv_std(static_cast<std::size_t>(n * groups));
    const auto& xv = x.values();
    for (std::int64_t i = 0; i < n * groups; ++i) {
        const T* in = xv.data() + i * gsz;
        double mean = 0.0;
        for (std::int64_t j = 0; j < gsz; ++j) mean += static_cast<double>(in[j]);
        mean /= static_cast<double>(gsz);
        double var = 0.0;
        for (std::int64_t j = 0; j < gsz; ++j) {
            double dv = static_cast<double>(in[j]) - mean;
            var += dv * dv;
        }
        var /= static_cast<double>(gsz);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = inv;
        T* o = out.data() + i * gsz;
        for (std::int64_t j = 0; j < gsz; ++j) o[j] = static_cast<T>((static_cast<double>(in[j]) - mean) * inv);
    }
    auto xn = x.node();
    return detail::make_op<T>(x.shape(), std::move(out), "group_norm", {x},
                              [xn, n, groups, gsz, inv_std = std::move(inv_std)](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  for (std::int64_t i = 0; i < n * groups; ++i) {
                                      const T* xh = self.value.data() + i * gsz; // normalized values
                                      const T* dy = self.grad.data() + i * gsz;
                                      T* dx = xn->grad.data() + i * gsz;
                                      double mean_dy = 0.0, mean_dyxh = 0.0;
                                      for (std::int64_t j = 0; j < gsz; ++j) {
                                          mean_dy += static_cast<double>(dy[j]);
                                          mean_dyxh += static_cast<double>(dy[j]) * static_cast<double>(xh[j]);
                                      }
                                      mean_dy /= static_cast<double>(gsz);
                                      mean_dyxh /= static_cast<double>(gsz);
                                      const double inv = inv_std[static_cast<std::size_t>(i)];
                                      for (std::int64_t j = 0; j < gsz; ++j) {
                                          dx[j] += static_cast<T>(inv * (static_cast<double>(dy[j]) - mean_dy -
                                                                         static_cast<double>(xh[j]) * mean_dyxh));
                                      }
                                  }
                              });
}

// y[n,c,s] = x[n,c,s] * gamma[c] + beta[c]
template <class T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
    if (x.rank() < 2 || gamma.rank() != 1 || beta.rank() != 1 ||
        gamma.extent(0) != x.extent(1) || beta.extent(0) != x.extent(1)) {
        fail(ErrorKind::dimension, "channel_affine: " + to_string(x.shape()) + " with gamma " +
                                       to_string(gamma.shape()) + ", beta " + to_string(beta.shape()));
    }
    const std::int64_t n = x.extent(0), c = x.extent(1);
    const std::int64_t spatial = x.numel() / (n * c);
    std::vector<T> out(static_cast<std::size_t>(x.numel()));
    const auto& xv = x.values();
    const auto& gv = gamma.values();
    const auto& bv = beta.values();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            const T g = gv[static_cast<std::size_t>(j)], b = bv[static_cast<std::size_t>(j)];
            const T* in = xv.data() + (i * c + j) * spatial;
            T* o = out.data() + (i * c + j) * spatial;
            for (std::int64_t s = 0; s < spatial; ++s) o[s] = in[s] * g + b;
        }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_op<T>(x.shape(), std::move(out), "channel_affine", {x, gamma, beta},
                              [xn, gn, bn, n, c, spatial](detail::Node<T>& self) {
                                  for (std::int64_t i = 0; i < n; ++i)
                                      for (std::int64_t j = 0; j < c; ++j) {
                                          const std::int64_t base = (i * c + j) * spatial;
                                          const T* dy = self.grad.data() + base;
                                          if (xn->requires_grad) {
                                              xn->ensure_grad();
                                              const T g = gn->value[static_cast<std::size_t>(j)];
                                              T* dx = xn->grad.data() + base;
                                              for (std::int64_t s = 0; s < spatial; ++s) dx[s] += dy[s] * g;
                                          }
                                          if (gn->requires_grad) {
                                              gn->ensure_grad();
                                              const T* in = xn->value.data() + base;
                                              T acc = 0;
                                              for (std::int64_t s = 0; s < spatial; ++s) acc += dy[s] * in[s];
                                              gn->grad[static_cast<std::size_t>(j)] += acc;
                                          }
                                          if (bn->requires_grad) {
                                              bn->ensure_grad();
                                              T acc = 0;
                                              for (std::int64_t s = 0; s < spatial; ++s) acc += dy[s];
                                              bn->grad[static_cast<std::size_t>(j)] += acc;
                                          }
                                      }
                              });
}

// ---------------------------------------------------------------------------
// conv3d: x[B,Ci,F,H,W] * w[Co,Ci,kf,kh,kw] -> [B,Co,F',H',W']
// ---------------------------------------------------------------------------

struct Conv3dSpec {
    int stride_f = 1, stride_h = 1, stride_w = 1;
    int pad_f = 0, pad_h = 0, pad_w = 0;

    // "same" padding for odd kernels at stride 1
    static Conv3dSpec same(std::int64_t kf, std::int64_t kh, std::int64_t kw) {
        Conv3dSpec s;
        s.pad_f = static_cast<int>((kf - 1) / 2);
        s.pad_h = static_cast<int>((kh - 1) / 2);
        s.pad_w = static_cast<int>((kw - 1) / 2);
        return s;
    }
};

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, const Conv3dSpec& sp) {
    if (x.rank() != 5 || w.rank() != 5) {
        fail(ErrorKind::dimension, "conv3d: need x rank 5 and w rank 5, got " + to_string(x.shape()) +
                                       " and " + to_string(w.shape()));
    }
    const std::int64_t B = x.extent(0), Ci = x.extent(1), F = x.extent(2), H = x.extent(3), W = x.extent(4);
    const std::int64_t Co = w.extent(0), kf = w.extent(2), kh = w.extent(3), kw = w.extent(4);
    if (w.extent(1) != Ci) {
        fail(ErrorKind::dimension, "conv3d: channel mismatch, x " + to_string(x.shape()) + " vs w " +
                                       to_string(w.shape()));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != Co)) {
        fail(ErrorKind::dimension, "conv3d: bias shape " + to_string(bias.shape()));
    }
    if (kf > F + 2 * sp.pad_f || kh > H + 2 * sp.pad_h || kw > W + 2 * sp.pad_w) {
        fail(ErrorKind::dimension, "conv3d: kernel " + to_string(w.shape()) +
                                       " larger than padded input " + to_string(x.shape()));
    }
    const std::int64_t Fo = (F + 2 * sp.pad_f - kf) / sp.stride_f + 1;
    const std::int64_t Ho = (H + 2 * sp.pad_h - kh) / sp.stride_h + 1;
    const std::int64_t Wo = (W + 2 * sp.pad_w - kw) / sp.stride_w + 1;

    Shape out_shape{B, Co, Fo, Ho, Wo};
    std::vector<T> out(static_cast<std::size_t>(numel(out_shape)), T(0));
    const auto& xv = x.values();
    const auto& wv = w.values();

    auto run_fwd = [&](const T* xp, const T* wp, T* op) {
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t co = 0; co < Co; ++co)
                for (std::int64_t ci = 0; ci < Ci; ++ci)
                    for (std::int64_t zf = 0; zf < kf; ++zf)
                        for (std::int64_t zh = 0; zh < kh; ++zh)
                            for (std::int64_t zw = 0; zw < kw; ++zw) {
                                const T wval = wp[(((co * Ci + ci) * kf + zf) * kh + zh) * kw + zw];
                                for (std::int64_t fo = 0; fo < Fo; ++fo) {
                                    const std::int64_t fi = fo * sp.stride_f + zf - sp.pad_f;
                                    if (fi < 0 || fi >= F) continue;
                                    for (std::int64_t ho = 0; ho < Ho; ++ho) {
                                        const std::int64_t hi = ho * sp.stride_h + zh - sp.pad_h;
                                        if (hi < 0 || hi >= H) continue;
                                        const T* xrow = xp + (((b * Ci + ci) * F + fi) * H + hi) * W;
                                        T* orow = op + (((b * Co + co) * Fo + fo) * Ho + ho) * Wo;
                                        for (std::int64_t wo = 0; wo < Wo; ++wo) {
                                            const std::int64_t wi = wo * sp.stride_w + zw - sp.pad_w;
                                            if (wi < 0 || wi >= W) continue;
                                            orow[wo] += wval * xrow[wi];
                                        }
                                    }
                                }
                            }
    };
    run_fwd(xv.data(), wv.data(), out.data());
    if (bias.defined()) {
        const auto& bv = bias.values();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t co = 0; co < Co; ++co) {
                T* op = out.data() + (b * Co + co) * Fo * Ho * Wo;
                const T bval = bv[static_cast<std::size_t>(co)];
                for (std::int64_t i = 0; i < Fo * Ho * Wo; ++i) op[i] += bval;
            }
    }

    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    std::vector<Tensor<T>> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return detail::make_op<T>(
        std::move(out_shape), std::move(out), "conv3d", parents,
        [xn, wn, bn, sp, B, Ci, Co, F, H, W, kf, kh, kw, Fo, Ho, Wo](detail::Node<T>& self) {
            const T* g = self.grad.data();
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t co = 0; co < Co; ++co)
                        for (std::int64_t ci = 0; ci < Ci; ++ci)
                            for (std::int64_t zf = 0; zf < kf; ++zf)
                                for (std::int64_t zh = 0; zh < kh; ++zh)
                                    for (std::int64_t zw = 0; zw < kw; ++zw) {
                                        const T wval =
                                            wn->value[static_cast<std::size_t>((((co * Ci + ci) * kf + zf) * kh + zh) * kw + zw)];
                                        for (std::int64_t fo = 0; fo < Fo; ++fo) {
                                            const std::int64_t fi = fo * sp.stride_f + zf - sp.pad_f;
                                            if (fi < 0 || fi >= F) continue;
                                            for (std::int64_t ho = 0; ho < Ho; ++ho) {
                                                const std::int64_t hi = ho * sp.stride_h + zh - sp.pad_h;
                                                if (hi < 0 || hi >= H) continue;
                                                T* dxrow = xn->grad.data() + (((b * Ci + ci) * F + fi) * H + hi) * W;
                                                const T* grow = g + (((b * Co + co) * Fo + fo) * Ho + ho) * Wo;
                                                for (std::int64_t wo = 0; wo < Wo; ++wo) {
                                                    const std::int64_t wi = wo * sp.stride_w + zw - sp.pad_w;
                                                    if (wi < 0 || wi >= W) continue;
                                                    dxrow[wi] += wval * grow[wo];
                                                }
                                            }
                                        }
                                    }
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t co = 0; co < Co; ++co)
                        for (std::int64_t ci = 0; ci < Ci; ++ci)
                            for (std::int64_t zf = 0; zf < kf; ++zf)
                                for (std::int64_t zh = 0; zh < kh; ++zh)
                                    for (std::int64_t zw = 0; zw < kw; ++zw) {
                                        T acc = 0;
                                        for (std::int64_t fo = 0; fo < Fo; ++fo) {
                                            const std::int64_t fi = fo * sp.stride_f + zf - sp.pad_f;
                                            if (fi < 0 || fi >= F) continue;
                                            for (std::int64_t ho = 0; ho < Ho; ++ho) {
                                                const std::int64_t hi = ho * sp.stride_h + zh - sp.pad_h;
                                                if (hi < 0 || hi >= H) continue;
                                                const T* xrow =
                                                    xn->value.data() + (((b * Ci + ci) * F + fi) * H + hi) * W;
                                                const T* grow = g + (((b * Co + co) * Fo + fo) * Ho + ho) * Wo;
                                                for (std::int64_t wo = 0; wo < Wo; ++wo) {
                                                    const std::int64_t wi = wo * sp.stride_w + zw - sp.pad_w;
                                                    if (wi < 0 || wi >= W) continue;
                                                    acc += xrow[wi] * grow[wo];
                                                }
                                            }
                                        }
                                        wn->grad[static_cast<std::size_t>((((co * Ci + ci) * kf + zf) * kh + zh) * kw + zw)] += acc;
                                    }
            }
            if (bn && bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t co = 0; co < Co; ++co) {
                        const T* grow = g + (b * Co + co) * Fo * Ho * Wo;
                        T acc = 0;
                        for (std::int64_t i = 0; i < Fo * Ho * Wo; ++i) acc += grow[i];
                        bn->grad[static_cast<std::size_t>(co)] += acc;
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// 2x resampling over the last two dims
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> resample2x_down(const Tensor<T>& x) {
    if (x.rank() < 2) fail(ErrorKind::dimension, "resample2x_down: rank must be >= 2");
    const std::int64_t H = x.extent(-2), W = x.extent(-1);
    if (H % 2 != 0 || W % 2 != 0) {
        fail(ErrorKind::dimension, "resample2x_down: odd extents in " + to_string(x.shape()));
    }
    const std::int64_t lead = x.numel() / (H * W);
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = H / 2;
    out_shape[out_shape.size() - 1] = W / 2;
    std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
    const auto& xv = x.values();
    const std::int64_t Ho = H / 2, Wo = W / 2;
    for (std::int64_t l = 0; l < lead; ++l) {
        const T* in = xv.data() + l * H * W;
        T* o = out.data() + l * Ho * Wo;
        for (std::int64_t i = 0; i < Ho; ++i)
            for (std::int64_t j = 0; j < Wo; ++j) {
                const T* p = in + 2 * i * W + 2 * j;
                o[i * Wo + j] = static_cast<T>((p[0] + p[1] + p[W] + p[W + 1]) * T(0.25));
            }
    }
    auto xn = x.node();
    return detail::make_op<T>(std::move(out_shape), std::move(out), "resample2x_down", {x},
                              [xn, lead, H, W, Ho, Wo](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  for (std::int64_t l = 0; l < lead; ++l) {
                                      const T* dy = self.grad.data() + l * Ho * Wo;
                                      T* dx = xn->grad.data() + l * H * W;
                                      for (std::int64_t i = 0; i < Ho; ++i)
                                          for (std::int64_t j = 0; j < Wo; ++j) {
                                              const T v = static_cast<T>(dy[i * Wo + j] * T(0.25));
                                              T* p = dx + 2 * i * W + 2 * j;
                                              p[0] += v;
                                              p[1] += v;
                                              p[W] += v;
                                              p[W + 1] += v;
                                          }
                                  }
                              });
}

template <class T>
Tensor<T> resample2x_up(const Tensor<T>& x) {
    if (x.rank() < 2) fail(ErrorKind::dimension, "resample2x_up: rank must be >= 2");
    const std::int64_t H = x.extent(-2), W = x.extent(-1);
    const std::int64_t lead = x.numel() / (H * W);
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = H * 2;
    out_shape[out_shape.size() - 1] = W * 2;
    std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
    const auto& xv = x.values();
    const std::int64_t Wo = W * 2;
    for (std::int64_t l = 0; l < lead; ++l) {
        const T* in = xv.data() + l * H * W;
        T* o = out.data() + l * H * 2 * Wo;
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j) {
                const T v = in[i * W + j];
                T* p = o + 2 * i * Wo + 2 * j;
                p[0] = v;
                p[1] = v;
                p[Wo] = v;
                p[Wo + 1] = v;
            }
    }
    auto xn = x.node();
    return detail::make_op<T>(std::move(out_shape), std::move(out), "resample2x_up", {x},
                              [xn, lead, H, W, Wo](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  for (std::int64_t l = 0; l < lead; ++l) {
                                      const T* dy = self.grad.data() + l * H * 2 * Wo;
                                      T* dx = xn->grad.data() + l * H * W;
                                      for (std::int64_t i = 0; i < H; ++i)
                                          for (std::int64_t j = 0; j < W; ++j) {
                                              const T* p = dy + 2 * i * Wo + 2 * j;
                                              dx[i * W + j] += p[0] + p[1] + p[Wo] + p[Wo + 1];
                                          }
                                  }
                              });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = 0;
    for (const T v : x.values()) acc += v;
    auto xn = x.node();
    return detail::make_op<T>(Shape{}, std::vector<T>{acc}, "sum_all", {x},
                              [xn](detail::Node<T>& self) {
                                  xn->ensure_grad();
                                  const T g = self.grad[0];
                                  for (auto& d : xn->grad) d += g;
                              });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// Mean squared error over all elements.
template <class T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mse");
    const auto& av = a.values();
    const auto& bv = b.values();
    double acc = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        acc += d * d;
    }
    const double inv_n = 1.0 / static_cast<double>(av.size());
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<T>(Shape{}, std::vector<T>{static_cast<T>(acc * inv_n)}, "mse", {a, b},
                              [an, bn, inv_n](detail::Node<T>& self) {
                                  const double g = 2.0 * inv_n * static_cast<double>(self.grad[0]);
                                  if (an->requires_grad) {
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < an->value.size(); ++i)
                                          an->grad[i] += static_cast<T>(g * (static_cast<double>(an->value[i]) -
                                                                             static_cast<double>(bn->value[i])));
                                  }
                                  if (bn->requires_grad) {
                                      bn->ensure_grad();
                                      for (std::size_t i = 0; i < bn->value.size(); ++i)
                                          bn->grad[i] -= static_cast<T>(g * (static_cast<double>(an->value[i]) -
                                                                             static_cast<double>(bn->value[i])));
                                  }
                              });
}

// ---------------------------------------------------------------------------
// reverse-mode backward
// ---------------------------------------------------------------------------

// Populates grad for every tensor reachable from `loss` that requires grad.
// Replay order is the reverse of a deterministic depth-first post-order, so
// accumulation order is identical across runs.
template <class T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        fail(ErrorKind::contract, "backward: loss must be scalar, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
        fail(ErrorKind::contract, "backward: loss does not depend on any tensor requiring grad");
    }
    using NodeT = detail::Node<T>;
    std::vector<NodeT*> order;
    std::vector<std::pair<NodeT*, std::size_t>> stack;
    // Visited set keyed by pointer; kept as a sorted vector.
    std::vector<NodeT*> visited;
    auto is_visited = [&](NodeT* n) {
        auto it = std::lower_bound(visited.begin(), visited.end(), n);
        return it != visited.end() && *it == n;
    };
    auto insert_visited = [&](NodeT* n) {
        visited.insert(std::lower_bound(visited.begin(), visited.end(), n), n);
    };

    stack.emplace_back(loss.node().get(), 0);
    insert_visited(loss.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            NodeT* p = n->parents[next++].get();
            if (p->requires_grad && !is_visited(p)) {
                insert_visited(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = *it;
        if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// serialization: versioned binary blob
// ---------------------------------------------------------------------------
// layout: magic "PVTB" | u16 version | u8 dtype (1 = f32, 2 = f64) | u8 zero |
//         u32 rank | i64 extents[rank] | little-endian payload

namespace detail {

template <class T>
constexpr std::uint8_t dtype_code() {
    if constexpr (std::is_same_v<T, float>) return 1;
    else return 2;
}

inline void write_raw(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_raw(std::istream& is, void* p, std::size_t n) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is) fail(ErrorKind::data, "truncated tensor blob");
}

} // namespace detail

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    static_assert(sizeof(float) == 4 && sizeof(double) == 8);
    detail::write_raw(os, "PVTB", 4);
    const std::uint16_t version = 1;
    detail::write_raw(os, &version, 2);
    const std::uint8_t dtype = detail::dtype_code<T>(), zero = 0;
    detail::write_raw(os, &dtype, 1);
    detail::write_raw(os, &zero, 1);
    const std::uint32_t rank = static_cast<std::uint32_t>(t.rank());
    detail::write_raw(os, &rank, 4);
    for (auto e : t.shape()) detail::write_raw(os, &e, 8);
    detail::write_raw(os, t.values().data(), t.values().size() * sizeof(T));
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
    char magic[4];
    detail::read_raw(is, magic, 4);
    if (std::memcmp(magic, "PVTB", 4) != 0) fail(ErrorKind::version, "bad tensor blob magic");
    std::uint16_t version;
    detail::read_raw(is, &version, 2);
    if (version != 1) fail(ErrorKind::version, "unsupported tensor blob version " + std::to_string(version));
    std::uint8_t dtype, zero;
    detail::read_raw(is, &dtype, 1);
    detail::read_raw(is, &zero, 1);
    if (dtype != detail::dtype_code<T>()) {
        fail(ErrorKind::version, "tensor blob dtype code " + std::to_string(dtype) + " does not match reader");
    }
    std::uint32_t rank;
    detail::read_raw(is, &rank, 4);
    if (rank > 16) fail(ErrorKind::data, "implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) detail::read_raw(is, &e, 8);
    std::vector<T> data(static_cast<std::size_t>(promptvid::numel(shape)));
    detail::read_raw(is, data.data(), data.size() * sizeof(T));
    return Tensor<T>::from(std::move(shape), std::move(data));
}

// Hash of shape plus payload bytes; used for stage-gating checks.
template <class T>
std::uint64_t tensor_hash(const Tensor<T>& t) {
    std::uint64_t h = fnv1a(t.shape().data(), t.shape().size() * sizeof(std::int64_t));
    return fnv1a(t.values().data(), t.values().size() * sizeof(T), h);
}

} // namespace promptvid
