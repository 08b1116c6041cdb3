// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "snf/common.hpp"

namespace snf {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Gradient recording is a thread-local mode so evaluation-only code paths
// build no graph; independent graphs on independent threads never interact.
inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
    ~NoGradGuard() { g_grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

template <class F>
struct Node {
    Shape shape;
    std::vector<F> val;
    std::vector<F> grad;  // allocated on first touch
    bool rg = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> bwd;

    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), F(0));
    }
};

}  // namespace detail

template <class F>
class TensorT {
public:
    using Node = detail::Node<F>;

    TensorT() = default;

    static TensorT from(Shape shape, std::vector<F> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("tensor data size " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        TensorT t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->val = std::move(data);
        t.n_->rg = requires_grad;
        return t;
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<F>(n, F(0)), requires_grad);
    }

    static TensorT full(Shape shape, F v, bool requires_grad = false) {
        size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<F>(n, v), requires_grad);
    }

    static TensorT scalar(F v) { return from({1}, {v}); }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    size_t rank() const { return n_->shape.size(); }
    size_t size() const { return n_->val.size(); }
    std::vector<F>& val() { return n_->val; }
    const std::vector<F>& val() const { return n_->val; }
    std::vector<F>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    // Const access never allocates; an untouched gradient reads as empty.
    const std::vector<F>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->rg; }

    F item() const {
        if (n_->val.size() != 1)
            throw DimensionError("item() on tensor of shape " + shape_str(n_->shape));
        return n_->val[0];
    }

    void zero_grad() { n_->grad.clear(); }

    // Reverse sweep from a scalar: topological order over the recorded
    // graph, gradients accumulate additively into every leaf.
    void backward() {
        if (n_->val.size() != 1)
            throw ParameterError("backward() requires a scalar tensor");
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* p = node->parents[next++].get();
                if (p->rg && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        // Interior grads are scratch space for this sweep; only leaves
        // accumulate across calls.
        for (Node* n : order)
            if (n->bwd) n->grad.clear();
        n_->ensure_grad();
        n_->grad[0] += F(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it)
            if ((*it)->bwd) (*it)->bwd(**it);
    }

    std::shared_ptr<Node> node() const { return n_; }

    static TensorT wrap(std::shared_ptr<Node> n) {
        TensorT t;
        t.n_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<Node> n_;
};

using Tensor = TensorT<float>;

namespace detail {

// Builds an op node. `parents` drives the topological sweep; `bwd` runs with
// the node's grad populated and must guard each accumulation on parent->rg.
template <class F>
TensorT<F> make_op(Shape shape, std::vector<F> val,
                   std::vector<std::shared_ptr<Node<F>>> parents,
                   std::function<void(Node<F>&)> bwd) {
    auto out = TensorT<F>::from(std::move(shape), std::move(val));
    bool track = g_grad_enabled;
    if (track) {
        track = false;
        for (const auto& p : parents)
            if (p->rg) track = true;
    }
    if (track) {
        auto n = out.node();
        n->rg = true;
        for (auto& p : parents)
            if (p->rg) n->parents.push_back(p);
        n->bwd = std::move(bwd);
    }
    return out;
}

// ---- raw matrix kernels (accumulate into C) ----

template <class F>
void k_ab(F* C, const F* A, const F* B, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const F* a = A + i * k;
        F* c = C + i * n;
        for (size_t l = 0; l < k; ++l) {
            F av = a[l];
            if (av == F(0)) continue;
            const F* b = B + l * n;
            for (size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

template <class F>
void k_abt(F* C, const F* A, const F* B, size_t m, size_t k, size_t n) {
    // C[m,n] += A[m,k] * B[n,k]^T
    for (size_t i = 0; i < m; ++i) {
        const F* a = A + i * k;
        F* c = C + i * n;
        for (size_t j = 0; j < n; ++j) {
            const F* b = B + j * k;
            F acc = F(0);
            for (size_t l = 0; l < k; ++l) acc += a[l] * b[l];
            c[j] += acc;
        }
    }
}

template <class F>
void k_atb(F* C, const F* A, const F* B, size_t m, size_t k, size_t n) {
    // C[k,n] += A[m,k]^T * B[m,n]
    for (size_t i = 0; i < m; ++i) {
        const F* a = A + i * k;
        const F* b = B + i * n;
        for (size_t l = 0; l < k; ++l) {
            F av = a[l];
            if (av == F(0)) continue;
            F* c = C + l * n;
            for (size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

template <class F>
std::vector<F> permute_values(const std::vector<F>& v, const Shape& in_shape,
                              const std::vector<size_t>& perm) {
    size_t r = in_shape.size();
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[perm[i]];
    std::vector<size_t> in_strides(r, 1), out_strides(r, 1);
    for (size_t i = r; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * in_shape[i];
        out_strides[i - 1] = out_strides[i] * out_shape[i];
    }
    std::vector<F> out(v.size());
    std::vector<size_t> idx(r, 0);
    for (size_t o = 0; o < v.size(); ++o) {
        size_t src = 0;
        for (size_t i = 0; i < r; ++i) src += idx[i] * in_strides[perm[i]];
        out[o] = v[src];
        for (size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

}  // namespace detail

// ----------------------------- shape ops -----------------------------

template <class F>
TensorT<F> reshape(const TensorT<F>& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape " + shape_str(x.shape()) + " to " + shape_str(shape) +
                             " changes element count");
    auto xn = x.node();
    return detail::make_op<F>(std::move(shape), x.val(), {xn}, [xn](detail::Node<F>& out) {
        if (!xn->rg) return;
        xn->ensure_grad();
        for (size_t i = 0; i < out.grad.size(); ++i) xn->grad[i] += out.grad[i];
    });
}

template <class F>
TensorT<F> transpose(const TensorT<F>& x, std::vector<size_t> perm) {
    size_t r = x.rank();
    if (perm.size() != r) throw DimensionError("transpose permutation rank mismatch");
    std::vector<bool> used(r, false);
    for (size_t p : perm) {
        if (p >= r || used[p]) throw DimensionError("transpose permutation is not a permutation");
        used[p] = true;
    }
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = x.shape()[perm[i]];
    std::vector<size_t> inv(r);
    for (size_t i = 0; i < r; ++i) inv[perm[i]] = i;
    auto xn = x.node();
    auto val = detail::permute_values(x.val(), x.shape(), perm);
    Shape saved_out = out_shape;
    return detail::make_op<F>(std::move(out_shape), std::move(val), {xn},
                              [xn, inv, saved_out](detail::Node<F>& out) {
                                  if (!xn->rg) return;
                                  xn->ensure_grad();
                                  auto g = detail::permute_values(out.grad, saved_out, inv);
                                  for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
                              });
}

template <class F>
TensorT<F> concat(const std::vector<TensorT<F>>& xs, size_t axis) {
    if (xs.empty()) throw ParameterError("concat of zero tensors");
    size_t r = xs[0].rank();
    if (axis >= r) throw DimensionError("concat axis out of range");
    Shape out_shape = xs[0].shape();
    size_t total_axis = 0;
    for (const auto& x : xs) {
        if (x.rank() != r) throw DimensionError("concat rank mismatch");
        for (size_t i = 0; i < r; ++i)
            if (i != axis && x.shape()[i] != out_shape[i])
                throw DimensionError("concat shape mismatch at axis " + std::to_string(i));
        total_axis += x.shape()[axis];
    }
    out_shape[axis] = total_axis;
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= out_shape[i];
    for (size_t i = axis + 1; i < r; ++i) inner *= out_shape[i];

    std::vector<F> val(shape_numel(out_shape));
    std::vector<std::shared_ptr<detail::Node<F>>> parents;
    std::vector<size_t> axis_sizes;
    for (const auto& x : xs) {
        parents.push_back(x.node());
        axis_sizes.push_back(x.shape()[axis]);
    }
    size_t row = total_axis * inner;
    for (size_t o = 0; o < outer; ++o) {
        size_t at = 0;
        for (size_t t = 0; t < xs.size(); ++t) {
            size_t block = axis_sizes[t] * inner;
            std::copy_n(xs[t].val().data() + o * block, block, val.data() + o * row + at);
            at += block;
        }
    }
    auto all_parents = parents;
    return detail::make_op<F>(
        std::move(out_shape), std::move(val), parents,
        [all_parents, axis_sizes, outer, inner, row](detail::Node<F>& out) {
            size_t at = 0;
            for (size_t t = 0; t < all_parents.size(); ++t) {
                size_t block = axis_sizes[t] * inner;
                auto& p = all_parents[t];
                if (p->rg) {
                    p->ensure_grad();
                    for (size_t o = 0; o < outer; ++o) {
                        const F* g = out.grad.data() + o * row + at;
                        F* dst = p->grad.data() + o * block;
                        for (size_t i = 0; i < block; ++i) dst[i] += g[i];
                    }
                }
                at += block;
            }
        });
}

// ----------------------------- gather ops -----------------------------

// Gather along `axis`; duplicate indices are allowed and the backward pass
// scatter-adds, which is what keeps masked sub-network training sound.
template <class F>
TensorT<F> index_select(const TensorT<F>& x, size_t axis, const std::vector<uint32_t>& idx) {
    size_t r = x.rank();
    if (axis >= r) throw DimensionError("index_select axis out of range");
    size_t dim = x.shape()[axis];
    for (uint32_t i : idx)
        if (i >= dim)
            throw IndexError("index_select index " + std::to_string(i) + " out of range [0," +
                             std::to_string(dim) + ")");
    Shape out_shape = x.shape();
    out_shape[axis] = idx.size();
    size_t outer = 1, inner = 1;
    for (size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (size_t i = axis + 1; i < r; ++i) inner *= x.shape()[i];

    std::vector<F> val(shape_numel(out_shape));
    const F* src = x.val().data();
    for (size_t o = 0; o < outer; ++o)
        for (size_t j = 0; j < idx.size(); ++j)
            std::copy_n(src + (o * dim + idx[j]) * inner, inner,
                        val.data() + (o * idx.size() + j) * inner);

    auto xn = x.node();
    auto indices = idx;
    return detail::make_op<F>(std::move(out_shape), std::move(val), {xn},
                              [xn, indices, outer, inner, dim](detail::Node<F>& out) {
                                  if (!xn->rg) return;
                                  xn->ensure_grad();
                                  size_t k = indices.size();
                                  for (size_t o = 0; o < outer; ++o)
                                      for (size_t j = 0; j < k; ++j) {
                                          const F* g = out.grad.data() + (o * k + j) * inner;
                                          F* dst = xn->grad.data() + (o * dim + indices[j]) * inner;
                                          for (size_t i = 0; i < inner; ++i) dst[i] += g[i];
                                      }
                              });
}

// Row lookup for token/position tables: [V,E] x ids[N] -> [N,E].
template <class F>
TensorT<F> embedding(const TensorT<F>& table, const std::vector<int32_t>& ids) {
    if (table.rank() != 2) throw DimensionError("embedding table must be rank 2");
    size_t v = table.shape()[0], e = table.shape()[1];
    for (int32_t id : ids)
        if (id < 0 || static_cast<size_t>(id) >= v)
            throw IndexError("embedding id " + std::to_string(id) + " out of range [0," +
                             std::to_string(v) + ")");
    std::vector<F> val(ids.size() * e);
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.val().data() + static_cast<size_t>(ids[i]) * e, e, val.data() + i * e);
    auto tn = table.node();
    auto ids_copy = ids;
    return detail::make_op<F>({ids.size(), e}, std::move(val), {tn},
                              [tn, ids_copy, e](detail::Node<F>& out) {
                                  if (!tn->rg) return;
                                  tn->ensure_grad();
                                  for (size_t i = 0; i < ids_copy.size(); ++i) {
                                      const F* g = out.grad.data() + i * e;
                                      F* dst = tn->grad.data() +
                                               static_cast<size_t>(ids_copy[i]) * e;
                                      for (size_t j = 0; j < e; ++j) dst[j] += g[j];
                                  }
                              });
}

// ----------------------------- pointwise -----------------------------

// Elementwise add; `b` may also have a shape that is a trailing suffix of
// `a`'s (bias rows, causal masks), in which case it is tiled over the rest.
template <class F>
TensorT<F> add(const TensorT<F>& a, const TensorT<F>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sb.size() > sa.size())
        throw DimensionError("add: second operand rank exceeds first");
    for (size_t i = 0; i < sb.size(); ++i)
        if (sb[i] != sa[sa.size() - sb.size() + i])
            throw DimensionError("add: shape " + shape_str(sb) + " is not a suffix of " +
                                 shape_str(sa));
    size_t tail = b.size();
    size_t reps = a.size() / tail;
    std::vector<F> val(a.size());
    const F* pa = a.val().data();
    const F* pb = b.val().data();
    for (size_t r = 0; r < reps; ++r)
        for (size_t i = 0; i < tail; ++i) val[r * tail + i] = pa[r * tail + i] + pb[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<F>(Shape(sa), std::move(val), {an, bn},
                              [an, bn, reps, tail](detail::Node<F>& out) {
                                  if (an->rg) {
                                      an->ensure_grad();
                                      for (size_t i = 0; i < out.grad.size(); ++i)
                                          an->grad[i] += out.grad[i];
                                  }
                                  if (bn->rg) {
                                      bn->ensure_grad();
                                      for (size_t r = 0; r < reps; ++r)
                                          for (size_t i = 0; i < tail; ++i)
                                              bn->grad[i] += out.grad[r * tail + i];
                                  }
                              });
}

template <class F>
TensorT<F> mul(const TensorT<F>& a, const TensorT<F>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    std::vector<F> val(a.size());
    for (size_t i = 0; i < val.size(); ++i) val[i] = a.val()[i] * b.val()[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<F>(Shape(a.shape()), std::move(val), {an, bn},
                              [an, bn](detail::Node<F>& out) {
                                  if (an->rg) {
                                      an->ensure_grad();
                                      for (size_t i = 0; i < out.grad.size(); ++i)
                                          an->grad[i] += out.grad[i] * bn->val[i];
                                  }
                                  if (bn->rg) {
                                      bn->ensure_grad();
                                      for (size_t i = 0; i < out.grad.size(); ++i)
                                          bn->grad[i] += out.grad[i] * an->val[i];
                                  }
                              });
}

template <class F>
TensorT<F> scale(const TensorT<F>& x, F c) {
    std::vector<F> val(x.size());
    for (size_t i = 0; i < val.size(); ++i) val[i] = x.val()[i] * c;
    auto xn = x.node();
    return detail::make_op<F>(Shape(x.shape()), std::move(val), {xn},
                              [xn, c](detail::Node<F>& out) {
                                  if (!xn->rg) return;
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < out.grad.size(); ++i)
                                      xn->grad[i] += out.grad[i] * c;
                              });
}

template <class F>
TensorT<F> gelu(const TensorT<F>& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<F> val(x.size());
    for (size_t i = 0; i < val.size(); ++i) {
        double v = static_cast<double>(x.val()[i]);
        val[i] = static_cast<F>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    auto xn = x.node();
    return detail::make_op<F>(
        Shape(x.shape()), std::move(val), {xn}, [xn](detail::Node<F>& out) {
            if (!xn->rg) return;
            xn->ensure_grad();
            for (size_t i = 0; i < out.grad.size(); ++i) {
                double v = static_cast<double>(xn->val[i]);
                double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                xn->grad[i] += out.grad[i] * static_cast<F>(cdf + v * pdf);
            }
        });
}

template <class F>
TensorT<F> tlog(const TensorT<F>& x) {
    std::vector<F> val(x.size());
    for (size_t i = 0; i < val.size(); ++i) val[i] = std::log(x.val()[i]);
    auto xn = x.node();
    return detail::make_op<F>(Shape(x.shape()), std::move(val), {xn},
                              [xn](detail::Node<F>& out) {
                                  if (!xn->rg) return;
                                  xn->ensure_grad();
                                  for (size_t i = 0; i < out.grad.size(); ++i)
                                      xn->grad[i] += out.grad[i] / xn->val[i];
                              });
}

// ----------------------------- matmuls -----------------------------

template <class F>
TensorT<F> matmul(const TensorT<F>& a, const TensorT<F>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<F> val(m * n, F(0));
    detail::k_ab(val.data(), a.val().data(), b.val().data(), m, k, n);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<F>({m, n}, std::move(val), {an, bn},
                              [an, bn, m, k, n](detail::Node<F>& out) {
                                  if (an->rg) {
                                      an->ensure_grad();
                                      detail::k_abt(an->grad.data(), out.grad.data(),
                                                    bn->val.data(), m, n, k);
                                  }
                                  if (bn->rg) {
                                      bn->ensure_grad();
                                      detail::k_atb(bn->grad.data(), an->val.data(),
                                                    out.grad.data(), m, k, n);
                                  }
                              });
}

// a[m,k] x b[n,k]^T -> [m,n]; the natural orientation for row-major
// weight matrices stored as [out_features, in_features].
template <class F>
TensorT<F> matmul_nt(const TensorT<F>& a, const TensorT<F>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
        throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    std::vector<F> val(m * n, F(0));
    detail::k_abt(val.data(), a.val().data(), b.val().data(), m, k, n);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<F>({m, n}, std::move(val), {an, bn},
                              [an, bn, m, k, n](detail::Node<F>& out) {
                                  if (an->rg) {
                                      an->ensure_grad();
                                      detail::k_ab(an->grad.data(), out.grad.data(),
                                                   bn->val.data(), m, n, k);
                                  }
                                  if (bn->rg) {
                                      bn->ensure_grad();
                                      detail::k_atb(bn->grad.data(), out.grad.data(),
                                                    an->val.data(), m, n, k);
                                  }
                              });
}

template <class F>
TensorT<F> bmm(const TensorT<F>& a, const TensorT<F>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[1])
        throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    size_t nb = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    std::vector<F> val(nb * m * n, F(0));
    for (size_t t = 0; t < nb; ++t)
        detail::k_ab(val.data() + t * m * n, a.val().data() + t * m * k,
                     b.val().data() + t * k * n, m, k, n);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<F>(
        {nb, m, n}, std::move(val), {an, bn}, [an, bn, nb, m, k, n](detail::Node<F>& out) {
            for (size_t t = 0; t < nb; ++t) {
                const F* g = out.grad.data() + t * m * n;
                if (an->rg) {
                    an->ensure_grad();
                    detail::k_abt(an->grad.data() + t * m * k, g, bn->val.data() + t * k * n, m,
                                  n, k);
                }
                if (bn->rg) {
                    bn->ensure_grad();
                    detail::k_atb(bn->grad.data() + t * k * n, an->val.data() + t * m * k, g, m,
                                  k, n);
                }
            }
        });
}

// a[nb,m,k] x b[nb,n,k]^T -> [nb,m,n]; used for attention scores.
template <class F>
TensorT<F> bmm_nt(const TensorT<F>& a, const TensorT<F>& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[2])
        throw DimensionError("bmm_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    size_t nb = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[1];
    std::vector<F> val(nb * m * n, F(0));
    for (size_t t = 0; t < nb; ++t)
        detail::k_abt(val.data() + t * m * n, a.val().data() + t * m * k,
                      b.val().data() + t * n * k, m, k, n);
    auto an = a.node();
    auto bn = b.node();
    return detail::make_op<F>(
        {nb, m, n}, std::move(val), {an, bn}, [an, bn, nb, m, k, n](detail::Node<F>& out) {
            for (size_t t = 0; t < nb; ++t) {
                const F* g = out.grad.data() + t * m * n;
                if (an->rg) {
                    an->ensure_grad();
                    detail::k_ab(an->grad.data() + t * m * k, g, bn->val.data() + t * n * k, m,
                                 n, k);
                }
                if (bn->rg) {
                    bn->ensure_grad();
                    detail::k_atb(bn->grad.data() + t * n * k, g, an->val.data() + t * m * k, m,
                                  n, k);
                }
            }
        });
}

// ----------------------------- normalization -----------------------------

template <class F>
TensorT<F> layer_norm(const TensorT<F>& x, const TensorT<F>& gain, const TensorT<F>& bias,
                      F eps = F(1e-5)) {
    if (x.rank() < 1) throw DimensionError("layer_norm: rank 0 input");
    size_t c = x.shape().back();
    if (gain.size() != c || bias.size() != c)
        throw DimensionError("layer_norm: gain/bias size must match last axis");
    size_t rows = x.size() / c;
    std::vector<F> val(x.size());
    std::vector<F> mean(rows), rstd(rows);
    for (size_t r = 0; r < rows; ++r) {
        const F* px = x.val().data() + r * c;
        F mu = F(0);
        for (size_t i = 0; i < c; ++i) mu += px[i];
        mu /= static_cast<F>(c);
        F var = F(0);
        for (size_t i = 0; i < c; ++i) var += (px[i] - mu) * (px[i] - mu);
        var /= static_cast<F>(c);
        F rs = F(1) / std::sqrt(var + eps);
        mean[r] = mu;
        rstd[r] = rs;
        F* py = val.data() + r * c;
        for (size_t i = 0; i < c; ++i)
            py[i] = gain.val()[i] * ((px[i] - mu) * rs) + bias.val()[i];
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    return detail::make_op<F>(
        Shape(x.shape()), std::move(val), {xn, gn, bn},
        [xn, gn, bn, rows, c, mean, rstd](detail::Node<F>& out) {
            if (bn->rg) bn->ensure_grad();
            if (gn->rg) gn->ensure_grad();
            if (xn->rg) xn->ensure_grad();
            for (size_t r = 0; r < rows; ++r) {
                const F* px = xn->val.data() + r * c;
                const F* g = out.grad.data() + r * c;
                F mu = mean[r], rs = rstd[r];
                if (gn->rg || bn->rg) {
                    for (size_t i = 0; i < c; ++i) {
                        F xhat = (px[i] - mu) * rs;
                        if (gn->rg) gn->grad[i] += g[i] * xhat;
                        if (bn->rg) bn->grad[i] += g[i];
                    }
                }
                if (xn->rg) {
                    F sum_gd = F(0), sum_gdx = F(0);
                    for (size_t i = 0; i < c; ++i) {
                        F xhat = (px[i] - mu) * rs;
                        F gd = g[i] * gn->val[i];
                        sum_gd += gd;
                        sum_gdx += gd * xhat;
                    }
                    F inv_c = F(1) / static_cast<F>(c);
                    for (size_t i = 0; i < c; ++i) {
                        F xhat = (px[i] - mu) * rs;
                        F gd = g[i] * gn->val[i];
                        xn->grad[i + r * c] +=
                            rs * (gd - inv_c * sum_gd - xhat * inv_c * sum_gdx);
                    }
                }
            }
        });
}

// ----------------------------- softmax -----------------------------

// Softmax over the last axis with a temperature divisor; max-subtracted so
// arbitrarily large inputs stay finite and -inf entries become exact zeros.
template <class F>
TensorT<F> softmax(const TensorT<F>& x, F temperature = F(1)) {
    if (!(temperature > F(0)))
        throw ParameterError("softmax: temperature must be positive");
    size_t c = x.shape().back();
    size_t rows = x.size() / c;
    std::vector<F> val(x.size());
    for (size_t r = 0; r < rows; ++r) {
        const F* px = x.val().data() + r * c;
        F* py = val.data() + r * c;
        F m = px[0] / temperature;
        for (size_t i = 1; i < c; ++i) m = std::max(m, px[i] / temperature);
        F z = F(0);
        for (size_t i = 0; i < c; ++i) {
            py[i] = std::exp(px[i] / temperature - m);
            z += py[i];
        }
        F inv = F(1) / z;
        for (size_t i = 0; i < c; ++i) py[i] *= inv;
    }
    auto xn = x.node();
    return detail::make_op<F>(
        Shape(x.shape()), std::move(val), {xn},
        [xn, rows, c, temperature](detail::Node<F>& out) {
            if (!xn->rg) return;
            xn->ensure_grad();
            F inv_t = F(1) / temperature;
            for (size_t r = 0; r < rows; ++r) {
                const F* p = out.val.data() + r * c;
                const F* g = out.grad.data() + r * c;
                F dot = F(0);
                for (size_t i = 0; i < c; ++i) dot += g[i] * p[i];
                for (size_t i = 0; i < c; ++i)
                    xn->grad[r * c + i] += inv_t * p[i] * (g[i] - dot);
            }
        });
}

// ----------------------------- reductions -----------------------------

template <class F>
TensorT<F> sum(const TensorT<F>& x) {
    F acc = F(0);
    for (F v : x.val()) acc += v;
    auto xn = x.node();
    return detail::make_op<F>({1}, {acc}, {xn}, [xn](detail::Node<F>& out) {
        if (!xn->rg) return;
        xn->ensure_grad();
        for (auto& g : xn->grad) g += out.grad[0];
    });
}

template <class F>
TensorT<F> mean(const TensorT<F>& x) {
    if (x.size() == 0) throw ParameterError("mean of empty tensor");
    F acc = F(0);
    for (F v : x.val()) acc += v;
    acc /= static_cast<F>(x.size());
    auto xn = x.node();
    size_t n = x.size();
    return detail::make_op<F>({1}, {acc}, {xn}, [xn, n](detail::Node<F>& out) {
        if (!xn->rg) return;
        xn->ensure_grad();
        F g = out.grad[0] / static_cast<F>(n);
        for (auto& gv : xn->grad) gv += g;
    });
}

// ----------------------------- cross entropy -----------------------------

// Fused log-softmax + NLL, mean over non-ignored positions. Logits may be
// any rank >= 2; leading axes are flattened against the target list.
template <class F>
TensorT<F> cross_entropy(const TensorT<F>& logits, const std::vector<int32_t>& targets,
                         int32_t ignore_index = -1) {
    if (logits.rank() < 2) throw DimensionError("cross_entropy: logits rank must be >= 2");
    size_t c = logits.shape().back();
    size_t rows = logits.size() / c;
    if (rows != targets.size())
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(rows) + " rows");
    size_t valid = 0;
    double acc = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        int32_t t = targets[r];
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<size_t>(t) >= c)
            throw IndexError("cross_entropy: target " + std::to_string(t) +
                             " out of range [0," + std::to_string(c) + ")");
        const F* z = logits.val().data() + r * c;
        F m = z[0];
        for (size_t i = 1; i < c; ++i) m = std::max(m, z[i]);
        double s = 0.0;
        for (size_t i = 0; i < c; ++i) s += std::exp(static_cast<double>(z[i] - m));
        acc += std::log(s) + static_cast<double>(m) - static_cast<double>(z[t]);
        ++valid;
    }
    if (valid == 0) throw ParameterError("cross_entropy: no valid targets");
    auto ln = logits.node();
    auto tg = targets;
    return detail::make_op<F>(
        {1}, {static_cast<F>(acc / static_cast<double>(valid))}, {ln},
        [ln, tg, rows, c, valid, ignore_index](detail::Node<F>& out) {
            if (!ln->rg) return;
            ln->ensure_grad();
            F scale_g = out.grad[0] / static_cast<F>(valid);
            for (size_t r = 0; r < rows; ++r) {
                int32_t t = tg[r];
                if (t == ignore_index) continue;
                const F* z = ln->val.data() + r * c;
                F* d = ln->grad.data() + r * c;
                F m = z[0];
                for (size_t i = 1; i < c; ++i) m = std::max(m, z[i]);
                F s = F(0);
                for (size_t i = 0; i < c; ++i) s += std::exp(z[i] - m);
                F inv = F(1) / s;
                for (size_t i = 0; i < c; ++i) {
                    F p = std::exp(z[i] - m) * inv;
                    d[i] += scale_g * (p - (static_cast<size_t>(t) == i ? F(1) : F(0)));
                }
            }
        });
}

}  // namespace snf
