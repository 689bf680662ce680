#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lrss/tensor.hpp"

namespace lrss {

// Row-index sets for grouped single-query attention: group g attends over
// rows[g*group_size .. (g+1)*group_size).
struct GroupIndex {
    int64_t groups = 0;
    int64_t group_size = 0;
    std::vector<int64_t> rows;  // groups * group_size entries
    int64_t row(int64_t g, int64_t s) const { return rows[static_cast<size_t>(g * group_size + s)]; }
};

// Reverse-mode tape at tensor granularity. Nodes are appended in evaluation
// order; backward walks the tape in reverse, so every consumer runs before
// its producers. Leaf nodes reference external tensors (parameters, inputs)
// without copying; everything else owns its value. FLOPs are counted on the
// forward pass only.
template <typename T>
class Graph {
  public:
    struct Var {
        int idx = -1;
        bool valid() const { return idx >= 0; }
    };

    explicit Graph(FlopCounter* flops = nullptr) : flops_(flops) {}

    void clear() {
        nodes_.clear();
        param_cache_.clear();
    }

    FlopCounter* flops() const { return flops_; }
    size_t num_nodes() const { return nodes_.size(); }

    const Tensor<T>& value(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.idx)];
        return n.external ? *n.external : n.owned;
    }

    // Gradient of the last backward() target w.r.t. `v`; zeros if unused.
    Tensor<T> grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v.idx)];
        if (n.grad.size() == 0) return Tensor<T>::zeros(value(v).shape());
        return n.grad;
    }

    // ---- leaves ----

    Var leaf(const Tensor<T>* t, bool requires_grad = true) {
        Node n;
        n.external = t;
        n.needs_grad = requires_grad;
        return push(std::move(n));
    }

    // Leaf cache keyed by tensor address: the same parameter binds to one
    // node no matter how many ops consume it.
    Var param(const Tensor<T>* t) {
        auto it = param_cache_.find(t);
        if (it != param_cache_.end()) return Var{it->second};
        Var v = leaf(t, true);
        param_cache_.emplace(t, v.idx);
        return v;
    }

    Var constant(Tensor<T> t) {
        Node n;
        n.owned = std::move(t);
        n.needs_grad = false;
        return push(std::move(n));
    }

    Tensor<T> grad_of(const Tensor<T>* t) const {
        auto it = param_cache_.find(t);
        if (it == param_cache_.end()) return Tensor<T>::zeros(t->shape());
        return grad(Var{it->second});
    }

    bool bound(const Tensor<T>* t) const { return param_cache_.count(t) > 0; }

    // Seeds d(target)/d(target) = 1 and propagates to all reachable leaves.
    void backward(Var target) {
        Node& t = nodes_[static_cast<size_t>(target.idx)];
        const Tensor<T>& tv = t.external ? *t.external : t.owned;
        t.grad = Tensor<T>::full(tv.shape(), T(1));
        for (int i = target.idx; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || n.grad.size() == 0 || !n.backward) continue;
            n.backward(*this, i);
        }
    }

    // ---- arithmetic ----

    Var matmul(Var a, Var b, FlopLabel label = FlopLabel::kOther) {
        Tensor<T> y = lrss::matmul(value(a), value(b), flops_, label);
        const int ai = a.idx, bi = b.idx;
        return make_op(std::move(y), {a, b}, [ai, bi](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            if (g.wants(ai)) g.accumulate(ai, lrss::matmul_nt(gy, g.value(Var{bi})));
            if (g.wants(bi)) g.accumulate(bi, lrss::matmul_tn(g.value(Var{ai}), gy));
        });
    }

    // a * b^T
    Var matmul_nt(Var a, Var b, FlopLabel label = FlopLabel::kOther) {
        Tensor<T> y = lrss::matmul_nt(value(a), value(b), flops_, label);
        const int ai = a.idx, bi = b.idx;
        return make_op(std::move(y), {a, b}, [ai, bi](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            if (g.wants(ai)) g.accumulate(ai, lrss::matmul(gy, g.value(Var{bi})));
            if (g.wants(bi)) g.accumulate(bi, lrss::matmul_tn(gy, g.value(Var{ai})));
        });
    }

    Var add(Var a, Var b) {
        Tensor<T> y = lrss::add(value(a), value(b));
        const int ai = a.idx, bi = b.idx;
        return make_op(std::move(y), {a, b}, [ai, bi](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            if (g.wants(ai)) g.accumulate(ai, gy);
            if (g.wants(bi)) g.accumulate(bi, gy);
        });
    }

    Var sub(Var a, Var b) {
        Tensor<T> y = lrss::sub(value(a), value(b));
        const int ai = a.idx, bi = b.idx;
        return make_op(std::move(y), {a, b}, [ai, bi](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            if (g.wants(ai)) g.accumulate(ai, gy);
            if (g.wants(bi)) g.accumulate(bi, lrss::scale(gy, T(-1)));
        });
    }

    Var scale(Var a, T s) {
        Tensor<T> y = lrss::scale(value(a), s);
        const int ai = a.idx;
        return make_op(std::move(y), {a}, [ai, s](Graph& g, int self) {
            if (g.wants(ai)) g.accumulate(ai, lrss::scale(g.grad_ref(self), s));
        });
    }

    // rows(a) x D  +  v broadcast over rows; v is rank-1 of length D.
    Var add_rowvec(Var a, Var v) {
        const Tensor<T>& av = value(a);
        const Tensor<T>& vv = value(v);
        if (vv.rank() != 1 || av.dim(av.rank() - 1) != vv.dim(0))
            throw ShapeError("add_rowvec width mismatch");
        Tensor<T> y = av;
        const int64_t d = vv.dim(0);
        const int64_t rows = av.size() / d;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) y[r * d + j] += vv[j];
        const int ai = a.idx, vi = v.idx;
        return make_op(std::move(y), {a, v}, [ai, vi, d](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            if (g.wants(ai)) g.accumulate(ai, gy);
            if (g.wants(vi)) {
                Tensor<T> gv({d});
                const int64_t rows = gy.size() / d;
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) gv[j] += gy[r * d + j];
                g.accumulate(vi, gv);
            }
        });
    }

    // ---- nonlinearities ----

    Var softmax_rows(Var a) {
        Tensor<T> y = lrss::softmax_rows(value(a), flops_);
        const int ai = a.idx;
        return make_op(std::move(y), {a}, [ai](Graph& g, int self) {
            if (!g.wants(ai)) return;
            const Tensor<T>& y2 = g.value(Var{self});
            const Tensor<T>& gy = g.grad_ref(self);
            Tensor<T> gx = y2;
            const int64_t n = y2.dim(y2.rank() - 1);
            const int64_t rows = y2.size() / n;
            for (int64_t r = 0; r < rows; ++r) {
                T dot = T(0);
                for (int64_t j = 0; j < n; ++j) dot += gy[r * n + j] * y2[r * n + j];
                for (int64_t j = 0; j < n; ++j) gx[r * n + j] = y2[r * n + j] * (gy[r * n + j] - dot);
            }
            g.accumulate(ai, gx);
        });
    }

    // Row-wise layer norm over the last axis with affine parameters.
    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
        const Tensor<T>& xv = value(x);
        const Tensor<T>& gv = value(gamma);
        const Tensor<T>& bv = value(beta);
        const int64_t d = xv.dim(xv.rank() - 1);
        if (gv.rank() != 1 || gv.dim(0) != d || bv.rank() != 1 || bv.dim(0) != d)
            throw ShapeError("layer_norm parameter width mismatch");
        const int64_t rows = xv.size() / d;
        Tensor<T> y = xv;
        auto xhat = std::make_shared<Tensor<T>>(xv.shape());
        auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
        for (int64_t r = 0; r < rows; ++r) {
            const T* px = xv.data() + r * d;
            T mean = T(0);
            for (int64_t j = 0; j < d; ++j) mean += px[j];
            mean /= static_cast<T>(d);
            T var = T(0);
            for (int64_t j = 0; j < d; ++j) var += (px[j] - mean) * (px[j] - mean);
            var /= static_cast<T>(d);
            const T inv = T(1) / std::sqrt(var + eps);
            (*inv_std)[static_cast<size_t>(r)] = inv;
            for (int64_t j = 0; j < d; ++j) {
                const T xh = (px[j] - mean) * inv;
                (*xhat)[r * d + j] = xh;
                y[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        if (flops_) flops_->add(FlopLabel::kNorm, 8 * rows * d);
        const int xi = x.idx, gi = gamma.idx, bi = beta.idx;
        return make_op(std::move(y), {x, gamma, beta}, [xi, gi, bi, xhat, inv_std, d](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            const Tensor<T>& gam = g.value(Var{gi});
            const int64_t rows = gy.size() / d;
            if (g.wants(gi) || g.wants(bi)) {
                Tensor<T> dgamma({d}), dbeta({d});
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) {
                        dgamma[j] += gy[r * d + j] * (*xhat)[r * d + j];
                        dbeta[j] += gy[r * d + j];
                    }
                if (g.wants(gi)) g.accumulate(gi, dgamma);
                if (g.wants(bi)) g.accumulate(bi, dbeta);
            }
            if (g.wants(xi)) {
                Tensor<T> gx(g.value(Var{xi}).shape());
                for (int64_t r = 0; r < rows; ++r) {
                    T m1 = T(0), m2 = T(0);
                    for (int64_t j = 0; j < d; ++j) {
                        const T gj = gy[r * d + j] * gam[j];
                        m1 += gj;
                        m2 += gj * (*xhat)[r * d + j];
                    }
                    m1 /= static_cast<T>(d);
                    m2 /= static_cast<T>(d);
                    const T inv = (*inv_std)[static_cast<size_t>(r)];
                    for (int64_t j = 0; j < d; ++j) {
                        const T gj = gy[r * d + j] * gam[j];
                        gx[r * d + j] = (gj - m1 - (*xhat)[r * d + j] * m2) * inv;
                    }
                }
                g.accumulate(xi, gx);
            }
        });
    }

    Var gelu(Var a) {
        const Tensor<T>& xv = value(a);
        Tensor<T> y = xv;
        const T inv_sqrt2 = T(0.70710678118654752440);
        for (int64_t i = 0; i < y.size(); ++i) y[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
        if (flops_) flops_->add(FlopLabel::kActivation, 10 * y.size());
        const int ai = a.idx;
        return make_op(std::move(y), {a}, [ai, inv_sqrt2](Graph& g, int self) {
            if (!g.wants(ai)) return;
            const Tensor<T>& xv2 = g.value(Var{ai});
            const Tensor<T>& gy = g.grad_ref(self);
            const T inv_sqrt2pi = T(0.39894228040143267794);
            Tensor<T> gx = xv2;
            for (int64_t i = 0; i < gx.size(); ++i) {
                const T x = xv2[i];
                const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                gx[i] = gy[i] * (cdf + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x));
            }
            g.accumulate(ai, gx);
        });
    }

    // ---- structural ops ----

    // Rotates feature pairs (x[2i], x[2i+1]) of each row by phases[row][i].
    // The phase table is positional data, not a differentiable input.
    Var rotate_pairs(Var a, std::shared_ptr<const Tensor<T>> phases) {
        const Tensor<T>& xv = value(a);
        if (xv.rank() != 2) throw ShapeError("rotate_pairs expects 2-D input");
        if (xv.dim(1) % 2 != 0) throw ShapeError("rotate_pairs needs an even last extent");
        const int64_t rows = xv.dim(0), pairs = xv.dim(1) / 2;
        if (phases->dim(0) != rows || phases->dim(1) != pairs)
            throw ShapeError("rotate_pairs phase table mismatch");
        Tensor<T> y = xv;
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < pairs; ++i) {
                const T th = phases->at2(r, i);
                const T c = std::cos(th), s = std::sin(th);
                const T u = xv.at2(r, 2 * i), v = xv.at2(r, 2 * i + 1);
                y.at2(r, 2 * i) = u * c - v * s;
                y.at2(r, 2 * i + 1) = u * s + v * c;
            }
        if (flops_) flops_->add(FlopLabel::kOther, 6 * rows * pairs);
        const int ai = a.idx;
        return make_op(std::move(y), {a}, [ai, phases](Graph& g, int self) {
            if (!g.wants(ai)) return;
            const Tensor<T>& gy = g.grad_ref(self);
            Tensor<T> gx = gy;
            const int64_t rows = gy.dim(0), pairs = gy.dim(1) / 2;
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < pairs; ++i) {
                    const T th = phases->at2(r, i);
                    const T c = std::cos(th), s = std::sin(th);
                    const T gu = gy.at2(r, 2 * i), gv = gy.at2(r, 2 * i + 1);
                    gx.at2(r, 2 * i) = gu * c + gv * s;
                    gx.at2(r, 2 * i + 1) = -gu * s + gv * c;
                }
            g.accumulate(ai, gx);
        });
    }

    Var gather_rows(Var a, std::shared_ptr<const std::vector<int64_t>> rows) {
        const Tensor<T>& xv = value(a);
        if (xv.rank() != 2) throw ShapeError("gather_rows expects 2-D input");
        const int64_t d = xv.dim(1);
        Tensor<T> y({static_cast<int64_t>(rows->size()), d});
        for (size_t i = 0; i < rows->size(); ++i)
            for (int64_t j = 0; j < d; ++j) y.at2(static_cast<int64_t>(i), j) = xv.at2((*rows)[i], j);
        const int ai = a.idx;
        return make_op(std::move(y), {a}, [ai, rows](Graph& g, int self) {
            if (!g.wants(ai)) return;
            const Tensor<T>& gy = g.grad_ref(self);
            Tensor<T> gx(g.value(Var{ai}).shape());
            const int64_t d = gx.dim(1);
            for (size_t i = 0; i < rows->size(); ++i)
                for (int64_t j = 0; j < d; ++j) gx.at2((*rows)[i], j) += gy.at2(static_cast<int64_t>(i), j);
            g.accumulate(ai, gx);
        });
    }

    // out = base with out[dest[s]] = src[s]; dest rows must be distinct.
    Var overwrite_rows(Var base, Var src, std::shared_ptr<const std::vector<int64_t>> dest) {
        const Tensor<T>& bv = value(base);
        const Tensor<T>& sv = value(src);
        if (bv.rank() != 2 || sv.rank() != 2 || bv.dim(1) != sv.dim(1))
            throw ShapeError("overwrite_rows shape mismatch");
        if (sv.dim(0) != static_cast<int64_t>(dest->size()))
            throw ShapeError("overwrite_rows index count mismatch");
        Tensor<T> y = bv;
        const int64_t d = bv.dim(1);
        for (size_t s = 0; s < dest->size(); ++s)
            for (int64_t j = 0; j < d; ++j) y.at2((*dest)[s], j) = sv.at2(static_cast<int64_t>(s), j);
        const int bi = base.idx, si = src.idx;
        return make_op(std::move(y), {base, src}, [bi, si, dest](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            const int64_t d = gy.dim(1);
            if (g.wants(si)) {
                Tensor<T> gs({static_cast<int64_t>(dest->size()), d});
                for (size_t s = 0; s < dest->size(); ++s)
                    for (int64_t j = 0; j < d; ++j) gs.at2(static_cast<int64_t>(s), j) = gy.at2((*dest)[s], j);
                g.accumulate(si, gs);
            }
            if (g.wants(bi)) {
                Tensor<T> gb = gy;
                for (size_t s = 0; s < dest->size(); ++s)
                    for (int64_t j = 0; j < d; ++j) gb.at2((*dest)[s], j) = T(0);
                g.accumulate(bi, gb);
            }
        });
    }

    // Repeats a rank-1 vector as n identical rows.
    Var broadcast_row(Var v, int64_t n) {
        const Tensor<T>& vv = value(v);
        if (vv.rank() != 1) throw ShapeError("broadcast_row expects a rank-1 input");
        const int64_t d = vv.dim(0);
        Tensor<T> y({n, d});
        for (int64_t r = 0; r < n; ++r)
            for (int64_t j = 0; j < d; ++j) y.at2(r, j) = vv[j];
        const int vi = v.idx;
        return make_op(std::move(y), {v}, [vi, d](Graph& g, int self) {
            if (!g.wants(vi)) return;
            const Tensor<T>& gy = g.grad_ref(self);
            Tensor<T> gv({d});
            for (int64_t r = 0; r < gy.dim(0); ++r)
                for (int64_t j = 0; j < d; ++j) gv[j] += gy.at2(r, j);
            g.accumulate(vi, gv);
        });
    }

    Var slice_cols(Var a, int64_t start, int64_t len) {
        const Tensor<T>& xv = value(a);
        if (xv.rank() != 2) throw ShapeError("slice_cols expects 2-D input");
        if (start < 0 || len < 1 || start + len > xv.dim(1)) throw ShapeError("slice_cols range out of bounds");
        Tensor<T> y({xv.dim(0), len});
        for (int64_t r = 0; r < xv.dim(0); ++r)
            for (int64_t j = 0; j < len; ++j) y.at2(r, j) = xv.at2(r, start + j);
        const int ai = a.idx;
        return make_op(std::move(y), {a}, [ai, start, len](Graph& g, int self) {
            if (!g.wants(ai)) return;
            const Tensor<T>& gy = g.grad_ref(self);
            Tensor<T> gx(g.value(Var{ai}).shape());
            for (int64_t r = 0; r < gy.dim(0); ++r)
                for (int64_t j = 0; j < len; ++j) gx.at2(r, start + j) = gy.at2(r, j);
            g.accumulate(ai, gx);
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_cols needs at least one input");
        const int64_t rows = value(parts[0]).dim(0);
        int64_t width = 0;
        for (Var p : parts) {
            if (value(p).rank() != 2 || value(p).dim(0) != rows)
                throw ShapeError("concat_cols row mismatch");
            width += value(p).dim(1);
        }
        Tensor<T> y({rows, width});
        auto offsets = std::make_shared<std::vector<int64_t>>();
        auto widths = std::make_shared<std::vector<int64_t>>();
        auto pids = std::make_shared<std::vector<int>>();
        int64_t off = 0;
        for (Var p : parts) {
            const Tensor<T>& pv = value(p);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < pv.dim(1); ++j) y.at2(r, off + j) = pv.at2(r, j);
            offsets->push_back(off);
            widths->push_back(pv.dim(1));
            pids->push_back(p.idx);
            off += pv.dim(1);
        }
        return make_op(std::move(y), parts, [offsets, widths, pids](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            for (size_t k = 0; k < pids->size(); ++k) {
                if (!g.wants((*pids)[k])) continue;
                Tensor<T> gp({gy.dim(0), (*widths)[k]});
                for (int64_t r = 0; r < gy.dim(0); ++r)
                    for (int64_t j = 0; j < (*widths)[k]; ++j) gp.at2(r, j) = gy.at2(r, (*offsets)[k] + j);
                g.accumulate((*pids)[k], gp);
            }
        });
    }

    // Single-query attention per group: out[g] = softmax(q[g]·K[rows_g]^T * scale) · V[rows_g].
    // Returns the output; the attention weights are written to *attn_out when
    // requested (shape groups x group_size).
    Var pooled_attention(Var q, Var k, Var v, std::shared_ptr<const GroupIndex> groups, T score_scale,
                         FlopLabel label, Tensor<T>* attn_out = nullptr) {
        const Tensor<T>& qv = value(q);
        const Tensor<T>& kv = value(k);
        const Tensor<T>& vv = value(v);
        if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2) throw ShapeError("pooled_attention expects 2-D");
        if (qv.dim(1) != kv.dim(1) || kv.dim(0) != vv.dim(0))
            throw ShapeError("pooled_attention shape mismatch");
        if (qv.dim(0) != groups->groups) throw ShapeError("pooled_attention group count mismatch");
        const int64_t G = groups->groups, S = groups->group_size, d = qv.dim(1), dv = vv.dim(1);
        auto attn = std::make_shared<Tensor<T>>(std::vector<int64_t>{G, S});
        Tensor<T> y({G, dv});
        for (int64_t g = 0; g < G; ++g) {
            T mx = -std::numeric_limits<T>::infinity();
            for (int64_t s = 0; s < S; ++s) {
                const int64_t r = groups->row(g, s);
                T acc = T(0);
                for (int64_t j = 0; j < d; ++j) acc += qv.at2(g, j) * kv.at2(r, j);
                acc *= score_scale;
                attn->at2(g, s) = acc;
                mx = std::max(mx, acc);
            }
            T sum = T(0);
            for (int64_t s = 0; s < S; ++s) {
                attn->at2(g, s) = std::exp(attn->at2(g, s) - mx);
                sum += attn->at2(g, s);
            }
            const T inv = T(1) / sum;
            for (int64_t s = 0; s < S; ++s) {
                attn->at2(g, s) *= inv;
                const int64_t r = groups->row(g, s);
                const T a = attn->at2(g, s);
                for (int64_t j = 0; j < dv; ++j) y.at2(g, j) += a * vv.at2(r, j);
            }
        }
        if (flops_) {
            flops_->add(label, 2 * G * S * d + 2 * G * S * dv);
            flops_->add(FlopLabel::kSoftmax, 5 * G * S);
        }
        if (attn_out) *attn_out = *attn;
        const int qi = q.idx, ki = k.idx, vi = v.idx;
        return make_op(std::move(y), {q, k, v}, [qi, ki, vi, groups, attn, score_scale](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            const Tensor<T>& qv2 = g.value(Var{qi});
            const Tensor<T>& kv2 = g.value(Var{ki});
            const Tensor<T>& vv2 = g.value(Var{vi});
            const int64_t G = groups->groups, S = groups->group_size, d = qv2.dim(1), dv = vv2.dim(1);
            Tensor<T> gq(qv2.shape()), gk(kv2.shape()), gv(vv2.shape());
            for (int64_t grp = 0; grp < G; ++grp) {
                std::vector<T> da(static_cast<size_t>(S), T(0));
                for (int64_t s = 0; s < S; ++s) {
                    const int64_t r = groups->row(grp, s);
                    T acc = T(0);
                    for (int64_t j = 0; j < dv; ++j) {
                        acc += gy.at2(grp, j) * vv2.at2(r, j);
                        gv.at2(r, j) += attn->at2(grp, s) * gy.at2(grp, j);
                    }
                    da[static_cast<size_t>(s)] = acc;
                }
                T dot = T(0);
                for (int64_t s = 0; s < S; ++s) dot += da[static_cast<size_t>(s)] * attn->at2(grp, s);
                for (int64_t s = 0; s < S; ++s) {
                    const T ds = attn->at2(grp, s) * (da[static_cast<size_t>(s)] - dot) * score_scale;
                    const int64_t r = groups->row(grp, s);
                    for (int64_t j = 0; j < d; ++j) {
                        gq.at2(grp, j) += ds * kv2.at2(r, j);
                        gk.at2(r, j) += ds * qv2.at2(grp, j);
                    }
                }
            }
            if (g.wants(qi)) g.accumulate(qi, gq);
            if (g.wants(ki)) g.accumulate(ki, gk);
            if (g.wants(vi)) g.accumulate(vi, gv);
        });
    }

    // Low-rank composition of branch outputs, spatial-major feature order:
    // out[n*Nc + c, i*d2 + j] = ys[n, i] * yc[c, j].
    Var kron_pair(Var ys, Var yc, FlopLabel label = FlopLabel::kCompose) {
        const Tensor<T>& s = value(ys);
        const Tensor<T>& c = value(yc);
        if (s.rank() != 2 || c.rank() != 2) throw ShapeError("kron_pair expects 2-D inputs");
        const int64_t ns = s.dim(0), d1 = s.dim(1), nc = c.dim(0), d2 = c.dim(1);
        Tensor<T> y({ns * nc, d1 * d2});
        for (int64_t n = 0; n < ns; ++n)
            for (int64_t cc = 0; cc < nc; ++cc) {
                T* row = y.data() + (n * nc + cc) * d1 * d2;
                for (int64_t i = 0; i < d1; ++i) {
                    const T sv = s.at2(n, i);
                    for (int64_t j = 0; j < d2; ++j) row[i * d2 + j] = sv * c.at2(cc, j);
                }
            }
        if (flops_) flops_->add(label, 2 * ns * nc * d1 * d2);
        const int si = ys.idx, ci = yc.idx;
        return make_op(std::move(y), {ys, yc}, [si, ci](Graph& g, int self) {
            const Tensor<T>& gy = g.grad_ref(self);
            const Tensor<T>& s2 = g.value(Var{si});
            const Tensor<T>& c2 = g.value(Var{ci});
            const int64_t ns = s2.dim(0), d1 = s2.dim(1), nc = c2.dim(0), d2 = c2.dim(1);
            Tensor<T> gs(s2.shape()), gc(c2.shape());
            for (int64_t n = 0; n < ns; ++n)
                for (int64_t cc = 0; cc < nc; ++cc) {
                    const T* row = gy.data() + (n * nc + cc) * d1 * d2;
                    for (int64_t i = 0; i < d1; ++i)
                        for (int64_t j = 0; j < d2; ++j) {
                            gs.at2(n, i) += row[i * d2 + j] * c2.at2(cc, j);
                            gc.at2(cc, j) += row[i * d2 + j] * s2.at2(n, i);
                        }
                }
            if (g.wants(si)) g.accumulate(si, gs);
            if (g.wants(ci)) g.accumulate(ci, gc);
        });
    }

    // Builds the CLS-augmented grid as (N+1)(C+1) rows in n-major order from
    // N*C body tokens and the three learnable summary vectors.
    Var assemble_grid(Var tokens, Var cls_spatial, Var cls_spectral, Var cls_global, int64_t n_spatial,
                      int64_t n_spectral) {
        const Tensor<T>& tv = value(tokens);
        if (tv.rank() != 2 || tv.dim(0) != n_spatial * n_spectral)
            throw ShapeError("assemble_grid token count mismatch");
        const int64_t d = tv.dim(1);
        if (value(cls_spatial).dim(0) != d || value(cls_spectral).dim(0) != d || value(cls_global).dim(0) != d)
            throw ShapeError("assemble_grid CLS width mismatch");
        const int64_t cols = n_spectral + 1;
        Tensor<T> y({(n_spatial + 1) * cols, d});
        for (int64_t j = 0; j < d; ++j) y.at2(0, j) = value(cls_global)[j];
        for (int64_t c = 1; c <= n_spectral; ++c)
            for (int64_t j = 0; j < d; ++j) y.at2(c, j) = value(cls_spectral)[j];
        for (int64_t n = 1; n <= n_spatial; ++n) {
            for (int64_t j = 0; j < d; ++j) y.at2(n * cols, j) = value(cls_spatial)[j];
            for (int64_t c = 1; c <= n_spectral; ++c)
                for (int64_t j = 0; j < d; ++j) y.at2(n * cols + c, j) = tv.at2((n - 1) * n_spectral + (c - 1), j);
        }
        const int ti = tokens.idx, sp = cls_spatial.idx, sc = cls_spectral.idx, gl = cls_global.idx;
        return make_op(std::move(y), {tokens, cls_spatial, cls_spectral, cls_global},
                       [ti, sp, sc, gl, n_spatial, n_spectral](Graph& g, int self) {
                           const Tensor<T>& gy = g.grad_ref(self);
                           const int64_t d = gy.dim(1);
                           const int64_t cols = n_spectral + 1;
                           if (g.wants(gl)) {
                               Tensor<T> gg({d});
                               for (int64_t j = 0; j < d; ++j) gg[j] = gy.at2(0, j);
                               g.accumulate(gl, gg);
                           }
                           if (g.wants(sc)) {
                               Tensor<T> gg({d});
                               for (int64_t c = 1; c <= n_spectral; ++c)
                                   for (int64_t j = 0; j < d; ++j) gg[j] += gy.at2(c, j);
                               g.accumulate(sc, gg);
                           }
                           if (g.wants(sp)) {
                               Tensor<T> gg({d});
                               for (int64_t n = 1; n <= n_spatial; ++n)
                                   for (int64_t j = 0; j < d; ++j) gg[j] += gy.at2(n * cols, j);
                               g.accumulate(sp, gg);
                           }
                           if (g.wants(ti)) {
                               Tensor<T> gt({n_spatial * n_spectral, d});
                               for (int64_t n = 1; n <= n_spatial; ++n)
                                   for (int64_t c = 1; c <= n_spectral; ++c)
                                       for (int64_t j = 0; j < d; ++j)
                                           gt.at2((n - 1) * n_spectral + (c - 1), j) = gy.at2(n * cols + c, j);
                               g.accumulate(ti, gt);
                           }
                       });
    }

    // Mean squared error over rows where mask != 0, against a fixed target.
    Var masked_mse(Var pred, std::shared_ptr<const Tensor<T>> target,
                   std::shared_ptr<const std::vector<uint8_t>> row_mask) {
        const Tensor<T>& pv = value(pred);
        if (!pv.same_shape(*target)) throw ShapeError("masked_mse target shape mismatch");
        if (pv.rank() != 2 || pv.dim(0) != static_cast<int64_t>(row_mask->size()))
            throw ShapeError("masked_mse mask length mismatch");
        const int64_t d = pv.dim(1);
        int64_t masked = 0;
        for (uint8_t m : *row_mask) masked += (m != 0);
        if (masked == 0) throw DegenerateInputError("masked_mse: no masked rows");
        T acc = T(0);
        for (int64_t r = 0; r < pv.dim(0); ++r) {
            if (!(*row_mask)[static_cast<size_t>(r)]) continue;
            for (int64_t j = 0; j < d; ++j) {
                const T diff = pv.at2(r, j) - target->at2(r, j);
                acc += diff * diff;
            }
        }
        const T denom = static_cast<T>(masked) * static_cast<T>(d);
        Tensor<T> y({1});
        y[0] = acc / denom;
        const int pi = pred.idx;
        return make_op(std::move(y), {pred}, [pi, target, row_mask, denom](Graph& g, int self) {
            if (!g.wants(pi)) return;
            const T gl = g.grad_ref(self)[0];
            const Tensor<T>& pv2 = g.value(Var{pi});
            Tensor<T> gp(pv2.shape());
            const int64_t d = pv2.dim(1);
            for (int64_t r = 0; r < pv2.dim(0); ++r) {
                if (!(*row_mask)[static_cast<size_t>(r)]) continue;
                for (int64_t j = 0; j < d; ++j)
                    gp.at2(r, j) = gl * T(2) * (pv2.at2(r, j) - target->at2(r, j)) / denom;
            }
            g.accumulate(pi, gp);
        });
    }

    // Scalar readout sum(x ⊙ w) with fixed weights; used by gradient tests.
    Var weighted_sum(Var a, std::shared_ptr<const Tensor<T>> w) {
        const Tensor<T>& xv = value(a);
        if (!xv.same_shape(*w)) throw ShapeError("weighted_sum shape mismatch");
        T acc = T(0);
        for (int64_t i = 0; i < xv.size(); ++i) acc += xv[i] * (*w)[i];
        Tensor<T> y({1});
        y[0] = acc;
        const int ai = a.idx;
        return make_op(std::move(y), {a}, [ai, w](Graph& g, int self) {
            if (!g.wants(ai)) return;
            const T gl = g.grad_ref(self)[0];
            Tensor<T> gx = lrss::scale(*w, gl);
            g.accumulate(ai, gx);
        });
    }

    Var sum_all(Var a) {
        const Tensor<T>& xv = value(a);
        Tensor<T> y({1});
        for (int64_t i = 0; i < xv.size(); ++i) y[0] += xv[i];
        const int ai = a.idx;
        return make_op(std::move(y), {a}, [ai](Graph& g, int self) {
            if (!g.wants(ai)) return;
            const T gl = g.grad_ref(self)[0];
            g.accumulate(ai, Tensor<T>::full(g.value(Var{ai}).shape(), gl));
        });
    }

  private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        bool needs_grad = false;
        std::vector<int> parents;
        std::function<void(Graph&, int)> backward;
    };

    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    bool wants(int idx) const { return idx >= 0 && nodes_[static_cast<size_t>(idx)].needs_grad; }

    const Tensor<T>& grad_ref(int idx) const { return nodes_[static_cast<size_t>(idx)].grad; }

    void accumulate(int idx, const Tensor<T>& g) {
        Node& n = nodes_[static_cast<size_t>(idx)];
        const Tensor<T>& v = n.external ? *n.external : n.owned;
        if (n.grad.size() == 0) n.grad = Tensor<T>::zeros(v.shape());
        if (!n.grad.same_shape(g)) throw ShapeError("gradient shape mismatch in accumulate");
        for (int64_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
    }

    Var make_op(Tensor<T> value, std::vector<Var> parents, std::function<void(Graph&, int)> bw) {
        Node n;
        n.owned = std::move(value);
        for (Var p : parents) {
            n.parents.push_back(p.idx);
            if (wants(p.idx)) n.needs_grad = true;
        }
        if (n.needs_grad) n.backward = std::move(bw);
        return push(std::move(n));
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Tensor<T>*, int> param_cache_;
    FlopCounter* flops_;
};

template <typename T>
using Var = typename Graph<T>::Var;

}  // namespace lrss
