#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "lrss/errors.hpp"
#include "lrss/rng.hpp"

namespace lrss {

// ---------------------------------------------------------------------------
// FLOP accounting
// ---------------------------------------------------------------------------

// One fused multiply-add counts as 2 FLOPs. Matmul-shaped work carries one of
// the structural labels below; softmax/norm/activation work is counted under
// its own label and excluded from closed-form comparisons.
enum class FlopLabel : int {
    kPool = 0,    // pooled-attention projections and weighted sums
    kSpatial,     // spatial branch QK^T and AV
    kSpectral,    // spectral branch QK^T and AV
    kCompose,     // low-rank composition of branch outputs
    kProj,        // branch Q/K/V projections and output projection
    kDense,       // dense attention QK^T and AV
    kDenseProj,   // dense attention Q/K/V/output projections
    kEmbed,       // patch embedding
    kMlp,         // block MLP
    kHead,        // reconstruction head and encoder->decoder projection
    kSoftmax,     // per-element softmax cost
    kNorm,        // per-element layer-norm cost
    kActivation,  // per-element nonlinearity cost
    kOther,
    kCount
};

inline const char* flop_label_name(FlopLabel l) {
    switch (l) {
        case FlopLabel::kPool: return "pool";
        case FlopLabel::kSpatial: return "spatial";
        case FlopLabel::kSpectral: return "spectral";
        case FlopLabel::kCompose: return "compose";
        case FlopLabel::kProj: return "proj";
        case FlopLabel::kDense: return "dense";
        case FlopLabel::kDenseProj: return "dense_proj";
        case FlopLabel::kEmbed: return "embed";
        case FlopLabel::kMlp: return "mlp";
        case FlopLabel::kHead: return "head";
        case FlopLabel::kSoftmax: return "softmax";
        case FlopLabel::kNorm: return "norm";
        case FlopLabel::kActivation: return "activation";
        default: return "other";
    }
}

class FlopCounter {
  public:
    void add(FlopLabel label, int64_t flops) {
        by_label_[static_cast<size_t>(label)] += flops;
        total_ += flops;
    }
    int64_t total() const { return total_; }
    int64_t labeled(FlopLabel label) const { return by_label_[static_cast<size_t>(label)]; }
    void reset() {
        total_ = 0;
        by_label_.assign(static_cast<size_t>(FlopLabel::kCount), 0);
    }
    // Per-task counters are merged after parallel sections.
    void merge(const FlopCounter& other) {
        for (size_t i = 0; i < by_label_.size(); ++i) by_label_[i] += other.by_label_[i];
        total_ += other.total_;
    }
    int64_t sum_of_labels() const {
        return std::accumulate(by_label_.begin(), by_label_.end(), int64_t{0});
    }

  private:
    int64_t total_ = 0;
    std::vector<int64_t> by_label_ = std::vector<int64_t>(static_cast<size_t>(FlopLabel::kCount), 0);
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

// Dense row-major tensor. Shapes are explicit, extents are >= 1, and there is
// no broadcasting; structured ops state their index conventions outright so
// oracle comparisons stay unambiguous.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

  public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(check_shape(shape_)), T(0));
    }

    Tensor(std::vector<int64_t> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (check_shape(shape_) != static_cast<int64_t>(data_.size()))
            throw ShapeError("data length does not match shape product");
    }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    static Tensor identity(int64_t n) {
        Tensor t({n, n});
        for (int64_t i = 0; i < n; ++i) t.data_[static_cast<size_t>(i * n + i)] = T(1);
        return t;
    }

    static Tensor randn(std::vector<int64_t> shape, Rng& rng, T scale = T(1)) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<T>(rng.normal()) * scale;
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    T& at2(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * dim(1) + j)]; }
    const T& at2(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * dim(1) + j)]; }

    T& at3(int64_t i, int64_t j, int64_t k) {
        return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
    }
    const T& at3(int64_t i, int64_t j, int64_t k) const {
        return data_[static_cast<size_t>((i * dim(1) + j) * dim(2) + k)];
    }

    // Reinterpret without moving data; product of extents must be unchanged.
    Tensor reshaped(std::vector<int64_t> shape) const {
        if (check_shape(shape) != size()) throw ShapeError("reshape changes element count");
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
        os << "]";
        return os.str();
    }

    bool all_finite() const {
        for (const T v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    static int64_t check_shape(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t e : shape) {
            if (e < 1) throw ShapeError("extent must be >= 1");
            n *= e;
        }
        return n;
    }

    std::vector<int64_t> shape_;
    std::vector<T> data_;
};

template <typename T>
void ensure_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string(what) + " produced a non-finite value");
}

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

// C = A(m x k) * B(k x n). Counts 2*m*k*n FLOPs. i-k-j loop order keeps the
// inner loop contiguous in both B and C.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, FlopCounter* fc = nullptr,
                 FlopLabel label = FlopLabel::kOther) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects 2-D inputs");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul inner extents differ: " + a.shape_str() + " vs " + b.shape_str());
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> c({m, n});
    const T* pa = a.data();
    const T* pb = b.data();
    T* pc = c.data();
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t kk = 0; kk < k; ++kk) {
            const T av = pa[i * k + kk];
            const T* pbrow = pb + kk * n;
            T* pcrow = pc + i * n;
            for (int64_t j = 0; j < n; ++j) pcrow[j] += av * pbrow[j];
        }
    }
    if (fc) fc->add(label, 2 * m * k * n);
    return c;
}

// C = A(m x k) * B(n x k)^T.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b, FlopCounter* fc = nullptr,
                    FlopLabel label = FlopLabel::kOther) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul_nt expects 2-D inputs");
    if (a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt inner extents differ: " + a.shape_str() + " vs " + b.shape_str());
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<T> c({m, n});
    for (int64_t i = 0; i < m; ++i) {
        const T* pa = a.data() + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const T* pb = b.data() + j * k;
            T acc = T(0);
            for (int64_t kk = 0; kk < k; ++kk) acc += pa[kk] * pb[kk];
            c.at2(i, j) = acc;
        }
    }
    if (fc) fc->add(label, 2 * m * k * n);
    return c;
}

// C = A(k x m)^T * B(k x n). Used by backward passes.
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b, FlopCounter* fc = nullptr,
                    FlopLabel label = FlopLabel::kOther) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul_tn expects 2-D inputs");
    if (a.dim(0) != b.dim(0))
        throw ShapeError("matmul_tn inner extents differ: " + a.shape_str() + " vs " + b.shape_str());
    const int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
    Tensor<T> c({m, n});
    for (int64_t kk = 0; kk < k; ++kk) {
        const T* pa = a.data() + kk * m;
        const T* pb = b.data() + kk * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = pa[i];
            T* pcrow = c.data() + i * n;
            for (int64_t j = 0; j < n; ++j) pcrow[j] += av * pb[j];
        }
    }
    if (fc) fc->add(label, 2 * m * k * n);
    return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects a 2-D input");
    Tensor<T> c({a.dim(1), a.dim(0)});
    for (int64_t i = 0; i < a.dim(0); ++i)
        for (int64_t j = 0; j < a.dim(1); ++j) c.at2(j, i) = a.at2(i, j);
    return c;
}

// Max-subtracted softmax over the last axis; every slice sums to 1.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, FlopCounter* fc = nullptr) {
    if (x.rank() < 1) throw ShapeError("softmax_rows expects rank >= 1");
    const int64_t n = x.dim(x.rank() - 1);
    const int64_t rows = x.size() / n;
    Tensor<T> y = x;
    for (int64_t r = 0; r < rows; ++r) {
        T* p = y.data() + r * n;
        T mx = p[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, p[j]);
        T sum = T(0);
        for (int64_t j = 0; j < n; ++j) {
            p[j] = std::exp(p[j] - mx);
            sum += p[j];
        }
        const T inv = T(1) / sum;
        for (int64_t j = 0; j < n; ++j) p[j] *= inv;
    }
    if (fc) fc->add(FlopLabel::kSoftmax, 5 * rows * n);
    return y;
}

// Kronecker product of 2-D matrices: out[i*m + j, k*n + l] = a[i,k] * b[j,l]
// for a of p x q and b of m x n.
template <typename T>
Tensor<T> kron(const Tensor<T>& a, const Tensor<T>& b, FlopCounter* fc = nullptr,
               FlopLabel label = FlopLabel::kOther) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("kron expects 2-D inputs");
    const int64_t p = a.dim(0), q = a.dim(1), m = b.dim(0), n = b.dim(1);
    Tensor<T> c({p * m, q * n});
    for (int64_t i = 0; i < p; ++i)
        for (int64_t k = 0; k < q; ++k) {
            const T av = a.at2(i, k);
            for (int64_t j = 0; j < m; ++j)
                for (int64_t l = 0; l < n; ++l) c.at2(i * m + j, k * n + l) = av * b.at2(j, l);
        }
    if (fc) fc->add(label, 2 * p * q * m * n);
    return c;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("add shape mismatch");
    Tensor<T> c = a;
    for (int64_t i = 0; i < c.size(); ++i) c[i] += b[i];
    return c;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("sub shape mismatch");
    Tensor<T> c = a;
    for (int64_t i = 0; i < c.size(); ++i) c[i] -= b[i];
    return c;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    Tensor<T> c = a;
    for (int64_t i = 0; i < c.size(); ++i) c[i] *= s;
    return c;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff shape mismatch");
    T m = T(0);
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---------------------------------------------------------------------------
// Gradient oracle
// ---------------------------------------------------------------------------

// Central-difference check of an analytic gradient. Returns the max over
// coordinates of |analytic - numeric| / max(1, |numeric|).
template <typename T>
T grad_check(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
             const Tensor<T>& analytic_grad, T eps) {
    if (!x.same_shape(analytic_grad)) throw ShapeError("grad_check: gradient shape mismatch");
    if (!(eps > T(0))) throw ConfigError("grad_check: eps must be positive");
    Tensor<T> probe = x;
    T worst = T(0);
    for (int64_t i = 0; i < x.size(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + eps;
        const T fp = f(probe);
        probe[i] = orig - eps;
        const T fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("grad_check: non-finite function evaluation");
        const T numeric = (fp - fm) / (2 * eps);
        const T err = std::abs(analytic_grad[i] - numeric) / std::max(T(1), std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

// Same check restricted to a subset of coordinates; avoids quadratic cost on
// larger parameter tensors.
template <typename T>
T grad_check_coords(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                    const Tensor<T>& analytic_grad, T eps, const std::vector<int64_t>& coords) {
    if (!x.same_shape(analytic_grad)) throw ShapeError("grad_check: gradient shape mismatch");
    if (!(eps > T(0))) throw ConfigError("grad_check: eps must be positive");
    Tensor<T> probe = x;
    T worst = T(0);
    for (int64_t i : coords) {
        const T orig = probe[i];
        probe[i] = orig + eps;
        const T fp = f(probe);
        probe[i] = orig - eps;
        const T fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("grad_check: non-finite function evaluation");
        const T numeric = (fp - fm) / (2 * eps);
        const T err = std::abs(analytic_grad[i] - numeric) / std::max(T(1), std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace lrss
