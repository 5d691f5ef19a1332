#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "peps/errors.hpp"

namespace peps {

/// Dense real tensor with row-major storage and 64-bit scalars.
/// Rank 0 is a scalar (one element). Immutable use is the norm: kernels
/// return fresh tensors instead of mutating inputs.
class Tensor {
public:
    Tensor() : shape_(), data_(1, 0.0) {}

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_size(shape_) != data_.size())
            throw DimensionError("tensor data length does not match shape");
    }

    static Tensor scalar(double v) {
        Tensor t;
        t.data_[0] = v;
        return t;
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor ones(std::vector<std::size_t> shape) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), 1.0);
        return t;
    }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    /// Identity matrix as a rank-2 tensor.
    static Tensor eye(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
        return t;
    }

    static Tensor random_uniform(std::vector<std::size_t> shape, double lo, double hi,
                                 std::mt19937_64& rng) {
        Tensor t(std::move(shape));
        std::uniform_real_distribution<double> dist(lo, hi);
        for (auto& x : t.data_) x = dist(rng);
        return t;
    }

    std::size_t rank() const { return shape_.size(); }
    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    double value() const {
        if (rank() != 0) throw std::invalid_argument("value() requires a rank-0 tensor");
        return data_[0];
    }

    double at(const std::vector<std::size_t>& idx) const { return data_[offset_of(idx)]; }
    double& at(const std::vector<std::size_t>& idx) { return data_[offset_of(idx)]; }

    /// Advisory per-axis tags (physical / virtual-N/E/S/W / label).
    /// Kernels validate extents only and do not propagate labels.
    std::vector<std::string> axis_labels;

    std::vector<std::size_t> strides() const {
        std::vector<std::size_t> s(shape_.size(), 1);
        for (std::size_t i = shape_.size(); i-- > 1;) s[i - 1] = s[i] * shape_[i];
        return s;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ")";
        return os.str();
    }

private:
    std::size_t offset_of(const std::vector<std::size_t>& idx) const {
        if (idx.size() != shape_.size())
            throw std::invalid_argument("index rank mismatch");
        std::size_t off = 0, stride = 1;
        for (std::size_t i = shape_.size(); i-- > 0;) {
            if (idx[i] >= shape_[i]) throw std::out_of_range("tensor index out of range");
            off += idx[i] * stride;
            stride *= shape_[i];
        }
        return off;
    }

    static std::size_t checked_size(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) {
            if (e == 0) throw DimensionError("axis extents must be >= 1");
            n *= e;
        }
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

namespace detail {

inline std::size_t product(const std::vector<std::size_t>& v) {
    return std::accumulate(v.begin(), v.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace detail

/// Reorders axes. order must be a permutation of 0..rank-1; entry i of the
/// result's shape is the extent of input axis order[i].
inline Tensor permute_axes(const Tensor& t, const std::vector<std::size_t>& order) {
    const std::size_t r = t.rank();
    if (order.size() != r) throw std::invalid_argument("permutation rank mismatch");
    std::vector<bool> seen(r, false);
    for (std::size_t a : order) {
        if (a >= r || seen[a]) throw std::invalid_argument("invalid axis permutation");
        seen[a] = true;
    }
    std::vector<std::size_t> new_shape(r);
    for (std::size_t i = 0; i < r; ++i) new_shape[i] = t.shape()[order[i]];
    Tensor out(new_shape);
    if (r == 0) {
        out[0] = t[0];
        return out;
    }
    const auto in_strides = t.strides();
    std::vector<std::size_t> step(r);
    for (std::size_t i = 0; i < r; ++i) step[i] = in_strides[order[i]];
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    const std::size_t n = out.size();
    for (std::size_t dst = 0; dst < n; ++dst) {
        out[dst] = t[src];
        for (std::size_t ax = r; ax-- > 0;) {
            if (++idx[ax] < new_shape[ax]) {
                src += step[ax];
                break;
            }
            idx[ax] = 0;
            src -= step[ax] * (new_shape[ax] - 1);
        }
    }
    return out;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& order) {
    std::vector<std::size_t> inv(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) inv[order[i]] = i;
    return inv;
}

/// Shape metadata change only; data order is untouched.
inline Tensor reshape(const Tensor& t, std::vector<std::size_t> new_shape) {
    if (detail::product(new_shape) != t.size())
        throw DimensionError("reshape element count mismatch: " + t.shape_str());
    return Tensor(std::move(new_shape), t.data());
}

using AxisPairs = std::vector<std::pair<std::size_t, std::size_t>>;

/// Precomputed matricization layout for a pairwise contraction:
/// a is permuted to [free_a..., paired...] and viewed as (fa x k),
/// b to [paired..., free_b...] viewed as (k x fb).
struct ContractPlan {
    std::vector<std::size_t> perm_a, perm_b;
    std::size_t fa = 1, k = 1, fb = 1;
    std::vector<std::size_t> out_shape;
};

inline ContractPlan make_contract_plan(const std::vector<std::size_t>& sa,
                                       const std::vector<std::size_t>& sb,
                                       const AxisPairs& pairs) {
    ContractPlan p;
    std::vector<bool> used_a(sa.size(), false), used_b(sb.size(), false);
    for (const auto& [ia, ib] : pairs) {
        if (ia >= sa.size() || ib >= sb.size())
            throw DimensionError("contract axis out of range");
        if (used_a[ia] || used_b[ib])
            throw DimensionError("contract axis paired twice");
        if (sa[ia] != sb[ib])
            throw DimensionError("contract extent mismatch on paired axes");
        used_a[ia] = used_b[ib] = true;
    }
    for (std::size_t i = 0; i < sa.size(); ++i)
        if (!used_a[i]) {
            p.perm_a.push_back(i);
            p.fa *= sa[i];
            p.out_shape.push_back(sa[i]);
        }
    for (const auto& [ia, ib] : pairs) {
        p.perm_a.push_back(ia);
        p.k *= sa[ia];
    }
    for (const auto& [ia, ib] : pairs) p.perm_b.push_back(ib);
    for (std::size_t i = 0; i < sb.size(); ++i)
        if (!used_b[i]) {
            p.perm_b.push_back(i);
            p.fb *= sb[i];
            p.out_shape.push_back(sb[i]);
        }
    return p;
}

namespace detail {

// C (m x n) = A (m x k) * B (k x n), all row-major.
inline void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
    // The plain loop beats a BLAS-style kernel on the tiny products that
    // dominate boundary contractions; hand large ones to Eigen.
    if (m * k * n >= 32768) {
        using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
        Eigen::Map<RowMat>(c, m, n).noalias() =
            Eigen::Map<const RowMat>(a, m, k) * Eigen::Map<const RowMat>(b, k, n);
        return;
    }
    std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = b + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

/// Pairwise tensor contraction over the given (axis-of-a, axis-of-b) pairs.
/// Free axes of a precede free axes of b, each in original order. An empty
/// pair list is the tensor product.
inline Tensor contract(const Tensor& a, const Tensor& b, const AxisPairs& pairs) {
    const ContractPlan p = make_contract_plan(a.shape(), b.shape(), pairs);
    const Tensor am = permute_axes(a, p.perm_a);
    const Tensor bm = permute_axes(b, p.perm_b);
    Tensor out(p.out_shape);
    detail::matmul(am.data().data(), bm.data().data(), out.data().data(), p.fa, p.k, p.fb);
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimensionError("add shape mismatch");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

inline Tensor scale(const Tensor& a, double k) {
    Tensor out = a;
    for (auto& v : out.data()) v *= k;
    return out;
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimensionError("elementwise multiply shape mismatch");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

inline double frobenius_norm(const Tensor& t) {
    double s = 0.0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw DimensionError("max_abs_diff shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace peps
