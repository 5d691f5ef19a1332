#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "peps/tensor.hpp"

namespace peps {

namespace detail {

inline Eigen::MatrixXd to_eigen(const Tensor& m) {
    if (m.rank() != 2) throw std::invalid_argument("matrix kernel requires a rank-2 tensor");
    return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                          Eigen::RowMajor>>(m.data().data(),
                                                            static_cast<Eigen::Index>(m.extent(0)),
                                                            static_cast<Eigen::Index>(m.extent(1)));
}

inline Tensor from_eigen(const Eigen::MatrixXd& m) {
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.data().data(), m.rows(), m.cols()) = m;
    return t;
}

}  // namespace detail

/// Reduced QR with the sign convention diag(r) >= 0, which makes the
/// factorization unique (hence reproducible) for full-rank input.
inline std::pair<Tensor, Tensor> qr_reduced(const Tensor& m) {
    Eigen::MatrixXd a = detail::to_eigen(m);
    const Eigen::Index rows = a.rows(), cols = a.cols(), k = std::min(rows, cols);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, k);
    Eigen::MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
    for (Eigen::Index i = 0; i < k; ++i) {
        if (r(i, i) < 0.0) {
            r.row(i) = -r.row(i);
            q.col(i) = -q.col(i);
        }
    }
    return {detail::from_eigen(q), detail::from_eigen(r)};
}

/// Full thin SVD m = u * diag(s) * vt with u: rows x k0, vt: k0 x cols,
/// k0 = min(rows, cols), singular values non-increasing.
struct FullSvd {
    Eigen::MatrixXd u;
    Eigen::VectorXd s;
    Eigen::MatrixXd vt;
};

inline FullSvd svd_full(const Tensor& m) {
    Eigen::MatrixXd a = detail::to_eigen(m);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return {svd.matrixU(), svd.singularValues(), svd.matrixV().transpose()};
}

/// Truncated SVD keeping the chi largest singular values.
/// v holds the right factor with orthonormal rows (k x cols), so that
/// u * diag(s) * v is the best rank-k Frobenius approximation.
struct SvdResult {
    Tensor u;
    std::vector<double> s;
    Tensor v;
    double discarded_weight = 0.0;
};

inline SvdResult svd_truncated(const Tensor& m, std::size_t chi) {
    if (chi < 1) throw std::invalid_argument("svd_truncated requires chi >= 1");
    const FullSvd full = svd_full(m);
    const std::size_t k0 = static_cast<std::size_t>(full.s.size());
    const std::size_t k = std::min(chi, k0);
    SvdResult out;
    out.u = detail::from_eigen(full.u.leftCols(static_cast<Eigen::Index>(k)));
    out.v = detail::from_eigen(full.vt.topRows(static_cast<Eigen::Index>(k)));
    out.s.assign(full.s.data(), full.s.data() + k);
    double tail = 0.0;
    for (std::size_t i = k; i < k0; ++i) tail += full.s[static_cast<Eigen::Index>(i)] *
                                                 full.s[static_cast<Eigen::Index>(i)];
    out.discarded_weight = std::sqrt(tail);
    return out;
}

}  // namespace peps
