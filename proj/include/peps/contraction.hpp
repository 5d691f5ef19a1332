#pragma once

#include <cmath>
#include <vector>

#include "peps/peps_grid.hpp"
#include "peps/tape.hpp"
#include "peps/tensor.hpp"

namespace peps {

/// Pre-softmax scores; the true logit vector is values * exp(log_scale).
struct Logits {
    Tensor values;  // rank-1, extent T
    double log_scale = 0.0;
};

/// Tape-recorded logits for the differentiable contraction path.
struct TapeLogits {
    Var values;
    Var log_scale;
};

struct ContractOptions {
    double svd_eps = 1e-12;          // svd-backward regularization
    bool checkpoint_rows = false;    // recompute row absorptions during backward
};

/// Boundary MPS over one horizontal cut. Site tensors are rank-3
/// (left bond, dangling leg, right bond); the dangling leg faces the rows
/// not yet absorbed. Norm factors are pulled out per site into log_scale.
struct BoundaryMps {
    std::vector<Var> sites;
    Var log_scale;
    double discarded_sq = 0.0;  // sum of squared discarded singular values

    std::size_t length() const { return sites.size(); }
    double discarded_weight() const { return std::sqrt(discarded_sq); }
};

namespace detail {

inline std::array<std::size_t, 3> mps_dims(Tape& tape, const Var& site) {
    const Tensor& t = tape.value(site);
    return {t.extent(0), t.extent(1), t.extent(2)};
}

// Right-canonicalize site i and absorb the remaining factor into site i-1.
// Uses QR of the transposed matricization when shapes allow (rows >= cols),
// and an exact SVD split when the bond exceeds the site's capacity.
inline void right_canonicalize_step(Tape& tape, BoundaryMps& mps, std::size_t i) {
    const auto [l, p, r] = mps_dims(tape, mps.sites[i]);
    const Var mat = tape.reshape(mps.sites[i], {l, p * r});
    Var factor;  // (l x k), contracted into the left neighbor
    if (p * r >= l) {
        const Var mt = tape.permute(mat, {1, 0});
        const QrVars qr = tape.qr(mt);  // (p*r x l) = q r
        mps.sites[i] = tape.reshape(tape.permute(qr.q, {1, 0}), {l, p, r});
        factor = tape.permute(qr.r, {1, 0});
    } else {
        const SvdVars sv = tape.svd(mat, p * r);  // exact: rank <= p*r
        const std::size_t k = tape.value(sv.s).extent(0);
        mps.sites[i] = tape.reshape(sv.v, {k, p, r});
        const Var s_cols = tape.contract(tape.constant(Tensor::ones({l})), sv.s, {});
        factor = tape.mul(sv.u, s_cols);
    }
    mps.sites[i - 1] = tape.contract(mps.sites[i - 1], factor, {{2, 0}});
}

inline void left_canonicalize_step(Tape& tape, BoundaryMps& mps, std::size_t i) {
    const auto [l, p, r] = mps_dims(tape, mps.sites[i]);
    const Var mat = tape.reshape(mps.sites[i], {l * p, r});
    Var factor;  // (k x r), contracted into the right neighbor
    if (l * p >= r) {
        const QrVars qr = tape.qr(mat);
        mps.sites[i] = tape.reshape(qr.q, {l, p, r});
        factor = qr.r;
    } else {
        const SvdVars sv = tape.svd(mat, l * p);
        const std::size_t k = tape.value(sv.s).extent(0);
        mps.sites[i] = tape.reshape(sv.u, {l, p, k});
        const Var s_rows = tape.contract(sv.s, tape.constant(Tensor::ones({r})), {});
        factor = tape.mul(s_rows, sv.v);
    }
    mps.sites[i + 1] = tape.contract(factor, mps.sites[i + 1], {{1, 0}});
}

}  // namespace detail

/// QR sweeps from both ends toward center_pos; the represented vector is
/// unchanged and every tensor away from the center becomes an isometry.
inline void canonicalize(Tape& tape, BoundaryMps& mps, std::size_t center_pos) {
    if (center_pos >= mps.length())
        throw std::invalid_argument("canonicalize center out of range");
    for (std::size_t i = mps.length(); i-- > center_pos + 1;)
        detail::right_canonicalize_step(tape, mps, i);
    for (std::size_t i = 0; i < center_pos; ++i) detail::left_canonicalize_step(tape, mps, i);
}

namespace detail {

// One right-to-left canonicalization sweep followed by a left-to-right
// truncation sweep, then per-site norm extraction. Assumes nothing about the
// incoming gauge.
inline void normalize_sites(Tape& tape, BoundaryMps& mps) {
    for (Var& site : mps.sites) {
        auto [scaled, logc] = tape.extract_scale(site);
        site = scaled;
        mps.log_scale = tape.add(mps.log_scale, logc);
    }
}

inline void compress(Tape& tape, BoundaryMps& mps, std::size_t chi, double svd_eps) {
    const std::size_t n = mps.length();
    // Keep sweep matrices near unit magnitude: tensors straight out of a row
    // absorption carry the row's raw scale (tiny at small-entry inits), and
    // the canonicalization factor compounds it across the chain.
    normalize_sites(tape, mps);
    canonicalize(tape, mps, 0);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const auto [l, p, r] = mps_dims(tape, mps.sites[i]);
        if (std::min(l * p, r) > chi) {
            const Var mat = tape.reshape(mps.sites[i], {l * p, r});
            const SvdVars sv = tape.svd(mat, chi, svd_eps);
            const std::size_t k = tape.value(sv.s).extent(0);
            mps.sites[i] = tape.reshape(sv.u, {l, p, k});
            const Var s_rows = tape.contract(sv.s, tape.constant(Tensor::ones({r})), {});
            const Var carry = tape.mul(s_rows, sv.v);
            mps.sites[i + 1] = tape.contract(carry, mps.sites[i + 1], {{1, 0}});
            mps.discarded_sq += sv.discarded_weight * sv.discarded_weight;
        } else {
            left_canonicalize_step(tape, mps, i);
        }
    }
    normalize_sites(tape, mps);
}

// Boundary MPS from an edge row of absorbed tensors (rank-4, with an
// extent-1 dummy on the outward side).
inline BoundaryMps boundary_from_row(Tape& tape, const AbsorbedGrid& grid, std::size_t row,
                                     bool from_top, std::size_t chi, double svd_eps) {
    BoundaryMps mps;
    mps.log_scale = tape.constant(Tensor::scalar(0.0));
    for (std::size_t j = 0; j < grid.L; ++j) {
        const Var& a = grid.at(row, j);  // (n, e, s, w)
        const Tensor& t = tape.value(a);
        const std::size_t nn = t.extent(0), e = t.extent(1), s = t.extent(2), w = t.extent(3);
        if (from_top && nn != 1) throw DimensionError("top row must have a trivial north leg");
        if (!from_top && s != 1) throw DimensionError("bottom row must have a trivial south leg");
        if (from_top)
            mps.sites.push_back(
                tape.permute(tape.reshape(a, {e, s, w}), {2, 1, 0}));  // (w, s, e)
        else
            mps.sites.push_back(
                tape.permute(tape.reshape(a, {nn, e, w}), {2, 0, 1}));  // (w, n, e)
    }
    compress(tape, mps, chi, svd_eps);
    return mps;
}

inline void apply_row_impl(Tape& tape, BoundaryMps& mps, const std::vector<Var>& row,
                           std::size_t chi, bool from_top, double svd_eps) {
    if (row.size() != mps.length())
        throw DimensionError("apply_row length mismatch");
    for (std::size_t j = 0; j < row.size(); ++j) {
        const auto [l, p, r] = mps_dims(tape, mps.sites[j]);
        const Tensor& a = tape.value(row[j]);  // (n, e, s, w)
        if (a.extent(from_top ? 0 : 2) != p)
            throw DimensionError("apply_row bond mismatch between row and boundary MPS");
        // Contract the dangling leg with the row tensor and fold the row's
        // side legs into the MPS bonds.
        Var merged = tape.contract(mps.sites[j], row[j], {{1, from_top ? 0u : 2u}});
        // free: (l, r) then row free legs.
        if (from_top) {
            // row free: (e, s, w) -> (l, w | s | r, e)
            merged = tape.permute(merged, {0, 4, 3, 1, 2});
            mps.sites[j] = tape.reshape(merged, {l * a.extent(3), a.extent(2), r * a.extent(1)});
        } else {
            // row free: (n, e, w) -> (l, w | n | r, e)
            merged = tape.permute(merged, {0, 4, 2, 1, 3});
            mps.sites[j] = tape.reshape(merged, {l * a.extent(3), a.extent(0), r * a.extent(1)});
        }
    }
    compress(tape, mps, chi, svd_eps);
}

}  // namespace detail

/// Absorbs one row of rank-4 absorbed tensors into the boundary MPS:
/// bonds grow by a factor D, then a canonicalization sweep and a truncation
/// sweep cap every bond at chi, extracting norm factors into log_scale.
inline void apply_row(Tape& tape, BoundaryMps& mps, const std::vector<Var>& row, std::size_t chi,
                      bool from_top, const ContractOptions& opts = {}) {
    if (!opts.checkpoint_rows) {
        detail::apply_row_impl(tape, mps, row, chi, from_top, opts.svd_eps);
        return;
    }
    const std::size_t n = mps.length();
    std::vector<Var> inputs = mps.sites;
    inputs.insert(inputs.end(), row.begin(), row.end());
    inputs.push_back(mps.log_scale);
    const double eps = opts.svd_eps;
    std::vector<Var> outs = tape.checkpoint(
        [n, chi, from_top, eps](Tape& inner, const std::vector<Var>& ins) {
            BoundaryMps local;
            local.sites.assign(ins.begin(), ins.begin() + static_cast<std::ptrdiff_t>(n));
            local.log_scale = ins.back();
            const std::vector<Var> inner_row(ins.begin() + static_cast<std::ptrdiff_t>(n),
                                             ins.end() - 1);
            detail::apply_row_impl(inner, local, inner_row, chi, from_top, eps);
            std::vector<Var> res = local.sites;
            res.push_back(local.log_scale);
            return res;
        },
        inputs);
    mps.sites.assign(outs.begin(), outs.end() - 1);
    mps.log_scale = outs.back();
}

/// Exact contraction of an absorbed grid, column by column with all bonds
/// kept. Reference oracle for the approximate methods; guarded by D^L <= 2^20.
inline Logits exact_contract(const PlainAbsorbedGrid& grid) {
    const std::size_t L = grid.L;
    if (L * std::log2(static_cast<double>(std::max<std::size_t>(grid.D, 1))) > 20.0)
        throw CapacityError("exact_contract guard exceeded: D^L > 2^20");
    // State axes before processing site (i, j) of column j:
    // [e_i .. e_{L-1} (old columns), ne_0 .. ne_{i-1} (this column),
    //  (label), pending_s].
    Tensor state = Tensor::ones(std::vector<std::size_t>(L, 1));
    double log_scale = 0.0;
    bool has_label = false;
    for (std::size_t j = 0; j < L; ++j) {
        {
            auto shape = state.shape();
            shape.push_back(1);  // pending north leg for the top site
            state = reshape(state, shape);
        }
        for (std::size_t i = 0; i < L; ++i) {
            const Tensor& site = grid.at(i, j);  // (n, e, s, w [, label])
            const bool site_label = grid.center_row == i && grid.center_col == j;
            const std::size_t pending_axis = state.rank() - 1;
            state = contract(state, site, {{0, 3}, {pending_axis, 0}});
            // Result: [e_{i+1}.., ne_0..ne_{i-1}, (label)] ++ [ne_i, s, (label_c)]
            const std::size_t r = state.rank();
            std::vector<std::size_t> order;
            const std::size_t old_left = L - 1 - i;          // e_{i+1}..e_{L-1}
            const std::size_t new_done = i;                  // ne_0..ne_{i-1}
            const std::size_t lbl_old = has_label ? 1 : 0;
            const std::size_t base = old_left + new_done + lbl_old;  // start of appended axes
            for (std::size_t a = 0; a < old_left + new_done; ++a) order.push_back(a);
            order.push_back(base);  // ne_i
            if (has_label)
                order.push_back(old_left + new_done);  // previous label stays before pending
            if (site_label) order.push_back(base + 2);
            order.push_back(base + 1);  // s becomes the pending axis
            state = permute_axes(state, order);
            // Invariant restored with label (if any) just before pending_s.
            if (site_label) has_label = true;
            (void)r;
        }
        {
            auto shape = state.shape();
            shape.pop_back();  // bottom dummy s-leg
            state = reshape(state, shape);
        }
        const double c = state.max_abs();
        if (c > 0.0) {
            state = scale(state, 1.0 / c);
            log_scale += std::log(c);
        }
    }
    if (!has_label) throw DimensionError("absorbed grid has no label leg");
    return {reshape(state, {grid.T}), log_scale};
}

/// Meet-in-the-middle approximate contraction: a bottom and a top boundary
/// MPS absorb rows toward the center row, and the final three-layer sandwich
/// is contracted exactly, carrying the label leg into a T-vector.
inline TapeLogits bidirectional_contract(Tape& tape, const AbsorbedGrid& grid, std::size_t chi,
                                         const ContractOptions& opts = {}) {
    const std::size_t L = grid.L;
    if (L < 2) throw std::invalid_argument("bidirectional_contract requires at least 2 rows");
    if (chi < 1) throw std::invalid_argument("chi must be >= 1");
    const std::size_t rc = grid.center_row;

    auto row_of = [&](std::size_t r) {
        std::vector<Var> row;
        for (std::size_t j = 0; j < L; ++j) row.push_back(grid.at(r, j));
        return row;
    };

    BoundaryMps top, bottom;
    bool has_top = rc > 0, has_bottom = rc + 1 < L;
    if (has_top) {
        top = detail::boundary_from_row(tape, grid, 0, true, chi, opts.svd_eps);
        for (std::size_t r = 1; r < rc; ++r) apply_row(tape, top, row_of(r), chi, true, opts);
    }
    if (has_bottom) {
        bottom = detail::boundary_from_row(tape, grid, L - 1, false, chi, opts.svd_eps);
        for (std::size_t r = L - 1; r-- > rc + 1;)
            apply_row(tape, bottom, row_of(r), chi, false, opts);
    }

    Var log_scale = tape.constant(Tensor::scalar(0.0));
    if (has_top) log_scale = tape.add(log_scale, top.log_scale);
    if (has_bottom) log_scale = tape.add(log_scale, bottom.log_scale);

    const Var dummy = tape.constant(Tensor::ones({1, 1, 1}));
    // Edge carried left to right: (top bond, center bond, bottom bond [, label]).
    Var edge = tape.constant(Tensor::ones({1, 1, 1}));
    bool edge_label = false;
    for (std::size_t j = 0; j < L; ++j) {
        const Var tj = has_top ? top.sites[j] : dummy;
        const Var bj = has_bottom ? bottom.sites[j] : dummy;
        const Var& cj = grid.at(rc, j);
        const bool center_here = grid.center_col == j && rc == grid.center_row;
        const std::size_t le = edge_label ? 1 : 0;

        // edge (a, m, b [,le]) x top (a, p, a') over a.
        Var x = tape.contract(edge, tj, {{0, 0}});
        // x: (m, b, [le,] p, a')
        // contract with center (n, e, s, w [,lc]) over m<->w, p<->n.
        Var y = tape.contract(x, cj, {{0, 3}, {2 + le, 0}});
        // y: (b, [le,] a', e, s [,lc])
        Var z = tape.contract(y, bj, {{0, 0}, {3 + le, 1}});
        // z: ([le,] a', e, [lc,] b')
        if (edge_label)
            edge = tape.permute(z, {1, 2, 3, 0});
        else if (center_here)
            edge = tape.permute(z, {0, 1, 3, 2});
        else
            edge = z;
        if (center_here) edge_label = true;
        auto [scaled, logc] = tape.extract_scale(edge);
        edge = scaled;
        log_scale = tape.add(log_scale, logc);
    }
    if (!edge_label) throw DimensionError("absorbed grid has no label leg on the center row");
    return {tape.reshape(edge, {grid.T}), log_scale};
}

}  // namespace peps
