#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "peps/feature_map.hpp"
#include "peps/tape.hpp"
#include "peps/tensor.hpp"

namespace peps {

/// L x L lattice of trainable site tensors. Virtual legs are ordered
/// (N, E, S, W) with missing boundary legs omitted, followed by the physical
/// leg and, on the center site only, the label leg.
struct PepsGrid {
    std::size_t L = 0;
    std::size_t D = 1;   // virtual bond dimension
    std::size_t d = 1;   // physical dimension
    std::size_t T = 1;   // number of labels
    std::size_t center_row = 0;
    std::size_t center_col = 0;
    std::vector<Tensor> tensors;  // row-major

    const Tensor& site(std::size_t i, std::size_t j) const { return tensors[i * L + j]; }
    Tensor& site(std::size_t i, std::size_t j) { return tensors[i * L + j]; }

    bool is_center(std::size_t i, std::size_t j) const {
        return i == center_row && j == center_col;
    }

    /// Virtual-leg extents in (N, E, S, W) order; 0 marks an absent leg.
    std::array<std::size_t, 4> virtual_legs(std::size_t i, std::size_t j) const {
        return {i > 0 ? D : 0, j + 1 < L ? D : 0, i + 1 < L ? D : 0, j > 0 ? D : 0};
    }

    std::vector<std::size_t> site_shape(std::size_t i, std::size_t j) const {
        std::vector<std::size_t> shape;
        for (std::size_t e : virtual_legs(i, j))
            if (e) shape.push_back(e);
        shape.push_back(d);
        if (is_center(i, j)) shape.push_back(T);
        return shape;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const Tensor& t : tensors) n += t.size();
        return n;
    }

    double min_entry() const {
        double m = std::numeric_limits<double>::max();
        for (const Tensor& t : tensors)
            for (double v : t.data()) m = std::min(m, v);
        return m;
    }

    double max_entry() const {
        double m = std::numeric_limits<double>::lowest();
        for (const Tensor& t : tensors)
            for (double v : t.data()) m = std::max(m, v);
        return m;
    }
};

/// Fresh grid with entries i.i.d. uniform(0, 0.01) from the seeded generator;
/// center site at (L/2, L/2).
inline PepsGrid init_grid(std::size_t L, std::size_t D, std::size_t d, std::size_t T,
                          std::uint64_t seed) {
    if (L < 1 || D < 1 || d < 1 || T < 1)
        throw std::invalid_argument("init_grid requires L, D, d, T >= 1");
    PepsGrid g;
    g.L = L;
    g.D = D;
    g.d = d;
    g.T = T;
    g.center_row = L / 2;
    g.center_col = L / 2;
    std::mt19937_64 rng(seed);
    g.tensors.reserve(L * L);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j)
            g.tensors.push_back(Tensor::random_uniform(g.site_shape(i, j), 0.0, 0.01, rng));
    return g;
}

/// Replaces every entry by its absolute value (positivity projection,
/// applied after each optimizer step when the positivity mode is on).
inline PepsGrid apply_positivity(PepsGrid grid) {
    for (Tensor& t : grid.tensors)
        for (double& v : t.data()) v = std::abs(v);
    return grid;
}

/// Site tensors with physical legs contracted against per-site feature
/// vectors, padded to a uniform rank-4 layout (N, E, S, W) with extent-1
/// dummy legs at the boundary; the center keeps a trailing label leg.
struct AbsorbedGrid {
    std::size_t L = 0;
    std::size_t D = 1;
    std::size_t T = 1;
    std::size_t center_row = 0;
    std::size_t center_col = 0;
    std::vector<Var> m;  // row-major, rank 4 (rank 5 at the center)

    const Var& at(std::size_t i, std::size_t j) const { return m[i * L + j]; }
};

/// Plain-tensor variant of AbsorbedGrid used by the exact reference
/// contraction.
struct PlainAbsorbedGrid {
    std::size_t L = 0;
    std::size_t D = 1;
    std::size_t T = 1;
    std::size_t center_row = 0;
    std::size_t center_col = 0;
    std::vector<Tensor> m;

    const Tensor& at(std::size_t i, std::size_t j) const { return m[i * L + j]; }
};

namespace detail {

inline std::vector<std::size_t> padded_shape(const PepsGrid& g, std::size_t i, std::size_t j) {
    const auto legs = g.virtual_legs(i, j);
    std::vector<std::size_t> shape{legs[0] ? legs[0] : 1, legs[1] ? legs[1] : 1,
                                   legs[2] ? legs[2] : 1, legs[3] ? legs[3] : 1};
    if (g.is_center(i, j)) shape.push_back(g.T);
    return shape;
}

}  // namespace detail

/// Contracts each site's physical leg with that site's feature vector.
/// site_vars must hold the grid's tensors in row-major order (typically
/// tape leaves); features may be constants (product-state map) or
/// differentiable Vars (convolution map).
inline AbsorbedGrid absorb_features(Tape& tape, const PepsGrid& geom,
                                    const std::vector<Var>& site_vars,
                                    const std::vector<Var>& features) {
    const std::size_t L = geom.L;
    if (site_vars.size() != L * L || features.size() != L * L)
        throw DimensionError("absorb_features grid size mismatch");
    AbsorbedGrid out{L, geom.D, geom.T, geom.center_row, geom.center_col, {}};
    out.m.reserve(L * L);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
            const Var& site = site_vars[i * L + j];
            const Var& feat = features[i * L + j];
            if (tape.value(feat).rank() != 1 || tape.value(feat).extent(0) != geom.d)
                throw DimensionError("feature vector dimension does not match grid d");
            std::size_t phys_axis = 0;
            for (std::size_t e : geom.virtual_legs(i, j))
                if (e) ++phys_axis;
            Var absorbed = tape.contract(site, feat, {{phys_axis, 0}});
            out.m.push_back(tape.reshape(absorbed, detail::padded_shape(geom, i, j)));
        }
    return out;
}

inline PlainAbsorbedGrid absorb_features_plain(const PepsGrid& geom, const FeatureGrid& feats) {
    const std::size_t L = geom.L;
    if (feats.rows != L || feats.cols != L)
        throw DimensionError("feature grid size does not match lattice");
    PlainAbsorbedGrid out{L, geom.D, geom.T, geom.center_row, geom.center_col, {}};
    out.m.reserve(L * L);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < L; ++j) {
            const Tensor& f = feats.at(i, j);
            if (f.rank() != 1 || f.extent(0) != geom.d)
                throw DimensionError("feature vector dimension does not match grid d");
            std::size_t phys_axis = 0;
            for (std::size_t e : geom.virtual_legs(i, j))
                if (e) ++phys_axis;
            out.m.push_back(
                reshape(contract(geom.site(i, j), f, {{phys_axis, 0}}),
                        detail::padded_shape(geom, i, j)));
        }
    return out;
}

}  // namespace peps
