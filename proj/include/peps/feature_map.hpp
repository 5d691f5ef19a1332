#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "peps/tape.hpp"
#include "peps/tensor.hpp"

namespace peps {

/// Grayscale image with pixels normalized to [0, 1].
struct Image {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> pixels;  // row-major

    double at(std::size_t r, std::size_t c) const { return pixels[r * cols + c]; }
};

/// Grid of per-site feature vectors.
struct FeatureGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t dim = 0;
    std::vector<Tensor> vectors;  // row-major, each rank-1 of extent dim

    const Tensor& at(std::size_t r, std::size_t c) const { return vectors[r * cols + c]; }
};

/// Maps one pixel intensity to the unit vector (cos(pi x / 2), sin(pi x / 2)).
inline std::array<double, 2> pixel_embed(double x) {
    if (!(x >= 0.0 && x <= 1.0))
        throw std::invalid_argument("pixel_embed requires x in [0, 1]; normalize first");
    const double a = std::numbers::pi * x / 2.0;
    return {std::cos(a), std::sin(a)};
}

/// Kronecker product of the pixel embeddings of a 2x2 block, in row-major
/// block order (NW, NE, SW, SE); a unit 16-vector.
inline Tensor block_embed(const std::array<double, 4>& block) {
    Tensor out({16});
    out[0] = 1.0;
    std::size_t n = 1;
    for (double px : block) {
        const auto [a, b] = pixel_embed(px);
        for (std::size_t i = n; i-- > 0;) {
            const double v = out[i];
            out[2 * i] = v * a;
            out[2 * i + 1] = v * b;
        }
        n *= 2;
    }
    return out;
}

/// Fixed product-state map with 2x2 blocking: an L0 x L0 image becomes an
/// (L0/2) x (L0/2) grid of 16-vectors. Odd image sides are padded with
/// zero-intensity pixels.
inline FeatureGrid product_state_map(const Image& img) {
    const std::size_t rows = (img.rows + 1) / 2, cols = (img.cols + 1) / 2;
    FeatureGrid grid{rows, cols, 16, {}};
    grid.vectors.reserve(rows * cols);
    auto px = [&](std::size_t r, std::size_t c) {
        return (r < img.rows && c < img.cols) ? img.at(r, c) : 0.0;
    };
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            grid.vectors.push_back(block_embed(
                {px(2 * i, 2 * j), px(2 * i, 2 * j + 1), px(2 * i + 1, 2 * j),
                 px(2 * i + 1, 2 * j + 1)}));
    return grid;
}

/// Trainable one-layer convolution feature map: 10 filters of size 5x5.
struct ConvParams {
    Tensor kernels{std::vector<std::size_t>{10, 5, 5}};
    Tensor biases{std::vector<std::size_t>{10}};

    static ConvParams init(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        ConvParams p;
        const double s = 1.0 / std::sqrt(25.0);  // fan-in of a 5x5 single-channel filter
        std::uniform_real_distribution<double> dist(-s, s);
        for (auto& v : p.kernels.data()) v = dist(rng);
        for (auto& v : p.biases.data()) v = dist(rng);
        return p;
    }
};

/// Feature grid whose vectors live on a tape (trainable feature map).
struct TapeFeatureGrid {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t dim = 0;
    std::vector<Var> vectors;

    const Var& at(std::size_t r, std::size_t c) const { return vectors[r * cols + c]; }
};

/// Unfolds the zero-padded image into constant patch rows so the convolution
/// becomes one contraction against the kernel matrix.
inline Tensor conv_patches(const Image& img) {
    if (img.rows != 28 || img.cols != 28)
        throw std::invalid_argument("conv_feature_map expects a 28x28 image");
    const std::size_t pad = 2, out = 28;
    Tensor p({25, out * out});
    for (std::size_t dy = 0; dy < 5; ++dy)
        for (std::size_t dx = 0; dx < 5; ++dx)
            for (std::size_t y = 0; y < out; ++y)
                for (std::size_t x = 0; x < out; ++x) {
                    const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) -
                                              static_cast<std::ptrdiff_t>(pad);
                    const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + dx) -
                                              static_cast<std::ptrdiff_t>(pad);
                    double v = 0.0;
                    if (sy >= 0 && sy < 28 && sx >= 0 && sx < 28)
                        v = img.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
                    p[(dy * 5 + dx) * out * out + y * out + x] = v;
                }
    return p;
}

/// Convolution (stride 1, pad 2) + ReLU + 2x2 max pool, recorded on the tape
/// so gradients flow to the kernel and bias leaves. Output: 14x14 grid of
/// 10-vectors.
inline TapeFeatureGrid conv_feature_map(Tape& tape, const Image& img, const Var& kernels,
                                        const Var& biases) {
    const Var patches = tape.constant(conv_patches(img));            // (25, 784)
    const Var kmat = tape.reshape(kernels, {10, 25});                // (10, 25)
    Var pre = tape.contract(kmat, patches, {{1, 0}});                // (10, 784)
    const Var ones = tape.constant(Tensor::ones({28 * 28}));
    pre = tape.add(pre, tape.contract(biases, ones, {}));            // + bias per channel
    const Var act = tape.relu(pre);
    const Var pooled = tape.max_pool2(tape.reshape(act, {10, 28, 28}));  // (10, 14, 14)
    TapeFeatureGrid grid{14, 14, 10, {}};
    grid.vectors.reserve(14 * 14);
    for (std::size_t i = 0; i < 14; ++i)
        for (std::size_t j = 0; j < 14; ++j)
            grid.vectors.push_back(
                tape.reshape(tape.slice(pooled, {0, i, j}, {10, 1, 1}), {10}));
    return grid;
}

}  // namespace peps
