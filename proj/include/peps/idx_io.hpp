#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <zlib.h>

#include "peps/errors.hpp"
#include "peps/feature_map.hpp"

namespace peps {

/// Labeled image collection for one split.
struct Dataset {
    std::vector<Image> images;
    std::vector<std::uint8_t> labels;
    std::string split = "train";

    std::size_t size() const { return images.size(); }
};

namespace detail {

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
    if (off + 4 > b.size())
        throw FormatError("truncated IDX payload at byte offset " + std::to_string(off));
    return (std::uint32_t(b[off]) << 24) | (std::uint32_t(b[off + 1]) << 16) |
           (std::uint32_t(b[off + 2]) << 8) | std::uint32_t(b[off + 3]);
}

inline void write_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    b.push_back(static_cast<std::uint8_t>(v >> 24));
    b.push_back(static_cast<std::uint8_t>(v >> 16));
    b.push_back(static_cast<std::uint8_t>(v >> 8));
    b.push_back(static_cast<std::uint8_t>(v));
}

}  // namespace detail

/// Parses an IDX image file (magic 0x00000803): big-endian header, then raw
/// unsigned bytes mapped to [0, 1] by /255.
inline std::vector<Image> parse_idx_images(const std::vector<std::uint8_t>& bytes) {
    const std::uint32_t magic = detail::read_be32(bytes, 0);
    if (magic != 0x00000803)
        throw FormatError("bad IDX image magic at byte offset 0");
    const std::uint32_t count = detail::read_be32(bytes, 4);
    const std::uint32_t rows = detail::read_be32(bytes, 8);
    const std::uint32_t cols = detail::read_be32(bytes, 12);
    const std::size_t expect = 16 + std::size_t(count) * rows * cols;
    if (bytes.size() < expect)
        throw FormatError("truncated IDX image payload at byte offset " +
                          std::to_string(bytes.size()));
    std::vector<Image> out;
    out.reserve(count);
    std::size_t off = 16;
    for (std::uint32_t n = 0; n < count; ++n) {
        Image img{rows, cols, {}};
        img.pixels.resize(std::size_t(rows) * cols);
        for (auto& p : img.pixels) p = bytes[off++] / 255.0;
        out.push_back(std::move(img));
    }
    return out;
}

/// Parses an IDX label file (magic 0x00000801); labels must lie in 0..9.
inline std::vector<std::uint8_t> parse_idx_labels(const std::vector<std::uint8_t>& bytes) {
    const std::uint32_t magic = detail::read_be32(bytes, 0);
    if (magic != 0x00000801)
        throw FormatError("bad IDX label magic at byte offset 0");
    const std::uint32_t count = detail::read_be32(bytes, 4);
    if (bytes.size() < 8 + std::size_t(count))
        throw FormatError("truncated IDX label payload at byte offset " +
                          std::to_string(bytes.size()));
    std::vector<std::uint8_t> out(bytes.begin() + 8, bytes.begin() + 8 + count);
    for (std::size_t i = 0; i < out.size(); ++i)
        if (out[i] > 9)
            throw FormatError("label out of range 0..9 at byte offset " + std::to_string(8 + i));
    return out;
}

inline std::vector<std::uint8_t> serialize_idx_images(const std::vector<Image>& images) {
    std::vector<std::uint8_t> out;
    detail::write_be32(out, 0x00000803);
    detail::write_be32(out, static_cast<std::uint32_t>(images.size()));
    const std::uint32_t rows = images.empty() ? 0 : static_cast<std::uint32_t>(images[0].rows);
    const std::uint32_t cols = images.empty() ? 0 : static_cast<std::uint32_t>(images[0].cols);
    detail::write_be32(out, rows);
    detail::write_be32(out, cols);
    for (const Image& img : images)
        for (double p : img.pixels)
            out.push_back(static_cast<std::uint8_t>(std::lround(p * 255.0)));
    return out;
}

inline std::vector<std::uint8_t> serialize_idx_labels(const std::vector<std::uint8_t>& labels) {
    std::vector<std::uint8_t> out;
    detail::write_be32(out, 0x00000801);
    detail::write_be32(out, static_cast<std::uint32_t>(labels.size()));
    out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

/// Reads a file, transparently inflating gzip containers (magic 1f 8b).
inline std::vector<std::uint8_t> read_file_maybe_gzip(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    if (raw.size() < 2 || raw[0] != 0x1f || raw[1] != 0x8b) return raw;
    std::vector<std::uint8_t> out;
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) throw FormatError("zlib init failed");
    zs.next_in = raw.data();
    zs.avail_in = static_cast<uInt>(raw.size());
    std::vector<std::uint8_t> buf(1 << 16);
    int rc = Z_OK;
    do {
        zs.next_out = buf.data();
        zs.avail_out = static_cast<uInt>(buf.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw FormatError("gzip inflate failed on " + path.string());
        }
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    } while (rc != Z_STREAM_END);
    inflateEnd(&zs);
    return out;
}

inline Dataset load_dataset(const std::filesystem::path& images_path,
                            const std::filesystem::path& labels_path,
                            const std::string& split = "train") {
    Dataset d;
    d.images = parse_idx_images(read_file_maybe_gzip(images_path));
    d.labels = parse_idx_labels(read_file_maybe_gzip(labels_path));
    if (d.images.size() != d.labels.size())
        throw FormatError("image/label count mismatch between " + images_path.string() + " and " +
                          labels_path.string());
    d.split = split;
    return d;
}

/// Seeded permutation split: the first (size - val_count) samples stay in
/// train, the tail becomes validation. Disjoint and exhaustive.
inline std::pair<Dataset, Dataset> split_train_val(const Dataset& train, std::size_t val_count,
                                                   std::uint64_t seed) {
    if (val_count >= train.size())
        throw std::invalid_argument("val_count must be smaller than the dataset");
    std::vector<std::size_t> idx(train.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    Dataset tr, va;
    tr.split = "train";
    va.split = "val";
    const std::size_t keep = train.size() - val_count;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        Dataset& dst = i < keep ? tr : va;
        dst.images.push_back(train.images[idx[i]]);
        dst.labels.push_back(train.labels[idx[i]]);
    }
    return {tr, va};
}

/// Class-stratified subset of k samples (seeded). Picks floor/ceil
/// per-class counts matching the class frequencies as closely as possible.
inline Dataset stratified_subset(const Dataset& src, std::size_t k, std::uint64_t seed) {
    if (k > src.size()) throw std::invalid_argument("subset larger than dataset");
    std::array<std::vector<std::size_t>, 10> by_class;
    for (std::size_t i = 0; i < src.size(); ++i) by_class[src.labels[i]].push_back(i);
    std::mt19937_64 rng(seed);
    for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
    std::vector<std::size_t> chosen;
    std::array<std::size_t, 10> take{};
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < 10; ++c) {
        take[c] = std::min(by_class[c].size(), k * by_class[c].size() / src.size());
        assigned += take[c];
    }
    for (std::size_t c = 0; assigned < k; c = (c + 1) % 10) {
        if (take[c] < by_class[c].size()) {
            ++take[c];
            ++assigned;
        }
    }
    for (std::size_t c = 0; c < 10; ++c)
        for (std::size_t i = 0; i < take[c]; ++i) chosen.push_back(by_class[c][i]);
    std::sort(chosen.begin(), chosen.end());
    Dataset out;
    out.split = src.split;
    for (std::size_t i : chosen) {
        out.images.push_back(src.images[i]);
        out.labels.push_back(src.labels[i]);
    }
    return out;
}

/// Carves disjoint class-stratified subsets (train/val/test and so on) out
/// of one dataset in a single seeded pass.
inline std::vector<Dataset> stratified_partition(const Dataset& src,
                                                 const std::vector<std::size_t>& counts,
                                                 std::uint64_t seed) {
    std::size_t total = 0;
    for (std::size_t c : counts) total += c;
    if (total > src.size()) throw std::invalid_argument("partition larger than dataset");
    std::array<std::vector<std::size_t>, 10> by_class;
    for (std::size_t i = 0; i < src.size(); ++i) by_class[src.labels[i]].push_back(i);
    std::mt19937_64 rng(seed);
    for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
    std::array<std::size_t, 10> cursor{};
    std::vector<Dataset> out;
    for (std::size_t part = 0; part < counts.size(); ++part) {
        const std::size_t k = counts[part];
        std::vector<std::size_t> chosen;
        // Round-robin over classes keeps each part balanced.
        for (std::size_t picked = 0, c = 0; picked < k; c = (c + 1) % 10) {
            if (cursor[c] < by_class[c].size()) {
                chosen.push_back(by_class[c][cursor[c]++]);
                ++picked;
            } else {
                bool any = false;
                for (std::size_t cc = 0; cc < 10; ++cc) any = any || cursor[cc] < by_class[cc].size();
                if (!any) throw std::invalid_argument("not enough samples to partition");
            }
        }
        std::sort(chosen.begin(), chosen.end());
        Dataset d;
        d.split = part == 0 ? "train" : (part == 1 ? "val" : "test");
        for (std::size_t i : chosen) {
            d.images.push_back(src.images[i]);
            d.labels.push_back(src.labels[i]);
        }
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace peps
