#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "peps/errors.hpp"
#include "peps/feature_map.hpp"
#include "peps/peps_grid.hpp"

namespace peps {

inline constexpr std::uint32_t kCheckpointMagic = 0x50455043;  // "PEPC"
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class FeatureKind : std::uint8_t { product = 0, conv = 1 };

/// Everything needed to resume or evaluate a model.
struct Checkpoint {
    PepsGrid grid;
    bool positivity = false;
    FeatureKind feature = FeatureKind::product;
    std::optional<ConvParams> conv;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& b, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(b, bits);
}

struct ByteReader {
    const std::vector<std::uint8_t>& b;
    std::size_t off = 0;

    std::uint8_t u8() {
        if (off + 1 > b.size()) throw FormatError("truncated checkpoint");
        return b[off++];
    }
    std::uint32_t u32() {
        if (off + 4 > b.size()) throw FormatError("truncated checkpoint");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[off++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        if (off + 8 > b.size()) throw FormatError("truncated checkpoint");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[off++]) << (8 * i);
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
};

inline void put_tensor(std::vector<std::uint8_t>& b, const Tensor& t) {
    put_u32(b, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t e : t.shape()) put_u64(b, e);
    for (double v : t.data()) put_f64(b, v);
}

inline Tensor get_tensor(ByteReader& r) {
    const std::uint32_t rank = r.u32();
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = r.u64();
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data()) v = r.f64();
    return t;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
    std::vector<std::uint8_t> b;
    detail::put_u32(b, kCheckpointMagic);
    detail::put_u32(b, kCheckpointVersion);
    detail::put_u32(b, static_cast<std::uint32_t>(ck.grid.L));
    detail::put_u32(b, static_cast<std::uint32_t>(ck.grid.D));
    detail::put_u32(b, static_cast<std::uint32_t>(ck.grid.d));
    detail::put_u32(b, static_cast<std::uint32_t>(ck.grid.T));
    detail::put_u32(b, static_cast<std::uint32_t>(ck.grid.center_row));
    detail::put_u32(b, static_cast<std::uint32_t>(ck.grid.center_col));
    b.push_back(ck.positivity ? 1 : 0);
    b.push_back(static_cast<std::uint8_t>(ck.feature));
    b.push_back(ck.conv.has_value() ? 1 : 0);
    if (ck.conv) {
        detail::put_tensor(b, ck.conv->kernels);
        detail::put_tensor(b, ck.conv->biases);
    }
    for (const Tensor& t : ck.grid.tensors) detail::put_tensor(b, t);
    return b;
}

inline Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r{bytes};
    if (r.u32() != kCheckpointMagic) throw FormatError("not a checkpoint file");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw VersionError("unsupported checkpoint version " + std::to_string(version));
    const std::size_t L = r.u32(), D = r.u32(), d = r.u32(), T = r.u32();
    const std::size_t cr = r.u32(), cc = r.u32();
    Checkpoint ck;
    ck.positivity = r.u8() != 0;
    const std::uint8_t fk = r.u8();
    if (fk > 1) throw FormatError("unknown feature map tag in checkpoint");
    ck.feature = static_cast<FeatureKind>(fk);
    if (r.u8() != 0) {
        ConvParams cp;
        cp.kernels = detail::get_tensor(r);
        cp.biases = detail::get_tensor(r);
        ck.conv = std::move(cp);
    }
    ck.grid = init_grid(L, D, d, T, 0);
    if (ck.grid.center_row != cr || ck.grid.center_col != cc)
        throw FormatError("checkpoint center does not match grid geometry");
    for (std::size_t i = 0; i < ck.grid.tensors.size(); ++i) {
        Tensor t = detail::get_tensor(r);
        if (t.shape() != ck.grid.tensors[i].shape())
            throw FormatError("checkpoint site " + std::to_string(i) +
                              " shape does not match geometry");
        ck.grid.tensors[i] = std::move(t);
    }
    if (r.off != bytes.size()) throw FormatError("trailing bytes after checkpoint payload");
    return ck;
}

/// Atomic write: stage into a sibling temp file, then rename over the target.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = serialize_checkpoint(ck);
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("write failed on " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace peps
