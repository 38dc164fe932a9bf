#pragma once

// Radiograph side of the pipeline: the Volume container and its SVOL file
// format, HU normalization, trilinear resampling, patch grids, patch masking
// and fixed 3D sinusoidal position embeddings.
//
// Axis convention: dims = (H, W, D) are the extents along x, y, z and voxels
// are stored x fastest, i.e. index = x + H * (y + W * z).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "simcrop/error.hpp"
#include "simcrop/rng.hpp"
#include "simcrop/serialize.hpp"
#include "simcrop/tensor.hpp"

namespace simcrop {

using Dims3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

inline std::string dims_str(const Dims3& d) {
    return "(" + std::to_string(d[0]) + "," + std::to_string(d[1]) + "," + std::to_string(d[2]) + ")";
}

struct Volume {
    Dims3 dims{1, 1, 1};
    Spacing3 spacing{1.0, 1.0, 1.0};
    std::vector<float> voxels = std::vector<float>(1, 0.0f);

    Volume() = default;
    Volume(Dims3 d, Spacing3 s, std::vector<float> v) : dims(d), spacing(s), voxels(std::move(v)) {
        validate();
    }
    Volume(Dims3 d, Spacing3 s, float fill = 0.0f)
        : Volume(d, s, std::vector<float>(d[0] * d[1] * d[2], fill)) {}

    void validate() const {
        if (dims[0] * dims[1] * dims[2] != voxels.size() || voxels.empty())
            throw ShapeError("volume: dims " + dims_str(dims) + " do not match " +
                             std::to_string(voxels.size()) + " voxels");
        for (double s : spacing)
            if (!(s > 0.0)) throw ValueError("volume: spacing components must be positive");
    }

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
        return x + dims[0] * (y + dims[1] * z);
    }
    float& at(std::size_t x, std::size_t y, std::size_t z) { return voxels[index(x, y, z)]; }
    float at(std::size_t x, std::size_t y, std::size_t z) const { return voxels[index(x, y, z)]; }
    std::size_t size() const { return voxels.size(); }

    bool operator==(const Volume&) const = default;
};

// ---------------------------------------------------------------------------
// SVOL: "SVOL", u16 version=1, u16 dtype (0=f32), u32 H,W,D, f32 sx,sy,sz, voxels
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kSvolVersion = 1;

inline std::string encode_svol(const Volume& v) {
    io::Writer w;
    w.put_bytes("SVOL");
    w.put(kSvolVersion);
    w.put(std::uint16_t{0});
    for (auto d : v.dims) w.put(static_cast<std::uint32_t>(d));
    for (auto s : v.spacing) w.put(static_cast<float>(s));
    w.put_array(v.voxels.data(), v.voxels.size());
    return w.bytes();
}

inline Volume decode_svol(io::Reader& r) {
    if (r.get_bytes(4) != "SVOL") throw FormatError(FormatErrc::bad_magic, r.origin());
    auto version = r.get<std::uint16_t>();
    if (version != kSvolVersion)
        throw FormatError(FormatErrc::bad_version,
                          r.origin() + ": SVOL version " + std::to_string(version));
    auto dtype = r.get<std::uint16_t>();
    if (dtype != 0)
        throw FormatError(FormatErrc::corrupt, r.origin() + ": dtype " + std::to_string(dtype));
    Dims3 dims{};
    for (auto& d : dims) d = r.get<std::uint32_t>();
    Spacing3 spacing{};
    for (auto& s : spacing) s = r.get<float>();
    const std::size_t n = dims[0] * dims[1] * dims[2];
    if (n == 0) throw FormatError(FormatErrc::corrupt, r.origin() + ": zero dimension");
    if (n * sizeof(float) != r.remaining())
        throw FormatError(n * sizeof(float) > r.remaining() ? FormatErrc::truncated
                                                            : FormatErrc::corrupt,
                          r.origin() + ": voxel payload size");
    std::vector<float> vox(n);
    r.get_array(vox.data(), n);
    return Volume(dims, spacing, std::move(vox));
}

inline void write_svol(const std::string& path, const Volume& v) {
    io::Writer w;
    w.put_bytes(encode_svol(v));
    w.write_file(path);
}

inline Volume read_svol(const std::string& path) {
    auto r = io::Reader::from_file(path);
    return decode_svol(r);
}

// ---------------------------------------------------------------------------
// Intensity and geometry
// ---------------------------------------------------------------------------

inline constexpr float kHuMin = -1000.0f;
inline constexpr float kHuMax = 1000.0f;

/// clamp(hu, -1000, 1000) / 1000
inline Volume normalize_hu(const Volume& raw) {
    Volume out = raw;
    for (std::size_t i = 0; i < out.voxels.size(); ++i) {
        float hu = raw.voxels[i];
        if (!std::isfinite(hu))
            throw NumericError("normalize_hu: non-finite voxel at index " + std::to_string(i));
        out.voxels[i] = std::clamp(hu, kHuMin, kHuMax) / kHuMax;
    }
    return out;
}

/// Trilinear resampling to a new voxel spacing. Voxel centers are aligned
/// (source coordinate = (i + 0.5) * target / source - 0.5) and samples
/// outside the source grid clamp to the edge voxel.
inline Volume resample_trilinear(const Volume& v, const Spacing3& target) {
    Dims3 out_dims{};
    for (int a = 0; a < 3; ++a) {
        if (!(target[a] > 0.0)) throw ValueError("resample_trilinear: target spacing must be positive");
        out_dims[a] = static_cast<std::size_t>(
            std::llround(static_cast<double>(v.dims[a]) * v.spacing[a] / target[a]));
        if (out_dims[a] == 0)
            throw ValueError("resample_trilinear: resampled dimension " + std::to_string(a) +
                             " would be empty");
    }
    // Per-axis (lower index, upper index, weight of upper).
    struct Tap {
        std::size_t lo, hi;
        double w;
    };
    std::array<std::vector<Tap>, 3> taps;
    for (int a = 0; a < 3; ++a) {
        const double ratio = target[a] / v.spacing[a];
        const double last = static_cast<double>(v.dims[a] - 1);
        for (std::size_t i = 0; i < out_dims[a]; ++i) {
            double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
            src = std::clamp(src, 0.0, last);
            auto lo = static_cast<std::size_t>(std::floor(src));
            std::size_t hi = std::min(lo + 1, v.dims[a] - 1);
            taps[a].push_back({lo, hi, src - static_cast<double>(lo)});
        }
    }
    Volume out(out_dims, target);
    for (std::size_t z = 0; z < out_dims[2]; ++z) {
        const Tap& tz = taps[2][z];
        for (std::size_t y = 0; y < out_dims[1]; ++y) {
            const Tap& ty = taps[1][y];
            for (std::size_t x = 0; x < out_dims[0]; ++x) {
                const Tap& tx = taps[0][x];
                auto lerp_x = [&](std::size_t yy, std::size_t zz) {
                    return (1.0 - tx.w) * v.at(tx.lo, yy, zz) + tx.w * v.at(tx.hi, yy, zz);
                };
                double c0 = (1.0 - ty.w) * lerp_x(ty.lo, tz.lo) + ty.w * lerp_x(ty.hi, tz.lo);
                double c1 = (1.0 - ty.w) * lerp_x(ty.lo, tz.hi) + ty.w * lerp_x(ty.hi, tz.hi);
                out.at(x, y, z) = static_cast<float>((1.0 - tz.w) * c0 + tz.w * c1);
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

/// Patch n (in grid order gx fastest, then gy, then gz) stored as row n of a
/// count × patch_voxels matrix; each patch is flattened x fastest.
struct PatchGrid {
    Dims3 patch_dims{1, 1, 1};
    Dims3 grid_dims{1, 1, 1};
    std::vector<float> data;

    std::size_t patch_voxels() const { return patch_dims[0] * patch_dims[1] * patch_dims[2]; }
    std::size_t count() const { return grid_dims[0] * grid_dims[1] * grid_dims[2]; }
    std::span<const float> patch(std::size_t n) const {
        return std::span<const float>(data).subspan(n * patch_voxels(), patch_voxels());
    }
    Dims3 grid_coord(std::size_t n) const {
        return {n % grid_dims[0], (n / grid_dims[0]) % grid_dims[1], n / (grid_dims[0] * grid_dims[1])};
    }
};

inline Dims3 grid_dims_for(const Dims3& dims, const Dims3& patch_dims) {
    Dims3 g{};
    for (int a = 0; a < 3; ++a) {
        if (patch_dims[a] == 0 || dims[a] % patch_dims[a] != 0)
            throw ShapeError("patchify: volume dims " + dims_str(dims) +
                             " not divisible by patch dims " + dims_str(patch_dims));
        g[a] = dims[a] / patch_dims[a];
    }
    return g;
}

/// Patch index containing voxel (x, y, z).
inline std::size_t patch_index_of(const Dims3& grid_dims, const Dims3& patch_dims, std::size_t x,
                                  std::size_t y, std::size_t z) {
    return x / patch_dims[0] + grid_dims[0] * (y / patch_dims[1] + grid_dims[1] * (z / patch_dims[2]));
}

inline PatchGrid patchify(const Volume& v, const Dims3& patch_dims) {
    PatchGrid g;
    g.patch_dims = patch_dims;
    g.grid_dims = grid_dims_for(v.dims, patch_dims);
    const std::size_t pv = g.patch_voxels();
    g.data.resize(g.count() * pv);
    for (std::size_t n = 0; n < g.count(); ++n) {
        auto [gx, gy, gz] = g.grid_coord(n);
        float* dst = g.data.data() + n * pv;
        for (std::size_t pz = 0; pz < patch_dims[2]; ++pz)
            for (std::size_t py = 0; py < patch_dims[1]; ++py)
                for (std::size_t px = 0; px < patch_dims[0]; ++px)
                    *dst++ = v.at(gx * patch_dims[0] + px, gy * patch_dims[1] + py,
                                  gz * patch_dims[2] + pz);
    }
    return g;
}

inline Volume unpatchify(const PatchGrid& g, const Spacing3& spacing = {1.0, 1.0, 1.0}) {
    const Dims3& p = g.patch_dims;
    Volume v({g.grid_dims[0] * p[0], g.grid_dims[1] * p[1], g.grid_dims[2] * p[2]}, spacing);
    if (g.data.size() != g.count() * g.patch_voxels())
        throw ShapeError("unpatchify: patch data size does not match grid");
    for (std::size_t n = 0; n < g.count(); ++n) {
        auto [gx, gy, gz] = g.grid_coord(n);
        const float* src = g.data.data() + n * g.patch_voxels();
        for (std::size_t pz = 0; pz < p[2]; ++pz)
            for (std::size_t py = 0; py < p[1]; ++py)
                for (std::size_t px = 0; px < p[0]; ++px)
                    v.at(gx * p[0] + px, gy * p[1] + py, gz * p[2] + pz) = *src++;
    }
    return v;
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

struct MaskPlan {
    std::size_t n_total = 0;
    double ratio = 0.0;
    std::vector<std::size_t> masked_idx;
    std::vector<std::size_t> unmasked_idx;

    bool operator==(const MaskPlan&) const = default;

    /// Plan with no masked positions.
    static MaskPlan none(std::size_t n_total) {
        MaskPlan p;
        p.n_total = n_total;
        p.unmasked_idx.resize(n_total);
        for (std::size_t i = 0; i < n_total; ++i) p.unmasked_idx[i] = i;
        return p;
    }
};

/// Number masked for a ratio: round(ratio * n).
inline std::size_t masked_count(std::size_t n, double ratio) {
    return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
}

/// Uniform random subset of round(ratio * n_total) masked indices.
inline MaskPlan sample_mask(std::size_t n_total, double ratio, Rng& rng) {
    if (!(ratio >= 0.0 && ratio <= 1.0))
        throw ValueError("sample_mask: ratio must lie in [0, 1], got " + std::to_string(ratio));
    std::vector<std::size_t> perm(n_total);
    for (std::size_t i = 0; i < n_total; ++i) perm[i] = i;
    shuffle(perm, rng);
    const std::size_t n_mask = masked_count(n_total, ratio);
    MaskPlan plan;
    plan.n_total = n_total;
    plan.ratio = ratio;
    plan.masked_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_mask));
    plan.unmasked_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_mask), perm.end());
    std::sort(plan.masked_idx.begin(), plan.masked_idx.end());
    std::sort(plan.unmasked_idx.begin(), plan.unmasked_idx.end());
    return plan;
}

// ---------------------------------------------------------------------------
// Positional embeddings
// ---------------------------------------------------------------------------

inline constexpr double kPosEmbBase = 10000.0;

/// Sizes of the z, y, x blocks: floor(d/2) sin/cos pairs dealt out as evenly
/// as possible (z first); an odd d leaves its last column zero.
inline std::array<std::size_t, 3> posemb_pairs(std::size_t embed_dim) {
    const std::size_t pairs = embed_dim / 2;
    std::array<std::size_t, 3> out{pairs / 3, pairs / 3, pairs / 3};
    for (std::size_t i = 0; i < pairs % 3; ++i) ++out[i];
    return out;
}

/// 1-D sinusoidal ladder written into dst[0 .. 2*pairs): sin block then cos block,
/// frequency i = base^(-i/pairs).
template <class T>
void sincos_ladder(T* dst, std::size_t pairs, double pos) {
    for (std::size_t i = 0; i < pairs; ++i) {
        double omega = std::pow(kPosEmbBase, -static_cast<double>(i) / static_cast<double>(pairs));
        dst[i] = static_cast<T>(std::sin(pos * omega));
        dst[pairs + i] = static_cast<T>(std::cos(pos * omega));
    }
}

/// Fixed 3D embedding, one row per patch in grid order. Columns hold the z
/// block, then y, then x.
template <class T>
Tensor<T> positional_embedding_3d(const Dims3& grid_dims, std::size_t embed_dim) {
    if (embed_dim < 6)
        throw ValueError("positional_embedding_3d: embed_dim must be >= 6, got " +
                         std::to_string(embed_dim));
    const auto pairs = posemb_pairs(embed_dim);
    const std::size_t n = grid_dims[0] * grid_dims[1] * grid_dims[2];
    std::vector<T> out(n * embed_dim, T(0));
    for (std::size_t p = 0; p < n; ++p) {
        const std::size_t gx = p % grid_dims[0];
        const std::size_t gy = (p / grid_dims[0]) % grid_dims[1];
        const std::size_t gz = p / (grid_dims[0] * grid_dims[1]);
        T* row = out.data() + p * embed_dim;
        sincos_ladder(row, pairs[0], static_cast<double>(gz));
        sincos_ladder(row + 2 * pairs[0], pairs[1], static_cast<double>(gy));
        sincos_ladder(row + 2 * (pairs[0] + pairs[1]), pairs[2], static_cast<double>(gx));
    }
    return Tensor<T>(Shape{n, embed_dim}, std::move(out));
}

/// Fixed 1-D embedding for token positions (length × d).
template <class T>
Tensor<T> positional_embedding_1d(std::size_t length, std::size_t embed_dim) {
    const std::size_t pairs = embed_dim / 2;
    std::vector<T> out(length * embed_dim, T(0));
    for (std::size_t p = 0; p < length; ++p)
        sincos_ladder(out.data() + p * embed_dim, pairs, static_cast<double>(p));
    return Tensor<T>(Shape{length, embed_dim}, std::move(out));
}

} // namespace simcrop
