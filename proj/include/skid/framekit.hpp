#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "skid/arrangements.hpp"
#include "skid/core.hpp"

namespace skid {

enum class Plane { sagittal, coronal, axial };

inline const char* plane_name(Plane p) {
    switch (p) {
        case Plane::sagittal: return "sagittal";
        case Plane::coronal: return "coronal";
        default: return "axial";
    }
}

inline Plane plane_from_name(const std::string& s) {
    if (s == "sagittal") return Plane::sagittal;
    if (s == "coronal") return Plane::coronal;
    if (s == "axial") return Plane::axial;
    throw std::invalid_argument("unknown plane: " + s);
}

/// Square grayscale frame, intensities in [0,1]. pixels shape (L,L), row major.
struct Frame {
    Tensor pixels;
    Plane plane = Plane::sagittal;

    std::size_t side() const { return pixels.rank() == 2 ? pixels.dim(0) : 0; }
};

struct AugmentationSpec {
    Scalar shift_frac = 0.1;       // max |shift| as a fraction of the patch side
    Scalar rot_range_deg = 15.0;   // rotation drawn from [-rot, +rot]
    std::vector<Scalar> scales = {1.0, 1.2};
    Scalar awgn_mean = 0.0;
    Scalar awgn_var = 0.01;
    bool enable_shift = true;
    bool enable_rotation = true;
    bool enable_scale = true;
    bool enable_awgn = true;

    static AugmentationSpec disabled() {
        AugmentationSpec s;
        s.enable_shift = s.enable_rotation = s.enable_scale = s.enable_awgn = false;
        return s;
    }
};

/// 9 (in general N) augmented 64x64 patches plus the arrangement label.
/// crop_origins are recorded in source (pre-arrangement) patch order.
struct JumbledSample {
    std::vector<Tensor> patches;
    int label = 0;
    std::vector<std::pair<int, int>> crop_origins;
};

constexpr int kPatchOut = 64;

namespace imgops {

// bilinear read with zero fill outside the image
inline Scalar sample_bilinear(const Tensor& img, Scalar y, Scalar x) {
    const auto h = static_cast<std::ptrdiff_t>(img.dim(0));
    const auto w = static_cast<std::ptrdiff_t>(img.dim(1));
    const std::ptrdiff_t y0 = static_cast<std::ptrdiff_t>(std::floor(y));
    const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(std::floor(x));
    const Scalar fy = y - static_cast<Scalar>(y0);
    const Scalar fx = x - static_cast<Scalar>(x0);
    auto px = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> Scalar {
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
        return img.data()[yy * w + xx];
    };
    return px(y0, x0) * (1 - fy) * (1 - fx) + px(y0, x0 + 1) * (1 - fy) * fx +
           px(y0 + 1, x0) * fy * (1 - fx) + px(y0 + 1, x0 + 1) * fy * fx;
}

/// Magnify about the image center by `s`, keep output dimensions (content
/// outside is cropped away; s < 1 would introduce zero borders).
inline Tensor scale_about_center(const Tensor& img, Scalar s) {
    if (s == 1.0) return img;
    const std::size_t h = img.dim(0), w = img.dim(1);
    const Scalar cy = (static_cast<Scalar>(h) - 1) / 2;
    const Scalar cx = (static_cast<Scalar>(w) - 1) / 2;
    Tensor out({h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            out.data()[y * w + x] = sample_bilinear(img, cy + (static_cast<Scalar>(y) - cy) / s,
                                                    cx + (static_cast<Scalar>(x) - cx) / s);
    return out;
}

inline Tensor rotate_about_center(const Tensor& img, Scalar deg) {
    if (deg == 0.0) return img;
    const std::size_t h = img.dim(0), w = img.dim(1);
    const Scalar rad = deg * M_PI / 180.0;
    const Scalar c = std::cos(rad), sn = std::sin(rad);
    const Scalar cy = (static_cast<Scalar>(h) - 1) / 2;
    const Scalar cx = (static_cast<Scalar>(w) - 1) / 2;
    Tensor out({h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const Scalar dy = static_cast<Scalar>(y) - cy;
            const Scalar dx = static_cast<Scalar>(x) - cx;
            // inverse rotation of the output grid
            out.data()[y * w + x] =
                sample_bilinear(img, cy + c * dy + sn * dx, cx - sn * dy + c * dx);
        }
    return out;
}

/// Integer shift; row index moves by dr, column by dc; vacated area is 0.
inline Tensor shift_integer(const Tensor& img, int dr, int dc) {
    if (dr == 0 && dc == 0) return img;
    const auto h = static_cast<std::ptrdiff_t>(img.dim(0));
    const auto w = static_cast<std::ptrdiff_t>(img.dim(1));
    Tensor out({img.dim(0), img.dim(1)});
    for (std::ptrdiff_t y = 0; y < h; ++y)
        for (std::ptrdiff_t x = 0; x < w; ++x) {
            const std::ptrdiff_t sy = y - dr, sx = x - dc;
            if (sy >= 0 && sy < h && sx >= 0 && sx < w)
                out.data()[y * w + x] = img.data()[sy * w + sx];
        }
    return out;
}

}  // namespace imgops

inline int grid_side(int n_patches) {
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n_patches))));
    if (g * g != n_patches)
        throw std::invalid_argument("n_patches=" + std::to_string(n_patches) +
                                    " is not a perfect square");
    return g;
}

/// Split a square frame into N = g*g parts of side floor(L/g), row-major;
/// the trailing L mod g pixels per axis are discarded.
inline std::vector<Tensor> partition_frame(const Frame& f, int n_patches) {
    const int g = grid_side(n_patches);
    if (f.pixels.rank() != 2 || f.pixels.dim(0) != f.pixels.dim(1))
        throw std::invalid_argument("partition_frame: frame must be square 2D");
    const int L = static_cast<int>(f.pixels.dim(0));
    const int part = L / g;
    if (part < kPatchOut)
        throw std::invalid_argument("partition_frame: frame side " + std::to_string(L) +
                                    " too small for " + std::to_string(n_patches) +
                                    " patches with a 64x64 crop (need >= " +
                                    std::to_string(g * kPatchOut) + ")");
    std::vector<Tensor> parts;
    parts.reserve(static_cast<std::size_t>(n_patches));
    const std::size_t W = f.pixels.dim(1);
    for (int i = 0; i < n_patches; ++i) {
        const int row0 = (i / g) * part;
        const int col0 = (i % g) * part;
        Tensor p({static_cast<std::size_t>(part), static_cast<std::size_t>(part)});
        for (int y = 0; y < part; ++y)
            for (int x = 0; x < part; ++x)
                p.data()[y * part + x] =
                    f.pixels.data()[static_cast<std::size_t>(row0 + y) * W +
                                    static_cast<std::size_t>(col0 + x)];
        parts.push_back(std::move(p));
    }
    return parts;
}

/// Random augmentation in fixed order scale -> rotate -> shift; dimensions
/// preserved at every step, vacated regions zero filled.
inline Tensor augment_patch(const Tensor& p, const AugmentationSpec& spec, Rng& rng) {
    if (p.rank() != 2 || p.dim(0) != p.dim(1))
        throw std::invalid_argument("augment_patch: patch must be square");
    Tensor out = p;
    if (spec.enable_scale && !spec.scales.empty()) {
        const Scalar s = spec.scales[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(spec.scales.size()) - 1))];
        out = imgops::scale_about_center(out, s);
    }
    if (spec.enable_rotation && spec.rot_range_deg > 0) {
        const Scalar deg = rng.uniform_real(-spec.rot_range_deg, spec.rot_range_deg);
        out = imgops::rotate_about_center(out, deg);
    }
    if (spec.enable_shift) {
        const int max_shift =
            static_cast<int>(std::floor(spec.shift_frac * static_cast<Scalar>(p.dim(0))));
        const int dr = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
        const int dc = static_cast<int>(rng.uniform_int(-max_shift, max_shift));
        out = imgops::shift_integer(out, dr, dc);
    }
    return out;
}

/// Crop a 64x64 window at the given origin (row, col).
inline Tensor crop64_at(const Tensor& p, int ry, int rx) {
    const int side = static_cast<int>(p.dim(0));
    if (side < kPatchOut) throw std::invalid_argument("crop64: patch side < 64");
    if (ry < 0 || rx < 0 || ry > side - kPatchOut || rx > side - kPatchOut)
        throw std::invalid_argument("crop64: origin out of range");
    Tensor out({kPatchOut, kPatchOut});
    const std::size_t W = p.dim(1);
    for (int y = 0; y < kPatchOut; ++y)
        for (int x = 0; x < kPatchOut; ++x)
            out.data()[y * kPatchOut + x] =
                p.data()[static_cast<std::size_t>(ry + y) * W + static_cast<std::size_t>(rx + x)];
    return out;
}

/// Crop origin drawn uniformly from [0, side-64] per axis.
inline Tensor crop64(const Tensor& p, Rng& rng, std::pair<int, int>* origin = nullptr) {
    const int side = static_cast<int>(p.dim(0));
    if (side < kPatchOut) throw std::invalid_argument("crop64: patch side < 64");
    const int ry = static_cast<int>(rng.uniform_int(0, side - kPatchOut));
    const int rx = static_cast<int>(rng.uniform_int(0, side - kPatchOut));
    if (origin) *origin = {ry, rx};
    return crop64_at(p, ry, rx);
}

inline int center_crop_origin(int side) { return (side - kPatchOut) / 2; }

/// Additive white Gaussian noise, clipped to [0,1]. When raw_noise is given
/// it receives the pre-clip noise values (for distribution checks).
inline Tensor add_awgn(const Tensor& p, Scalar mean, Scalar var, Rng& rng,
                       std::vector<Scalar>* raw_noise = nullptr) {
    Tensor out = p;
    const Scalar sd = std::sqrt(var);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Scalar n = rng.normal(mean, sd);
        if (raw_noise) raw_noise->push_back(n);
        out[i] = std::clamp(out[i] + n, Scalar{0}, Scalar{1});
    }
    return out;
}

enum class PrepMode { train, valid };

/// PREPFRAM: partition -> augment each part -> crop 64x64 -> AWGN -> draw one
/// arrangement for the frame and jumble the patches. Validation mode turns
/// off augmentation and noise and pins the crop to the centered origin, but
/// still draws a random arrangement label.
inline JumbledSample prepfram(const Frame& f, const ArrangementSet& aset,
                              const AugmentationSpec& spec, Rng& rng,
                              PrepMode mode = PrepMode::train) {
    if (aset.k() < 1) throw std::invalid_argument("prepfram: empty arrangement set");
    std::vector<Tensor> parts = partition_frame(f, aset.n_patches);

    JumbledSample out;
    out.crop_origins.reserve(parts.size());
    std::vector<Tensor> patches;
    patches.reserve(parts.size());
    for (const Tensor& part : parts) {
        Tensor p = (mode == PrepMode::train) ? augment_patch(part, spec, rng) : part;
        std::pair<int, int> origin;
        if (mode == PrepMode::train) {
            p = crop64(p, rng, &origin);
        } else {
            const int c = center_crop_origin(static_cast<int>(p.dim(0)));
            origin = {c, c};
            p = crop64_at(p, c, c);
        }
        if (mode == PrepMode::train && spec.enable_awgn)
            p = add_awgn(p, spec.awgn_mean, spec.awgn_var, rng);
        out.crop_origins.push_back(origin);
        patches.push_back(std::move(p));
    }

    out.label = static_cast<int>(rng.uniform_int(0, aset.k() - 1));
    out.patches = apply_arrangement(patches, aset.arrangements[static_cast<std::size_t>(out.label)]);
    return out;
}

// ---------------------------------------------------------------------------
// Geometric-transformation baseline: R x Tx x Ty x S, 54 classes.

struct GeoTransform {
    Scalar rot_deg = 0;
    int tx = 0;  // translation along rows
    int ty = 0;  // translation along columns
    Scalar scale = 1.0;
    int class_id = 0;

    bool is_identity() const { return rot_deg == 0 && tx == 0 && ty == 0 && scale == 1.0; }
};

/// Lexicographic enumeration, rot major, then tx, ty, scale; class_id is the
/// position in this order.
inline std::vector<GeoTransform> enumerate_geo_transforms(int L) {
    if (L <= 0) throw std::invalid_argument("enumerate_geo_transforms: L must be positive");
    const int d = static_cast<int>(std::floor(0.1 * L));
    const Scalar rots[] = {-15.0, 0.0, 15.0};
    const int txs[] = {-d, 0, d};
    const int tys[] = {-d, 0, d};
    const Scalar scales[] = {1.0, 1.2};
    std::vector<GeoTransform> out;
    out.reserve(54);
    int id = 0;
    for (Scalar r : rots)
        for (int tx : txs)
            for (int ty : tys)
                for (Scalar s : scales) out.push_back({r, tx, ty, s, id++});
    return out;
}

/// scale -> rotate -> translate over the full frame; zero fill, same size.
inline Frame apply_geo_transform(const Frame& f, const GeoTransform& t) {
    Frame out = f;
    if (t.scale != 1.0) out.pixels = imgops::scale_about_center(out.pixels, t.scale);
    if (t.rot_deg != 0.0) out.pixels = imgops::rotate_about_center(out.pixels, t.rot_deg);
    if (t.tx != 0 || t.ty != 0) out.pixels = imgops::shift_integer(out.pixels, t.tx, t.ty);
    return out;
}

}  // namespace skid
