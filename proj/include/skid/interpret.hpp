#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "skid/pngio.hpp"
#include "skid/skidnet.hpp"

namespace skid {

struct SaliencyMap {
    Tensor map;  // (H, W), values in [0, 1]
    int target = -1;
    std::string source_layer = "dimred2";
    bool all_zero = false;
};

/// Bilinear upsampling with half-pixel centers; sizes may shrink too.
inline Tensor upsample_bilinear(const Tensor& src, std::size_t out_h, std::size_t out_w) {
    if (src.rank() != 2) throw std::invalid_argument("upsample_bilinear: expected a 2-d map");
    const std::size_t ih = src.dim(0), iw = src.dim(1);
    Tensor dst({out_h, out_w});
    const Scalar sy = static_cast<Scalar>(ih) / static_cast<Scalar>(out_h);
    const Scalar sx = static_cast<Scalar>(iw) / static_cast<Scalar>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        Scalar fy = (static_cast<Scalar>(y) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, Scalar(0), static_cast<Scalar>(ih - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, ih - 1);
        const Scalar wy = fy - static_cast<Scalar>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            Scalar fx = (static_cast<Scalar>(x) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, Scalar(0), static_cast<Scalar>(iw - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, iw - 1);
            const Scalar wx = fx - static_cast<Scalar>(x0);
            const Scalar top = src.at(y0, x0) * (1 - wx) + src.at(y0, x1) * wx;
            const Scalar bot = src.at(y1, x0) * (1 - wx) + src.at(y1, x1) * wx;
            dst.at(y, x) = top * (1 - wy) + bot * wy;
        }
    }
    return dst;
}

/// Grad-CAM core: channel weights are the spatial means of the gradient at
/// the activation map, the raw map is the ReLU of the weighted channel sum,
/// and the result is upsampled then max-normalized. A uniformly zero map is
/// reported via all_zero instead of dividing by zero.
inline SaliencyMap gradcam_from(const Tensor& activation, const Tensor& grad,
                                std::size_t sample_index, std::size_t out_h, std::size_t out_w) {
    if (activation.rank() != 4 || grad.rank() != 4)
        throw std::invalid_argument("gradcam_from: expected (N,C,H,W) tensors");
    if (activation.shape() != grad.shape())
        throw std::invalid_argument("gradcam_from: activation/gradient shape mismatch");
    if (sample_index >= activation.dim(0))
        throw std::invalid_argument("gradcam_from: sample index out of range");

    const std::size_t C = activation.dim(1), h = activation.dim(2), w = activation.dim(3);
    const std::size_t hw = h * w;
    const Scalar* act = activation.data() + sample_index * C * hw;
    const Scalar* g = grad.data() + sample_index * C * hw;

    Tensor raw({h, w});
    for (std::size_t c = 0; c < C; ++c) {
        Scalar alpha = 0;
        for (std::size_t i = 0; i < hw; ++i) alpha += g[c * hw + i];
        alpha /= static_cast<Scalar>(hw);
        for (std::size_t i = 0; i < hw; ++i) raw[i] += alpha * act[c * hw + i];
    }
    for (std::size_t i = 0; i < hw; ++i) raw[i] = std::max(raw[i], Scalar(0));

    SaliencyMap out;
    out.map = upsample_bilinear(raw, out_h, out_w);
    Scalar mx = 0;
    for (std::size_t i = 0; i < out.map.size(); ++i) mx = std::max(mx, out.map[i]);
    if (mx > 0) {
        for (std::size_t i = 0; i < out.map.size(); ++i) out.map[i] /= mx;
    } else {
        out.map.fill(0);
        out.all_zero = true;
    }
    return out;
}

/// Saliency for one arrangement class of the pretext (or geo) model.
inline SaliencyMap gradcam_pretext(PretextModel& model, const Tensor& patches, int class_idx,
                                   std::size_t out_side) {
    Tensor logits = model.forward(patches);
    if (class_idx < 0 || static_cast<std::size_t>(class_idx) >= logits.dim(1))
        throw std::invalid_argument("gradcam_pretext: class index out of range");
    Tensor onehot(logits.shape());
    onehot[static_cast<std::size_t>(class_idx)] = 1;
    Tensor genc = model.backward_head(onehot);
    SaliencyMap sm = gradcam_from(model.encoder_activation(), genc, 0, out_side, out_side);
    sm.target = class_idx;
    return sm;
}

/// Saliency for one label of the downstream model at a chosen frame.
inline SaliencyMap gradcam_downstream(DownstreamModel& model, const Tensor& frames_as_patches,
                                      int label_idx, std::size_t frame_index,
                                      std::size_t out_side) {
    Tensor logits = model.forward(frames_as_patches);
    if (label_idx < 0 || static_cast<std::size_t>(label_idx) >= logits.dim(1))
        throw std::invalid_argument("gradcam_downstream: label index out of range");
    Tensor onehot(logits.shape());
    onehot[static_cast<std::size_t>(label_idx)] = 1;
    Tensor genc = model.backward_head(onehot);
    SaliencyMap sm =
        gradcam_from(model.encoder_activation(), genc, frame_index, out_side, out_side);
    sm.target = label_idx;
    return sm;
}

namespace detail {

// classic jet ramp, v in [0,1]
inline std::array<std::uint8_t, 3> jet(Scalar v) {
    v = std::clamp(v, Scalar(0), Scalar(1));
    auto seg = [](Scalar x) {
        return static_cast<std::uint8_t>(std::lround(255 * std::clamp(x, Scalar(0), Scalar(1))));
    };
    return {seg(1.5 - std::abs(4 * v - 3)), seg(1.5 - std::abs(4 * v - 2)),
            seg(1.5 - std::abs(4 * v - 1))};
}

}  // namespace detail

/// Alpha blend a jet-colored saliency map over a grayscale frame; both are
/// expected in [0,1] and must share the frame's resolution.
inline std::vector<std::uint8_t> render_overlay(const Tensor& gray, const SaliencyMap& saliency,
                                                Scalar alpha = 0.4) {
    if (gray.rank() != 2) throw std::invalid_argument("render_overlay: expected a 2-d frame");
    if (gray.shape() != saliency.map.shape())
        throw std::invalid_argument("render_overlay: frame and saliency sizes differ");
    if (alpha < 0 || alpha > 1) throw std::invalid_argument("render_overlay: alpha in [0,1]");
    std::vector<std::uint8_t> rgb(gray.size() * 3);
    for (std::size_t i = 0; i < gray.size(); ++i) {
        const Scalar g = std::clamp(gray[i], Scalar(0), Scalar(1));
        const auto c = detail::jet(saliency.map[i]);
        for (std::size_t k = 0; k < 3; ++k) {
            const Scalar mixed = (1 - alpha) * g + alpha * static_cast<Scalar>(c[k]) / 255;
            rgb[i * 3 + k] = static_cast<std::uint8_t>(std::lround(255 * mixed));
        }
    }
    return rgb;
}

inline void save_overlay_png(const std::string& path, const Tensor& gray,
                             const SaliencyMap& saliency, Scalar alpha = 0.4) {
    png::write_rgb(path, gray.dim(1), gray.dim(0), render_overlay(gray, saliency, alpha));
}

/// How much saliency mass sits on void pixels (zero fill introduced by
/// geometric transforms) versus the image interior.
struct SaliencyMassReport {
    Scalar void_mass = 0;
    Scalar interior_mass = 0;
    std::size_t void_pixels = 0;
    std::size_t interior_pixels = 0;

    Scalar void_fraction() const {
        const Scalar total = void_mass + interior_mass;
        return total > 0 ? void_mass / total : 0;
    }
    // mean per-pixel saliency ratio, void over interior
    Scalar density_ratio() const {
        if (void_pixels == 0 || interior_pixels == 0) return 0;
        const Scalar vd = void_mass / static_cast<Scalar>(void_pixels);
        const Scalar id = interior_mass / static_cast<Scalar>(interior_pixels);
        return id > 0 ? vd / id : 0;
    }
};

inline SaliencyMassReport saliency_mass(const SaliencyMap& saliency, const Tensor& frame,
                                        Scalar void_threshold = 1e-6) {
    if (frame.shape() != saliency.map.shape())
        throw std::invalid_argument("saliency_mass: frame and saliency sizes differ");
    SaliencyMassReport r;
    for (std::size_t i = 0; i < frame.size(); ++i) {
        if (frame[i] <= void_threshold) {
            r.void_mass += saliency.map[i];
            ++r.void_pixels;
        } else {
            r.interior_mass += saliency.map[i];
            ++r.interior_pixels;
        }
    }
    return r;
}

}  // namespace skid
