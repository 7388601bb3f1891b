#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <memory>

#include "nlohmann/json.hpp"
#include "skid/nn.hpp"

namespace skid {

/// Architectural description of one encoder variant. The four named variants
/// carry the published filter counts; miniature() is the desk-scale config
/// used throughout the test and acceptance suites.
struct SkidConfig {
    enum class Variant { v1, v2, v3, noblocks };

    Variant variant = Variant::v3;
    std::size_t branch_block_filters = 256;
    std::size_t onebyone_filters = 1024;
    std::size_t skip1_first = 1024;
    std::size_t skip1_out = 1024;
    std::size_t dimred1_out = 2048;
    std::size_t skip2_first = 2048;
    std::size_t skip2_out = 2048;
    std::size_t dimred2_out = 4096;
    Scalar skip_scale = 0.25;
    std::size_t n_classes = 1000;

    static SkidConfig v1() {
        SkidConfig c;
        c.variant = Variant::v1;
        c.skip1_first = 512;
        c.skip1_out = 1024;
        c.dimred1_out = 1024;
        c.skip2_first = 512;
        c.skip2_out = 1024;
        c.dimred2_out = 4096;
        return c;
    }
    static SkidConfig v2() {
        SkidConfig c;
        c.variant = Variant::v2;
        c.skip1_first = 512;
        c.skip1_out = 1024;
        c.dimred1_out = 2048;
        c.skip2_first = 1024;
        c.skip2_out = 2048;
        c.dimred2_out = 4096;
        return c;
    }
    static SkidConfig v3() { return SkidConfig{}; }
    static SkidConfig noblocks() {
        SkidConfig c;
        c.variant = Variant::noblocks;
        return c;
    }
    /// All filter counts scaled down for CPU-scale tests.
    static SkidConfig miniature(std::size_t n_classes = 10) {
        SkidConfig c;
        c.variant = Variant::v3;
        c.branch_block_filters = 8;
        c.onebyone_filters = 8;
        c.skip1_first = 8;
        c.skip1_out = 8;
        c.dimred1_out = 16;
        c.skip2_first = 16;
        c.skip2_out = 16;
        c.dimred2_out = 32;
        c.n_classes = n_classes;
        return c;
    }

    /// Channel width of the encoder output map (4x4 spatial).
    std::size_t encoder_out_channels() const {
        return variant == Variant::noblocks ? onebyone_filters : dimred2_out;
    }

    void validate() const {
        if (variant == Variant::noblocks) return;
        if (skip1_out != onebyone_filters)
            throw std::invalid_argument("SkidConfig: skip1 output (" + std::to_string(skip1_out) +
                                        ") must equal its input channels (" +
                                        std::to_string(onebyone_filters) + ")");
        if (dimred1_out % 2 != 0)
            throw std::invalid_argument("SkidConfig: dimred1 output must be even (two branches)");
        if (skip2_out != dimred1_out)
            throw std::invalid_argument("SkidConfig: skip2 output (" + std::to_string(skip2_out) +
                                        ") must equal its input channels (" +
                                        std::to_string(dimred1_out) + ")");
        if (dimred2_out % 2 != 0)
            throw std::invalid_argument("SkidConfig: dimred2 output must be even (two branches)");
    }

    std::string variant_name() const {
        switch (variant) {
            case Variant::v1: return "v1";
            case Variant::v2: return "v2";
            case Variant::v3: return "v3";
            default: return "noblocks";
        }
    }
};

inline void to_json(nlohmann::json& j, const SkidConfig& c) {
    j = {{"variant", c.variant_name()},
         {"branch_block_filters", c.branch_block_filters},
         {"onebyone_filters", c.onebyone_filters},
         {"skip1_first", c.skip1_first},
         {"skip1_out", c.skip1_out},
         {"dimred1_out", c.dimred1_out},
         {"skip2_first", c.skip2_first},
         {"skip2_out", c.skip2_out},
         {"dimred2_out", c.dimred2_out},
         {"skip_scale", c.skip_scale},
         {"n_classes", c.n_classes}};
}

inline void from_json(const nlohmann::json& j, SkidConfig& c) {
    const std::string v = j.at("variant");
    c.variant = v == "v1"         ? SkidConfig::Variant::v1
                : v == "v2"       ? SkidConfig::Variant::v2
                : v == "v3"       ? SkidConfig::Variant::v3
                : v == "noblocks" ? SkidConfig::Variant::noblocks
                                  : throw std::invalid_argument("SkidConfig: bad variant " + v);
    j.at("branch_block_filters").get_to(c.branch_block_filters);
    j.at("onebyone_filters").get_to(c.onebyone_filters);
    j.at("skip1_first").get_to(c.skip1_first);
    j.at("skip1_out").get_to(c.skip1_out);
    j.at("dimred1_out").get_to(c.dimred1_out);
    j.at("skip2_first").get_to(c.skip2_first);
    j.at("skip2_out").get_to(c.skip2_out);
    j.at("dimred2_out").get_to(c.dimred2_out);
    j.at("skip_scale").get_to(c.skip_scale);
    j.at("n_classes").get_to(c.n_classes);
}

/// Residual unit: y = x + scale * Conv3x3(Conv3x3(x)). First conv carries
/// ReLU, the second is linear; the sum is not re-activated, so a zero scale
/// or zeroed weights pass the input through untouched.
class SkipBlock : public nn::Layer {
public:
    SkipBlock(std::string name, std::size_t channels, std::size_t first_filters, Scalar scale)
        : scale_(scale),
          conv1_(name + ".conv1", channels, first_filters, 3, 1, true),
          conv2_(name + ".conv2", first_filters, channels, 3, 1, false) {}

    std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
        return in;
    }

    void collect_params(std::vector<nn::Param*>& out) override {
        conv1_.collect_params(out);
        conv2_.collect_params(out);
    }
    void init(Rng& rng) override {
        conv1_.init(rng);
        conv2_.init(rng);
    }

    Tensor forward(const Tensor& x) override {
        Tensor r = conv2_.forward(conv1_.forward(x));
        Tensor y = x;
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += scale_ * r[i];
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        Tensor gr = gy;
        for (std::size_t i = 0; i < gr.size(); ++i) gr[i] *= scale_;
        Tensor gx = conv1_.backward(conv2_.backward(gr));
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
        return gx;
    }

private:
    Scalar scale_;
    nn::Conv2d conv1_, conv2_;
};

/// Two-branch downsampler. Upper: Conv3x3 stride 1 then Conv3x3 stride 2;
/// lower: AvgPool2x2 then Conv1x1. Each branch produces out_channels/2
/// filters and the concatenation halves the spatial dims.
class DimRedBlock : public nn::Layer {
public:
    DimRedBlock(std::string name, std::size_t in_channels, std::size_t out_channels)
        : cin_(in_channels), cout_(out_channels),
          upper1_(name + ".upper1", in_channels, out_channels / 2, 3, 1, true),
          upper2_(name + ".upper2", out_channels / 2, out_channels / 2, 3, 2, true),
          lower_(name + ".lower", in_channels, out_channels / 2, 1, 1, true) {
        if (out_channels % 2 != 0)
            throw std::invalid_argument(name + ": output channels must be even, got " +
                                        std::to_string(out_channels));
    }

    std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
        return {in[0], cout_, in[2] / 2, in[3] / 2};
    }

    void collect_params(std::vector<nn::Param*>& out) override {
        upper1_.collect_params(out);
        upper2_.collect_params(out);
        lower_.collect_params(out);
    }
    void init(Rng& rng) override {
        upper1_.init(rng);
        upper2_.init(rng);
        lower_.init(rng);
    }

    Tensor forward(const Tensor& x) override {
        if (x.dim(2) % 2 || x.dim(3) % 2)
            throw std::invalid_argument("DimRedBlock: odd spatial dims " + shape_str(x.shape()));
        Tensor up = upper2_.forward(upper1_.forward(x));
        Tensor lo = lower_.forward(pool_.forward(x));
        // concat along channels
        const std::size_t n = up.dim(0), cb = cout_ / 2, hw = up.dim(2) * up.dim(3);
        Tensor y({n, cout_, up.dim(2), up.dim(3)});
        for (std::size_t s = 0; s < n; ++s) {
            std::copy(up.data() + s * cb * hw, up.data() + (s + 1) * cb * hw,
                      y.data() + s * cout_ * hw);
            std::copy(lo.data() + s * cb * hw, lo.data() + (s + 1) * cb * hw,
                      y.data() + s * cout_ * hw + cb * hw);
        }
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        const std::size_t n = gy.dim(0), cb = cout_ / 2, hw = gy.dim(2) * gy.dim(3);
        Tensor gup({n, cb, gy.dim(2), gy.dim(3)});
        Tensor glo({n, cb, gy.dim(2), gy.dim(3)});
        for (std::size_t s = 0; s < n; ++s) {
            std::copy(gy.data() + s * cout_ * hw, gy.data() + s * cout_ * hw + cb * hw,
                      gup.data() + s * cb * hw);
            std::copy(gy.data() + s * cout_ * hw + cb * hw, gy.data() + (s + 1) * cout_ * hw,
                      glo.data() + s * cb * hw);
        }
        Tensor gx = upper1_.backward(upper2_.backward(gup));
        Tensor gx2 = pool_.backward(lower_.backward(glo));
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gx2[i];
        return gx;
    }

    nn::Conv2d& lower_conv() { return lower_; }

private:
    std::size_t cin_, cout_;
    nn::Conv2d upper1_, upper2_;
    nn::Conv2d lower_;
    nn::AvgPool2 pool_;
};

constexpr std::size_t kNumBranches = 9;

/// SKID encoder: 9 parallel branches of two conv blocks each, channel
/// concatenation, 1x1 projection, then Skip -> DimRed -> Skip -> DimRed.
/// The noblocks variant swaps Skip blocks for identities and DimRed blocks
/// for plain 2x2 average pooling.
///
/// Input (B, 9, 64, 64): one channel plane per patch slot; branch i reads
/// slot i. Output (B, C, 4, 4) with C = cfg.encoder_out_channels().
class SkidEncoder {
public:
    explicit SkidEncoder(const SkidConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        const std::size_t f = cfg.branch_block_filters;
        for (std::size_t b = 0; b < kNumBranches; ++b) {
            const std::string p = "branch" + std::to_string(b);
            branches_[b].conv.emplace_back(
                std::make_unique<nn::Conv2d>(p + ".block1.conv1", 1, f));
            branches_[b].conv.emplace_back(
                std::make_unique<nn::Conv2d>(p + ".block1.conv2", f, f));
            branches_[b].conv.emplace_back(
                std::make_unique<nn::Conv2d>(p + ".block2.conv1", f, f));
            branches_[b].conv.emplace_back(
                std::make_unique<nn::Conv2d>(p + ".block2.conv2", f, f));
        }
        proj_ = std::make_unique<nn::Conv2d>("proj1x1", kNumBranches * f, cfg.onebyone_filters, 1);
        if (cfg.variant != SkidConfig::Variant::noblocks) {
            skip1_ = std::make_unique<SkipBlock>("skip1", cfg.onebyone_filters, cfg.skip1_first,
                                                 cfg.skip_scale);
            dimred1_ = std::make_unique<DimRedBlock>("dimred1", cfg.onebyone_filters,
                                                     cfg.dimred1_out);
            skip2_ = std::make_unique<SkipBlock>("skip2", cfg.dimred1_out, cfg.skip2_first,
                                                 cfg.skip_scale);
            dimred2_ = std::make_unique<DimRedBlock>("dimred2", cfg.dimred1_out, cfg.dimred2_out);
        }
    }

    const SkidConfig& config() const { return cfg_; }

    void collect_params(std::vector<nn::Param*>& out) {
        for (auto& br : branches_)
            for (auto& c : br.conv) c->collect_params(out);
        proj_->collect_params(out);
        if (skip1_) {
            skip1_->collect_params(out);
            dimred1_->collect_params(out);
            skip2_->collect_params(out);
            dimred2_->collect_params(out);
        }
    }

    void init(Rng& rng) {
        std::vector<nn::Param*> ps;
        collect_params(ps);
        // branch weights are independent (unshared); one RNG stream in
        // collection order keeps initialization deterministic
        for (auto& br : branches_)
            for (auto& c : br.conv) c->init(rng);
        proj_->init(rng);
        if (skip1_) {
            skip1_->init(rng);
            dimred1_->init(rng);
            skip2_->init(rng);
            dimred2_->init(rng);
        }
    }

    std::size_t param_count() {
        std::vector<nn::Param*> ps;
        collect_params(ps);
        std::size_t n = 0;
        for (auto* p : ps) n += p->count();
        return n;
    }

    /// Symbolic shape probe: the sequence of trunk shapes (C,H,W) from the
    /// branch concatenation to the encoder output, for a single sample.
    std::vector<std::vector<std::size_t>> shape_ladder() const {
        const std::size_t f = cfg_.branch_block_filters;
        std::vector<std::vector<std::size_t>> ladder;
        std::vector<std::size_t> s = {1, kNumBranches * f, 16, 16};
        ladder.push_back({s[2], s[3], s[1]});
        auto push = [&](const nn::Layer& l) {
            s = l.out_shape(s);
            ladder.push_back({s[2], s[3], s[1]});
        };
        push(*proj_);
        if (skip1_) {
            push(*skip1_);
            push(*dimred1_);
            push(*skip2_);
            push(*dimred2_);
        } else {
            nn::AvgPool2 pool;
            push(pool);  // skip1 is identity
            push(pool);
        }
        return ladder;
    }

    Tensor forward(const Tensor& x) {
        if (x.rank() != 4 || x.dim(1) != kNumBranches)
            throw std::invalid_argument("SkidEncoder: expected (B,9,H,W), got " +
                                        shape_str(x.shape()));
        const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
        Tensor concat;
        for (std::size_t b = 0; b < kNumBranches; ++b) {
            Tensor t({n, 1, h, w});
            for (std::size_t s = 0; s < n; ++s)
                std::copy(x.data() + (s * kNumBranches + b) * h * w,
                          x.data() + (s * kNumBranches + b + 1) * h * w,
                          t.data() + s * h * w);
            t = branches_[b].conv[0]->forward(t);
            t = branches_[b].conv[1]->forward(t);
            t = branches_[b].pool1.forward(t);
            t = branches_[b].conv[2]->forward(t);
            t = branches_[b].conv[3]->forward(t);
            t = branches_[b].pool2.forward(t);
            if (b == 0) {
                concat = Tensor({n, kNumBranches * t.dim(1), t.dim(2), t.dim(3)});
                branch_out_shape_ = t.shape();
            }
            const std::size_t chw = t.dim(1) * t.dim(2) * t.dim(3);
            for (std::size_t s = 0; s < n; ++s)
                std::copy(t.data() + s * chw, t.data() + (s + 1) * chw,
                          concat.data() + (s * kNumBranches + b) * chw);
        }
        Tensor y = proj_->forward(concat);
        if (skip1_) {
            y = skip1_->forward(y);
            y = dimred1_->forward(y);
            y = skip2_->forward(y);
            y = dimred2_->forward(y);
        } else {
            y = nb_pool1_.forward(y);
            y = nb_pool2_.forward(y);
        }
        in_shape_ = x.shape();
        return y;
    }

    Tensor backward(const Tensor& gy) {
        Tensor g = gy;
        if (skip1_) {
            g = dimred2_->backward(g);
            g = skip2_->backward(g);
            g = dimred1_->backward(g);
            g = skip1_->backward(g);
        } else {
            g = nb_pool2_.backward(g);
            g = nb_pool1_.backward(g);
        }
        g = proj_->backward(g);

        const std::size_t n = in_shape_[0], h = in_shape_[2], w = in_shape_[3];
        const std::size_t chw = branch_out_shape_[1] * branch_out_shape_[2] * branch_out_shape_[3];
        Tensor gx(in_shape_);
        for (std::size_t b = 0; b < kNumBranches; ++b) {
            Tensor gb({n, branch_out_shape_[1], branch_out_shape_[2], branch_out_shape_[3]});
            for (std::size_t s = 0; s < n; ++s)
                std::copy(g.data() + (s * kNumBranches + b) * chw,
                          g.data() + (s * kNumBranches + b + 1) * chw, gb.data() + s * chw);
            Tensor t = branches_[b].pool2.backward(gb);
            t = branches_[b].conv[3]->backward(t);
            t = branches_[b].conv[2]->backward(t);
            t = branches_[b].pool1.backward(t);
            t = branches_[b].conv[1]->backward(t);
            t = branches_[b].conv[0]->backward(t);
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t i = 0; i < h * w; ++i)
                    gx[(s * kNumBranches + b) * h * w + i] = t[s * h * w + i];
        }
        return gx;
    }

    DimRedBlock* dimred2() { return dimred2_.get(); }

private:
    struct Branch {
        std::vector<std::unique_ptr<nn::Conv2d>> conv;
        nn::MaxPool2 pool1, pool2;
    };

    SkidConfig cfg_;
    std::array<Branch, kNumBranches> branches_;
    std::unique_ptr<nn::Conv2d> proj_;
    std::unique_ptr<SkipBlock> skip1_, skip2_;
    std::unique_ptr<DimRedBlock> dimred1_, dimred2_;
    nn::AvgPool2 nb_pool1_, nb_pool2_;  // noblocks replacements
    std::vector<std::size_t> in_shape_, branch_out_shape_;
};

/// Pretext classifier: encoder -> GAP -> FC(1024) -> FC(n_classes).
/// The same structure with n_classes = 54 serves the geometric-
/// transformation baseline.
class PretextModel {
public:
    explicit PretextModel(const SkidConfig& cfg, std::size_t fc_width = 1024)
        : encoder_(cfg),
          fc1_("fc1", cfg.encoder_out_channels(), fc_width, true),
          fc2_("fc2", fc_width, cfg.n_classes, false) {}

    SkidEncoder& encoder() { return encoder_; }

    void collect_params(std::vector<nn::Param*>& out) {
        encoder_.collect_params(out);
        fc1_.collect_params(out);
        fc2_.collect_params(out);
    }
    std::vector<nn::Param*> params() {
        std::vector<nn::Param*> ps;
        collect_params(ps);
        return ps;
    }
    void init(Rng& rng) {
        encoder_.init(rng);
        fc1_.init(rng);
        fc2_.init(rng);
    }
    std::size_t param_count() {
        std::vector<nn::Param*> ps;
        collect_params(ps);
        std::size_t n = 0;
        for (auto* p : ps) n += p->count();
        return n;
    }

    /// patches (B,9,64,64) -> logits (B,n_classes)
    Tensor forward(const Tensor& patches) {
        enc_out_ = encoder_.forward(patches);
        return fc2_.forward(fc1_.forward(gap_.forward(enc_out_)));
    }

    const Tensor& encoder_activation() const { return enc_out_; }

    /// Backward through the head only; returns the gradient at the encoder
    /// output map (the Grad-CAM capture point).
    Tensor backward_head(const Tensor& grad_logits) {
        return gap_.backward(fc1_.backward(fc2_.backward(grad_logits)));
    }

    Tensor backward(const Tensor& grad_logits) {
        return encoder_.backward(backward_head(grad_logits));
    }

private:
    SkidEncoder encoder_;
    nn::GlobalAvgPool gap_;
    nn::Dense fc1_, fc2_;
    Tensor enc_out_;
};

struct DownstreamConfig {
    enum class Head { convlstm, cnn3d };
    Head head = Head::convlstm;
    std::size_t convlstm_channels = 512;
    std::size_t convlstm_layers = 2;  // fixed at 2 in this build
    std::size_t convlstm_kernel = 3;
    std::size_t n_labels = 3;
    bool encoder_frozen = true;
};

inline void to_json(nlohmann::json& j, const DownstreamConfig& c) {
    j = {{"head", c.head == DownstreamConfig::Head::convlstm ? "convlstm" : "cnn3d"},
         {"convlstm_channels", c.convlstm_channels},
         {"convlstm_layers", c.convlstm_layers},
         {"convlstm_kernel", c.convlstm_kernel},
         {"n_labels", c.n_labels},
         {"encoder_frozen", c.encoder_frozen}};
}

inline void from_json(const nlohmann::json& j, DownstreamConfig& c) {
    const std::string h = j.at("head");
    c.head = h == "convlstm" ? DownstreamConfig::Head::convlstm : DownstreamConfig::Head::cnn3d;
    j.at("convlstm_channels").get_to(c.convlstm_channels);
    j.at("convlstm_layers").get_to(c.convlstm_layers);
    j.at("convlstm_kernel").get_to(c.convlstm_kernel);
    j.at("n_labels").get_to(c.n_labels);
    j.at("encoder_frozen").get_to(c.encoder_frozen);
}

/// Downstream classifier over a clip. Per frame the (frozen) encoder maps
/// 9 canonical patches to a (C,4,4) feature map; the T maps run through two
/// ConvLSTM layers (or two 3D convolutions), GAP over the final state, and
/// a sigmoid FC head with one output per label.
class DownstreamModel {
public:
    DownstreamModel(const SkidConfig& enc_cfg, const DownstreamConfig& cfg)
        : enc_cfg_(enc_cfg), cfg_(cfg), encoder_(enc_cfg) {
        const std::size_t c = enc_cfg.encoder_out_channels();
        if (cfg.head == DownstreamConfig::Head::convlstm) {
            lstm1_ = std::make_unique<nn::ConvLSTM>("convlstm1", c, cfg.convlstm_channels,
                                                    cfg.convlstm_kernel);
            lstm2_ = std::make_unique<nn::ConvLSTM>("convlstm2", cfg.convlstm_channels,
                                                    cfg.convlstm_channels, cfg.convlstm_kernel);
        } else {
            conv3d1_ = std::make_unique<nn::Conv3d>("conv3d1", c, cfg.convlstm_channels);
            conv3d2_ = std::make_unique<nn::Conv3d>("conv3d2", cfg.convlstm_channels,
                                                    cfg.convlstm_channels);
        }
        fc_ = std::make_unique<nn::Dense>("fc_out", cfg.convlstm_channels, cfg.n_labels, false);
    }

    SkidEncoder& encoder() { return encoder_; }
    const DownstreamConfig& config() const { return cfg_; }

    void collect_head_params(std::vector<nn::Param*>& out) {
        if (lstm1_) {
            lstm1_->collect_params(out);
            lstm2_->collect_params(out);
        } else {
            conv3d1_->collect_params(out);
            conv3d2_->collect_params(out);
        }
        fc_->collect_params(out);
    }

    void collect_params(std::vector<nn::Param*>& out) {
        encoder_.collect_params(out);
        collect_head_params(out);
    }

    /// Parameters the optimizer may touch: excludes the encoder when frozen.
    std::vector<nn::Param*> trainable_params() {
        std::vector<nn::Param*> ps;
        if (!cfg_.encoder_frozen) encoder_.collect_params(ps);
        collect_head_params(ps);
        return ps;
    }

    void init(Rng& rng) {
        encoder_.init(rng);
        init_head(rng);
    }
    void init_head(Rng& rng) {
        if (lstm1_) {
            lstm1_->init(rng);
            lstm2_->init(rng);
        } else {
            conv3d1_->init(rng);
            conv3d2_->init(rng);
        }
        fc_->init(rng);
    }

    std::size_t trainable_param_count() {
        auto ps = trainable_params();
        std::size_t n = 0;
        for (auto* p : ps) n += p->count();
        return n;
    }

    /// frames_as_patches: (T, 9, 64, 64) -> logits (1, n_labels)
    Tensor forward(const Tensor& frames_as_patches) {
        enc_out_ = encoder_.forward(frames_as_patches);  // (T, C, 4, 4)
        const std::size_t T = enc_out_.dim(0);
        Tensor feat;
        if (lstm1_) {
            Tensor h = lstm2_->forward(lstm1_->forward(enc_out_));
            // GAP over the final hidden state
            last_state_ = Tensor({1, h.dim(1), h.dim(2), h.dim(3)});
            const std::size_t chw = h.dim(1) * h.dim(2) * h.dim(3);
            std::copy(h.data() + (T - 1) * chw, h.data() + T * chw, last_state_.data());
            head_seq_shape_ = h.shape();
            feat = gap_.forward(last_state_);  // (1, channels)
        } else {
            Tensor h = conv3d2_->forward(conv3d1_->forward(enc_out_));
            head_seq_shape_ = h.shape();
            // GAP over time and space
            const std::size_t C = h.dim(1), hw = h.dim(2) * h.dim(3);
            feat = Tensor({1, C});
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < hw; ++i)
                        feat[c] += h[(t * C + c) * hw + i];
            for (std::size_t c = 0; c < C; ++c) feat[c] /= static_cast<Scalar>(T * hw);
        }
        return fc_->forward(feat);
    }

    static std::vector<Scalar> probabilities(const Tensor& logits) {
        std::vector<Scalar> p(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) p[i] = nn::sigmoid(logits[i]);
        return p;
    }

    const Tensor& encoder_activation() const { return enc_out_; }

    /// Backward through the head only; returns per-frame gradients at the
    /// encoder output (T, C, 4, 4).
    Tensor backward_head(const Tensor& grad_logits) {
        Tensor gfeat = fc_->backward(grad_logits);  // (1, channels)
        if (lstm1_) {
            Tensor glast = gap_.backward(gfeat);  // (1,C,H,W)
            Tensor gseq(head_seq_shape_);
            const std::size_t T = head_seq_shape_[0];
            const std::size_t chw = head_seq_shape_[1] * head_seq_shape_[2] * head_seq_shape_[3];
            std::copy(glast.data(), glast.data() + chw, gseq.data() + (T - 1) * chw);
            return lstm1_->backward(lstm2_->backward(gseq));
        }
        const std::size_t T = head_seq_shape_[0], C = head_seq_shape_[1];
        const std::size_t hw = head_seq_shape_[2] * head_seq_shape_[3];
        Tensor gseq(head_seq_shape_);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < hw; ++i)
                    gseq[(t * C + c) * hw + i] = gfeat[c] / static_cast<Scalar>(T * hw);
        return conv3d1_->backward(conv3d2_->backward(gseq));
    }

    /// Full backward; encoder gradients are skipped when frozen.
    void backward(const Tensor& grad_logits) {
        Tensor genc = backward_head(grad_logits);
        if (!cfg_.encoder_frozen) encoder_.backward(genc);
    }

private:
    SkidConfig enc_cfg_;
    DownstreamConfig cfg_;
    SkidEncoder encoder_;
    std::unique_ptr<nn::ConvLSTM> lstm1_, lstm2_;
    std::unique_ptr<nn::Conv3d> conv3d1_, conv3d2_;
    std::unique_ptr<nn::Dense> fc_;
    nn::GlobalAvgPool gap_;
    Tensor enc_out_, last_state_;
    std::vector<std::size_t> head_seq_shape_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, JSON config echo, then named raw Scalar arrays.
// Round-trips are bit-exact.

namespace ckpt {

constexpr char kMagic[8] = {'S', 'K', 'I', 'D', 'C', 'K', 'P', '1'};

inline void save(const std::string& path, const std::string& config_json,
                 const std::vector<nn::Param*>& params) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("checkpoint save: cannot open " + tmp);
        out.write(kMagic, 8);
        const std::uint64_t jlen = config_json.size();
        out.write(reinterpret_cast<const char*>(&jlen), 8);
        out.write(config_json.data(), static_cast<std::streamsize>(jlen));
        const std::uint64_t n = params.size();
        out.write(reinterpret_cast<const char*>(&n), 8);
        for (const auto* p : params) {
            if (!p->allocated())
                throw std::logic_error("checkpoint save: " + p->name + " not initialized");
            const std::uint64_t nlen = p->name.size();
            out.write(reinterpret_cast<const char*>(&nlen), 8);
            out.write(p->name.data(), static_cast<std::streamsize>(nlen));
            const std::uint64_t cnt = p->value.size();
            out.write(reinterpret_cast<const char*>(&cnt), 8);
            out.write(reinterpret_cast<const char*>(p->value.data()),
                      static_cast<std::streamsize>(cnt * sizeof(Scalar)));
        }
        if (!out) throw std::runtime_error("checkpoint save: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("checkpoint save: rename to " + path + " failed");
}

/// Reads just the config JSON echo from a checkpoint header.
inline std::string read_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint read_config: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kMagic))
        throw std::runtime_error("checkpoint read_config: bad magic in " + path);
    std::uint64_t jlen = 0;
    in.read(reinterpret_cast<char*>(&jlen), 8);
    std::string config_json(jlen, '\0');
    in.read(config_json.data(), static_cast<std::streamsize>(jlen));
    if (!in) throw std::runtime_error("checkpoint read_config: truncated header in " + path);
    return config_json;
}

/// Loads parameter arrays into `params` (matched by name; every param must be
/// present with the right element count). Returns the config JSON echo.
inline std::string load(const std::string& path, const std::vector<nn::Param*>& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint load: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kMagic))
        throw std::runtime_error("checkpoint load: bad magic in " + path);
    std::uint64_t jlen = 0;
    in.read(reinterpret_cast<char*>(&jlen), 8);
    std::string config_json(jlen, '\0');
    in.read(config_json.data(), static_cast<std::streamsize>(jlen));
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    if (!in) throw std::runtime_error("checkpoint load: truncated header in " + path);

    std::map<std::string, std::vector<Scalar>> arrays;
    for (std::uint64_t i = 0; i < n; ++i) {
        std::uint64_t nlen = 0;
        in.read(reinterpret_cast<char*>(&nlen), 8);
        std::string name(nlen, '\0');
        in.read(name.data(), static_cast<std::streamsize>(nlen));
        std::uint64_t cnt = 0;
        in.read(reinterpret_cast<char*>(&cnt), 8);
        std::vector<Scalar> v(cnt);
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(cnt * sizeof(Scalar)));
        if (!in) throw std::runtime_error("checkpoint load: truncated array " + name);
        arrays.emplace(std::move(name), std::move(v));
    }
    for (auto* p : params) {
        auto it = arrays.find(p->name);
        if (it == arrays.end())
            throw std::runtime_error("checkpoint load: missing parameter " + p->name);
        if (it->second.size() != p->count())
            throw std::runtime_error("checkpoint load: size mismatch for " + p->name);
        p->value = Tensor(p->shape);
        p->grad = Tensor(p->shape);
        std::copy(it->second.begin(), it->second.end(), p->value.data());
    }
    return config_json;
}

}  // namespace ckpt

}  // namespace skid
