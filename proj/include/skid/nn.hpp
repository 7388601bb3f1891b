#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "skid/core.hpp"

namespace skid::nn {

using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

/// Named trainable array. Shapes are fixed at construction; the storage is
/// allocated by init() so that architecture audits never materialize weights.
struct Param {
    std::string name;
    std::vector<std::size_t> shape;
    Tensor value;
    Tensor grad;

    std::size_t count() const {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }
    bool allocated() const { return !value.empty(); }

    void init_uniform(Rng& rng, std::size_t fan_in) {
        value = Tensor(shape);
        grad = Tensor(shape);
        const Scalar bound = std::sqrt(Scalar{6} / static_cast<Scalar>(std::max<std::size_t>(fan_in, 1)));
        for (std::size_t i = 0; i < value.size(); ++i) value[i] = rng.uniform_real(-bound, bound);
    }
    void init_zero() {
        value = Tensor(shape);
        grad = Tensor(shape);
    }
    void zero_grad() { grad.fill(0); }
};

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(const Tensor& x) = 0;
    virtual Tensor backward(const Tensor& gy) = 0;
    virtual std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const = 0;
    virtual void collect_params(std::vector<Param*>&) {}
    virtual void init(Rng&) {}

    std::size_t param_count() {
        std::vector<Param*> ps;
        collect_params(ps);
        std::size_t n = 0;
        for (auto* p : ps) n += p->count();
        return n;
    }
};

namespace detail {

// TF-style "same" padding split for a given axis
inline void same_pad(std::size_t in, std::size_t k, std::size_t stride, std::size_t& out,
                     std::size_t& pad_lo) {
    out = (in + stride - 1) / stride;
    const std::ptrdiff_t total =
        std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>((out - 1) * stride + k - in));
    pad_lo = static_cast<std::size_t>(total / 2);
}

}  // namespace detail

/// 2D convolution, input (N,Cin,H,W) -> (N,Cout,Ho,Wo), "same" padding.
/// im2col + GEMM; the column matrix is rebuilt in backward to bound memory.
class Conv2d : public Layer {
public:
    Conv2d(std::string name, std::size_t cin, std::size_t cout, std::size_t k = 3,
           std::size_t stride = 1, bool relu = true)
        : cin_(cin), cout_(cout), k_(k), stride_(stride), relu_(relu) {
        w_.name = name + ".w";
        w_.shape = {cout, cin * k * k};
        b_.name = name + ".b";
        b_.shape = {cout};
    }

    std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
        std::size_t ho, wo, p;
        detail::same_pad(in[2], k_, stride_, ho, p);
        detail::same_pad(in[3], k_, stride_, wo, p);
        return {in[0], cout_, ho, wo};
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&w_);
        out.push_back(&b_);
    }

    void init(Rng& rng) override {
        w_.init_uniform(rng, cin_ * k_ * k_);
        b_.init_zero();
    }

    Tensor forward(const Tensor& x) override {
        if (!w_.allocated()) throw std::logic_error(w_.name + ": forward before init");
        if (x.dim(1) != cin_)
            throw std::invalid_argument(w_.name + ": expected " + std::to_string(cin_) +
                                        " input channels, got " + std::to_string(x.dim(1)));
        x_ = x;
        const auto os = out_shape(x.shape());
        const std::size_t n = x.dim(0), ho = os[2], wo = os[3];
        Tensor y(os);
        Tensor col = make_col_buffer(x.dim(2), x.dim(3));
        CMapM W(w_.value.data(), static_cast<Eigen::Index>(cout_),
                static_cast<Eigen::Index>(cin_ * k_ * k_));
        for (std::size_t s = 0; s < n; ++s) {
            im2col(x, s, col);
            CMapM C(col.data(), static_cast<Eigen::Index>(cin_ * k_ * k_),
                    static_cast<Eigen::Index>(ho * wo));
            MapM Y(y.data() + s * cout_ * ho * wo, static_cast<Eigen::Index>(cout_),
                   static_cast<Eigen::Index>(ho * wo));
            Y.noalias() = W * C;
            for (std::size_t c = 0; c < cout_; ++c) Y.row(static_cast<Eigen::Index>(c)).array() += b_.value[c];
        }
        if (relu_)
            for (std::size_t i = 0; i < y.size(); ++i)
                if (y[i] < 0) y[i] = 0;
        y_ = y;
        return y;
    }

    Tensor backward(const Tensor& gy_in) override {
        Tensor gy = gy_in;
        if (relu_)
            for (std::size_t i = 0; i < gy.size(); ++i)
                if (y_[i] <= 0) gy[i] = 0;
        const std::size_t n = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
        const std::size_t ho = gy.dim(2), wo = gy.dim(3);
        Tensor gx(x_.shape());
        Tensor col = make_col_buffer(h, w);
        Tensor gcol({cin_ * k_ * k_, ho * wo});
        CMapM W(w_.value.data(), static_cast<Eigen::Index>(cout_),
                static_cast<Eigen::Index>(cin_ * k_ * k_));
        MapM GW(w_.grad.data(), static_cast<Eigen::Index>(cout_),
                static_cast<Eigen::Index>(cin_ * k_ * k_));
        for (std::size_t s = 0; s < n; ++s) {
            im2col(x_, s, col);
            CMapM C(col.data(), static_cast<Eigen::Index>(cin_ * k_ * k_),
                    static_cast<Eigen::Index>(ho * wo));
            CMapM GY(gy.data() + s * cout_ * ho * wo, static_cast<Eigen::Index>(cout_),
                     static_cast<Eigen::Index>(ho * wo));
            GW.noalias() += GY * C.transpose();
            for (std::size_t c = 0; c < cout_; ++c)
                b_.grad[c] += GY.row(static_cast<Eigen::Index>(c)).sum();
            MapM GC(gcol.data(), static_cast<Eigen::Index>(cin_ * k_ * k_),
                    static_cast<Eigen::Index>(ho * wo));
            GC.noalias() = W.transpose() * GY;
            col2im(gcol, gx, s, ho, wo);
        }
        return gx;
    }

private:
    Tensor make_col_buffer(std::size_t h, std::size_t w) const {
        std::size_t ho, wo, p;
        detail::same_pad(h, k_, stride_, ho, p);
        detail::same_pad(w, k_, stride_, wo, p);
        return Tensor({cin_ * k_ * k_, ho * wo});
    }

    void im2col(const Tensor& x, std::size_t s, Tensor& col) const {
        const std::size_t h = x.dim(2), w = x.dim(3);
        std::size_t ho, wo, ph, pw;
        detail::same_pad(h, k_, stride_, ho, ph);
        detail::same_pad(w, k_, stride_, wo, pw);
        const Scalar* xp = x.data() + s * cin_ * h * w;
        Scalar* cp = col.data();
        for (std::size_t c = 0; c < cin_; ++c)
            for (std::size_t ky = 0; ky < k_; ++ky)
                for (std::size_t kx = 0; kx < k_; ++kx) {
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) -
                                                  static_cast<std::ptrdiff_t>(ph);
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride_ + kx) -
                                static_cast<std::ptrdiff_t>(pw);
                            *cp++ = (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix < 0 ||
                                     ix >= static_cast<std::ptrdiff_t>(w))
                                        ? Scalar{0}
                                        : xp[c * h * w + static_cast<std::size_t>(iy) * w +
                                             static_cast<std::size_t>(ix)];
                        }
                    }
                }
    }

    void col2im(const Tensor& gcol, Tensor& gx, std::size_t s, std::size_t ho,
                std::size_t wo) const {
        const std::size_t h = gx.dim(2), w = gx.dim(3);
        std::size_t tmp, ph, pw;
        detail::same_pad(h, k_, stride_, tmp, ph);
        detail::same_pad(w, k_, stride_, tmp, pw);
        Scalar* xp = gx.data() + s * cin_ * h * w;
        const Scalar* cp = gcol.data();
        for (std::size_t c = 0; c < cin_; ++c)
            for (std::size_t ky = 0; ky < k_; ++ky)
                for (std::size_t kx = 0; kx < k_; ++kx)
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride_ + ky) -
                                                  static_cast<std::ptrdiff_t>(ph);
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride_ + kx) -
                                static_cast<std::ptrdiff_t>(pw);
                            const Scalar g = *cp++;
                            if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                                ix < static_cast<std::ptrdiff_t>(w))
                                xp[c * h * w + static_cast<std::size_t>(iy) * w +
                                   static_cast<std::size_t>(ix)] += g;
                        }
                    }
    }

    std::size_t cin_, cout_, k_, stride_;
    bool relu_;
    Param w_, b_;
    Tensor x_, y_;
};

/// 2x2 max pooling, stride 2. Requires even spatial dims.
class MaxPool2 : public Layer {
public:
    std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
        return {in[0], in[1], in[2] / 2, in[3] / 2};
    }

    Tensor forward(const Tensor& x) override {
        if (x.dim(2) % 2 || x.dim(3) % 2)
            throw std::invalid_argument("MaxPool2: odd spatial dims " + shape_str(x.shape()));
        in_shape_ = x.shape();
        const auto os = out_shape(x.shape());
        Tensor y(os);
        argmax_.assign(y.size(), 0);
        const std::size_t h = x.dim(2), w = x.dim(3), nc = x.dim(0) * x.dim(1);
        for (std::size_t m = 0; m < nc; ++m) {
            const Scalar* xp = x.data() + m * h * w;
            Scalar* yp = y.data() + m * (h / 2) * (w / 2);
            for (std::size_t oy = 0; oy < h / 2; ++oy)
                for (std::size_t ox = 0; ox < w / 2; ++ox) {
                    std::size_t best = (2 * oy) * w + 2 * ox;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t idx = (2 * oy + dy) * w + (2 * ox + dx);
                            if (xp[idx] > xp[best]) best = idx;
                        }
                    yp[oy * (w / 2) + ox] = xp[best];
                    argmax_[m * (h / 2) * (w / 2) + oy * (w / 2) + ox] = m * h * w + best;
                }
        }
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        Tensor gx(in_shape_);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax_[i]] += gy[i];
        return gx;
    }

private:
    std::vector<std::size_t> in_shape_;
    std::vector<std::size_t> argmax_;
};

/// 2x2 average pooling, stride 2.
class AvgPool2 : public Layer {
public:
    std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
        return {in[0], in[1], in[2] / 2, in[3] / 2};
    }

    Tensor forward(const Tensor& x) override {
        if (x.dim(2) % 2 || x.dim(3) % 2)
            throw std::invalid_argument("AvgPool2: odd spatial dims " + shape_str(x.shape()));
        in_shape_ = x.shape();
        Tensor y(out_shape(x.shape()));
        const std::size_t h = x.dim(2), w = x.dim(3), nc = x.dim(0) * x.dim(1);
        for (std::size_t m = 0; m < nc; ++m) {
            const Scalar* xp = x.data() + m * h * w;
            Scalar* yp = y.data() + m * (h / 2) * (w / 2);
            for (std::size_t oy = 0; oy < h / 2; ++oy)
                for (std::size_t ox = 0; ox < w / 2; ++ox)
                    yp[oy * (w / 2) + ox] =
                        (xp[(2 * oy) * w + 2 * ox] + xp[(2 * oy) * w + 2 * ox + 1] +
                         xp[(2 * oy + 1) * w + 2 * ox] + xp[(2 * oy + 1) * w + 2 * ox + 1]) /
                        4;
        }
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        Tensor gx(in_shape_);
        const std::size_t h = in_shape_[2], w = in_shape_[3], nc = in_shape_[0] * in_shape_[1];
        for (std::size_t m = 0; m < nc; ++m) {
            Scalar* xp = gx.data() + m * h * w;
            const Scalar* yp = gy.data() + m * (h / 2) * (w / 2);
            for (std::size_t oy = 0; oy < h / 2; ++oy)
                for (std::size_t ox = 0; ox < w / 2; ++ox) {
                    const Scalar g = yp[oy * (w / 2) + ox] / 4;
                    xp[(2 * oy) * w + 2 * ox] += g;
                    xp[(2 * oy) * w + 2 * ox + 1] += g;
                    xp[(2 * oy + 1) * w + 2 * ox] += g;
                    xp[(2 * oy + 1) * w + 2 * ox + 1] += g;
                }
        }
        return gx;
    }

private:
    std::vector<std::size_t> in_shape_;
};

/// Global average pool over spatial dims: (N,C,H,W) -> (N,C).
class GlobalAvgPool : public Layer {
public:
    std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
        return {in[0], in[1]};
    }

    Tensor forward(const Tensor& x) override {
        in_shape_ = x.shape();
        Tensor y({x.dim(0), x.dim(1)});
        const std::size_t hw = x.dim(2) * x.dim(3);
        for (std::size_t m = 0; m < y.size(); ++m) {
            Scalar s = 0;
            const Scalar* xp = x.data() + m * hw;
            for (std::size_t i = 0; i < hw; ++i) s += xp[i];
            y[m] = s / static_cast<Scalar>(hw);
        }
        return y;
    }

    Tensor backward(const Tensor& gy) override {
        Tensor gx(in_shape_);
        const std::size_t hw = in_shape_[2] * in_shape_[3];
        for (std::size_t m = 0; m < gy.size(); ++m) {
            const Scalar g = gy[m] / static_cast<Scalar>(hw);
            Scalar* xp = gx.data() + m * hw;
            for (std::size_t i = 0; i < hw; ++i) xp[i] += g;
        }
        return gx;
    }

private:
    std::vector<std::size_t> in_shape_;
};

/// Fully connected layer, input (N,F) -> (N,O), optional ReLU.
class Dense : public Layer {
public:
    Dense(std::string name, std::size_t fin, std::size_t fout, bool relu = false)
        : fin_(fin), fout_(fout), relu_(relu) {
        w_.name = name + ".w";
        w_.shape = {fout, fin};
        b_.name = name + ".b";
        b_.shape = {fout};
    }

    std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
        return {in[0], fout_};
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&w_);
        out.push_back(&b_);
    }

    void init(Rng& rng) override {
        w_.init_uniform(rng, fin_);
        b_.init_zero();
    }

    Tensor forward(const Tensor& x) override {
        if (!w_.allocated()) throw std::logic_error(w_.name + ": forward before init");
        x_ = x;
        const std::size_t n = x.dim(0);
        Tensor y({n, fout_});
        CMapM X(x.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(fin_));
        CMapM W(w_.value.data(), static_cast<Eigen::Index>(fout_), static_cast<Eigen::Index>(fin_));
        MapM Y(y.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(fout_));
        Y.noalias() = X * W.transpose();
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t o = 0; o < fout_; ++o) y[s * fout_ + o] += b_.value[o];
        if (relu_)
            for (std::size_t i = 0; i < y.size(); ++i)
                if (y[i] < 0) y[i] = 0;
        y_ = y;
        return y;
    }

    Tensor backward(const Tensor& gy_in) override {
        Tensor gy = gy_in;
        if (relu_)
            for (std::size_t i = 0; i < gy.size(); ++i)
                if (y_[i] <= 0) gy[i] = 0;
        const std::size_t n = x_.dim(0);
        Tensor gx({n, fin_});
        CMapM X(x_.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(fin_));
        CMapM GY(gy.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(fout_));
        CMapM W(w_.value.data(), static_cast<Eigen::Index>(fout_), static_cast<Eigen::Index>(fin_));
        MapM GW(w_.grad.data(), static_cast<Eigen::Index>(fout_), static_cast<Eigen::Index>(fin_));
        MapM GX(gx.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(fin_));
        GW.noalias() += GY.transpose() * X;
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t o = 0; o < fout_; ++o) b_.grad[o] += gy[s * fout_ + o];
        GX.noalias() = GY * W;
        return gx;
    }

private:
    std::size_t fin_, fout_;
    bool relu_;
    Param w_, b_;
    Tensor x_, y_;
};

inline Scalar sigmoid(Scalar z) { return Scalar{1} / (Scalar{1} + std::exp(-z)); }

/// Convolutional LSTM over a sequence of feature maps. Input (T,Cin,H,W),
/// output hidden states (T,Ch,H,W). Gates are a single "same"-padded
/// convolution over concat(x_t, h_{t-1}) producing 4*Ch channels (i,f,o,g);
/// no peephole terms.
class ConvLSTM : public Layer {
public:
    ConvLSTM(std::string name, std::size_t cin, std::size_t ch, std::size_t k = 3)
        : cin_(cin), ch_(ch), k_(k),
          gates_(name + ".gates", cin + ch, 4 * ch, k, /*stride=*/1, /*relu=*/false) {}

    std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
        return {in[0], ch_, in[2], in[3]};
    }

    void collect_params(std::vector<Param*>& out) override { gates_.collect_params(out); }
    void init(Rng& rng) override { gates_.init(rng); }

    Tensor forward(const Tensor& x) override {
        const std::size_t T = x.dim(0), h = x.dim(2), w = x.dim(3);
        const std::size_t hw = h * w, chw = ch_ * hw;
        x_ = x;
        Tensor out({T, ch_, h, w});
        steps_.assign(T, Step{});
        Tensor h_prev({1, ch_, h, w});
        Tensor c_prev({1, ch_, h, w});
        for (std::size_t t = 0; t < T; ++t) {
            Step& st = steps_[t];
            Tensor xh({1, cin_ + ch_, h, w});
            std::copy(x.data() + t * cin_ * hw, x.data() + (t + 1) * cin_ * hw, xh.data());
            std::copy(h_prev.data(), h_prev.data() + chw, xh.data() + cin_ * hw);
            st.z = gates_.forward(xh);
            st.gate = Tensor({4 * ch_, hw});
            st.c = Tensor({chw});
            st.tanh_c = Tensor({chw});
            st.c_prev = c_prev;
            for (std::size_t j = 0; j < chw; ++j) {
                const Scalar gi = sigmoid(st.z[j]);
                const Scalar gf = sigmoid(st.z[chw + j]);
                const Scalar go = sigmoid(st.z[2 * chw + j]);
                const Scalar gg = std::tanh(st.z[3 * chw + j]);
                st.gate[j] = gi;
                st.gate[chw + j] = gf;
                st.gate[2 * chw + j] = go;
                st.gate[3 * chw + j] = gg;
                st.c[j] = gf * c_prev[j] + gi * gg;
                st.tanh_c[j] = std::tanh(st.c[j]);
                out[t * chw + j] = go * st.tanh_c[j];
            }
            std::copy(out.data() + t * chw, out.data() + (t + 1) * chw, h_prev.data());
            std::copy(st.c.data(), st.c.data() + chw, c_prev.data());
        }
        return out;
    }

    // gy: gradient on every hidden state (zeros where unused)
    Tensor backward(const Tensor& gy) override {
        const std::size_t T = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
        const std::size_t hw = h * w, chw = ch_ * hw;
        Tensor gx(x_.shape());
        std::vector<Scalar> gh(chw, 0), gc(chw, 0);
        for (std::size_t t = T; t-- > 0;) {
            Step& st = steps_[t];
            for (std::size_t j = 0; j < chw; ++j) gh[j] += gy[t * chw + j];
            Tensor gz({1, 4 * ch_, h, w});
            for (std::size_t j = 0; j < chw; ++j) {
                const Scalar gi = st.gate[j], gf = st.gate[chw + j];
                const Scalar go = st.gate[2 * chw + j], gg = st.gate[3 * chw + j];
                const Scalar tc = st.tanh_c[j];
                const Scalar d_c = gh[j] * go * (1 - tc * tc) + gc[j];
                gz[j] = d_c * gg * gi * (1 - gi);
                gz[chw + j] = d_c * st.c_prev[j] * gf * (1 - gf);
                gz[2 * chw + j] = gh[j] * tc * go * (1 - go);
                gz[3 * chw + j] = d_c * gi * (1 - gg * gg);
                gc[j] = d_c * gf;
            }
            // the gate conv caches only its most recent forward; re-run it
            // for this timestep before differentiating
            Tensor xh({1, cin_ + ch_, h, w});
            std::copy(x_.data() + t * cin_ * hw, x_.data() + (t + 1) * cin_ * hw, xh.data());
            if (t > 0) {
                // h_{t-1} = o_{t-1} * tanh(c_{t-1})
                Step& pv = steps_[t - 1];
                for (std::size_t j = 0; j < chw; ++j)
                    xh[cin_ * hw + j] = pv.gate[2 * chw + j] * pv.tanh_c[j];
            }
            gates_.forward(xh);
            Tensor gxh = gates_.backward(gz);
            std::copy(gxh.data(), gxh.data() + cin_ * hw, gx.data() + t * cin_ * hw);
            for (std::size_t j = 0; j < chw; ++j) gh[j] = gxh[cin_ * hw + j];
        }
        return gx;
    }

private:
    struct Step {
        Tensor z, gate, c, tanh_c, c_prev;
    };
    std::size_t cin_, ch_, k_;
    Conv2d gates_;
    Tensor x_;
    std::vector<Step> steps_;
};

/// 3D convolution over (T,C,H,W) sequences treated as a (C,T,H,W) volume;
/// "same" padding, stride 1, 3x3x3 kernels. Direct loops; used only at the
/// desk-scale head sizes.
class Conv3d : public Layer {
public:
    Conv3d(std::string name, std::size_t cin, std::size_t cout, std::size_t k = 3,
           bool relu = true)
        : cin_(cin), cout_(cout), k_(k), relu_(relu) {
        w_.name = name + ".w";
        w_.shape = {cout, cin, k, k, k};
        b_.name = name + ".b";
        b_.shape = {cout};
    }

    // input (T,Cin,H,W) -> output (T,Cout,H,W)
    std::vector<std::size_t> out_shape(const std::vector<std::size_t>& in) const override {
        return {in[0], cout_, in[2], in[3]};
    }

    void collect_params(std::vector<Param*>& out) override {
        out.push_back(&w_);
        out.push_back(&b_);
    }
    void init(Rng& rng) override {
        w_.init_uniform(rng, cin_ * k_ * k_ * k_);
        b_.init_zero();
    }

    Tensor forward(const Tensor& x) override {
        if (!w_.allocated()) throw std::logic_error(w_.name + ": forward before init");
        x_ = x;
        const std::ptrdiff_t T = static_cast<std::ptrdiff_t>(x.dim(0));
        const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(x.dim(2));
        const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(x.dim(3));
        const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k_) / 2;
        Tensor y({x.dim(0), cout_, x.dim(2), x.dim(3)});
        for (std::ptrdiff_t t = 0; t < T; ++t)
            for (std::size_t co = 0; co < cout_; ++co)
                for (std::ptrdiff_t oy = 0; oy < H; ++oy)
                    for (std::ptrdiff_t ox = 0; ox < W; ++ox) {
                        Scalar acc = b_.value[co];
                        for (std::size_t ci = 0; ci < cin_; ++ci)
                            for (std::size_t kt = 0; kt < k_; ++kt)
                                for (std::size_t ky = 0; ky < k_; ++ky)
                                    for (std::size_t kx = 0; kx < k_; ++kx) {
                                        const std::ptrdiff_t it = t + static_cast<std::ptrdiff_t>(kt) - r;
                                        const std::ptrdiff_t iy = oy + static_cast<std::ptrdiff_t>(ky) - r;
                                        const std::ptrdiff_t ix = ox + static_cast<std::ptrdiff_t>(kx) - r;
                                        if (it < 0 || it >= T || iy < 0 || iy >= H || ix < 0 ||
                                            ix >= W)
                                            continue;
                                        acc += w_.value[(((co * cin_ + ci) * k_ + kt) * k_ + ky) *
                                                            k_ + kx] *
                                               x[((static_cast<std::size_t>(it) * cin_ + ci) *
                                                      static_cast<std::size_t>(H) +
                                                  static_cast<std::size_t>(iy)) *
                                                     static_cast<std::size_t>(W) +
                                                 static_cast<std::size_t>(ix)];
                                    }
                        y[((static_cast<std::size_t>(t) * cout_ + co) * static_cast<std::size_t>(H) +
                           static_cast<std::size_t>(oy)) *
                              static_cast<std::size_t>(W) +
                          static_cast<std::size_t>(ox)] = acc;
                    }
        if (relu_)
            for (std::size_t i = 0; i < y.size(); ++i)
                if (y[i] < 0) y[i] = 0;
        y_ = y;
        return y;
    }

    Tensor backward(const Tensor& gy_in) override {
        Tensor gy = gy_in;
        if (relu_)
            for (std::size_t i = 0; i < gy.size(); ++i)
                if (y_[i] <= 0) gy[i] = 0;
        const std::ptrdiff_t T = static_cast<std::ptrdiff_t>(x_.dim(0));
        const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(x_.dim(2));
        const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(x_.dim(3));
        const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k_) / 2;
        Tensor gx(x_.shape());
        for (std::ptrdiff_t t = 0; t < T; ++t)
            for (std::size_t co = 0; co < cout_; ++co)
                for (std::ptrdiff_t oy = 0; oy < H; ++oy)
                    for (std::ptrdiff_t ox = 0; ox < W; ++ox) {
                        const Scalar g =
                            gy[((static_cast<std::size_t>(t) * cout_ + co) *
                                    static_cast<std::size_t>(H) +
                                static_cast<std::size_t>(oy)) *
                                   static_cast<std::size_t>(W) +
                               static_cast<std::size_t>(ox)];
                        if (g == 0) continue;
                        b_.grad[co] += g;
                        for (std::size_t ci = 0; ci < cin_; ++ci)
                            for (std::size_t kt = 0; kt < k_; ++kt)
                                for (std::size_t ky = 0; ky < k_; ++ky)
                                    for (std::size_t kx = 0; kx < k_; ++kx) {
                                        const std::ptrdiff_t it = t + static_cast<std::ptrdiff_t>(kt) - r;
                                        const std::ptrdiff_t iy = oy + static_cast<std::ptrdiff_t>(ky) - r;
                                        const std::ptrdiff_t ix = ox + static_cast<std::ptrdiff_t>(kx) - r;
                                        if (it < 0 || it >= T || iy < 0 || iy >= H || ix < 0 ||
                                            ix >= W)
                                            continue;
                                        const std::size_t xi =
                                            ((static_cast<std::size_t>(it) * cin_ + ci) *
                                                 static_cast<std::size_t>(H) +
                                             static_cast<std::size_t>(iy)) *
                                                static_cast<std::size_t>(W) +
                                            static_cast<std::size_t>(ix);
                                        const std::size_t wi =
                                            (((co * cin_ + ci) * k_ + kt) * k_ + ky) * k_ + kx;
                                        w_.grad[wi] += g * x_[xi];
                                        gx[xi] += g * w_.value[wi];
                                    }
                    }
        return gx;
    }

private:
    std::size_t cin_, cout_, k_;
    bool relu_;
    Param w_, b_;
    Tensor x_, y_;
};

// ---------------------------------------------------------------------------
// Losses

/// Categorical cross-entropy over logits (N,K); returns mean loss and fills
/// grad_logits with d(mean loss)/d(logits).
inline Scalar softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                    Tensor* grad_logits = nullptr) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    if (labels.size() != n) throw std::invalid_argument("softmax_cross_entropy: label count");
    if (grad_logits) *grad_logits = Tensor({n, k});
    Scalar loss = 0;
    for (std::size_t s = 0; s < n; ++s) {
        const Scalar* z = logits.data() + s * k;
        Scalar zmax = z[0];
        for (std::size_t j = 1; j < k; ++j) zmax = std::max(zmax, z[j]);
        Scalar denom = 0;
        for (std::size_t j = 0; j < k; ++j) denom += std::exp(z[j] - zmax);
        const std::size_t y = static_cast<std::size_t>(labels[s]);
        loss += -(z[y] - zmax - std::log(denom));
        if (grad_logits)
            for (std::size_t j = 0; j < k; ++j) {
                const Scalar p = std::exp(z[j] - zmax) / denom;
                (*grad_logits)[s * k + j] =
                    (p - (j == y ? Scalar{1} : Scalar{0})) / static_cast<Scalar>(n);
            }
    }
    return loss / static_cast<Scalar>(n);
}

constexpr Scalar kProbEps = 1e-7;

/// Weighted binary cross-entropy over probabilities:
///   sum_j [ w_j * (-t_j log p_j) - (1 - t_j) log(1 - p_j) ] / n_labels
inline Scalar weighted_bce(const std::vector<Scalar>& pred, const std::vector<int>& target,
                           const std::vector<Scalar>& pos_weights) {
    if (pred.size() != target.size() || pred.size() != pos_weights.size())
        throw std::invalid_argument("weighted_bce: size mismatch");
    Scalar loss = 0;
    for (std::size_t j = 0; j < pred.size(); ++j) {
        const Scalar p = std::clamp(pred[j], kProbEps, Scalar{1} - kProbEps);
        loss += -pos_weights[j] * static_cast<Scalar>(target[j]) * std::log(p) -
                (1 - static_cast<Scalar>(target[j])) * std::log(1 - p);
    }
    return loss / static_cast<Scalar>(pred.size());
}

/// Weighted BCE on logits (N,J) with sigmoid applied internally; returns the
/// batch-mean loss and the gradient w.r.t. the logits.
inline Scalar weighted_bce_logits(const Tensor& logits, const Tensor& targets,
                                  const std::vector<Scalar>& pos_weights,
                                  Tensor* grad_logits = nullptr) {
    const std::size_t n = logits.dim(0), J = logits.dim(1);
    if (grad_logits) *grad_logits = Tensor({n, J});
    Scalar loss = 0;
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t j = 0; j < J; ++j) {
            const Scalar p = std::clamp(sigmoid(logits[s * J + j]), kProbEps, Scalar{1} - kProbEps);
            const Scalar t = targets[s * J + j];
            const Scalar w = pos_weights[j];
            loss += (-w * t * std::log(p) - (1 - t) * std::log(1 - p)) / static_cast<Scalar>(J);
            if (grad_logits)
                (*grad_logits)[s * J + j] = (w * t * (p - 1) + (1 - t) * p) /
                                            static_cast<Scalar>(J) / static_cast<Scalar>(n);
        }
    return loss / static_cast<Scalar>(n);
}

// ---------------------------------------------------------------------------
// Optimizer

/// RMSProp: v <- rho*v + (1-rho)*g^2 ; w <- w - lr * g / (sqrt(v) + eps)
class RmsProp {
public:
    explicit RmsProp(std::vector<Param*> params, Scalar lr, Scalar rho = 0.9, Scalar eps = 1e-7)
        : params_(std::move(params)), lr_(lr), rho_(rho), eps_(eps) {
        state_.resize(params_.size());
    }

    void set_lr(Scalar lr) { lr_ = lr; }
    Scalar lr() const { return lr_; }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Param* p = params_[i];
            if (state_[i].empty()) state_[i].assign(p->value.size(), 0);
            for (std::size_t j = 0; j < p->value.size(); ++j) {
                const Scalar g = p->grad[j];
                state_[i][j] = rho_ * state_[i][j] + (1 - rho_) * g * g;
                p->value[j] -= lr_ * g / (std::sqrt(state_[i][j]) + eps_);
            }
        }
    }

private:
    std::vector<Param*> params_;
    Scalar lr_, rho_, eps_;
    std::vector<std::vector<Scalar>> state_;
};

}  // namespace skid::nn
