#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "skid/nn.hpp"

using namespace skid;
using namespace skid::nn;

namespace {

Tensor random_tensor(const std::vector<std::size_t>& shape, Rng& rng, Scalar lo = -1,
                     Scalar hi = 1) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_real(lo, hi);
    return t;
}

// direct convolution, written independently of the im2col code path
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t k,
                   std::size_t stride, bool relu) {
    const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), width = x.dim(3);
    const std::size_t cout = w.dim(0);
    const std::size_t ho = (h + stride - 1) / stride, wo = (width + stride - 1) / stride;
    // TF-style same padding
    const std::size_t pad_h = std::max<std::size_t>((ho - 1) * stride + k, h) - h;
    const std::size_t pad_w = std::max<std::size_t>((wo - 1) * stride + k, width) - width;
    const std::size_t pt = pad_h / 2, pl = pad_w / 2;
    Tensor y({n, cout, ho, wo});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    Scalar acc = b[co];
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pt);
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                    static_cast<std::ptrdiff_t>(pl);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                                    ix >= static_cast<std::ptrdiff_t>(width))
                                    continue;
                                acc += x[((s * cin + ci) * h + static_cast<std::size_t>(iy)) *
                                             width +
                                         static_cast<std::size_t>(ix)] *
                                       w[(co * cin + ci) * k * k + ky * k + kx];
                            }
                    if (relu) acc = std::max(acc, Scalar(0));
                    y[((s * cout + co) * ho + oy) * wo + ox] = acc;
                }
    return y;
}

// central finite differences of loss(params) against analytic grads
void check_param_gradients(Layer& layer, const Tensor& x, Rng& rng, Scalar tol = 1e-5,
                           int samples_per_param = 4) {
    std::vector<Param*> params;
    layer.collect_params(params);
    // loss = sum(y * r) for a fixed random r so dL/dy = r
    Tensor y = layer.forward(x);
    Tensor r = random_tensor(y.shape(), rng);
    auto loss = [&]() {
        const Tensor out = layer.forward(x);
        Scalar l = 0;
        for (std::size_t i = 0; i < out.size(); ++i) l += out[i] * r[i];
        return l;
    };
    for (auto* p : params) p->zero_grad();
    layer.forward(x);
    layer.backward(r);
    const Scalar eps = 1e-6;
    for (auto* p : params) {
        for (int s = 0; s < samples_per_param; ++s) {
            const auto i = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(p->value.size()) - 1));
            const Scalar orig = p->value[i];
            p->value[i] = orig + eps;
            const Scalar lp = loss();
            p->value[i] = orig - eps;
            const Scalar lm = loss();
            p->value[i] = orig;
            const Scalar fd = (lp - lm) / (2 * eps);
            const Scalar an = p->grad[i];
            const Scalar denom = std::max({std::abs(fd), std::abs(an), Scalar(1e-4)});
            EXPECT_NEAR(an, fd, tol * denom) << p->name << "[" << i << "]";
        }
    }
}

void check_input_gradients(Layer& layer, const Tensor& x0, Rng& rng, Scalar tol = 1e-5,
                           int n_samples = 12) {
    Tensor x = x0;
    Tensor y = layer.forward(x);
    Tensor r = random_tensor(y.shape(), rng);
    auto loss = [&]() {
        const Tensor out = layer.forward(x);
        Scalar l = 0;
        for (std::size_t i = 0; i < out.size(); ++i) l += out[i] * r[i];
        return l;
    };
    std::vector<Param*> params;
    layer.collect_params(params);
    for (auto* p : params) p->zero_grad();
    layer.forward(x);
    const Tensor gx = layer.backward(r);
    const Scalar eps = 1e-6;
    for (int s = 0; s < n_samples; ++s) {
        const auto i = static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(x.size()) - 1));
        const Scalar orig = x[i];
        x[i] = orig + eps;
        const Scalar lp = loss();
        x[i] = orig - eps;
        const Scalar lm = loss();
        x[i] = orig;
        const Scalar fd = (lp - lm) / (2 * eps);
        const Scalar denom = std::max({std::abs(fd), std::abs(gx[i]), Scalar(1e-4)});
        EXPECT_NEAR(gx[i], fd, tol * denom) << "input[" << i << "]";
    }
}

}  // namespace

TEST(Conv2d, MatchesDirectOracleStride1) {
    Rng rng(31);
    Conv2d conv("c", 3, 5, 3, 1, false);
    conv.init(rng);
    const Tensor x = random_tensor({2, 3, 8, 8}, rng);
    const Tensor y = conv.forward(x);
    std::vector<Param*> ps;
    conv.collect_params(ps);
    const Tensor w = ps[0]->value, b = ps[1]->value;
    Tensor wr({5, 3 * 3 * 3});
    std::copy(w.data(), w.data() + w.size(), wr.data());
    const Tensor o = conv_oracle(x, wr, b, 3, 1, false);
    ASSERT_EQ(y.shape(), o.shape());
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], o[i], 1e-12);
}

TEST(Conv2d, MatchesDirectOracleStride2WithRelu) {
    Rng rng(32);
    Conv2d conv("c", 4, 6, 3, 2, true);
    conv.init(rng);
    const Tensor x = random_tensor({1, 4, 9, 9}, rng);
    const Tensor y = conv.forward(x);
    EXPECT_EQ(y.dim(2), 5u);  // ceil(9/2)
    std::vector<Param*> ps;
    conv.collect_params(ps);
    const Tensor o = conv_oracle(x, ps[0]->value, ps[1]->value, 3, 2, true);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], o[i], 1e-12);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
    Rng rng(33);
    Conv2d conv("c", 2, 3, 3, 1, false);
    conv.init(rng);
    const Tensor x = random_tensor({2, 2, 6, 6}, rng);
    check_param_gradients(conv, x, rng);
    check_input_gradients(conv, x, rng);
}

TEST(Conv2d, StridedGradients) {
    Rng rng(34);
    Conv2d conv("c", 2, 2, 3, 2, false);
    conv.init(rng);
    const Tensor x = random_tensor({1, 2, 8, 8}, rng);
    check_param_gradients(conv, x, rng);
    check_input_gradients(conv, x, rng);
}

TEST(Conv2d, ForwardBeforeInitThrows) {
    Conv2d conv("c", 2, 2);
    const Tensor x({1, 2, 4, 4});
    EXPECT_THROW(conv.forward(x), std::logic_error);
}

TEST(Pools, MaxAndAvgOracles) {
    Rng rng(35);
    const Tensor x = random_tensor({1, 2, 4, 4}, rng);
    MaxPool2 mp;
    AvgPool2 ap;
    const Tensor ym = mp.forward(x), ya = ap.forward(x);
    ASSERT_EQ(ym.dim(2), 2u);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 2; ++y)
            for (std::size_t xx = 0; xx < 2; ++xx) {
                Scalar mx = -1e30, sum = 0;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const Scalar v = x[(c * 4 + 2 * y + dy) * 4 + 2 * xx + dx];
                        mx = std::max(mx, v);
                        sum += v;
                    }
                EXPECT_EQ(ym[(c * 2 + y) * 2 + xx], mx);
                EXPECT_NEAR(ya[(c * 2 + y) * 2 + xx], sum / 4, 1e-15);
            }
}

TEST(Pools, Gradients) {
    Rng rng(36);
    const Tensor x = random_tensor({2, 3, 6, 6}, rng);
    MaxPool2 mp;
    AvgPool2 ap;
    GlobalAvgPool gap;
    check_input_gradients(mp, x, rng);
    check_input_gradients(ap, x, rng);
    check_input_gradients(gap, x, rng);
}

TEST(Pools, OddSpatialDimsRejected) {
    MaxPool2 mp;
    const Tensor x({1, 1, 5, 4});
    EXPECT_THROW(mp.forward(x), std::invalid_argument);
}

TEST(Dense, ForwardOracleAndGradients) {
    Rng rng(37);
    Dense d("d", 4, 3, false);
    d.init(rng);
    const Tensor x = random_tensor({2, 4}, rng);
    const Tensor y = d.forward(x);
    std::vector<Param*> ps;
    d.collect_params(ps);
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t o = 0; o < 3; ++o) {
            Scalar acc = ps[1]->value[o];
            for (std::size_t i = 0; i < 4; ++i) acc += x.at(s, i) * ps[0]->value[o * 4 + i];
            ASSERT_NEAR(y.at(s, o), acc, 1e-12);
        }
    check_param_gradients(d, x, rng);
    check_input_gradients(d, x, rng);
}

TEST(ConvLSTM, ShapesAndGradients) {
    Rng rng(38);
    ConvLSTM lstm("l", 3, 4, 3);
    lstm.init(rng);
    const Tensor x = random_tensor({3, 3, 4, 4}, rng);  // T=3 steps
    const Tensor y = lstm.forward(x);
    EXPECT_EQ(y.shape(), (std::vector<std::size_t>{3, 4, 4, 4}));
    check_param_gradients(lstm, x, rng, 1e-4);
    check_input_gradients(lstm, x, rng, 1e-4);
}

TEST(Conv3d, Gradients) {
    Rng rng(39);
    Conv3d c3("c3", 2, 3, 3);
    c3.init(rng);
    const Tensor x = random_tensor({3, 2, 4, 4}, rng);
    const Tensor y = c3.forward(x);
    EXPECT_EQ(y.shape(), (std::vector<std::size_t>{3, 3, 4, 4}));
    check_param_gradients(c3, x, rng, 1e-4);
    check_input_gradients(c3, x, rng, 1e-4);
}

TEST(SoftmaxCrossEntropy, HandValuesAndGradient) {
    Tensor logits({1, 3});
    logits[0] = 1.0;
    logits[1] = 1.0;
    logits[2] = 1.0;
    Tensor g;
    const Scalar l = softmax_cross_entropy(logits, {0}, &g);
    EXPECT_NEAR(l, std::log(3.0), 1e-12);  // uniform softmax
    EXPECT_NEAR(g[0], (1.0 / 3 - 1), 1e-12);
    EXPECT_NEAR(g[1], 1.0 / 3, 1e-12);

    // finite differences on random logits
    Rng rng(40);
    Tensor z({2, 5});
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = rng.uniform_real(-2, 2);
    const std::vector<int> y = {3, 1};
    Tensor gz;
    softmax_cross_entropy(z, y, &gz);
    const Scalar eps = 1e-6;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const Scalar orig = z[i];
        z[i] = orig + eps;
        const Scalar lp = softmax_cross_entropy(z, y);
        z[i] = orig - eps;
        const Scalar lm = softmax_cross_entropy(z, y);
        z[i] = orig;
        EXPECT_NEAR(gz[i], (lp - lm) / (2 * eps), 1e-7);
    }
}

TEST(WeightedBce, MaximumEntropyPoint) {
    EXPECT_NEAR(weighted_bce({0.5, 0.5, 0.5}, {1, 0, 1}, {1, 1, 1}), std::log(2.0), 1e-12);
}

TEST(WeightedBce, PerfectPredictionNearZero) {
    // pred at exactly 0/1 is clamped internally to [eps, 1 - eps]
    EXPECT_LT(weighted_bce({1.0, 0.0, 0.0}, {1, 0, 0}, {1, 1, 1}), 1e-5);
}

TEST(WeightedBce, PositiveTermDoublingHandExpansion) {
    // w=(2,1,1), all targets positive at p=0.5: (2*ln2 + ln2 + ln2) / 3
    EXPECT_NEAR(weighted_bce({0.5, 0.5, 0.5}, {1, 1, 1}, {2, 1, 1}),
                (4.0 * std::log(2.0)) / 3.0, 1e-12);
}

TEST(WeightedBce, LogitsVersionMatchesProbabilityVersion) {
    Rng rng(41);
    Tensor z({2, 3}), t({2, 3});
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = rng.uniform_real(-3, 3);
        t[i] = static_cast<Scalar>(rng.uniform_int(0, 1));
    }
    const std::vector<Scalar> w = {2.5, 1.0, 0.7};
    Scalar manual = 0;
    for (std::size_t s2 = 0; s2 < 2; ++s2) {
        std::vector<Scalar> p(3);
        std::vector<int> ti(3);
        for (std::size_t j = 0; j < 3; ++j) {
            p[j] = sigmoid(z.at(s2, j));
            ti[j] = static_cast<int>(t.at(s2, j));
        }
        manual += weighted_bce(p, ti, w);
    }
    EXPECT_NEAR(weighted_bce_logits(z, t, w), manual / 2, 1e-10);

    // gradient against finite differences
    Tensor gz;
    weighted_bce_logits(z, t, w, &gz);
    const Scalar eps = 1e-6;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const Scalar orig = z[i];
        z[i] = orig + eps;
        const Scalar lp = weighted_bce_logits(z, t, w);
        z[i] = orig - eps;
        const Scalar lm = weighted_bce_logits(z, t, w);
        z[i] = orig;
        EXPECT_NEAR(gz[i], (lp - lm) / (2 * eps), 1e-7);
    }
}

TEST(RmsProp, StepMovesParamsAgainstGradient) {
    Rng rng(42);
    Dense d("d", 2, 2, false);
    d.init(rng);
    std::vector<Param*> ps;
    d.collect_params(ps);
    RmsProp opt(ps, 0.01, 0.9, 1e-7);
    const Tensor before = ps[0]->value;
    opt.zero_grad();
    ps[0]->grad.fill(1.0);
    opt.step();
    for (std::size_t i = 0; i < before.size(); ++i)
        EXPECT_LT(ps[0]->value[i], before[i]);  // positive grad moves down
    // params with zero grad stay put
    const Tensor b2 = ps[1]->value;
    opt.zero_grad();
    opt.step();
    for (std::size_t i = 0; i < b2.size(); ++i) EXPECT_EQ(ps[1]->value[i], b2[i]);
}

TEST(Params, LazyAllocation) {
    Conv2d conv("c", 256, 256);
    EXPECT_GT(conv.param_count(), 0u);
    std::vector<Param*> ps;
    conv.collect_params(ps);
    for (auto* p : ps) EXPECT_FALSE(p->allocated());  // counting never allocates
}
