#include <gtest/gtest.h>

#include <filesystem>

#include "skid/skidnet.hpp"

using namespace skid;
namespace fs = std::filesystem;

namespace {

// Closed-form parameter audit, written independently of the layer classes.
// Conv kxk with cin -> cout: cout * (k*k*cin + 1).
std::size_t conv_params(std::size_t cin, std::size_t cout, std::size_t k) {
    return cout * (k * k * cin + 1);
}

std::size_t encoder_params_oracle(const SkidConfig& c) {
    const std::size_t f = c.branch_block_filters;
    std::size_t n = 0;
    // 9 unshared branches, each two conv blocks of two 3x3 convs
    n += 9 * (conv_params(1, f, 3) + 3 * conv_params(f, f, 3));
    n += conv_params(9 * f, c.onebyone_filters, 1);
    if (c.variant != SkidConfig::Variant::noblocks) {
        // skip: conv3 cin->first, conv3 first->cin
        n += conv_params(c.onebyone_filters, c.skip1_first, 3) +
             conv_params(c.skip1_first, c.onebyone_filters, 3);
        // dimred: upper conv3 s1 + conv3 s2, lower conv1; each branch c_out/2
        n += conv_params(c.onebyone_filters, c.dimred1_out / 2, 3) +
             conv_params(c.dimred1_out / 2, c.dimred1_out / 2, 3) +
             conv_params(c.onebyone_filters, c.dimred1_out / 2, 1);
        n += conv_params(c.dimred1_out, c.skip2_first, 3) +
             conv_params(c.skip2_first, c.dimred1_out, 3);
        n += conv_params(c.dimred1_out, c.dimred2_out / 2, 3) +
             conv_params(c.dimred2_out / 2, c.dimred2_out / 2, 3) +
             conv_params(c.dimred1_out, c.dimred2_out / 2, 1);
    }
    return n;
}

std::size_t pretext_params_oracle(const SkidConfig& c, std::size_t fc_width = 1024) {
    const std::size_t C = c.encoder_out_channels();
    return encoder_params_oracle(c) + fc_width * (C + 1) + c.n_classes * (fc_width + 1);
}

std::size_t convlstm_head_params_oracle(const SkidConfig& c, std::size_t ch,
                                        std::size_t n_labels) {
    const std::size_t C = c.encoder_out_channels();
    // gate conv: (cin + ch) -> 4*ch, 3x3
    const std::size_t lstm1 = 4 * ch * (9 * (C + ch) + 1);
    const std::size_t lstm2 = 4 * ch * (9 * (ch + ch) + 1);
    return lstm1 + lstm2 + n_labels * (ch + 1);
}

}  // namespace

TEST(ShapeLadder, V3MatchesPublishedTrunk) {
    SkidEncoder enc(SkidConfig::v3());
    const auto ladder = enc.shape_ladder();
    // concat -> 1x1 proj -> skip1 -> dimred1 -> skip2 -> dimred2, as (H,W,C)
    const std::vector<std::vector<std::size_t>> want = {
        {16, 16, 2304}, {16, 16, 1024}, {16, 16, 1024},
        {8, 8, 2048},   {8, 8, 2048},   {4, 4, 4096}};
    EXPECT_EQ(ladder, want);
}

TEST(ShapeLadder, OtherVariants) {
    {
        SkidEncoder enc(SkidConfig::v1());
        const auto l = enc.shape_ladder();
        EXPECT_EQ(l.back(), (std::vector<std::size_t>{4, 4, 4096}));
        EXPECT_EQ(l[3], (std::vector<std::size_t>{8, 8, 1024}));
    }
    {
        SkidEncoder enc(SkidConfig::noblocks());
        const auto l = enc.shape_ladder();
        // channel-preserving pooling: 16x16x1024 -> 8x8 -> 4x4, still 1024
        EXPECT_EQ(l.back(), (std::vector<std::size_t>{4, 4, 1024}));
    }
}

TEST(ParamAudit, EncoderMatchesClosedFormForAllVariants) {
    for (const SkidConfig& c : {SkidConfig::v1(), SkidConfig::v2(), SkidConfig::v3(),
                                SkidConfig::noblocks(), SkidConfig::miniature()}) {
        SkidEncoder enc(c);
        EXPECT_EQ(enc.param_count(), encoder_params_oracle(c)) << c.variant_name();
    }
}

TEST(ParamAudit, PretextHeadCountsMatch) {
    for (const SkidConfig& c : {SkidConfig::v3(), SkidConfig::miniature()}) {
        PretextModel m(c);
        EXPECT_EQ(m.param_count(), pretext_params_oracle(c));
    }
}

TEST(ParamAudit, V3WithThousandClassHeadNearPublishedTotal) {
    SkidConfig c = SkidConfig::v3();
    c.n_classes = 1000;
    PretextModel m(c);
    const auto total = static_cast<double>(m.param_count());
    EXPECT_NEAR(total, 217.68e6, 0.02 * 217.68e6);  // within 2%
}

TEST(ParamAudit, DownstreamTrainableNearPublishedTotal) {
    const SkidConfig c = SkidConfig::v3();
    DownstreamConfig d;  // convlstm x2, 512 channels, frozen encoder
    DownstreamModel m(c, d);
    const auto trainable = static_cast<double>(m.trainable_param_count());
    EXPECT_NEAR(trainable, 103e6, 0.05 * 103e6);  // within 5%
    EXPECT_EQ(m.trainable_param_count(),
              convlstm_head_params_oracle(c, d.convlstm_channels, d.n_labels));
}

TEST(ParamAudit, ShapeProbesNeverAllocateWeights) {
    SkidEncoder enc(SkidConfig::v3());
    (void)enc.shape_ladder();
    (void)enc.param_count();
    std::vector<nn::Param*> ps;
    enc.collect_params(ps);
    for (auto* p : ps) EXPECT_FALSE(p->allocated());
}

TEST(SkipBlock, ZeroedWeightsPassInputThroughExactly) {
    Rng rng(3);
    SkipBlock blk("s", 4, 6, 0.25);
    blk.init(rng);
    std::vector<nn::Param*> ps;
    blk.collect_params(ps);
    for (auto* p : ps) p->value.fill(0);
    Tensor x({1, 4, 8, 8});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform_real(-1, 1);
    const Tensor y = blk.forward(x);
    for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(y[i], x[i]);
}

TEST(SkipBlock, ScaleFactorIsApplied) {
    // with conv biases only, the residual is a constant map: y = x + scale*b2
    Rng rng(4);
    SkipBlock blk("s", 2, 2, 0.25);
    blk.init(rng);
    std::vector<nn::Param*> ps;
    blk.collect_params(ps);
    for (auto* p : ps) p->value.fill(0);
    ps[3]->value.fill(1.0);  // second conv bias
    Tensor x({1, 2, 4, 4});
    x.fill(0.5);
    const Tensor y = blk.forward(x);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_DOUBLE_EQ(y[i], 0.5 + 0.25);
}

TEST(DimRedBlock, HalvesSpatialAndSetsChannels) {
    Rng rng(5);
    DimRedBlock blk("d", 6, 10);
    blk.init(rng);
    Tensor x({2, 6, 8, 8});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform_real(0, 1);
    const Tensor y = blk.forward(x);
    EXPECT_EQ(y.shape(), (std::vector<std::size_t>{2, 10, 4, 4}));
    EXPECT_THROW(DimRedBlock("odd", 4, 5), std::invalid_argument);
}

TEST(SkidConfig, ValidationAndJsonRoundTrip) {
    SkidConfig bad = SkidConfig::v3();
    bad.skip1_out = 512;  // residual addition would not type-check
    EXPECT_THROW(bad.validate(), std::invalid_argument);

    const SkidConfig c = SkidConfig::v2();
    nlohmann::json j = c;
    const SkidConfig back = j.get<SkidConfig>();
    EXPECT_EQ(back.variant_name(), "v2");
    EXPECT_EQ(back.skip2_first, c.skip2_first);
    EXPECT_EQ(back.dimred2_out, c.dimred2_out);
    EXPECT_EQ(back.n_classes, c.n_classes);
}

TEST(Encoder, MiniatureForwardShapesAndFiniteness) {
    Rng rng(6);
    SkidEncoder enc(SkidConfig::miniature());
    enc.init(rng);
    Tensor x({2, 9, 64, 64});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform_real(0, 1);
    const Tensor y = enc.forward(x);
    EXPECT_EQ(y.shape(), (std::vector<std::size_t>{2, 32, 4, 4}));
    EXPECT_TRUE(y.all_finite());
}

TEST(Encoder, RejectsWrongPatchCount) {
    Rng rng(6);
    SkidEncoder enc(SkidConfig::miniature());
    enc.init(rng);
    Tensor x({1, 4, 64, 64});
    EXPECT_THROW(enc.forward(x), std::invalid_argument);
}

TEST(PretextModel, ForwardAndBackwardShapes) {
    Rng rng(7);
    PretextModel m(SkidConfig::miniature(5));
    m.init(rng);
    Tensor x({2, 9, 64, 64});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform_real(0, 1);
    const Tensor logits = m.forward(x);
    EXPECT_EQ(logits.shape(), (std::vector<std::size_t>{2, 5}));
    EXPECT_TRUE(logits.all_finite());
    EXPECT_EQ(m.encoder_activation().shape(), (std::vector<std::size_t>{2, 32, 4, 4}));
    Tensor g(logits.shape());
    g.fill(0.1);
    const Tensor genc = m.backward_head(g);
    EXPECT_EQ(genc.shape(), m.encoder_activation().shape());
}

TEST(DownstreamModel, FrozenEncoderIsNotTrainable) {
    const SkidConfig enc = SkidConfig::miniature();
    DownstreamConfig d;
    d.convlstm_channels = 8;
    DownstreamModel m(enc, d);
    std::vector<nn::Param*> trainable = m.trainable_params();
    std::vector<nn::Param*> enc_params;
    m.encoder().collect_params(enc_params);
    for (auto* e : enc_params)
        for (auto* t : trainable) ASSERT_NE(e, t);

    DownstreamConfig unfrozen = d;
    unfrozen.encoder_frozen = false;
    DownstreamModel m2(enc, unfrozen);
    EXPECT_GT(m2.trainable_params().size(), m.trainable_params().size());
}

TEST(DownstreamModel, ConvLstmForward) {
    Rng rng(8);
    DownstreamConfig d;
    d.convlstm_channels = 8;
    DownstreamModel m(SkidConfig::miniature(), d);
    m.init(rng);
    Tensor x({4, 9, 64, 64});  // 4 frames
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform_real(0, 1);
    const Tensor logits = m.forward(x);
    EXPECT_EQ(logits.shape(), (std::vector<std::size_t>{1, 3}));
    const auto probs = DownstreamModel::probabilities(logits);
    for (Scalar p : probs) {
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
    }
}

TEST(DownstreamModel, Cnn3dForward) {
    Rng rng(9);
    DownstreamConfig d;
    d.head = DownstreamConfig::Head::cnn3d;
    DownstreamModel m(SkidConfig::miniature(), d);
    m.init(rng);
    Tensor x({3, 9, 64, 64});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform_real(0, 1);
    const Tensor logits = m.forward(x);
    EXPECT_EQ(logits.shape(), (std::vector<std::size_t>{1, 3}));
    EXPECT_TRUE(logits.all_finite());
}

TEST(Checkpoint, RoundTripIsBitExact) {
    Rng rng(10);
    PretextModel m(SkidConfig::miniature(4));
    m.init(rng);
    const std::string path = (fs::temp_directory_path() / "ckpt_roundtrip.bin").string();
    ckpt::save(path, "{\"note\":\"test\"}", m.params());

    PretextModel m2(SkidConfig::miniature(4));
    Rng rng2(99);
    m2.init(rng2);  // different init, to be overwritten
    const std::string echo = ckpt::load(path, m2.params());
    EXPECT_EQ(echo, "{\"note\":\"test\"}");
    auto pa = m.params(), pb = m2.params();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        ASSERT_EQ(pa[i]->value.size(), pb[i]->value.size());
        for (std::size_t k = 0; k < pa[i]->value.size(); ++k)
            ASSERT_EQ(pa[i]->value[k], pb[i]->value[k]);
    }
    EXPECT_EQ(ckpt::read_config(path), echo);
    fs::remove(path);
}

TEST(Checkpoint, LoadErrors) {
    const std::string path = (fs::temp_directory_path() / "ckpt_bad.bin").string();
    {
        std::ofstream f(path, std::ios::binary);
        f << "NOTMAGIC garbage";
    }
    PretextModel m(SkidConfig::miniature(4));
    EXPECT_THROW(ckpt::load(path, m.params()), std::runtime_error);
    fs::remove(path);
    EXPECT_THROW(ckpt::read_config(path), std::runtime_error);  // missing file
}

TEST(Checkpoint, EncoderSubsetLoadsFromPretextCheckpoint) {
    Rng rng(11);
    PretextModel pm(SkidConfig::miniature(4));
    pm.init(rng);
    const std::string path = (fs::temp_directory_path() / "ckpt_subset.bin").string();
    ckpt::save(path, "{}", pm.params());

    DownstreamConfig d;
    d.convlstm_channels = 8;
    DownstreamModel dm(SkidConfig::miniature(4), d);
    Rng rng2(12);
    dm.init(rng2);
    std::vector<nn::Param*> enc_params;
    dm.encoder().collect_params(enc_params);
    ckpt::load(path, enc_params);

    std::vector<nn::Param*> src;
    pm.encoder().collect_params(src);
    ASSERT_EQ(src.size(), enc_params.size());
    for (std::size_t i = 0; i < src.size(); ++i)
        for (std::size_t k = 0; k < src[i]->value.size(); ++k)
            ASSERT_EQ(src[i]->value[k], enc_params[i]->value[k]);
    fs::remove(path);
}
