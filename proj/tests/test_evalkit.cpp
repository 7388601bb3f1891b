#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "skid/evalkit.hpp"

using namespace skid;
namespace fs = std::filesystem;

namespace {

// O(n^2) pairwise AUC oracle, ties count one half
std::optional<Scalar> auc_pairwise_oracle(const std::vector<Scalar>& scores,
                                          const std::vector<int>& labels) {
    Scalar wins = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        for (std::size_t k = 0; k < scores.size(); ++k) {
            if (labels[i] != 1 || labels[k] != 0) continue;
            ++pairs;
            if (scores[i] > scores[k]) wins += 1;
            else if (scores[i] == scores[k]) wins += 0.5;
        }
    if (pairs == 0) return std::nullopt;
    return wins / static_cast<Scalar>(pairs);
}

// brute-force ensemble re-implementation, independent code path
std::pair<std::array<Scalar, 3>, std::array<int, 3>> ensemble_oracle(
    const std::array<std::array<Scalar, 3>, 3>& probs_by_plane, const EnsembleWeights& w) {
    std::array<Scalar, 3> scores{};
    std::array<int, 3> bits{};
    for (std::size_t j = 0; j < 3; ++j) {
        Scalar s = 0;
        for (std::size_t i = 0; i < 3; ++i) s += w.w[j][i] * probs_by_plane[i][j];
        scores[j] = s;
        bits[j] = s >= 0.5 ? 1 : 0;
    }
    return {scores, bits};
}

PredictionRecord make_record(const std::string& id, Plane plane,
                             const std::array<Scalar, 3>& probs,
                             const std::array<int, 3>& labels) {
    PredictionRecord r;
    r.clip_id = id;
    r.plane = plane;
    r.probs = probs;
    r.labels = labels;
    return r;
}

}  // namespace

TEST(SampleEvalFrames, BoundsSortingAndDegenerateClip) {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const int nf = static_cast<int>(rng.uniform_int(1, 60));
        const auto idx = sample_eval_frames(nf, 16, rng);
        ASSERT_EQ(idx.size(), 16u);
        ASSERT_TRUE(std::is_sorted(idx.begin(), idx.end()));
        for (int i : idx) {
            ASSERT_GE(i, 0);
            ASSERT_LT(i, nf);
        }
    }
    const auto one = sample_eval_frames(1, 16, rng);
    for (int i : one) EXPECT_EQ(i, 0);
    EXPECT_THROW(sample_eval_frames(0, 16, rng), std::invalid_argument);
}

TEST(SampleEvalFrames, RawDrawStatistics) {
    // N_F = 40: raw draws come from Normal(20, 10)
    Rng rng(2);
    std::vector<Scalar> raw;
    raw.reserve(100000);
    while (raw.size() < 100000) (void)sample_eval_frames(40, 16, rng, &raw);
    const Scalar mean = std::accumulate(raw.begin(), raw.end(), Scalar(0)) /
                        static_cast<Scalar>(raw.size());
    Scalar var = 0;
    for (Scalar v : raw) var += (v - mean) * (v - mean);
    var /= static_cast<Scalar>(raw.size());
    EXPECT_NEAR(mean, 20.0, 0.1);
    EXPECT_NEAR(std::sqrt(var), 10.0, 0.2);  // within 2%
}

TEST(PredictClip, ConstantModelAveragesToItself) {
    Rng rng(3);
    auto constant = [](const std::vector<int>&) {
        return std::array<Scalar, 3>{0.2, 0.5, 0.9};
    };
    const auto p = predict_clip(constant, 30, 16, 8, rng);
    EXPECT_DOUBLE_EQ(p[0], 0.2);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
    EXPECT_DOUBLE_EQ(p[2], 0.9);
}

TEST(PredictClip, SingleRepeatEqualsOneForward) {
    Rng r1(4), r2(4);
    auto fwd = [](const std::vector<int>& idx) {
        Scalar s = 0;
        for (int i : idx) s += static_cast<Scalar>(i);
        const Scalar p = 1.0 / (1.0 + std::exp(-s / 100));
        return std::array<Scalar, 3>{p, p / 2, p / 3};
    };
    const auto a = predict_clip(fwd, 25, 16, 1, r1);
    const auto idx = sample_eval_frames(25, 16, r2);
    const auto b = fwd(idx);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(a[j], b[j]);
}

TEST(PredictClip, DeterministicUnderSeed) {
    auto fwd = [](const std::vector<int>& idx) {
        return std::array<Scalar, 3>{static_cast<Scalar>(idx[0]) / 100,
                                     static_cast<Scalar>(idx[5]) / 100,
                                     static_cast<Scalar>(idx[15]) / 100};
    };
    Rng r1(5), r2(5);
    const auto a = predict_clip(fwd, 40, 16, 8, r1);
    const auto b = predict_clip(fwd, 40, 16, 8, r2);
    EXPECT_EQ(a, b);
}

TEST(ComputeWeights, LogOddsAndNormalization) {
    // p = 0.9 for all three planes: raw ln 9 each, normalized to 1/3
    const auto w = compute_weights({{0.9, 0.9, 0.9}, {0.9, 0.9, 0.9}, {0.9, 0.9, 0.9}});
    for (std::size_t j = 0; j < 3; ++j) {
        Scalar sum = 0;
        for (Scalar v : w.w[j]) {
            EXPECT_NEAR(v, 1.0 / 3, 1e-12);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
    EXPECT_FALSE(w.clamped_negative);

    // raw value check: ln(0.9 / 0.1) = ln 9, against an unnormalized pair
    const auto w2 = compute_weights({{0.9, 0.5}});
    // second classifier's raw weight is 0, so the first normalizes to 1
    EXPECT_NEAR(w2.w[0][0], 1.0, 1e-12);
    EXPECT_NEAR(w2.w[0][1], 0.0, 1e-12);
}

TEST(ComputeWeights, NegativeRawWeightsClampedWithFlag) {
    const auto w = compute_weights({{0.4, 0.9}});
    EXPECT_TRUE(w.clamped_negative);
    EXPECT_EQ(w.w[0][0], 0.0);
    EXPECT_NEAR(w.w[0][1], 1.0, 1e-12);
}

TEST(ComputeWeights, AllWeakClassifiersFallBackToUniform) {
    const auto w = compute_weights({{0.3, 0.4, 0.2}});
    for (Scalar v : w.w[0]) EXPECT_NEAR(v, 1.0 / 3, 1e-12);
}

TEST(ComputeWeights, RejectsBoundaryAccuracies) {
    EXPECT_THROW(compute_weights({{1.0, 0.9}}), std::invalid_argument);
    EXPECT_THROW(compute_weights({{0.0, 0.9}}), std::invalid_argument);
}

TEST(ComputeWeights, RowsSumToOneOnRandomInputs) {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::vector<Scalar>> acc(3, std::vector<Scalar>(3));
        for (auto& row : acc)
            for (auto& v : row) v = rng.uniform_real(0.51, 0.99);
        const auto w = compute_weights(acc);
        for (const auto& row : w.w) {
            const Scalar sum = std::accumulate(row.begin(), row.end(), Scalar(0));
            ASSERT_NEAR(sum, 1.0, 1e-9);
        }
    }
}

TEST(EnsemblePredict, MatchesBruteForceOracleOn500RandomMatrices) {
    Rng rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<std::vector<Scalar>> acc(3, std::vector<Scalar>(3));
        for (auto& row : acc)
            for (auto& v : row) v = rng.uniform_real(0.05, 0.95);
        const auto w = compute_weights(acc);

        std::array<std::array<Scalar, 3>, 3> probs{};
        std::vector<PredictionRecord> records;
        const Plane planes[3] = {Plane::sagittal, Plane::coronal, Plane::axial};
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) probs[i][j] = rng.uniform_real(0, 1);
            records.push_back(make_record("c", planes[i], probs[i], {0, 1, 0}));
        }
        const EnsembleResult got = ensemble_predict(records, w);
        const auto [scores, bits] = ensemble_oracle(probs, w);
        for (std::size_t j = 0; j < 3; ++j) {
            ASSERT_EQ(got.scores[j], scores[j]);
            ASSERT_EQ(got.bits[j], bits[j]);
        }
    }
}

TEST(EnsemblePredict, InclusiveBoundaryCase) {
    EnsembleWeights w;
    w.w = {{1.0 / 3, 1.0 / 3, 1.0 / 3},
           {1.0 / 3, 1.0 / 3, 1.0 / 3},
           {1.0 / 3, 1.0 / 3, 1.0 / 3}};
    std::vector<PredictionRecord> records = {
        make_record("c", Plane::sagittal, {0.9, 0.9, 0.9}, {1, 1, 1}),
        make_record("c", Plane::coronal, {0.6, 0.6, 0.6}, {1, 1, 1}),
        make_record("c", Plane::axial, {0.0, 0.0, 0.0}, {1, 1, 1})};
    const auto res = ensemble_predict(records, w);
    for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_NEAR(res.scores[j], 0.5, 1e-12);
        EXPECT_EQ(res.bits[j], 1);  // >= 0.5 decides positive
    }
}

TEST(EnsemblePredict, DegenerateWeightEqualsSinglePlane) {
    EnsembleWeights w;
    w.w = {{1, 0, 0}, {1, 0, 0}, {1, 0, 0}};
    std::vector<PredictionRecord> records = {
        make_record("c", Plane::sagittal, {0.7, 0.2, 0.5}, {1, 0, 1}),
        make_record("c", Plane::coronal, {0.1, 0.9, 0.9}, {1, 0, 1}),
        make_record("c", Plane::axial, {0.1, 0.9, 0.9}, {1, 0, 1})};
    const auto res = ensemble_predict(records, w);
    EXPECT_EQ(res.bits[0], 1);
    EXPECT_EQ(res.bits[1], 0);
    EXPECT_EQ(res.bits[2], 1);
}

TEST(EnsemblePredict, MissingPlaneErrorNamesThePlane) {
    EnsembleWeights w;
    w.w = {{0.5, 0.5, 0.0}, {0.5, 0.5, 0.0}, {0.5, 0.5, 0.0}};
    std::vector<PredictionRecord> records = {
        make_record("c", Plane::sagittal, {0.5, 0.5, 0.5}, {0, 0, 0}),
        make_record("c", Plane::coronal, {0.5, 0.5, 0.5}, {0, 0, 0})};
    try {
        w.w = {{1.0 / 3, 1.0 / 3, 1.0 / 3},
               {1.0 / 3, 1.0 / 3, 1.0 / 3},
               {1.0 / 3, 1.0 / 3, 1.0 / 3}};
        (void)ensemble_predict(records, w);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("axial"), std::string::npos);
    }
}

TEST(EnsemblePredict, InvariantToCommonPositiveRescaling) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::vector<Scalar>> acc(3, std::vector<Scalar>(3));
        for (auto& row : acc)
            for (auto& v : row) v = rng.uniform_real(0.55, 0.95);
        // rescaling all p through a different log base multiplies every raw
        // weight by the same positive factor; normalization must absorb it
        const auto w_nat = compute_weights(acc);
        EnsembleWeights w_scaled = w_nat;
        // (already normalized; re-normalizing a scaled copy must be a no-op)
        for (auto& row : w_scaled.w) {
            for (auto& v : row) v *= 7.3;
            const Scalar sum = std::accumulate(row.begin(), row.end(), Scalar(0));
            for (auto& v : row) v /= sum;
        }
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t i = 0; i < 3; ++i)
                ASSERT_NEAR(w_nat.w[j][i], w_scaled.w[j][i], 1e-12);
    }
}

TEST(Metrics, PerfectSeparation) {
    std::vector<PredictionRecord> records;
    for (int i = 0; i < 5; ++i)
        records.push_back(make_record("p" + std::to_string(i), Plane::sagittal,
                                      {0.9, 0.8, 0.7}, {1, 1, 1}));
    for (int i = 0; i < 5; ++i)
        records.push_back(make_record("n" + std::to_string(i), Plane::sagittal,
                                      {0.1, 0.2, 0.3}, {0, 0, 0}));
    const auto m = metrics(records);
    for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_DOUBLE_EQ(m[j].accuracy, 1.0);
        EXPECT_DOUBLE_EQ(m[j].sensitivity, 1.0);
        EXPECT_DOUBLE_EQ(m[j].specificity, 1.0);
        ASSERT_TRUE(m[j].auc.has_value());
        EXPECT_DOUBLE_EQ(*m[j].auc, 1.0);
    }
}

TEST(Metrics, SensitivitySpecificityHandCase) {
    // class 0: TP=2 FN=1 TN=1 FP=1 -> sens 2/3, spec 1/2, acc 3/5
    std::vector<PredictionRecord> records = {
        make_record("a", Plane::sagittal, {0.9, 0.5, 0.5}, {1, 0, 0}),
        make_record("b", Plane::sagittal, {0.8, 0.5, 0.5}, {1, 0, 0}),
        make_record("c", Plane::sagittal, {0.2, 0.5, 0.5}, {1, 0, 0}),
        make_record("d", Plane::sagittal, {0.7, 0.5, 0.5}, {0, 0, 0}),
        make_record("e", Plane::sagittal, {0.1, 0.5, 0.5}, {0, 0, 0})};
    const auto m = metrics(records);
    EXPECT_NEAR(m[0].sensitivity, 2.0 / 3, 1e-12);
    EXPECT_NEAR(m[0].specificity, 0.5, 1e-12);
    EXPECT_NEAR(m[0].accuracy, 0.6, 1e-12);
}

TEST(Metrics, AucMatchesPairwiseOracleIncludingTies) {
    Rng rng(9);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = static_cast<int>(rng.uniform_int(2, 50));
        std::vector<Scalar> scores;
        std::vector<int> labels;
        std::vector<PredictionRecord> records;
        for (int i = 0; i < n; ++i) {
            // quantized scores force frequent ties
            const Scalar s = static_cast<Scalar>(rng.uniform_int(0, 8)) / 8.0;
            const int y = static_cast<int>(rng.uniform_int(0, 1));
            scores.push_back(s);
            labels.push_back(y);
            records.push_back(make_record("r" + std::to_string(i), Plane::sagittal,
                                          {s, 0.5, 0.5}, {y, 0, 0}));
        }
        const auto oracle = auc_pairwise_oracle(scores, labels);
        const auto got = metrics(records)[0].auc;
        ASSERT_EQ(got.has_value(), oracle.has_value());
        if (oracle) ASSERT_DOUBLE_EQ(*got, *oracle);
    }
}

TEST(Metrics, SingleClassAucUndefinedOthersComputed) {
    std::vector<PredictionRecord> records = {
        make_record("a", Plane::sagittal, {0.9, 0.9, 0.5}, {1, 1, 0}),
        make_record("b", Plane::sagittal, {0.8, 0.2, 0.5}, {1, 0, 1})};
    const auto m = metrics(records);
    EXPECT_FALSE(m[0].auc.has_value());  // all positives
    EXPECT_TRUE(m[1].auc.has_value());
    EXPECT_DOUBLE_EQ(m[0].accuracy, 1.0);  // still computed
}

TEST(Metrics, RandomScoresGiveChanceAuc) {
    Rng rng(10);
    std::vector<PredictionRecord> records;
    for (int i = 0; i < 4000; ++i)
        records.push_back(make_record("r" + std::to_string(i), Plane::sagittal,
                                      {rng.uniform_real(0, 1), 0.5, 0.5},
                                      {static_cast<int>(rng.uniform_int(0, 1)), 0, 0}));
    const auto m = metrics(records);
    // 3 sigma of AUC for n ~ 2000/2000 is well under 0.03
    EXPECT_NEAR(*m[0].auc, 0.5, 0.03);
}

TEST(BootstrapCi, DeterministicAndBracketsPoint) {
    Rng rng(11);
    std::vector<PredictionRecord> records;
    for (int i = 0; i < 40; ++i) {
        const int y = static_cast<int>(rng.uniform_int(0, 1));
        const Scalar p = std::clamp(0.5 + (y ? 0.2 : -0.2) + rng.uniform_real(-0.3, 0.3),
                                    Scalar(0.01), Scalar(0.99));
        records.push_back(
            make_record("r" + std::to_string(i), Plane::sagittal, {p, 0.5, 0.5}, {y, 0, 0}));
    }
    auto metric = [](const std::vector<PredictionRecord>& r) { return metrics(r)[0].auc; };
    const auto a = bootstrap_ci(records, metric, 500, 0.05, 0.95, 21);
    const auto b = bootstrap_ci(records, metric, 500, 0.05, 0.95, 21);
    EXPECT_EQ(a.point, b.point);
    EXPECT_EQ(a.lo, b.lo);
    EXPECT_EQ(a.hi, b.hi);
    EXPECT_LE(a.lo, a.hi);
    EXPECT_GE(a.point, a.lo - 0.15);
    EXPECT_LE(a.point, a.hi + 0.15);
}

TEST(BootstrapCi, ConstantMetricDegeneratesToPoint) {
    std::vector<PredictionRecord> records = {
        make_record("a", Plane::sagittal, {0.9, 0.5, 0.5}, {1, 0, 0}),
        make_record("b", Plane::sagittal, {0.1, 0.5, 0.5}, {0, 0, 0})};
    auto constant = [](const std::vector<PredictionRecord>&) {
        return std::optional<Scalar>(0.42);
    };
    const auto ci = bootstrap_ci(records, constant, 200, 0.05, 0.95, 3);
    EXPECT_DOUBLE_EQ(ci.point, 0.42);
    EXPECT_DOUBLE_EQ(ci.lo, 0.42);
    EXPECT_DOUBLE_EQ(ci.hi, 0.42);
}

TEST(BootstrapCi, UndefinedOnFullSampleIsAnError) {
    std::vector<PredictionRecord> records = {
        make_record("a", Plane::sagittal, {0.9, 0.5, 0.5}, {1, 0, 0})};
    auto metric = [](const std::vector<PredictionRecord>& r) { return metrics(r)[0].auc; };
    EXPECT_THROW(bootstrap_ci(records, metric, 100, 0.05, 0.95, 3), std::invalid_argument);
}

TEST(RecordsCsv, RoundTrip) {
    std::vector<PredictionRecord> records = {
        make_record("clip_a", Plane::sagittal, {0.123456789012345, 0.5, 0.9}, {1, 0, 1}),
        make_record("clip_b", Plane::axial, {0.0, 1.0, 0.25}, {0, 1, 0})};
    const std::string path = (fs::temp_directory_path() / "records_roundtrip.csv").string();
    save_records_csv(records, path);
    const auto back = load_records_csv(path);
    ASSERT_EQ(back.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(back[i].clip_id, records[i].clip_id);
        EXPECT_EQ(back[i].plane, records[i].plane);
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_DOUBLE_EQ(back[i].probs[j], records[i].probs[j]);
            EXPECT_EQ(back[i].labels[j], records[i].labels[j]);
        }
    }
    fs::remove(path);
}
