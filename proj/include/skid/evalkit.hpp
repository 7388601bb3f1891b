#pragma once

#include <array>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

#include "skid/core.hpp"
#include "skid/framekit.hpp"

namespace skid {

constexpr std::size_t kNumLabels = 3;
constexpr std::size_t kNumPlanes = 3;

/// Per-clip, per-plane prediction: 3 class probabilities plus ground truth.
struct PredictionRecord {
    std::string clip_id;
    Plane plane = Plane::sagittal;
    std::array<Scalar, kNumLabels> probs{};
    std::array<int, kNumLabels> labels{};
};

/// Per-class log-odds voting weights, rows (classes) normalized to sum 1.
struct EnsembleWeights {
    // w[j][i]: weight of classifier i for class j
    std::vector<std::vector<Scalar>> w;
    bool clamped_negative = false;  // some raw log-odds weight was < 0

    std::size_t n_classes() const { return w.size(); }
    std::size_t n_classifiers() const { return w.empty() ? 0 : w[0].size(); }
};

/// Draw `count` frame indices from Normal(N_F/2, N_F/4), rounded, clipped to
/// [0, N_F-1], returned sorted so temporal order is preserved.
inline std::vector<int> sample_eval_frames(int n_frames_in_clip, int count, Rng& rng,
                                           std::vector<Scalar>* raw_draws = nullptr) {
    if (n_frames_in_clip < 1) throw std::invalid_argument("sample_eval_frames: empty clip");
    const Scalar mu = static_cast<Scalar>(n_frames_in_clip) / 2;
    const Scalar sigma = static_cast<Scalar>(n_frames_in_clip) / 4;
    std::vector<int> idx(static_cast<std::size_t>(count));
    for (auto& i : idx) {
        const Scalar raw = rng.normal(mu, sigma);
        if (raw_draws) raw_draws->push_back(raw);
        i = std::clamp(static_cast<int>(std::lround(raw)), 0, n_frames_in_clip - 1);
    }
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Repeated-prediction averaging: samples `count` frames `repeats` times,
/// invokes `forward` (frame indices -> per-label probabilities) on each draw,
/// and returns the arithmetic mean of the predictions.
template <typename ForwardFn>
std::array<Scalar, 3> predict_clip(ForwardFn&& forward, int n_frames_in_clip, int count,
                                   int repeats, Rng& rng) {
    std::array<Scalar, 3> acc{};
    for (int r = 0; r < repeats; ++r) {
        const std::vector<int> idx = sample_eval_frames(n_frames_in_clip, count, rng);
        const std::array<Scalar, 3> p = forward(idx);
        for (std::size_t j = 0; j < 3; ++j) acc[j] += p[j];
    }
    for (auto& v : acc) v /= static_cast<Scalar>(repeats);
    return acc;
}

/// w_i^j = log(p_i^j / (1 - p_i^j)), clamped at 0 when negative, then
/// normalized per class to sum 1. Falls back to uniform weights for a class
/// where every classifier is at or below chance.
inline EnsembleWeights compute_weights(const std::vector<std::vector<Scalar>>& val_accuracy) {
    EnsembleWeights out;
    out.w.resize(val_accuracy.size());
    for (std::size_t j = 0; j < val_accuracy.size(); ++j) {
        const auto& row = val_accuracy[j];
        out.w[j].resize(row.size());
        Scalar sum = 0;
        for (std::size_t i = 0; i < row.size(); ++i) {
            const Scalar p = row[i];
            if (p <= 0 || p >= 1)
                throw std::invalid_argument("compute_weights: accuracy must lie in (0,1), got " +
                                            std::to_string(p));
            Scalar raw = std::log(p / (1 - p));
            if (raw < 0) {
                raw = 0;
                out.clamped_negative = true;
            }
            out.w[j][i] = raw;
            sum += raw;
        }
        if (sum <= 0) {
            out.clamped_negative = true;
            for (auto& v : out.w[j]) v = Scalar{1} / static_cast<Scalar>(row.size());
        } else {
            for (auto& v : out.w[j]) v /= sum;
        }
    }
    return out;
}

struct EnsembleResult {
    std::array<Scalar, kNumLabels> scores{};
    std::array<int, kNumLabels> bits{};
};

/// Weighted majority vote: score_j = sum_i w_i^j h_i^j, decision at >= 0.5.
/// `per_plane` must hold one record per plane, in any order.
inline EnsembleResult ensemble_predict(const std::vector<PredictionRecord>& per_plane,
                                       const EnsembleWeights& w) {
    const Plane planes[] = {Plane::sagittal, Plane::coronal, Plane::axial};
    std::vector<const PredictionRecord*> ordered;
    for (Plane p : planes) {
        const PredictionRecord* found = nullptr;
        for (const auto& r : per_plane)
            if (r.plane == p) found = &r;
        if (!found)
            throw std::invalid_argument(std::string("ensemble_predict: missing plane ") +
                                        plane_name(p));
        ordered.push_back(found);
    }
    if (w.n_classes() != kNumLabels || w.n_classifiers() != ordered.size())
        throw std::invalid_argument("ensemble_predict: weight matrix shape mismatch");
    EnsembleResult out;
    for (std::size_t j = 0; j < kNumLabels; ++j) {
        Scalar s = 0;
        for (std::size_t i = 0; i < ordered.size(); ++i) s += w.w[j][i] * ordered[i]->probs[j];
        out.scores[j] = s;
        out.bits[j] = s >= 0.5 ? 1 : 0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct ClassMetrics {
    Scalar accuracy = 0;
    Scalar sensitivity = 0;
    Scalar specificity = 0;
    std::optional<Scalar> auc;  // empty when only one class is present
};

/// Mann-Whitney AUC with ties counted 1/2, via rank sums.
inline std::optional<Scalar> auc_rank(const std::vector<Scalar>& scores,
                                      const std::vector<int>& labels) {
    std::size_t n_pos = 0, n_neg = 0;
    for (int y : labels) (y ? n_pos : n_neg)++;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks over tie groups
    Scalar rank_sum_pos = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const Scalar avg_rank = static_cast<Scalar>(i + j + 1) / 2;  // 1-based
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum_pos += avg_rank;
        i = j;
    }
    const Scalar u = rank_sum_pos - static_cast<Scalar>(n_pos) * (static_cast<Scalar>(n_pos) + 1) / 2;
    return u / (static_cast<Scalar>(n_pos) * static_cast<Scalar>(n_neg));
}

/// Per-class accuracy / sensitivity / specificity at threshold 0.5, and AUC.
inline std::array<ClassMetrics, kNumLabels> metrics(const std::vector<PredictionRecord>& records) {
    std::array<ClassMetrics, kNumLabels> out;
    for (std::size_t j = 0; j < kNumLabels; ++j) {
        std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
        std::vector<Scalar> scores;
        std::vector<int> labels;
        for (const auto& r : records) {
            const int pred = r.probs[j] >= 0.5 ? 1 : 0;
            if (r.labels[j]) (pred ? tp : fn)++;
            else (pred ? fp : tn)++;
            scores.push_back(r.probs[j]);
            labels.push_back(r.labels[j]);
        }
        ClassMetrics& m = out[j];
        const std::size_t n = records.size();
        m.accuracy = n ? static_cast<Scalar>(tp + tn) / static_cast<Scalar>(n) : 0;
        m.sensitivity = (tp + fn) ? static_cast<Scalar>(tp) / static_cast<Scalar>(tp + fn) : 0;
        m.specificity = (tn + fp) ? static_cast<Scalar>(tn) / static_cast<Scalar>(tn + fp) : 0;
        m.auc = auc_rank(scores, labels);
    }
    return out;
}

struct BootstrapCI {
    Scalar point = 0;
    Scalar lo = 0;
    Scalar hi = 0;
};

/// Percentile bootstrap over clip-level resampling with replacement. A
/// resample on which the metric is undefined is redrawn (up to 10*n_boot
/// attempts overall).
inline BootstrapCI bootstrap_ci(
    const std::vector<PredictionRecord>& records,
    const std::function<std::optional<Scalar>(const std::vector<PredictionRecord>&)>& metric,
    int n_boot, Scalar lo_q, Scalar hi_q, std::uint64_t seed) {
    if (records.empty()) throw std::invalid_argument("bootstrap_ci: no records");
    const auto point = metric(records);
    if (!point) throw std::invalid_argument("bootstrap_ci: metric undefined on the full sample");
    Rng rng(seed);
    std::vector<Scalar> stats;
    stats.reserve(static_cast<std::size_t>(n_boot));
    long attempts = 0;
    const long max_attempts = 10L * n_boot;
    while (static_cast<int>(stats.size()) < n_boot) {
        if (++attempts > max_attempts)
            throw std::runtime_error("bootstrap_ci: metric undefined on too many resamples");
        std::vector<PredictionRecord> sample;
        sample.reserve(records.size());
        for (std::size_t i = 0; i < records.size(); ++i)
            sample.push_back(records[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(records.size()) - 1))]);
        const auto v = metric(sample);
        if (v) stats.push_back(*v);
    }
    std::sort(stats.begin(), stats.end());
    auto quantile = [&](Scalar q) {
        const Scalar pos = q * static_cast<Scalar>(stats.size() - 1);
        const std::size_t i0 = static_cast<std::size_t>(std::floor(pos));
        const std::size_t i1 = std::min(i0 + 1, stats.size() - 1);
        const Scalar f = pos - static_cast<Scalar>(i0);
        return stats[i0] * (1 - f) + stats[i1] * f;
    };
    return {*point, quantile(lo_q), quantile(hi_q)};
}

// ---------------------------------------------------------------------------
// Record CSV persistence: clip_id,plane,p_abn,p_acl,p_men,y_abn,y_acl,y_men

inline void save_records_csv(const std::vector<PredictionRecord>& records,
                             const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_records_csv: cannot open " + path);
    out << "clip_id,plane,p_abn,p_acl,p_men,y_abn,y_acl,y_men\n";
    out.precision(17);
    for (const auto& r : records) {
        out << r.clip_id << "," << plane_name(r.plane);
        for (Scalar p : r.probs) out << "," << p;
        for (int y : r.labels) out << "," << y;
        out << "\n";
    }
}

inline std::vector<PredictionRecord> load_records_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_records_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_records_csv: empty file " + path);
    std::vector<PredictionRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tok;
        PredictionRecord r;
        std::getline(ls, r.clip_id, ',');
        std::getline(ls, tok, ',');
        r.plane = plane_from_name(tok);
        for (auto& p : r.probs) {
            std::getline(ls, tok, ',');
            p = std::stod(tok);
        }
        for (auto& y : r.labels) {
            std::getline(ls, tok, ',');
            y = std::stoi(tok);
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace skid
