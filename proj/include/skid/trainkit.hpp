#pragma once

#include <chrono>
#include <fstream>
#include <iostream>

#include "nlohmann/json.hpp"
#include "skid/datakit.hpp"
#include "skid/evalkit.hpp"
#include "skid/skidnet.hpp"

namespace skid {

struct PretextTrainConfig {
    Scalar lr = 1e-4;
    Scalar lr_decay = 0.95;  // exponential, per epoch
    Scalar rmsprop_rho = 0.9;
    Scalar rmsprop_eps = 1e-7;
    int batch_size = 16;
    int max_epochs = 30;
    int plateau_patience = 5;  // epochs without val-accuracy improvement
    std::uint64_t seed = 0;
    AugmentationSpec augment;
    std::string nan_checkpoint_path;  // diagnostic dump target on NaN abort

    void validate() const {
        if (lr <= 0) throw std::invalid_argument("PretextTrainConfig: lr must be > 0");
        if (lr_decay <= 0 || lr_decay > 1)
            throw std::invalid_argument("PretextTrainConfig: lr_decay must be in (0,1]");
        if (batch_size < 1) throw std::invalid_argument("PretextTrainConfig: batch_size >= 1");
    }
};

struct DownstreamTrainConfig {
    Scalar lr = 1e-5;
    Scalar lr_decay = 0.95;
    Scalar rmsprop_rho = 0.9;
    Scalar rmsprop_eps = 1e-7;
    int max_epochs = 20;
    int frames_per_clip = 16;
    std::vector<Scalar> class_pos_weights;  // empty: N_neg/N_pos from the training split
    std::uint64_t seed = 0;
    std::string nan_checkpoint_path;

    void validate() const {
        if (lr <= 0) throw std::invalid_argument("DownstreamTrainConfig: lr must be > 0");
        if (frames_per_clip < 1)
            throw std::invalid_argument("DownstreamTrainConfig: frames_per_clip >= 1");
        for (Scalar w : class_pos_weights)
            if (w <= 0) throw std::invalid_argument("DownstreamTrainConfig: weights must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const PretextTrainConfig& c) {
    j = {{"lr", c.lr},
         {"lr_decay", c.lr_decay},
         {"rmsprop_rho", c.rmsprop_rho},
         {"rmsprop_eps", c.rmsprop_eps},
         {"batch_size", c.batch_size},
         {"max_epochs", c.max_epochs},
         {"plateau_patience", c.plateau_patience},
         {"seed", c.seed},
         {"augment",
          {{"enable_scale", c.augment.enable_scale},
           {"enable_rotation", c.augment.enable_rotation},
           {"enable_shift", c.augment.enable_shift},
           {"enable_awgn", c.augment.enable_awgn}}}};
}

inline void from_json(const nlohmann::json& j, PretextTrainConfig& c) {
    c.lr = j.value("lr", c.lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.rmsprop_rho = j.value("rmsprop_rho", c.rmsprop_rho);
    c.rmsprop_eps = j.value("rmsprop_eps", c.rmsprop_eps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
    c.seed = j.value("seed", c.seed);
    if (j.contains("augment")) {
        const auto& a = j.at("augment");
        c.augment.enable_scale = a.value("enable_scale", c.augment.enable_scale);
        c.augment.enable_rotation = a.value("enable_rotation", c.augment.enable_rotation);
        c.augment.enable_shift = a.value("enable_shift", c.augment.enable_shift);
        c.augment.enable_awgn = a.value("enable_awgn", c.augment.enable_awgn);
    }
}

inline void to_json(nlohmann::json& j, const DownstreamTrainConfig& c) {
    j = {{"lr", c.lr},
         {"lr_decay", c.lr_decay},
         {"rmsprop_rho", c.rmsprop_rho},
         {"rmsprop_eps", c.rmsprop_eps},
         {"max_epochs", c.max_epochs},
         {"frames_per_clip", c.frames_per_clip},
         {"class_pos_weights", c.class_pos_weights},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DownstreamTrainConfig& c) {
    c.lr = j.value("lr", c.lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.rmsprop_rho = j.value("rmsprop_rho", c.rmsprop_rho);
    c.rmsprop_eps = j.value("rmsprop_eps", c.rmsprop_eps);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.frames_per_clip = j.value("frames_per_clip", c.frames_per_clip);
    c.class_pos_weights = j.value("class_pos_weights", c.class_pos_weights);
    c.seed = j.value("seed", c.seed);
}

inline Scalar lr_at_epoch(Scalar base, Scalar decay, int epoch) {
    return base * std::pow(decay, epoch);
}

struct EpochStats {
    int epoch = 0;
    Scalar lr = 0;
    Scalar train_loss = 0;
    Scalar train_accuracy = 0;
    Scalar val_loss = 0;
    Scalar val_accuracy = 0;
    std::array<Scalar, 3> val_auc{};  // downstream only; zeros otherwise
    double seconds = 0;
};

struct TrainLog {
    std::string task;
    std::string config_json;
    std::vector<EpochStats> epochs;
    int best_epoch = -1;

    void append(EpochStats e) {
        for (Scalar v : {e.lr, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy})
            if (!std::isfinite(v))
                throw std::runtime_error("TrainLog: non-finite metric at epoch " +
                                         std::to_string(e.epoch));
        epochs.push_back(std::move(e));
    }
};

inline void save_log_csv(const TrainLog& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_log_csv: cannot open " + path);
    out << "epoch,lr,train_loss,train_accuracy,val_loss,val_accuracy,val_auc_abn,val_auc_acl,"
           "val_auc_men,seconds\n";
    for (const auto& e : log.epochs)
        out << e.epoch << "," << e.lr << "," << e.train_loss << "," << e.train_accuracy << ","
            << e.val_loss << "," << e.val_accuracy << "," << e.val_auc[0] << "," << e.val_auc[1]
            << "," << e.val_auc[2] << "," << e.seconds << "\n";
}

inline void save_log_json(const TrainLog& log, const std::string& path) {
    nlohmann::json j;
    j["task"] = log.task;
    j["config"] = log.config_json.empty() ? nlohmann::json{}
                                          : nlohmann::json::parse(log.config_json);
    j["best_epoch"] = log.best_epoch;
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : log.epochs)
        j["epochs"].push_back({{"epoch", e.epoch},
                               {"lr", e.lr},
                               {"train_loss", e.train_loss},
                               {"train_accuracy", e.train_accuracy},
                               {"val_loss", e.val_loss},
                               {"val_accuracy", e.val_accuracy},
                               {"val_auc", e.val_auc},
                               {"seconds", e.seconds}});
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_log_json: cannot open " + path);
    out << j.dump(2) << "\n";
}

namespace detail {

inline Tensor samples_to_batch(const std::vector<JumbledSample>& samples) {
    const std::size_t n = samples.size();
    const std::size_t np = samples[0].patches.size();
    Tensor batch({n, np, kPatchOut, kPatchOut});
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t p = 0; p < np; ++p)
            std::copy(samples[s].patches[p].data(),
                      samples[s].patches[p].data() + kPatchOut * kPatchOut,
                      batch.data() + (s * np + p) * kPatchOut * kPatchOut);
    return batch;
}

inline void dump_diagnostic(const std::string& path, const std::string& cfg_json,
                            std::vector<nn::Param*> params) {
    if (path.empty()) return;
    try {
        ckpt::save(path, cfg_json, params);
    } catch (...) {
        // the abort diagnostic is best effort
    }
}

}  // namespace detail

/// Pretext training: each epoch pass enumerates the training clips once,
/// drawing one uniformly chosen frame per clip, runs PREPFRAM and minimizes
/// categorical cross-entropy with RMSProp. Stops at max_epochs or when
/// validation accuracy has not improved for plateau_patience epochs.
inline TrainLog train_pretext(const std::vector<ClipVolume>& train_clips,
                              const std::vector<ClipVolume>& val_clips,
                              const ArrangementSet& aset, PretextModel& model,
                              const PretextTrainConfig& cfg) {
    cfg.validate();
    if (train_clips.empty()) throw std::invalid_argument("train_pretext: empty dataset");

    TrainLog log;
    log.task = "pretext";
    {
        nlohmann::json j = {{"lr", cfg.lr},         {"lr_decay", cfg.lr_decay},
                            {"batch_size", cfg.batch_size}, {"max_epochs", cfg.max_epochs},
                            {"plateau_patience", cfg.plateau_patience}, {"seed", cfg.seed},
                            {"k", aset.k()}};
        log.config_json = j.dump();
    }

    Rng rng(cfg.seed);
    nn::RmsProp opt(model.params(), cfg.lr, cfg.rmsprop_rho, cfg.rmsprop_eps);

    Scalar best_val = -1;
    int since_best = 0;
    std::vector<std::size_t> order(train_clips.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        opt.set_lr(lr_at_epoch(cfg.lr, cfg.lr_decay, epoch));
        std::shuffle(order.begin(), order.end(), rng.engine());

        Scalar loss_sum = 0;
        std::size_t correct = 0, seen = 0, batches = 0;
        std::vector<JumbledSample> batch;
        auto flush = [&]() {
            if (batch.empty()) return;
            Tensor x = detail::samples_to_batch(batch);
            std::vector<int> y;
            for (const auto& s : batch) y.push_back(s.label);
            Tensor logits = model.forward(x);
            Tensor glogits;
            const Scalar loss = nn::softmax_cross_entropy(logits, y, &glogits);
            if (!std::isfinite(loss)) {
                detail::dump_diagnostic(cfg.nan_checkpoint_path, log.config_json, model.params());
                throw std::runtime_error("train_pretext: NaN loss at epoch " +
                                         std::to_string(epoch));
            }
            opt.zero_grad();
            model.backward(glogits);
            opt.step();
            loss_sum += loss * static_cast<Scalar>(batch.size());
            for (std::size_t s = 0; s < batch.size(); ++s) {
                std::size_t arg = 0;
                for (std::size_t j = 1; j < logits.dim(1); ++j)
                    if (logits[s * logits.dim(1) + j] > logits[s * logits.dim(1) + arg]) arg = j;
                if (static_cast<int>(arg) == y[s]) ++correct;
            }
            seen += batch.size();
            ++batches;
            batch.clear();
        };

        for (std::size_t ci : order) {
            const ClipVolume& clip = train_clips[ci];
            const auto fi = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(clip.n_frames()) - 1));
            batch.push_back(prepfram(clip.frame(fi), aset, cfg.augment, rng, PrepMode::train));
            if (static_cast<int>(batch.size()) == cfg.batch_size) flush();
        }
        flush();

        // validation: no augmentation, centered crop, random arrangement draw
        Scalar val_loss = 0, val_acc = 0;
        if (!val_clips.empty()) {
            Rng vrng(cfg.seed ^ 0x5eedU ^ static_cast<std::uint64_t>(epoch));
            std::size_t vcorrect = 0, vseen = 0;
            std::vector<JumbledSample> vbatch;
            auto vflush = [&]() {
                if (vbatch.empty()) return;
                Tensor x = detail::samples_to_batch(vbatch);
                std::vector<int> y;
                for (const auto& s : vbatch) y.push_back(s.label);
                Tensor logits = model.forward(x);
                val_loss += nn::softmax_cross_entropy(logits, y) *
                            static_cast<Scalar>(vbatch.size());
                for (std::size_t s = 0; s < vbatch.size(); ++s) {
                    std::size_t arg = 0;
                    for (std::size_t j = 1; j < logits.dim(1); ++j)
                        if (logits[s * logits.dim(1) + j] > logits[s * logits.dim(1) + arg])
                            arg = j;
                    if (static_cast<int>(arg) == y[s]) ++vcorrect;
                }
                vseen += vbatch.size();
                vbatch.clear();
            };
            for (const auto& clip : val_clips) {
                const auto fi = static_cast<std::size_t>(
                    vrng.uniform_int(0, static_cast<std::int64_t>(clip.n_frames()) - 1));
                vbatch.push_back(
                    prepfram(clip.frame(fi), aset, cfg.augment, vrng, PrepMode::valid));
                if (static_cast<int>(vbatch.size()) == cfg.batch_size) vflush();
            }
            vflush();
            val_loss /= static_cast<Scalar>(vseen);
            val_acc = static_cast<Scalar>(vcorrect) / static_cast<Scalar>(vseen);
        }

        EpochStats st;
        st.epoch = epoch;
        st.lr = opt.lr();
        st.train_loss = seen ? loss_sum / static_cast<Scalar>(seen) : 0;
        st.train_accuracy = seen ? static_cast<Scalar>(correct) / static_cast<Scalar>(seen) : 0;
        st.val_loss = val_loss;
        st.val_accuracy = val_acc;
        st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.append(st);

        if (val_clips.empty()) continue;
        if (val_acc > best_val) {
            best_val = val_acc;
            log.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.plateau_patience) {
            break;
        }
    }
    return log;
}

/// Uniform frame draw for downstream training: without replacement when the
/// clip is long enough, with replacement otherwise; sorted so temporal order
/// is preserved.
inline std::vector<int> sample_train_frames(int n_frames_in_clip, int count, Rng& rng) {
    if (n_frames_in_clip < 1) throw std::invalid_argument("sample_train_frames: empty clip");
    std::vector<int> idx;
    if (n_frames_in_clip >= count) {
        std::vector<int> all(static_cast<std::size_t>(n_frames_in_clip));
        std::iota(all.begin(), all.end(), 0);
        std::shuffle(all.begin(), all.end(), rng.engine());
        idx.assign(all.begin(), all.begin() + count);
    } else {
        for (int i = 0; i < count; ++i)
            idx.push_back(static_cast<int>(rng.uniform_int(0, n_frames_in_clip - 1)));
    }
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Per-class N_negative / N_positive over the training split.
inline std::vector<Scalar> default_pos_weights(const std::vector<ClipVolume>& clips) {
    std::vector<Scalar> w(3, 1.0);
    for (std::size_t j = 0; j < 3; ++j) {
        std::size_t pos = 0;
        for (const auto& c : clips) pos += static_cast<std::size_t>(c.labels[j]);
        const std::size_t neg = clips.size() - pos;
        if (pos > 0 && neg > 0) w[j] = static_cast<Scalar>(neg) / static_cast<Scalar>(pos);
    }
    return w;
}

/// Downstream training: the encoder stays frozen (per model config); each
/// epoch visits every clip once, re-drawing its 16 frames, and optimizes the
/// weighted BCE over the 3 binary-relevance labels with one update per clip.
inline TrainLog train_downstream(const std::vector<ClipVolume>& train_clips,
                                 const std::vector<ClipVolume>& val_clips,
                                 DownstreamModel& model, const DownstreamTrainConfig& cfg) {
    cfg.validate();
    if (train_clips.empty()) throw std::invalid_argument("train_downstream: empty dataset");
    for (const auto& c : train_clips)
        if (c.n_frames() == 0)
            throw std::runtime_error("train_downstream: clip " + c.clip_id + " has zero frames");

    const std::vector<Scalar> pos_w =
        cfg.class_pos_weights.empty() ? default_pos_weights(train_clips) : cfg.class_pos_weights;

    TrainLog log;
    log.task = "downstream";
    {
        nlohmann::json j = {{"lr", cfg.lr},
                            {"lr_decay", cfg.lr_decay},
                            {"max_epochs", cfg.max_epochs},
                            {"frames_per_clip", cfg.frames_per_clip},
                            {"pos_weights", pos_w},
                            {"seed", cfg.seed}};
        log.config_json = j.dump();
    }

    Rng rng(cfg.seed);
    nn::RmsProp opt(model.trainable_params(), cfg.lr, cfg.rmsprop_rho, cfg.rmsprop_eps);
    std::vector<std::size_t> order(train_clips.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        opt.set_lr(lr_at_epoch(cfg.lr, cfg.lr_decay, epoch));
        std::shuffle(order.begin(), order.end(), rng.engine());

        Scalar loss_sum = 0;
        for (std::size_t ci : order) {
            const ClipVolume& clip = train_clips[ci];
            const auto idx = sample_train_frames(static_cast<int>(clip.n_frames()),
                                                 cfg.frames_per_clip, rng);
            Tensor x = clip_to_patch_stack(clip, idx);
            Tensor logits = model.forward(x);
            Tensor targets({1, 3});
            for (std::size_t j = 0; j < 3; ++j) targets[j] = clip.labels[j];
            Tensor glogits;
            const Scalar loss = nn::weighted_bce_logits(logits, targets, pos_w, &glogits);
            if (!std::isfinite(loss)) {
                auto ps = model.trainable_params();
                detail::dump_diagnostic(cfg.nan_checkpoint_path, log.config_json, ps);
                throw std::runtime_error("train_downstream: NaN loss at epoch " +
                                         std::to_string(epoch));
            }
            opt.zero_grad();
            model.backward(glogits);
            opt.step();
            loss_sum += loss;
        }

        EpochStats st;
        st.epoch = epoch;
        st.lr = opt.lr();
        st.train_loss = loss_sum / static_cast<Scalar>(train_clips.size());
        st.train_accuracy = 0;

        if (!val_clips.empty()) {
            Rng vrng(cfg.seed ^ 0xa11dULL ^ static_cast<std::uint64_t>(epoch));
            std::vector<PredictionRecord> recs;
            Scalar vloss = 0;
            for (const auto& clip : val_clips) {
                const auto idx = sample_eval_frames(static_cast<int>(clip.n_frames()),
                                                    cfg.frames_per_clip, vrng);
                Tensor logits = model.forward(clip_to_patch_stack(clip, idx));
                Tensor targets({1, 3});
                for (std::size_t j = 0; j < 3; ++j) targets[j] = clip.labels[j];
                vloss += nn::weighted_bce_logits(logits, targets, pos_w);
                PredictionRecord r;
                r.clip_id = clip.clip_id;
                r.plane = clip.plane;
                const auto probs = DownstreamModel::probabilities(logits);
                for (std::size_t j = 0; j < 3; ++j) {
                    r.probs[j] = probs[j];
                    r.labels[j] = clip.labels[j];
                }
                recs.push_back(std::move(r));
            }
            st.val_loss = vloss / static_cast<Scalar>(val_clips.size());
            const auto m = metrics(recs);
            Scalar acc = 0;
            for (std::size_t j = 0; j < 3; ++j) {
                acc += m[j].accuracy;
                st.val_auc[j] = m[j].auc.value_or(0);
            }
            st.val_accuracy = acc / 3;
        }
        st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.append(st);
    }
    return log;
}

/// Geometric-transformation baseline (54-way classification): same loop
/// scaffolding as the pretext task, but the label is the transform class
/// applied to the whole frame.
inline TrainLog train_geo_baseline(const std::vector<ClipVolume>& train_clips,
                                   const std::vector<ClipVolume>& val_clips, PretextModel& model,
                                   const PretextTrainConfig& cfg) {
    cfg.validate();
    if (train_clips.empty()) throw std::invalid_argument("train_geo_baseline: empty dataset");

    TrainLog log;
    log.task = "geo";
    {
        nlohmann::json j = {{"lr", cfg.lr},
                            {"lr_decay", cfg.lr_decay},
                            {"batch_size", cfg.batch_size},
                            {"max_epochs", cfg.max_epochs},
                            {"seed", cfg.seed}};
        log.config_json = j.dump();
    }

    Rng rng(cfg.seed);
    nn::RmsProp opt(model.params(), cfg.lr, cfg.rmsprop_rho, cfg.rmsprop_eps);
    std::vector<std::size_t> order(train_clips.size());
    std::iota(order.begin(), order.end(), 0);

    const int L = static_cast<int>(train_clips.front().frames.dim(1));
    const auto transforms = enumerate_geo_transforms(L);

    auto run_split = [&](const std::vector<ClipVolume>& clips, Rng& r, bool train, Scalar& loss_out,
                         Scalar& acc_out) {
        Scalar loss_sum = 0;
        std::size_t correct = 0, seen = 0;
        std::vector<Tensor> xs;
        std::vector<int> ys;
        auto flush = [&]() {
            if (xs.empty()) return;
            Tensor x({xs.size(), kNumBranches, kPatchOut, kPatchOut});
            for (std::size_t s = 0; s < xs.size(); ++s)
                std::copy(xs[s].data(), xs[s].data() + xs[s].size(),
                          x.data() + s * xs[s].size());
            Tensor logits = model.forward(x);
            Tensor glogits;
            const Scalar loss = nn::softmax_cross_entropy(logits, ys, &glogits);
            if (!std::isfinite(loss)) {
                detail::dump_diagnostic(cfg.nan_checkpoint_path, log.config_json, model.params());
                throw std::runtime_error("train_geo_baseline: NaN loss");
            }
            if (train) {
                opt.zero_grad();
                model.backward(glogits);
                opt.step();
            }
            loss_sum += loss * static_cast<Scalar>(xs.size());
            for (std::size_t s = 0; s < xs.size(); ++s) {
                std::size_t arg = 0;
                for (std::size_t j = 1; j < logits.dim(1); ++j)
                    if (logits[s * logits.dim(1) + j] > logits[s * logits.dim(1) + arg]) arg = j;
                if (static_cast<int>(arg) == ys[s]) ++correct;
            }
            seen += xs.size();
            xs.clear();
            ys.clear();
        };
        for (const auto& clip : clips) {
            const auto fi = static_cast<std::size_t>(
                r.uniform_int(0, static_cast<std::int64_t>(clip.n_frames()) - 1));
            const int cls = static_cast<int>(
                r.uniform_int(0, static_cast<std::int64_t>(transforms.size()) - 1));
            const Frame tf = apply_geo_transform(clip.frame(fi),
                                                 transforms[static_cast<std::size_t>(cls)]);
            xs.push_back(frame_to_patches(tf));
            ys.push_back(cls);
            if (static_cast<int>(xs.size()) == cfg.batch_size) flush();
        }
        flush();
        loss_out = seen ? loss_sum / static_cast<Scalar>(seen) : 0;
        acc_out = seen ? static_cast<Scalar>(correct) / static_cast<Scalar>(seen) : 0;
    };

    Scalar best_val = -1;
    int since_best = 0;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        opt.set_lr(lr_at_epoch(cfg.lr, cfg.lr_decay, epoch));
        std::shuffle(order.begin(), order.end(), rng.engine());
        EpochStats st;
        st.epoch = epoch;
        st.lr = opt.lr();
        {
            std::vector<ClipVolume> pass;
            pass.reserve(order.size());
            for (std::size_t ci : order) pass.push_back(train_clips[ci]);
            run_split(pass, rng, true, st.train_loss, st.train_accuracy);
        }
        if (!val_clips.empty()) {
            Rng vrng(cfg.seed ^ 0x6e0ULL ^ static_cast<std::uint64_t>(epoch));
            run_split(val_clips, vrng, false, st.val_loss, st.val_accuracy);
        }
        st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.append(st);
        if (val_clips.empty()) continue;
        if (st.val_accuracy > best_val) {
            best_val = st.val_accuracy;
            log.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.plateau_patience) {
            break;
        }
    }
    return log;
}

}  // namespace skid
