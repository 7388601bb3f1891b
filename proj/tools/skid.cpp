// skid: command-line front end for the whole pipeline.

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "skid/arrangements.hpp"
#include "skid/datakit.hpp"
#include "skid/evalkit.hpp"
#include "skid/interpret.hpp"
#include "skid/skidnet.hpp"
#include "skid/trainkit.hpp"

namespace fs = std::filesystem;
using namespace skid;

namespace {

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path);
    return nlohmann::json::parse(in);
}

SkidConfig model_config_from(const nlohmann::json& j) {
    SkidConfig cfg = SkidConfig::miniature();
    if (j.contains("model")) {
        const auto& m = j.at("model");
        if (m.is_string()) {
            const std::string v = m.get<std::string>();
            if (v == "v1") cfg = SkidConfig::v1();
            else if (v == "v2") cfg = SkidConfig::v2();
            else if (v == "v3") cfg = SkidConfig::v3();
            else if (v == "noblocks") cfg = SkidConfig::noblocks();
            else if (v == "miniature") cfg = SkidConfig::miniature();
            else throw std::runtime_error("unknown model variant " + v);
        } else {
            cfg = m.get<SkidConfig>();
        }
    }
    return cfg;
}

std::vector<ClipVolume> load_split(const std::string& root, const std::string& split, Plane plane,
                                   LabelSchema schema) {
    return load_clips(load_manifest(root, split, plane, schema));
}

Plane plane_arg(const std::string& s) { return plane_from_name(s); }

int label_index_from(const std::string& s) {
    if (s == "abn" || s == "abnormal") return 0;
    if (s == "acl") return 1;
    if (s == "men" || s == "meniscus") return 2;
    throw std::runtime_error("unknown class " + s + " (expected abn|acl|men)");
}

void write_records_and_metrics(const std::vector<PredictionRecord>& records,
                               const std::string& records_path,
                               const std::string& metrics_path, std::uint64_t seed) {
    if (!records_path.empty()) save_records_csv(records, records_path);
    if (metrics_path.empty()) return;
    const auto m = metrics(records);
    nlohmann::json out;
    static const char* names[3] = {"abnormal", "acl", "meniscus"};
    for (std::size_t j = 0; j < 3; ++j) {
        nlohmann::json cls = {{"accuracy", m[j].accuracy},
                              {"sensitivity", m[j].sensitivity},
                              {"specificity", m[j].specificity}};
        if (m[j].auc) {
            cls["auc"] = *m[j].auc;
            const auto ci = bootstrap_ci(
                records,
                [j](const std::vector<PredictionRecord>& r) {
                    return metrics(r)[j].auc ? std::optional<Scalar>(*metrics(r)[j].auc)
                                             : std::nullopt;
                },
                1000, 0.05, 0.95, seed);
            cls["auc_ci"] = {ci.lo, ci.hi};
        }
        out[names[j]] = cls;
    }
    std::ofstream f(metrics_path);
    if (!f) throw std::runtime_error("cannot write " + metrics_path);
    f << out.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SKID: self-supervised knee-injury diagnosis pipeline"};
    app.require_subcommand(1);
    app.fallthrough();
    std::uint64_t seed = 0;
    app.add_option("--seed", seed, "global RNG seed")->capture_default_str();

    // ---- gen-arrangements
    auto* gen = app.add_subcommand("gen-arrangements", "generate an arrangement set");
    int gen_n = 9, gen_k = 1000;
    std::string gen_out;
    gen->add_option("--n", gen_n, "patch count (perfect square)")->capture_default_str();
    gen->add_option("--k", gen_k, "number of arrangements")->capture_default_str();
    gen->add_option("--out", gen_out, "output path")->required();

    // ---- synth-data
    auto* synth = app.add_subcommand("synth-data", "generate the synthetic dataset");
    std::string synth_out;
    int synth_train = 113, synth_valid = 24, synth_test = 24, synth_size = 192;
    synth->add_option("--out", synth_out, "dataset root")->required();
    synth->add_option("--train-clips", synth_train)->capture_default_str();
    synth->add_option("--valid-clips", synth_valid)->capture_default_str();
    synth->add_option("--test-clips", synth_test)->capture_default_str();
    synth->add_option("--frame-size", synth_size)->capture_default_str();

    // ---- validate-data
    auto* vd = app.add_subcommand("validate-data", "fail-fast manifest and clip validation");
    std::string vd_root, vd_split = "train", vd_plane = "sagittal", vd_schema = "mrnet3";
    vd->add_option("--data", vd_root, "dataset root")->required();
    vd->add_option("--split", vd_split)->capture_default_str();
    vd->add_option("--plane", vd_plane)->capture_default_str();
    vd->add_option("--schema", vd_schema)->capture_default_str();

    // ---- import
    auto* imp = app.add_subcommand("import", "convert per-frame PGM images into a SKIDVOL clip");
    std::string imp_in, imp_out;
    int imp_size = 256;
    imp->add_option("--in", imp_in, "directory of .pgm frames (sorted by name)")->required();
    imp->add_option("--out", imp_out, "output .skidvol path")->required();
    imp->add_option("--size", imp_size, "bilinear resize target")->capture_default_str();

    // ---- dump-samples
    auto* ds = app.add_subcommand("dump-samples", "write jumbled patch grids as PNGs");
    std::string ds_root, ds_arr, ds_out, ds_plane = "sagittal", ds_split = "train";
    int ds_count = 4;
    bool ds_noaug = false;
    ds->add_option("--data", ds_root)->required();
    ds->add_option("--arr", ds_arr, "arrangement-set file")->required();
    ds->add_option("--out", ds_out, "output directory")->required();
    ds->add_option("--plane", ds_plane)->capture_default_str();
    ds->add_option("--split", ds_split)->capture_default_str();
    ds->add_option("--count", ds_count)->capture_default_str();
    ds->add_flag("--no-aug", ds_noaug, "validation pipeline (no augmentation)");

    // ---- pretext-train
    auto* pt = app.add_subcommand("pretext-train", "train the jigsaw pretext model");
    std::string pt_cfg, pt_root, pt_arr, pt_outdir, pt_plane = "sagittal";
    pt->add_option("--config", pt_cfg, "JSON config")->required();
    pt->add_option("--data", pt_root)->required();
    pt->add_option("--arr", pt_arr)->required();
    pt->add_option("--out-dir", pt_outdir)->required();
    pt->add_option("--plane", pt_plane)->capture_default_str();

    // ---- downstream-train
    auto* dt = app.add_subcommand("downstream-train", "train the frozen-encoder classifier");
    std::string dt_cfg, dt_root, dt_enc, dt_outdir, dt_plane = "sagittal";
    dt->add_option("--config", dt_cfg)->required();
    dt->add_option("--data", dt_root)->required();
    dt->add_option("--encoder", dt_enc, "pretext checkpoint")->required();
    dt->add_option("--out-dir", dt_outdir)->required();
    dt->add_option("--plane", dt_plane)->capture_default_str();

    // ---- geo-train
    auto* gt = app.add_subcommand("geo-train", "train the geometric-transformation baseline");
    std::string gt_cfg, gt_root, gt_outdir, gt_plane = "sagittal";
    gt->add_option("--config", gt_cfg)->required();
    gt->add_option("--data", gt_root)->required();
    gt->add_option("--out-dir", gt_outdir)->required();
    gt->add_option("--plane", gt_plane)->capture_default_str();

    // ---- evaluate
    auto* ev = app.add_subcommand("evaluate", "per-plane clip evaluation (16 frames x 8 draws)");
    std::string ev_ckpt, ev_root, ev_split = "valid", ev_plane = "sagittal";
    std::string ev_records, ev_metrics;
    ev->add_option("--ckpt", ev_ckpt, "downstream checkpoint")->required();
    ev->add_option("--data", ev_root)->required();
    ev->add_option("--split", ev_split)->capture_default_str();
    ev->add_option("--plane", ev_plane)->capture_default_str();
    ev->add_option("--records", ev_records, "prediction records CSV out");
    ev->add_option("--metrics", ev_metrics, "metrics JSON out");

    // ---- ensemble
    auto* en = app.add_subcommand("ensemble", "multi-plane weighted-vote ensembling");
    std::vector<std::string> en_records, en_val_records;
    std::string en_out;
    en->add_option("--records", en_records, "test records CSV, one per plane (sag cor ax)")
        ->expected(3)
        ->required();
    en->add_option("--val-records", en_val_records,
                   "validation records CSV used for the accuracy weights, one per plane")
        ->expected(3)
        ->required();
    en->add_option("--out", en_out, "metrics JSON out")->required();

    // ---- gradcam
    auto* gc = app.add_subcommand("gradcam", "saliency overlays for one clip");
    std::string gc_ckpt, gc_clip, gc_class = "abn", gc_out;
    int gc_frames = 16;
    gc->add_option("--ckpt", gc_ckpt, "downstream checkpoint")->required();
    gc->add_option("--clip", gc_clip, "SKIDVOL clip path")->required();
    gc->add_option("--class", gc_class, "abn|acl|men")->capture_default_str();
    gc->add_option("--out", gc_out, "output directory")->required();
    gc->add_option("--frames", gc_frames)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const ArrangementSet set = generate_arrangement_set(gen_n, gen_k, seed);
            save_arrangement_set(set, gen_out);
            std::cout << "wrote " << gen_k << " arrangements of " << gen_n << " patches to "
                      << gen_out << "\n";
        } else if (*synth) {
            SyntheticSpec spec;
            spec.frame_size = synth_size;
            spec.seed = seed;
            spec.n_clips = synth_train;
            generate_synthetic_dataset(spec, synth_out, "train");
            spec.seed = seed + 1;
            spec.n_clips = synth_valid;
            generate_synthetic_dataset(spec, synth_out, "valid");
            spec.seed = seed + 2;
            spec.n_clips = synth_test;
            generate_synthetic_dataset(spec, synth_out, "test");
            std::cout << "synthetic dataset at " << synth_out << " (" << synth_train << "/"
                      << synth_valid << "/" << synth_test << " clips)\n";
        } else if (*vd) {
            const auto m = load_manifest(vd_root, vd_split, plane_arg(vd_plane),
                                         schema_from_name(vd_schema));
            std::array<int, 3> pos{};
            for (const auto& e : m.entries)
                for (int j = 0; j < 3; ++j) pos[static_cast<std::size_t>(j)] += e.labels[static_cast<std::size_t>(j)];
            std::cout << "ok: " << m.entries.size() << " clips, positives " << pos[0] << "/"
                      << pos[1] << "/" << pos[2] << "\n";
        } else if (*imp) {
            import_pgm_directory(imp_in, imp_out, imp_size);
            std::cout << "wrote " << imp_out << "\n";
        } else if (*ds) {
            const auto aset = load_arrangement_set(ds_arr);
            const auto clips = load_split(ds_root, ds_split, plane_arg(ds_plane),
                                          LabelSchema::mrnet3);
            if (clips.empty()) throw std::runtime_error("no clips in split " + ds_split);
            fs::create_directories(ds_out);
            Rng rng(seed);
            const AugmentationSpec aug =
                ds_noaug ? AugmentationSpec::disabled() : AugmentationSpec{};
            const PrepMode mode = ds_noaug ? PrepMode::valid : PrepMode::train;
            for (int i = 0; i < ds_count; ++i) {
                const auto& clip = clips[static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(clips.size()) - 1))];
                const auto fi = static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(clip.n_frames()) - 1));
                const JumbledSample s = prepfram(clip.frame(fi), aset, aug, rng, mode);
                // 3x3 grid of 64x64 patches
                const std::size_t side = 3 * kPatchOut;
                std::vector<std::uint8_t> rgb(side * side * 3);
                for (std::size_t p = 0; p < s.patches.size(); ++p) {
                    const std::size_t gr = p / 3, gc = p % 3;
                    for (std::size_t y = 0; y < kPatchOut; ++y)
                        for (std::size_t x = 0; x < kPatchOut; ++x) {
                            const Scalar v = std::clamp(s.patches[p].at(y, x), Scalar(0),
                                                        Scalar(1));
                            const auto b = static_cast<std::uint8_t>(std::lround(255 * v));
                            const std::size_t o =
                                ((gr * kPatchOut + y) * side + gc * kPatchOut + x) * 3;
                            rgb[o] = rgb[o + 1] = rgb[o + 2] = b;
                        }
                }
                std::ostringstream name;
                name << ds_out << "/sample_" << std::setw(3) << std::setfill('0') << i
                     << "_label" << s.label << ".png";
                png::write_rgb(name.str(), side, side, rgb);
            }
            std::cout << "wrote " << ds_count << " sample grids to " << ds_out << "\n";
        } else if (*pt) {
            const auto j = read_json(pt_cfg);
            SkidConfig mcfg = model_config_from(j);
            const auto aset = load_arrangement_set(pt_arr);
            mcfg.n_classes = static_cast<std::size_t>(aset.k());
            PretextTrainConfig tcfg;
            if (j.contains("train")) tcfg = j.at("train").get<PretextTrainConfig>();
            if (seed) tcfg.seed = seed;
            const Plane plane = plane_arg(pt_plane);
            const auto train = load_split(pt_root, "train", plane, LabelSchema::mrnet3);
            const auto valid = load_split(pt_root, "valid", plane, LabelSchema::mrnet3);
            fs::create_directories(pt_outdir);
            tcfg.nan_checkpoint_path = pt_outdir + "/nan_diagnostic.ckpt";
            PretextModel model(mcfg);
            Rng init_rng(tcfg.seed);
            model.init(init_rng);
            const TrainLog log = train_pretext(train, valid, aset, model, tcfg);
            nlohmann::json echo = {{"model", mcfg}, {"train", tcfg}};
            ckpt::save(pt_outdir + "/pretext.ckpt", echo.dump(), model.params());
            save_log_csv(log, pt_outdir + "/train_log.csv");
            save_log_json(log, pt_outdir + "/train_log.json");
            std::cout << "pretext model saved to " << pt_outdir << "/pretext.ckpt\n";
        } else if (*dt) {
            const auto j = read_json(dt_cfg);
            DownstreamTrainConfig tcfg;
            if (j.contains("train")) tcfg = j.at("train").get<DownstreamTrainConfig>();
            if (seed) tcfg.seed = seed;
            DownstreamConfig hcfg;
            if (j.contains("head")) hcfg = j.at("head").get<DownstreamConfig>();

            // encoder comes from the pretext checkpoint, weights frozen
            const std::string echo = ckpt::read_config(dt_enc);
            SkidConfig mcfg = nlohmann::json::parse(echo).at("model").get<SkidConfig>();
            DownstreamModel model(mcfg, hcfg);
            Rng init_rng(tcfg.seed);
            model.init(init_rng);
            {
                // load only the encoder parameters from the pretext checkpoint
                std::vector<nn::Param*> enc_params;
                model.encoder().collect_params(enc_params);
                ckpt::load(dt_enc, enc_params);
            }
            const Plane plane = plane_arg(dt_plane);
            const auto train = load_split(dt_root, "train", plane, LabelSchema::mrnet3);
            const auto valid = load_split(dt_root, "valid", plane, LabelSchema::mrnet3);
            fs::create_directories(dt_outdir);
            tcfg.nan_checkpoint_path = dt_outdir + "/nan_diagnostic.ckpt";
            const TrainLog log = train_downstream(train, valid, model, tcfg);
            nlohmann::json full = {{"model", mcfg}, {"head", hcfg}, {"train", tcfg}};
            std::vector<nn::Param*> all;
            model.collect_params(all);
            ckpt::save(dt_outdir + "/downstream.ckpt", full.dump(), all);
            save_log_csv(log, dt_outdir + "/train_log.csv");
            save_log_json(log, dt_outdir + "/train_log.json");
            std::cout << "downstream model saved to " << dt_outdir << "/downstream.ckpt\n";
        } else if (*gt) {
            const auto j = read_json(gt_cfg);
            SkidConfig mcfg = model_config_from(j);
            mcfg.n_classes = 54;
            PretextTrainConfig tcfg;
            if (j.contains("train")) tcfg = j.at("train").get<PretextTrainConfig>();
            if (seed) tcfg.seed = seed;
            const Plane plane = plane_arg(gt_plane);
            const auto train = load_split(gt_root, "train", plane, LabelSchema::mrnet3);
            const auto valid = load_split(gt_root, "valid", plane, LabelSchema::mrnet3);
            fs::create_directories(gt_outdir);
            tcfg.nan_checkpoint_path = gt_outdir + "/nan_diagnostic.ckpt";
            PretextModel model(mcfg);
            Rng init_rng(tcfg.seed);
            model.init(init_rng);
            const TrainLog log = train_geo_baseline(train, valid, model, tcfg);
            nlohmann::json echo = {{"model", mcfg}, {"train", tcfg}};
            ckpt::save(gt_outdir + "/geo.ckpt", echo.dump(), model.params());
            save_log_csv(log, gt_outdir + "/train_log.csv");
            save_log_json(log, gt_outdir + "/train_log.json");
            std::cout << "geo baseline saved to " << gt_outdir << "/geo.ckpt\n";
        } else if (*ev) {
            const std::string echo = ckpt::read_config(ev_ckpt);
            const auto cj = nlohmann::json::parse(echo);
            SkidConfig mcfg = cj.at("model").get<SkidConfig>();
            DownstreamConfig hcfg = cj.value("head", DownstreamConfig{});
            DownstreamModel model(mcfg, hcfg);
            Rng init_rng(seed);
            model.init(init_rng);
            std::vector<nn::Param*> all;
            model.collect_params(all);
            ckpt::load(ev_ckpt, all);

            const Plane plane = plane_arg(ev_plane);
            const auto clips = load_split(ev_root, ev_split, plane, LabelSchema::mrnet3);
            Rng rng(seed);
            std::vector<PredictionRecord> records;
            for (const auto& clip : clips) {
                auto fwd = [&](const std::vector<int>& idx) {
                    const Tensor logits = model.forward(clip_to_patch_stack(clip, idx));
                    const auto p = DownstreamModel::probabilities(logits);
                    return std::array<Scalar, 3>{p[0], p[1], p[2]};
                };
                PredictionRecord r;
                r.clip_id = clip.clip_id;
                r.plane = plane;
                r.probs = predict_clip(fwd, static_cast<int>(clip.n_frames()), 16, 8, rng);
                for (std::size_t j = 0; j < 3; ++j) r.labels[j] = clip.labels[j];
                records.push_back(std::move(r));
            }
            write_records_and_metrics(records, ev_records, ev_metrics, seed);
            std::cout << "evaluated " << records.size() << " clips\n";
        } else if (*en) {
            // per-plane validation accuracy -> log-odds weights
            std::vector<std::vector<Scalar>> acc(3, std::vector<Scalar>(3));
            for (std::size_t i = 0; i < 3; ++i) {
                const auto vrecs = load_records_csv(en_val_records[i]);
                const auto m = metrics(vrecs);
                for (std::size_t j = 0; j < 3; ++j)
                    acc[j][i] = std::clamp(m[j].accuracy, Scalar(1e-6), Scalar(1 - 1e-6));
            }
            const EnsembleWeights w = compute_weights(acc);
            if (w.clamped_negative)
                std::cerr << "warning: non-positive log-odds weight clamped to zero\n";

            std::vector<PredictionRecord> all;
            for (const auto& p : en_records) {
                const auto r = load_records_csv(p);
                all.insert(all.end(), r.begin(), r.end());
            }
            // group by clip_id
            std::map<std::string, std::vector<PredictionRecord>> by_clip;
            for (auto& r : all) by_clip[r.clip_id].push_back(r);
            std::vector<PredictionRecord> fused;
            for (auto& [id, group] : by_clip) {
                const EnsembleResult res = ensemble_predict(group, w);
                PredictionRecord r;
                r.clip_id = id;
                r.plane = group.front().plane;
                for (std::size_t j = 0; j < 3; ++j) {
                    r.probs[j] = res.scores[j];
                    r.labels[j] = group.front().labels[j];
                }
                fused.push_back(std::move(r));
            }
            write_records_and_metrics(fused, "", en_out, seed);
            std::cout << "ensembled " << fused.size() << " clips -> " << en_out << "\n";
        } else if (*gc) {
            const std::string echo = ckpt::read_config(gc_ckpt);
            const auto cj = nlohmann::json::parse(echo);
            SkidConfig mcfg = cj.at("model").get<SkidConfig>();
            DownstreamConfig hcfg = cj.value("head", DownstreamConfig{});
            DownstreamModel model(mcfg, hcfg);
            Rng init_rng(seed);
            model.init(init_rng);
            std::vector<nn::Param*> all;
            model.collect_params(all);
            ckpt::load(gc_ckpt, all);

            ClipVolume clip = load_clip(gc_clip);
            const int label = label_index_from(gc_class);
            Rng rng(seed);
            const auto idx = sample_eval_frames(static_cast<int>(clip.n_frames()), gc_frames,
                                                rng);
            const Tensor stack = clip_to_patch_stack(clip, idx);
            fs::create_directories(gc_out);
            const std::size_t side = clip.frames.dim(1);
            for (std::size_t t = 0; t < idx.size(); ++t) {
                const SaliencyMap sm = gradcam_downstream(model, stack, label, t, side);
                const Frame fr = clip.frame(static_cast<std::size_t>(idx[t]));
                std::ostringstream name;
                name << gc_out << "/cam_" << gc_class << "_" << std::setw(3) << std::setfill('0')
                     << t << ".png";
                save_overlay_png(name.str(), fr.pixels, sm);
            }
            std::cout << "wrote " << idx.size() << " overlays to " << gc_out << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
