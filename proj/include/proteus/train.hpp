#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include "proteus/checkpoint.hpp"
#include "proteus/config.hpp"
#include "proteus/dataset.hpp"
#include "proteus/distill.hpp"
#include "proteus/eval.hpp"
#include "proteus/optim.hpp"

namespace proteus {

inline void apply_run_flags(const RunConfig& cfg) {
    set_deterministic(cfg.determinism);
    set_debug_checks(cfg.debug);
}

inline void ensure_output_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError(dir + ": cannot create output directory: " + ec.message());
}

inline double wall_ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

// ----------------------------- batch assembly -----------------------------

template <typename T>
Tensor<T> assemble_images(const DatasetContainer& ds, const std::vector<int64_t>& idx,
                          const AugRecipe& recipe, bool augment, Rng& aug_rng) {
    int64_t B = static_cast<int64_t>(idx.size());
    int64_t S = recipe.output_size;
    Tensor<T> out({B, ds.channels, S, S});
    for (int64_t i = 0; i < B; ++i) {
        Tensor<T> img = augment ? augment_train<T>(ds, idx[static_cast<size_t>(i)], recipe, aug_rng)
                                : center_view<T>(ds, idx[static_cast<size_t>(i)], S, recipe.mean,
                                                 recipe.stdev);
        std::copy(img.data.begin(), img.data.end(), out.data.begin() + i * img.numel());
    }
    return out;
}

inline AugRecipe recipe_for(const DatasetContainer& ds, int64_t image_size) {
    AugRecipe r;
    r.output_size = image_size;
    ds.channel_stats(r.mean, r.stdev);
    return r;
}

// deterministic batch indices: per-epoch permutation, remainder dropped
struct BatchPlan {
    int64_t n = 0, batch = 0;
    uint64_t seed = 0;
    int64_t steps_per_epoch() const { return std::max<int64_t>(1, n / batch); }
    int64_t epoch_of(int64_t step) const { return step / steps_per_epoch(); }

    std::vector<int64_t> indices(int64_t step) const {
        int64_t epoch = epoch_of(step);
        int64_t slot = step % steps_per_epoch();
        std::vector<int64_t> perm = epoch_permutation(n, epoch, seed);
        std::vector<int64_t> out;
        int64_t take = std::min(batch, n);
        out.reserve(static_cast<size_t>(take));
        for (int64_t i = 0; i < take; ++i)
            out.push_back(perm[static_cast<size_t>((slot * batch + i) % n)]);
        return out;
    }
};

// ----------------------------- teacher training -----------------------------

struct TrainResult {
    double final_loss = 0;
    double final_accuracy = 0;
    std::string checkpoint_path;
    std::vector<MetricsRow> rows;
};

// Supervised CE training of a ViT + linear head; acts as the frozen teacher
// for the distillation experiments.
template <typename T>
TrainResult run_train_teacher(const RunConfig& cfg) {
    apply_run_flags(cfg);
    cfg.validate();
    ensure_output_dir(cfg.output_dir);
    cfg.write_resolved(cfg.output_dir + "/config.json");
    DatasetContainer ds = load_container(cfg.data_path);
    if (!ds.has_labels) throw ConfigError("config field 'data': train_teacher needs a labeled dataset");
    if (ds.channels != cfg.teacher.channels)
        throw ConfigError("config field 'teacher.channels': dataset has " + std::to_string(ds.channels));
    ViTConfig model_cfg = cfg.teacher;
    model_cfg.validate();
    int64_t classes = ds.class_count;

    Rng root(cfg.seed);
    ViTParams<T> params = init_params<T>(model_cfg, cfg.seed);
    NamedParams<T> head = init_classifier<T>(model_cfg.dim, classes, detail::splitmix64(cfg.seed ^ 0x11));
    std::vector<std::pair<std::string, Var<T>>> trainables;
    for (auto& [name, var] : params.entries) trainables.emplace_back(name, var);
    for (auto& [name, var] : head.entries) trainables.emplace_back(name, var);

    AugRecipe recipe = recipe_for(ds, model_cfg.image_size);
    Rng aug_rng = root.child("aug");
    BatchPlan plan{ds.n, std::min<int64_t>(cfg.batch_size, ds.n), cfg.seed};
    OptState<T> opt;
    MetricsWriter metrics(cfg.output_dir + "/metrics.csv", cfg.determinism);
    TrainResult res;

    for (int64_t step = 0; step < cfg.schedule.total_steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<int64_t> idx = plan.indices(step);
        Tensor<T> images = assemble_images<T>(ds, idx, recipe, cfg.augment, aug_rng);
        std::vector<int64_t> labels;
        labels.reserve(idx.size());
        for (int64_t i : idx) labels.push_back(ds.label(i));
        ViTOutput<T> out = vit_forward(params, model_cfg, images);
        Var<T> logits = classify(head, out.cls);
        Var<T> loss = cross_entropy(logits, labels);
        GradMap<T> grads = backward(loss);
        adamw_step(trainables, grads, opt, cfg.schedule);

        MetricsRow row;
        row.step = step;
        row.epoch = plan.epoch_of(step);
        row.lr = lr_at(step, cfg.schedule);
        row.loss.ce = static_cast<double>(loss->value[0]);
        row.loss.total = row.loss.ce;
        row.wall_ms = wall_ms_since(t0);
        metrics.add(row);
        res.rows.push_back(row);
        res.final_loss = row.loss.total;
    }
    metrics.close();

    nlohmann::json meta = {{"model", model_cfg.to_json()}, {"classes", classes}};
    auto tensors = params_to_f32(params);
    auto head_tensors = params_to_f32(head);
    tensors.insert(tensors.end(), head_tensors.begin(), head_tensors.end());
    auto opt_tensors = opt_state_to_f32(opt);
    tensors.insert(tensors.end(), opt_tensors.begin(), opt_tensors.end());
    res.checkpoint_path = cfg.output_dir + "/checkpoint.prtc";
    save_checkpoint(res.checkpoint_path, tensors, meta.dump());
    return res;
}

// ----------------------------- checkpoint loading -----------------------------

template <typename T>
ViTParams<T> load_vit_params(const Checkpoint& ck, const ViTConfig& cfg, bool requires_grad) {
    ViTParams<T> expect = init_params<T>(cfg, 0, requires_grad);
    ViTParams<T> out;
    for (auto& [name, var] : expect.entries) {
        const Tensor<float>* t = ck.find(name);
        if (!t) throw IoError("checkpoint is missing tensor '" + name + "'");
        if (t->shape != var->value.shape)
            throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(t->shape) +
                          ", config expects " + shape_str(var->value.shape));
        out.add(name, t->template cast<T>(), requires_grad);
    }
    return out;
}

template <typename T>
NamedParams<T> load_classifier(const Checkpoint& ck, bool requires_grad) {
    const Tensor<float>* w = ck.find("head.weight");
    const Tensor<float>* b = ck.find("head.bias");
    if (!w || !b) throw IoError("checkpoint has no classifier head");
    NamedParams<T> head;
    head.add("head.weight", w->template cast<T>(), requires_grad);
    head.add("head.bias", b->template cast<T>(), requires_grad);
    return head;
}

struct TeacherBundle {
    ViTConfig cfg;
    int64_t classes = 0;
};

inline TeacherBundle teacher_meta(const Checkpoint& ck) {
    if (ck.config_json.empty()) throw IoError("checkpoint carries no embedded config");
    nlohmann::json j = nlohmann::json::parse(ck.config_json, nullptr, false);
    if (j.is_discarded()) throw IoError("checkpoint config entry is not valid JSON");
    TeacherBundle tb;
    tb.cfg = ViTConfig::from_json(j.at("model"));
    tb.classes = j.value("classes", 0);
    return tb;
}

// ----------------------------- distillation -----------------------------

struct DistillRunResult {
    std::vector<MetricsRow> rows;
    LossBreakdown final_loss;
    std::string checkpoint_path;
    std::string inherit_summary;
    uint64_t label_reads = 0;

    // mean loss fields per epoch, for the ablation reports
    std::vector<LossBreakdown> epoch_means() const {
        std::vector<LossBreakdown> out;
        std::vector<int64_t> counts;
        for (const MetricsRow& r : rows) {
            if (r.epoch >= static_cast<int64_t>(out.size())) {
                out.resize(static_cast<size_t>(r.epoch + 1));
                counts.resize(static_cast<size_t>(r.epoch + 1), 0);
            }
            auto& m = out[static_cast<size_t>(r.epoch)];
            m.token += r.loss.token;
            m.feat += r.loss.feat;
            m.patch += r.loss.patch;
            m.ce += r.loss.ce;
            m.kl += r.loss.kl;
            m.total += r.loss.total;
            counts[static_cast<size_t>(r.epoch)]++;
        }
        for (size_t e = 0; e < out.size(); ++e) {
            double c = std::max<int64_t>(1, counts[e]);
            out[e].token /= c;
            out[e].feat /= c;
            out[e].patch /= c;
            out[e].ce /= c;
            out[e].kl /= c;
            out[e].total /= c;
        }
        return out;
    }
};

// Proxy-task distillation (or one of the conventional-KD ablation modes)
// from a frozen teacher checkpoint into a fresh or weight-inherited student.
template <typename T>
DistillRunResult run_distill(const RunConfig& cfg) {
    apply_run_flags(cfg);
    cfg.validate();
    ensure_output_dir(cfg.output_dir);
    cfg.write_resolved(cfg.output_dir + "/config.json");

    Checkpoint ck = load_checkpoint(cfg.teacher_checkpoint);
    TeacherBundle tb = teacher_meta(ck);
    ViTParams<T> teacher = load_vit_params<T>(ck, tb.cfg, /*requires_grad=*/false);

    ViTConfig student_cfg = cfg.student;
    if (student_cfg.image_size != tb.cfg.image_size)
        throw ConfigError("config field 'student.image_size': teacher expects " +
                          std::to_string(tb.cfg.image_size));
    if (student_cfg.patch_size != tb.cfg.patch_size)
        throw ConfigError("config field 'student.patch_size': teacher expects " +
                          std::to_string(tb.cfg.patch_size));
    if (student_cfg.channels != tb.cfg.channels)
        throw ConfigError("config field 'student.channels': teacher expects " +
                          std::to_string(tb.cfg.channels));
    student_cfg.validate();

    DatasetContainer ds = load_container(cfg.data_path);
    if (ds.channels != student_cfg.channels)
        throw ConfigError("config field 'data': channel count " + std::to_string(ds.channels) +
                          " does not match model");

    DistillMode mode = parse_distill_mode(cfg.loss_mode);
    DistillRunResult res;

    ViTParams<T> student;
    if (cfg.inherit) {
        auto [inherited, report] = weight_inherit(teacher, tb.cfg, student_cfg,
                                                  detail::splitmix64(cfg.seed ^ 0x5D));
        student = std::move(inherited);
        res.inherit_summary = report.summary();
        std::ofstream rep(cfg.output_dir + "/inherit.txt");
        rep << res.inherit_summary << "\n";
    } else {
        student = init_params<T>(student_cfg, detail::splitmix64(cfg.seed ^ 0x5D));
    }

    ProjectionHeads<T> heads = ProjectionHeads<T>::init(parse_head_kind(cfg.head_kind),
                                                        student_cfg.dim, tb.cfg.dim,
                                                        detail::splitmix64(cfg.seed ^ 0xA1));
    NamedParams<T> student_head, teacher_head;
    bool logit_mode = mode != DistillMode::proteus;
    if (logit_mode) {
        if (tb.classes < 2) throw ConfigError("config field 'teacher_checkpoint': logit modes need a teacher classifier");
        teacher_head = load_classifier<T>(ck, /*requires_grad=*/false);
        student_head = init_classifier<T>(student_cfg.dim, tb.classes, detail::splitmix64(cfg.seed ^ 0xC3));
        if (mode_uses_ce(mode) && !ds.has_labels)
            throw ConfigError("config field 'data': CE modes need a labeled dataset");
    }

    DistillSetup<T> setup;
    setup.teacher = &teacher;
    setup.teacher_cfg = tb.cfg;
    setup.student = &student;
    setup.student_cfg = student_cfg;
    setup.heads = &heads;
    setup.student_head = logit_mode ? &student_head : nullptr;
    setup.teacher_head = logit_mode ? &teacher_head : nullptr;
    setup.weights = cfg.weights;
    setup.mode = mode;
    setup.mask_lo = cfg.mask_lo;
    setup.mask_hi = cfg.mask_hi;
    setup.patch_masked_only = cfg.patch_masked_only;
    setup.feat_includes_cls = cfg.feat_includes_cls;

    AugRecipe recipe = recipe_for(ds, student_cfg.image_size);
    Rng root(cfg.seed);
    Rng aug_rng = root.child("aug");
    Rng mask_rng = root.child("mask");
    BatchPlan plan{ds.n, std::min<int64_t>(cfg.batch_size, ds.n), cfg.seed};
    OptState<T> opt;
    MetricsWriter metrics(cfg.output_dir + "/metrics.csv", cfg.determinism);

    uint64_t label_reads_before = ds.label_reads;
    for (int64_t step = 0; step < cfg.schedule.total_steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        std::vector<int64_t> idx = plan.indices(step);
        DistillBatch<T> batch;
        batch.images = assemble_images<T>(ds, idx, recipe, cfg.augment, aug_rng);
        if (logit_mode && mode_uses_ce(mode)) {
            batch.labels.reserve(idx.size());
            for (int64_t i : idx) batch.labels.push_back(ds.label(i));
        }
        LossBreakdown loss = distill_step(setup, batch, mask_rng, opt, cfg.schedule);

        MetricsRow row;
        row.step = step;
        row.epoch = plan.epoch_of(step);
        row.lr = lr_at(step, cfg.schedule);
        row.loss = loss;
        row.wall_ms = wall_ms_since(t0);
        metrics.add(row);
        res.rows.push_back(row);
        res.final_loss = loss;
    }
    metrics.close();
    res.label_reads = ds.label_reads - label_reads_before;

    // deployment checkpoint: backbone only, heads are discarded
    nlohmann::json meta = {{"model", student_cfg.to_json()}, {"classes", 0}};
    res.checkpoint_path = cfg.output_dir + "/checkpoint.prtc";
    save_checkpoint(res.checkpoint_path, params_to_f32(student), meta.dump());

    // resumable training state: student, heads, classifier, optimizer moments
    auto state = params_to_f32(student, "student.");
    for (auto& [name, var] : heads.named_params())
        state.emplace_back(name, var->value.template cast<float>());
    if (logit_mode) {
        auto ht = params_to_f32(student_head, "student.");
        state.insert(state.end(), ht.begin(), ht.end());
    }
    auto ot = opt_state_to_f32(opt);
    state.insert(state.end(), ot.begin(), ot.end());
    save_checkpoint(cfg.output_dir + "/train_state.prtc", state, meta.dump());
    return res;
}

// ----------------------------- probing -----------------------------

struct ProbeRunResult {
    ProbeResult probe;
    std::string json_path;
};

// Frozen-feature linear probing of a saved checkpoint on a labeled dataset.
template <typename T>
ProbeRunResult run_probe(const RunConfig& cfg) {
    apply_run_flags(cfg);
    cfg.validate();
    ensure_output_dir(cfg.output_dir);
    cfg.write_resolved(cfg.output_dir + "/config.json");
    Checkpoint ck = load_checkpoint(cfg.teacher_checkpoint);
    TeacherBundle tb = teacher_meta(ck);
    ViTParams<T> params = load_vit_params<T>(ck, tb.cfg, /*requires_grad=*/false);
    DatasetContainer ds = load_container(cfg.data_path);
    if (!ds.has_labels) throw ConfigError("config field 'data': probing needs labels");

    FeatureMatrix fm = extract_features(params, tb.cfg, ds, cfg.probe_layers);
    SplitIndices split;
    if (!cfg.test_data_path.empty()) {
        DatasetContainer test_ds = load_container(cfg.test_data_path);
        if (!test_ds.has_labels) throw ConfigError("config field 'test_data': probing needs labels");
        FeatureMatrix fm_test = extract_features(params, tb.cfg, test_ds, cfg.probe_layers);
        split = make_split(fm.labels, cfg.val_fraction, /*test_frac=*/0.0, cfg.seed);
        int64_t base = fm.n;
        fm.values.insert(fm.values.end(), fm_test.values.begin(), fm_test.values.end());
        fm.labels.insert(fm.labels.end(), fm_test.labels.begin(), fm_test.labels.end());
        fm.n += fm_test.n;
        for (int64_t i = 0; i < fm_test.n; ++i) split.test.push_back(base + i);
    } else {
        split = make_split(fm.labels, cfg.val_fraction, cfg.test_fraction, cfg.seed);
    }

    ProbeRunResult out;
    if (cfg.probe_method == "lbfgs") {
        out.probe = probe_lbfgs(fm, split, cfg.probe_max_iter);
    } else {
        SgdProbeOptions opt;
        opt.seed = cfg.seed;
        out.probe = probe_sgd(fm, split, opt);
    }
    out.json_path = cfg.output_dir + "/probe.json";
    std::ofstream js(out.json_path);
    js << out.probe.to_json().dump(2) << "\n";
    return out;
}

// ----------------------------- PCA visualization -----------------------------

struct VisualizeResult {
    std::vector<std::string> ppm_paths;
    std::vector<double> explained;
};

// Patch-token PCA over a small image set, rendered as per-image RGB tiles.
template <typename T>
VisualizeResult run_visualize(const RunConfig& cfg) {
    apply_run_flags(cfg);
    cfg.validate();
    ensure_output_dir(cfg.output_dir);
    cfg.write_resolved(cfg.output_dir + "/config.json");
    Checkpoint ck = load_checkpoint(cfg.teacher_checkpoint);
    TeacherBundle tb = teacher_meta(ck);
    ViTParams<T> params = load_vit_params<T>(ck, tb.cfg, /*requires_grad=*/false);
    DatasetContainer ds = load_container(cfg.data_path);

    int64_t count = std::min<int64_t>(cfg.vis_images, ds.n);
    if (count < 1) throw ConfigError("config field 'visualize.images': nothing to visualize");
    std::vector<double> mean, stdev;
    ds.channel_stats(mean, stdev);
    Tensor<T> images({count, ds.channels, tb.cfg.image_size, tb.cfg.image_size});
    for (int64_t i = 0; i < count; ++i) {
        Tensor<T> img = center_view<T>(ds, i, tb.cfg.image_size, mean, stdev);
        std::copy(img.data.begin(), img.data.end(), images.data.begin() + i * img.numel());
    }
    NoGradGuard ng;
    ViTOutput<T> out = vit_forward(params, tb.cfg, images);
    const Tensor<T>& patches = out.patches->value;  // (count, P, dim)
    int64_t P = tb.cfg.num_patches();
    std::vector<double> feats(static_cast<size_t>(count * P * tb.cfg.dim));
    for (size_t i = 0; i < feats.size(); ++i) feats[i] = static_cast<double>(patches.data[i]);

    PcaRgbResult pca = pca_rgb(feats, count * P, tb.cfg.dim);
    VisualizeResult res;
    res.explained = pca.explained;
    int64_t side = tb.cfg.image_size / tb.cfg.patch_size;
    for (int64_t i = 0; i < count; ++i) {
        std::vector<uint8_t> tile(static_cast<size_t>(P * 3));
        std::copy(pca.rgb.begin() + i * P * 3, pca.rgb.begin() + (i + 1) * P * 3, tile.begin());
        std::string path = cfg.output_dir + "/pca_" + std::to_string(i) + ".ppm";
        write_ppm(path, side, side, tile, cfg.vis_upscale);
        res.ppm_paths.push_back(path);
    }
    std::ofstream js(cfg.output_dir + "/pca.json");
    nlohmann::json j = {{"explained", res.explained}, {"images", res.ppm_paths}};
    js << j.dump(2) << "\n";
    return res;
}

}  // namespace proteus
