#pragma once

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "proteus/train.hpp"

namespace proteus {

// Desk-scale experiment presets. Every preset is self-contained: it
// generates its toy data, trains a supervised teacher, runs the distillation
// variants and writes a summary table.

struct AblateOptions {
    std::string preset = "table2";  // table1 | table2 | inherit
    std::string output_dir = "ablate_out";
    uint64_t seed = 0;
    int seeds = 3;        // table1 repetitions
    std::string data_path;  // optional pre-built toy dataset
    int64_t teacher_steps = 400;
    int64_t distill_steps = 250;
    bool augment = false;  // center views keep the desk-scale loss curves clean
    bool determinism = true;
};

struct AblateRow {
    std::string name;
    uint64_t seed = 0;
    LossBreakdown final_loss;
    double probe_train = 0, probe_val = 0, probe_test = 0;
    bool patch_monotone = false;
};

struct AblateResult {
    std::vector<AblateRow> rows;
    std::string summary_path;
    double hint_mean = 0, logit_mean = 0;  // table1 held-out means
    bool direction_ok = true;
    bool patch_monotone = true;  // table2 full-objective run
};

namespace detail {

inline ViTConfig ablate_teacher_cfg() {
    ViTConfig c;
    c.image_size = 16;
    c.patch_size = 4;
    c.channels = 1;
    c.dim = 32;
    c.depth = 2;
    c.heads = 4;
    c.layers_for_probe = 2;
    return c;
}

inline ViTConfig ablate_student_cfg() {
    ViTConfig c = ablate_teacher_cfg();
    c.dim = 16;
    c.heads = 2;
    return c;
}

inline RunConfig base_run_config(const AblateOptions& opt, uint64_t seed) {
    RunConfig cfg;
    cfg.teacher = ablate_teacher_cfg();
    cfg.student = ablate_student_cfg();
    cfg.batch_size = 16;
    cfg.seed = seed;
    cfg.augment = opt.augment;
    cfg.determinism = opt.determinism;
    return cfg;
}

inline DatasetContainer ablate_dataset(const AblateOptions& opt, uint64_t seed, int64_t per_class) {
    if (!opt.data_path.empty()) return load_container(opt.data_path);
    ToySpec spec;
    spec.classes = 10;
    spec.per_class = per_class;
    spec.size = 16;
    spec.channels = 1;
    spec.seed = seed;
    return gen_toy_dataset(spec);
}

inline std::string train_ablate_teacher(const AblateOptions& opt, const std::string& data_path,
                                        const std::string& out_dir, uint64_t seed) {
    RunConfig cfg = base_run_config(opt, seed);
    cfg.mode = "train_teacher";
    cfg.data_path = data_path;
    cfg.output_dir = out_dir;
    cfg.schedule.total_steps = opt.teacher_steps;
    cfg.schedule.warmup_steps = opt.teacher_steps / 10;
    cfg.schedule.base_lr = 2e-3;
    cfg.schedule.min_lr = 1e-4;
    return run_train_teacher<float>(cfg).checkpoint_path;
}

inline double probe_checkpoint(const std::string& ckpt, const std::string& data_path,
                               const std::string& out_dir, uint64_t seed, AblateRow& row) {
    RunConfig cfg;
    cfg.mode = "probe";
    cfg.teacher_checkpoint = ckpt;
    cfg.data_path = data_path;
    cfg.output_dir = out_dir;
    cfg.seed = seed;
    ProbeRunResult pr = run_probe<float>(cfg);
    row.probe_train = pr.probe.train_accuracy;
    row.probe_val = pr.probe.val_accuracy;
    row.probe_test = pr.probe.test_accuracy;
    return pr.probe.test_accuracy;
}

inline bool epochs_monotone_decreasing(const std::vector<LossBreakdown>& means,
                                       double LossBreakdown::*member) {
    for (size_t e = 1; e < means.size(); ++e)
        if (means[e].*member > means[e - 1].*member) return false;
    return true;
}

inline void write_summary(const std::string& path, const std::vector<AblateRow>& rows) {
    std::ofstream out(path);
    out << "name,seed,token,feat,patch,ce,kl,total,probe_train,probe_val,probe_test,patch_monotone\n";
    for (const AblateRow& r : rows) {
        char buf[400];
        std::snprintf(buf, sizeof(buf), "%s,%llu,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.4f,%.4f,%.4f,%d\n",
                      r.name.c_str(), static_cast<unsigned long long>(r.seed), r.final_loss.token,
                      r.final_loss.feat, r.final_loss.patch, r.final_loss.ce, r.final_loss.kl,
                      r.final_loss.total, r.probe_train, r.probe_val, r.probe_test,
                      r.patch_monotone ? 1 : 0);
        out << buf;
    }
}

}  // namespace detail

// Learning-objective ablation: the four objective combinations distilled from
// one shared teacher, probed on the proxy set itself.
inline AblateResult ablate_table2(const AblateOptions& opt) {
    AblateResult res;
    ensure_output_dir(opt.output_dir);
    DatasetContainer ds = detail::ablate_dataset(opt, opt.seed, 80);
    std::string data_path = opt.output_dir + "/toy.pxds";
    save_container(ds, data_path);
    std::string teacher_ckpt =
        detail::train_ablate_teacher(opt, data_path, opt.output_dir + "/teacher", opt.seed);

    struct Combo {
        const char* name;
        double token, feat, patch;
    };
    const Combo combos[] = {{"token", 1, 0, 0},
                            {"feat", 0, 1, 0},
                            {"token_feat", 1, 1, 0},
                            {"token_feat_patch", 1, 1, 1}};
    for (const Combo& combo : combos) {
        RunConfig cfg = detail::base_run_config(opt, opt.seed);
        cfg.mode = "distill";
        cfg.loss_mode = "proteus";
        cfg.weights.token = combo.token;
        cfg.weights.feat = combo.feat;
        cfg.weights.patch = combo.patch;
        // fixed mask ratio keeps the per-epoch means low-variance
        cfg.mask_lo = 0.3;
        cfg.mask_hi = 0.3;
        cfg.data_path = data_path;
        cfg.teacher_checkpoint = teacher_ckpt;
        cfg.output_dir = opt.output_dir + "/run_" + combo.name;
        cfg.schedule.total_steps = opt.distill_steps;
        cfg.schedule.warmup_steps = opt.distill_steps / 10;
        cfg.schedule.base_lr = 5e-3;
        cfg.schedule.min_lr = 5e-4;
        DistillRunResult run = run_distill<float>(cfg);
        AblateRow row;
        row.name = combo.name;
        row.seed = opt.seed;
        row.final_loss = run.final_loss;
        row.patch_monotone =
            detail::epochs_monotone_decreasing(run.epoch_means(), &LossBreakdown::patch);
        detail::probe_checkpoint(run.checkpoint_path, data_path,
                                 opt.output_dir + "/probe_" + combo.name, opt.seed, row);
        if (std::string(combo.name) == "token_feat_patch") res.patch_monotone = row.patch_monotone;
        res.rows.push_back(row);
    }
    res.summary_path = opt.output_dir + "/summary.csv";
    detail::write_summary(res.summary_path, res.rows);
    return res;
}

// Dataset-bias ablation: hint-style distillation (token+feat) against
// soft-logit+CE distillation, trained on half the classes and probed on the
// held-out half. Reported directionally; a reversed direction is flagged, not
// failed.
inline AblateResult ablate_table1(const AblateOptions& opt) {
    AblateResult res;
    ensure_output_dir(opt.output_dir);
    double hint_sum = 0, logit_sum = 0;
    for (int rep = 0; rep < opt.seeds; ++rep) {
        uint64_t seed = opt.seed + static_cast<uint64_t>(rep);
        std::string rep_dir = opt.output_dir + "/seed" + std::to_string(seed);
        ensure_output_dir(rep_dir);
        DatasetContainer full = detail::ablate_dataset(opt, seed, 40);
        std::string full_path = rep_dir + "/toy.pxds";
        save_container(full, full_path);

        // class split: half proxy (original label ids), half held out
        Rng class_rng = Rng(seed).child("class-split");
        std::vector<int64_t> order = class_rng.permutation(full.class_count);
        std::vector<uint16_t> proxy_ids, heldout_ids;
        for (size_t i = 0; i < order.size(); ++i) {
            if (i < order.size() / 2) proxy_ids.push_back(static_cast<uint16_t>(order[i]));
            else heldout_ids.push_back(static_cast<uint16_t>(order[i]));
        }
        DatasetContainer proxy = filter_classes(full, proxy_ids, /*reindex=*/false);
        DatasetContainer heldout = filter_classes(full, heldout_ids, /*reindex=*/true);
        std::string proxy_path = rep_dir + "/proxy.pxds";
        std::string heldout_path = rep_dir + "/heldout.pxds";
        save_container(proxy, proxy_path);
        save_container(heldout, heldout_path);

        std::string teacher_ckpt =
            detail::train_ablate_teacher(opt, full_path, rep_dir + "/teacher", seed);

        auto one_run = [&](const char* name, const char* mode, double token, double feat) {
            RunConfig cfg = detail::base_run_config(opt, seed);
            cfg.mode = "distill";
            cfg.loss_mode = mode;
            cfg.weights.token = token;
            cfg.weights.feat = feat;
            cfg.weights.patch = 0;
            cfg.weights.lambda = 0.5;
            cfg.data_path = proxy_path;
            cfg.teacher_checkpoint = teacher_ckpt;
            cfg.output_dir = rep_dir + "/run_" + name;
            cfg.schedule.total_steps = opt.distill_steps;
            cfg.schedule.warmup_steps = opt.distill_steps / 10;
            cfg.schedule.base_lr = 5e-3;
            cfg.schedule.min_lr = 1e-4;
            DistillRunResult run = run_distill<float>(cfg);
            AblateRow row;
            row.name = name;
            row.seed = seed;
            row.final_loss = run.final_loss;
            double acc = detail::probe_checkpoint(run.checkpoint_path, heldout_path,
                                                  rep_dir + "/probe_" + name, seed, row);
            res.rows.push_back(row);
            return acc;
        };
        hint_sum += one_run("hint", "proteus", 1, 1);
        logit_sum += one_run("soft_ce", "soft_ce", 0, 0);
    }
    res.hint_mean = hint_sum / opt.seeds;
    res.logit_mean = logit_sum / opt.seeds;
    res.direction_ok = res.hint_mean >= res.logit_mean;
    res.summary_path = opt.output_dir + "/summary.csv";
    detail::write_summary(res.summary_path, res.rows);
    std::ofstream out(res.summary_path, std::ios::app);
    char buf[200];
    std::snprintf(buf, sizeof(buf), "heldout_mean,hint,%.4f,soft_ce,%.4f,direction_ok,%d\n",
                  res.hint_mean, res.logit_mean, res.direction_ok ? 1 : 0);
    out << buf;
    return res;
}

// Weight-inheritance comparison: inherited-init against fresh-init
// distillation, probed on the proxy set. Directional report only.
inline AblateResult ablate_inherit(const AblateOptions& opt) {
    AblateResult res;
    ensure_output_dir(opt.output_dir);
    DatasetContainer ds = detail::ablate_dataset(opt, opt.seed, 80);
    std::string data_path = opt.output_dir + "/toy.pxds";
    save_container(ds, data_path);
    std::string teacher_ckpt =
        detail::train_ablate_teacher(opt, data_path, opt.output_dir + "/teacher", opt.seed);
    for (bool inherit : {true, false}) {
        RunConfig cfg = detail::base_run_config(opt, opt.seed);
        cfg.mode = "distill";
        cfg.loss_mode = "proteus";
        cfg.inherit = inherit;
        cfg.data_path = data_path;
        cfg.teacher_checkpoint = teacher_ckpt;
        cfg.output_dir = opt.output_dir + std::string(inherit ? "/run_inherit" : "/run_fresh");
        cfg.schedule.total_steps = opt.distill_steps;
        cfg.schedule.warmup_steps = opt.distill_steps / 10;
        cfg.schedule.base_lr = 5e-3;
        cfg.schedule.min_lr = 1e-4;
        DistillRunResult run = run_distill<float>(cfg);
        AblateRow row;
        row.name = inherit ? "inherit" : "fresh";
        row.seed = opt.seed;
        row.final_loss = run.final_loss;
        detail::probe_checkpoint(run.checkpoint_path, data_path,
                                 opt.output_dir + "/probe_" + row.name, opt.seed, row);
        res.rows.push_back(row);
    }
    res.summary_path = opt.output_dir + "/summary.csv";
    detail::write_summary(res.summary_path, res.rows);
    return res;
}

inline AblateResult run_ablate(const AblateOptions& opt) {
    if (opt.preset == "table2") return ablate_table2(opt);
    if (opt.preset == "table1") return ablate_table1(opt);
    if (opt.preset == "inherit") return ablate_inherit(opt);
    throw ConfigError("config field 'preset': unknown preset '" + opt.preset + "'");
}

}  // namespace proteus
