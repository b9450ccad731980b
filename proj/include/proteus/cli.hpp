#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "proteus/ablate.hpp"
#include "proteus/train.hpp"

namespace proteus {

namespace cli_detail {

inline void add_model_flags(CLI::App* cmd, ViTConfig& m, const std::string& prefix = "") {
    cmd->add_option("--" + prefix + "image-size", m.image_size, "input resolution");
    cmd->add_option("--" + prefix + "patch", m.patch_size, "patch size");
    cmd->add_option("--" + prefix + "channels", m.channels, "input channels");
    cmd->add_option("--" + prefix + "dim", m.dim, "embedding width");
    cmd->add_option("--" + prefix + "depth", m.depth, "transformer blocks");
    cmd->add_option("--" + prefix + "heads", m.heads, "attention heads");
    cmd->add_option("--" + prefix + "mlp-ratio", m.mlp_ratio, "mlp expansion");
    cmd->add_option("--" + prefix + "probe-layers", m.layers_for_probe,
                    "cls layers concatenated for probing (0 = auto)");
}

inline void add_schedule_flags(CLI::App* cmd, Schedule& s) {
    cmd->add_option("--steps", s.total_steps, "total optimizer steps");
    cmd->add_option("--warmup", s.warmup_steps, "linear warmup steps");
    cmd->add_option("--lr", s.base_lr, "peak learning rate");
    cmd->add_option("--min-lr", s.min_lr, "final learning rate");
    cmd->add_option("--weight-decay", s.weight_decay, "decoupled weight decay");
    cmd->add_option("--clip", s.grad_clip_norm, "global grad-norm clip (0 = off)");
}

inline void add_common_flags(CLI::App* cmd, RunConfig& cfg) {
    cmd->add_option("--seed", cfg.seed, "run seed");
    cmd->add_flag("--determinism,!--no-determinism", cfg.determinism,
                  "bitwise-reproducible kernels and logs");
    cmd->add_flag("--debug", cfg.debug, "check for non-finite values");
    cmd->add_flag_callback("--f64", [&cfg] { cfg.precision = "f64"; }, "run in 64-bit floats");
}

template <typename Fn>
int dispatch_precision(const RunConfig& cfg, Fn&& fn) {
    if (cfg.precision == "f64") fn(double{});
    else fn(float{});
    return 0;
}

}  // namespace cli_detail

inline int run_cli(std::vector<std::string> args) {
    CLI::App app{"proteus: desk-scale task-agnostic ViT distillation"};
    app.require_subcommand(1);

    // ----------------------------- make-dataset -----------------------------
    CLI::App* mk = app.add_subcommand("make-dataset", "build PXDS dataset containers");
    mk->require_subcommand(1);

    ToySpec toy;
    std::string out_path = "out.pxds";
    CLI::App* mk_toy = mk->add_subcommand("toy", "class-conditional separable toy set");
    mk_toy->add_option("--classes", toy.classes, "class count");
    mk_toy->add_option("--per-class", toy.per_class, "images per class");
    mk_toy->add_option("--size", toy.size, "image side");
    mk_toy->add_option("--channels", toy.channels, "channels");
    mk_toy->add_option("--seed", toy.seed, "seed");
    mk_toy->add_option("-o,--output", out_path, "output path")->required();

    struct SingleArgs {
        int64_t count = 1000;
        int64_t size = 16;
        int64_t source_size = 64;
        std::string source;
        int64_t index = 0;
        uint64_t seed = 0;
        double scale_lo = 0.08, scale_hi = 1.0;
        double hflip = 0.5;
    } single;
    CLI::App* mk_single = mk->add_subcommand("single", "augmented crops of one source image");
    mk_single->add_option("--count", single.count, "number of crops");
    mk_single->add_option("--size", single.size, "crop output side");
    mk_single->add_option("--source", single.source, "source PXDS (default: procedural image)");
    mk_single->add_option("--index", single.index, "image index within source");
    mk_single->add_option("--source-size", single.source_size, "procedural source side");
    mk_single->add_option("--scale-lo", single.scale_lo, "min crop area fraction");
    mk_single->add_option("--scale-hi", single.scale_hi, "max crop area fraction");
    mk_single->add_option("--hflip", single.hflip, "horizontal flip probability");
    mk_single->add_option("--seed", single.seed, "seed");
    mk_single->add_option("-o,--output", out_path, "output path")->required();

    struct SubArgs {
        std::string input;
        std::string mode = "per-class-fraction";
        double fraction = 0.5;
        uint64_t seed = 0;
    } sub;
    CLI::App* mk_sub = mk->add_subcommand("subsample", "keep a fraction of data or classes");
    mk_sub->add_option("--input", sub.input, "input PXDS")->required();
    mk_sub->add_option("--mode", sub.mode, "per-class-fraction | class-fraction")
        ->check(CLI::IsMember({"per-class-fraction", "class-fraction"}));
    mk_sub->add_option("--fraction", sub.fraction, "fraction to keep");
    mk_sub->add_option("--seed", sub.seed, "seed");
    mk_sub->add_option("-o,--output", out_path, "output path")->required();

    std::vector<std::string> merge_inputs;
    CLI::App* mk_merge = mk->add_subcommand("merge", "concatenate containers, dropping labels");
    mk_merge->add_option("-i,--input", merge_inputs, "input PXDS files")->required();
    mk_merge->add_option("-o,--output", out_path, "output path")->required();

    // ----------------------------- train-teacher -----------------------------
    RunConfig teach_cfg;
    teach_cfg.mode = "train_teacher";
    teach_cfg.schedule.total_steps = 400;
    teach_cfg.schedule.warmup_steps = 40;
    teach_cfg.schedule.base_lr = 2e-3;
    teach_cfg.schedule.min_lr = 1e-4;
    CLI::App* teach = app.add_subcommand("train-teacher", "supervised ViT training on a labeled set");
    teach->add_option("--data", teach_cfg.data_path, "labeled PXDS")->required();
    teach->add_option("-o,--out", teach_cfg.output_dir, "output directory")->required();
    teach->add_option("--batch", teach_cfg.batch_size, "batch size");
    teach->add_flag("--augment,!--no-augment", teach_cfg.augment, "random-resized-crop + flip");
    cli_detail::add_model_flags(teach, teach_cfg.teacher);
    cli_detail::add_schedule_flags(teach, teach_cfg.schedule);
    cli_detail::add_common_flags(teach, teach_cfg);

    // ----------------------------- distill -----------------------------
    RunConfig dis_cfg;
    dis_cfg.mode = "distill";
    dis_cfg.schedule.total_steps = 300;
    dis_cfg.schedule.warmup_steps = 30;
    dis_cfg.schedule.base_lr = 3e-3;
    dis_cfg.schedule.min_lr = 1e-4;
    std::string dis_config_path;
    CLI::App* dis = app.add_subcommand("distill", "distill a frozen teacher into a student");
    dis->add_option("--config", dis_config_path, "JSON run config (flags override)");
    dis->add_option("--teacher", dis_cfg.teacher_checkpoint, "teacher checkpoint (PRTC)");
    dis->add_option("--data", dis_cfg.data_path, "proxy dataset (PXDS)");
    dis->add_option("-o,--out", dis_cfg.output_dir, "output directory");
    dis->add_option("--batch", dis_cfg.batch_size, "batch size");
    dis->add_option("--mode", dis_cfg.loss_mode, "proteus | soft | soft_ce | hard | hard_ce");
    dis->add_option("--w-token", dis_cfg.weights.token, "token objective weight");
    dis->add_option("--w-feat", dis_cfg.weights.feat, "feature objective weight");
    dis->add_option("--w-patch", dis_cfg.weights.patch, "patch objective weight");
    dis->add_option("--lambda", dis_cfg.weights.lambda, "CE/KL balance for the ablation modes");
    dis->add_option("--head", dis_cfg.head_kind, "ln_linear | linear_gelu | gelu_linear");
    dis->add_option("--mask-lo", dis_cfg.mask_lo, "mask ratio lower bound");
    dis->add_option("--mask-hi", dis_cfg.mask_hi, "mask ratio upper bound");
    dis->add_flag_callback("--patch-all-positions",
                           [&dis_cfg] { dis_cfg.patch_masked_only = false; },
                           "average the patch loss over all positions");
    dis->add_flag("--feat-includes-cls", dis_cfg.feat_includes_cls,
                  "fold the cls token into the feature loss");
    dis->add_flag("--inherit", dis_cfg.inherit, "initialize student from teacher weights");
    dis->add_flag("--augment,!--no-augment", dis_cfg.augment, "random-resized-crop + flip");
    cli_detail::add_model_flags(dis, dis_cfg.student, "student-");
    cli_detail::add_schedule_flags(dis, dis_cfg.schedule);
    cli_detail::add_common_flags(dis, dis_cfg);

    // ----------------------------- probe -----------------------------
    RunConfig probe_cfg;
    probe_cfg.mode = "probe";
    CLI::App* probe = app.add_subcommand("probe", "linear probing on frozen features");
    probe->add_option("--checkpoint", probe_cfg.teacher_checkpoint, "model checkpoint")->required();
    probe->add_option("--data", probe_cfg.data_path, "labeled PXDS")->required();
    probe->add_option("--test-data", probe_cfg.test_data_path, "separate test PXDS");
    probe->add_option("-o,--out", probe_cfg.output_dir, "output directory")->required();
    probe->add_option("--method", probe_cfg.probe_method, "lbfgs | sgd");
    probe->add_option("--layers", probe_cfg.probe_layers, "cls layers to concatenate (0 = model default)");
    probe->add_option("--max-iter", probe_cfg.probe_max_iter, "L-BFGS iteration cap");
    probe->add_option("--val-frac", probe_cfg.val_fraction, "validation fraction");
    probe->add_option("--test-frac", probe_cfg.test_fraction, "test fraction");
    cli_detail::add_common_flags(probe, probe_cfg);

    // ----------------------------- visualize-pca -----------------------------
    RunConfig vis_cfg;
    vis_cfg.mode = "visualize";
    CLI::App* vis = app.add_subcommand("visualize-pca", "patch-feature PCA tiles as PPM");
    vis->add_option("--checkpoint", vis_cfg.teacher_checkpoint, "model checkpoint")->required();
    vis->add_option("--data", vis_cfg.data_path, "PXDS images")->required();
    vis->add_option("-o,--out", vis_cfg.output_dir, "output directory")->required();
    vis->add_option("--images", vis_cfg.vis_images, "images to visualize");
    vis->add_option("--upscale", vis_cfg.vis_upscale, "nearest-neighbor upscale factor");
    cli_detail::add_common_flags(vis, vis_cfg);

    // ----------------------------- ablate -----------------------------
    AblateOptions ab;
    CLI::App* abl = app.add_subcommand("ablate", "run the preset experiment matrices");
    abl->add_option("--preset", ab.preset, "table1 | table2 | inherit")
        ->check(CLI::IsMember({"table1", "table2", "inherit"}));
    abl->add_option("-o,--out", ab.output_dir, "output directory")->required();
    abl->add_option("--seed", ab.seed, "base seed");
    abl->add_option("--seeds", ab.seeds, "repetitions (table1)");
    abl->add_option("--data", ab.data_path, "toy PXDS override");
    abl->add_option("--teacher-steps", ab.teacher_steps, "teacher training steps");
    abl->add_option("--distill-steps", ab.distill_steps, "distillation steps per run");
    abl->add_flag("--augment", ab.augment, "train distill runs on augmented views");

    // ----------------------------- parse & dispatch -----------------------------
    std::vector<const char*> argv;
    argv.push_back("proteus");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (mk_toy->parsed()) {
            DatasetContainer ds = gen_toy_dataset(toy);
            save_container(ds, out_path);
            std::cout << "wrote " << out_path << " (" << ds.n << " images, " << ds.class_count
                      << " classes)\n";
            return 0;
        }
        if (mk_single->parsed()) {
            DatasetContainer source;
            if (single.source.empty()) {
                source = gen_source_image(single.source_size, 1, single.seed);
            } else {
                source = load_container(single.source);
                if (single.index < 0 || single.index >= source.n)
                    throw ConfigError("config field 'index': source has " + std::to_string(source.n) +
                                      " images");
            }
            AugRecipe recipe;
            recipe.output_size = single.size;
            recipe.crop_scale_lo = single.scale_lo;
            recipe.crop_scale_hi = single.scale_hi;
            recipe.hflip_prob = single.hflip;
            DatasetContainer ds =
                gen_single_image_dataset(source, single.index, single.count, recipe, single.seed);
            save_container(ds, out_path);
            std::cout << "wrote " << out_path << " (" << ds.n << " crops)\n";
            return 0;
        }
        if (mk_sub->parsed()) {
            DatasetContainer ds = load_container(sub.input);
            SubsampleMode mode = sub.mode == "class-fraction" ? SubsampleMode::class_fraction
                                                              : SubsampleMode::per_class_fraction;
            DatasetContainer out = subsample(ds, mode, sub.fraction, sub.seed);
            save_container(out, out_path);
            std::cout << "wrote " << out_path << " (" << out.n << " images, " << out.class_count
                      << " classes)\n";
            return 0;
        }
        if (mk_merge->parsed()) {
            std::vector<DatasetContainer> loaded;
            loaded.reserve(merge_inputs.size());
            for (const auto& p : merge_inputs) loaded.push_back(load_container(p));
            std::vector<const DatasetContainer*> ptrs;
            for (const auto& d : loaded) ptrs.push_back(&d);
            DatasetContainer out = merge(ptrs);
            save_container(out, out_path);
            std::cout << "wrote " << out_path << " (" << out.n << " images, unlabeled)\n";
            return 0;
        }
        if (teach->parsed()) {
            return cli_detail::dispatch_precision(teach_cfg, [&](auto tag) {
                using T = decltype(tag);
                TrainResult r = run_train_teacher<T>(teach_cfg);
                std::cout << "teacher done: final CE " << r.final_loss << ", checkpoint "
                          << r.checkpoint_path << "\n";
            });
        }
        if (dis->parsed()) {
            RunConfig cfg = dis_cfg;
            if (!dis_config_path.empty()) {
                cfg = RunConfig::from_file(dis_config_path);
                // explicit flags override the file
                if (dis->count("--teacher")) cfg.teacher_checkpoint = dis_cfg.teacher_checkpoint;
                if (dis->count("--data")) cfg.data_path = dis_cfg.data_path;
                if (dis->count("--out")) cfg.output_dir = dis_cfg.output_dir;
                if (dis->count("--seed")) cfg.seed = dis_cfg.seed;
                if (dis->count("--steps")) cfg.schedule.total_steps = dis_cfg.schedule.total_steps;
                if (dis->count("--mode")) cfg.loss_mode = dis_cfg.loss_mode;
            }
            cfg.mode = "distill";
            if (cfg.teacher_checkpoint.empty())
                throw ConfigError("config field 'teacher_checkpoint': required for distill");
            if (cfg.data_path.empty()) throw ConfigError("config field 'data': required for distill");
            // student geometry follows the teacher unless set explicitly
            TeacherBundle tb = teacher_meta(load_checkpoint(cfg.teacher_checkpoint));
            if (dis_config_path.empty() || !dis->count("--student-image-size")) {
                if (!dis->count("--student-image-size")) cfg.student.image_size = tb.cfg.image_size;
                if (!dis->count("--student-patch")) cfg.student.patch_size = tb.cfg.patch_size;
                if (!dis->count("--student-channels")) cfg.student.channels = tb.cfg.channels;
            }
            return cli_detail::dispatch_precision(cfg, [&](auto tag) {
                using T = decltype(tag);
                DistillRunResult r = run_distill<T>(cfg);
                std::cout << "distill done: total " << r.final_loss.total << " (token "
                          << r.final_loss.token << ", feat " << r.final_loss.feat << ", patch "
                          << r.final_loss.patch << ", ce " << r.final_loss.ce << ", kl "
                          << r.final_loss.kl << "), checkpoint " << r.checkpoint_path << "\n";
                if (!r.inherit_summary.empty()) std::cout << "inherit: " << r.inherit_summary << "\n";
            });
        }
        if (probe->parsed()) {
            return cli_detail::dispatch_precision(probe_cfg, [&](auto tag) {
                using T = decltype(tag);
                ProbeRunResult r = run_probe<T>(probe_cfg);
                std::cout << "probe done: best_l2 " << r.probe.best_l2 << ", train "
                          << r.probe.train_accuracy << ", val " << r.probe.val_accuracy << ", test "
                          << r.probe.test_accuracy << " -> " << r.json_path << "\n";
            });
        }
        if (vis->parsed()) {
            return cli_detail::dispatch_precision(vis_cfg, [&](auto tag) {
                using T = decltype(tag);
                VisualizeResult r = run_visualize<T>(vis_cfg);
                std::cout << "pca done: " << r.ppm_paths.size() << " tiles, explained ["
                          << r.explained[0] << ", " << r.explained[1] << ", " << r.explained[2]
                          << "]\n";
            });
        }
        if (abl->parsed()) {
            AblateResult r = run_ablate(ab);
            std::cout << "ablate " << ab.preset << ": " << r.rows.size() << " runs -> "
                      << r.summary_path << "\n";
            for (const AblateRow& row : r.rows)
                std::cout << "  " << row.name << " seed " << row.seed << ": total "
                          << row.final_loss.total << ", probe test " << row.probe_test << "\n";
            if (ab.preset == "table1") {
                std::cout << "  heldout mean: hint " << r.hint_mean << " vs soft_ce "
                          << r.logit_mean << (r.direction_ok ? " (direction ok)" : " (FLAGGED: direction reversed)")
                          << "\n";
            }
            if (ab.preset == "table2")
                std::cout << "  patch loss monotone over epochs: " << (r.patch_monotone ? "yes" : "NO")
                          << "\n";
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace proteus
