#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"
#include "proteus/distill.hpp"
#include "proteus/optim.hpp"
#include "proteus/vit.hpp"

namespace proteus {

// ----------------------------- run configuration -----------------------------

struct RunConfig {
    std::string mode = "distill";  // train_teacher | distill | probe | visualize
    std::string precision = "f32";

    ViTConfig teacher;
    ViTConfig student;

    std::string loss_mode = "proteus";
    LossWeights weights;
    std::string head_kind = "ln_linear";
    bool patch_masked_only = true;
    bool feat_includes_cls = false;
    double mask_lo = 0.1;
    double mask_hi = 0.5;
    bool inherit = false;

    Schedule schedule;
    int64_t batch_size = 16;
    bool augment = true;

    std::string data_path;
    std::string test_data_path;
    std::string teacher_checkpoint;
    std::string output_dir = "out";
    uint64_t seed = 0;
    bool determinism = true;
    bool debug = false;

    std::string probe_method = "lbfgs";
    int64_t probe_layers = 0;  // 0 = model default
    int probe_max_iter = 500;
    double val_fraction = 0.2;
    double test_fraction = 0.2;

    int64_t vis_images = 4;
    int64_t vis_upscale = 8;

    void validate() const {
        static const std::set<std::string> modes = {"train_teacher", "distill", "probe", "visualize"};
        if (!modes.count(mode)) throw ConfigError("config field 'mode': unknown value '" + mode + "'");
        if (precision != "f32" && precision != "f64")
            throw ConfigError("config field 'precision': must be f32 or f64, got '" + precision + "'");
        if (batch_size < 1) throw ConfigError("config field 'batch_size': must be >= 1");
        if (!(0.0 < mask_lo && mask_lo <= mask_hi && mask_hi < 1.0))
            throw ConfigError("config field 'loss.mask_ratio': need 0 < lo <= hi < 1");
        parse_distill_mode(loss_mode);
        parse_head_kind(head_kind);
        weights.validate();
        schedule.validate();
        if (probe_method != "lbfgs" && probe_method != "sgd")
            throw ConfigError("config field 'probe.method': must be lbfgs or sgd");
        if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0)
            throw ConfigError("config field 'probe.val_fraction/test_fraction': splits must leave training data");
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["mode"] = mode;
        j["precision"] = precision;
        j["teacher"] = teacher.to_json();
        j["student"] = student.to_json();
        j["loss"] = {{"mode", loss_mode},
                     {"token", weights.token},
                     {"feat", weights.feat},
                     {"patch", weights.patch},
                     {"lambda", weights.lambda},
                     {"head_kind", head_kind},
                     {"patch_masked_only", patch_masked_only},
                     {"feat_includes_cls", feat_includes_cls},
                     {"mask_ratio", {mask_lo, mask_hi}}};
        j["schedule"] = {{"base_lr", schedule.base_lr},
                         {"min_lr", schedule.min_lr},
                         {"warmup_steps", schedule.warmup_steps},
                         {"total_steps", schedule.total_steps},
                         {"weight_decay", schedule.weight_decay},
                         {"beta1", schedule.beta1},
                         {"beta2", schedule.beta2},
                         {"epsilon", schedule.epsilon},
                         {"grad_clip_norm", schedule.grad_clip_norm}};
        j["batch_size"] = batch_size;
        j["augment"] = augment;
        j["inherit"] = inherit;
        j["data"] = data_path;
        j["test_data"] = test_data_path;
        j["teacher_checkpoint"] = teacher_checkpoint;
        j["output_dir"] = output_dir;
        j["seed"] = seed;
        j["determinism"] = determinism;
        j["debug"] = debug;
        j["probe"] = {{"method", probe_method},
                      {"layers", probe_layers},
                      {"max_iter", probe_max_iter},
                      {"val_fraction", val_fraction},
                      {"test_fraction", test_fraction}};
        j["visualize"] = {{"images", vis_images}, {"upscale", vis_upscale}};
        return j;
    }

    static RunConfig from_json(const nlohmann::json& j) {
        static const std::set<std::string> known = {
            "mode",    "precision", "teacher",   "student",            "loss",
            "schedule","batch_size","augment",   "inherit",            "data",
            "test_data","teacher_checkpoint",    "output_dir",         "seed",
            "determinism", "debug", "probe",     "visualize"};
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!known.count(it.key()))
                throw ConfigError("config field '" + it.key() + "': unknown field");
        RunConfig c;
        c.mode = j.value("mode", c.mode);
        c.precision = j.value("precision", c.precision);
        if (j.contains("teacher")) c.teacher = ViTConfig::from_json(j.at("teacher"));
        if (j.contains("student")) c.student = ViTConfig::from_json(j.at("student"));
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            c.loss_mode = l.value("mode", c.loss_mode);
            c.weights.token = l.value("token", c.weights.token);
            c.weights.feat = l.value("feat", c.weights.feat);
            c.weights.patch = l.value("patch", c.weights.patch);
            c.weights.lambda = l.value("lambda", c.weights.lambda);
            c.head_kind = l.value("head_kind", c.head_kind);
            c.patch_masked_only = l.value("patch_masked_only", c.patch_masked_only);
            c.feat_includes_cls = l.value("feat_includes_cls", c.feat_includes_cls);
            if (l.contains("mask_ratio")) {
                c.mask_lo = l.at("mask_ratio").at(0).get<double>();
                c.mask_hi = l.at("mask_ratio").at(1).get<double>();
            }
        }
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            c.schedule.base_lr = s.value("base_lr", c.schedule.base_lr);
            c.schedule.min_lr = s.value("min_lr", c.schedule.min_lr);
            c.schedule.warmup_steps = s.value("warmup_steps", c.schedule.warmup_steps);
            c.schedule.total_steps = s.value("total_steps", c.schedule.total_steps);
            c.schedule.weight_decay = s.value("weight_decay", c.schedule.weight_decay);
            c.schedule.beta1 = s.value("beta1", c.schedule.beta1);
            c.schedule.beta2 = s.value("beta2", c.schedule.beta2);
            c.schedule.epsilon = s.value("epsilon", c.schedule.epsilon);
            c.schedule.grad_clip_norm = s.value("grad_clip_norm", c.schedule.grad_clip_norm);
        }
        c.batch_size = j.value("batch_size", c.batch_size);
        c.augment = j.value("augment", c.augment);
        c.inherit = j.value("inherit", c.inherit);
        c.data_path = j.value("data", c.data_path);
        c.test_data_path = j.value("test_data", c.test_data_path);
        c.teacher_checkpoint = j.value("teacher_checkpoint", c.teacher_checkpoint);
        c.output_dir = j.value("output_dir", c.output_dir);
        c.seed = j.value("seed", c.seed);
        c.determinism = j.value("determinism", c.determinism);
        c.debug = j.value("debug", c.debug);
        if (j.contains("probe")) {
            const auto& p = j.at("probe");
            c.probe_method = p.value("method", c.probe_method);
            c.probe_layers = p.value("layers", c.probe_layers);
            c.probe_max_iter = p.value("max_iter", c.probe_max_iter);
            c.val_fraction = p.value("val_fraction", c.val_fraction);
            c.test_fraction = p.value("test_fraction", c.test_fraction);
        }
        if (j.contains("visualize")) {
            const auto& v = j.at("visualize");
            c.vis_images = v.value("images", c.vis_images);
            c.vis_upscale = v.value("upscale", c.vis_upscale);
        }
        c.validate();
        return c;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("config file '" + path + "' cannot be opened");
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file '" + path + "': " + e.what());
        }
        return from_json(j);
    }

    void write_resolved(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError(path + ": cannot open for writing");
        out << to_json().dump(2) << "\n";
    }
};

// ----------------------------- metrics -----------------------------

inline constexpr const char* kMetricsHeader =
    "# proteus-metrics-v1\n"
    "step,epoch,lr,loss_token,loss_feat,loss_patch,loss_ce,loss_kl,loss_total,wall_ms\n";

struct MetricsRow {
    int64_t step = 0;
    int64_t epoch = 0;
    double lr = 0;
    LossBreakdown loss;
    double wall_ms = 0;
};

class MetricsWriter {
public:
    MetricsWriter(const std::string& path, bool deterministic)
        : out_(path), deterministic_(deterministic) {
        if (!out_) throw IoError(path + ": cannot open for writing");
        out_ << kMetricsHeader;
    }

    void add(const MetricsRow& r) {
        if (r.step <= last_step_ && last_step_ >= 0)
            throw Error("metrics: steps must be strictly increasing");
        last_step_ = r.step;
        char buf[320];
        // wall time is zeroed under determinism so reruns are byte-identical
        double wall = deterministic_ ? 0.0 : r.wall_ms;
        std::snprintf(buf, sizeof(buf), "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n",
                      static_cast<long long>(r.step), static_cast<long long>(r.epoch), r.lr,
                      r.loss.token, r.loss.feat, r.loss.patch, r.loss.ce, r.loss.kl, r.loss.total,
                      wall);
        out_ << buf;
    }

    void close() { out_.close(); }

private:
    std::ofstream out_;
    bool deterministic_;
    int64_t last_step_ = -1;
};

}  // namespace proteus
