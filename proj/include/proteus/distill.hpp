#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "proteus/autodiff.hpp"
#include "proteus/mask.hpp"
#include "proteus/optim.hpp"
#include "proteus/rng.hpp"
#include "proteus/vit.hpp"

namespace proteus {

// ----------------------------- projection heads -----------------------------

enum class HeadKind { ln_linear, linear_gelu, gelu_linear };

inline const char* head_kind_name(HeadKind k) {
    switch (k) {
        case HeadKind::ln_linear: return "ln_linear";
        case HeadKind::linear_gelu: return "linear_gelu";
        case HeadKind::gelu_linear: return "gelu_linear";
    }
    return "?";
}

inline HeadKind parse_head_kind(const std::string& s) {
    if (s == "ln_linear") return HeadKind::ln_linear;
    if (s == "linear_gelu") return HeadKind::linear_gelu;
    if (s == "gelu_linear") return HeadKind::gelu_linear;
    throw ConfigError("unknown projection head kind '" + s + "'");
}

// Small learned map aligning student width to teacher width; discarded after
// training.
template <typename T>
struct ProjectionHead {
    HeadKind kind = HeadKind::ln_linear;
    int64_t in_dim = 0;
    int64_t out_dim = 0;
    double eps = 1e-6;
    Var<T> norm_scale;  // used by ln_linear
    Var<T> norm_shift;
    Var<T> weight;
    Var<T> bias;

    static ProjectionHead init(HeadKind kind, int64_t in_dim, int64_t out_dim, uint64_t seed,
                               bool requires_grad = true) {
        Rng root(seed);
        ProjectionHead h;
        h.kind = kind;
        h.in_dim = in_dim;
        h.out_dim = out_dim;
        h.norm_scale = make_leaf(Tensor<T>::full({in_dim}, T(1)), requires_grad);
        h.norm_shift = make_leaf(Tensor<T>::zeros({in_dim}), requires_grad);
        h.weight = make_leaf(detail::trunc_normal_init<T>({in_dim, out_dim}, root.child("weight")),
                             requires_grad);
        h.bias = make_leaf(Tensor<T>::zeros({out_dim}), requires_grad);
        return h;
    }

    // unit scale, zero shift, identity-extended weight; eps 0 so a
    // pre-normalized input maps through exactly
    static ProjectionHead identity(int64_t in_dim, int64_t out_dim) {
        if (out_dim < in_dim) throw Error("identity head needs out_dim >= in_dim");
        ProjectionHead h;
        h.kind = HeadKind::ln_linear;
        h.in_dim = in_dim;
        h.out_dim = out_dim;
        h.eps = 0.0;
        h.norm_scale = make_leaf(Tensor<T>::full({in_dim}, T(1)), true);
        h.norm_shift = make_leaf(Tensor<T>::zeros({in_dim}), true);
        Tensor<T> w({in_dim, out_dim});
        for (int64_t i = 0; i < in_dim; ++i) w[i * out_dim + i] = T(1);
        h.weight = make_leaf(std::move(w), true);
        h.bias = make_leaf(Tensor<T>::zeros({out_dim}), true);
        return h;
    }

    void collect_params(const std::string& prefix,
                        std::vector<std::pair<std::string, Var<T>>>& out) const {
        if (kind == HeadKind::ln_linear) {
            out.emplace_back(prefix + "norm.weight", norm_scale);
            out.emplace_back(prefix + "norm.bias", norm_shift);
        }
        out.emplace_back(prefix + "proj.weight", weight);
        out.emplace_back(prefix + "proj.bias", bias);
    }
};

template <typename T>
Var<T> project(const ProjectionHead<T>& head, const Var<T>& tokens) {
    if (tokens->value.shape.back() != head.in_dim)
        throw Error("project: trailing width " + std::to_string(tokens->value.shape.back()) +
                    " != head input width " + std::to_string(head.in_dim));
    switch (head.kind) {
        case HeadKind::ln_linear:
            return add(matmul(layer_norm(tokens, head.norm_scale, head.norm_shift, head.eps), head.weight),
                       head.bias);
        case HeadKind::linear_gelu:
            return gelu(add(matmul(tokens, head.weight), head.bias));
        case HeadKind::gelu_linear:
            return add(matmul(gelu(tokens), head.weight), head.bias);
    }
    throw Error("project: bad head kind");
}

template <typename T>
struct ProjectionHeads {
    ProjectionHead<T> cls, feat, patch;

    static ProjectionHeads init(HeadKind kind, int64_t student_dim, int64_t teacher_dim, uint64_t seed) {
        ProjectionHeads h;
        h.cls = ProjectionHead<T>::init(kind, student_dim, teacher_dim, detail::splitmix64(seed ^ 0x1));
        h.feat = ProjectionHead<T>::init(kind, student_dim, teacher_dim, detail::splitmix64(seed ^ 0x2));
        h.patch = ProjectionHead<T>::init(kind, student_dim, teacher_dim, detail::splitmix64(seed ^ 0x3));
        return h;
    }

    std::vector<std::pair<std::string, Var<T>>> named_params() const {
        std::vector<std::pair<std::string, Var<T>>> out;
        cls.collect_params("heads.cls.", out);
        feat.collect_params("heads.feat.", out);
        patch.collect_params("heads.patch.", out);
        return out;
    }
};

// ----------------------------- objectives -----------------------------

struct LossWeights {
    double token = 1.0;
    double feat = 1.0;
    double patch = 1.0;
    double lambda = 0.5;  // CE/KL balance in the supervised ablation

    void validate() const {
        if (token < 0 || feat < 0 || patch < 0)
            throw ConfigError("loss weights must be non-negative");
        if (lambda < 0 || lambda > 1) throw ConfigError("lambda must be in [0, 1]");
    }
};

struct LossBreakdown {
    double token = 0, feat = 0, patch = 0, ce = 0, kl = 0, total = 0;
};

// mean over batch and channels of the squared projection error
template <typename T>
Var<T> loss_token(const Var<T>& student_cls, const Var<T>& teacher_cls, const ProjectionHead<T>& head) {
    if (student_cls->value.ndim() != 2 || teacher_cls->value.ndim() != 2 ||
        student_cls->value.shape[0] != teacher_cls->value.shape[0])
        throw Error("loss_token: expected matching (B, dim) inputs, got " +
                    shape_str(student_cls->value.shape) + " vs " + shape_str(teacher_cls->value.shape));
    return mse(project(head, student_cls), teacher_cls);
}

template <typename T>
Var<T> loss_feat(const Var<T>& student_patches, const Var<T>& teacher_patches,
                 const ProjectionHead<T>& head) {
    if (student_patches->value.ndim() != 3 || teacher_patches->value.ndim() != 3 ||
        student_patches->value.shape[0] != teacher_patches->value.shape[0] ||
        student_patches->value.shape[1] != teacher_patches->value.shape[1])
        throw Error("loss_feat: expected matching (B, P, dim) inputs, got " +
                    shape_str(student_patches->value.shape) + " vs " +
                    shape_str(teacher_patches->value.shape));
    return mse(project(head, student_patches), teacher_patches);
}

// Squared error over masked positions only, averaged per channel and masked
// count, then over the batch. Unmasked student positions cannot influence it.
template <typename T>
Var<T> loss_patch(const Var<T>& student_masked_patches, const Var<T>& teacher_patches,
                  const MaskSpec& mask, const ProjectionHead<T>& head, bool masked_only = true) {
    const Shape& ss = student_masked_patches->value.shape;
    const Shape& ts = teacher_patches->value.shape;
    if (ss.size() != 3 || ts.size() != 3 || ss[0] != ts[0] || ss[1] != ts[1])
        throw Error("loss_patch: expected matching (B, P, dim) inputs, got " + shape_str(ss) +
                    " vs " + shape_str(ts));
    Var<T> proj = project(head, student_masked_patches);
    if (!masked_only) return mse(proj, teacher_patches);
    int64_t B = ts[0], P = ts[1], D = ts[2];
    if (mask.batch != B || mask.num_patches != P)
        throw Error("loss_patch: mask is " + std::to_string(mask.batch) + "x" +
                    std::to_string(mask.num_patches) + ", features are " + std::to_string(B) + "x" +
                    std::to_string(P));
    Tensor<T> w({B, P, D});
    for (int64_t b = 0; b < B; ++b) {
        int64_t m = mask.masked_count(b);
        if (m == 0) throw Error("loss_patch: sample " + std::to_string(b) + " has an empty mask");
        T v = T(1) / static_cast<T>(m * D);
        for (int64_t p = 0; p < P; ++p) {
            if (!mask.masked(b, p)) continue;
            for (int64_t d = 0; d < D; ++d) w[(b * P + p) * D + d] = v;
        }
    }
    Var<T> diff = sub(proj, teacher_patches);
    Var<T> weighted = mul(mul(diff, diff), constant(std::move(w)));
    return scale(sum_axes(weighted), 1.0 / static_cast<double>(B));
}

// weighted combination of the three objectives
template <typename T>
Var<T> loss_total(const Var<T>& token, const Var<T>& feat, const Var<T>& patch,
                  const LossWeights& w) {
    w.validate();
    return add(add(scale(token, w.token), scale(feat, w.feat)), scale(patch, w.patch));
}

enum class DistillMode { proteus, soft, soft_ce, hard, hard_ce };

inline bool mode_uses_ce(DistillMode m) { return m == DistillMode::soft_ce || m == DistillMode::hard_ce; }
inline bool mode_is_hard(DistillMode m) { return m == DistillMode::hard || m == DistillMode::hard_ce; }

inline void verify_breakdown(const LossBreakdown& b, const LossWeights& w, DistillMode mode) {
    double expect;
    if (mode == DistillMode::proteus) expect = w.token * b.token + w.feat * b.feat + w.patch * b.patch;
    else if (mode_uses_ce(mode)) expect = (1.0 - w.lambda) * b.ce + w.lambda * b.kl;
    else expect = b.kl;
    if (std::abs(expect - b.total) > 1e-6 * std::max(1.0, std::abs(expect)))
        throw Error("loss breakdown inconsistent: total " + std::to_string(b.total) +
                    " vs recomputed " + std::to_string(expect));
}

// ----------------------------- supervised-KD ablation -----------------------------

inline const char* distill_mode_name(DistillMode m) {
    switch (m) {
        case DistillMode::proteus: return "proteus";
        case DistillMode::soft: return "soft";
        case DistillMode::soft_ce: return "soft_ce";
        case DistillMode::hard: return "hard";
        case DistillMode::hard_ce: return "hard_ce";
    }
    return "?";
}

inline DistillMode parse_distill_mode(const std::string& s) {
    if (s == "proteus") return DistillMode::proteus;
    if (s == "soft") return DistillMode::soft;
    if (s == "soft_ce") return DistillMode::soft_ce;
    if (s == "hard") return DistillMode::hard;
    if (s == "hard_ce") return DistillMode::hard_ce;
    throw ConfigError("unknown distill mode '" + s + "'");
}

// Conventional logit distillation. Hard mode turns the teacher prediction
// into a one-hot target (KL against a point mass reduces to CE on the
// argmax); soft mode keeps the full teacher distribution. With use_ce the
// ground-truth term joins as (1-lambda)*CE + lambda*KL.
template <typename T>
Var<T> loss_supervised_kd(const Var<T>& student_logits, const Var<T>& teacher_logits,
                          const std::vector<int64_t>& labels, bool hard, bool use_ce, double lambda,
                          LossBreakdown& breakdown) {
    const Shape& ss = student_logits->value.shape;
    const Shape& ts = teacher_logits->value.shape;
    if (ss.size() != 2 || ss != ts)
        throw Error("loss_supervised_kd: logit shapes differ: " + shape_str(ss) + " vs " + shape_str(ts));
    int64_t B = ss[0], K = ss[1];
    Var<T> kd;
    if (hard) {
        std::vector<int64_t> hard_targets(static_cast<size_t>(B));
        for (int64_t i = 0; i < B; ++i) {
            int64_t best = 0;
            for (int64_t j = 1; j < K; ++j)
                if (teacher_logits->value[i * K + j] > teacher_logits->value[i * K + best]) best = j;
            hard_targets[static_cast<size_t>(i)] = best;
        }
        kd = cross_entropy(student_logits, hard_targets);
    } else {
        kd = kl_div(student_logits, teacher_logits);
    }
    breakdown.kl = static_cast<double>(kd->value[0]);
    if (!use_ce) {
        breakdown.ce = 0.0;
        breakdown.total = breakdown.kl;
        return kd;
    }
    if (static_cast<int64_t>(labels.size()) != B)
        throw Error("loss_supervised_kd: label count " + std::to_string(labels.size()) +
                    " != batch " + std::to_string(B));
    Var<T> ce = cross_entropy(student_logits, labels);
    breakdown.ce = static_cast<double>(ce->value[0]);
    Var<T> total = add(scale(ce, 1.0 - lambda), scale(kd, lambda));
    breakdown.total = static_cast<double>(total->value[0]);
    return total;
}

// ----------------------------- one training step -----------------------------

template <typename T>
struct DistillBatch {
    Tensor<T> images;             // (B, C, H, W), shared clean view
    std::vector<int64_t> labels;  // populated only for the CE modes
};

template <typename T>
struct DistillSetup {
    const ViTParams<T>* teacher = nullptr;
    ViTConfig teacher_cfg;
    ViTParams<T>* student = nullptr;
    ViTConfig student_cfg;
    ProjectionHeads<T>* heads = nullptr;
    NamedParams<T>* student_head = nullptr;        // classifier, logit modes only
    const NamedParams<T>* teacher_head = nullptr;  // frozen classifier, logit modes only
    LossWeights weights;
    DistillMode mode = DistillMode::proteus;
    double mask_lo = 0.1;
    double mask_hi = 0.5;
    bool patch_masked_only = true;
    bool feat_includes_cls = false;  // fold the cls token into the feature loss

    void validate() const {
        if (!teacher || !student || !heads) throw Error("distill: setup incomplete");
        if (teacher_cfg.patch_size != student_cfg.patch_size)
            throw Error("distill: teacher patch size " + std::to_string(teacher_cfg.patch_size) +
                        " != student patch size " + std::to_string(student_cfg.patch_size));
        if (teacher_cfg.image_size != student_cfg.image_size)
            throw Error("distill: teacher image size " + std::to_string(teacher_cfg.image_size) +
                        " != student image size " + std::to_string(student_cfg.image_size));
        if (teacher_cfg.channels != student_cfg.channels)
            throw Error("distill: channel mismatch");
        weights.validate();
        if (mode != DistillMode::proteus && (!student_head || !teacher_head))
            throw Error("distill: logit modes need classifier heads");
    }

    std::vector<std::pair<std::string, Var<T>>> trainable_params() const {
        std::vector<std::pair<std::string, Var<T>>> out;
        for (auto& [name, var] : student->entries) out.emplace_back("student." + name, var);
        if (mode == DistillMode::proteus) {
            auto hp = heads->named_params();
            out.insert(out.end(), hp.begin(), hp.end());
        } else if (student_head) {
            for (auto& [name, var] : student_head->entries) out.emplace_back("student." + name, var);
        }
        return out;
    }
};

// One optimizer step: clean teacher/student forwards, a masked student
// forward, the combined objective, backward, AdamW update on student and
// heads. The teacher runs with gradients disabled throughout.
template <typename T>
LossBreakdown distill_step(DistillSetup<T>& setup, const DistillBatch<T>& batch, Rng& mask_rng,
                           OptState<T>& opt_state, const Schedule& sched) {
    setup.validate();
    LossBreakdown breakdown;

    Var<T> teacher_cls, teacher_patches, teacher_logits;
    {
        NoGradGuard ng;
        ViTOutput<T> t_out = vit_forward(*setup.teacher, setup.teacher_cfg, batch.images);
        teacher_cls = t_out.cls;
        teacher_patches = t_out.patches;
        if (setup.mode != DistillMode::proteus)
            teacher_logits = classify(*setup.teacher_head, t_out.cls);
    }

    ViTOutput<T> s_out = vit_forward(*setup.student, setup.student_cfg, batch.images);
    Var<T> total;
    if (setup.mode == DistillMode::proteus) {
        MaskSpec mask = sample_mask(batch.images.shape[0], setup.student_cfg.num_patches(),
                                    setup.mask_lo, setup.mask_hi, mask_rng);
        ViTOutput<T> s_masked = vit_forward(*setup.student, setup.student_cfg, batch.images, &mask);
        Var<T> l_token = loss_token(s_out.cls, teacher_cls, setup.heads->cls);
        Var<T> feat_student = s_out.patches;
        Var<T> feat_teacher = teacher_patches;
        if (setup.feat_includes_cls) {
            int64_t b = batch.images.shape[0];
            feat_student = concat<T>({reshape(s_out.cls, {b, 1, setup.student_cfg.dim}), s_out.patches}, 1);
            feat_teacher = concat<T>({reshape(teacher_cls, {b, 1, setup.teacher_cfg.dim}), teacher_patches}, 1);
        }
        Var<T> l_feat = loss_feat(feat_student, feat_teacher, setup.heads->feat);
        Var<T> l_patch = loss_patch(s_masked.patches, teacher_patches, mask, setup.heads->patch,
                                    setup.patch_masked_only);
        total = loss_total(l_token, l_feat, l_patch, setup.weights);
        breakdown.token = static_cast<double>(l_token->value[0]);
        breakdown.feat = static_cast<double>(l_feat->value[0]);
        breakdown.patch = static_cast<double>(l_patch->value[0]);
        breakdown.total = static_cast<double>(total->value[0]);
        verify_breakdown(breakdown, setup.weights, DistillMode::proteus);
    } else {
        Var<T> student_logits = classify(*setup.student_head, s_out.cls);
        total = loss_supervised_kd(student_logits, teacher_logits, batch.labels,
                                   mode_is_hard(setup.mode), mode_uses_ce(setup.mode),
                                   setup.weights.lambda, breakdown);
        breakdown.total = static_cast<double>(total->value[0]);
        verify_breakdown(breakdown, setup.weights, setup.mode);
    }

    GradMap<T> grads = backward(total);
    auto trainables = setup.trainable_params();
    adamw_step(trainables, grads, opt_state, sched);
    return breakdown;
}

}  // namespace proteus
