#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "proteus/autodiff.hpp"
#include "proteus/mask.hpp"
#include "proteus/rng.hpp"

namespace proteus {

// ----------------------------- config -----------------------------

struct ViTConfig {
    int64_t image_size = 16;
    int64_t patch_size = 4;
    int64_t channels = 1;
    int64_t dim = 32;
    int64_t depth = 2;
    int64_t heads = 2;
    double mlp_ratio = 4.0;
    int64_t layers_for_probe = 0;  // 0 = auto: min(4, depth)

    int64_t num_patches() const {
        int64_t side = image_size / patch_size;
        return side * side;
    }
    int64_t tokens() const { return num_patches() + 1; }
    int64_t patch_dim() const { return channels * patch_size * patch_size; }
    int64_t mlp_hidden() const { return static_cast<int64_t>(std::llround(static_cast<double>(dim) * mlp_ratio)); }
    int64_t probe_layers() const { return layers_for_probe > 0 ? layers_for_probe : std::min<int64_t>(4, depth); }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw ConfigError("vit config: image_size " + std::to_string(image_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        if (channels < 1) throw ConfigError("vit config: channels must be >= 1");
        if (dim <= 0 || heads <= 0 || dim % heads != 0)
            throw ConfigError("vit config: dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (depth < 1) throw ConfigError("vit config: depth must be >= 1");
        if (mlp_ratio <= 0 || mlp_hidden() < 1) throw ConfigError("vit config: mlp_ratio too small");
        if (layers_for_probe < 0 || probe_layers() > depth)
            throw ConfigError("vit config: layers_for_probe " + std::to_string(layers_for_probe) +
                              " exceeds depth " + std::to_string(depth));
    }

    nlohmann::json to_json() const {
        return {{"image_size", image_size}, {"patch_size", patch_size}, {"channels", channels},
                {"dim", dim},               {"depth", depth},           {"heads", heads},
                {"mlp_ratio", mlp_ratio},   {"layers_for_probe", probe_layers()}};
    }

    static ViTConfig from_json(const nlohmann::json& j) {
        ViTConfig c;
        c.image_size = j.value("image_size", c.image_size);
        c.patch_size = j.value("patch_size", c.patch_size);
        c.channels = j.value("channels", c.channels);
        c.dim = j.value("dim", c.dim);
        c.depth = j.value("depth", c.depth);
        c.heads = j.value("heads", c.heads);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
        c.layers_for_probe = j.value("layers_for_probe", c.layers_for_probe);
        c.validate();
        return c;
    }
};

// ----------------------------- named parameters -----------------------------

// Ordered name -> leaf map. Iteration order is insertion order, so optimizer
// sweeps and checkpoints are deterministic.
template <typename T>
struct NamedParams {
    std::vector<std::pair<std::string, Var<T>>> entries;
    std::unordered_map<std::string, size_t> index;

    void add(const std::string& name, Tensor<T> value, bool requires_grad) {
        add_var(name, make_leaf(std::move(value), requires_grad));
    }

    void add_var(const std::string& name, Var<T> var) {
        if (index.count(name)) throw Error("NamedParams: duplicate name " + name);
        index[name] = entries.size();
        entries.emplace_back(name, std::move(var));
    }

    bool has(const std::string& name) const { return index.count(name) != 0; }

    const Var<T>& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw Error("NamedParams: unknown name " + name);
        return entries[it->second].second;
    }

    Var<T>& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw Error("NamedParams: unknown name " + name);
        return entries[it->second].second;
    }

    void set_requires_grad(bool v) {
        for (auto& [name, var] : entries) {
            var->requires_grad = v;
            var->value.requires_grad = v;
        }
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, var] : entries) n += var->value.numel();
        return n;
    }
};

template <typename T>
using ViTParams = NamedParams<T>;

// ----------------------------- init -----------------------------

namespace detail {

template <typename T>
Tensor<T> trunc_normal_init(Shape shape, Rng rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(rng.trunc_normal(0.02, 0.04));
    return t;
}

}  // namespace detail

// Truncated-normal weights (std 0.02, cut at 2 std), zero biases, unit norm
// scales. Every tensor draws from its own seed stream so weight-inheritance
// fallbacks stay reproducible tensor by tensor.
template <typename T>
ViTParams<T> init_params(const ViTConfig& cfg, uint64_t seed, bool requires_grad = true) {
    cfg.validate();
    Rng root(seed);
    ViTParams<T> p;
    auto tn = [&](const std::string& name, Shape shape) {
        p.add(name, detail::trunc_normal_init<T>(std::move(shape), root.child(name)), requires_grad);
    };
    auto zeros = [&](const std::string& name, Shape shape) {
        p.add(name, Tensor<T>::zeros(std::move(shape)), requires_grad);
    };
    auto ones = [&](const std::string& name, Shape shape) {
        p.add(name, Tensor<T>::full(std::move(shape), T(1)), requires_grad);
    };
    tn("patch_embed.weight", {cfg.patch_dim(), cfg.dim});
    zeros("patch_embed.bias", {cfg.dim});
    tn("cls_token", {cfg.dim});
    tn("mask_token", {cfg.dim});
    tn("pos_embed", {cfg.tokens(), cfg.dim});
    for (int64_t b = 0; b < cfg.depth; ++b) {
        std::string base = "blocks." + std::to_string(b) + ".";
        ones(base + "ln1.weight", {cfg.dim});
        zeros(base + "ln1.bias", {cfg.dim});
        tn(base + "attn.qkv.weight", {cfg.dim, 3 * cfg.dim});
        zeros(base + "attn.qkv.bias", {3 * cfg.dim});
        tn(base + "attn.proj.weight", {cfg.dim, cfg.dim});
        zeros(base + "attn.proj.bias", {cfg.dim});
        ones(base + "ln2.weight", {cfg.dim});
        zeros(base + "ln2.bias", {cfg.dim});
        tn(base + "mlp.fc1.weight", {cfg.dim, cfg.mlp_hidden()});
        zeros(base + "mlp.fc1.bias", {cfg.mlp_hidden()});
        tn(base + "mlp.fc2.weight", {cfg.mlp_hidden(), cfg.dim});
        zeros(base + "mlp.fc2.bias", {cfg.dim});
    }
    ones("norm.weight", {cfg.dim});
    zeros("norm.bias", {cfg.dim});
    return p;
}

// linear classifier for supervised teachers and the logit-distillation modes
template <typename T>
NamedParams<T> init_classifier(int64_t dim, int64_t classes, uint64_t seed, bool requires_grad = true) {
    Rng root(seed);
    NamedParams<T> p;
    p.add("head.weight", detail::trunc_normal_init<T>({dim, classes}, root.child("head.weight")), requires_grad);
    p.add("head.bias", Tensor<T>::zeros({classes}), requires_grad);
    return p;
}

// ----------------------------- patchify -----------------------------

// (B, C, H, W) -> (B, P, C*p*p); patches ordered top-left to bottom-right,
// each patch flattened channel-major.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, int64_t patch_size) {
    if (images.ndim() != 4)
        throw Error("patchify: expected B x C x H x W, got " + shape_str(images.shape));
    int64_t B = images.shape[0], C = images.shape[1], H = images.shape[2], W = images.shape[3];
    if (H != W) throw Error("patchify: images must be square, got " + shape_str(images.shape));
    if (patch_size <= 0 || H % patch_size != 0)
        throw Error("patchify: size " + std::to_string(H) + " not divisible by patch " +
                    std::to_string(patch_size));
    int64_t side = H / patch_size;
    int64_t P = side * side;
    int64_t pd = C * patch_size * patch_size;
    Tensor<T> out({B, P, pd});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t py = 0; py < side; ++py)
            for (int64_t px = 0; px < side; ++px) {
                int64_t patch = py * side + px;
                T* dst = out.data.data() + (b * P + patch) * pd;
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t y = 0; y < patch_size; ++y)
                        for (int64_t x = 0; x < patch_size; ++x)
                            *dst++ = images[((b * C + c) * H + py * patch_size + y) * W +
                                            px * patch_size + x];
            }
    return out;
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, int64_t patch_size, int64_t channels) {
    if (patches.ndim() != 3)
        throw Error("unpatchify: expected B x P x D, got " + shape_str(patches.shape));
    int64_t B = patches.shape[0], P = patches.shape[1], pd = patches.shape[2];
    int64_t side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(P))));
    if (side * side != P || pd != channels * patch_size * patch_size)
        throw Error("unpatchify: inconsistent dims " + shape_str(patches.shape));
    int64_t H = side * patch_size;
    Tensor<T> out({B, channels, H, H});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t py = 0; py < side; ++py)
            for (int64_t px = 0; px < side; ++px) {
                const T* src = patches.data.data() + (b * P + py * side + px) * pd;
                for (int64_t c = 0; c < channels; ++c)
                    for (int64_t y = 0; y < patch_size; ++y)
                        for (int64_t x = 0; x < patch_size; ++x)
                            out[((b * channels + c) * H + py * patch_size + y) * H +
                                px * patch_size + x] = *src++;
            }
    return out;
}

// ----------------------------- forward -----------------------------

template <typename T>
struct ViTOutput {
    Var<T> cls;        // (B, dim)
    Var<T> patches;    // (B, P, dim)
    Var<T> layer_cls;  // (B, probe_layers, dim)
};

constexpr double kLayerNormEps = 1e-6;

// Token embedding in front of block 1: patch projection, mask-token
// substitution (before positional embeddings), cls prepend, positional add.
template <typename T>
Var<T> vit_embed(const ViTParams<T>& params, const ViTConfig& cfg, const Tensor<T>& images,
                 const MaskSpec* mask = nullptr) {
    int64_t B = images.shape.at(0);
    int64_t P = cfg.num_patches();
    if (images.shape != Shape{B, cfg.channels, cfg.image_size, cfg.image_size})
        throw Error("vit_embed: image shape " + shape_str(images.shape) + " does not match config");
    auto tokens = constant(patchify(images, cfg.patch_size));
    Var<T> x = add(matmul(tokens, params.at("patch_embed.weight")), params.at("patch_embed.bias"));
    if (mask != nullptr) {
        if (mask->batch != B || mask->num_patches != P)
            throw Error("vit_embed: mask is " + std::to_string(mask->batch) + "x" +
                        std::to_string(mask->num_patches) + ", expected " + std::to_string(B) + "x" +
                        std::to_string(P));
        Tensor<T> keep({B, P, cfg.dim});
        Tensor<T> fill({B, P, cfg.dim});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t p = 0; p < P; ++p) {
                T m = mask->masked(b, p) ? T(1) : T(0);
                for (int64_t d = 0; d < cfg.dim; ++d) {
                    keep[(b * P + p) * cfg.dim + d] = T(1) - m;
                    fill[(b * P + p) * cfg.dim + d] = m;
                }
            }
        x = add(mul(x, constant(keep)), mul(constant(fill), params.at("mask_token")));
    }
    Var<T> cls_row = add(constant(Tensor<T>::zeros({B, 1, cfg.dim})), params.at("cls_token"));
    x = concat<T>({cls_row, x}, 1);
    return add(x, params.at("pos_embed"));
}

template <typename T>
ViTOutput<T> vit_forward(const ViTParams<T>& params, const ViTConfig& cfg, const Tensor<T>& images,
                         const MaskSpec* mask = nullptr) {
    cfg.validate();
    Var<T> x = vit_embed(params, cfg, images, mask);
    int64_t B = images.shape.at(0);
    int64_t tokens = cfg.tokens();
    int64_t dh = cfg.dim / cfg.heads;
    double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    int64_t first_probe_block = cfg.depth - cfg.probe_layers();
    std::vector<Var<T>> probe_cls;
    for (int64_t b = 0; b < cfg.depth; ++b) {
        std::string base = "blocks." + std::to_string(b) + ".";
        Var<T> h = layer_norm(x, params.at(base + "ln1.weight"), params.at(base + "ln1.bias"), kLayerNormEps);
        Var<T> qkv = add(matmul(h, params.at(base + "attn.qkv.weight")), params.at(base + "attn.qkv.bias"));
        auto split_heads = [&](int64_t lo) {
            Var<T> part = slice(qkv, 2, lo * cfg.dim, (lo + 1) * cfg.dim);
            return transpose(reshape(part, {B, tokens, cfg.heads, dh}), {0, 2, 1, 3});
        };
        Var<T> q = split_heads(0), k = split_heads(1), v = split_heads(2);
        Var<T> att = softmax(matmul(scale(q, att_scale), transpose(k, {0, 1, 3, 2})));
        Var<T> ctx = reshape(transpose(matmul(att, v), {0, 2, 1, 3}), {B, tokens, cfg.dim});
        x = add(x, add(matmul(ctx, params.at(base + "attn.proj.weight")), params.at(base + "attn.proj.bias")));
        Var<T> h2 = layer_norm(x, params.at(base + "ln2.weight"), params.at(base + "ln2.bias"), kLayerNormEps);
        Var<T> up = gelu(add(matmul(h2, params.at(base + "mlp.fc1.weight")), params.at(base + "mlp.fc1.bias")));
        x = add(x, add(matmul(up, params.at(base + "mlp.fc2.weight")), params.at(base + "mlp.fc2.bias")));
        if (b >= first_probe_block) probe_cls.push_back(slice(x, 1, 0, 1));
    }
    const Var<T>& nw = params.at("norm.weight");
    const Var<T>& nb = params.at("norm.bias");
    Var<T> y = layer_norm(x, nw, nb, kLayerNormEps);
    ViTOutput<T> out;
    out.cls = reshape(slice(y, 1, 0, 1), {B, cfg.dim});
    out.patches = slice(y, 1, 1, tokens);
    std::vector<Var<T>> normed;
    normed.reserve(probe_cls.size());
    for (auto& pc : probe_cls) normed.push_back(layer_norm(pc, nw, nb, kLayerNormEps));
    out.layer_cls = concat(normed, 1);
    return out;
}

// classifier logits from cls features
template <typename T>
Var<T> classify(const NamedParams<T>& head, const Var<T>& cls) {
    return add(matmul(cls, head.at("head.weight")), head.at("head.bias"));
}

// ----------------------------- weight inheritance -----------------------------

struct InheritReport {
    std::vector<std::string> inherited;
    std::vector<std::string> fresh;

    std::string summary() const {
        std::ostringstream o;
        o << "inherited " << inherited.size() << " tensors, fresh " << fresh.size();
        if (!fresh.empty()) {
            o << " (";
            for (size_t i = 0; i < fresh.size(); ++i) o << (i ? ", " : "") << fresh[i];
            o << ")";
        }
        return o.str();
    }
};

namespace detail {

// evenly spaced indices with floor-ratio stride: {0, s, 2s, ...}
inline std::vector<int64_t> even_indices(int64_t from, int64_t to) {
    if (to > from) throw Error("weight_inherit: student axis " + std::to_string(to) +
                               " larger than teacher axis " + std::to_string(from));
    int64_t stride = from / to;
    std::vector<int64_t> idx(static_cast<size_t>(to));
    for (int64_t i = 0; i < to; ++i) idx[static_cast<size_t>(i)] = i * stride;
    return idx;
}

// per-axis even selection; `segments` splits an axis into equal consecutive
// groups selected independently (the packed qkv layout)
template <typename T>
Tensor<T> select_tensor(const Tensor<T>& src, const Shape& dst_shape, const std::vector<int64_t>& segments) {
    std::vector<std::vector<int64_t>> axis_idx(src.shape.size());
    for (size_t ax = 0; ax < src.shape.size(); ++ax) {
        int64_t seg = segments[ax];
        int64_t from = src.shape[ax] / seg, to = dst_shape[ax] / seg;
        if (from * seg != src.shape[ax] || to * seg != dst_shape[ax])
            throw Error("weight_inherit: axis not divisible into segments");
        std::vector<int64_t> base = even_indices(from, to);
        for (int64_t s = 0; s < seg; ++s)
            for (int64_t v : base) axis_idx[ax].push_back(s * from + v);
    }
    Tensor<T> out(dst_shape);
    auto src_strides = strides_of(src.shape);
    std::vector<int64_t> coord(dst_shape.size(), 0);
    for (int64_t i = 0; i < out.numel(); ++i) {
        int64_t flat = 0;
        for (size_t ax = 0; ax < dst_shape.size(); ++ax)
            flat += axis_idx[ax][static_cast<size_t>(coord[ax])] * src_strides[ax];
        out[i] = src[flat];
        for (size_t ax = dst_shape.size(); ax-- > 0;) {
            if (++coord[ax] < dst_shape[ax]) break;
            coord[ax] = 0;
        }
    }
    return out;
}

}  // namespace detail

// evenly spaced teacher block indices, first and last always included
inline std::vector<int64_t> inherit_block_indices(int64_t teacher_depth, int64_t student_depth) {
    if (student_depth > teacher_depth)
        throw Error("weight_inherit: student depth " + std::to_string(student_depth) +
                    " exceeds teacher depth " + std::to_string(teacher_depth));
    std::vector<int64_t> out(static_cast<size_t>(student_depth));
    for (int64_t i = 0; i < student_depth; ++i) {
        out[static_cast<size_t>(i)] =
            student_depth == 1
                ? 0
                : static_cast<int64_t>(std::llround(static_cast<double>(i) *
                                                    static_cast<double>(teacher_depth - 1) /
                                                    static_cast<double>(student_depth - 1)));
    }
    return out;
}

// Uniform selection of teacher weights into a student-shaped parameter set.
// Tensors whose shapes cannot be matched (positional-embedding length) fall
// back to the fresh seed-derived init and are listed in the report.
template <typename T>
std::pair<ViTParams<T>, InheritReport> weight_inherit(const ViTParams<T>& teacher,
                                                      const ViTConfig& teacher_cfg,
                                                      const ViTConfig& student_cfg,
                                                      uint64_t fresh_seed) {
    teacher_cfg.validate();
    student_cfg.validate();
    if (student_cfg.patch_size != teacher_cfg.patch_size)
        throw Error("weight_inherit: teacher and student must share patch size");
    if (student_cfg.dim > teacher_cfg.dim)
        throw Error("weight_inherit: student dim exceeds teacher dim");
    if (student_cfg.depth > teacher_cfg.depth)
        throw Error("weight_inherit: student depth exceeds teacher depth");
    if (student_cfg.channels != teacher_cfg.channels)
        throw Error("weight_inherit: channel count differs");
    if (student_cfg.mlp_hidden() > teacher_cfg.mlp_hidden())
        throw Error("weight_inherit: student mlp width exceeds teacher");

    ViTParams<T> student = init_params<T>(student_cfg, fresh_seed);
    std::vector<int64_t> block_map = inherit_block_indices(teacher_cfg.depth, student_cfg.depth);
    InheritReport report;

    for (auto& [name, var] : student.entries) {
        std::string teacher_name = name;
        if (name.rfind("blocks.", 0) == 0) {
            size_t dot = name.find('.', 7);
            int64_t sblock = std::stoll(name.substr(7, dot - 7));
            teacher_name = "blocks." + std::to_string(block_map[static_cast<size_t>(sblock)]) +
                           name.substr(dot);
        }
        if (!teacher.has(teacher_name)) {
            report.fresh.push_back(name);
            continue;
        }
        const Tensor<T>& src = teacher.at(teacher_name)->value;
        const Shape& dst_shape = var->value.shape;
        if (src.ndim() != static_cast<int64_t>(dst_shape.size())) {
            report.fresh.push_back(name);
            continue;
        }
        // positional embedding length differences cannot be selected evenly
        if (name == "pos_embed" && src.shape[0] != dst_shape[0]) {
            report.fresh.push_back(name);
            continue;
        }
        std::vector<int64_t> segments(dst_shape.size(), 1);
        if (name.find("attn.qkv.weight") != std::string::npos) segments[1] = 3;
        if (name.find("attn.qkv.bias") != std::string::npos) segments[0] = 3;
        var->value = detail::select_tensor(src, dst_shape, segments);
        report.inherited.push_back(name);
    }
    return {std::move(student), std::move(report)};
}

}  // namespace proteus
