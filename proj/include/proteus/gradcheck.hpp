#pragma once

#include <functional>
#include <vector>

#include "proteus/autodiff.hpp"
#include "proteus/rng.hpp"

namespace proteus {

// Central finite-difference check of reverse-mode gradients, 64-bit only.
// `build` must be a pure function of the leaf values so it can be re-run at
// perturbed points.
inline double check_scalar_loss(
    const std::function<Var<double>(const std::vector<Var<double>>&)>& build,
    std::vector<Tensor<double>> inputs, double h = 1e-5) {
    std::vector<Var<double>> leaves;
    leaves.reserve(inputs.size());
    for (auto& t : inputs) leaves.push_back(make_leaf(t, true));
    Var<double> loss = build(leaves);
    if (loss->value.numel() != 1) throw Error("check_scalar_loss: loss is not scalar");
    GradMap<double> gm = backward(loss);

    auto eval = [&](const std::vector<Tensor<double>>& vals) {
        NoGradGuard ng;
        std::vector<Var<double>> consts;
        consts.reserve(vals.size());
        for (const auto& t : vals) consts.push_back(constant(t));
        return build(consts)->value[0];
    };

    double max_rel = 0.0;
    for (size_t t = 0; t < inputs.size(); ++t) {
        Tensor<double> analytic = gm.get_or_zero(leaves[t]);
        for (int64_t i = 0; i < inputs[t].numel(); ++i) {
            double keep = inputs[t][i];
            inputs[t][i] = keep + h;
            double fp = eval(inputs);
            inputs[t][i] = keep - h;
            double fm = eval(inputs);
            inputs[t][i] = keep;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[i];
            double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

namespace detail {

struct GradCheckCase {
    OpAttrs attrs;
    std::vector<Tensor<double>> inputs;
};

inline GradCheckCase make_grad_check_case(Op kind, const std::vector<Shape>& shapes, Rng& rng) {
    GradCheckCase c;
    auto randn = [&](const Shape& s) { return Tensor<double>::randn(s, rng); };
    switch (kind) {
        case Op::matmul:
        case Op::mse:
        case Op::concat:
        case Op::add:
        case Op::sub:
        case Op::mul:
            for (const Shape& s : shapes) c.inputs.push_back(randn(s));
            break;
        case Op::scale:
            c.inputs.push_back(randn(shapes.at(0)));
            c.attrs.scalar = 1.7;
            break;
        case Op::gelu:
        case Op::softmax:
        case Op::log_softmax:
        case Op::reshape:
        case Op::transpose:
        case Op::mean:
        case Op::sum:
        case Op::slice:
        case Op::gather_rows:
            c.inputs.push_back(randn(shapes.at(0)));
            break;
        case Op::layer_norm: {
            Tensor<double> x = randn(shapes.at(0));
            int64_t d = x.shape.back();
            int64_t rows = x.numel() / d;
            // keep away from the zero-variance non-smooth point
            for (int64_t r = 0; r < rows; ++r) {
                for (;;) {
                    double mu = 0, var = 0;
                    for (int64_t j = 0; j < d; ++j) mu += x[r * d + j];
                    mu /= static_cast<double>(d);
                    for (int64_t j = 0; j < d; ++j) {
                        double cde = x[r * d + j] - mu;
                        var += cde * cde;
                    }
                    var /= static_cast<double>(d);
                    if (var > 1e-3) break;
                    for (int64_t j = 0; j < d; ++j) x[r * d + j] = rng.normal();
                }
            }
            c.inputs.push_back(std::move(x));
            Tensor<double> gamma({d});
            for (auto& v : gamma.data) v = rng.uniform(0.5, 1.5);
            c.inputs.push_back(std::move(gamma));
            c.inputs.push_back(randn({d}));
            c.attrs.eps = 1e-6;
            break;
        }
        case Op::cross_entropy: {
            Tensor<double> logits = randn(shapes.at(0));
            int64_t k = logits.shape.at(1);
            for (int64_t i = 0; i < logits.shape.at(0); ++i) c.attrs.targets.push_back(rng.below(k));
            c.inputs.push_back(std::move(logits));
            break;
        }
        case Op::kl_div:
            c.inputs.push_back(randn(shapes.at(0)));
            c.inputs.push_back(randn(shapes.at(0)));
            break;
        case Op::leaf:
            throw Error("grad_check: leaf is not an op");
    }
    // op-specific attrs
    switch (kind) {
        case Op::mean:
        case Op::sum:
            c.attrs.axes = {0};
            break;
        case Op::reshape:
            c.attrs.target_shape = {c.inputs[0].numel()};
            break;
        case Op::transpose: {
            int64_t nd = c.inputs[0].ndim();
            for (int64_t i = nd; i-- > 0;) c.attrs.perm.push_back(i);
            break;
        }
        case Op::concat:
            c.attrs.axis = 0;
            break;
        case Op::slice: {
            int64_t d = c.inputs[0].shape.at(0);
            c.attrs.axis = 0;
            c.attrs.start = d / 4;
            c.attrs.stop = std::min(d, c.attrs.start + std::max<int64_t>(1, d / 2));
            break;
        }
        case Op::gather_rows: {
            int64_t d = c.inputs[0].shape.at(0);
            c.attrs.axis = 0;
            c.attrs.indices = {0, d - 1, 0};  // repeats exercise scatter-add
            break;
        }
        default:
            break;
    }
    return c;
}

}  // namespace detail

// Max relative error between analytic and central finite-difference gradients
// of a random scalar projection of the op output.
inline double grad_check(Op kind, const std::vector<Shape>& shapes, uint64_t seed) {
    Rng rng(seed);
    detail::GradCheckCase c = detail::make_grad_check_case(kind, shapes, rng);
    // probe the output shape once to draw the projection weights
    Shape out_shape;
    {
        NoGradGuard ng;
        std::vector<Var<double>> consts;
        for (const auto& t : c.inputs) consts.push_back(constant(t));
        out_shape = proteus::apply(kind, consts, c.attrs)->value.shape;
    }
    Tensor<double> proj(out_shape);
    for (auto& v : proj.data) v = rng.uniform(0.5, 1.5);

    auto build = [&](const std::vector<Var<double>>& leaves) {
        Var<double> out = proteus::apply(kind, leaves, c.attrs);
        if (out->value.numel() == 1 && out->value.ndim() == 1) return out;
        return sum_axes(mul(out, constant(proj)));
    };
    return check_scalar_loss(build, c.inputs);
}

// canonical shapes used by the op-sweep property test
inline std::vector<Shape> default_grad_check_shapes(Op kind) {
    switch (kind) {
        case Op::matmul: return {{2, 3}, {3, 2}};
        case Op::add:
        case Op::sub:
        case Op::mul: return {{3, 4}, {4}};
        case Op::mse:
        case Op::concat: return {{3, 4}, {3, 4}};
        case Op::layer_norm: return {{3, 8}};
        case Op::cross_entropy:
        case Op::kl_div: return {{4, 5}};
        case Op::gelu: return {{4, 4}};
        case Op::scale:
        case Op::softmax:
        case Op::log_softmax:
        case Op::mean:
        case Op::sum:
        case Op::reshape:
        case Op::transpose:
        case Op::slice:
        case Op::gather_rows: return {{4, 5}};
        case Op::leaf: break;
    }
    throw Error("no default shapes for op");
}

inline std::vector<Op> all_checked_ops() {
    return {Op::matmul, Op::add,  Op::sub,       Op::mul,         Op::scale,  Op::gelu,
            Op::layer_norm, Op::softmax, Op::log_softmax, Op::mean,   Op::sum,
            Op::reshape,    Op::transpose, Op::concat,  Op::slice,       Op::gather_rows,
            Op::mse,        Op::cross_entropy, Op::kl_div};
}

}  // namespace proteus
