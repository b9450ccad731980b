#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "proteus/autodiff.hpp"
#include "proteus/vit.hpp"

namespace proteus {

// ----------------------------- schedule -----------------------------

struct Schedule {
    double base_lr = 1e-3;
    double min_lr = 1e-5;
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double grad_clip_norm = 0.0;  // <= 0 disables clipping

    void validate() const {
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw ConfigError("schedule: warmup_steps must satisfy 0 <= warmup < total_steps");
        if (min_lr > base_lr) throw ConfigError("schedule: min_lr exceeds base_lr");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("schedule: betas must lie in [0, 1)");
        if (epsilon <= 0) throw ConfigError("schedule: epsilon must be positive");
    }
};

// Linear warmup 0 -> base_lr, then cosine decay to min_lr.
inline double lr_at(int64_t step, const Schedule& s) {
    s.validate();
    if (step < 0 || step > s.total_steps)
        throw Error("lr_at: step " + std::to_string(step) + " outside [0, " +
                    std::to_string(s.total_steps) + "]");
    if (step < s.warmup_steps)
        return s.base_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    double t = static_cast<double>(step - s.warmup_steps) /
               static_cast<double>(s.total_steps - s.warmup_steps);
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

// ----------------------------- gradient clipping -----------------------------

// Scale all gradients by max_norm/norm when the global L2 norm exceeds
// max_norm; identity otherwise.
template <typename T>
GradMap<T> clip_global_norm(const GradMap<T>& grads, double max_norm) {
    if (max_norm <= 0) throw Error("clip_global_norm: max_norm must be positive");
    GradMap<T> out = grads;
    double norm = out.global_norm();
    if (norm <= max_norm || norm == 0.0) return out;
    T factor = static_cast<T>(max_norm / norm);
    for (auto& [id, g] : out.items())
        for (auto& v : g.data) v *= factor;
    return out;
}

// ----------------------------- AdamW -----------------------------

template <typename T>
struct OptState {
    struct Slot {
        Tensor<T> m, v;
    };
    std::unordered_map<std::string, Slot> slots;
    int64_t step = 0;
};

// Decoupled weight decay hits weight matrices only; norm scales, biases and
// the embedding/token vectors are exempt.
inline bool decay_applies(const std::string& name, int64_t ndim) {
    return ndim >= 2 && name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

template <typename T>
void adamw_step(std::vector<std::pair<std::string, Var<T>>>& params, const GradMap<T>& grads,
                OptState<T>& state, const Schedule& s) {
    s.validate();
    const GradMap<T>* active = &grads;
    GradMap<T> clipped;
    if (s.grad_clip_norm > 0) {
        clipped = clip_global_norm(grads, s.grad_clip_norm);
        active = &clipped;
    }
    double lr = lr_at(std::min(state.step, s.total_steps), s);
    int64_t t = state.step + 1;
    double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
    for (auto& [name, var] : params) {
        if (!var->requires_grad) continue;
        Tensor<T>& p = var->value;
        Tensor<T> g = active->get_or_zero(var);
        if (debug_checks() && !g.all_finite())
            throw Error("adamw_step: non-finite gradient for " + name);
        if (g.shape != p.shape)
            throw Error("adamw_step: gradient shape " + shape_str(g.shape) + " != param shape " +
                        shape_str(p.shape) + " for " + name);
        auto it = state.slots.find(name);
        if (it == state.slots.end()) {
            it = state.slots.emplace(name, typename OptState<T>::Slot{Tensor<T>::zeros(p.shape),
                                                                      Tensor<T>::zeros(p.shape)}).first;
        }
        Tensor<T>& m = it->second.m;
        Tensor<T>& v = it->second.v;
        bool decay = decay_applies(name, p.ndim()) && s.weight_decay > 0;
        T b1 = static_cast<T>(s.beta1), b2 = static_cast<T>(s.beta2);
        for (int64_t i = 0; i < p.numel(); ++i) {
            if (decay) p[i] -= static_cast<T>(lr * s.weight_decay) * p[i];
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            double mhat = static_cast<double>(m[i]) / bc1;
            double vhat = static_cast<double>(v[i]) / bc2;
            p[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + s.epsilon));
        }
    }
    state.step += 1;
}

// ----------------------------- state serialization -----------------------------

// OptState rides inside checkpoints under reserved "__opt__" names.
template <typename T>
std::vector<std::pair<std::string, Tensor<float>>> opt_state_to_f32(const OptState<T>& state) {
    std::vector<std::pair<std::string, Tensor<float>>> out;
    out.emplace_back("__opt__.step", Tensor<float>({1}, {static_cast<float>(state.step)}));
    std::vector<std::string> names;
    names.reserve(state.slots.size());
    for (const auto& [name, slot] : state.slots) names.push_back(name);
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
        const auto& slot = state.slots.at(name);
        out.emplace_back("__opt__.m." + name, slot.m.template cast<float>());
        out.emplace_back("__opt__.v." + name, slot.v.template cast<float>());
    }
    return out;
}

template <typename T>
OptState<T> opt_state_from_checkpoint(const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
    OptState<T> state;
    for (const auto& [name, t] : tensors) {
        if (name == "__opt__.step") state.step = static_cast<int64_t>(t[0]);
        else if (name.rfind("__opt__.m.", 0) == 0)
            state.slots[name.substr(10)].m = t.template cast<T>();
        else if (name.rfind("__opt__.v.", 0) == 0)
            state.slots[name.substr(10)].v = t.template cast<T>();
    }
    return state;
}

}  // namespace proteus
