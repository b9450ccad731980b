#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <vector>

#include "proteus/common.hpp"

namespace proteus {

// f(x) with gradient written into `grad`; both sized like x
using ObjectiveFn = std::function<double(const std::vector<double>&, std::vector<double>&)>;

struct LbfgsOptions {
    int max_iter = 500;
    int memory = 10;
    double grad_tol = 1e-6;  // stop on ||g||_2
    double c1 = 1e-4;        // strong Wolfe
    double c2 = 0.9;
    int max_line_search = 30;
};

struct LbfgsResult {
    double fx = 0;
    int iterations = 0;
    bool converged = false;
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace detail

// L-BFGS with strong-Wolfe line search (bracket + zoom, bisection steps).
inline LbfgsResult lbfgs_minimize(std::vector<double>& x, const ObjectiveFn& fg,
                                  const LbfgsOptions& opt = {}) {
    size_t n = x.size();
    std::vector<double> g(n), gnew(n), xnew(n), dir(n);
    double fx = fg(x, g);

    struct Pair {
        std::vector<double> s, y;
        double rho;
    };
    std::deque<Pair> history;

    LbfgsResult res;
    res.fx = fx;

    for (int iter = 0; iter < opt.max_iter; ++iter) {
        if (detail::norm2(g) <= opt.grad_tol) {
            res.converged = true;
            break;
        }
        // two-loop recursion
        dir = g;
        std::vector<double> alpha(history.size());
        for (size_t i = history.size(); i-- > 0;) {
            alpha[i] = history[i].rho * detail::dot(history[i].s, dir);
            for (size_t j = 0; j < n; ++j) dir[j] -= alpha[i] * history[i].y[j];
        }
        if (!history.empty()) {
            const Pair& last = history.back();
            double gamma = detail::dot(last.s, last.y) / detail::dot(last.y, last.y);
            for (size_t j = 0; j < n; ++j) dir[j] *= gamma;
        }
        for (size_t i = 0; i < history.size(); ++i) {
            double beta = history[i].rho * detail::dot(history[i].y, dir);
            for (size_t j = 0; j < n; ++j) dir[j] += history[i].s[j] * (alpha[i] - beta);
        }
        for (size_t j = 0; j < n; ++j) dir[j] = -dir[j];

        double dg0 = detail::dot(dir, g);
        if (dg0 >= 0) {  // not a descent direction; restart from steepest descent
            history.clear();
            for (size_t j = 0; j < n; ++j) dir[j] = -g[j];
            dg0 = -detail::dot(g, g);
            if (dg0 == 0) {
                res.converged = true;
                break;
            }
        }

        // strong Wolfe line search
        auto phi = [&](double a, std::vector<double>& gout) {
            for (size_t j = 0; j < n; ++j) xnew[j] = x[j] + a * dir[j];
            return fg(xnew, gout);
        };
        double a_prev = 0.0, f_prev = fx, a = 1.0;
        double f_a = 0, dg_a = 0;
        double a_lo = 0, a_hi = 0, f_lo = 0;
        bool bracketed = false, found = false;
        for (int ls = 0; ls < opt.max_line_search; ++ls) {
            f_a = phi(a, gnew);
            dg_a = detail::dot(dir, gnew);
            if (f_a > fx + opt.c1 * a * dg0 || (ls > 0 && f_a >= f_prev)) {
                a_lo = a_prev;
                f_lo = f_prev;
                a_hi = a;
                bracketed = true;
                break;
            }
            if (std::abs(dg_a) <= -opt.c2 * dg0) {
                found = true;
                break;
            }
            if (dg_a >= 0) {
                a_lo = a;
                f_lo = f_a;
                a_hi = a_prev;
                bracketed = true;
                break;
            }
            a_prev = a;
            f_prev = f_a;
            a *= 2.0;
        }
        if (bracketed && !found) {
            for (int z = 0; z < opt.max_line_search; ++z) {
                a = 0.5 * (a_lo + a_hi);
                f_a = phi(a, gnew);
                dg_a = detail::dot(dir, gnew);
                if (f_a > fx + opt.c1 * a * dg0 || f_a >= f_lo) {
                    a_hi = a;
                } else {
                    if (std::abs(dg_a) <= -opt.c2 * dg0) {
                        found = true;
                        break;
                    }
                    if (dg_a * (a_hi - a_lo) >= 0) a_hi = a_lo;
                    a_lo = a;
                    f_lo = f_a;
                }
                if (std::abs(a_hi - a_lo) < 1e-16) break;
            }
        }
        if (!found && f_a >= fx) {
            // no progress possible along this direction
            res.iterations = iter;
            res.fx = fx;
            return res;
        }

        // accept the step at `a` (xnew, f_a, gnew are current)
        std::vector<double> s(n), y(n);
        for (size_t j = 0; j < n; ++j) {
            s[j] = xnew[j] - x[j];
            y[j] = gnew[j] - g[j];
        }
        double sy = detail::dot(s, y);
        if (sy > 1e-12) {
            history.push_back({std::move(s), std::move(y), 1.0 / sy});
            if (static_cast<int>(history.size()) > opt.memory) history.pop_front();
        }
        x = xnew;
        fx = f_a;
        g = gnew;
        res.iterations = iter + 1;
    }
    res.fx = fx;
    if (detail::norm2(g) <= opt.grad_tol) res.converged = true;
    return res;
}

}  // namespace proteus
