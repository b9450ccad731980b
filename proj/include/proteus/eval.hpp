#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "proteus/dataset.hpp"
#include "proteus/lbfgs.hpp"
#include "proteus/rng.hpp"
#include "proteus/vit.hpp"

namespace proteus {

// ----------------------------- features -----------------------------

struct FeatureMatrix {
    int64_t n = 0;
    int64_t d = 0;
    std::vector<double> values;   // n x d
    std::vector<int64_t> labels;  // empty when unlabeled
    std::string provenance;

    double* row(int64_t i) { return values.data() + i * d; }
    const double* row(int64_t i) const { return values.data() + i * d; }
};

// Frozen-feature extraction: center view only, cls tokens of the last
// `probe_layers` blocks concatenated per image. Never touches gradients.
template <typename T>
FeatureMatrix extract_features(const ViTParams<T>& params, const ViTConfig& cfg,
                               const DatasetContainer& ds, int64_t layers_override = 0,
                               int64_t batch_size = 32) {
    ViTConfig probe_cfg = cfg;
    if (layers_override > 0) probe_cfg.layers_for_probe = layers_override;
    probe_cfg.validate();
    int64_t k = probe_cfg.probe_layers();
    std::vector<double> mean, stdev;
    ds.channel_stats(mean, stdev);
    FeatureMatrix fm;
    fm.n = ds.n;
    fm.d = k * probe_cfg.dim;
    fm.values.resize(static_cast<size_t>(fm.n * fm.d));
    if (ds.has_labels) {
        fm.labels.reserve(static_cast<size_t>(ds.n));
        for (int64_t i = 0; i < ds.n; ++i) fm.labels.push_back(ds.label(i));
    }
    NoGradGuard ng;
    for (int64_t start = 0; start < ds.n; start += batch_size) {
        int64_t b = std::min(batch_size, ds.n - start);
        Tensor<T> images({b, ds.channels, probe_cfg.image_size, probe_cfg.image_size});
        for (int64_t i = 0; i < b; ++i) {
            Tensor<T> img = center_view<T>(ds, start + i, probe_cfg.image_size, mean, stdev);
            std::copy(img.data.begin(), img.data.end(),
                      images.data.begin() + i * img.numel());
        }
        ViTOutput<T> out = vit_forward(params, probe_cfg, images);
        const Tensor<T>& lc = out.layer_cls->value;  // (b, k, dim)
        for (int64_t i = 0; i < b; ++i)
            for (int64_t j = 0; j < fm.d; ++j)
                fm.values[static_cast<size_t>((start + i) * fm.d + j)] =
                    static_cast<double>(lc[i * fm.d + j]);
    }
    fm.provenance = "features(layers=" + std::to_string(k) + " of " + ds.provenance + ")";
    return fm;
}

// ----------------------------- splits -----------------------------

struct SplitIndices {
    std::vector<int64_t> train, val, test;
};

// Stratified deterministic split; val/test fractions are taken per class.
inline SplitIndices make_split(const std::vector<int64_t>& labels, double val_frac, double test_frac,
                               uint64_t seed) {
    SplitIndices out;
    int64_t max_label = 0;
    for (int64_t l : labels) max_label = std::max(max_label, l);
    std::vector<std::vector<int64_t>> by_class(static_cast<size_t>(max_label + 1));
    for (size_t i = 0; i < labels.size(); ++i)
        by_class[static_cast<size_t>(labels[i])].push_back(static_cast<int64_t>(i));
    Rng root(seed);
    for (size_t k = 0; k < by_class.size(); ++k) {
        auto& members = by_class[k];
        if (members.empty()) continue;
        Rng rng = root.child("split", k);
        rng.shuffle(members.begin(), members.end());
        int64_t n = static_cast<int64_t>(members.size());
        int64_t n_test = static_cast<int64_t>(std::llround(test_frac * static_cast<double>(n)));
        int64_t n_val = static_cast<int64_t>(std::llround(val_frac * static_cast<double>(n)));
        n_test = std::min(n_test, n);
        n_val = std::min(n_val, n - n_test);
        for (int64_t i = 0; i < n; ++i) {
            if (i < n_test) out.test.push_back(members[static_cast<size_t>(i)]);
            else if (i < n_test + n_val) out.val.push_back(members[static_cast<size_t>(i)]);
            else out.train.push_back(members[static_cast<size_t>(i)]);
        }
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

// ----------------------------- linear probes -----------------------------

struct ProbeResult {
    double best_l2 = 0;
    std::vector<double> grid;
    std::vector<double> grid_accuracies;  // val accuracy per grid point
    double train_accuracy = 0;
    double val_accuracy = 0;
    double test_accuracy = 0;
    int iterations_used = 0;

    nlohmann::json to_json() const {
        return {{"best_l2", best_l2},
                {"grid", grid},
                {"grid_accuracies", grid_accuracies},
                {"train_accuracy", train_accuracy},
                {"val_accuracy", val_accuracy},
                {"test_accuracy", test_accuracy},
                {"iterations_used", iterations_used}};
    }
};

inline double accuracy(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels) {
    if (preds.size() != labels.size())
        throw Error("accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                    std::to_string(labels.size()) + " labels");
    if (preds.empty()) throw Error("accuracy: empty inputs");
    int64_t hit = 0;
    for (size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

// 45 logarithmically spaced values with exact endpoints 1e-6 and 1e3
inline std::vector<double> probe_l2_grid() {
    std::vector<double> grid(45);
    double lo = std::log(1e-6), hi = std::log(1e3);
    for (int i = 1; i < 44; ++i) grid[static_cast<size_t>(i)] = std::exp(lo + (hi - lo) * i / 44.0);
    grid[0] = 1e-6;
    grid[44] = 1e3;
    return grid;
}

namespace detail {

struct LinearModel {
    int64_t d = 0, k = 0;
    std::vector<double> wb;  // W (d*k) then b (k)

    double* w() { return wb.data(); }
    double* b() { return wb.data() + d * k; }
    const double* w() const { return wb.data(); }
    const double* b() const { return wb.data() + d * k; }
};

inline void softmax_logits_row(const double* z, int64_t k, std::vector<double>& p) {
    double mx = z[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    double sum = 0;
    for (int64_t j = 0; j < k; ++j) {
        p[static_cast<size_t>(j)] = std::exp(z[j] - mx);
        sum += p[static_cast<size_t>(j)];
    }
    for (int64_t j = 0; j < k; ++j) p[static_cast<size_t>(j)] /= sum;
}

// mean CE over the subset plus 0.5*l2*||W||^2; gradient in same layout
inline double logistic_objective(const FeatureMatrix& fm, const std::vector<int64_t>& subset,
                                 int64_t k, double l2, const std::vector<double>& wb,
                                 std::vector<double>& grad) {
    int64_t d = fm.d;
    const double* w = wb.data();
    const double* b = wb.data() + d * k;
    std::fill(grad.begin(), grad.end(), 0.0);
    double* gw = grad.data();
    double* gb = grad.data() + d * k;
    double loss = 0;
    std::vector<double> z(static_cast<size_t>(k)), p(static_cast<size_t>(k));
    double invn = 1.0 / static_cast<double>(subset.size());
    for (int64_t row : subset) {
        const double* x = fm.row(row);
        for (int64_t j = 0; j < k; ++j) {
            double acc = b[j];
            for (int64_t t = 0; t < d; ++t) acc += x[t] * w[t * k + j];
            z[static_cast<size_t>(j)] = acc;
        }
        int64_t y = fm.labels[static_cast<size_t>(row)];
        softmax_logits_row(z.data(), k, p);
        loss -= std::log(std::max(p[static_cast<size_t>(y)], 1e-300)) * invn;
        for (int64_t j = 0; j < k; ++j) {
            double diff = (p[static_cast<size_t>(j)] - (j == y ? 1.0 : 0.0)) * invn;
            gb[j] += diff;
            for (int64_t t = 0; t < d; ++t) gw[t * k + j] += diff * x[t];
        }
    }
    for (int64_t t = 0; t < d * k; ++t) {
        loss += 0.5 * l2 * w[t] * w[t];
        gw[t] += l2 * w[t];
    }
    return loss;
}

inline std::vector<int64_t> predict_linear(const FeatureMatrix& fm, const std::vector<int64_t>& subset,
                                           int64_t k, const std::vector<double>& wb) {
    int64_t d = fm.d;
    const double* w = wb.data();
    const double* b = wb.data() + d * k;
    std::vector<int64_t> preds;
    preds.reserve(subset.size());
    for (int64_t row : subset) {
        const double* x = fm.row(row);
        int64_t best = 0;
        double best_z = -1e300;
        for (int64_t j = 0; j < k; ++j) {
            double acc = b[j];
            for (int64_t t = 0; t < d; ++t) acc += x[t] * w[t * k + j];
            if (acc > best_z) {
                best_z = acc;
                best = j;
            }
        }
        preds.push_back(best);
    }
    return preds;
}

inline std::vector<int64_t> subset_labels(const FeatureMatrix& fm, const std::vector<int64_t>& subset) {
    std::vector<int64_t> out;
    out.reserve(subset.size());
    for (int64_t row : subset) out.push_back(fm.labels[static_cast<size_t>(row)]);
    return out;
}

inline int64_t class_count_of(const FeatureMatrix& fm, const std::vector<int64_t>& subset) {
    int64_t k = 0;
    std::vector<bool> seen;
    for (int64_t row : subset) {
        int64_t y = fm.labels[static_cast<size_t>(row)];
        if (y >= static_cast<int64_t>(seen.size())) seen.resize(static_cast<size_t>(y + 1), false);
        seen[static_cast<size_t>(y)] = true;
        k = std::max(k, y + 1);
    }
    int64_t distinct = 0;
    for (bool s : seen) distinct += s ? 1 : 0;
    if (distinct < 2) throw Error("probe: train split has fewer than 2 classes");
    return k;
}

}  // namespace detail

// Multinomial logistic regression by L-BFGS over the 45-value regularization
// grid; the constant is chosen on the validation split.
inline ProbeResult probe_lbfgs(const FeatureMatrix& fm, const SplitIndices& split, int max_iter = 500) {
    if (fm.labels.empty()) throw Error("probe_lbfgs: features carry no labels");
    int64_t k = detail::class_count_of(fm, split.train);
    ProbeResult res;
    res.grid = probe_l2_grid();
    res.grid_accuracies.assign(res.grid.size(), 0.0);
    auto val_labels = detail::subset_labels(fm, split.val);
    double best_acc = -1;
    size_t best_idx = 0;
    std::vector<std::vector<double>> solutions(res.grid.size());
    std::vector<int> iters(res.grid.size(), 0);
    for (size_t gi = 0; gi < res.grid.size(); ++gi) {
        std::vector<double> wb(static_cast<size_t>(fm.d * k + k), 0.0);
        LbfgsOptions opt;
        opt.max_iter = max_iter;
        LbfgsResult lr = lbfgs_minimize(
            wb,
            [&](const std::vector<double>& p, std::vector<double>& g) {
                return detail::logistic_objective(fm, split.train, k, res.grid[gi], p, g);
            },
            opt);
        iters[gi] = lr.iterations;
        double acc = accuracy(detail::predict_linear(fm, split.val, k, wb), val_labels);
        res.grid_accuracies[gi] = acc;
        solutions[gi] = std::move(wb);
        if (acc > best_acc) {
            best_acc = acc;
            best_idx = gi;
        }
    }
    res.best_l2 = res.grid[best_idx];
    res.iterations_used = iters[best_idx];
    const auto& wb = solutions[best_idx];
    res.train_accuracy = accuracy(detail::predict_linear(fm, split.train, k, wb),
                                  detail::subset_labels(fm, split.train));
    res.val_accuracy = best_acc;
    if (!split.test.empty())
        res.test_accuracy = accuracy(detail::predict_linear(fm, split.test, k, wb),
                                     detail::subset_labels(fm, split.test));
    return res;
}

struct SgdProbeOptions {
    std::vector<double> lr_grid = {0.1, 0.03, 0.01};
    int64_t iterations = 2000;
    int64_t batch_size = 64;
    double momentum = 0.9;
    uint64_t seed = 0;
};

// Minibatch-SGD linear classifier with cosine decay over a small lr grid;
// mirrors the iteration-budget protocol rather than the L-BFGS one.
inline ProbeResult probe_sgd(const FeatureMatrix& fm, const SplitIndices& split,
                             const SgdProbeOptions& opt = {}) {
    if (fm.labels.empty()) throw Error("probe_sgd: features carry no labels");
    int64_t k = detail::class_count_of(fm, split.train);
    int64_t d = fm.d;
    ProbeResult res;
    res.grid = opt.lr_grid;
    res.grid_accuracies.assign(res.grid.size(), 0.0);
    auto val_labels = detail::subset_labels(fm, split.val);
    double best_acc = -1;
    size_t best_idx = 0;
    std::vector<std::vector<double>> solutions(res.grid.size());
    int64_t n_train = static_cast<int64_t>(split.train.size());
    int64_t bsize = std::min(opt.batch_size, n_train);
    for (size_t gi = 0; gi < res.grid.size(); ++gi) {
        std::vector<double> wb(static_cast<size_t>(d * k + k), 0.0);
        std::vector<double> vel(wb.size(), 0.0);
        std::vector<double> z(static_cast<size_t>(k)), p(static_cast<size_t>(k));
        int64_t steps_per_epoch = std::max<int64_t>(1, n_train / bsize);
        std::vector<int64_t> perm;
        for (int64_t it = 0; it < opt.iterations; ++it) {
            int64_t epoch = it / steps_per_epoch;
            int64_t slot = it % steps_per_epoch;
            if (slot == 0) perm = epoch_permutation(n_train, epoch, opt.seed);
            double lr = 0.5 * opt.lr_grid[gi] *
                        (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(it) /
                                        static_cast<double>(opt.iterations)));
            std::vector<double> grad(wb.size(), 0.0);
            double invb = 1.0 / static_cast<double>(bsize);
            for (int64_t bi = 0; bi < bsize; ++bi) {
                int64_t row = split.train[static_cast<size_t>(perm[static_cast<size_t>(
                    (slot * bsize + bi) % n_train)])];
                const double* x = fm.row(row);
                for (int64_t j = 0; j < k; ++j) {
                    double acc = wb[static_cast<size_t>(d * k + j)];
                    for (int64_t t = 0; t < d; ++t) acc += x[t] * wb[static_cast<size_t>(t * k + j)];
                    z[static_cast<size_t>(j)] = acc;
                }
                detail::softmax_logits_row(z.data(), k, p);
                int64_t y = fm.labels[static_cast<size_t>(row)];
                for (int64_t j = 0; j < k; ++j) {
                    double diff = (p[static_cast<size_t>(j)] - (j == y ? 1.0 : 0.0)) * invb;
                    grad[static_cast<size_t>(d * k + j)] += diff;
                    for (int64_t t = 0; t < d; ++t) grad[static_cast<size_t>(t * k + j)] += diff * x[t];
                }
            }
            for (size_t j = 0; j < wb.size(); ++j) {
                vel[j] = opt.momentum * vel[j] + grad[j];
                wb[j] -= lr * vel[j];
            }
        }
        double acc = split.val.empty()
                         ? 0.0
                         : accuracy(detail::predict_linear(fm, split.val, k, wb), val_labels);
        res.grid_accuracies[gi] = acc;
        solutions[gi] = std::move(wb);
        if (acc > best_acc) {
            best_acc = acc;
            best_idx = gi;
        }
    }
    res.best_l2 = res.grid[best_idx];
    res.iterations_used = static_cast<int>(opt.iterations);
    const auto& wb = solutions[best_idx];
    res.train_accuracy = accuracy(detail::predict_linear(fm, split.train, k, wb),
                                  detail::subset_labels(fm, split.train));
    res.val_accuracy = std::max(best_acc, 0.0);
    if (!split.test.empty())
        res.test_accuracy = accuracy(detail::predict_linear(fm, split.test, k, wb),
                                     detail::subset_labels(fm, split.test));
    return res;
}

// ----------------------------- PCA visualization -----------------------------

struct PcaRgbResult {
    std::vector<uint8_t> rgb;          // n x 3
    std::vector<double> explained;     // top-3 eigenvalues of the covariance
    std::vector<double> components;    // 3 x d, orthonormal
};

// Center, project onto the top-3 principal components (power iteration with
// deflation), then min-max scale each channel to [0, 255].
inline PcaRgbResult pca_rgb(const std::vector<double>& features, int64_t n, int64_t d) {
    if (n < 3) throw Error("pca_rgb: need at least 3 rows, got " + std::to_string(n));
    if (static_cast<int64_t>(features.size()) != n * d) throw Error("pca_rgb: size mismatch");
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += features[static_cast<size_t>(i * d + j)];
    for (auto& m : mean) m /= static_cast<double>(n);
    std::vector<double> centered(features.size());
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
            centered[static_cast<size_t>(i * d + j)] =
                features[static_cast<size_t>(i * d + j)] - mean[static_cast<size_t>(j)];
    // covariance, d x d
    std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < d; ++a) {
            double va = centered[static_cast<size_t>(i * d + a)];
            if (va == 0.0) continue;
            for (int64_t b = 0; b < d; ++b)
                cov[static_cast<size_t>(a * d + b)] += va * centered[static_cast<size_t>(i * d + b)];
        }
    double inv = 1.0 / static_cast<double>(n - 1);
    for (auto& v : cov) v *= inv;
    double trace = 0;
    for (int64_t a = 0; a < d; ++a) trace += cov[static_cast<size_t>(a * d + a)];

    PcaRgbResult res;
    res.components.assign(static_cast<size_t>(3 * d), 0.0);
    res.explained.assign(3, 0.0);
    std::vector<double> work = cov;
    Rng rng(12345);
    for (int comp = 0; comp < 3; ++comp) {
        std::vector<double> v(static_cast<size_t>(d));
        for (auto& x : v) x = rng.normal();
        // orthogonalize against found components for stability
        for (int prev = 0; prev < comp; ++prev) {
            double dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += v[static_cast<size_t>(j)] * res.components[static_cast<size_t>(prev * d + j)];
            for (int64_t j = 0; j < d; ++j) v[static_cast<size_t>(j)] -= dot * res.components[static_cast<size_t>(prev * d + j)];
        }
        double lambda = 0;
        std::vector<double> next(static_cast<size_t>(d));
        for (int iter = 0; iter < 5000; ++iter) {
            for (int64_t a = 0; a < d; ++a) {
                double acc = 0;
                for (int64_t b = 0; b < d; ++b) acc += work[static_cast<size_t>(a * d + b)] * v[static_cast<size_t>(b)];
                next[static_cast<size_t>(a)] = acc;
            }
            double norm = 0;
            for (double x : next) norm += x * x;
            norm = std::sqrt(norm);
            if (norm < 1e-14 * std::max(1.0, trace)) {
                lambda = 0;
                break;
            }
            double diff = 0;
            for (int64_t j = 0; j < d; ++j) {
                next[static_cast<size_t>(j)] /= norm;
                diff += std::abs(next[static_cast<size_t>(j)] - v[static_cast<size_t>(j)]);
            }
            std::swap(v, next);
            lambda = norm;
            if (diff < 1e-14) break;
        }
        if (lambda <= 1e-9 * std::max(trace, 1e-30)) {
            throw Error("pca_rgb: effective rank " + std::to_string(comp) + " < 3");
        }
        // canonical sign: largest-magnitude entry positive
        int64_t piv = 0;
        for (int64_t j = 1; j < d; ++j)
            if (std::abs(v[static_cast<size_t>(j)]) > std::abs(v[static_cast<size_t>(piv)])) piv = j;
        if (v[static_cast<size_t>(piv)] < 0)
            for (auto& x : v) x = -x;
        for (int64_t j = 0; j < d; ++j) res.components[static_cast<size_t>(comp * d + j)] = v[static_cast<size_t>(j)];
        res.explained[static_cast<size_t>(comp)] = lambda;
        // deflate
        for (int64_t a = 0; a < d; ++a)
            for (int64_t b = 0; b < d; ++b)
                work[static_cast<size_t>(a * d + b)] -= lambda * v[static_cast<size_t>(a)] * v[static_cast<size_t>(b)];
    }

    // project and scale
    std::vector<double> proj(static_cast<size_t>(n * 3));
    for (int64_t i = 0; i < n; ++i)
        for (int comp = 0; comp < 3; ++comp) {
            double acc = 0;
            for (int64_t j = 0; j < d; ++j)
                acc += centered[static_cast<size_t>(i * d + j)] * res.components[static_cast<size_t>(comp * d + j)];
            proj[static_cast<size_t>(i * 3 + comp)] = acc;
        }
    res.rgb.assign(static_cast<size_t>(n * 3), 0);
    for (int comp = 0; comp < 3; ++comp) {
        double lo = 1e300, hi = -1e300;
        for (int64_t i = 0; i < n; ++i) {
            lo = std::min(lo, proj[static_cast<size_t>(i * 3 + comp)]);
            hi = std::max(hi, proj[static_cast<size_t>(i * 3 + comp)]);
        }
        double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
        for (int64_t i = 0; i < n; ++i)
            res.rgb[static_cast<size_t>(i * 3 + comp)] = static_cast<uint8_t>(
                std::llround((proj[static_cast<size_t>(i * 3 + comp)] - lo) * scale));
    }
    return res;
}

// ----------------------------- PPM output -----------------------------

inline void write_ppm(const std::string& path, int64_t width, int64_t height,
                      const std::vector<uint8_t>& rgb, int64_t upscale = 1) {
    if (static_cast<int64_t>(rgb.size()) != width * height * 3)
        throw Error("write_ppm: buffer size mismatch");
    ByteWriter w(path);
    std::string header = "P6\n" + std::to_string(width * upscale) + " " +
                         std::to_string(height * upscale) + "\n255\n";
    w.str(header);
    for (int64_t y = 0; y < height * upscale; ++y)
        for (int64_t x = 0; x < width * upscale; ++x) {
            int64_t src = ((y / upscale) * width + (x / upscale)) * 3;
            w.bytes(rgb.data() + src, 3);
        }
}

}  // namespace proteus
