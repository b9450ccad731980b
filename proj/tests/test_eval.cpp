#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "proteus/eval.hpp"

using namespace proteus;

namespace {

// test oracle: full symmetric eigendecomposition by cyclic Jacobi sweeps
std::vector<double> jacobi_eigenvalues(std::vector<double> a, int64_t n) {
    for (int sweep = 0; sweep < 200; ++sweep) {
        double off = 0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
        if (off < 1e-26) break;
        for (int64_t p = 0; p < n; ++p)
            for (int64_t q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                double tau = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                double t = (tau >= 0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = t * c;
                for (int64_t k = 0; k < n; ++k) {
                    double akp = a[k * n + p], akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (int64_t k = 0; k < n; ++k) {
                    double apk = a[p * n + k], aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
    }
    std::vector<double> eig(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) eig[static_cast<size_t>(i)] = a[i * n + i];
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
}

std::vector<double> covariance_of(const std::vector<double>& x, int64_t n, int64_t d) {
    std::vector<double> mean(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += x[static_cast<size_t>(i * d + j)];
    for (auto& m : mean) m /= static_cast<double>(n);
    std::vector<double> cov(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < d; ++a)
            for (int64_t b = 0; b < d; ++b)
                cov[static_cast<size_t>(a * d + b)] +=
                    (x[static_cast<size_t>(i * d + a)] - mean[static_cast<size_t>(a)]) *
                    (x[static_cast<size_t>(i * d + b)] - mean[static_cast<size_t>(b)]);
    for (auto& v : cov) v /= static_cast<double>(n - 1);
    return cov;
}

// separable 2-class features in 2-D plus distractor dims
FeatureMatrix separable_features(int64_t per_class, int64_t extra_dims, uint64_t seed) {
    Rng rng(seed);
    FeatureMatrix fm;
    fm.n = per_class * 2;
    fm.d = 2 + extra_dims;
    fm.values.resize(static_cast<size_t>(fm.n * fm.d));
    for (int64_t i = 0; i < fm.n; ++i) {
        int64_t label = i < per_class ? 0 : 1;
        double cx = label == 0 ? -2.0 : 2.0;
        fm.values[static_cast<size_t>(i * fm.d)] = cx + 0.3 * rng.normal();
        fm.values[static_cast<size_t>(i * fm.d + 1)] = 0.3 * rng.normal();
        for (int64_t j = 2; j < fm.d; ++j)
            fm.values[static_cast<size_t>(i * fm.d + j)] = rng.normal();
        fm.labels.push_back(label);
    }
    return fm;
}

}  // namespace

TEST_CASE("the regularization grid has 45 log-spaced values with exact endpoints") {
    std::vector<double> grid = probe_l2_grid();
    REQUIRE(grid.size() == 45);
    REQUIRE(grid[0] == 1e-6);
    REQUIRE(grid[44] == 1e3);
    double ratio = grid[1] / grid[0];
    for (size_t i = 1; i < grid.size(); ++i) {
        double r = grid[i] / grid[i - 1];
        REQUIRE(r == Catch::Approx(ratio).epsilon(1e-9));
    }
}

TEST_CASE("accuracy counts exact matches") {
    REQUIRE(accuracy({1, 2, 3}, {1, 2, 3}) == 1.0);
    REQUIRE(accuracy({0, 0, 0}, {1, 2, 3}) == 0.0);
    REQUIRE(accuracy({1, 2, 3, 4}, {1, 2, 3, 0}) == 0.75);
    REQUIRE_THROWS_AS(accuracy({1}, {1, 2}), Error);
}

TEST_CASE("separable features reach near-perfect train accuracy at tiny regularization") {
    FeatureMatrix fm = separable_features(40, 4, 1);
    SplitIndices split = make_split(fm.labels, 0.2, 0.2, 2);
    ProbeResult res = probe_lbfgs(fm, split, 500);
    REQUIRE(res.train_accuracy >= 0.99);
    REQUIRE(res.grid_accuracies.size() == 45);
    REQUIRE(std::find(res.grid.begin(), res.grid.end(), res.best_l2) != res.grid.end());
    REQUIRE(res.iterations_used <= 500);
}

TEST_CASE("duplicating every training row leaves the optimum unchanged") {
    FeatureMatrix fm = separable_features(20, 2, 3);
    SplitIndices split = make_split(fm.labels, 0.25, 0.0, 4);
    ProbeResult once = probe_lbfgs(fm, split, 300);
    // duplicated rows appended, train indices doubled
    FeatureMatrix fm2 = fm;
    fm2.values.insert(fm2.values.end(), fm.values.begin(), fm.values.end());
    fm2.labels.insert(fm2.labels.end(), fm.labels.begin(), fm.labels.end());
    fm2.n *= 2;
    SplitIndices split2 = split;
    for (int64_t idx : split.train) split2.train.push_back(idx + fm.n);
    ProbeResult twice = probe_lbfgs(fm2, split2, 300);
    REQUIRE(twice.val_accuracy == Catch::Approx(once.val_accuracy).margin(1e-6));
    REQUIRE(twice.best_l2 == Catch::Approx(once.best_l2).epsilon(1e-9));
}

TEST_CASE("probe results are invariant to feature row order") {
    FeatureMatrix fm = separable_features(25, 3, 5);
    SplitIndices split = make_split(fm.labels, 0.2, 0.2, 6);
    ProbeResult base = probe_lbfgs(fm, split, 300);
    // permute rows and remap the split indices accordingly
    Rng rng(7);
    std::vector<int64_t> perm = rng.permutation(fm.n);
    std::vector<int64_t> inverse(static_cast<size_t>(fm.n));
    for (int64_t i = 0; i < fm.n; ++i) inverse[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
    FeatureMatrix shuffled;
    shuffled.n = fm.n;
    shuffled.d = fm.d;
    shuffled.values.resize(fm.values.size());
    shuffled.labels.resize(fm.labels.size());
    for (int64_t i = 0; i < fm.n; ++i) {
        int64_t src = perm[static_cast<size_t>(i)];
        std::copy(fm.row(src), fm.row(src) + fm.d, shuffled.values.begin() + i * fm.d);
        shuffled.labels[static_cast<size_t>(i)] = fm.labels[static_cast<size_t>(src)];
    }
    SplitIndices smap;
    for (int64_t i : split.train) smap.train.push_back(inverse[static_cast<size_t>(i)]);
    for (int64_t i : split.val) smap.val.push_back(inverse[static_cast<size_t>(i)]);
    for (int64_t i : split.test) smap.test.push_back(inverse[static_cast<size_t>(i)]);
    ProbeResult moved = probe_lbfgs(shuffled, smap, 300);
    REQUIRE(moved.train_accuracy == Catch::Approx(base.train_accuracy).margin(1e-6));
    REQUIRE(moved.val_accuracy == Catch::Approx(base.val_accuracy).margin(1e-6));
    REQUIRE(moved.test_accuracy == Catch::Approx(base.test_accuracy).margin(1e-6));
    REQUIRE(moved.best_l2 == Catch::Approx(base.best_l2).epsilon(1e-9));
}

TEST_CASE("probes reject degenerate single-class training splits") {
    FeatureMatrix fm = separable_features(10, 0, 8);
    for (auto& l : fm.labels) l = 0;
    SplitIndices split = make_split(fm.labels, 0.2, 0.0, 9);
    REQUIRE_THROWS_AS(probe_lbfgs(fm, split, 100), Error);
}

TEST_CASE("sgd probe trains a usable classifier and is deterministic") {
    FeatureMatrix fm = separable_features(30, 2, 10);
    SplitIndices split = make_split(fm.labels, 0.2, 0.2, 11);
    SgdProbeOptions opt;
    opt.iterations = 500;
    opt.seed = 3;
    ProbeResult a = probe_sgd(fm, split, opt);
    REQUIRE(a.val_accuracy >= 0.95);
    ProbeResult b = probe_sgd(fm, split, opt);
    REQUIRE(a.val_accuracy == b.val_accuracy);
    REQUIRE(a.test_accuracy == b.test_accuracy);
    // zero iterations: the untrained baseline is recorded, not asserted
    SgdProbeOptions zero;
    zero.iterations = 0;
    ProbeResult base = probe_sgd(fm, split, zero);
    INFO("untrained baseline accuracy " << base.val_accuracy);
    REQUIRE(base.iterations_used == 0);
}

TEST_CASE("pca components are orthonormal and match the eigensolver oracle") {
    Rng rng(12);
    int64_t n = 64, d = 16;
    std::vector<double> x(static_cast<size_t>(n * d));
    for (auto& v : x) v = rng.normal();
    // stretch a few directions so the spectrum is interesting
    for (int64_t i = 0; i < n; ++i) {
        x[static_cast<size_t>(i * d)] *= 4.0;
        x[static_cast<size_t>(i * d + 3)] *= 2.0;
    }
    PcaRgbResult res = pca_rgb(x, n, d);
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
            double dot = 0;
            for (int64_t j = 0; j < d; ++j)
                dot += res.components[static_cast<size_t>(a * d + j)] *
                       res.components[static_cast<size_t>(b * d + j)];
            REQUIRE(dot == Catch::Approx(a == b ? 1.0 : 0.0).margin(1e-6));
        }
    std::vector<double> eig = jacobi_eigenvalues(covariance_of(x, n, d), d);
    for (int c = 0; c < 3; ++c)
        REQUIRE(res.explained[static_cast<size_t>(c)] ==
                Catch::Approx(eig[static_cast<size_t>(c)]).margin(1e-6));
    REQUIRE(res.rgb.size() == static_cast<size_t>(n * 3));
}

TEST_CASE("pca on axis-aligned 3-D data recovers the axes up to sign and order") {
    Rng rng(13);
    int64_t n = 400;
    std::vector<double> x(static_cast<size_t>(n * 3));
    for (int64_t i = 0; i < n; ++i) {
        x[static_cast<size_t>(i * 3)] = 3.0 * rng.normal();
        x[static_cast<size_t>(i * 3 + 1)] = 2.0 * rng.normal();
        x[static_cast<size_t>(i * 3 + 2)] = 1.0 * rng.normal();
    }
    PcaRgbResult res = pca_rgb(x, n, 3);
    std::vector<bool> used(3, false);
    for (int c = 0; c < 3; ++c) {
        int64_t dominant = 0;
        for (int64_t j = 1; j < 3; ++j)
            if (std::abs(res.components[static_cast<size_t>(c * 3 + j)]) >
                std::abs(res.components[static_cast<size_t>(c * 3 + dominant)]))
                dominant = j;
        REQUIRE(std::abs(res.components[static_cast<size_t>(c * 3 + dominant)]) > 0.99);
        REQUIRE(!used[static_cast<size_t>(dominant)]);
        used[static_cast<size_t>(dominant)] = true;
    }
}

TEST_CASE("pca output is invariant to feature rotation up to channel flips") {
    Rng rng(14);
    int64_t n = 50, d = 6;
    std::vector<double> x(static_cast<size_t>(n * d));
    for (auto& v : x) v = rng.normal();
    for (int64_t i = 0; i < n; ++i) {
        x[static_cast<size_t>(i * d)] *= 5.0;
        x[static_cast<size_t>(i * d + 1)] *= 2.5;
        x[static_cast<size_t>(i * d + 2)] *= 1.5;
    }
    // random orthogonal Q by Gram-Schmidt
    std::vector<double> q(static_cast<size_t>(d * d));
    for (int64_t r = 0; r < d; ++r) {
        for (int64_t c = 0; c < d; ++c) q[static_cast<size_t>(r * d + c)] = rng.normal();
        for (int64_t p = 0; p < r; ++p) {
            double dot = 0;
            for (int64_t c = 0; c < d; ++c)
                dot += q[static_cast<size_t>(r * d + c)] * q[static_cast<size_t>(p * d + c)];
            for (int64_t c = 0; c < d; ++c) q[static_cast<size_t>(r * d + c)] -= dot * q[static_cast<size_t>(p * d + c)];
        }
        double norm = 0;
        for (int64_t c = 0; c < d; ++c) norm += q[static_cast<size_t>(r * d + c)] * q[static_cast<size_t>(r * d + c)];
        norm = std::sqrt(norm);
        for (int64_t c = 0; c < d; ++c) q[static_cast<size_t>(r * d + c)] /= norm;
    }
    std::vector<double> xq(x.size(), 0.0);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t a = 0; a < d; ++a)
            for (int64_t b = 0; b < d; ++b)
                xq[static_cast<size_t>(i * d + a)] +=
                    x[static_cast<size_t>(i * d + b)] * q[static_cast<size_t>(b * d + a)];
    PcaRgbResult base = pca_rgb(x, n, d);
    PcaRgbResult rotated = pca_rgb(xq, n, d);
    for (int c = 0; c < 3; ++c) {
        int64_t straight = 0, flipped = 0;
        for (int64_t i = 0; i < n; ++i) {
            int a = base.rgb[static_cast<size_t>(i * 3 + c)];
            int b = rotated.rgb[static_cast<size_t>(i * 3 + c)];
            straight = std::max<int64_t>(straight, std::abs(a - b));
            flipped = std::max<int64_t>(flipped, std::abs(a - (255 - b)));
        }
        REQUIRE(std::min(straight, flipped) <= 1);
    }
}

TEST_CASE("rank-deficient inputs are rejected with the effective rank") {
    Rng rng(15);
    int64_t n = 20, d = 5;
    std::vector<double> x(static_cast<size_t>(n * d));
    // rank 2: all rows are combinations of two vectors
    for (int64_t i = 0; i < n; ++i) {
        double a = rng.normal(), b = rng.normal();
        for (int64_t j = 0; j < d; ++j)
            x[static_cast<size_t>(i * d + j)] = a * (j + 1) + b * (j % 2 == 0 ? 1.0 : -1.0);
    }
    REQUIRE_THROWS_MATCHES(pca_rgb(x, n, d), Error,
                           Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("rank")));
    REQUIRE_THROWS_AS(pca_rgb(x, 2, d), Error);
}

TEST_CASE("feature extraction concatenates the configured layers") {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.dim = 32;
    cfg.depth = 4;
    cfg.heads = 2;
    cfg.layers_for_probe = 4;
    auto params = init_params<float>(cfg, 0);
    ToySpec spec;
    spec.classes = 2;
    spec.per_class = 3;
    spec.size = 8;
    spec.seed = 16;
    DatasetContainer ds = gen_toy_dataset(spec);
    FeatureMatrix fm = extract_features(params, cfg, ds);
    REQUIRE(fm.d == 128);  // 4 layers x dim 32
    REQUIRE(fm.n == 6);
    FeatureMatrix one = extract_features(params, cfg, ds, /*layers_override=*/1);
    REQUIRE(one.d == 32);
    // identical images give identical rows
    DatasetContainer twin = ds;
    std::copy(ds.image(0), ds.image(0) + ds.image_bytes(),
              twin.pixels.begin() + 1 * ds.image_bytes());
    FeatureMatrix tf = extract_features(params, cfg, twin);
    for (int64_t j = 0; j < tf.d; ++j) REQUIRE(tf.row(0)[j] == tf.row(1)[j]);
}

TEST_CASE("probing never touches backbone parameters") {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.dim = 16;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.layers_for_probe = 2;
    auto params = init_params<float>(cfg, 17);
    std::vector<Tensor<float>> before;
    for (auto& [name, var] : params.entries) before.push_back(var->value);
    ToySpec spec;
    spec.classes = 3;
    spec.per_class = 12;
    spec.size = 8;
    spec.seed = 18;
    DatasetContainer ds = gen_toy_dataset(spec);
    FeatureMatrix fm = extract_features(params, cfg, ds);
    SplitIndices split = make_split(fm.labels, 0.25, 0.0, 19);
    probe_lbfgs(fm, split, 100);
    size_t i = 0;
    for (auto& [name, var] : params.entries) REQUIRE(bitwise_equal(var->value, before[i++]));
}

TEST_CASE("splits are deterministic and stratified") {
    std::vector<int64_t> labels;
    for (int64_t i = 0; i < 100; ++i) labels.push_back(i % 4);
    SplitIndices a = make_split(labels, 0.2, 0.2, 20);
    SplitIndices b = make_split(labels, 0.2, 0.2, 20);
    REQUIRE(a.train == b.train);
    REQUIRE(a.val == b.val);
    REQUIRE(a.test == b.test);
    REQUIRE(a.train.size() + a.val.size() + a.test.size() == 100);
    std::vector<int> val_counts(4, 0);
    for (int64_t i : a.val) val_counts[static_cast<size_t>(labels[static_cast<size_t>(i)])]++;
    for (int c : val_counts) REQUIRE(c == 5);
}

TEST_CASE("ppm writer emits a valid P6 header and payload") {
    std::vector<uint8_t> rgb = {255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30};
    write_ppm("t_tile.ppm", 2, 2, rgb, 2);
    std::ifstream in("t_tile.ppm", std::ios::binary);
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    REQUIRE(all.rfind("P6\n4 4\n255\n", 0) == 0);
    REQUIRE(all.size() == 11 + 4 * 4 * 3);
    std::remove("t_tile.ppm");
}
