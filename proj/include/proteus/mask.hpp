#pragma once

#include <cstdint>
#include <vector>

#include "proteus/common.hpp"
#include "proteus/rng.hpp"

namespace proteus {

// Per-sample boolean patch mask with ratio bounds.
struct MaskSpec {
    int64_t batch = 0;
    int64_t num_patches = 0;
    std::vector<uint8_t> mask;  // batch x num_patches
    double ratio_lo = 0.0;
    double ratio_hi = 0.0;

    bool masked(int64_t sample, int64_t patch) const {
        return mask[static_cast<size_t>(sample * num_patches + patch)] != 0;
    }

    int64_t masked_count(int64_t sample) const {
        int64_t c = 0;
        for (int64_t p = 0; p < num_patches; ++p) c += masked(sample, p) ? 1 : 0;
        return c;
    }

    void validate() const {
        if (static_cast<int64_t>(mask.size()) != batch * num_patches)
            throw Error("MaskSpec: mask size does not match batch x num_patches");
        for (int64_t i = 0; i < batch; ++i) {
            int64_t c = masked_count(i);
            if (c < 1 || c >= num_patches)
                throw Error("MaskSpec: sample " + std::to_string(i) +
                            " must have at least 1 masked and 1 unmasked patch");
        }
    }
};

// Per sample: ratio ~ U[lo, hi], then round(ratio * num_patches) positions
// chosen uniformly without replacement. Always leaves at least one masked and
// one unmasked patch.
inline MaskSpec sample_mask(int64_t batch, int64_t num_patches, double lo, double hi, Rng& rng) {
    if (!(0.0 < lo && lo <= hi && hi < 1.0))
        throw Error("sample_mask: ratio range [" + std::to_string(lo) + "," + std::to_string(hi) +
                    ") must satisfy 0 < lo <= hi < 1");
    if (num_patches < 2) throw Error("sample_mask: need at least 2 patches");
    MaskSpec spec;
    spec.batch = batch;
    spec.num_patches = num_patches;
    spec.ratio_lo = lo;
    spec.ratio_hi = hi;
    spec.mask.assign(static_cast<size_t>(batch * num_patches), 0);
    std::vector<int64_t> order(static_cast<size_t>(num_patches));
    for (int64_t b = 0; b < batch; ++b) {
        double r = rng.uniform(lo, hi);
        int64_t k = static_cast<int64_t>(std::llround(r * static_cast<double>(num_patches)));
        k = std::max<int64_t>(1, std::min(num_patches - 1, k));
        for (int64_t i = 0; i < num_patches; ++i) order[static_cast<size_t>(i)] = i;
        // partial Fisher-Yates: first k entries are the masked positions
        for (int64_t i = 0; i < k; ++i) {
            int64_t j = i + rng.below(num_patches - i);
            std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
            spec.mask[static_cast<size_t>(b * num_patches + order[static_cast<size_t>(i)])] = 1;
        }
    }
    return spec;
}

}  // namespace proteus
