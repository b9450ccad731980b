#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "proteus/common.hpp"
#include "proteus/rng.hpp"
#include "proteus/tensor.hpp"

namespace proteus {

// ----------------------------- container -----------------------------

// Bit-exact on-disk image container. Pixels are N x C x H x W unsigned bytes;
// labels are optional u16 class ids. Provenance is in-memory metadata only and
// is not persisted in the PXDS file.
struct DatasetContainer {
    int64_t n = 0;
    int64_t channels = 0;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<uint8_t> pixels;
    bool has_labels = false;
    std::vector<uint16_t> labels;
    uint16_t class_count = 0;
    std::string provenance;
    mutable uint64_t label_reads = 0;  // instrumented access counter

    int64_t image_bytes() const { return channels * height * width; }

    const uint8_t* image(int64_t i) const { return pixels.data() + i * image_bytes(); }

    uint16_t label(int64_t i) const {
        if (!has_labels) throw Error("dataset: container '" + provenance + "' has no labels");
        ++label_reads;
        return labels[static_cast<size_t>(i)];
    }

    void validate() const {
        if (n < 1) throw Error("dataset: container must hold at least one image");
        if (static_cast<int64_t>(pixels.size()) != n * image_bytes())
            throw Error("dataset: pixel buffer size mismatch");
        if (has_labels) {
            if (static_cast<int64_t>(labels.size()) != n) throw Error("dataset: label count mismatch");
            for (uint16_t l : labels)
                if (l >= class_count)
                    throw Error("dataset: label " + std::to_string(l) + " >= class_count " +
                                std::to_string(class_count));
        }
    }

    // per-channel pixel statistics in [0,1]; std floored to keep constant
    // containers usable
    void channel_stats(std::vector<double>& mean, std::vector<double>& stdev) const {
        mean.assign(static_cast<size_t>(channels), 0.0);
        stdev.assign(static_cast<size_t>(channels), 0.0);
        int64_t per = height * width;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < channels; ++c) {
                const uint8_t* p = image(i) + c * per;
                for (int64_t j = 0; j < per; ++j) mean[static_cast<size_t>(c)] += p[j] / 255.0;
            }
        for (auto& m : mean) m /= static_cast<double>(n * per);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < channels; ++c) {
                const uint8_t* p = image(i) + c * per;
                for (int64_t j = 0; j < per; ++j) {
                    double d = p[j] / 255.0 - mean[static_cast<size_t>(c)];
                    stdev[static_cast<size_t>(c)] += d * d;
                }
            }
        for (auto& s : stdev) s = std::max(std::sqrt(s / static_cast<double>(n * per)), 1e-3);
    }
};

inline bool same_payload(const DatasetContainer& a, const DatasetContainer& b) {
    return a.n == b.n && a.channels == b.channels && a.height == b.height && a.width == b.width &&
           a.has_labels == b.has_labels && a.class_count == b.class_count && a.pixels == b.pixels &&
           a.labels == b.labels;
}

// ----------------------------- PXDS format -----------------------------

inline constexpr uint32_t kDatasetVersion = 1;

inline void save_container(const DatasetContainer& ds, const std::string& path) {
    ds.validate();
    ByteWriter w(path);
    w.str("PXDS");
    w.u32(kDatasetVersion);
    w.u32(static_cast<uint32_t>(ds.n));
    w.u16(static_cast<uint16_t>(ds.channels));
    w.u16(static_cast<uint16_t>(ds.height));
    w.u16(static_cast<uint16_t>(ds.width));
    w.u8(ds.has_labels ? 1 : 0);
    w.u16(ds.class_count);
    if (ds.has_labels)
        for (uint16_t l : ds.labels) w.u16(l);
    w.bytes(ds.pixels.data(), ds.pixels.size());
}

inline DatasetContainer load_container(const std::string& path) {
    ByteReader r(path);
    std::string magic = r.str(4, "magic");
    if (magic != "PXDS") throw IoError(path + ": not a PXDS dataset (bad magic)");
    uint32_t version = r.u32("version");
    if (version != kDatasetVersion)
        throw IoError(path + ": unsupported dataset version " + std::to_string(version));
    DatasetContainer ds;
    ds.n = r.u32("image count");
    ds.channels = r.u16("channels");
    ds.height = r.u16("height");
    ds.width = r.u16("width");
    ds.has_labels = r.u8("label flag") != 0;
    ds.class_count = r.u16("class count");
    if (ds.has_labels) {
        ds.labels.resize(static_cast<size_t>(ds.n));
        for (int64_t i = 0; i < ds.n; ++i) ds.labels[static_cast<size_t>(i)] = r.u16("labels");
    }
    ds.pixels.resize(static_cast<size_t>(ds.n * ds.image_bytes()));
    r.bytes(ds.pixels.data(), ds.pixels.size(), "pixel data");
    if (!r.at_eof()) throw IoError(path + ": trailing bytes after pixel data");
    ds.provenance = "loaded:" + path;
    ds.validate();
    return ds;
}

// ----------------------------- augmentation -----------------------------

struct AugRecipe {
    double crop_scale_lo = 0.08;
    double crop_scale_hi = 1.0;
    double crop_aspect_lo = 3.0 / 4.0;
    double crop_aspect_hi = 4.0 / 3.0;
    double hflip_prob = 0.5;
    int64_t output_size = 16;
    std::vector<double> mean;  // per channel, in [0,1] units
    std::vector<double> stdev;

    void validate() const {
        if (!(0.0 < crop_scale_lo && crop_scale_lo <= crop_scale_hi && crop_scale_hi <= 1.0))
            throw ConfigError("aug recipe: crop_scale must satisfy 0 < lo <= hi <= 1");
        if (crop_aspect_lo <= 0 || crop_aspect_lo > crop_aspect_hi)
            throw ConfigError("aug recipe: bad aspect range");
        if (hflip_prob < 0 || hflip_prob > 1) throw ConfigError("aug recipe: bad hflip_prob");
        if (output_size < 1) throw ConfigError("aug recipe: bad output_size");
    }

    double mean_for(int64_t c) const { return mean.empty() ? 0.5 : mean[static_cast<size_t>(c) % mean.size()]; }
    double std_for(int64_t c) const { return stdev.empty() ? 0.25 : stdev[static_cast<size_t>(c) % stdev.size()]; }
};

namespace detail {

struct CropBox {
    int64_t top, left, h, w;
};

// random resized crop: sample area fraction and log-uniform aspect, retry up
// to 10 times, fall back to the full frame
inline CropBox sample_crop(int64_t H, int64_t W, const AugRecipe& r, Rng& rng) {
    double area = static_cast<double>(H * W);
    for (int attempt = 0; attempt < 10; ++attempt) {
        double target = area * rng.uniform(r.crop_scale_lo, r.crop_scale_hi);
        double log_ar = rng.uniform(std::log(r.crop_aspect_lo), std::log(r.crop_aspect_hi));
        double ar = std::exp(log_ar);
        int64_t w = static_cast<int64_t>(std::llround(std::sqrt(target * ar)));
        int64_t h = static_cast<int64_t>(std::llround(std::sqrt(target / ar)));
        if (w >= 1 && h >= 1 && w <= W && h <= H) {
            int64_t top = rng.below(H - h + 1);
            int64_t left = rng.below(W - w + 1);
            return {top, left, h, w};
        }
    }
    return {0, 0, H, W};
}

// bilinear sample of one channel plane, align_corners=false convention
inline double bilinear_at(const uint8_t* plane, int64_t H, int64_t W, double y, double x) {
    y = std::min(std::max(y, 0.0), static_cast<double>(H - 1));
    x = std::min(std::max(x, 0.0), static_cast<double>(W - 1));
    int64_t y0 = static_cast<int64_t>(std::floor(y));
    int64_t x0 = static_cast<int64_t>(std::floor(x));
    int64_t y1 = std::min(y0 + 1, H - 1);
    int64_t x1 = std::min(x0 + 1, W - 1);
    double fy = y - static_cast<double>(y0);
    double fx = x - static_cast<double>(x0);
    double v00 = plane[y0 * W + x0], v01 = plane[y0 * W + x1];
    double v10 = plane[y1 * W + x0], v11 = plane[y1 * W + x1];
    return v00 * (1 - fy) * (1 - fx) + v01 * (1 - fy) * fx + v10 * fy * (1 - fx) + v11 * fy * fx;
}

// crop + bilinear resize, output in [0,255] doubles, channel planes
inline std::vector<double> resize_crop(const uint8_t* img, int64_t C, int64_t H, int64_t W,
                                       const CropBox& box, int64_t S, bool flip) {
    std::vector<double> out(static_cast<size_t>(C * S * S));
    double sy = static_cast<double>(box.h) / static_cast<double>(S);
    double sx = static_cast<double>(box.w) / static_cast<double>(S);
    for (int64_t c = 0; c < C; ++c) {
        const uint8_t* plane = img + c * H * W;
        for (int64_t y = 0; y < S; ++y)
            for (int64_t x = 0; x < S; ++x) {
                int64_t xo = flip ? S - 1 - x : x;
                double srcy = box.top + (static_cast<double>(y) + 0.5) * sy - 0.5;
                double srcx = box.left + (static_cast<double>(xo) + 0.5) * sx - 0.5;
                // clamp into the crop box, then offset already applied
                srcy = std::min(std::max(srcy, static_cast<double>(box.top)),
                                static_cast<double>(box.top + box.h - 1));
                srcx = std::min(std::max(srcx, static_cast<double>(box.left)),
                                static_cast<double>(box.left + box.w - 1));
                out[static_cast<size_t>((c * S + y) * S + x)] = bilinear_at(plane, H, W, srcy, srcx);
            }
    }
    return out;
}

}  // namespace detail

// horizontal flip of a raw u8 image, used by augmentation and its tests
inline std::vector<uint8_t> flip_horizontal(const uint8_t* img, int64_t C, int64_t H, int64_t W) {
    std::vector<uint8_t> out(static_cast<size_t>(C * H * W));
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                out[static_cast<size_t>((c * H + y) * W + x)] = img[(c * H + y) * W + (W - 1 - x)];
    return out;
}

// Training view: random-resized-crop, horizontal flip, [0,1] scaling, then
// per-channel normalization. Returns (C, S, S).
template <typename T>
Tensor<T> augment_train(const DatasetContainer& ds, int64_t index, const AugRecipe& recipe, Rng& rng) {
    recipe.validate();
    detail::CropBox box = detail::sample_crop(ds.height, ds.width, recipe, rng);
    bool flip = rng.uniform01() < recipe.hflip_prob;
    std::vector<double> raw =
        detail::resize_crop(ds.image(index), ds.channels, ds.height, ds.width, box, recipe.output_size, flip);
    int64_t S = recipe.output_size;
    Tensor<T> out({ds.channels, S, S});
    for (int64_t c = 0; c < ds.channels; ++c) {
        double m = recipe.mean_for(c), sd = recipe.std_for(c);
        for (int64_t j = 0; j < S * S; ++j)
            out[c * S * S + j] = static_cast<T>((raw[static_cast<size_t>(c * S * S + j)] / 255.0 - m) / sd);
    }
    return out;
}

// Evaluation view: full-frame bilinear resize, no augmentation.
template <typename T>
Tensor<T> center_view(const DatasetContainer& ds, int64_t index, int64_t out_size,
                      const std::vector<double>& mean, const std::vector<double>& stdev) {
    detail::CropBox box{0, 0, ds.height, ds.width};
    std::vector<double> raw =
        detail::resize_crop(ds.image(index), ds.channels, ds.height, ds.width, box, out_size, false);
    Tensor<T> out({ds.channels, out_size, out_size});
    for (int64_t c = 0; c < ds.channels; ++c) {
        double m = mean.empty() ? 0.5 : mean[static_cast<size_t>(c) % mean.size()];
        double sd = stdev.empty() ? 0.25 : stdev[static_cast<size_t>(c) % stdev.size()];
        for (int64_t j = 0; j < out_size * out_size; ++j)
            out[c * out_size * out_size + j] =
                static_cast<T>((raw[static_cast<size_t>(c * out_size * out_size + j)] / 255.0 - m) / sd);
    }
    return out;
}

// ----------------------------- generators -----------------------------

struct ToySpec {
    int64_t classes = 10;
    int64_t per_class = 50;
    int64_t size = 16;
    int64_t channels = 1;
    uint64_t seed = 0;
};

// Class-conditional oriented gratings plus pixel noise; classes are linearly
// separable in pixel space by construction.
inline DatasetContainer gen_toy_dataset(const ToySpec& spec) {
    if (spec.classes < 2) throw Error("gen_toy_dataset: need at least 2 classes");
    if (spec.per_class < 1 || spec.size < 2) throw Error("gen_toy_dataset: bad spec");
    Rng rng = Rng(spec.seed).child("toy");
    DatasetContainer ds;
    ds.n = spec.classes * spec.per_class;
    ds.channels = spec.channels;
    ds.height = spec.size;
    ds.width = spec.size;
    ds.has_labels = true;
    ds.class_count = static_cast<uint16_t>(spec.classes);
    ds.pixels.resize(static_cast<size_t>(ds.n * ds.image_bytes()));
    ds.labels.resize(static_cast<size_t>(ds.n));
    const double pi = 3.14159265358979323846;
    int64_t idx = 0;
    for (int64_t k = 0; k < spec.classes; ++k) {
        double theta = pi * static_cast<double>(k) / static_cast<double>(spec.classes);
        double freq = 2.0 + 0.25 * static_cast<double>(k % 3);
        for (int64_t i = 0; i < spec.per_class; ++i, ++idx) {
            ds.labels[static_cast<size_t>(idx)] = static_cast<uint16_t>(k);
            uint8_t* img = ds.pixels.data() + idx * ds.image_bytes();
            // oriented grating per class; bounded phase jitter varies the
            // images without breaking linear separability
            double phase = 0.7 * static_cast<double>(k) + rng.uniform(-1.0, 1.0);
            for (int64_t c = 0; c < spec.channels; ++c)
                for (int64_t y = 0; y < spec.size; ++y)
                    for (int64_t x = 0; x < spec.size; ++x) {
                        double u = (static_cast<double>(x) * std::cos(theta) +
                                    static_cast<double>(y) * std::sin(theta)) /
                                   static_cast<double>(spec.size);
                        double v = 128.0 +
                                   80.0 * std::sin(2.0 * pi * freq * u + phase + 0.4 * static_cast<double>(c)) +
                                   30.0 * rng.normal();
                        img[(c * spec.size + y) * spec.size + x] =
                            static_cast<uint8_t>(std::llround(std::min(255.0, std::max(0.0, v))));
                    }
        }
    }
    ds.provenance = "toy(classes=" + std::to_string(spec.classes) + ",per_class=" +
                    std::to_string(spec.per_class) + ",size=" + std::to_string(spec.size) +
                    ",seed=" + std::to_string(spec.seed) + ")";
    return ds;
}

// Procedural "large image" source for single-image datasets: gradients,
// gratings and soft blobs composed deterministically.
inline DatasetContainer gen_source_image(int64_t size, int64_t channels, uint64_t seed) {
    if (size < 8) throw Error("gen_source_image: size too small");
    Rng rng = Rng(seed).child("source-image");
    DatasetContainer ds;
    ds.n = 1;
    ds.channels = channels;
    ds.height = size;
    ds.width = size;
    ds.pixels.resize(static_cast<size_t>(ds.image_bytes()));
    const double pi = 3.14159265358979323846;
    std::vector<double> acc(static_cast<size_t>(channels * size * size), 0.0);
    for (int64_t c = 0; c < channels; ++c)
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x)
                acc[static_cast<size_t>((c * size + y) * size + x)] =
                    96.0 + 64.0 * static_cast<double>(y) / static_cast<double>(size);
    for (int patch = 0; patch < 8; ++patch) {
        double theta = rng.uniform(0, pi);
        double freq = rng.uniform(2.0, 6.0);
        double amp = rng.uniform(20.0, 45.0);
        int64_t cx = rng.below(size), cy = rng.below(size);
        double radius = rng.uniform(size / 8.0, size / 3.0);
        for (int64_t c = 0; c < channels; ++c)
            for (int64_t y = 0; y < size; ++y)
                for (int64_t x = 0; x < size; ++x) {
                    double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    double w = std::exp(-d2 / (2.0 * radius * radius));
                    double u = (x * std::cos(theta) + y * std::sin(theta)) / static_cast<double>(size);
                    acc[static_cast<size_t>((c * size + y) * size + x)] +=
                        w * amp * std::sin(2.0 * pi * freq * u + 0.3 * static_cast<double>(c));
                }
    }
    for (size_t i = 0; i < acc.size(); ++i) {
        double v = acc[i] + 8.0 * rng.normal();
        ds.pixels[i] = static_cast<uint8_t>(std::min(255.0, std::max(0.0, v)));
    }
    ds.provenance = "source-image(size=" + std::to_string(size) + ",seed=" + std::to_string(seed) + ")";
    return ds;
}

// N augmented crops of one source image; unlabeled.
inline DatasetContainer gen_single_image_dataset(const DatasetContainer& source, int64_t index,
                                                 int64_t count, const AugRecipe& recipe,
                                                 uint64_t seed) {
    recipe.validate();
    if (count < 1) throw Error("gen_single_image_dataset: count must be >= 1");
    if (source.height < recipe.output_size || source.width < recipe.output_size)
        throw Error("gen_single_image_dataset: source image " + std::to_string(source.width) + "x" +
                    std::to_string(source.height) + " smaller than output size " +
                    std::to_string(recipe.output_size));
    Rng rng = Rng(seed).child("single-image");
    DatasetContainer ds;
    ds.n = count;
    ds.channels = source.channels;
    ds.height = recipe.output_size;
    ds.width = recipe.output_size;
    ds.pixels.resize(static_cast<size_t>(count * ds.image_bytes()));
    const uint8_t* img = source.image(index);
    for (int64_t i = 0; i < count; ++i) {
        detail::CropBox box = detail::sample_crop(source.height, source.width, recipe, rng);
        bool flip = rng.uniform01() < recipe.hflip_prob;
        std::vector<double> raw = detail::resize_crop(img, source.channels, source.height,
                                                      source.width, box, recipe.output_size, flip);
        uint8_t* dst = ds.pixels.data() + i * ds.image_bytes();
        for (size_t j = 0; j < raw.size(); ++j)
            dst[j] = static_cast<uint8_t>(std::min(255.0, std::max(0.0, std::round(raw[j]))));
    }
    ds.provenance = "single-image(count=" + std::to_string(count) + ",seed=" + std::to_string(seed) +
                    ",source=" + source.provenance + ")";
    return ds;
}

// ----------------------------- subsampling & merging -----------------------------

enum class SubsampleMode { per_class_fraction, class_fraction };

// keep a class subset, optionally re-indexing labels densely in ascending
// original-id order
inline DatasetContainer filter_classes(const DatasetContainer& ds, const std::vector<uint16_t>& keep,
                                       bool reindex) {
    if (!ds.has_labels) throw Error("filter_classes: container has no labels");
    std::vector<int32_t> remap(ds.class_count, -1);
    std::vector<uint16_t> sorted = keep;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i] >= ds.class_count) throw Error("filter_classes: class id out of range");
        remap[sorted[i]] = reindex ? static_cast<int32_t>(i) : sorted[i];
    }
    DatasetContainer out;
    out.channels = ds.channels;
    out.height = ds.height;
    out.width = ds.width;
    out.has_labels = true;
    out.class_count = reindex ? static_cast<uint16_t>(sorted.size()) : ds.class_count;
    for (int64_t i = 0; i < ds.n; ++i) {
        int32_t m = remap[ds.labels[static_cast<size_t>(i)]];
        if (m < 0) continue;
        out.labels.push_back(static_cast<uint16_t>(m));
        const uint8_t* img = ds.image(i);
        out.pixels.insert(out.pixels.end(), img, img + ds.image_bytes());
        ++out.n;
    }
    if (out.n == 0) throw Error("filter_classes: no images left");
    std::string ids;
    for (size_t i = 0; i < sorted.size(); ++i) ids += (i ? "," : "") + std::to_string(sorted[i]);
    out.provenance = "filter_classes([" + ids + "]," + (reindex ? "dense" : "original") + " of " +
                     ds.provenance + ")";
    return out;
}

inline DatasetContainer subsample(const DatasetContainer& ds, SubsampleMode mode, double fraction,
                                  uint64_t seed) {
    if (!ds.has_labels) throw Error("subsample: container has no labels");
    if (!(0.0 < fraction && fraction <= 1.0)) throw Error("subsample: fraction must be in (0, 1]");
    ds.validate();
    Rng root(seed);
    if (mode == SubsampleMode::class_fraction) {
        int64_t keep_count =
            std::max<int64_t>(1, std::llround(fraction * static_cast<double>(ds.class_count)));
        Rng rng = root.child("classes");
        std::vector<int64_t> order = rng.permutation(ds.class_count);
        std::vector<uint16_t> keep;
        for (int64_t i = 0; i < keep_count; ++i) keep.push_back(static_cast<uint16_t>(order[static_cast<size_t>(i)]));
        DatasetContainer out = filter_classes(ds, keep, /*reindex=*/true);
        out.provenance = "subsample(class_fraction=" + std::to_string(fraction) + ",seed=" +
                         std::to_string(seed) + " of " + ds.provenance + ") " + out.provenance;
        return out;
    }
    // per-class fraction: keep round(f * n_k) of each class, at least 1
    std::vector<std::vector<int64_t>> by_class(ds.class_count);
    for (int64_t i = 0; i < ds.n; ++i) by_class[ds.labels[static_cast<size_t>(i)]].push_back(i);
    std::vector<int64_t> kept;
    for (uint16_t k = 0; k < ds.class_count; ++k) {
        auto& members = by_class[k];
        if (members.empty()) continue;
        int64_t take = std::max<int64_t>(
            1, std::llround(fraction * static_cast<double>(members.size())));
        Rng rng = root.child("class", k);
        rng.shuffle(members.begin(), members.end());
        kept.insert(kept.end(), members.begin(), members.begin() + take);
    }
    std::sort(kept.begin(), kept.end());
    DatasetContainer out;
    out.channels = ds.channels;
    out.height = ds.height;
    out.width = ds.width;
    out.has_labels = true;
    out.class_count = ds.class_count;
    out.n = static_cast<int64_t>(kept.size());
    out.labels.reserve(kept.size());
    out.pixels.reserve(kept.size() * static_cast<size_t>(ds.image_bytes()));
    for (int64_t i : kept) {
        out.labels.push_back(ds.labels[static_cast<size_t>(i)]);
        const uint8_t* img = ds.image(i);
        out.pixels.insert(out.pixels.end(), img, img + ds.image_bytes());
    }
    out.provenance = "subsample(per_class_fraction=" + std::to_string(fraction) + ",seed=" +
                     std::to_string(seed) + " of " + ds.provenance + ")";
    return out;
}

// Concatenation of same-geometry containers; the merged set is unlabeled.
inline DatasetContainer merge(const std::vector<const DatasetContainer*>& parts) {
    if (parts.empty()) throw Error("merge: nothing to merge");
    DatasetContainer out;
    out.channels = parts[0]->channels;
    out.height = parts[0]->height;
    out.width = parts[0]->width;
    std::string sources;
    for (const DatasetContainer* p : parts) {
        if (p->channels != out.channels || p->height != out.height || p->width != out.width)
            throw Error("merge: geometry mismatch: " + std::to_string(p->channels) + "x" +
                        std::to_string(p->height) + "x" + std::to_string(p->width) + " vs " +
                        std::to_string(out.channels) + "x" + std::to_string(out.height) + "x" +
                        std::to_string(out.width));
        out.pixels.insert(out.pixels.end(), p->pixels.begin(), p->pixels.end());
        out.n += p->n;
        if (!sources.empty()) sources += ";";
        sources += p->provenance;
    }
    out.has_labels = false;
    out.class_count = 0;
    out.provenance = "merge(" + sources + ")";
    return out;
}

// per-epoch permutation, identical regardless of worker count
inline std::vector<int64_t> epoch_permutation(int64_t n, int64_t epoch, uint64_t seed) {
    Rng rng = Rng(seed).child("epoch", static_cast<uint64_t>(epoch));
    return rng.permutation(n);
}

}  // namespace proteus
