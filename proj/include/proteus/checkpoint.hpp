#pragma once

#include <string>
#include <utility>
#include <vector>

#include "proteus/common.hpp"
#include "proteus/tensor.hpp"
#include "proteus/vit.hpp"

namespace proteus {

// PRTC checkpoint: magic "PRTC", u32 version=1, u32 tensor count, then per
// tensor u16 name length, name, u8 ndim, u32 dims[], float32 LE data. The
// embedded config rides along as a float-encoded byte string named
// "__config__".
inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::vector<std::pair<std::string, Tensor<float>>> tensors;
    std::string config_json;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace detail {

inline Tensor<float> encode_string_tensor(const std::string& s) {
    Tensor<float> t({std::max<int64_t>(1, static_cast<int64_t>(s.size()))});
    for (size_t i = 0; i < s.size(); ++i) t[static_cast<int64_t>(i)] = static_cast<float>(static_cast<unsigned char>(s[i]));
    return t;
}

inline std::string decode_string_tensor(const Tensor<float>& t) {
    std::string s;
    s.reserve(t.data.size());
    for (float v : t.data) {
        auto c = static_cast<unsigned char>(v);
        if (c != 0) s.push_back(static_cast<char>(c));
    }
    return s;
}

inline void write_one(ByteWriter& w, const std::string& name, const Tensor<float>& t) {
    if (name.size() > 0xffff) throw Error("checkpoint: tensor name too long: " + name);
    w.u16(static_cast<uint16_t>(name.size()));
    w.str(name);
    w.u8(static_cast<uint8_t>(t.ndim()));
    for (int64_t d : t.shape) w.u32(static_cast<uint32_t>(d));
    for (float v : t.data) w.f32(v);
}

}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor<float>>>& tensors,
                            const std::string& config_json) {
    ByteWriter w(path);
    w.str("PRTC");
    w.u32(kCheckpointVersion);
    uint32_t count = static_cast<uint32_t>(tensors.size()) + (config_json.empty() ? 0u : 1u);
    w.u32(count);
    if (!config_json.empty())
        detail::write_one(w, "__config__", detail::encode_string_tensor(config_json));
    for (const auto& [name, t] : tensors) detail::write_one(w, name, t);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    ByteReader r(path);
    std::string magic = r.str(4, "magic");
    if (magic != "PRTC") throw IoError(path + ": not a PRTC checkpoint (bad magic)");
    uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
    uint32_t count = r.u32("tensor count");
    Checkpoint ck;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t name_len = r.u16("name length");
        std::string name = r.str(name_len, "tensor name");
        uint8_t ndim = r.u8("ndim");
        if (ndim == 0) throw IoError(path + ": tensor '" + name + "' has zero dims");
        Shape shape(ndim);
        for (uint8_t d = 0; d < ndim; ++d) {
            shape[d] = r.u32("dims");
            if (shape[d] == 0) throw IoError(path + ": tensor '" + name + "' has a zero dimension");
        }
        Tensor<float> t(shape);
        for (int64_t j = 0; j < t.numel(); ++j) t[j] = r.f32("tensor data");
        if (name == "__config__") ck.config_json = detail::decode_string_tensor(t);
        else ck.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.at_eof()) throw IoError(path + ": trailing bytes after last tensor");
    return ck;
}

// ----------------------------- param conversions -----------------------------

template <typename T>
std::vector<std::pair<std::string, Tensor<float>>> params_to_f32(const NamedParams<T>& params,
                                                                 const std::string& prefix = "") {
    std::vector<std::pair<std::string, Tensor<float>>> out;
    out.reserve(params.entries.size());
    for (const auto& [name, var] : params.entries)
        out.emplace_back(prefix + name, var->value.template cast<float>());
    return out;
}

// Rebuild a parameter set from checkpoint tensors carrying `prefix`.
template <typename T>
NamedParams<T> params_from_checkpoint(const Checkpoint& ck, const std::string& prefix = "",
                                      bool requires_grad = true) {
    NamedParams<T> p;
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind(prefix, 0) != 0) continue;
        std::string bare = name.substr(prefix.size());
        if (bare.rfind("__opt__", 0) == 0) continue;  // reserved optimizer slots
        p.add(bare, t.template cast<T>(), requires_grad);
    }
    if (p.entries.empty()) throw IoError("checkpoint has no tensors with prefix '" + prefix + "'");
    return p;
}

}  // namespace proteus
