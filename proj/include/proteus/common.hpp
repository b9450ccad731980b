#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace proteus {

// ----------------------------- errors -----------------------------

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid run configuration (bad field, missing path). CLI maps this to exit 2.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Corrupt or unreadable file. CLI maps this to exit 3.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// ----------------------------- global flags -----------------------------

inline bool& determinism_flag() {
    static bool v = true;
    return v;
}

inline bool& debug_checks_flag() {
    static bool v = false;
    return v;
}

inline void set_deterministic(bool v) { determinism_flag() = v; }
inline bool deterministic() { return determinism_flag(); }

inline void set_debug_checks(bool v) { debug_checks_flag() = v; }
inline bool debug_checks() { return debug_checks_flag(); }

// ----------------------------- threading -----------------------------

// Kernel thread cap. PROTEUS_THREADS wins over hardware_concurrency.
inline int max_kernel_threads() {
    static int cap = [] {
        if (const char* env = std::getenv("PROTEUS_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc ? static_cast<int>(hc) : 1;
    }();
    return cap;
}

// Chunked parallel loop over [0, n). Serial whenever the determinism flag is
// on; kernels built on this stay bitwise reproducible in that mode.
template <typename Fn>
void parallel_for(int64_t n, int64_t grain, Fn&& fn) {
    int threads = deterministic() ? 1 : max_kernel_threads();
    if (threads <= 1 || n < 2 * grain) {
        fn(int64_t{0}, n);
        return;
    }
    int64_t chunks = std::min<int64_t>(threads, (n + grain - 1) / grain);
    int64_t per = (n + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(chunks));
    for (int64_t c = 0; c < chunks; ++c) {
        int64_t lo = c * per;
        int64_t hi = std::min(n, lo + per);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

// ----------------------------- shapes -----------------------------

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream o;
    o << '[';
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) o << ',';
        o << s[i];
    }
    o << ']';
    return o.str();
}

// ----------------------------- little-endian file IO -----------------------------

class ByteWriter {
public:
    explicit ByteWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw IoError(path + ": cannot open for writing");
    }

    void bytes(const void* p, size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        if (!out_) throw IoError(path_ + ": write failed");
    }
    void u8(uint8_t v) { bytes(&v, 1); }
    void u16(uint16_t v) {
        uint8_t b[2] = {uint8_t(v & 0xff), uint8_t(v >> 8)};
        bytes(b, 2);
    }
    void u32(uint32_t v) {
        uint8_t b[4] = {uint8_t(v & 0xff), uint8_t((v >> 8) & 0xff), uint8_t((v >> 16) & 0xff),
                        uint8_t(v >> 24)};
        bytes(b, 4);
    }
    void f32(float v) {
        uint32_t u;
        static_assert(sizeof(u) == sizeof(v));
        std::memcpy(&u, &v, 4);
        u32(u);
    }
    void str(const std::string& s) { bytes(s.data(), s.size()); }

private:
    std::string path_;
    std::ofstream out_;
};

class ByteReader {
public:
    explicit ByteReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError(path + ": cannot open for reading");
    }

    void bytes(void* p, size_t n, const char* what) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in_.gcount()) != n) {
            std::ostringstream o;
            o << path_ << ": truncated file: reading " << what << " needs " << n
              << " bytes, only " << in_.gcount() << " available";
            throw IoError(o.str());
        }
    }
    uint8_t u8(const char* what) {
        uint8_t v;
        bytes(&v, 1, what);
        return v;
    }
    uint16_t u16(const char* what) {
        uint8_t b[2];
        bytes(b, 2, what);
        return static_cast<uint16_t>(b[0] | (uint16_t(b[1]) << 8));
    }
    uint32_t u32(const char* what) {
        uint8_t b[4];
        bytes(b, 4, what);
        return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
               (uint32_t(b[3]) << 24);
    }
    float f32(const char* what) {
        uint32_t u = u32(what);
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    std::string str(size_t n, const char* what) {
        std::string s(n, '\0');
        if (n) bytes(s.data(), n, what);
        return s;
    }
    bool at_eof() {
        return in_.peek() == std::char_traits<char>::eof();
    }

private:
    std::string path_;
    std::ifstream in_;
};

}  // namespace proteus
