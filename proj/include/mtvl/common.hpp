#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtvl {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

[[noreturn]] inline void fail(const std::string& msg) { throw std::invalid_argument(msg); }

inline void require(bool ok, const std::string& msg) {
    if (!ok) fail(msg);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) fail(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// When enabled, kernels reject non-finite inputs.
inline std::atomic<bool> g_checked_mode{false};
inline void set_checked_mode(bool on) { g_checked_mode.store(on); }
inline bool checked_mode() { return g_checked_mode.load(); }

// splitmix64; used to derive independent per-sample rng streams.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }
inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }

}  // namespace mtvl
