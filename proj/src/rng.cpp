#include "lesa/rng.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "lesa/common.hpp"

namespace lesa {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(uint64_t seed) {
    uint64_t sm = seed;
    for (auto& s : s_) s = splitmix64(sm);
}

uint64_t Rng::next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

int64_t Rng::below(int64_t n) {
    if (n <= 0) throw Error("Rng::below requires n > 0");
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
}

void Rng::shuffle(std::vector<int64_t>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
        const int64_t j = below(i + 1);
        std::swap(v[i], v[j]);
    }
}

std::string Rng::state_hex() const {
    char buf[17];
    std::string out;
    for (uint64_t s : s_) {
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(s));
        out += buf;
    }
    uint64_t bits;
    std::memcpy(&bits, &spare_, sizeof bits);
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(bits));
    out += buf;
    out += has_spare_ ? '1' : '0';
    return out;
}

void Rng::restore_hex(const std::string& hex) {
    if (hex.size() != 5 * 16 + 1) throw Error("bad rng state string");
    auto parse = [&](size_t pos) {
        return std::strtoull(hex.substr(pos, 16).c_str(), nullptr, 16);
    };
    for (int i = 0; i < 4; ++i) s_[i] = parse(16 * static_cast<size_t>(i));
    const uint64_t bits = parse(64);
    std::memcpy(&spare_, &bits, sizeof bits);
    has_spare_ = hex[80] == '1';
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace lesa
