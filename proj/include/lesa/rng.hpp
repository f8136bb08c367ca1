#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lesa {

// xoshiro256++ with Box-Muller normals. Hand-rolled so that streams are
// reproducible across standard libraries and the full state (including the
// cached spare normal) can be serialized into checkpoints.
class Rng {
public:
    explicit Rng(uint64_t seed = 0);

    uint64_t next_u64();

    // uniform in [0, 1)
    double uniform();
    double uniform(double lo, double hi);

    double normal();  // standard normal
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // uniform integer in [0, n)
    int64_t below(int64_t n);

    void shuffle(std::vector<int64_t>& v);  // Fisher-Yates

    std::string state_hex() const;
    void restore_hex(const std::string& hex);

private:
    uint64_t s_[4];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lesa
