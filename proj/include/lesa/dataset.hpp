#pragma once

#include <string>
#include <vector>

#include "lesa/rng.hpp"
#include "lesa/tensor.hpp"

namespace lesa {

struct Dataset {
    int64_t count = 0;
    int64_t channels = 0;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<double> images;  // [count, C, H, W]
    std::vector<int> labels;

    int64_t sample_size() const { return channels * height * width; }
    const double* sample(int64_t i) const { return images.data() + i * sample_size(); }

    Dataset slice(int64_t begin, int64_t end) const;
};

// Seeded procedural images: each class pairs a local texture (oriented bar
// frequency and angle) with a global layout (low-frequency wave orientation
// plus an emphasized quadrant), so both local and context cues carry label
// information. Labels are assigned round-robin (balanced within +-1).
Dataset generate_synthetic(int classes, int count, int size, uint64_t seed);

void write_dataset_dir(const std::string& dir, const Dataset& train, const Dataset& eval);
Dataset load_split(const std::string& dir, const std::string& split);  // "train" | "eval"

// batch: [n, C, H, W]; flip, when non-null, mirrors selected samples horizontally
TensorPtr make_batch(const Dataset& ds, const int64_t* idx, int64_t n, const uint8_t* flip,
                     std::vector<int>& labels_out);

}  // namespace lesa
