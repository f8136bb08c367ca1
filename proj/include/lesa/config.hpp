#pragma once

#include <string>

#include "lesa/model.hpp"
#include "lesa/trainer.hpp"

namespace lesa {

struct DataConfig {
    std::string source = "synthetic";  // synthetic | tensor-dir
    std::string path;
    int num_classes = 10;
    int image_size = 32;
    int train_count = 5000;
    int eval_count = 1000;
    uint64_t seed = 7;
};

struct RunConfig {
    std::string out_dir = "runs/out";
    uint64_t seed = 1;
    bool deterministic = true;
    int threads = 1;
};

// Plain-text key-value configuration with dotted keys; unknown keys are hard
// errors. parse(canonical_text()) is a fixed point.
struct ExperimentConfig {
    BackboneSpec model;
    OptimConfig optim;
    DataConfig data;
    RunConfig run;

    static ExperimentConfig parse_text(const std::string& text);
    // parse_text + LESA_SEED env override + path checks
    static ExperimentConfig load_file(const std::string& path);

    std::string canonical_text() const;
    void validate(bool check_paths) const;
};

// Builds (train, eval) per the data section: generated for `synthetic`,
// loaded from disk for `tensor-dir`.
std::pair<Dataset, Dataset> load_data(const DataConfig& cfg);

}  // namespace lesa
