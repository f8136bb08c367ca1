#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "lesa/dataset.hpp"
#include "lesa/model.hpp"

namespace lesa {

struct WeightRow {
    std::string layer_id;
    std::string kind;  // "sa" | "lesa" | "lesa_static"
    double unary_pct = 0.0;
    double binary_pct = 0.0;
};

struct WeightReport {
    std::vector<WeightRow> per_layer;
    double overall_unary_pct = 0.0;   // unweighted mean over layers
    double overall_binary_pct = 0.0;
    int64_t sample_count = 0;

    std::string to_csv() const;
    nlohmann::json to_json() const;
};

// Raw per-layer accumulators; reports are sums/counts so disjoint runs merge
// exactly by adding accumulators.
struct WeightAccumulator {
    struct Layer {
        std::string id, kind;
        double unary_sum = 0.0, binary_sum = 0.0;
        int64_t count = 0;
    };
    std::vector<Layer> layers;
    int64_t sample_count = 0;

    void absorb(const std::vector<LayerRecord>& records, int64_t samples);
    void merge(const WeightAccumulator& other);
    WeightReport report() const;
};

// Single-batch variant of the tracking protocol.
WeightReport collect_layer_stats(Model& model, const TensorPtr& batch);

// Streams up to max_batches (all when < 0) through the model in eval mode,
// accumulating per-layer running sums.
WeightReport run_weight_tracking(Model& model, const Dataset& ds, int batch_size,
                                 int max_batches = -1);

struct AblationResult {
    double baseline_accuracy = 0.0;
    double ablated_accuracy = 0.0;
    double residual_weight_pct = 0.0;  // binary weight kept after removing the unary term
};

AblationResult run_unary_ablation(Model& model, const Dataset& ds, bool renormalize, int batch_size);

// Writes per-layer contribution tensors for one image ([C,H,W]) as tensor
// files under out_dir; returns the written paths.
std::vector<std::string> export_contribution_maps(Model& model, const Tensor& image,
                                                  const std::string& out_dir);

}  // namespace lesa
