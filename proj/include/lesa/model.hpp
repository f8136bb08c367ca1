#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "lesa/lesa.hpp"

namespace lesa {

enum class SpatialOp { Conv, SA, Lesa, LesaStatic };

std::string spatial_op_name(SpatialOp op);
SpatialOp spatial_op_from_name(const std::string& name);

// Staged bottleneck backbone with a pluggable spatial operator in the last
// two stages. Stage 3 keeps its first (stride-2 conv) bottleneck unchanged;
// an attention-typed stage 4 runs at stride 1.
struct BackboneSpec {
    std::vector<int> stage_blocks{2, 2, 2, 2};
    int64_t base_channels = 16;
    std::array<SpatialOp, 4> ops{SpatialOp::Conv, SpatialOp::Conv, SpatialOp::Conv, SpatialOp::Conv};
    int heads = 8;
    int num_classes = 10;
    int input_size = 32;
    int input_channels = 3;
    int unary_kernel = 3;
    bool use_position = true;

    void validate() const;
    std::string canonical_text() const;
    static BackboneSpec parse_canonical_text(const std::string& text);
    bool operator==(const BackboneSpec&) const = default;
};

struct LayerRecord {
    std::string id;    // e.g. "s3.b1"
    std::string kind;  // "sa" | "lesa" | "lesa_static"
    double unary_sum = 0.0;
    double binary_sum = 0.0;
    int64_t count = 0;
    TensorPtr unary_map, binary_map, m_map, b_map, omega_map, out_map;
};

struct ForwardOptions {
    bool train = false;
    bool ablate_unary = false;  // SA blocks only
    bool renormalize = false;
    bool collect_stats = false;
    bool capture_maps = false;
    std::vector<LayerRecord>* records = nullptr;
};

class Bottleneck {
public:
    std::string id;
    SpatialOp op = SpatialOp::Conv;
    int stride = 1;
    ConvLayer reduce;
    BNLayer bn1;
    std::optional<ConvLayer> conv3;
    std::optional<AttentionLayer> attn;
    std::optional<LesaLayer> lesa;
    BNLayer bn2;
    ConvLayer expand;
    BNLayer bn3;
    std::optional<ConvLayer> short_conv;
    std::optional<BNLayer> short_bn;

    Bottleneck() = default;
    Bottleneck(std::string id, int64_t in_ch, int64_t width, int stride, SpatialOp op, int heads,
               int fmap, int unary_kernel, bool use_position, Rng& rng);

    TensorPtr forward(Graph& g, const TensorPtr& x, const ForwardOptions& opts);
    void collect(std::vector<Param>& out) const;
};

class Model {
public:
    BackboneSpec spec;
    ConvLayer stem;
    BNLayer stem_bn;
    std::vector<std::vector<Bottleneck>> stages;
    TensorPtr fc_w, fc_b;

    Model() = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;

    TensorPtr forward(Graph& g, const TensorPtr& images, const ForwardOptions& opts = {});

    std::vector<Param> parameters() const;  // deterministic order
    int64_t parameter_count() const;

    // (name, state) pairs; pointers stay valid until the model is moved
    std::vector<std::pair<std::string, BatchNormState*>> named_bn_states();

    bool has_sa_layer() const;
    bool has_instrumented_layer() const;  // any SA or LESA block
};

Model build_backbone(const BackboneSpec& spec, uint64_t seed);

TensorPtr forward_classify(Graph& g, Model& model, const TensorPtr& batch,
                           const ForwardOptions& opts = {});
TensorPtr loss_ce(Graph& g, const TensorPtr& logits, const std::vector<int>& labels);

}  // namespace lesa
