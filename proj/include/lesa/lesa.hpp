#pragma once

#include <optional>
#include <utility>

#include "lesa/attention.hpp"
#include "lesa/layers.hpp"

namespace lesa {

// Local term m = proj_1x1(grouped_conv_kxk(x)): two consecutive convolutions,
// no bias, no nonlinearity in between. Groups realize the multi-head split.
struct UnaryTermConfig {
    int64_t d_in = 0;
    int64_t d_out = 0;
    int k = 3;
    int groups = 1;
    void validate() const;
};

class UnaryTerm {
public:
    UnaryTermConfig cfg;
    TensorPtr W_g_k;  // [d_out, d_in/groups, k, k]
    TensorPtr W_1_1;  // [d_out, d_out]

    UnaryTerm() = default;
    UnaryTerm(const UnaryTermConfig& cfg, Rng& rng);
};

TensorPtr unary_term(Graph& g, const TensorPtr& x, const UnaryTerm& u);

// Context path: the full attention sum (position term included).
TensorPtr binary_term(Graph& g, const TensorPtr& x, const AttentionLayer& attention);

// Pre-activation gate MLP over the channel concatenation of the two terms:
// BN -> relu -> fc1 -> BN -> relu -> fc2 -> BN -> sigmoid, applied per
// spatial location; fc layers carry no bias.
class FusionGate {
public:
    int64_t d_out = 0;
    BNLayer bn0, bn1, bn2;
    TensorPtr fc1;  // [2*d_out, d_out]
    TensorPtr fc2;  // [d_out, d_out]

    FusionGate() = default;
    FusionGate(int64_t d_out, Rng& rng);
};

TensorPtr fusion_weight(Graph& g, const TensorPtr& m, const TensorPtr& b, FusionGate& gate, bool train);

enum class LesaMode { Dynamic, Static };

class LesaLayer {
public:
    AttentionLayer attention;
    UnaryTerm unary;
    std::optional<FusionGate> gate;  // absent in static mode
    LesaMode mode = LesaMode::Dynamic;

    LesaLayer() = default;
    LesaLayer(const AttentionConfig& attn_cfg, int unary_kernel, LesaMode mode, Rng& rng);
};

struct LesaCapture {
    TensorPtr m, b, omega;           // omega null in static mode
    double unary_frac_sum = 0.0;     // sum of 1/(1+omega)
    double binary_frac_sum = 0.0;    // sum of omega/(1+omega)
    int64_t omega_count = 0;
};

// Dynamic: m + omega .* b; static: m + b. `forced_omega`, when non-null,
// replaces the gate output (used by the static/dynamic consistency checks).
TensorPtr lesa_forward(Graph& g, const TensorPtr& x, LesaLayer& layer, bool train,
                       LesaCapture* cap = nullptr, const TensorPtr& forced_omega = nullptr);

// (mean of 1/(1+omega), mean of omega/(1+omega)); fractions that sum to 1.
std::pair<double, double> lesa_weight_stats(const Tensor& omega);

}  // namespace lesa
