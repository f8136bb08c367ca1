#pragma once

#include <string>

#include "lesa/graph.hpp"
#include "lesa/rng.hpp"

namespace lesa {

struct AttentionConfig {
    int64_t d_in = 0;
    int64_t d_qk = 0;
    int64_t d_out = 0;
    int heads = 8;
    int H = 0;
    int W = 0;
    bool use_position = true;
    bool scale_logits = false;  // optional 1/sqrt(d_qk/heads) factor, off by default

    int64_t head_dim_qk() const { return d_qk / heads; }
    int64_t head_dim_out() const { return d_out / heads; }
    int64_t positions() const { return static_cast<int64_t>(H) * W; }
    void validate() const;
};

// All-to-all 2D self-attention over an HxW grid with additive row/column
// relative position embeddings per head.
class AttentionLayer {
public:
    AttentionConfig cfg;
    TensorPtr W_q;    // [d_in, d_qk]
    TensorPtr W_k;    // [d_in, d_qk]
    TensorPtr W_v;    // [d_in, d_out]
    TensorPtr r_row;  // [heads, 2H-1, d_qk/heads], offset i-h indexed at (i-h)+(H-1)
    TensorPtr r_col;  // [heads, 2W-1, d_qk/heads]

    AttentionLayer() = default;
    AttentionLayer(const AttentionConfig& cfg, Rng& rng);
};

struct DecompositionStats {
    std::string layer_id;
    double unary_weight = 0.0;   // mean diagonal softmax weight over batch, heads, locations
    double binary_weight = 0.0;  // 1 - unary_weight
    int64_t sample_count = 0;
};

enum class AttnMode {
    Full,          // the complete sum
    AblateUnary,   // drop the (h,w)==(i,j) term, keep the original denominator
    AblateRenorm,  // re-softmax over the remaining HW-1 logits
};

// Optional instrumentation outputs of attention_core.
struct AttnCapture {
    bool want_weights = false;
    bool want_decomposition = false;  // only meaningful for AttnMode::Full
    TensorPtr weights;                // [B, heads, HW, HW]
    TensorPtr unary;                  // [B, d_out, H, W]
    TensorPtr binary;                 // out - unary
    double diag_sum = 0.0;            // sum of diagonal softmax weights
    int64_t diag_count = 0;           // B * heads * HW
};

struct Qkv {
    TensorPtr q, k, v;
};

// x: [B,d_in,H,W] or [d_in,H,W]; outputs keep the input's rank.
Qkv qkv_project(Graph& g, const TensorPtr& x, const AttentionLayer& layer);

// Position-only logits for one sample: q [d_qk,H,W] -> [heads, HW, HW].
// Inspection utility; shares the lookup code with attention_core.
TensorPtr relative_logits(const Tensor& q, const AttentionLayer& layer);

// q,k: [B,d_qk,H,W]; v: [B,d_out,H,W] -> [B,d_out,H,W]
TensorPtr attention_core(Graph& g, const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                         const AttentionLayer& layer, AttnMode mode = AttnMode::Full,
                         AttnCapture* cap = nullptr);

TensorPtr attention_forward(Graph& g, const TensorPtr& x, const AttentionLayer& layer,
                            AttnMode mode = AttnMode::Full, AttnCapture* cap = nullptr);

struct Decomposition {
    TensorPtr unary;
    TensorPtr binary;
    DecompositionStats stats;
};

// Exact split of the full attention output into the diagonal (local) term and
// the rest. Evaluation-only: runs on a non-recording graph.
Decomposition decompose_attention(const TensorPtr& x, const AttentionLayer& layer);

// Evaluation-time unary ablation.
TensorPtr ablate_unary(const TensorPtr& x, const AttentionLayer& layer, bool renormalize);

}  // namespace lesa
