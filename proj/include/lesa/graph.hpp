#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lesa/tensor.hpp"

namespace lesa {

// Running statistics owned by a batchnorm layer. Train-mode forwards update
// them with an exponential moving average; eval-mode forwards require them.
struct BatchNormState {
    std::vector<double> mean;
    std::vector<double> var;
    bool initialized = false;
};

// Reverse-mode tape. Ops append nodes in topological order; backward() walks
// them once in reverse. Construction and backward are single-threaded per
// graph; individual ops may use deterministic data parallelism internally.
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    // current layer scope, prepended to node names for NaN diagnostics
    void push_scope(const std::string& s);
    void pop_scope();
    const std::string& scope() const { return scope_; }

    TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);

    // x:[B,Cin,H,W] (or [B,Cin,P]), w:[Cin,Cout] -> [B,Cout,H,W]; a 1x1
    // convolution expressed by its channel-mixing matrix.
    TensorPtr channel_project(const TensorPtr& x, const TensorPtr& w);

    // x:[B,Cin,H,W], w:[Cout,Cin/groups,k,k]; cross-correlation, no bias.
    TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, int groups, int stride, int padding);

    TensorPtr softmax_lastdim(const TensorPtr& z);

    // x:[B,C,...]; gamma,beta:[C]. Train mode normalizes with batch stats and
    // updates `state`; eval mode reads `state`.
    TensorPtr batchnorm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                        BatchNormState& state, bool train, double momentum, double eps);

    TensorPtr relu(const TensorPtr& x);
    TensorPtr sigmoid(const TensorPtr& x);

    // Elementwise; shapes must match exactly or one side must be a scalar.
    TensorPtr add(const TensorPtr& a, const TensorPtr& b);
    TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
    TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
    TensorPtr scale(const TensorPtr& a, double s);

    // [B,C1,H,W] ++ [B,C2,H,W] -> [B,C1+C2,H,W] (also rank-3, channel-first)
    TensorPtr concat_channels(const TensorPtr& a, const TensorPtr& b);

    TensorPtr global_avg_pool(const TensorPtr& x);  // [B,C,H,W] -> [B,C]

    // x:[B,F], w:[F,K], bias:[K] (bias may be null)
    TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias);

    TensorPtr sum(const TensorPtr& x);  // -> scalar [1]

    // same element count, new shape (copies; grads flow back)
    TensorPtr reshape(const TensorPtr& x, Shape s);

    // mean over batch of -log softmax(logits)[label]
    TensorPtr cross_entropy(const TensorPtr& logits, const std::vector<int>& labels);

    // Extension point for fused ops (attention). `retain` keeps saved
    // activations alive until the node's backward has run.
    void push_node(std::string name, TensorPtr output, std::function<void()> backward_fn,
                   std::vector<TensorPtr> retain = {});

    // True when `t` participates in differentiation.
    static bool needs_grad(const TensorPtr& t) { return t && t->requires_grad; }

    void backward(const TensorPtr& loss);

    size_t node_count() const { return nodes_.size(); }

    // Name of the first node (forward order) whose output contains a
    // non-finite value; empty string when all outputs are finite.
    std::string first_nonfinite_node() const;

private:
    struct Node {
        std::string name;
        TensorPtr output;
        std::function<void()> backward_fn;
        std::vector<TensorPtr> retain;
    };

    bool recording_;
    bool backward_done_ = false;
    std::string scope_;
    std::vector<size_t> scope_lens_;
    std::vector<Node> nodes_;
};

// RAII scope label for NaN diagnostics.
class ScopedName {
public:
    ScopedName(Graph& g, const std::string& name) : g_(g) { g_.push_scope(name); }
    ~ScopedName() { g_.pop_scope(); }

private:
    Graph& g_;
};

// padding that preserves HxW for stride-1 odd kernels; rejects even k
int same_padding(int k);

}  // namespace lesa
