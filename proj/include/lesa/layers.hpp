#pragma once

#include <cmath>

#include "lesa/graph.hpp"
#include "lesa/rng.hpp"

namespace lesa {

enum class ParamKind { Weight, BnScale, BnShift, PosEmb, Bias };

struct Param {
    std::string name;
    TensorPtr t;
    ParamKind kind = ParamKind::Weight;
};

struct BNLayer {
    TensorPtr gamma, beta;
    BatchNormState state;
    double momentum = 0.1;
    double eps = 1e-5;

    BNLayer() = default;
    explicit BNLayer(int64_t channels) {
        gamma = full({channels}, 1.0, true);
        beta = full({channels}, 0.0, true);
    }

    TensorPtr forward(Graph& g, const TensorPtr& x, bool train) {
        return g.batchnorm(x, gamma, beta, state, train, momentum, eps);
    }

    void collect(const std::string& prefix, std::vector<Param>& out) const {
        out.push_back({prefix + ".gamma", gamma, ParamKind::BnScale});
        out.push_back({prefix + ".beta", beta, ParamKind::BnShift});
    }
};

struct ConvLayer {
    TensorPtr w;  // [Cout, Cin/groups, k, k]
    int groups = 1;
    int stride = 1;
    int padding = 0;

    ConvLayer() = default;
    ConvLayer(int64_t cin, int64_t cout, int k, int stride_, int groups_, Rng& rng)
        : groups(groups_), stride(stride_), padding(same_padding(k)) {
        if (cin % groups != 0 || cout % groups != 0) {
            throw ShapeError("conv layer: groups=" + std::to_string(groups) + " must divide channels " +
                             std::to_string(cin) + "->" + std::to_string(cout));
        }
        const int64_t cpg = cin / groups;
        const double stddev = 1.0 / std::sqrt(static_cast<double>(cpg * k * k));
        w = tensor({cout, cpg, k, k}, true);
        for (auto& v : w->data) v = rng.normal(0.0, stddev);
    }

    TensorPtr forward(Graph& g, const TensorPtr& x) const { return g.conv2d(x, w, groups, stride, padding); }
};

}  // namespace lesa
