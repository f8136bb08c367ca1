#include "lesa/gradcheck.hpp"

#include <cmath>

#include "lesa/model.hpp"

namespace lesa {

GradCheckResult finite_diff_check(const std::string& name,
                                  const std::function<TensorPtr(Graph&)>& build,
                                  const std::vector<TensorPtr>& inputs, double h, double tol) {
    for (const auto& t : inputs) t->grad.clear();
    std::vector<std::vector<double>> analytic;
    {
        Graph g;
        TensorPtr loss = build(g);
        if (loss->numel() != 1) throw Error("gradcheck '" + name + "': loss is not scalar");
        g.backward(loss);
        for (const auto& t : inputs) {
            analytic.push_back(t->has_grad() ? t->grad : std::vector<double>(t->data.size(), 0.0));
        }
    }
    auto eval = [&]() {
        Graph g(false);
        return build(g)->data[0];
    };
    double max_err = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        Tensor& t = *inputs[i];
        for (size_t e = 0; e < t.data.size(); ++e) {
            const double orig = t.data[e];
            t.data[e] = orig + h;
            const double f1 = eval();
            t.data[e] = orig - h;
            const double f2 = eval();
            t.data[e] = orig;
            const double fd = (f1 - f2) / (2.0 * h);
            const double an = analytic[i][e];
            const double diff = std::fabs(an - fd);
            const double denom = std::max(std::fabs(an), std::fabs(fd));
            const double rel = denom > 1.0 ? diff / denom : diff;
            if (rel > max_err) max_err = rel;
        }
    }
    for (const auto& t : inputs) t->grad.clear();
    return {name, max_err, max_err < tol};
}

namespace {

TensorPtr randn(Shape s, Rng& rng, double scale = 1.0, bool rg = true) {
    auto t = tensor(std::move(s), rg);
    for (auto& v : t->data) v = scale * rng.normal();
    return t;
}

// projection fixed at build time so the loss is a plain function of inputs
TensorPtr project_loss(Graph& g, const TensorPtr& out, const TensorPtr& w) {
    return g.sum(g.mul(out, w));
}

using CheckFn = std::function<GradCheckResult(uint64_t)>;

struct Entry {
    std::string name;
    CheckFn fn;
};

GradCheckResult check_attention_core(const std::string& name, uint64_t seed, bool use_position,
                                     bool scale_logits) {
    Rng rng(seed);
    AttentionConfig cfg;
    cfg.d_in = 8;
    cfg.d_qk = 8;
    cfg.d_out = 8;
    cfg.heads = 2;
    cfg.H = 2;
    cfg.W = 2;
    cfg.use_position = use_position;
    cfg.scale_logits = scale_logits;
    auto layer = std::make_shared<AttentionLayer>(cfg, rng);
    auto q = randn({2, cfg.d_qk, cfg.H, cfg.W}, rng, 0.7);
    auto k = randn({2, cfg.d_qk, cfg.H, cfg.W}, rng, 0.7);
    auto v = randn({2, cfg.d_out, cfg.H, cfg.W}, rng);
    auto w = randn({2, cfg.d_out, cfg.H, cfg.W}, rng, 1.0, false);
    std::vector<TensorPtr> inputs{q, k, v};
    if (use_position) {
        inputs.push_back(layer->r_row);
        inputs.push_back(layer->r_col);
    }
    auto build = [=](Graph& g) {
        return project_loss(g, attention_core(g, q, k, v, *layer, AttnMode::Full, nullptr), w);
    };
    return finite_diff_check(name, build, inputs);
}

GradCheckResult check_bottleneck(const std::string& name, uint64_t seed, SpatialOp op, int stride) {
    Rng rng(seed);
    auto block = std::make_shared<Bottleneck>("blk", 8, 4, stride, op, 2, 3, 3, true, rng);
    auto x = randn({2, 8, 3, 3}, rng);
    const int out_sz = stride == 1 ? 3 : 2;
    auto w = randn({2, 16, out_sz, out_sz}, rng, 1.0, false);
    std::vector<TensorPtr> inputs{x};
    std::vector<Param> params;
    block->collect(params);
    for (const auto& p : params) inputs.push_back(p.t);
    auto build = [=](Graph& g) {
        ForwardOptions opts;
        opts.train = true;
        return project_loss(g, block->forward(g, x, opts), w);
    };
    return finite_diff_check(name, build, inputs);
}

std::vector<Entry> make_registry() {
    std::vector<Entry> reg;
    auto add = [&](std::string name, CheckFn fn) { reg.push_back({std::move(name), std::move(fn)}); };

    add("matmul", [](uint64_t seed) {
        Rng rng(seed);
        auto a = randn({3, 4}, rng);
        auto b = randn({4, 2}, rng);
        auto w = randn({3, 2}, rng, 1.0, false);
        return finite_diff_check("matmul",
                                 [=](Graph& g) { return project_loss(g, g.matmul(a, b), w); }, {a, b});
    });
    add("channel_project", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({2, 3, 2, 2}, rng);
        auto wp = randn({3, 5}, rng);
        auto w = randn({2, 5, 2, 2}, rng, 1.0, false);
        return finite_diff_check("channel_project",
                                 [=](Graph& g) { return project_loss(g, g.channel_project(x, wp), w); },
                                 {x, wp});
    });
    add("conv2d", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({2, 3, 5, 5}, rng);
        auto k = randn({4, 3, 3, 3}, rng, 0.5);
        auto w = randn({2, 4, 5, 5}, rng, 1.0, false);
        return finite_diff_check("conv2d",
                                 [=](Graph& g) { return project_loss(g, g.conv2d(x, k, 1, 1, 1), w); },
                                 {x, k});
    });
    add("conv2d_grouped", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({2, 4, 4, 4}, rng);
        auto k = randn({6, 2, 3, 3}, rng, 0.5);
        auto w = randn({2, 6, 4, 4}, rng, 1.0, false);
        return finite_diff_check("conv2d_grouped",
                                 [=](Graph& g) { return project_loss(g, g.conv2d(x, k, 2, 1, 1), w); },
                                 {x, k});
    });
    add("conv2d_strided", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({1, 3, 7, 7}, rng);
        auto k = randn({4, 3, 3, 3}, rng, 0.5);
        auto w = randn({1, 4, 4, 4}, rng, 1.0, false);
        return finite_diff_check("conv2d_strided",
                                 [=](Graph& g) { return project_loss(g, g.conv2d(x, k, 1, 2, 1), w); },
                                 {x, k});
    });
    add("softmax_lastdim", [](uint64_t seed) {
        Rng rng(seed);
        auto z = randn({4, 7}, rng, 2.0);
        auto w = randn({4, 7}, rng, 1.0, false);
        return finite_diff_check("softmax_lastdim",
                                 [=](Graph& g) { return project_loss(g, g.softmax_lastdim(z), w); }, {z});
    });
    add("batchnorm_train", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({3, 4, 2, 2}, rng);
        auto gamma = randn({4}, rng, 0.5);
        auto beta = randn({4}, rng, 0.5);
        auto w = randn({3, 4, 2, 2}, rng, 1.0, false);
        auto state = std::make_shared<BatchNormState>();
        return finite_diff_check(
            "batchnorm_train",
            [=](Graph& g) {
                return project_loss(g, g.batchnorm(x, gamma, beta, *state, true, 0.1, 1e-5), w);
            },
            {x, gamma, beta});
    });
    add("batchnorm_eval", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({3, 4, 2, 2}, rng);
        auto gamma = randn({4}, rng, 0.5);
        auto beta = randn({4}, rng, 0.5);
        auto w = randn({3, 4, 2, 2}, rng, 1.0, false);
        auto state = std::make_shared<BatchNormState>();
        state->initialized = true;
        state->mean.resize(4);
        state->var.resize(4);
        for (auto& m : state->mean) m = rng.normal();
        for (auto& v : state->var) v = 0.5 + rng.uniform();
        return finite_diff_check(
            "batchnorm_eval",
            [=](Graph& g) {
                return project_loss(g, g.batchnorm(x, gamma, beta, *state, false, 0.1, 1e-5), w);
            },
            {x, gamma, beta});
    });
    add("relu", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({40}, rng);
        // keep inputs clear of the kink so h=1e-6 never crosses it
        for (auto& v : x->data) v += v >= 0.0 ? 0.05 : -0.05;
        auto w = randn({40}, rng, 1.0, false);
        return finite_diff_check("relu", [=](Graph& g) { return project_loss(g, g.relu(x), w); }, {x});
    });
    add("sigmoid", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({40}, rng, 2.0);
        auto w = randn({40}, rng, 1.0, false);
        return finite_diff_check("sigmoid", [=](Graph& g) { return project_loss(g, g.sigmoid(x), w); },
                                 {x});
    });
    add("add", [](uint64_t seed) {
        Rng rng(seed);
        auto a = randn({3, 5}, rng);
        auto b = randn({3, 5}, rng);
        auto w = randn({3, 5}, rng, 1.0, false);
        return finite_diff_check("add", [=](Graph& g) { return project_loss(g, g.add(a, b), w); }, {a, b});
    });
    add("add_scalar", [](uint64_t seed) {
        Rng rng(seed);
        auto a = randn({3, 5}, rng);
        auto b = randn({1}, rng);
        auto w = randn({3, 5}, rng, 1.0, false);
        return finite_diff_check("add_scalar", [=](Graph& g) { return project_loss(g, g.add(a, b), w); },
                                 {a, b});
    });
    add("sub", [](uint64_t seed) {
        Rng rng(seed);
        auto a = randn({3, 5}, rng);
        auto b = randn({3, 5}, rng);
        auto w = randn({3, 5}, rng, 1.0, false);
        return finite_diff_check("sub", [=](Graph& g) { return project_loss(g, g.sub(a, b), w); }, {a, b});
    });
    add("mul_elementwise", [](uint64_t seed) {
        Rng rng(seed);
        auto a = randn({3, 5}, rng);
        auto b = randn({3, 5}, rng);
        auto w = randn({3, 5}, rng, 1.0, false);
        return finite_diff_check("mul_elementwise",
                                 [=](Graph& g) { return project_loss(g, g.mul(a, b), w); }, {a, b});
    });
    add("scale", [](uint64_t seed) {
        Rng rng(seed);
        auto a = randn({9}, rng);
        auto w = randn({9}, rng, 1.0, false);
        return finite_diff_check("scale", [=](Graph& g) { return project_loss(g, g.scale(a, 1.7), w); },
                                 {a});
    });
    add("concat_channels", [](uint64_t seed) {
        Rng rng(seed);
        auto a = randn({2, 3, 2, 2}, rng);
        auto b = randn({2, 2, 2, 2}, rng);
        auto w = randn({2, 5, 2, 2}, rng, 1.0, false);
        return finite_diff_check(
            "concat_channels", [=](Graph& g) { return project_loss(g, g.concat_channels(a, b), w); },
            {a, b});
    });
    add("global_avg_pool", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({2, 5, 3, 3}, rng);
        auto w = randn({2, 5}, rng, 1.0, false);
        return finite_diff_check("global_avg_pool",
                                 [=](Graph& g) { return project_loss(g, g.global_avg_pool(x), w); }, {x});
    });
    add("linear", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({3, 4}, rng);
        auto wt = randn({4, 5}, rng);
        auto b = randn({5}, rng);
        auto w = randn({3, 5}, rng, 1.0, false);
        return finite_diff_check("linear",
                                 [=](Graph& g) { return project_loss(g, g.linear(x, wt, b), w); },
                                 {x, wt, b});
    });
    add("reshape", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({2, 6}, rng);
        auto w = randn({3, 4}, rng, 1.0, false);
        return finite_diff_check("reshape",
                                 [=](Graph& g) { return project_loss(g, g.reshape(x, {3, 4}), w); }, {x});
    });
    add("sum", [](uint64_t seed) {
        Rng rng(seed);
        auto x = randn({17}, rng);
        return finite_diff_check("sum", [=](Graph& g) { return g.sum(x); }, {x});
    });
    add("cross_entropy", [](uint64_t seed) {
        Rng rng(seed);
        auto logits = randn({4, 5}, rng, 2.0);
        std::vector<int> labels;
        for (int i = 0; i < 4; ++i) labels.push_back(static_cast<int>(rng.below(5)));
        return finite_diff_check("cross_entropy",
                                 [=](Graph& g) { return g.cross_entropy(logits, labels); }, {logits});
    });
    add("attention_core",
        [](uint64_t seed) { return check_attention_core("attention_core", seed, true, false); });
    add("attention_core_nopos",
        [](uint64_t seed) { return check_attention_core("attention_core_nopos", seed, false, false); });
    add("attention_core_scaled",
        [](uint64_t seed) { return check_attention_core("attention_core_scaled", seed, true, true); });
    add("sa_layer", [](uint64_t seed) {
        Rng rng(seed);
        AttentionConfig cfg;
        cfg.d_in = 6;
        cfg.d_qk = 4;
        cfg.d_out = 8;
        cfg.heads = 2;
        cfg.H = 2;
        cfg.W = 2;
        auto layer = std::make_shared<AttentionLayer>(cfg, rng);
        auto x = randn({2, 6, 2, 2}, rng);
        auto w = randn({2, 8, 2, 2}, rng, 1.0, false);
        std::vector<TensorPtr> inputs{x, layer->W_q, layer->W_k, layer->W_v, layer->r_row, layer->r_col};
        return finite_diff_check(
            "sa_layer", [=](Graph& g) { return project_loss(g, attention_forward(g, x, *layer), w); },
            inputs);
    });
    add("unary_term", [](uint64_t seed) {
        Rng rng(seed);
        UnaryTermConfig cfg;
        cfg.d_in = 4;
        cfg.d_out = 6;
        cfg.k = 3;
        cfg.groups = 2;
        auto u = std::make_shared<UnaryTerm>(cfg, rng);
        auto x = randn({2, 4, 3, 3}, rng);
        auto w = randn({2, 6, 3, 3}, rng, 1.0, false);
        return finite_diff_check(
            "unary_term", [=](Graph& g) { return project_loss(g, unary_term(g, x, *u), w); },
            {x, u->W_g_k, u->W_1_1});
    });
    add("fusion_gate", [](uint64_t seed) {
        Rng rng(seed);
        auto gate = std::make_shared<FusionGate>(4, rng);
        auto m = randn({2, 4, 2, 2}, rng);
        auto b = randn({2, 4, 2, 2}, rng);
        auto w = randn({2, 4, 2, 2}, rng, 1.0, false);
        std::vector<TensorPtr> inputs{m,
                                      b,
                                      gate->fc1,
                                      gate->fc2,
                                      gate->bn0.gamma,
                                      gate->bn0.beta,
                                      gate->bn1.gamma,
                                      gate->bn1.beta,
                                      gate->bn2.gamma,
                                      gate->bn2.beta};
        return finite_diff_check(
            "fusion_gate",
            [=](Graph& g) { return project_loss(g, fusion_weight(g, m, b, *gate, true), w); }, inputs);
    });
    auto add_lesa = [&](std::string name, LesaMode mode) {
        add(name, [name, mode](uint64_t seed) {
            Rng rng(seed);
            AttentionConfig cfg;
            cfg.d_in = 4;
            cfg.d_qk = 4;
            cfg.d_out = 4;
            cfg.heads = 2;
            cfg.H = 2;
            cfg.W = 2;
            auto layer = std::make_shared<LesaLayer>(cfg, 3, mode, rng);
            auto x = randn({2, 4, 2, 2}, rng);
            auto w = randn({2, 4, 2, 2}, rng, 1.0, false);
            std::vector<TensorPtr> inputs{x};
            const auto& a = layer->attention;
            for (const auto& t : {a.W_q, a.W_k, a.W_v, a.r_row, a.r_col, layer->unary.W_g_k,
                                  layer->unary.W_1_1}) {
                inputs.push_back(t);
            }
            if (layer->gate) {
                for (const auto& t :
                     {layer->gate->fc1, layer->gate->fc2, layer->gate->bn0.gamma, layer->gate->bn0.beta,
                      layer->gate->bn1.gamma, layer->gate->bn1.beta, layer->gate->bn2.gamma,
                      layer->gate->bn2.beta}) {
                    inputs.push_back(t);
                }
            }
            return finite_diff_check(
                name, [=](Graph& g) { return project_loss(g, lesa_forward(g, x, *layer, true), w); },
                inputs);
        });
    };
    add_lesa("lesa_layer", LesaMode::Dynamic);
    add_lesa("lesa_layer_static", LesaMode::Static);
    add("bottleneck_conv",
        [](uint64_t seed) { return check_bottleneck("bottleneck_conv", seed, SpatialOp::Conv, 1); });
    add("bottleneck_conv_s2",
        [](uint64_t seed) { return check_bottleneck("bottleneck_conv_s2", seed, SpatialOp::Conv, 2); });
    add("bottleneck_sa",
        [](uint64_t seed) { return check_bottleneck("bottleneck_sa", seed, SpatialOp::SA, 1); });
    add("bottleneck_lesa",
        [](uint64_t seed) { return check_bottleneck("bottleneck_lesa", seed, SpatialOp::Lesa, 1); });
    return reg;
}

const std::vector<Entry>& registry() {
    static const std::vector<Entry> reg = make_registry();
    return reg;
}

}  // namespace

std::vector<std::string> registered_gradcheck_names() {
    std::vector<std::string> names;
    for (const auto& e : registry()) names.push_back(e.name);
    return names;
}

std::vector<GradCheckResult> run_registered_gradchecks(const std::string& filter, uint64_t seed,
                                                       int instances) {
    std::vector<GradCheckResult> out;
    for (const auto& e : registry()) {
        if (!filter.empty() && e.name.find(filter) == std::string::npos) continue;
        GradCheckResult worst{e.name, 0.0, true};
        for (int i = 0; i < instances; ++i) {
            GradCheckResult r = e.fn(seed + 7919ULL * static_cast<uint64_t>(i));
            if (r.max_rel_err > worst.max_rel_err) worst.max_rel_err = r.max_rel_err;
            worst.pass = worst.pass && r.pass;
        }
        out.push_back(worst);
    }
    if (out.empty()) throw Error("gradcheck: no registered check matches filter '" + filter + "'");
    return out;
}

}  // namespace lesa
