#include "lesa/lesa.hpp"

#include <cmath>

namespace lesa {

void UnaryTermConfig::validate() const {
    if (d_in < 1 || d_out < 1) throw ConfigError("unary term: channel counts must be positive");
    if (k < 1 || k % 2 == 0) throw ConfigError("unary term: spatial extent k must be odd, got " + std::to_string(k));
    if (groups < 1 || d_in % groups != 0 || d_out % groups != 0) {
        throw ConfigError("unary term: groups=" + std::to_string(groups) + " must divide d_in=" +
                          std::to_string(d_in) + " and d_out=" + std::to_string(d_out));
    }
}

UnaryTerm::UnaryTerm(const UnaryTermConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    const int64_t cpg = cfg.d_in / cfg.groups;
    const double std_conv = 1.0 / std::sqrt(static_cast<double>(cpg * cfg.k * cfg.k));
    W_g_k = tensor({cfg.d_out, cpg, cfg.k, cfg.k}, true);
    for (auto& v : W_g_k->data) v = rng.normal(0.0, std_conv);
    const double std_proj = 1.0 / std::sqrt(static_cast<double>(cfg.d_out));
    W_1_1 = tensor({cfg.d_out, cfg.d_out}, true);
    for (auto& v : W_1_1->data) v = rng.normal(0.0, std_proj);
}

TensorPtr unary_term(Graph& g, const TensorPtr& x, const UnaryTerm& u) {
    const bool batched = x->rank() == 4;
    TensorPtr x4 = batched ? x : g.reshape(x, {1, x->dim(0), x->dim(1), x->dim(2)});
    TensorPtr mid = g.conv2d(x4, u.W_g_k, u.cfg.groups, 1, same_padding(u.cfg.k));
    TensorPtr m = g.channel_project(mid, u.W_1_1);
    if (!batched) m = g.reshape(m, {u.cfg.d_out, x->dim(1), x->dim(2)});
    return m;
}

TensorPtr binary_term(Graph& g, const TensorPtr& x, const AttentionLayer& attention) {
    return attention_forward(g, x, attention, AttnMode::Full, nullptr);
}

FusionGate::FusionGate(int64_t d, Rng& rng) : d_out(d) {
    if (d < 1) throw ConfigError("fusion gate: d_out must be positive");
    bn0 = BNLayer(2 * d);
    bn1 = BNLayer(d);
    bn2 = BNLayer(d);
    fc1 = tensor({2 * d, d}, true);
    const double std1 = 1.0 / std::sqrt(static_cast<double>(2 * d));
    for (auto& v : fc1->data) v = rng.normal(0.0, std1);
    fc2 = tensor({d, d}, true);
    const double std2 = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto& v : fc2->data) v = rng.normal(0.0, std2);
}

TensorPtr fusion_weight(Graph& g, const TensorPtr& m, const TensorPtr& b, FusionGate& gate, bool train) {
    if (m->shape != b->shape) {
        throw ShapeError("fusion_weight: unary " + shape_str(m->shape) + " and binary " +
                         shape_str(b->shape) + " shapes differ");
    }
    const bool batched = m->rank() == 4;
    TensorPtr m4 = batched ? m : g.reshape(m, {1, m->dim(0), m->dim(1), m->dim(2)});
    TensorPtr b4 = batched ? b : g.reshape(b, {1, b->dim(0), b->dim(1), b->dim(2)});
    TensorPtr t = g.concat_channels(m4, b4);
    t = gate.bn0.forward(g, t, train);
    t = g.relu(t);
    t = g.channel_project(t, gate.fc1);
    t = gate.bn1.forward(g, t, train);
    t = g.relu(t);
    t = g.channel_project(t, gate.fc2);
    t = gate.bn2.forward(g, t, train);
    t = g.sigmoid(t);
    if (!batched) t = g.reshape(t, m->shape);
    return t;
}

LesaLayer::LesaLayer(const AttentionConfig& attn_cfg, int unary_kernel, LesaMode mode_, Rng& rng)
    : mode(mode_) {
    attention = AttentionLayer(attn_cfg, rng);
    UnaryTermConfig uc;
    uc.d_in = attn_cfg.d_in;
    uc.d_out = attn_cfg.d_out;
    uc.k = unary_kernel;
    uc.groups = attn_cfg.heads;  // multi-head via grouped convolution
    unary = UnaryTerm(uc, rng);
    if (mode == LesaMode::Dynamic) gate.emplace(attn_cfg.d_out, rng);
}

TensorPtr lesa_forward(Graph& g, const TensorPtr& x, LesaLayer& layer, bool train, LesaCapture* cap,
                       const TensorPtr& forced_omega) {
    const bool batched = x->rank() == 4;
    TensorPtr x4 = batched ? x : g.reshape(x, {1, x->dim(0), x->dim(1), x->dim(2)});
    TensorPtr m = unary_term(g, x4, layer.unary);
    TensorPtr b = binary_term(g, x4, layer.attention);
    TensorPtr out;
    TensorPtr omega;
    if (layer.mode == LesaMode::Dynamic) {
        if (forced_omega) {
            omega = forced_omega;
        } else {
            if (!layer.gate) throw Error("lesa_forward: dynamic layer has no fusion gate");
            omega = fusion_weight(g, m, b, *layer.gate, train);
        }
        out = g.add(m, g.mul(omega, b));
    } else {
        out = g.add(m, b);
    }
    if (cap) {
        cap->m = m;
        cap->b = b;
        cap->omega = omega;
        if (omega) {
            double us = 0.0, bs = 0.0;
            for (double w : omega->data) {
                us += 1.0 / (1.0 + w);
                bs += w / (1.0 + w);
            }
            cap->unary_frac_sum = us;
            cap->binary_frac_sum = bs;
            cap->omega_count = omega->numel();
        }
    }
    if (!batched) out = g.reshape(out, {layer.attention.cfg.d_out, x->dim(1), x->dim(2)});
    return out;
}

std::pair<double, double> lesa_weight_stats(const Tensor& omega) {
    if (omega.numel() == 0) throw Error("lesa_weight_stats: empty omega");
    for (double w : omega.data) {
        if (!(w > 0.0 && w < 1.0)) {
            throw NumericError("lesa_weight_stats: omega value " + std::to_string(w) +
                               " outside the open interval (0,1)");
        }
    }
    double us = 0.0, bs = 0.0;
    for (double w : omega.data) {
        us += 1.0 / (1.0 + w);
        bs += w / (1.0 + w);
    }
    const double n = static_cast<double>(omega.numel());
    return {us / n, bs / n};
}

}  // namespace lesa
