#include "lesa/attention.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <vector>

#include "lesa/threading.hpp"

namespace lesa {

void AttentionConfig::validate() const {
    if (d_in < 1 || d_qk < 1 || d_out < 1) throw ConfigError("attention: channel counts must be positive");
    if (heads < 1) throw ConfigError("attention: heads must be positive");
    if (d_qk % heads != 0 || d_out % heads != 0) {
        throw ConfigError("attention: heads=" + std::to_string(heads) + " must divide d_qk=" +
                          std::to_string(d_qk) + " and d_out=" + std::to_string(d_out));
    }
    if (H < 1 || W < 1) throw ConfigError("attention: grid sizes must be positive");
}

namespace {

TensorPtr randn_tensor(Shape s, double stddev, Rng& rng, bool requires_grad = true) {
    auto t = tensor(std::move(s), requires_grad);
    for (auto& v : t->data) v = rng.normal(0.0, stddev);
    return t;
}

// dots[p * noff + o] = sum_d qh[d*P + p] * rtab[o*dh + d]
void offset_dots(const double* qh, const double* rtab, int64_t P, int64_t dh, int64_t noff,
                 double* dots) {
    for (int64_t p = 0; p < P; ++p) {
        for (int64_t o = 0; o < noff; ++o) {
            const double* rv = rtab + o * dh;
            double acc = 0.0;
            for (int64_t d = 0; d < dh; ++d) acc += qh[d * P + p] * rv[d];
            dots[p * noff + o] = acc;
        }
    }
}

// L[p, p'] += rowd[p, i-hh+H-1] + cold[p, j-ww+W-1] for p=(i,j), p'=(hh,ww)
void add_relative(double* L, const double* rowd, const double* cold, int H, int W) {
    const int64_t P = static_cast<int64_t>(H) * W;
    const int64_t nro = 2 * H - 1, nco = 2 * W - 1;
    for (int64_t p = 0; p < P; ++p) {
        const int i = static_cast<int>(p) / W;
        const int j = static_cast<int>(p) % W;
        double* Lr = L + p * P;
        const double* rd = rowd + p * nro;
        const double* cd = cold + p * nco;
        for (int hh = 0; hh < H; ++hh) {
            const double rv = rd[i - hh + H - 1];
            double* Lw = Lr + static_cast<int64_t>(hh) * W;
            for (int ww = 0; ww < W; ++ww) Lw[ww] += rv + cd[j - ww + W - 1];
        }
    }
}

}  // namespace

AttentionLayer::AttentionLayer(const AttentionConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    const double std_w = 1.0 / std::sqrt(static_cast<double>(cfg.d_in));
    W_q = randn_tensor({cfg.d_in, cfg.d_qk}, std_w, rng);
    W_k = randn_tensor({cfg.d_in, cfg.d_qk}, std_w, rng);
    W_v = randn_tensor({cfg.d_in, cfg.d_out}, std_w, rng);
    if (cfg.use_position) {
        const int64_t dh = cfg.head_dim_qk();
        const double std_r = 1.0 / std::sqrt(static_cast<double>(dh));
        r_row = randn_tensor({cfg.heads, 2LL * cfg.H - 1, dh}, std_r, rng);
        r_col = randn_tensor({cfg.heads, 2LL * cfg.W - 1, dh}, std_r, rng);
    }
}

static TensorPtr promote_rank3(Graph& g, const TensorPtr& x) {
    Shape s = x->shape;
    s.insert(s.begin(), 1);
    return g.reshape(x, std::move(s));
}

Qkv qkv_project(Graph& g, const TensorPtr& x, const AttentionLayer& layer) {
    if (x->rank() != 3 && x->rank() != 4) {
        throw ShapeError("qkv_project: input must be [d_in,H,W] or [B,d_in,H,W], got " + shape_str(x->shape));
    }
    const bool batched = x->rank() == 4;
    const int64_t cin = batched ? x->dim(1) : x->dim(0);
    if (cin != layer.cfg.d_in) {
        throw ShapeError("qkv_project: input channels " + std::to_string(cin) + " != d_in " +
                         std::to_string(layer.cfg.d_in));
    }
    TensorPtr x4 = batched ? x : promote_rank3(g, x);
    Qkv out;
    out.q = g.channel_project(x4, layer.W_q);
    out.k = g.channel_project(x4, layer.W_k);
    out.v = g.channel_project(x4, layer.W_v);
    if (!batched) {
        out.q = g.reshape(out.q, {layer.cfg.d_qk, x->dim(1), x->dim(2)});
        out.k = g.reshape(out.k, {layer.cfg.d_qk, x->dim(1), x->dim(2)});
        out.v = g.reshape(out.v, {layer.cfg.d_out, x->dim(1), x->dim(2)});
    }
    return out;
}

TensorPtr relative_logits(const Tensor& q, const AttentionLayer& layer) {
    const AttentionConfig& c = layer.cfg;
    if (!c.use_position) throw Error("relative_logits: layer has use_position=false");
    if (q.rank() != 3 || q.dim(0) != c.d_qk || q.dim(1) != c.H || q.dim(2) != c.W) {
        throw ShapeError("relative_logits: expected q of shape [" + std::to_string(c.d_qk) + "x" +
                         std::to_string(c.H) + "x" + std::to_string(c.W) + "], got " + shape_str(q.shape));
    }
    const int64_t P = c.positions();
    const int64_t dh = c.head_dim_qk();
    auto out = tensor({c.heads, P, P});
    std::vector<double> rowd(static_cast<size_t>(P * (2 * c.H - 1)));
    std::vector<double> cold(static_cast<size_t>(P * (2 * c.W - 1)));
    for (int h = 0; h < c.heads; ++h) {
        const double* qh = q.data.data() + h * dh * P;
        offset_dots(qh, layer.r_row->data.data() + h * (2LL * c.H - 1) * dh, P, dh, 2LL * c.H - 1,
                    rowd.data());
        offset_dots(qh, layer.r_col->data.data() + h * (2LL * c.W - 1) * dh, P, dh, 2LL * c.W - 1,
                    cold.data());
        add_relative(out->data.data() + static_cast<int64_t>(h) * P * P, rowd.data(), cold.data(), c.H,
                     c.W);
    }
    return out;
}

TensorPtr attention_core(Graph& g, const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                         const AttentionLayer& layer, AttnMode mode, AttnCapture* cap) {
    const AttentionConfig& c = layer.cfg;
    if (q->rank() != 4 || k->rank() != 4 || v->rank() != 4) {
        throw ShapeError("attention_core: q/k/v must be [B,C,H,W]");
    }
    const int64_t B = q->dim(0);
    if (q->dim(1) != c.d_qk || k->dim(1) != c.d_qk || v->dim(1) != c.d_out || k->dim(0) != B ||
        v->dim(0) != B || q->dim(2) != c.H || q->dim(3) != c.W) {
        throw ShapeError("attention_core: shapes " + shape_str(q->shape) + "/" + shape_str(k->shape) +
                         "/" + shape_str(v->shape) + " do not match config");
    }
    const int heads = c.heads;
    const int64_t dh = c.head_dim_qk(), dv = c.head_dim_out(), P = c.positions();
    const bool any_grad = Graph::needs_grad(q) || Graph::needs_grad(k) || Graph::needs_grad(v) ||
                          Graph::needs_grad(layer.r_row) || Graph::needs_grad(layer.r_col);
    if (mode != AttnMode::Full && g.recording() && any_grad) {
        throw Error("attention_core: unary ablation is evaluation-only");
    }
    if (mode == AttnMode::AblateRenorm && P == 1) {
        throw Error("attention_core: cannot renormalize over an empty support (H=W=1)");
    }

    auto out = tensor({B, c.d_out, c.H, c.W});
    out->requires_grad = g.recording() && any_grad;
    auto weights = std::make_shared<std::vector<double>>(static_cast<size_t>(B * heads * P * P));
    const double inv_scale = c.scale_logits ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;

    const double* qp = q->data.data();
    const double* kp = k->data.data();
    const double* vp = v->data.data();
    const double* rrp = c.use_position ? layer.r_row->data.data() : nullptr;
    const double* rcp = c.use_position ? layer.r_col->data.data() : nullptr;
    double* op = out->data.data();
    double* Ap = weights->data();
    std::vector<double> diag_partial(static_cast<size_t>(B * heads), 0.0);
    std::atomic<bool> renorm_empty{false};

    parallel_for(static_cast<int64_t>(B) * heads, [&](int64_t i0, int64_t i1) {
        std::vector<double> rowd(static_cast<size_t>(P * (2 * c.H - 1)));
        std::vector<double> cold(static_cast<size_t>(P * (2 * c.W - 1)));
        for (int64_t i = i0; i < i1; ++i) {
            const int64_t b = i / heads;
            const int h = static_cast<int>(i % heads);
            const double* qh = qp + (b * c.d_qk + h * dh) * P;
            const double* kh = kp + (b * c.d_qk + h * dh) * P;
            const double* vh = vp + (b * c.d_out + h * dv) * P;
            double* A = Ap + i * P * P;
            std::fill_n(A, P * P, 0.0);
            for (int64_t d = 0; d < dh; ++d) {
                const double* qr = qh + d * P;
                const double* kr = kh + d * P;
                for (int64_t p = 0; p < P; ++p) {
                    const double qv = qr[p];
                    double* Lr = A + p * P;
                    for (int64_t pp = 0; pp < P; ++pp) Lr[pp] += qv * kr[pp];
                }
            }
            if (c.use_position) {
                offset_dots(qh, rrp + static_cast<int64_t>(h) * (2 * c.H - 1) * dh, P, dh, 2 * c.H - 1,
                            rowd.data());
                offset_dots(qh, rcp + static_cast<int64_t>(h) * (2 * c.W - 1) * dh, P, dh, 2 * c.W - 1,
                            cold.data());
                add_relative(A, rowd.data(), cold.data(), c.H, c.W);
            }
            double dsum = 0.0;
            for (int64_t p = 0; p < P; ++p) {
                double* Lr = A + p * P;
                if (c.scale_logits) {
                    for (int64_t pp = 0; pp < P; ++pp) Lr[pp] *= inv_scale;
                }
                double m = Lr[0];
                for (int64_t pp = 1; pp < P; ++pp) m = std::max(m, Lr[pp]);
                double s = 0.0;
                for (int64_t pp = 0; pp < P; ++pp) {
                    Lr[pp] = std::exp(Lr[pp] - m);
                    s += Lr[pp];
                }
                const double inv = 1.0 / s;
                for (int64_t pp = 0; pp < P; ++pp) Lr[pp] *= inv;
                dsum += Lr[p];
            }
            diag_partial[static_cast<size_t>(i)] = dsum;
            double* oh = op + (b * c.d_out + h * dv) * P;
            for (int64_t e = 0; e < dv; ++e) {
                const double* vr = vh + e * P;
                double* orow = oh + e * P;
                for (int64_t p = 0; p < P; ++p) {
                    const double* Ar = A + p * P;
                    double acc = 0.0;
                    for (int64_t pp = 0; pp < P; ++pp) acc += Ar[pp] * vr[pp];
                    orow[p] = acc;
                }
                if (mode == AttnMode::AblateUnary) {
                    // round the diagonal product before subtracting so the
                    // result is bitwise (full sum) - (unary contribution);
                    // the barrier stops fma contraction from skipping the
                    // intermediate rounding
                    for (int64_t p = 0; p < P; ++p) {
                        double prod = A[p * P + p] * vr[p];
#if defined(__x86_64__)
                        asm volatile("" : "+x"(prod));
#elif defined(__aarch64__)
                        asm volatile("" : "+w"(prod));
#endif
                        orow[p] -= prod;
                    }
                } else if (mode == AttnMode::AblateRenorm) {
                    for (int64_t p = 0; p < P; ++p) {
                        const double denom = 1.0 - A[p * P + p];
                        if (denom <= 0.0) {
                            renorm_empty.store(true, std::memory_order_relaxed);
                            orow[p] = 0.0;
                            continue;
                        }
                        orow[p] = (orow[p] - A[p * P + p] * vr[p]) / denom;
                    }
                }
            }
        }
    });

    if (renorm_empty.load()) {
        throw NumericError("attention_core: renormalized ablation has no residual mass");
    }
    if (cap) {
        double dsum = 0.0;
        for (double d : diag_partial) dsum += d;
        cap->diag_sum = dsum;
        cap->diag_count = static_cast<int64_t>(B) * heads * P;
        if (cap->want_weights) {
            cap->weights = from_values({B, heads, P, P}, *weights);
        }
        if (cap->want_decomposition && mode == AttnMode::Full) {
            auto unary = tensor({B, c.d_out, c.H, c.W});
            for (int64_t b = 0; b < B; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const double* A = Ap + (b * heads + h) * P * P;
                    const double* vh = vp + (b * c.d_out + h * dv) * P;
                    double* uh = unary->data.data() + (b * c.d_out + h * dv) * P;
                    for (int64_t e = 0; e < dv; ++e) {
                        for (int64_t p = 0; p < P; ++p) uh[e * P + p] = A[p * P + p] * vh[e * P + p];
                    }
                }
            }
            auto binary = tensor({B, c.d_out, c.H, c.W});
            for (int64_t n = 0; n < out->numel(); ++n) binary->data[n] = out->data[n] - unary->data[n];
            cap->unary = unary;
            cap->binary = binary;
        }
    }

    std::function<void()> bwd;
    if (g.recording() && any_grad) {
        TensorPtr qi = q, ki = k, vi = v, rr = layer.r_row, rc = layer.r_col, yo = out;
        const AttentionConfig cc = c;
        bwd = [qi, ki, vi, rr, rc, yo, weights, cc, B, heads, dh, dv, P, inv_scale] {
            const bool need_q = Graph::needs_grad(qi);
            const bool need_k = Graph::needs_grad(ki);
            const bool need_v = Graph::needs_grad(vi);
            const bool need_r = cc.use_position && (Graph::needs_grad(rr) || Graph::needs_grad(rc));
            if (need_q) qi->ensure_grad();
            if (need_k) ki->ensure_grad();
            if (need_v) vi->ensure_grad();
            if (cc.use_position && Graph::needs_grad(rr)) rr->ensure_grad();
            if (cc.use_position && Graph::needs_grad(rc)) rc->ensure_grad();
            const double* qp2 = qi->data.data();
            const double* kp2 = ki->data.data();
            const double* vp2 = vi->data.data();
            const double* gy = yo->grad.data();
            const double* Ap2 = weights->data();
            const int64_t nro = 2 * cc.H - 1, nco = 2 * cc.W - 1;
            // partition by head: r-table rows are per-head, batch loop stays sequential
            parallel_for(heads, [&](int64_t h0, int64_t h1) {
                std::vector<double> dA(static_cast<size_t>(P)), dL(static_cast<size_t>(P));
                std::vector<double> rowM(static_cast<size_t>(nro)), colM(static_cast<size_t>(nco));
                for (int64_t h = h0; h < h1; ++h) {
                    const double* rrh = cc.use_position ? rr->data.data() + h * nro * dh : nullptr;
                    const double* rch = cc.use_position ? rc->data.data() + h * nco * dh : nullptr;
                    double* drr = cc.use_position && Graph::needs_grad(rr) ? rr->grad.data() + h * nro * dh : nullptr;
                    double* drc = cc.use_position && Graph::needs_grad(rc) ? rc->grad.data() + h * nco * dh : nullptr;
                    for (int64_t b = 0; b < B; ++b) {
                        const double* qh = qp2 + (b * cc.d_qk + h * dh) * P;
                        const double* kh = kp2 + (b * cc.d_qk + h * dh) * P;
                        const double* vh = vp2 + (b * cc.d_out + h * dv) * P;
                        const double* A = Ap2 + (b * heads + h) * P * P;
                        const double* gyh = gy + (b * cc.d_out + h * dv) * P;
                        double* dqh = need_q ? qi->grad.data() + (b * cc.d_qk + h * dh) * P : nullptr;
                        double* dkh = need_k ? ki->grad.data() + (b * cc.d_qk + h * dh) * P : nullptr;
                        double* dvh = need_v ? vi->grad.data() + (b * cc.d_out + h * dv) * P : nullptr;
                        for (int64_t p = 0; p < P; ++p) {
                            const double* Ar = A + p * P;
                            std::fill(dA.begin(), dA.end(), 0.0);
                            for (int64_t e = 0; e < dv; ++e) {
                                const double go = gyh[e * P + p];
                                if (go == 0.0) continue;
                                const double* vr = vh + e * P;
                                for (int64_t pp = 0; pp < P; ++pp) dA[pp] += go * vr[pp];
                                if (need_v) {
                                    double* dvr = dvh + e * P;
                                    for (int64_t pp = 0; pp < P; ++pp) dvr[pp] += go * Ar[pp];
                                }
                            }
                            double sdot = 0.0;
                            for (int64_t pp = 0; pp < P; ++pp) sdot += dA[pp] * Ar[pp];
                            for (int64_t pp = 0; pp < P; ++pp) {
                                dL[pp] = Ar[pp] * (dA[pp] - sdot) * inv_scale;
                            }
                            if (need_q) {
                                for (int64_t d = 0; d < dh; ++d) {
                                    const double* kr = kh + d * P;
                                    double acc = 0.0;
                                    for (int64_t pp = 0; pp < P; ++pp) acc += dL[pp] * kr[pp];
                                    dqh[d * P + p] += acc;
                                }
                            }
                            if (need_k) {
                                for (int64_t d = 0; d < dh; ++d) {
                                    const double qv = qh[d * P + p];
                                    double* dkr = dkh + d * P;
                                    for (int64_t pp = 0; pp < P; ++pp) dkr[pp] += qv * dL[pp];
                                }
                            }
                            if (cc.use_position && (need_q || need_r)) {
                                const int ii = static_cast<int>(p) / cc.W;
                                const int jj = static_cast<int>(p) % cc.W;
                                std::fill(rowM.begin(), rowM.end(), 0.0);
                                std::fill(colM.begin(), colM.end(), 0.0);
                                for (int hh = 0; hh < cc.H; ++hh) {
                                    const double* dLw = dL.data() + static_cast<int64_t>(hh) * cc.W;
                                    double racc = 0.0;
                                    for (int ww = 0; ww < cc.W; ++ww) {
                                        racc += dLw[ww];
                                        colM[static_cast<size_t>(jj - ww + cc.W - 1)] += dLw[ww];
                                    }
                                    rowM[static_cast<size_t>(ii - hh + cc.H - 1)] += racc;
                                }
                                if (need_q) {
                                    for (int64_t d = 0; d < dh; ++d) {
                                        double acc = 0.0;
                                        for (int64_t o = 0; o < nro; ++o) acc += rowM[static_cast<size_t>(o)] * rrh[o * dh + d];
                                        for (int64_t o = 0; o < nco; ++o) acc += colM[static_cast<size_t>(o)] * rch[o * dh + d];
                                        dqh[d * P + p] += acc;
                                    }
                                }
                                if (drr) {
                                    for (int64_t o = 0; o < nro; ++o) {
                                        const double wv = rowM[static_cast<size_t>(o)];
                                        if (wv == 0.0) continue;
                                        for (int64_t d = 0; d < dh; ++d) drr[o * dh + d] += wv * qh[d * P + p];
                                    }
                                }
                                if (drc) {
                                    for (int64_t o = 0; o < nco; ++o) {
                                        const double wv = colM[static_cast<size_t>(o)];
                                        if (wv == 0.0) continue;
                                        for (int64_t d = 0; d < dh; ++d) drc[o * dh + d] += wv * qh[d * P + p];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        };
    }
    g.push_node("attention_core", out, std::move(bwd), {q, k, v, layer.r_row, layer.r_col, out});
    return out;
}

TensorPtr attention_forward(Graph& g, const TensorPtr& x, const AttentionLayer& layer, AttnMode mode,
                            AttnCapture* cap) {
    const bool batched = x->rank() == 4;
    TensorPtr x4 = batched ? x : promote_rank3(g, x);
    Qkv qkv;
    qkv.q = g.channel_project(x4, layer.W_q);
    qkv.k = g.channel_project(x4, layer.W_k);
    qkv.v = g.channel_project(x4, layer.W_v);
    TensorPtr out = attention_core(g, qkv.q, qkv.k, qkv.v, layer, mode, cap);
    if (!batched) out = g.reshape(out, {layer.cfg.d_out, x->dim(1), x->dim(2)});
    return out;
}

Decomposition decompose_attention(const TensorPtr& x, const AttentionLayer& layer) {
    Graph g(false);
    AttnCapture cap;
    cap.want_decomposition = true;
    const bool batched = x->rank() == 4;
    TensorPtr x4 = batched ? x : g.reshape(x, {1, x->dim(0), x->dim(1), x->dim(2)});
    Qkv qkv = qkv_project(g, x4, layer);
    attention_core(g, qkv.q, qkv.k, qkv.v, layer, AttnMode::Full, &cap);
    Decomposition d;
    d.unary = cap.unary;
    d.binary = cap.binary;
    if (!batched) {
        d.unary->shape = {layer.cfg.d_out, layer.cfg.H, layer.cfg.W};
        d.binary->shape = d.unary->shape;
    }
    d.stats.unary_weight = cap.diag_sum / static_cast<double>(cap.diag_count);
    d.stats.binary_weight = 1.0 - d.stats.unary_weight;
    d.stats.sample_count = x->rank() == 4 ? x->dim(0) : 1;
    return d;
}

TensorPtr ablate_unary(const TensorPtr& x, const AttentionLayer& layer, bool renormalize) {
    Graph g(false);
    return attention_forward(g, x, layer, renormalize ? AttnMode::AblateRenorm : AttnMode::AblateUnary,
                             nullptr);
}

}  // namespace lesa
