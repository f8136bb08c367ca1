#include "lesa/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lesa/threading.hpp"

namespace lesa {

void Graph::push_scope(const std::string& s) {
    scope_lens_.push_back(scope_.size());
    if (!scope_.empty()) scope_ += ".";
    scope_ += s;
}

void Graph::pop_scope() {
    scope_.resize(scope_lens_.back());
    scope_lens_.pop_back();
}

void Graph::push_node(std::string name, TensorPtr output, std::function<void()> backward_fn,
                      std::vector<TensorPtr> retain) {
    if (!recording_) return;
    std::string full = scope_.empty() ? std::move(name) : scope_ + "/" + name;
    nodes_.push_back({std::move(full), std::move(output), std::move(backward_fn), std::move(retain)});
}

void Graph::backward(const TensorPtr& loss) {
    if (!recording_) throw Error("backward: graph is not recording");
    if (backward_done_) throw Error("backward: called twice without reset (build a new graph)");
    if (!loss || loss->numel() != 1) throw Error("backward: loss must be a scalar tensor");
    backward_done_ = true;
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->backward_fn) it->backward_fn();
        it->backward_fn = nullptr;  // free saved activations as we go
        it->retain.clear();
    }
}

std::string Graph::first_nonfinite_node() const {
    for (const auto& n : nodes_) {
        if (n.output && !n.output->all_finite()) return n.name;
    }
    return "";
}

int same_padding(int k) {
    if (k < 1 || k % 2 == 0) {
        throw ShapeError("same padding requires an odd kernel size, got k=" + std::to_string(k));
    }
    return (k - 1) / 2;
}

namespace {

TensorPtr make_output(const Graph& g, Shape s, bool any_input_needs_grad) {
    auto t = tensor(std::move(s));
    t->requires_grad = g.recording() && any_input_needs_grad;
    return t;
}

}  // namespace

TensorPtr Graph::softmax_lastdim(const TensorPtr& z) {
    if (z->rank() < 1) throw ShapeError("softmax_lastdim: rank-0 input");
    const int64_t n = z->dim(-1);
    if (n < 1) throw ShapeError("softmax_lastdim: empty last dimension");
    const int64_t rows = z->numel() / n;
    auto out = make_output(*this, z->shape, needs_grad(z));
    const double* zp = z->data.data();
    double* yp = out->data.data();
    parallel_for(rows, [&](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
            const double* zr = zp + r * n;
            double* yr = yp + r * n;
            double m = zr[0];
            for (int64_t j = 1; j < n; ++j) m = std::max(m, zr[j]);
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) {
                yr[j] = std::exp(zr[j] - m);
                s += yr[j];
            }
            const double inv = 1.0 / s;
            for (int64_t j = 0; j < n; ++j) yr[j] *= inv;
        }
    });
    std::function<void()> bwd;
    if (recording_ && needs_grad(z)) {
        TensorPtr zi = z, yo = out;
        bwd = [zi, yo, rows, n] {
            zi->ensure_grad();
            const double* yp2 = yo->data.data();
            const double* gy = yo->grad.data();
            double* gz = zi->grad.data();
            parallel_for(rows, [&](int64_t r0, int64_t r1) {
                for (int64_t r = r0; r < r1; ++r) {
                    const double* yr = yp2 + r * n;
                    const double* gr = gy + r * n;
                    double* dz = gz + r * n;
                    double dot = 0.0;
                    for (int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                    for (int64_t j = 0; j < n; ++j) dz[j] += yr[j] * (gr[j] - dot);
                }
            });
        };
    }
    push_node("softmax", out, std::move(bwd), {z, out});
    return out;
}

TensorPtr Graph::batchnorm(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                           BatchNormState& state, bool train, double momentum, double eps) {
    if (x->rank() < 2) throw ShapeError("batchnorm: input must be [B,C,...], got " + shape_str(x->shape));
    if (eps <= 0.0) throw Error("batchnorm: eps must be positive");
    const int64_t B = x->dim(0), C = x->dim(1);
    const int64_t S = x->numel() / (B * C);
    const int64_t N = B * S;
    if (gamma->numel() != C || beta->numel() != C) {
        throw ShapeError("batchnorm: gamma/beta " + shape_str(gamma->shape) + "/" +
                         shape_str(beta->shape) + " do not match channel count " + std::to_string(C));
    }

    std::vector<double> mean(C), invstd(C);
    if (train) {
        std::vector<double> var(C);
        const double* xp = x->data.data();
        // per-(b,c) row partials keep every pass contiguous; the cross-batch
        // reduction runs in a fixed order
        std::vector<double> partial(static_cast<size_t>(B * C));
        parallel_for(B * C, [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; ++i) {
                const double* row = xp + i * S;
                double acc = 0.0;
                for (int64_t s = 0; s < S; ++s) acc += row[s];
                partial[static_cast<size_t>(i)] = acc;
            }
        });
        for (int64_t c = 0; c < C; ++c) {
            double m = 0.0;
            for (int64_t b = 0; b < B; ++b) m += partial[static_cast<size_t>(b * C + c)];
            mean[c] = m / static_cast<double>(N);
        }
        parallel_for(B * C, [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; ++i) {
                const double m = mean[i % C];
                const double* row = xp + i * S;
                double acc = 0.0;
                for (int64_t s = 0; s < S; ++s) {
                    const double dd = row[s] - m;
                    acc += dd * dd;
                }
                partial[static_cast<size_t>(i)] = acc;
            }
        });
        for (int64_t c = 0; c < C; ++c) {
            double v = 0.0;
            for (int64_t b = 0; b < B; ++b) v += partial[static_cast<size_t>(b * C + c)];
            var[c] = v / static_cast<double>(N);
            invstd[c] = 1.0 / std::sqrt(var[c] + eps);
        }
        if (!state.initialized) {
            state.mean = mean;
            state.var = var;
            state.initialized = true;
        } else {
            for (int64_t c = 0; c < C; ++c) {
                state.mean[c] = (1.0 - momentum) * state.mean[c] + momentum * mean[c];
                state.var[c] = (1.0 - momentum) * state.var[c] + momentum * var[c];
            }
        }
    } else {
        if (!state.initialized) throw Error("batchnorm: eval mode requires populated running stats");
        for (int64_t c = 0; c < C; ++c) {
            mean[c] = state.mean[c];
            invstd[c] = 1.0 / std::sqrt(state.var[c] + eps);
        }
    }

    const bool any = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
    auto out = make_output(*this, x->shape, any);
    {
        const double* xp = x->data.data();
        const double* gp = gamma->data.data();
        const double* bp = beta->data.data();
        double* yp = out->data.data();
        parallel_for(B * C, [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; ++i) {
                const int64_t c = i % C;
                const double m = mean[c], is = invstd[c], g = gp[c], b = bp[c];
                const double* xr = xp + i * S;
                double* yr = yp + i * S;
                for (int64_t s = 0; s < S; ++s) yr[s] = g * (xr[s] - m) * is + b;
            }
        });
    }

    std::function<void()> bwd;
    if (recording_ && any) {
        TensorPtr xi = x, gi = gamma, bi = beta, yo = out;
        auto mv = std::make_shared<std::vector<double>>(std::move(mean));
        auto iv = std::make_shared<std::vector<double>>(std::move(invstd));
        bwd = [xi, gi, bi, yo, mv, iv, B, C, S, N, train] {
            const bool need_x = Graph::needs_grad(xi);
            const bool need_g = Graph::needs_grad(gi);
            const bool need_b = Graph::needs_grad(bi);
            if (need_x) xi->ensure_grad();
            if (need_g) gi->ensure_grad();
            if (need_b) bi->ensure_grad();
            const double* xp = xi->data.data();
            const double* gp = gi->data.data();
            const double* dy = yo->grad.data();
            std::vector<double> psum(static_cast<size_t>(B * C)), psum_xhat(static_cast<size_t>(B * C));
            parallel_for(B * C, [&](int64_t i0, int64_t i1) {
                for (int64_t i = i0; i < i1; ++i) {
                    const int64_t c = i % C;
                    const double m = (*mv)[c], is = (*iv)[c];
                    const double* xr = xp + i * S;
                    const double* dr = dy + i * S;
                    double sd = 0.0, sx = 0.0;
                    for (int64_t s = 0; s < S; ++s) {
                        sd += dr[s];
                        sx += dr[s] * (xr[s] - m) * is;
                    }
                    psum[static_cast<size_t>(i)] = sd;
                    psum_xhat[static_cast<size_t>(i)] = sx;
                }
            });
            std::vector<double> sum_dy(static_cast<size_t>(C), 0.0);
            std::vector<double> sum_dy_xhat(static_cast<size_t>(C), 0.0);
            for (int64_t c = 0; c < C; ++c) {
                double sd = 0.0, sx = 0.0;
                for (int64_t b = 0; b < B; ++b) {
                    sd += psum[static_cast<size_t>(b * C + c)];
                    sx += psum_xhat[static_cast<size_t>(b * C + c)];
                }
                sum_dy[static_cast<size_t>(c)] = sd;
                sum_dy_xhat[static_cast<size_t>(c)] = sx;
                if (need_g) gi->grad[c] += sx;
                if (need_b) bi->grad[c] += sd;
            }
            if (need_x) {
                const double inv_n = 1.0 / static_cast<double>(N);
                double* gx = xi->grad.data();
                parallel_for(B * C, [&](int64_t i0, int64_t i1) {
                    for (int64_t i = i0; i < i1; ++i) {
                        const int64_t c = i % C;
                        const double m = (*mv)[c], is = (*iv)[c], g = gp[c];
                        const double sd = sum_dy[static_cast<size_t>(c)];
                        const double sx = sum_dy_xhat[static_cast<size_t>(c)];
                        const double* xr = xp + i * S;
                        const double* dr = dy + i * S;
                        double* dx = gx + i * S;
                        if (train) {
                            for (int64_t s = 0; s < S; ++s) {
                                const double xhat = (xr[s] - m) * is;
                                dx[s] += g * is * (dr[s] - sd * inv_n - xhat * sx * inv_n);
                            }
                        } else {
                            for (int64_t s = 0; s < S; ++s) dx[s] += g * is * dr[s];
                        }
                    }
                });
            }
        };
    }
    push_node(train ? "batchnorm_train" : "batchnorm_eval", out, std::move(bwd), {x, gamma, beta, out});
    return out;
}

TensorPtr Graph::relu(const TensorPtr& x) {
    auto out = make_output(*this, x->shape, needs_grad(x));
    const int64_t n = x->numel();
    const double* xp = x->data.data();
    double* yp = out->data.data();
    parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) yp[i] = xp[i] > 0.0 ? xp[i] : 0.0;
    });
    std::function<void()> bwd;
    if (recording_ && needs_grad(x)) {
        TensorPtr xi = x, yo = out;
        bwd = [xi, yo, n] {
            xi->ensure_grad();
            const double* xp2 = xi->data.data();
            const double* gy = yo->grad.data();
            double* gx = xi->grad.data();
            parallel_for(n, [&](int64_t i0, int64_t i1) {
                for (int64_t i = i0; i < i1; ++i) {
                    if (xp2[i] > 0.0) gx[i] += gy[i];
                }
            });
        };
    }
    push_node("relu", out, std::move(bwd), {x, out});
    return out;
}

TensorPtr Graph::sigmoid(const TensorPtr& x) {
    auto out = make_output(*this, x->shape, needs_grad(x));
    const int64_t n = x->numel();
    const double* xp = x->data.data();
    double* yp = out->data.data();
    // clamp into the open interval so saturated inputs stay strictly in (0,1)
    const double lo = std::numeric_limits<double>::min();
    const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            double y;
            if (xp[i] >= 0.0) {
                y = 1.0 / (1.0 + std::exp(-xp[i]));
            } else {
                const double e = std::exp(xp[i]);
                y = e / (1.0 + e);
            }
            yp[i] = std::min(std::max(y, lo), hi);
        }
    });
    std::function<void()> bwd;
    if (recording_ && needs_grad(x)) {
        TensorPtr xi = x, yo = out;
        bwd = [xi, yo, n] {
            xi->ensure_grad();
            const double* yp2 = yo->data.data();
            const double* gy = yo->grad.data();
            double* gx = xi->grad.data();
            parallel_for(n, [&](int64_t i0, int64_t i1) {
                for (int64_t i = i0; i < i1; ++i) gx[i] += gy[i] * yp2[i] * (1.0 - yp2[i]);
            });
        };
    }
    push_node("sigmoid", out, std::move(bwd), {x, out});
    return out;
}

namespace {

enum class EwKind { Add, Sub, Mul };

}  // namespace

static TensorPtr elementwise(Graph& g, const TensorPtr& a, const TensorPtr& b, EwKind kind,
                             const char* opname) {
    const bool a_scalar = a->numel() == 1;
    const bool b_scalar = b->numel() == 1;
    if (!a_scalar && !b_scalar && a->shape != b->shape) {
        throw ShapeError(std::string(opname) + ": incompatible shapes " + shape_str(a->shape) +
                         " vs " + shape_str(b->shape));
    }
    const Shape& out_shape = a_scalar && !b_scalar ? b->shape : a->shape;
    const bool any = Graph::needs_grad(a) || Graph::needs_grad(b);
    auto out = tensor(out_shape);
    out->requires_grad = g.recording() && any;
    const int64_t n = out->numel();
    const double* ap = a->data.data();
    const double* bp = b->data.data();
    double* yp = out->data.data();
    const int64_t as = a_scalar ? 0 : 1;
    const int64_t bs = b_scalar ? 0 : 1;
    parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            const double av = ap[i * as];
            const double bv = bp[i * bs];
            yp[i] = kind == EwKind::Add ? av + bv : kind == EwKind::Sub ? av - bv : av * bv;
        }
    });
    std::function<void()> bwd;
    if (g.recording() && any) {
        TensorPtr ai = a, bi = b, yo = out;
        bwd = [ai, bi, yo, n, as, bs, kind] {
            const double* gy = yo->grad.data();
            if (Graph::needs_grad(ai)) {
                ai->ensure_grad();
                if (kind == EwKind::Mul) {
                    const double* bp2 = bi->data.data();
                    for (int64_t i = 0; i < n; ++i) ai->grad[i * as] += gy[i] * bp2[i * bs];
                } else {
                    for (int64_t i = 0; i < n; ++i) ai->grad[i * as] += gy[i];
                }
            }
            if (Graph::needs_grad(bi)) {
                bi->ensure_grad();
                const double sgn = kind == EwKind::Sub ? -1.0 : 1.0;
                if (kind == EwKind::Mul) {
                    const double* ap2 = ai->data.data();
                    for (int64_t i = 0; i < n; ++i) bi->grad[i * bs] += gy[i] * ap2[i * as];
                } else {
                    for (int64_t i = 0; i < n; ++i) bi->grad[i * bs] += sgn * gy[i];
                }
            }
        };
    }
    g.push_node(opname, out, std::move(bwd), {a, b, out});
    return out;
}

TensorPtr Graph::add(const TensorPtr& a, const TensorPtr& b) { return elementwise(*this, a, b, EwKind::Add, "add"); }
TensorPtr Graph::sub(const TensorPtr& a, const TensorPtr& b) { return elementwise(*this, a, b, EwKind::Sub, "sub"); }
TensorPtr Graph::mul(const TensorPtr& a, const TensorPtr& b) { return elementwise(*this, a, b, EwKind::Mul, "mul"); }

TensorPtr Graph::scale(const TensorPtr& a, double s) {
    auto out = make_output(*this, a->shape, needs_grad(a));
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) out->data[i] = a->data[i] * s;
    std::function<void()> bwd;
    if (recording_ && needs_grad(a)) {
        TensorPtr ai = a, yo = out;
        bwd = [ai, yo, n, s] {
            ai->ensure_grad();
            for (int64_t i = 0; i < n; ++i) ai->grad[i] += s * yo->grad[i];
        };
    }
    push_node("scale", out, std::move(bwd), {a, out});
    return out;
}

TensorPtr Graph::concat_channels(const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != b->rank() || (a->rank() != 3 && a->rank() != 4)) {
        throw ShapeError("concat_channels: inputs must both be [C,H,W] or [B,C,H,W], got " +
                         shape_str(a->shape) + " and " + shape_str(b->shape));
    }
    const int cdim = a->rank() - 3;
    for (int i = 0; i < a->rank(); ++i) {
        if (i != cdim && a->shape[static_cast<size_t>(i)] != b->shape[static_cast<size_t>(i)]) {
            throw ShapeError("concat_channels: non-channel dims differ: " + shape_str(a->shape) +
                             " vs " + shape_str(b->shape));
        }
    }
    const int64_t B = cdim == 0 ? 1 : a->dim(0);
    const int64_t Ca = a->dim(cdim), Cb = b->dim(cdim);
    const int64_t S = a->numel() / (B * Ca);
    Shape os = a->shape;
    os[static_cast<size_t>(cdim)] = Ca + Cb;
    const bool any = needs_grad(a) || needs_grad(b);
    auto out = make_output(*this, os, any);
    for (int64_t bi = 0; bi < B; ++bi) {
        std::copy_n(a->data.data() + bi * Ca * S, Ca * S, out->data.data() + bi * (Ca + Cb) * S);
        std::copy_n(b->data.data() + bi * Cb * S, Cb * S, out->data.data() + bi * (Ca + Cb) * S + Ca * S);
    }
    std::function<void()> bwd;
    if (recording_ && any) {
        TensorPtr ai = a, bi2 = b, yo = out;
        bwd = [ai, bi2, yo, B, Ca, Cb, S] {
            const double* gy = yo->grad.data();
            if (Graph::needs_grad(ai)) {
                ai->ensure_grad();
                for (int64_t bb = 0; bb < B; ++bb) {
                    const double* src = gy + bb * (Ca + Cb) * S;
                    double* dst = ai->grad.data() + bb * Ca * S;
                    for (int64_t i = 0; i < Ca * S; ++i) dst[i] += src[i];
                }
            }
            if (Graph::needs_grad(bi2)) {
                bi2->ensure_grad();
                for (int64_t bb = 0; bb < B; ++bb) {
                    const double* src = gy + bb * (Ca + Cb) * S + Ca * S;
                    double* dst = bi2->grad.data() + bb * Cb * S;
                    for (int64_t i = 0; i < Cb * S; ++i) dst[i] += src[i];
                }
            }
        };
    }
    push_node("concat_channels", out, std::move(bwd), {a, b, out});
    return out;
}

TensorPtr Graph::global_avg_pool(const TensorPtr& x) {
    if (x->rank() != 4) throw ShapeError("global_avg_pool: expected [B,C,H,W], got " + shape_str(x->shape));
    const int64_t B = x->dim(0), C = x->dim(1), S = x->dim(2) * x->dim(3);
    auto out = make_output(*this, {B, C}, needs_grad(x));
    const double inv = 1.0 / static_cast<double>(S);
    for (int64_t i = 0; i < B * C; ++i) {
        const double* row = x->data.data() + i * S;
        double acc = 0.0;
        for (int64_t s = 0; s < S; ++s) acc += row[s];
        out->data[i] = acc * inv;
    }
    std::function<void()> bwd;
    if (recording_ && needs_grad(x)) {
        TensorPtr xi = x, yo = out;
        bwd = [xi, yo, B, C, S, inv] {
            xi->ensure_grad();
            for (int64_t i = 0; i < B * C; ++i) {
                const double g = yo->grad[i] * inv;
                double* dst = xi->grad.data() + i * S;
                for (int64_t s = 0; s < S; ++s) dst[s] += g;
            }
        };
    }
    push_node("global_avg_pool", out, std::move(bwd), {x, out});
    return out;
}

TensorPtr Graph::sum(const TensorPtr& x) {
    auto out = make_output(*this, {1}, needs_grad(x));
    double acc = 0.0;
    for (double v : x->data) acc += v;
    out->data[0] = acc;
    std::function<void()> bwd;
    if (recording_ && needs_grad(x)) {
        TensorPtr xi = x, yo = out;
        bwd = [xi, yo] {
            xi->ensure_grad();
            const double g = yo->grad[0];
            for (auto& v : xi->grad) v += g;
        };
    }
    push_node("sum", out, std::move(bwd), {x, out});
    return out;
}

TensorPtr Graph::reshape(const TensorPtr& x, Shape s) {
    if (numel_of(s) != x->numel()) {
        throw ShapeError("reshape: " + shape_str(x->shape) + " has " + std::to_string(x->numel()) +
                         " elements, target " + shape_str(s) + " has " + std::to_string(numel_of(s)));
    }
    auto out = make_output(*this, std::move(s), needs_grad(x));
    out->data = x->data;
    std::function<void()> bwd;
    if (recording_ && needs_grad(x)) {
        TensorPtr xi = x, yo = out;
        bwd = [xi, yo] {
            xi->ensure_grad();
            for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += yo->grad[i];
        };
    }
    push_node("reshape", out, std::move(bwd), {x, out});
    return out;
}

TensorPtr Graph::cross_entropy(const TensorPtr& logits, const std::vector<int>& labels) {
    if (logits->rank() != 2) throw ShapeError("cross_entropy: logits must be [B,K], got " + shape_str(logits->shape));
    const int64_t B = logits->dim(0), K = logits->dim(1);
    if (static_cast<int64_t>(labels.size()) != B) {
        throw Error("cross_entropy: got " + std::to_string(labels.size()) + " labels for batch of " +
                    std::to_string(B));
    }
    for (int y : labels) {
        if (y < 0 || y >= K) throw Error("cross_entropy: label " + std::to_string(y) + " out of range [0," + std::to_string(K) + ")");
    }
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(B * K));
    auto out = make_output(*this, {1}, needs_grad(logits));
    double total = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        const double* l = logits->data.data() + b * K;
        double m = l[0];
        for (int64_t j = 1; j < K; ++j) m = std::max(m, l[j]);
        double s = 0.0;
        for (int64_t j = 0; j < K; ++j) {
            const double e = std::exp(l[j] - m);
            (*probs)[static_cast<size_t>(b * K + j)] = e;
            s += e;
        }
        const double inv = 1.0 / s;
        for (int64_t j = 0; j < K; ++j) (*probs)[static_cast<size_t>(b * K + j)] *= inv;
        total += m + std::log(s) - l[labels[static_cast<size_t>(b)]];
    }
    out->data[0] = total / static_cast<double>(B);
    std::function<void()> bwd;
    if (recording_ && needs_grad(logits)) {
        TensorPtr li = logits, yo = out;
        std::vector<int> ly = labels;
        bwd = [li, yo, probs, ly, B, K] {
            li->ensure_grad();
            const double g = yo->grad[0] / static_cast<double>(B);
            for (int64_t b = 0; b < B; ++b) {
                double* dl = li->grad.data() + b * K;
                const double* p = probs->data() + b * K;
                const int y = ly[static_cast<size_t>(b)];
                for (int64_t j = 0; j < K; ++j) dl[j] += g * (p[j] - (j == y ? 1.0 : 0.0));
            }
        };
    }
    push_node("cross_entropy", out, std::move(bwd), {logits, out});
    return out;
}

}  // namespace lesa
