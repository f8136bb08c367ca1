#include <algorithm>
#include <cstring>
#include <vector>

#include "lesa/graph.hpp"
#include "lesa/threading.hpp"

namespace lesa {

namespace {

// C[i,:] += sum_k A[i,k] * B[k,:] for rows i in [i0,i1). Four-row blocking
// keeps each B row hot across four accumulator streams; the j loop is an
// independent-add axpy, so it vectorizes without reassociation.
void gemm_rows(const double* A, const double* B, double* C, int64_t K, int64_t N, int64_t i0,
               int64_t i1) {
    int64_t i = i0;
    for (; i + 4 <= i1; i += 4) {
        double* c0 = C + (i + 0) * N;
        double* c1 = C + (i + 1) * N;
        double* c2 = C + (i + 2) * N;
        double* c3 = C + (i + 3) * N;
        const double* a0 = A + (i + 0) * K;
        const double* a1 = A + (i + 1) * K;
        const double* a2 = A + (i + 2) * K;
        const double* a3 = A + (i + 3) * K;
        for (int64_t k = 0; k < K; ++k) {
            const double* br = B + k * N;
            const double v0 = a0[k], v1 = a1[k], v2 = a2[k], v3 = a3[k];
            for (int64_t j = 0; j < N; ++j) {
                c0[j] += v0 * br[j];
                c1[j] += v1 * br[j];
                c2[j] += v2 * br[j];
                c3[j] += v3 * br[j];
            }
        }
    }
    for (; i < i1; ++i) {
        double* cr = C + i * N;
        const double* ar = A + i * K;
        for (int64_t k = 0; k < K; ++k) {
            const double v = ar[k];
            const double* br = B + k * N;
            for (int64_t j = 0; j < N; ++j) cr[j] += v * br[j];
        }
    }
}

// C[M,N] += A[M,K] * B[K,N], rows of C partitioned across threads.
void gemm_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
    parallel_for(M, [&](int64_t i0, int64_t i1) { gemm_rows(A, B, C, K, N, i0, i1); });
}

// C[M,N] += A[K,M]^T * B[K,N] (A given transposed), rows of C across threads.
void gemm_at_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
    parallel_for(M, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            double* cr = C + i * N;
            for (int64_t k = 0; k < K; ++k) {
                const double a = A[k * M + i];
                const double* br = B + k * N;
                for (int64_t j = 0; j < N; ++j) cr[j] += a * br[j];
            }
        }
    });
}

// C[M,N] += A[M,K] * B[N,K]^T (B given transposed): C[i,j] = dot(A row, B row).
void gemm_bt_acc(const double* A, const double* B, double* C, int64_t M, int64_t K, int64_t N) {
    parallel_for(M, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            const double* ar = A + i * K;
            double* cr = C + i * N;
            for (int64_t j = 0; j < N; ++j) {
                const double* br = B + j * K;
                double acc = 0.0;
                for (int64_t k = 0; k < K; ++k) acc += ar[k] * br[k];
                cr[j] += acc;
            }
        }
    });
}

struct ConvDims {
    int64_t B, Cin, H, W, Cout, Cpg, k, Ho, Wo;
    int groups, stride, padding;
};

ConvDims conv_dims(const TensorPtr& x, const TensorPtr& w, int groups, int stride, int padding) {
    if (x->rank() != 4) throw ShapeError("conv2d: input must be [B,Cin,H,W], got " + shape_str(x->shape));
    if (w->rank() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin/g,k,k], got " + shape_str(w->shape));
    ConvDims d;
    d.B = x->dim(0);
    d.Cin = x->dim(1);
    d.H = x->dim(2);
    d.W = x->dim(3);
    d.Cout = w->dim(0);
    d.Cpg = w->dim(1);
    d.k = w->dim(2);
    d.groups = groups;
    d.stride = stride;
    d.padding = padding;
    if (groups < 1 || d.Cin % groups != 0 || d.Cout % groups != 0) {
        throw ShapeError("conv2d: groups=" + std::to_string(groups) + " must divide Cin=" +
                         std::to_string(d.Cin) + " and Cout=" + std::to_string(d.Cout));
    }
    if (w->dim(3) != d.k) throw ShapeError("conv2d: kernel must be square, got " + shape_str(w->shape));
    if (d.Cpg != d.Cin / groups) {
        throw ShapeError("conv2d: kernel " + shape_str(w->shape) + " expects Cin/g=" +
                         std::to_string(d.Cpg) + " but input " + shape_str(x->shape) + " with groups=" +
                         std::to_string(groups) + " gives " + std::to_string(d.Cin / groups));
    }
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
    if (d.H + 2 * padding < d.k || d.W + 2 * padding < d.k) {
        throw ShapeError("conv2d: kernel k=" + std::to_string(d.k) + " larger than padded input " +
                         shape_str(x->shape));
    }
    d.Ho = (d.H + 2 * padding - d.k) / stride + 1;
    d.Wo = (d.W + 2 * padding - d.k) / stride + 1;
    return d;
}

// col[Cpg*k*k, Ho*Wo] for one (batch, group) slice
void im2col(const double* x, const ConvDims& d, int64_t b, int g, double* col) {
    const int64_t P = d.Ho * d.Wo;
    const int64_t c_base = static_cast<int64_t>(g) * d.Cpg;
    for (int64_t c = 0; c < d.Cpg; ++c) {
        const double* xc = x + ((b * d.Cin + c_base + c) * d.H) * d.W;
        for (int64_t kh = 0; kh < d.k; ++kh) {
            for (int64_t kw = 0; kw < d.k; ++kw) {
                double* row = col + ((c * d.k + kh) * d.k + kw) * P;
                for (int64_t oh = 0; oh < d.Ho; ++oh) {
                    const int64_t ih = oh * d.stride - d.padding + kh;
                    double* dst = row + oh * d.Wo;
                    if (ih < 0 || ih >= d.H) {
                        std::fill_n(dst, d.Wo, 0.0);
                        continue;
                    }
                    const double* src = xc + ih * d.W;
                    for (int64_t ow = 0; ow < d.Wo; ++ow) {
                        const int64_t iw = ow * d.stride - d.padding + kw;
                        dst[ow] = (iw >= 0 && iw < d.W) ? src[iw] : 0.0;
                    }
                }
            }
        }
    }
}

// transposed layout colT[Ho*Wo, Cpg*k*k]; row-contiguous writes
void im2colT(const double* x, const ConvDims& d, int64_t b, int g, double* colT) {
    const int64_t CKK = d.Cpg * d.k * d.k;
    const int64_t c_base = static_cast<int64_t>(g) * d.Cpg;
    const double* xb = x + (b * d.Cin + c_base) * d.H * d.W;
    for (int64_t oh = 0; oh < d.Ho; ++oh) {
        for (int64_t ow = 0; ow < d.Wo; ++ow) {
            double* row = colT + (oh * d.Wo + ow) * CKK;
            for (int64_t c = 0; c < d.Cpg; ++c) {
                const double* xc = xb + c * d.H * d.W;
                for (int64_t kh = 0; kh < d.k; ++kh) {
                    const int64_t ih = oh * d.stride - d.padding + kh;
                    double* dst = row + (c * d.k + kh) * d.k;
                    if (ih < 0 || ih >= d.H) {
                        std::fill_n(dst, d.k, 0.0);
                        continue;
                    }
                    const double* src = xc + ih * d.W;
                    for (int64_t kw = 0; kw < d.k; ++kw) {
                        const int64_t iw = ow * d.stride - d.padding + kw;
                        dst[kw] = (iw >= 0 && iw < d.W) ? src[iw] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_acc(const double* col, const ConvDims& d, int64_t b, int g, double* dx) {
    const int64_t P = d.Ho * d.Wo;
    const int64_t c_base = static_cast<int64_t>(g) * d.Cpg;
    for (int64_t c = 0; c < d.Cpg; ++c) {
        double* xc = dx + ((b * d.Cin + c_base + c) * d.H) * d.W;
        for (int64_t kh = 0; kh < d.k; ++kh) {
            for (int64_t kw = 0; kw < d.k; ++kw) {
                const double* row = col + ((c * d.k + kh) * d.k + kw) * P;
                for (int64_t oh = 0; oh < d.Ho; ++oh) {
                    const int64_t ih = oh * d.stride - d.padding + kh;
                    if (ih < 0 || ih >= d.H) continue;
                    const double* src = row + oh * d.Wo;
                    double* dst = xc + ih * d.W;
                    for (int64_t ow = 0; ow < d.Wo; ++ow) {
                        const int64_t iw = ow * d.stride - d.padding + kw;
                        if (iw >= 0 && iw < d.W) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

}  // namespace

TensorPtr Graph::matmul(const TensorPtr& a, const TensorPtr& b) {
    if (a->rank() != 2 || b->rank() != 2 || a->dim(1) != b->dim(0)) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    }
    const int64_t M = a->dim(0), K = a->dim(1), N = b->dim(1);
    const bool any = needs_grad(a) || needs_grad(b);
    auto out = tensor({M, N});
    out->requires_grad = recording_ && any;
    gemm_acc(a->data.data(), b->data.data(), out->data.data(), M, K, N);
    std::function<void()> bwd;
    if (recording_ && any) {
        TensorPtr ai = a, bi = b, yo = out;
        bwd = [ai, bi, yo, M, K, N] {
            if (Graph::needs_grad(ai)) {
                ai->ensure_grad();
                // dA = dC * B^T
                gemm_bt_acc(yo->grad.data(), bi->data.data(), ai->grad.data(), M, N, K);
            }
            if (Graph::needs_grad(bi)) {
                bi->ensure_grad();
                // dB = A^T * dC
                gemm_at_acc(ai->data.data(), yo->grad.data(), bi->grad.data(), K, M, N);
            }
        };
    }
    push_node("matmul", out, std::move(bwd), {a, b, out});
    return out;
}

TensorPtr Graph::channel_project(const TensorPtr& x, const TensorPtr& w) {
    if (x->rank() < 3) throw ShapeError("channel_project: input must be [B,C,...], got " + shape_str(x->shape));
    if (w->rank() != 2) throw ShapeError("channel_project: weight must be [Cin,Cout], got " + shape_str(w->shape));
    const int64_t B = x->dim(0), C = x->dim(1);
    const int64_t P = x->numel() / (B * C);
    const int64_t O = w->dim(1);
    if (w->dim(0) != C) {
        throw ShapeError("channel_project: weight " + shape_str(w->shape) + " does not match input channels " +
                         std::to_string(C) + " of " + shape_str(x->shape));
    }
    Shape os = x->shape;
    os[1] = O;
    const bool any = needs_grad(x) || needs_grad(w);
    auto out = tensor(os);
    out->requires_grad = recording_ && any;
    {
        // y[b] = w^T [O,C] * x[b] [C,P]
        std::vector<double> wt(static_cast<size_t>(O * C));
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t o = 0; o < O; ++o) wt[o * C + c] = w->data[c * O + o];
        }
        const double* xp = x->data.data();
        double* yp = out->data.data();
        parallel_for(B, [&](int64_t b0, int64_t b1) {
            for (int64_t b = b0; b < b1; ++b) {
                gemm_rows(wt.data(), xp + b * C * P, yp + b * O * P, C, P, 0, O);
            }
        });
    }
    std::function<void()> bwd;
    if (recording_ && any) {
        TensorPtr xi = x, wi = w, yo = out;
        bwd = [xi, wi, yo, B, C, O, P] {
            const double* gy = yo->grad.data();
            if (Graph::needs_grad(xi)) {
                xi->ensure_grad();
                const double* wp2 = wi->data.data();
                double* gx = xi->grad.data();
                parallel_for(B, [&](int64_t b0, int64_t b1) {
                    for (int64_t b = b0; b < b1; ++b) {
                        gemm_rows(wp2, gy + b * O * P, gx + b * C * P, O, P, 0, C);
                    }
                });
            }
            if (Graph::needs_grad(wi)) {
                wi->ensure_grad();
                const double* xp2 = xi->data.data();
                // dyT[b] = dy[b]^T so the inner accumulation runs along O
                std::vector<double> dyT(static_cast<size_t>(B * P * O));
                parallel_for(B, [&](int64_t b0, int64_t b1) {
                    for (int64_t b = b0; b < b1; ++b) {
                        const double* src = gy + b * O * P;
                        double* dst = dyT.data() + b * P * O;
                        for (int64_t o = 0; o < O; ++o) {
                            for (int64_t p = 0; p < P; ++p) dst[p * O + o] = src[o * P + p];
                        }
                    }
                });
                // dW = sum_b x_b [C,P] * dyT_b [P,O]; rows of dW split across
                // threads, batch loop kept in a fixed order
                double* gw = wi->grad.data();
                parallel_for(C, [&](int64_t c0, int64_t c1) {
                    for (int64_t b = 0; b < B; ++b) {
                        gemm_rows(xp2 + b * C * P, dyT.data() + b * P * O, gw, P, O, c0, c1);
                    }
                });
            }
        };
    }
    push_node("channel_project", out, std::move(bwd), {x, w, out});
    return out;
}

TensorPtr Graph::conv2d(const TensorPtr& x, const TensorPtr& w, int groups, int stride, int padding) {
    const ConvDims d = conv_dims(x, w, groups, stride, padding);
    const int64_t P = d.Ho * d.Wo;
    const int64_t CKK = d.Cpg * d.k * d.k;
    const int64_t opg = d.Cout / d.groups;
    // a 1x1 stride-1 convolution is a plain channel mix: the patch matrix is
    // the input slice itself, so the im2col/col2im copies drop out
    const bool pointwise = d.k == 1 && d.stride == 1 && d.padding == 0;
    const bool any = needs_grad(x) || needs_grad(w);
    auto out = tensor({d.B, d.Cout, d.Ho, d.Wo});
    out->requires_grad = recording_ && any;
    const double* xp = x->data.data();
    const double* wp = w->data.data();
    double* yp = out->data.data();
    parallel_for(d.B * d.groups, [&](int64_t i0, int64_t i1) {
        std::vector<double> col(pointwise ? 0 : static_cast<size_t>(CKK * P));
        for (int64_t i = i0; i < i1; ++i) {
            const int64_t b = i / d.groups;
            const int g = static_cast<int>(i % d.groups);
            const double* src;
            if (pointwise) {
                src = xp + (b * d.Cin + static_cast<int64_t>(g) * d.Cpg) * P;
            } else {
                im2col(xp, d, b, g, col.data());
                src = col.data();
            }
            const double* wg = wp + static_cast<int64_t>(g) * opg * CKK;
            double* yg = yp + (b * d.Cout + static_cast<int64_t>(g) * opg) * P;
            gemm_rows(wg, src, yg, CKK, P, 0, opg);
        }
    });
    std::function<void()> bwd;
    if (recording_ && any) {
        TensorPtr xi = x, wi = w, yo = out;
        bwd = [xi, wi, yo, d, P, CKK, opg, pointwise] {
            const bool need_x = Graph::needs_grad(xi);
            const bool need_w = Graph::needs_grad(wi);
            if (need_x) xi->ensure_grad();
            if (need_w) wi->ensure_grad();
            const double* xp2 = xi->data.data();
            const double* wp2 = wi->data.data();
            const double* gy = yo->grad.data();
            if (need_w) {
                // one transposed patch matrix per (b,g); then dW_g gathers
                // gemm updates dy_bg [opg,P] * colT_bg [P,CKK] with the batch
                // loop kept in a fixed order inside each row partition
                std::vector<double> colT(static_cast<size_t>(d.B * d.groups) * P * CKK);
                parallel_for(d.B * d.groups, [&](int64_t i0, int64_t i1) {
                    for (int64_t i = i0; i < i1; ++i) {
                        const int64_t b = i / d.groups;
                        const int g = static_cast<int>(i % d.groups);
                        double* dst = colT.data() + i * P * CKK;
                        if (pointwise) {
                            const double* src = xp2 + (b * d.Cin + static_cast<int64_t>(g) * d.Cpg) * P;
                            for (int64_t c = 0; c < d.Cpg; ++c) {
                                for (int64_t p = 0; p < P; ++p) dst[p * CKK + c] = src[c * P + p];
                            }
                        } else {
                            im2colT(xp2, d, b, g, dst);
                        }
                    }
                });
                double* gw = wi->grad.data();
                parallel_for(d.Cout, [&](int64_t oc0, int64_t oc1) {
                    for (int64_t b = 0; b < d.B; ++b) {
                        for (int64_t g = oc0 / opg; g <= (oc1 - 1) / opg; ++g) {
                            const int64_t r0 = std::max(oc0, g * opg);
                            const int64_t r1 = std::min(oc1, (g + 1) * opg);
                            if (r0 >= r1) continue;
                            const double* ct = colT.data() + ((b * d.groups + g) * P) * CKK;
                            const double* dyg = gy + (b * d.Cout + g * opg) * P;
                            gemm_rows(dyg, ct, gw + g * opg * CKK, P, CKK, r0 - g * opg,
                                      r1 - g * opg);
                        }
                    }
                });
            }
            if (need_x) {
                // dcol = wg^T [CKK,opg] * dy_bg [opg,P], then scatter-add
                // (pointwise: accumulate straight into the dx slice)
                std::vector<double> wT(static_cast<size_t>(d.groups) * CKK * opg);
                for (int64_t g = 0; g < d.groups; ++g) {
                    const double* wg = wp2 + g * opg * CKK;
                    double* wt = wT.data() + g * CKK * opg;
                    for (int64_t oc = 0; oc < opg; ++oc) {
                        for (int64_t r = 0; r < CKK; ++r) wt[r * opg + oc] = wg[oc * CKK + r];
                    }
                }
                double* gx = xi->grad.data();
                parallel_for(d.B * d.groups, [&](int64_t i0, int64_t i1) {
                    static thread_local std::vector<double> dcol;
                    if (!pointwise) dcol.resize(static_cast<size_t>(CKK * P));
                    for (int64_t i = i0; i < i1; ++i) {
                        const int64_t b = i / d.groups;
                        const int g = static_cast<int>(i % d.groups);
                        const double* dyg = gy + (b * d.Cout + static_cast<int64_t>(g) * opg) * P;
                        const double* wt = wT.data() + static_cast<int64_t>(g) * CKK * opg;
                        if (pointwise) {
                            double* dst = gx + (b * d.Cin + static_cast<int64_t>(g) * d.Cpg) * P;
                            gemm_rows(wt, dyg, dst, opg, P, 0, CKK);
                        } else {
                            std::fill(dcol.begin(), dcol.end(), 0.0);
                            gemm_rows(wt, dyg, dcol.data(), opg, P, 0, CKK);
                            col2im_acc(dcol.data(), d, b, g, gx);
                        }
                    }
                });
            }
        };
    }
    push_node("conv2d", out, std::move(bwd), {x, w, out});
    return out;
}

TensorPtr Graph::linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias) {
    if (x->rank() != 2 || w->rank() != 2 || x->dim(1) != w->dim(0)) {
        throw ShapeError("linear: " + shape_str(x->shape) + " x " + shape_str(w->shape) + " mismatch");
    }
    const int64_t B = x->dim(0), F = x->dim(1), K = w->dim(1);
    if (bias && bias->numel() != K) {
        throw ShapeError("linear: bias " + shape_str(bias->shape) + " does not match output dim " +
                         std::to_string(K));
    }
    const bool any = needs_grad(x) || needs_grad(w) || needs_grad(bias);
    auto out = tensor({B, K});
    out->requires_grad = recording_ && any;
    if (bias) {
        for (int64_t b = 0; b < B; ++b) {
            std::copy_n(bias->data.data(), K, out->data.data() + b * K);
        }
    }
    gemm_acc(x->data.data(), w->data.data(), out->data.data(), B, F, K);
    std::function<void()> bwd;
    if (recording_ && any) {
        TensorPtr xi = x, wi = w, bi = bias, yo = out;
        bwd = [xi, wi, bi, yo, B, F, K] {
            if (Graph::needs_grad(xi)) {
                xi->ensure_grad();
                gemm_bt_acc(yo->grad.data(), wi->data.data(), xi->grad.data(), B, K, F);
            }
            if (Graph::needs_grad(wi)) {
                wi->ensure_grad();
                gemm_at_acc(xi->data.data(), yo->grad.data(), wi->grad.data(), F, B, K);
            }
            if (bi && Graph::needs_grad(bi)) {
                bi->ensure_grad();
                for (int64_t b = 0; b < B; ++b) {
                    const double* gr = yo->grad.data() + b * K;
                    for (int64_t j = 0; j < K; ++j) bi->grad[j] += gr[j];
                }
            }
        };
    }
    push_node("linear", out, std::move(bwd), {x, w, bias, out});
    return out;
}

}  // namespace lesa
