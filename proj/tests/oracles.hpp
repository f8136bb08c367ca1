// Naive reference implementations used as independent oracles. Everything
// here is deliberately written as plain explicit loops (long double
// accumulation where it matters) with no code shared with the library paths
// under test.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// c[M,N] = a[M,K] * b[K,N], triple loop
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  int64_t M, int64_t K, int64_t N) {
    std::vector<double> c(static_cast<size_t>(M * N), 0.0);
    for (int64_t i = 0; i < M; ++i) {
        for (int64_t j = 0; j < N; ++j) {
            long double acc = 0.0L;
            for (int64_t k = 0; k < K; ++k) acc += static_cast<long double>(a[i * K + k]) * b[k * N + j];
            c[i * N + j] = static_cast<double>(acc);
        }
    }
    return c;
}

// dense (groups=1) cross-correlation, one sample: x[Cin,H,W], w[Cout,Cin,k,k]
inline std::vector<double> conv2d_dense(const std::vector<double>& x, const std::vector<double>& w,
                                        int64_t Cin, int64_t H, int64_t W, int64_t Cout, int64_t k,
                                        int stride, int pad) {
    const int64_t Ho = (H + 2 * pad - k) / stride + 1;
    const int64_t Wo = (W + 2 * pad - k) / stride + 1;
    std::vector<double> y(static_cast<size_t>(Cout * Ho * Wo), 0.0);
    for (int64_t oc = 0; oc < Cout; ++oc) {
        for (int64_t oh = 0; oh < Ho; ++oh) {
            for (int64_t ow = 0; ow < Wo; ++ow) {
                long double acc = 0.0L;
                for (int64_t c = 0; c < Cin; ++c) {
                    for (int64_t kh = 0; kh < k; ++kh) {
                        for (int64_t kw = 0; kw < k; ++kw) {
                            const int64_t ih = oh * stride - pad + kh;
                            const int64_t iw = ow * stride - pad + kw;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            acc += static_cast<long double>(x[(c * H + ih) * W + iw]) *
                                   w[((oc * Cin + c) * k + kh) * k + kw];
                        }
                    }
                }
                y[(oc * Ho + oh) * Wo + ow] = static_cast<double>(acc);
            }
        }
    }
    return y;
}

// grouped kernel [Cout, Cin/g, k, k] expanded to a dense block-diagonal
// [Cout, Cin, k, k]
inline std::vector<double> block_diagonal_kernel(const std::vector<double>& w, int64_t Cout,
                                                 int64_t Cin, int64_t k, int groups) {
    const int64_t cpg = Cin / groups;
    const int64_t opg = Cout / groups;
    std::vector<double> dense(static_cast<size_t>(Cout * Cin * k * k), 0.0);
    for (int64_t oc = 0; oc < Cout; ++oc) {
        const int64_t g = oc / opg;
        for (int64_t c = 0; c < cpg; ++c) {
            for (int64_t kk = 0; kk < k * k; ++kk) {
                dense[(oc * Cin + g * cpg + c) * k * k + kk] = w[(oc * cpg + c) * k * k + kk];
            }
        }
    }
    return dense;
}

inline std::vector<long double> softmax_hp(const std::vector<long double>& z) {
    long double m = z[0];
    for (long double v : z) m = std::max(m, v);
    std::vector<long double> e(z.size());
    long double s = 0.0L;
    for (size_t i = 0; i < z.size(); ++i) {
        e[i] = std::exp(z[i] - m);
        s += e[i];
    }
    for (auto& v : e) v /= s;
    return e;
}

struct AttentionParams {
    int64_t d_in = 0, d_qk = 0, d_out = 0;
    int heads = 1, H = 0, W = 0;
    bool use_position = true;
    bool scale_logits = false;
    const double* Wq = nullptr;     // [d_in, d_qk]
    const double* Wk = nullptr;     // [d_in, d_qk]
    const double* Wv = nullptr;     // [d_in, d_out]
    const double* r_row = nullptr;  // [heads, 2H-1, d_qk/heads]
    const double* r_col = nullptr;  // [heads, 2W-1, d_qk/heads]
};

enum class AttentionVariant { Full, Unary, Binary, AblateKeepDenom, AblateRenorm };

// exhaustive (i,j)x(h,w) evaluation for one sample x[d_in,H,W]
inline std::vector<double> attention(const std::vector<double>& x, const AttentionParams& p,
                                     AttentionVariant variant) {
    const int64_t P = static_cast<int64_t>(p.H) * p.W;
    const int64_t dh = p.d_qk / p.heads;
    const int64_t dv = p.d_out / p.heads;
    // per-pixel projections
    std::vector<long double> q(static_cast<size_t>(p.d_qk * P)), k(static_cast<size_t>(p.d_qk * P)),
        v(static_cast<size_t>(p.d_out * P));
    for (int64_t pp = 0; pp < P; ++pp) {
        for (int64_t o = 0; o < p.d_qk; ++o) {
            long double aq = 0.0L, ak = 0.0L;
            for (int64_t c = 0; c < p.d_in; ++c) {
                aq += static_cast<long double>(x[c * P + pp]) * p.Wq[c * p.d_qk + o];
                ak += static_cast<long double>(x[c * P + pp]) * p.Wk[c * p.d_qk + o];
            }
            q[o * P + pp] = aq;
            k[o * P + pp] = ak;
        }
        for (int64_t o = 0; o < p.d_out; ++o) {
            long double av = 0.0L;
            for (int64_t c = 0; c < p.d_in; ++c) {
                av += static_cast<long double>(x[c * P + pp]) * p.Wv[c * p.d_out + o];
            }
            v[o * P + pp] = av;
        }
    }
    std::vector<double> out(static_cast<size_t>(p.d_out * P), 0.0);
    for (int h = 0; h < p.heads; ++h) {
        for (int i = 0; i < p.H; ++i) {
            for (int j = 0; j < p.W; ++j) {
                const int64_t pij = static_cast<int64_t>(i) * p.W + j;
                std::vector<long double> logits(static_cast<size_t>(P));
                for (int hh = 0; hh < p.H; ++hh) {
                    for (int ww = 0; ww < p.W; ++ww) {
                        const int64_t phw = static_cast<int64_t>(hh) * p.W + ww;
                        long double acc = 0.0L;
                        for (int64_t d = 0; d < dh; ++d) {
                            acc += q[(h * dh + d) * P + pij] * k[(h * dh + d) * P + phw];
                        }
                        if (p.use_position) {
                            const int64_t ro = i - hh + p.H - 1;
                            const int64_t co = j - ww + p.W - 1;
                            for (int64_t d = 0; d < dh; ++d) {
                                acc += q[(h * dh + d) * P + pij] *
                                       (p.r_row[(h * (2 * p.H - 1) + ro) * dh + d] +
                                        p.r_col[(h * (2 * p.W - 1) + co) * dh + d]);
                            }
                        }
                        if (p.scale_logits) acc /= std::sqrt(static_cast<long double>(dh));
                        logits[static_cast<size_t>(phw)] = acc;
                    }
                }
                std::vector<long double> s = softmax_hp(logits);
                for (int64_t e = 0; e < dv; ++e) {
                    long double acc = 0.0L;
                    switch (variant) {
                        case AttentionVariant::Full:
                            for (int64_t phw = 0; phw < P; ++phw) {
                                acc += s[static_cast<size_t>(phw)] * v[(h * dv + e) * P + phw];
                            }
                            break;
                        case AttentionVariant::Unary:
                            acc = s[static_cast<size_t>(pij)] * v[(h * dv + e) * P + pij];
                            break;
                        case AttentionVariant::Binary:
                            for (int64_t phw = 0; phw < P; ++phw) {
                                if (phw == pij) continue;
                                acc += s[static_cast<size_t>(phw)] * v[(h * dv + e) * P + phw];
                            }
                            break;
                        case AttentionVariant::AblateKeepDenom:
                            for (int64_t phw = 0; phw < P; ++phw) {
                                if (phw == pij) continue;
                                acc += s[static_cast<size_t>(phw)] * v[(h * dv + e) * P + phw];
                            }
                            break;
                        case AttentionVariant::AblateRenorm: {
                            long double rest = 1.0L - s[static_cast<size_t>(pij)];
                            for (int64_t phw = 0; phw < P; ++phw) {
                                if (phw == pij) continue;
                                acc += s[static_cast<size_t>(phw)] * v[(h * dv + e) * P + phw];
                            }
                            acc /= rest;
                            break;
                        }
                    }
                    out[(h * dv + e) * P + pij] = static_cast<double>(acc);
                }
            }
        }
    }
    return out;
}

// quadruple-loop relative logits for one sample: q[d_qk,H,W] -> [heads,P,P]
inline std::vector<double> relative_logits(const std::vector<double>& q, int heads, int64_t d_qk,
                                           int H, int W, const double* r_row, const double* r_col) {
    const int64_t P = static_cast<int64_t>(H) * W;
    const int64_t dh = d_qk / heads;
    std::vector<double> out(static_cast<size_t>(heads * P * P), 0.0);
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                for (int hh = 0; hh < H; ++hh) {
                    for (int ww = 0; ww < W; ++ww) {
                        long double acc = 0.0L;
                        for (int64_t d = 0; d < dh; ++d) {
                            acc += static_cast<long double>(q[(h * dh + d) * P + i * W + j]) *
                                   (r_row[(h * (2 * H - 1) + (i - hh + H - 1)) * dh + d] +
                                    r_col[(h * (2 * W - 1) + (j - ww + W - 1)) * dh + d]);
                        }
                        out[(static_cast<int64_t>(h) * P + i * W + j) * P + hh * W + ww] =
                            static_cast<double>(acc);
                    }
                }
            }
        }
    }
    return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace oracle
