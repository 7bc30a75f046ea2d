#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "sarl/autodiff.hpp"

namespace sarl::ad {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

// ---------------------------------------------------------------------------
// Dense / matmul
// ---------------------------------------------------------------------------

// C[m,n] = A[m,k] * B[k,n]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw std::invalid_argument("matmul: bad shapes");
    int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out({m, n});
    EMap<T>(out.v.data(), m, n) =
        ECMap<T>(av.v.data(), m, k) * ECMap<T>(bv.v.data(), k, n);
    bool ng = a.g->node(a.idx).needs_grad || b.g->node(b.idx).needs_grad;
    int ai = a.idx, bi = b.idx;
    return a.g->make(std::move(out), ng, [ai, bi, m, k, n](Graph<T>& g, typename Graph<T>::Node& nd) {
        ECMap<T> dC(nd.grad.v.data(), m, n);
        if (auto* ga = g.grad_buf(ai)) {
            ECMap<T> B(g.node(bi).val.v.data(), k, n);
            EMap<T>(ga->v.data(), m, k) += dC * B.transpose();
        }
        if (auto* gb = g.grad_buf(bi)) {
            ECMap<T> A(g.node(ai).val.v.data(), m, k);
            EMap<T>(gb->v.data(), k, n) += A.transpose() * dC;
        }
    });
}

// C[m,n] = A[m,k] * B[n,k]^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
        throw std::invalid_argument("matmul_nt: bad shapes");
    int m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    Tensor<T> out({m, n});
    EMap<T>(out.v.data(), m, n) =
        ECMap<T>(av.v.data(), m, k) * ECMap<T>(bv.v.data(), n, k).transpose();
    bool ng = a.g->node(a.idx).needs_grad || b.g->node(b.idx).needs_grad;
    int ai = a.idx, bi = b.idx;
    return a.g->make(std::move(out), ng, [ai, bi, m, k, n](Graph<T>& g, typename Graph<T>::Node& nd) {
        ECMap<T> dC(nd.grad.v.data(), m, n);
        if (auto* ga = g.grad_buf(ai)) {
            ECMap<T> B(g.node(bi).val.v.data(), n, k);
            EMap<T>(ga->v.data(), m, k) += dC * B;
        }
        if (auto* gb = g.grad_buf(bi)) {
            ECMap<T> A(g.node(ai).val.v.data(), m, k);
            EMap<T>(gb->v.data(), n, k) += dC.transpose() * A;
        }
    });
}

// y[N,O] = x[N,D] * W[D,O] + b[O]
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    const auto& xv = x.val();
    const auto& wv = w.val();
    const auto& bv = b.val();
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0) || bv.dim(0) != wv.dim(1))
        throw std::invalid_argument("linear: bad shapes");
    int N = xv.dim(0), D = xv.dim(1), O = wv.dim(1);
    Tensor<T> out({N, O});
    EMap<T> Y(out.v.data(), N, O);
    Y = ECMap<T>(xv.v.data(), N, D) * ECMap<T>(wv.v.data(), D, O);
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o) out.at2(n, o) += bv[o];
    bool ng = x.g->node(x.idx).needs_grad || w.g->node(w.idx).needs_grad ||
              b.g->node(b.idx).needs_grad;
    int xi = x.idx, wi = w.idx, bi = b.idx;
    return x.g->make(std::move(out), ng, [xi, wi, bi, N, D, O](Graph<T>& g, typename Graph<T>::Node& nd) {
        ECMap<T> dY(nd.grad.v.data(), N, O);
        if (auto* gx = g.grad_buf(xi)) {
            ECMap<T> W(g.node(wi).val.v.data(), D, O);
            EMap<T>(gx->v.data(), N, D) += dY * W.transpose();
        }
        if (auto* gw = g.grad_buf(wi)) {
            ECMap<T> X(g.node(xi).val.v.data(), N, D);
            EMap<T>(gw->v.data(), D, O) += X.transpose() * dY;
        }
        if (auto* gb = g.grad_buf(bi)) {
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o) (*gb)[o] += nd.grad.at2(n, o);
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution (3x3, pad 1, stride 1 or 2), NCHW, weights [O,C,3,3]
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void im2col3x3(const Tensor<T>& x, int n, int stride, int ho, int wo, T* cols) {
    // cols: [C*9, ho*wo] row-major
    int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t hw = static_cast<int64_t>(ho) * wo;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* dst = cols + (static_cast<int64_t>(c) * 9 + ky * 3 + kx) * hw;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - 1;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - 1;
                        dst[oy * wo + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                                ? x.at4(n, c, iy, ix)
                                                : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im3x3_acc(const T* cols, int C, int H, int W, int stride, int ho, int wo,
                   Tensor<T>& dx, int n) {
    int64_t hw = static_cast<int64_t>(ho) * wo;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* src = cols + (static_cast<int64_t>(c) * 9 + ky * 3 + kx) * hw;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - 1;
                        if (ix < 0 || ix >= W) continue;
                        dx.at4(n, c, iy, ix) += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride) {
    const auto& xv = x.val();
    const auto& wv = w.val();
    const auto& bv = b.val();
    if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(2) != 3 || wv.dim(3) != 3 ||
        wv.dim(1) != xv.dim(1) || bv.dim(0) != wv.dim(0))
        throw std::invalid_argument("conv2d: bad shapes");
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int O = wv.dim(0);
    int ho = (H + 2 - 3) / stride + 1;
    int wo = (W + 2 - 3) / stride + 1;
    int K = C * 9;
    int64_t hw = static_cast<int64_t>(ho) * wo;

    Tensor<T> out({N, O, ho, wo});
    std::vector<T> cols(static_cast<size_t>(K) * hw);
    ECMap<T> Wm(wv.v.data(), O, K);
    for (int n = 0; n < N; ++n) {
        detail::im2col3x3(xv, n, stride, ho, wo, cols.data());
        EMap<T> Y(out.v.data() + static_cast<int64_t>(n) * O * hw, O, hw);
        Y = Wm * ECMap<T>(cols.data(), K, hw);
        for (int o = 0; o < O; ++o) Y.row(o).array() += bv[o];
    }

    bool ng = x.g->node(x.idx).needs_grad || w.g->node(w.idx).needs_grad ||
              b.g->node(b.idx).needs_grad;
    int xi = x.idx, wi = w.idx, bi = b.idx;
    return x.g->make(std::move(out), ng,
                     [xi, wi, bi, N, C, H, W, O, ho, wo, K, stride, hw](
                         Graph<T>& g, typename Graph<T>::Node& nd) {
                         auto* gx = g.grad_buf(xi);
                         auto* gw = g.grad_buf(wi);
                         auto* gb = g.grad_buf(bi);
                         const auto& xv2 = g.node(xi).val;
                         const auto& wv2 = g.node(wi).val;
                         std::vector<T> cols(static_cast<size_t>(K) * hw);
                         std::vector<T> dcols(static_cast<size_t>(K) * hw);
                         ECMap<T> Wm(wv2.v.data(), O, K);
                         for (int n = 0; n < N; ++n) {
                             ECMap<T> dY(nd.grad.v.data() + static_cast<int64_t>(n) * O * hw, O, hw);
                             if (gw) {
                                 detail::im2col3x3(xv2, n, stride, ho, wo, cols.data());
                                 EMap<T>(gw->v.data(), O, K) +=
                                     dY * ECMap<T>(cols.data(), K, hw).transpose();
                             }
                             if (gb)
                                 for (int o = 0; o < O; ++o) (*gb)[o] += dY.row(o).sum();
                             if (gx) {
                                 EMap<T>(dcols.data(), K, hw) = Wm.transpose() * dY;
                                 detail::col2im3x3_acc(dcols.data(), C, H, W, stride, ho, wo, *gx, n);
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Batch normalization, per channel over (N, H, W)
// ---------------------------------------------------------------------------

// Training mode: normalizes by batch statistics (biased variance). The batch
// mean/var are written to *out_mean / *out_var so the caller can maintain
// running statistics; they are not part of the tape.
template <class T>
Var<T> batchnorm_train(Var<T> x, Var<T> gamma, Var<T> beta, T eps,
                       Tensor<T>* out_mean = nullptr, Tensor<T>* out_var = nullptr) {
    const auto& xv = x.val();
    if (xv.rank() != 4) throw std::invalid_argument("batchnorm: expected NCHW");
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const auto& gv = gamma.val();
    const auto& bv = beta.val();
    if (gv.dim(0) != C || bv.dim(0) != C) throw std::invalid_argument("batchnorm: bad affine shapes");
    int64_t m = static_cast<int64_t>(N) * H * W;

    Tensor<T> mu({C}), var({C});
    for (int c = 0; c < C; ++c) {
        T s = 0;
        for (int n = 0; n < N; ++n)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) s += xv.at4(n, c, y, xx);
        mu[c] = s / static_cast<T>(m);
    }
    for (int c = 0; c < C; ++c) {
        T s = 0;
        for (int n = 0; n < N; ++n)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    T d = xv.at4(n, c, y, xx) - mu[c];
                    s += d * d;
                }
        var[c] = s / static_cast<T>(m);
    }
    if (out_mean) *out_mean = mu;
    if (out_var) *out_var = var;

    Tensor<T> out(xv.shape);
    std::vector<T> inv_sigma(C);
    for (int c = 0; c < C; ++c) inv_sigma[c] = T(1) / std::sqrt(var[c] + eps);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    out.at4(n, c, y, xx) =
                        gv[c] * (xv.at4(n, c, y, xx) - mu[c]) * inv_sigma[c] + bv[c];

    bool ng = x.g->node(x.idx).needs_grad || x.g->node(gamma.idx).needs_grad ||
              x.g->node(beta.idx).needs_grad;
    int xi = x.idx, gi = gamma.idx, bi = beta.idx;
    return x.g->make(
        std::move(out), ng,
        [xi, gi, bi, N, C, H, W, m, mu, inv_sigma](Graph<T>& g, typename Graph<T>::Node& nd) {
            const auto& xv2 = g.node(xi).val;
            const auto& gv2 = g.node(gi).val;
            auto* gx = g.grad_buf(xi);
            auto* gg = g.grad_buf(gi);
            auto* gb = g.grad_buf(bi);
            for (int c = 0; c < C; ++c) {
                // Reductions over the channel's elements.
                T sum_dy = 0, sum_dy_xhat = 0;
                for (int n = 0; n < N; ++n)
                    for (int y = 0; y < H; ++y)
                        for (int xx = 0; xx < W; ++xx) {
                            T dy = nd.grad.at4(n, c, y, xx);
                            T xhat = (xv2.at4(n, c, y, xx) - mu[c]) * inv_sigma[c];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat;
                        }
                if (gb) (*gb)[c] += sum_dy;
                if (gg) (*gg)[c] += sum_dy_xhat;
                if (gx) {
                    T k1 = sum_dy / static_cast<T>(m);
                    T k2 = sum_dy_xhat / static_cast<T>(m);
                    T gs = gv2[c] * inv_sigma[c];
                    for (int n = 0; n < N; ++n)
                        for (int y = 0; y < H; ++y)
                            for (int xx = 0; xx < W; ++xx) {
                                T dy = nd.grad.at4(n, c, y, xx);
                                T xhat = (xv2.at4(n, c, y, xx) - mu[c]) * inv_sigma[c];
                                gx->at4(n, c, y, xx) += gs * (dy - k1 - xhat * k2);
                            }
                }
            }
        });
}

// Inference mode: normalizes by supplied running statistics.
template <class T>
Var<T> batchnorm_eval(Var<T> x, Var<T> gamma, Var<T> beta, const Tensor<T>& rmean,
                      const Tensor<T>& rvar, T eps) {
    const auto& xv = x.val();
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const auto& gv = gamma.val();
    const auto& bv = beta.val();
    Tensor<T> out(xv.shape);
    std::vector<T> inv_sigma(C);
    for (int c = 0; c < C; ++c) inv_sigma[c] = T(1) / std::sqrt(rvar[c] + eps);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    out.at4(n, c, y, xx) =
                        gv[c] * (xv.at4(n, c, y, xx) - rmean[c]) * inv_sigma[c] + bv[c];
    bool ng = x.g->node(x.idx).needs_grad || x.g->node(gamma.idx).needs_grad ||
              x.g->node(beta.idx).needs_grad;
    int xi = x.idx, gi = gamma.idx, bi = beta.idx;
    Tensor<T> rm = rmean;
    return x.g->make(std::move(out), ng,
                     [xi, gi, bi, N, C, H, W, rm, inv_sigma](Graph<T>& g,
                                                             typename Graph<T>::Node& nd) {
                         const auto& xv2 = g.node(xi).val;
                         const auto& gv2 = g.node(gi).val;
                         auto* gx = g.grad_buf(xi);
                         auto* gg = g.grad_buf(gi);
                         auto* gb = g.grad_buf(bi);
                         for (int n = 0; n < N; ++n)
                             for (int c = 0; c < C; ++c)
                                 for (int y = 0; y < H; ++y)
                                     for (int xx = 0; xx < W; ++xx) {
                                         T dy = nd.grad.at4(n, c, y, xx);
                                         if (gx) gx->at4(n, c, y, xx) += dy * gv2[c] * inv_sigma[c];
                                         if (gg)
                                             (*gg)[c] += dy * (xv2.at4(n, c, y, xx) - rm[c]) *
                                                         inv_sigma[c];
                                         if (gb) (*gb)[c] += dy;
                                     }
                     });
}

// ---------------------------------------------------------------------------
// Pooling / slicing
// ---------------------------------------------------------------------------

// [N,C,H,W] -> [N,C], spatial mean
template <class T>
Var<T> global_avg_pool(Var<T> x) {
    const auto& xv = x.val();
    int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor<T> out({N, C});
    T inv = T(1) / static_cast<T>(H * W);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            T s = 0;
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) s += xv.at4(n, c, y, xx);
            out.at2(n, c) = s * inv;
        }
    int xi = x.idx;
    bool ng = x.g->node(x.idx).needs_grad;
    return x.g->make(std::move(out), ng,
                     [xi, N, C, H, W, inv](Graph<T>& g, typename Graph<T>::Node& nd) {
                         if (auto* gx = g.grad_buf(xi))
                             for (int n = 0; n < N; ++n)
                                 for (int c = 0; c < C; ++c) {
                                     T up = nd.grad.at2(n, c) * inv;
                                     for (int y = 0; y < H; ++y)
                                         for (int xx = 0; xx < W; ++xx)
                                             gx->at4(n, c, y, xx) += up;
                                 }
                     });
}

// Select one sample of a batched tensor: [N,C,H,W] -> [C,H,W]
template <class T>
Var<T> slice_sample(Var<T> x, int n) {
    const auto& xv = x.val();
    int C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    int64_t len = static_cast<int64_t>(C) * H * W;
    int64_t off = n * len;
    Tensor<T> out({C, H, W});
    std::copy(xv.v.begin() + off, xv.v.begin() + off + len, out.v.begin());
    int xi = x.idx;
    bool ng = x.g->node(x.idx).needs_grad;
    return x.g->make(std::move(out), ng, [xi, off, len](Graph<T>& g, typename Graph<T>::Node& nd) {
        if (auto* gx = g.grad_buf(xi))
            for (int64_t i = 0; i < len; ++i) gx->v[off + i] += nd.grad[i];
    });
}

// Partition [C,H,W] into a g x g grid of disjoint cells; each row of the
// output is the average feature vector of one cell, cells in row-major order.
template <class T>
Var<T> cell_avg_pool(Var<T> x, int grid) {
    const auto& xv = x.val();
    if (xv.rank() != 3) throw std::invalid_argument("cell_avg_pool: expected CHW");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    if (grid > H || grid > W) throw std::invalid_argument("cell_avg_pool: grid exceeds map side");
    Tensor<T> out({grid * grid, C});
    std::vector<int> ybnd(grid + 1), xbnd(grid + 1);
    for (int i = 0; i <= grid; ++i) {
        ybnd[i] = static_cast<int>(static_cast<int64_t>(i) * H / grid);
        xbnd[i] = static_cast<int>(static_cast<int64_t>(i) * W / grid);
    }
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            int cnt = (ybnd[gy + 1] - ybnd[gy]) * (xbnd[gx + 1] - xbnd[gx]);
            for (int c = 0; c < C; ++c) {
                T s = 0;
                for (int y = ybnd[gy]; y < ybnd[gy + 1]; ++y)
                    for (int xx = xbnd[gx]; xx < xbnd[gx + 1]; ++xx) s += xv.at3(c, y, xx);
                out.at2(gy * grid + gx, c) = s / static_cast<T>(cnt);
            }
        }
    int xi = x.idx;
    bool ng = x.g->node(x.idx).needs_grad;
    return x.g->make(std::move(out), ng,
                     [xi, C, grid, ybnd, xbnd](Graph<T>& g, typename Graph<T>::Node& nd) {
                         if (auto* gv = g.grad_buf(xi)) {
                             for (int gy = 0; gy < grid; ++gy)
                                 for (int gx = 0; gx < grid; ++gx) {
                                     int cnt = (ybnd[gy + 1] - ybnd[gy]) * (xbnd[gx + 1] - xbnd[gx]);
                                     T inv = T(1) / static_cast<T>(cnt);
                                     for (int c = 0; c < C; ++c) {
                                         T up = nd.grad.at2(gy * grid + gx, c) * inv;
                                         for (int y = ybnd[gy]; y < ybnd[gy + 1]; ++y)
                                             for (int xx = xbnd[gx]; xx < xbnd[gx + 1]; ++xx)
                                                 gv->at3(c, y, xx) += up;
                                     }
                                 }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Normalization / softmax / distribution ops
// ---------------------------------------------------------------------------

// Row-wise L2 normalization of [N,D]. Zero rows are an error (degenerate
// embedding) unless uniform_on_zero is set, in which case the row is left as
// zeros and flagged via the optional counter.
template <class T>
Var<T> l2_normalize_rows(Var<T> x, T min_norm = T(1e-12), bool zero_rows_ok = false) {
    const auto& xv = x.val();
    if (xv.rank() != 2) throw std::invalid_argument("l2_normalize_rows: expected 2-d");
    int N = xv.dim(0), D = xv.dim(1);
    Tensor<T> out({N, D});
    std::vector<T> inv_norm(N);
    for (int n = 0; n < N; ++n) {
        T s = 0;
        for (int d = 0; d < D; ++d) s += xv.at2(n, d) * xv.at2(n, d);
        T nrm = std::sqrt(s);
        if (nrm < min_norm) {
            // A degenerate row either aborts (embedding heads) or normalizes
            // to the zero vector with zero gradient (pooled region vectors).
            if (!zero_rows_ok) throw std::domain_error("l2_normalize_rows: zero-norm row");
            inv_norm[n] = T(0);
            continue;
        }
        inv_norm[n] = T(1) / nrm;
        for (int d = 0; d < D; ++d) out.at2(n, d) = xv.at2(n, d) * inv_norm[n];
    }
    int xi = x.idx;
    bool ng = x.g->node(x.idx).needs_grad;
    return x.g->make(std::move(out), ng,
                     [xi, N, D, inv_norm](Graph<T>& g, typename Graph<T>::Node& nd) {
                         if (auto* gx = g.grad_buf(xi)) {
                             for (int n = 0; n < N; ++n) {
                                 // y = x/|x| ; dx = (dy - y (y.dy)) / |x|
                                 T dot = 0;
                                 for (int d = 0; d < D; ++d) dot += nd.val.at2(n, d) * nd.grad.at2(n, d);
                                 for (int d = 0; d < D; ++d)
                                     gx->at2(n, d) +=
                                         (nd.grad.at2(n, d) - nd.val.at2(n, d) * dot) * inv_norm[n];
                             }
                         }
                     });
}

// Whole-tensor L2 normalization (any shape). Throws on (near-)zero input;
// callers that allow the all-zero case must check first.
template <class T>
Var<T> l2_normalize_all(Var<T> x, T min_norm = T(1e-12)) {
    const auto& xv = x.val();
    T s = 0;
    for (int64_t i = 0; i < xv.size(); ++i) s += xv[i] * xv[i];
    T nrm = std::sqrt(s);
    if (nrm < min_norm) throw std::domain_error("l2_normalize_all: zero-norm input");
    T inv = T(1) / nrm;
    Tensor<T> out(xv.shape);
    for (int64_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * inv;
    int xi = x.idx;
    bool ng = x.g->node(x.idx).needs_grad;
    return x.g->make(std::move(out), ng, [xi, inv](Graph<T>& g, typename Graph<T>::Node& nd) {
        if (auto* gx = g.grad_buf(xi)) {
            T dot = 0;
            for (int64_t i = 0; i < nd.val.size(); ++i) dot += nd.val[i] * nd.grad[i];
            for (int64_t i = 0; i < nd.val.size(); ++i)
                (*gx)[i] += (nd.grad[i] - nd.val[i] * dot) * inv;
        }
    });
}

// [C,H,W] -> [H,W], sum of |F| over channels (saliency before normalization).
template <class T>
Var<T> channel_abs_sum(Var<T> x) {
    const auto& xv = x.val();
    if (xv.rank() != 3) throw std::invalid_argument("channel_abs_sum: expected CHW");
    int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    Tensor<T> out({H, W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) out.at2(y, xx) += std::abs(xv.at3(c, y, xx));
    int xi = x.idx;
    bool ng = x.g->node(x.idx).needs_grad;
    return x.g->make(std::move(out), ng, [xi, C, H, W](Graph<T>& g, typename Graph<T>::Node& nd) {
        if (auto* gx = g.grad_buf(xi)) {
            const auto& xv2 = g.node(xi).val;
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        T s = xv2.at3(c, y, xx) > T(0) ? T(1) : (xv2.at3(c, y, xx) < T(0) ? T(-1) : T(0));
                        gx->at3(c, y, xx) += nd.grad.at2(y, xx) * s;
                    }
        }
    });
}

// Row-wise softmax with max subtraction, [N,K] -> [N,K].
template <class T>
Var<T> softmax_rows(Var<T> x) {
    const auto& xv = x.val();
    if (xv.rank() != 2) throw std::invalid_argument("softmax_rows: expected 2-d");
    int N = xv.dim(0), K = xv.dim(1);
    Tensor<T> out({N, K});
    for (int n = 0; n < N; ++n) {
        T mx = xv.at2(n, 0);
        for (int k = 1; k < K; ++k) mx = std::max(mx, xv.at2(n, k));
        T z = 0;
        for (int k = 0; k < K; ++k) {
            out.at2(n, k) = std::exp(xv.at2(n, k) - mx);
            z += out.at2(n, k);
        }
        for (int k = 0; k < K; ++k) out.at2(n, k) /= z;
    }
    int xi = x.idx;
    bool ng = x.g->node(x.idx).needs_grad;
    return x.g->make(std::move(out), ng, [xi, N, K](Graph<T>& g, typename Graph<T>::Node& nd) {
        if (auto* gx = g.grad_buf(xi)) {
            for (int n = 0; n < N; ++n) {
                T dot = 0;
                for (int k = 0; k < K; ++k) dot += nd.val.at2(n, k) * nd.grad.at2(n, k);
                for (int k = 0; k < K; ++k)
                    gx->at2(n, k) += nd.val.at2(n, k) * (nd.grad.at2(n, k) - dot);
            }
        }
    });
}

// Column mean of [N,K] -> [K].
template <class T>
Var<T> mean_rows(Var<T> x) {
    const auto& xv = x.val();
    int N = xv.dim(0), K = xv.dim(1);
    Tensor<T> out({K});
    T inv = T(1) / static_cast<T>(N);
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) out[k] += xv.at2(n, k) * inv;
    int xi = x.idx;
    bool ng = x.g->node(x.idx).needs_grad;
    return x.g->make(std::move(out), ng, [xi, N, K, inv](Graph<T>& g, typename Graph<T>::Node& nd) {
        if (auto* gx = g.grad_buf(xi))
            for (int n = 0; n < N; ++n)
                for (int k = 0; k < K; ++k) gx->at2(n, k) += nd.grad[k] * inv;
    });
}

// s[n] = sum_d x[n,d] * c[n,d] for a constant c.
template <class T>
Var<T> rowwise_dot_const(Var<T> x, const Tensor<T>& c) {
    const auto& xv = x.val();
    if (xv.shape != c.shape) throw std::invalid_argument("rowwise_dot_const: shape mismatch");
    int N = xv.dim(0), D = xv.dim(1);
    Tensor<T> out({N});
    for (int n = 0; n < N; ++n) {
        T s = 0;
        for (int d = 0; d < D; ++d) s += xv.at2(n, d) * c.at2(n, d);
        out[n] = s;
    }
    int xi = x.idx;
    bool ng = x.g->node(x.idx).needs_grad;
    Tensor<T> cc = c;
    return x.g->make(std::move(out), ng, [xi, N, D, cc](Graph<T>& g, typename Graph<T>::Node& nd) {
        if (auto* gx = g.grad_buf(xi))
            for (int n = 0; n < N; ++n)
                for (int d = 0; d < D; ++d) gx->at2(n, d) += nd.grad[n] * cc.at2(n, d);
    });
}

// Symmetric KL between a probability vector on the tape and a constant one:
//   L = sum_k (q[k] - p[k]) * ln((q[k]+eps)/(p[k]+eps))
// The clamp eps keeps the logarithm and its gradient bounded near zero mass.
template <class T>
Var<T> sym_kl_vs_const(Var<T> q, const Tensor<T>& p, T eps) {
    const auto& qv = q.val();
    if (qv.shape != p.shape) throw std::invalid_argument("sym_kl_vs_const: shape mismatch");
    int K = qv.dim(0);
    T L = 0;
    for (int k = 0; k < K; ++k)
        L += (qv[k] - p[k]) * std::log((qv[k] + eps) / (p[k] + eps));
    int qi = q.idx;
    bool ng = q.g->node(q.idx).needs_grad;
    Tensor<T> pc = p;
    return q.g->make(Tensor<T>::scalar(L), ng,
                     [qi, K, pc, eps](Graph<T>& g, typename Graph<T>::Node& nd) {
                         if (auto* gq = g.grad_buf(qi)) {
                             const auto& qv2 = g.node(qi).val;
                             T up = nd.grad[0];
                             for (int k = 0; k < K; ++k) {
                                 T lg = std::log((qv2[k] + eps) / (pc[k] + eps));
                                 (*gq)[k] += up * (lg + (qv2[k] - pc[k]) / (qv2[k] + eps));
                             }
                         }
                     });
}

}  // namespace sarl::ad
