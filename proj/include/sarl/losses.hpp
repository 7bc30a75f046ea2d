#pragma once

#include "sarl/augment.hpp"
#include "sarl/encoder.hpp"
#include "sarl/nn_ops.hpp"

namespace sarl {

// Loss hyperparameters. The subset switches are the ablation controls; a
// disabled term is not computed and reports exactly zero.
struct LossConfig {
    double lambda_sal = 0.10;
    double lambda_ppda = 0.05;
    double lambda_ram = 0.02;
    int num_prototypes = 32;
    double temperature = 0.1;
    int ppda_grid = 7;  // clamped to the layer-3 side
    int ram_grid = 6;   // clamped to the layer-3 side
    bool use_sal = true, use_ppda = true, use_ram = true;
    bool symmetrize_spatial = true;
    double kl_eps = 1e-8;
};

template <class T>
struct LossReport {
    T global = 0, sal = 0, ppda = 0, ram = 0, total = 0;
    T lambda_sal = 0, lambda_ppda = 0, lambda_ram = 0;
    int64_t sal_empty_masks = 0;   // SAL direction evaluations with |M| = 0
    int64_t ram_no_valid_pairs = 0;
};

// ---------------------------------------------------------------------------
// Global loss (BYOL objective): symmetrized MSE of L2-normalized vectors.
// Each direction equals mean_n (2 - 2 cos); gradients reach predictions only.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> l2_normalize_rows_plain(const Tensor<T>& x) {
    Tensor<T> out = x;
    int N = x.dim(0), D = x.dim(1);
    for (int n = 0; n < N; ++n) {
        T s = 0;
        for (int d = 0; d < D; ++d) s += x.at2(n, d) * x.at2(n, d);
        T nrm = std::sqrt(s);
        if (nrm < T(1e-12)) throw std::domain_error("global_loss: zero-norm target projection");
        for (int d = 0; d < D; ++d) out.at2(n, d) = x.at2(n, d) / nrm;
    }
    return out;
}

template <class T>
ad::Var<T> global_loss(ad::Var<T> pred1, const Tensor<T>& tgt_proj2, ad::Var<T> pred2,
                       const Tensor<T>& tgt_proj1) {
    Tensor<T> z2 = l2_normalize_rows_plain(tgt_proj2);
    Tensor<T> z1 = l2_normalize_rows_plain(tgt_proj1);
    ad::Var<T> q1 = ad::l2_normalize_rows(pred1);
    ad::Var<T> q2 = ad::l2_normalize_rows(pred2);
    // mean_n ||q - z||^2 = 2 - 2 mean_n <q, z>
    ad::Var<T> t1 = ad::add_scalar(ad::scale(ad::mean(ad::rowwise_dot_const(q1, z2)), T(-2)), T(2));
    ad::Var<T> t2 = ad::add_scalar(ad::scale(ad::mean(ad::rowwise_dot_const(q2, z1)), T(-2)), T(2));
    return ad::add(t1, t2);
}

// ---------------------------------------------------------------------------
// SAL: saliency alignment over the warped overlap
// ---------------------------------------------------------------------------

// Channel-wise L1 norm, globally L2-normalized. All-zero maps skip the
// normalization (flagged via *all_zero).
template <class T>
ad::Var<T> saliency(ad::Var<T> f_chw, bool* all_zero = nullptr) {
    ad::Var<T> s = ad::channel_abs_sum(f_chw);
    T mx = 0;
    for (int64_t i = 0; i < s.val().size(); ++i) mx = std::max(mx, s.val()[i]);
    if (mx <= T(0)) {
        if (all_zero) *all_zero = true;
        return s;
    }
    if (all_zero) *all_zero = false;
    return ad::l2_normalize_all(s);
}

template <class T>
Tensor<T> saliency_plain(const Tensor<T>& f_chw) {
    int C = f_chw.dim(0), H = f_chw.dim(1), W = f_chw.dim(2);
    Tensor<T> s({H, W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) s.at2(y, x) += std::abs(f_chw.at3(c, y, x));
    T n2 = 0;
    for (auto v : s.v) n2 += v * v;
    if (n2 > T(0)) {
        T inv = T(1) / std::sqrt(n2);
        for (auto& v : s.v) v *= inv;
    }
    return s;
}

template <class T>
T bilinear_at(const Tensor<T>& grid2d, double y, double x) {
    int H = grid2d.dim(0), W = grid2d.dim(1);
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    double fx = x - x0, fy = y - y0;
    auto cl = [](int v, int hi) { return std::clamp(v, 0, hi - 1); };
    T v00 = grid2d.at2(cl(y0, H), cl(x0, W));
    T v01 = grid2d.at2(cl(y0, H), cl(x0 + 1, W));
    T v10 = grid2d.at2(cl(y0 + 1, H), cl(x0, W));
    T v11 = grid2d.at2(cl(y0 + 1, H), cl(x0 + 1, W));
    return static_cast<T>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                          fy * ((1 - fx) * v10 + fx * v11));
}

// One direction of SAL at one layer: online saliency (on the tape) against a
// warped, bilinearly sampled stop-gradient target saliency.
template <class T>
ad::Var<T> sal_loss(ad::Var<T> sal_online, const Tensor<T>& sal_target, const AffineWarp& warp,
                    int64_t* empty_mask_counter) {
    int H = sal_online.val().dim(0), W = sal_online.val().dim(1);
    int Ht = sal_target.dim(0), Wt = sal_target.dim(1);
    std::vector<int64_t> idx;
    std::vector<T> tgt;
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            MappedCoord mc = map_coords(warp, i, j, H, W, Ht, Wt);
            if (!mc.in_bounds) continue;
            idx.push_back(static_cast<int64_t>(i) * W + j);
            tgt.push_back(bilinear_at(sal_target, mc.y, mc.x));
        }
    if (idx.empty()) {
        if (empty_mask_counter) ++(*empty_mask_counter);
        return sal_online.g->constant(Tensor<T>::scalar(T(0)));
    }
    int n_tgt = static_cast<int>(tgt.size());
    Tensor<T> tgt_t({n_tgt}, std::move(tgt));
    ad::Var<T> picks = ad::gather(sal_online, std::move(idx));
    return ad::mean(ad::square(ad::sub_const(picks, tgt_t)));
}

// ---------------------------------------------------------------------------
// PPDA: prototype part-distribution alignment
// ---------------------------------------------------------------------------

// Soft assignment of patch rows to prototypes. Rows and prototypes are
// L2-normalized internally; zero-norm patches fall back to the uniform
// distribution (flagged through zero_rows).
template <class T>
ad::Var<T> soft_assign(ad::Var<T> patches, ad::Var<T> bank, T temperature,
                       std::vector<int>* zero_rows = nullptr) {
    // Zero patch rows would break the normalization; route them around it by
    // zeroing their logits, which yields the uniform row after softmax.
    const auto& pv = patches.val();
    int N = pv.dim(0), D = pv.dim(1);
    std::vector<int> zeros;
    for (int n = 0; n < N; ++n) {
        T s = 0;
        for (int d = 0; d < D; ++d) s += pv.at2(n, d) * pv.at2(n, d);
        if (std::sqrt(s) < T(1e-12)) zeros.push_back(n);
    }
    if (zero_rows) *zero_rows = zeros;
    ad::Var<T> pn;
    if (zeros.empty()) {
        pn = ad::l2_normalize_rows(patches);
    } else {
        // Lift zero rows by a basis vector so normalization is defined; their
        // logits are then all equal only if prototypes are, so instead keep
        // the uniform guarantee by masking logits below.
        Tensor<T> lift(pv.shape);
        for (int n : zeros) lift.at2(n, 0) = T(1);
        pn = ad::l2_normalize_rows(ad::add(patches, patches.g->constant(std::move(lift))));
    }
    ad::Var<T> bn = ad::l2_normalize_rows(bank);
    ad::Var<T> logits = ad::scale(ad::matmul_nt(pn, bn), T(1) / temperature);
    if (!zeros.empty()) {
        // Zero the affected rows' logits: uniform assignment for dead patches.
        Tensor<T> mask = Tensor<T>::full(logits.val().shape, T(1));
        int K = logits.val().dim(1);
        for (int n : zeros)
            for (int k = 0; k < K; ++k) mask.at2(n, k) = T(0);
        logits = ad::mul(logits, logits.g->constant(std::move(mask)));
    }
    return ad::softmax_rows(logits);
}

template <class T>
Tensor<T> soft_assign_plain(const Tensor<T>& patches, const Tensor<T>& bank, T temperature) {
    int N = patches.dim(0), D = patches.dim(1), K = bank.dim(0);
    Tensor<T> pn = patches, bn = bank;
    for (int n = 0; n < N; ++n) {
        T s = 0;
        for (int d = 0; d < D; ++d) s += pn.at2(n, d) * pn.at2(n, d);
        T nrm = std::sqrt(s);
        if (nrm < T(1e-12)) {
            for (int d = 0; d < D; ++d) pn.at2(n, d) = T(0);
        } else {
            for (int d = 0; d < D; ++d) pn.at2(n, d) /= nrm;
        }
    }
    for (int k = 0; k < K; ++k) {
        T s = 0;
        for (int d = 0; d < D; ++d) s += bn.at2(k, d) * bn.at2(k, d);
        T nrm = std::max(std::sqrt(s), T(1e-12));
        for (int d = 0; d < D; ++d) bn.at2(k, d) /= nrm;
    }
    Tensor<T> q({N, K});
    for (int n = 0; n < N; ++n) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int k = 0; k < K; ++k) {
            T dot = 0;
            for (int d = 0; d < D; ++d) dot += pn.at2(n, d) * bn.at2(k, d);
            q.at2(n, k) = dot / temperature;
            mx = std::max(mx, q.at2(n, k));
        }
        T z = 0;
        for (int k = 0; k < K; ++k) {
            q.at2(n, k) = std::exp(q.at2(n, k) - mx);
            z += q.at2(n, k);
        }
        for (int k = 0; k < K; ++k) q.at2(n, k) /= z;
    }
    return q;
}

template <class T>
Tensor<T> cell_avg_pool_plain(const Tensor<T>& f_chw, int grid) {
    int C = f_chw.dim(0), H = f_chw.dim(1), W = f_chw.dim(2);
    Tensor<T> out({grid * grid, C});
    std::vector<int> yb(grid + 1), xb(grid + 1);
    for (int i = 0; i <= grid; ++i) {
        yb[i] = static_cast<int>(static_cast<int64_t>(i) * H / grid);
        xb[i] = static_cast<int>(static_cast<int64_t>(i) * W / grid);
    }
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            int cnt = (yb[gy + 1] - yb[gy]) * (xb[gx + 1] - xb[gx]);
            for (int c = 0; c < C; ++c) {
                T s = 0;
                for (int y = yb[gy]; y < yb[gy + 1]; ++y)
                    for (int x = xb[gx]; x < xb[gx + 1]; ++x) s += f_chw.at3(c, y, x);
                out.at2(gy * grid + gx, c) = s / static_cast<T>(cnt);
            }
        }
    return out;
}

// Image-level prototype distribution of a stop-gradient feature map.
template <class T>
Tensor<T> part_distribution_plain(const Tensor<T>& f_chw, const Tensor<T>& bank, T temperature,
                                  int grid) {
    int g = std::min({grid, f_chw.dim(1), f_chw.dim(2)});
    Tensor<T> q = soft_assign_plain(cell_avg_pool_plain(f_chw, g), bank, temperature);
    int N = q.dim(0), K = q.dim(1);
    Tensor<T> out({K});
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) out[k] += q.at2(n, k) / static_cast<T>(N);
    return out;
}

// One direction of PPDA: symmetric KL between the online view's part
// distribution and the target view's (constant).
// The target view's distribution is a stop-gradient quantity; it is computed
// from bank_target (a frozen snapshot, defaulting to the live bank values).
template <class T>
ad::Var<T> ppda_loss(ad::Var<T> f_online, const Tensor<T>& f_target, ad::Var<T> bank,
                     T temperature, int grid, T kl_eps,
                     const Tensor<T>* bank_target = nullptr) {
    if (f_online.val().dim(0) != bank.val().dim(1) || f_target.dim(0) != bank.val().dim(1))
        throw std::invalid_argument("ppda_loss: feature/bank channel mismatch");
    int g = std::min({grid, f_online.val().dim(1), f_online.val().dim(2)});
    ad::Var<T> patches = ad::cell_avg_pool(f_online, g);
    ad::Var<T> q = soft_assign(patches, bank, temperature);
    ad::Var<T> q_img = ad::mean_rows(q);
    Tensor<T> q_tgt = part_distribution_plain(f_target, bank_target ? *bank_target : bank.val(),
                                              temperature, grid);
    return ad::sym_kl_vs_const(q_img, q_tgt, kl_eps);
}

// ---------------------------------------------------------------------------
// RAM: region affinity matching
// ---------------------------------------------------------------------------

// Pairwise cosine distances between pooled, L2-normalized region vectors.
// Zero-norm regions (all-ReLU-dead cells) normalize to the zero vector via
// the clamped denominator, so their distances degrade to 1 instead of
// aborting a long training run.
template <class T>
ad::Var<T> region_affinity(ad::Var<T> f_chw, int grid) {
    int g = std::min({grid, f_chw.val().dim(1), f_chw.val().dim(2)});
    ad::Var<T> regions = ad::cell_avg_pool(f_chw, g);
    ad::Var<T> rn = ad::l2_normalize_rows(regions, T(1e-12), /*zero_rows_ok=*/true);
    ad::Var<T> gram = ad::matmul_nt(rn, rn);
    return ad::add_scalar(ad::scale(gram, T(-1)), T(1));
}

template <class T>
Tensor<T> region_affinity_plain(const Tensor<T>& f_chw, int grid) {
    int g = std::min({grid, f_chw.dim(1), f_chw.dim(2)});
    Tensor<T> r = cell_avg_pool_plain(f_chw, g);
    int P = r.dim(0), C = r.dim(1);
    for (int p = 0; p < P; ++p) {
        T s = 0;
        for (int c = 0; c < C; ++c) s += r.at2(p, c) * r.at2(p, c);
        T nrm = std::sqrt(s);
        if (nrm < T(1e-12)) {
            for (int c = 0; c < C; ++c) r.at2(p, c) = T(0);
            continue;
        }
        for (int c = 0; c < C; ++c) r.at2(p, c) /= nrm;
    }
    Tensor<T> a({P, P});
    for (int i = 0; i < P; ++i)
        for (int j = 0; j < P; ++j) {
            T dot = 0;
            for (int c = 0; c < C; ++c) dot += r.at2(i, c) * r.at2(j, c);
            a.at2(i, j) = T(1) - dot;
        }
    return a;
}

// One direction of RAM. Region indices are matched through the warp at grid
// resolution; pairs with an out-of-bounds endpoint are excluded and the
// divisor becomes the valid-pair count.
template <class T>
ad::Var<T> ram_loss(ad::Var<T> f_online, const Tensor<T>& f_target, const AffineWarp& warp,
                    int grid, int64_t* degenerate_counter) {
    int g = std::min({grid, f_online.val().dim(1), f_online.val().dim(2)});
    int gt = std::min({grid, f_target.dim(1), f_target.dim(2)});
    ad::Var<T> a_on = region_affinity(f_online, g);
    Tensor<T> a_tg = region_affinity_plain(f_target, gt);

    std::vector<int> pi(g * g, -1);
    for (int i = 0; i < g; ++i)
        for (int j = 0; j < g; ++j) {
            MappedCoord mc = map_coords(warp, i, j, g, g, gt, gt);
            if (mc.in_bounds) pi[i * g + j] = mc.ci * gt + mc.cj;
        }
    std::vector<int64_t> idx;
    std::vector<T> tgt;
    int P = g * g;
    for (int i = 0; i < P; ++i) {
        if (pi[i] < 0) continue;
        for (int j = 0; j < P; ++j) {
            if (pi[j] < 0) continue;
            idx.push_back(static_cast<int64_t>(i) * P + j);
            tgt.push_back(a_tg.at2(pi[i], pi[j]));
        }
    }
    if (idx.empty()) {
        if (degenerate_counter) ++(*degenerate_counter);
        return f_online.g->constant(Tensor<T>::scalar(T(0)));
    }
    int n_tgt = static_cast<int>(tgt.size());
    Tensor<T> tgt_t({n_tgt}, std::move(tgt));
    ad::Var<T> picks = ad::gather(a_on, std::move(idx));
    return ad::mean(ad::square(ad::sub_const(picks, tgt_t)));
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

template <class T>
struct CombinedLossInputs {
    PyramidVars<T>* online_v1 = nullptr;
    PyramidVars<T>* online_v2 = nullptr;
    const Pyramid<T>* target_v1 = nullptr;
    const Pyramid<T>* target_v2 = nullptr;
    const std::vector<AffineWarp>* warps_12 = nullptr;  // per sample
    const std::vector<AffineWarp>* warps_21 = nullptr;
    ad::Var<T> bank;
    // Optional frozen bank snapshot for the target-side part distributions
    // (gradient-audit hook); defaults to the live bank values.
    const Tensor<T>* target_bank = nullptr;
};

namespace loss_detail {

template <class T>
Tensor<T> slice_plain(const Tensor<T>& x, int n) {
    int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t len = static_cast<int64_t>(C) * H * W;
    Tensor<T> out({C, H, W});
    std::copy(x.v.begin() + n * len, x.v.begin() + (n + 1) * len, out.v.begin());
    return out;
}

}  // namespace loss_detail

// Full objective: global term plus lambda-weighted spatial terms.
// Spatial terms are averaged over the batch; when symmetrize_spatial is set
// each is the average of the two view-role assignments.
template <class T>
ad::Var<T> combined_loss(const CombinedLossInputs<T>& in, const LossConfig& cfg,
                         LossReport<T>& report) {
    ad::Graph<T>& g = *in.online_v1->rep.g;
    int batch = in.online_v1->rep.val().dim(0);
    report.lambda_sal = static_cast<T>(cfg.lambda_sal);
    report.lambda_ppda = static_cast<T>(cfg.lambda_ppda);
    report.lambda_ram = static_cast<T>(cfg.lambda_ram);

    ad::Var<T> total = global_loss(in.online_v1->pred, in.target_v2->proj, in.online_v2->pred,
                                   in.target_v1->proj);
    report.global = total.val()[0];

    auto batch_mean = [&](std::vector<ad::Var<T>> terms) {
        ad::Var<T> acc = terms[0];
        for (size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
        return ad::scale(acc, T(1) / static_cast<T>(terms.size()));
    };

    if (cfg.use_sal) {
        std::vector<ad::Var<T>> layer_terms;
        struct LayerRef {
            ad::Var<T> on1, on2;
            const Tensor<T>*tg1, *tg2;
        };
        std::vector<LayerRef> layers = {
            {in.online_v1->f2, in.online_v2->f2, &in.target_v1->f2, &in.target_v2->f2},
            {in.online_v1->f3, in.online_v2->f3, &in.target_v1->f3, &in.target_v2->f3},
            {in.online_v1->f4, in.online_v2->f4, &in.target_v1->f4, &in.target_v2->f4}};
        for (auto& L : layers) {
            std::vector<ad::Var<T>> per_sample;
            for (int n = 0; n < batch; ++n) {
                ad::Var<T> s_on1 = saliency(ad::slice_sample(L.on1, n));
                Tensor<T> s_tg2 = saliency_plain(loss_detail::slice_plain(*L.tg2, n));
                ad::Var<T> d12 =
                    sal_loss(s_on1, s_tg2, (*in.warps_12)[n], &report.sal_empty_masks);
                if (cfg.symmetrize_spatial) {
                    ad::Var<T> s_on2 = saliency(ad::slice_sample(L.on2, n));
                    Tensor<T> s_tg1 = saliency_plain(loss_detail::slice_plain(*L.tg1, n));
                    ad::Var<T> d21 =
                        sal_loss(s_on2, s_tg1, (*in.warps_21)[n], &report.sal_empty_masks);
                    per_sample.push_back(ad::scale(ad::add(d12, d21), T(0.5)));
                } else {
                    per_sample.push_back(d12);
                }
            }
            layer_terms.push_back(batch_mean(std::move(per_sample)));
        }
        ad::Var<T> sal = batch_mean(std::move(layer_terms));  // unweighted mean over layers
        report.sal = sal.val()[0];
        total = ad::add(total, ad::scale(sal, static_cast<T>(cfg.lambda_sal)));
    }

    if (cfg.use_ppda) {
        std::vector<ad::Var<T>> per_sample;
        for (int n = 0; n < batch; ++n) {
            ad::Var<T> d12 = ppda_loss(ad::slice_sample(in.online_v1->f3, n),
                                       loss_detail::slice_plain(in.target_v2->f3, n), in.bank,
                                       static_cast<T>(cfg.temperature), cfg.ppda_grid,
                                       static_cast<T>(cfg.kl_eps), in.target_bank);
            if (cfg.symmetrize_spatial) {
                ad::Var<T> d21 = ppda_loss(ad::slice_sample(in.online_v2->f3, n),
                                           loss_detail::slice_plain(in.target_v1->f3, n), in.bank,
                                           static_cast<T>(cfg.temperature), cfg.ppda_grid,
                                           static_cast<T>(cfg.kl_eps), in.target_bank);
                per_sample.push_back(ad::scale(ad::add(d12, d21), T(0.5)));
            } else {
                per_sample.push_back(d12);
            }
        }
        ad::Var<T> ppda = batch_mean(std::move(per_sample));
        report.ppda = ppda.val()[0];
        total = ad::add(total, ad::scale(ppda, static_cast<T>(cfg.lambda_ppda)));
    }

    if (cfg.use_ram) {
        std::vector<ad::Var<T>> per_sample;
        for (int n = 0; n < batch; ++n) {
            ad::Var<T> d12 = ram_loss(ad::slice_sample(in.online_v1->f3, n),
                                      loss_detail::slice_plain(in.target_v2->f3, n),
                                      (*in.warps_12)[n], cfg.ram_grid,
                                      &report.ram_no_valid_pairs);
            if (cfg.symmetrize_spatial) {
                ad::Var<T> d21 = ram_loss(ad::slice_sample(in.online_v2->f3, n),
                                          loss_detail::slice_plain(in.target_v1->f3, n),
                                          (*in.warps_21)[n], cfg.ram_grid,
                                          &report.ram_no_valid_pairs);
                per_sample.push_back(ad::scale(ad::add(d12, d21), T(0.5)));
            } else {
                per_sample.push_back(d12);
            }
        }
        ad::Var<T> ram = batch_mean(std::move(per_sample));
        report.ram = ram.val()[0];
        total = ad::add(total, ad::scale(ram, static_cast<T>(cfg.lambda_ram)));
    }

    report.total = total.val()[0];
    (void)g;
    return total;
}

}  // namespace sarl
