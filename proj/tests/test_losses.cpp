#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "sarl/losses.hpp"

using namespace sarl;

namespace {

using D = double;

Tensor<D> randn(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<D> t(std::move(shape));
    for (auto& v : t.v) v = rng.normal() * scale;
    return t;
}

Tensor<D> randpos(std::vector<int> shape, Rng& rng) {
    Tensor<D> t(std::move(shape));
    for (auto& v : t.v) v = 0.1 + rng.uniform();
    return t;
}

AffineWarp identity_warp() {
    ViewParams p;
    p.crop = {0, 0, 64, 64};
    return warp_between(p, p);
}

AffineWarp disjoint_warp() {
    ViewParams p1, p2;
    p1.crop = {0, 0, 30, 30};
    p2.crop = {60, 60, 30, 30};
    return warp_between(p1, p2);
}

// Independent brute-force affinity oracle: naive pooling + cosine distance.
Tensor<D> affinity_oracle(const Tensor<D>& f, int grid) {
    int C = f.dim(0), H = f.dim(1), W = f.dim(2);
    int g = std::min({grid, H, W});
    int P = g * g;
    std::vector<std::vector<D>> v(P, std::vector<D>(C, 0.0));
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            int y0 = gy * H / g, y1 = (gy + 1) * H / g;
            int x0 = gx * W / g, x1 = (gx + 1) * W / g;
            for (int c = 0; c < C; ++c) {
                D s = 0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) s += f.at3(c, y, x);
                v[gy * g + gx][c] = s / ((y1 - y0) * (x1 - x0));
            }
        }
    for (auto& row : v) {
        D n = std::sqrt(std::inner_product(row.begin(), row.end(), row.begin(), 0.0));
        for (auto& x : row) x /= n;
    }
    Tensor<D> a({P, P});
    for (int i = 0; i < P; ++i)
        for (int j = 0; j < P; ++j)
            a.at2(i, j) =
                1.0 - std::inner_product(v[i].begin(), v[i].end(), v[j].begin(), 0.0);
    return a;
}

D sym_kl_oracle(const std::vector<D>& p, const std::vector<D>& q, D eps) {
    // KL(p||q) + KL(q||p) with the additive-eps clamp inside the logarithms
    D s = 0;
    for (size_t i = 0; i < p.size(); ++i) {
        D lg = std::log((p[i] + eps) / (q[i] + eps));
        s += p[i] * lg - q[i] * lg;
    }
    return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// global objective
// ---------------------------------------------------------------------------

TEST_CASE("global objective endpoints and closed form") {
    ad::Graph<D> g;
    Tensor<D> a({1, 3});
    a.v = {1, 2, 2};
    Tensor<D> b({1, 3});
    b.v = {0.5, 1, 1};  // collinear with a
    CHECK(global_loss(g.leaf(a), b, g.leaf(b), a).val()[0] == doctest::Approx(0.0).epsilon(1e-12));

    Tensor<D> na = a;
    for (auto& v : na.v) v = -v;
    ad::Graph<D> g2;
    CHECK(global_loss(g2.leaf(na), a, g2.leaf(na), a).val()[0] ==
          doctest::Approx(8.0).epsilon(1e-12));

    // random instances match 2 - 2 cos per direction
    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<D> p1 = randn({2, 6}, rng), p2 = randn({2, 6}, rng);
        Tensor<D> z1 = randn({2, 6}, rng), z2 = randn({2, 6}, rng);
        ad::Graph<D> gg;
        D got = global_loss(gg.leaf(p1), z2, gg.leaf(p2), z1).val()[0];
        auto cosv = [](const Tensor<D>& x, const Tensor<D>& z, int n) {
            D xx = 0, zz = 0, xz = 0;
            for (int d = 0; d < x.dim(1); ++d) {
                xx += x.at2(n, d) * x.at2(n, d);
                zz += z.at2(n, d) * z.at2(n, d);
                xz += x.at2(n, d) * z.at2(n, d);
            }
            return xz / std::sqrt(xx * zz);
        };
        D expect = 0;
        for (int n = 0; n < 2; ++n)
            expect += (2 - 2 * cosv(p1, z2, n)) / 2 + (2 - 2 * cosv(p2, z1, n)) / 2;
        CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("global objective rejects zero-norm targets and ignores target perturbations in "
          "the gradient path") {
    ad::Graph<D> g;
    Rng rng(42);
    Tensor<D> p = randn({2, 4}, rng), z = randn({2, 4}, rng);
    Tensor<D> z0 = z;
    for (int d = 0; d < 4; ++d) z0.at2(1, d) = 0;
    CHECK_THROWS_AS(global_loss(g.leaf(p), z0, g.leaf(p), z), std::domain_error);

    // perturbing a target changes the value (no gradient variable even exists)
    ad::Graph<D> g2;
    D base = global_loss(g2.leaf(p), z, g2.leaf(p), z).val()[0];
    Tensor<D> zp = z;
    zp[0] += 0.1;
    ad::Graph<D> g3;
    D moved = global_loss(g3.leaf(p), zp, g3.leaf(p), z).val()[0];
    CHECK(std::abs(base - moved) > 1e-9);
}

// ---------------------------------------------------------------------------
// SAL
// ---------------------------------------------------------------------------

TEST_CASE("saliency map structure") {
    // single nonzero entry -> one-hot with value 1
    Tensor<D> f({4, 5, 5});
    f.at3(1, 2, 3) = 5.0;
    ad::Graph<D> g;
    Tensor<D> s = saliency(g.constant(f)).val();
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 5; ++x)
            CHECK(s.at2(y, x) == doctest::Approx(y == 2 && x == 3 ? 1.0 : 0.0).epsilon(1e-12));

    // scale invariance and unit norm
    Rng rng(43);
    Tensor<D> r = randn({4, 5, 5}, rng);
    Tensor<D> r3 = r;
    for (auto& v : r3.v) v *= 3.0;
    ad::Graph<D> g2;
    Tensor<D> sa = saliency(g2.constant(r)).val();
    Tensor<D> sb = saliency(g2.constant(r3)).val();
    D n2 = 0;
    for (int64_t i = 0; i < sa.size(); ++i) {
        CHECK(sa[i] == doctest::Approx(sb[i]).epsilon(1e-12));
        n2 += sa[i] * sa[i];
    }
    CHECK(std::sqrt(n2) == doctest::Approx(1.0).epsilon(1e-9));
    // plain path agrees with the tape path
    Tensor<D> sp = saliency_plain(r);
    for (int64_t i = 0; i < sa.size(); ++i) CHECK(sp[i] == doctest::Approx(sa[i]).epsilon(1e-12));

    // all-zero map is flagged and returned unnormalized
    bool flag = false;
    ad::Graph<D> g3;
    Tensor<D> z = saliency(g3.constant(Tensor<D>({2, 3, 3})), &flag).val();
    CHECK(flag);
    for (auto v : z.v) CHECK(v == 0.0);
}

TEST_CASE("sal term: identity zero, one-cell-shift hand oracle, empty overlap") {
    Rng rng(44);
    Tensor<D> s_on = randpos({4, 4}, rng);

    ad::Graph<D> g;
    int64_t empty = 0;
    CHECK(sal_loss(g.leaf(s_on), s_on, identity_warp(), &empty).val()[0] ==
          doctest::Approx(0.0).epsilon(1e-12));
    CHECK(empty == 0);

    // crop shifted right by a quarter: u' = u - 0.25, one 4x4 cell exactly
    ViewParams p1, p2;
    p1.crop = {0, 0, 64, 64};
    p2.crop = {0, 16, 64, 64};
    AffineWarp shift = warp_between(p1, p2);
    Tensor<D> s_tg = randpos({4, 4}, rng);
    ad::Graph<D> g2;
    D got = sal_loss(g2.leaf(s_on), s_tg, shift, &empty).val()[0];
    D expect = 0;
    for (int i = 0; i < 4; ++i)
        for (int j = 1; j < 4; ++j) {
            D d = s_on.at2(i, j) - s_tg.at2(i, j - 1);
            expect += d * d;
        }
    expect /= 12.0;
    CHECK(got == doctest::Approx(expect).epsilon(1e-9));
    CHECK(empty == 0);

    // disjoint crops: defined zero plus counter
    ad::Graph<D> g3;
    CHECK(sal_loss(g3.leaf(s_on), s_tg, disjoint_warp(), &empty).val()[0] == 0.0);
    CHECK(empty == 1);
}

// ---------------------------------------------------------------------------
// PPDA
// ---------------------------------------------------------------------------

TEST_CASE("soft assignment limits and normalization") {
    // well-separated prototypes, cold temperature -> near one-hot
    Tensor<D> bank({4, 6});
    for (int k = 0; k < 4; ++k) bank.at2(k, k) = 2.0;
    Tensor<D> patches({4, 6});
    for (int n = 0; n < 4; ++n) patches.at2(n, n) = 0.7;
    ad::Graph<D> g;
    Tensor<D> q = soft_assign(g.constant(patches), g.constant(bank), 0.01).val();
    for (int n = 0; n < 4; ++n) CHECK(q.at2(n, n) > 0.99);

    // identical prototypes -> uniform rows
    Tensor<D> same({3, 6});
    for (int k = 0; k < 3; ++k)
        for (int d = 0; d < 6; ++d) same.at2(k, d) = d == 0 ? 1.5 : 0.25;
    Rng rng(45);
    Tensor<D> rp = randn({5, 6}, rng);
    ad::Graph<D> g2;
    Tensor<D> qu = soft_assign(g2.constant(rp), g2.constant(same), 0.1).val();
    for (int64_t i = 0; i < qu.size(); ++i)
        CHECK(qu[i] == doctest::Approx(1.0 / 3).epsilon(1e-9));

    // rows are probability vectors; agrees with the plain implementation
    Tensor<D> rb = randn({4, 6}, rng);
    ad::Graph<D> g3;
    Tensor<D> qr = soft_assign(g3.constant(rp), g3.constant(rb), 0.1).val();
    Tensor<D> qp = soft_assign_plain(rp, rb, 0.1);
    for (int n = 0; n < 5; ++n) {
        D s = 0;
        for (int k = 0; k < 4; ++k) {
            CHECK(qr.at2(n, k) >= 0.0);
            CHECK(qr.at2(n, k) == doctest::Approx(qp.at2(n, k)).epsilon(1e-12));
            s += qr.at2(n, k);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }

    // zero-norm patch rows are flagged and assigned uniformly
    Tensor<D> pz = rp;
    for (int d = 0; d < 6; ++d) pz.at2(2, d) = 0;
    std::vector<int> zeros;
    ad::Graph<D> g4;
    Tensor<D> qz = soft_assign(g4.leaf(pz), g4.constant(rb), 0.1, &zeros).val();
    CHECK(zeros == std::vector<int>{2});
    for (int k = 0; k < 4; ++k) CHECK(qz.at2(2, k) == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("symmetric KL matches the hand example and a brute-force oracle") {
    Tensor<D> q({2});
    q.v = {0.7, 0.3};
    Tensor<D> p({2});
    p.v = {0.3, 0.7};
    ad::Graph<D> g;
    CHECK(ad::sym_kl_vs_const(g.leaf(q), p, 1e-8).val()[0] ==
          doctest::Approx(0.4 * std::log(0.7 / 0.3) * 2).epsilon(1e-4));
    CHECK(ad::sym_kl_vs_const(g.leaf(q), p, 1e-8).val()[0] == doctest::Approx(0.6779).epsilon(1e-3));

    Rng rng(46);
    for (int trial = 0; trial < 100; ++trial) {
        int K = 2 + int(rng.uniform() * 6);
        std::vector<D> a(K), b(K);
        D sa = 0, sb = 0;
        for (int k = 0; k < K; ++k) {
            a[k] = rng.uniform() + 1e-3;
            b[k] = rng.uniform() + 1e-3;
            sa += a[k];
            sb += b[k];
        }
        Tensor<D> ta({K}), tb({K});
        for (int k = 0; k < K; ++k) {
            ta[k] = a[k] / sa;
            tb[k] = b[k] / sb;
        }
        ad::Graph<D> g2;
        D got = ad::sym_kl_vs_const(g2.leaf(ta), tb, 1e-8).val()[0];
        CHECK(got == doctest::Approx(sym_kl_oracle(ta.v, tb.v, 1e-8)).epsilon(1e-12));
    }
}

TEST_CASE("ppda term identities and invariances") {
    Rng rng(47);
    Tensor<D> f = randn({6, 4, 4}, rng);
    Tensor<D> bank = randn({5, 6}, rng);

    // identical maps -> zero
    ad::Graph<D> g;
    CHECK(ppda_loss(g.leaf(f), f, g.leaf(bank), 0.1, 2, 1e-8).val()[0] ==
          doctest::Approx(0.0).epsilon(1e-9));

    Tensor<D> ftg = randn({6, 4, 4}, rng);
    ad::Graph<D> g1;
    D base = ppda_loss(g1.leaf(f), ftg, g1.leaf(bank), 0.1, 4, 1e-8).val()[0];
    CHECK(base >= 0.0);

    // spatial permutation of the online cells (grid = map side) is invariant
    Tensor<D> fperm({6, 4, 4});
    std::vector<int> perm(16);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937(99));
    for (int c = 0; c < 6; ++c)
        for (int i = 0; i < 16; ++i)
            fperm.at3(c, perm[i] / 4, perm[i] % 4) = f.at3(c, i / 4, i % 4);
    ad::Graph<D> g2;
    D permuted = ppda_loss(g2.leaf(fperm), ftg, g2.leaf(bank), 0.1, 4, 1e-8).val()[0];
    CHECK(permuted == doctest::Approx(base).epsilon(1e-9));

    // joint relabeling of the prototypes is invariant
    Tensor<D> bperm({5, 6});
    std::vector<int> kp = {3, 0, 4, 1, 2};
    for (int k = 0; k < 5; ++k)
        for (int d = 0; d < 6; ++d) bperm.at2(k, d) = bank.at2(kp[k], d);
    ad::Graph<D> g3;
    D relabeled = ppda_loss(g3.leaf(f), ftg, g3.leaf(bperm), 0.1, 4, 1e-8).val()[0];
    CHECK(relabeled == doctest::Approx(base).epsilon(1e-9));

    // value responds to target perturbation (stop-gradient side)
    Tensor<D> ftp = ftg;
    ftp[0] += 0.5;
    ad::Graph<D> g4;
    CHECK(std::abs(ppda_loss(g4.leaf(f), ftp, g4.leaf(bank), 0.1, 4, 1e-8).val()[0] - base) >
          1e-9);

    // channel mismatch is an error
    ad::Graph<D> g5;
    Tensor<D> wrong = randn({5, 4, 4}, rng);
    CHECK_THROWS_AS(ppda_loss(g5.leaf(wrong), ftg, g5.leaf(bank), 0.1, 4, 1e-8),
                    std::invalid_argument);
}

// ---------------------------------------------------------------------------
// RAM
// ---------------------------------------------------------------------------

TEST_CASE("affinity matrices match a brute-force oracle on 100 random instances") {
    Rng rng(48);
    for (int trial = 0; trial < 100; ++trial) {
        int C = 3 + int(rng.uniform() * 5);
        int H = 2 + int(rng.uniform() * 5);
        int grid = 2 + int(rng.uniform() * 3);
        Tensor<D> f = randpos({C, H, H}, rng);
        ad::Graph<D> g;
        Tensor<D> a = region_affinity(g.leaf(f), grid).val();
        Tensor<D> oracle = affinity_oracle(f, grid);
        REQUIRE(a.size() == oracle.size());
        int P = oracle.dim(0);
        for (int i = 0; i < P; ++i) {
            CHECK(std::abs(a.at2(i, i)) < 1e-9);
            for (int j = 0; j < P; ++j) {
                CHECK(a.at2(i, j) == doctest::Approx(oracle.at2(i, j)).epsilon(1e-12));
                CHECK(a.at2(i, j) == doctest::Approx(a.at2(j, i)).epsilon(1e-12));
                CHECK(a.at2(i, j) > -1e-12);
                CHECK(a.at2(i, j) < 2 + 1e-12);
            }
        }
        // plain and tape paths agree
        Tensor<D> ap = region_affinity_plain(f, grid);
        for (int64_t i = 0; i < a.size(); ++i)
            CHECK(ap[i] == doctest::Approx(a[i]).epsilon(1e-12));
    }
}

TEST_CASE("ram term identities, hand oracle and invariances") {
    Rng rng(49);
    Tensor<D> f = randpos({5, 2, 2}, rng);
    ad::Graph<D> g;
    int64_t degen = 0;
    CHECK(ram_loss(g.leaf(f), f, identity_warp(), 2, &degen).val()[0] ==
          doctest::Approx(0.0).epsilon(1e-12));

    // hand-built 2x2 oracle with identity index map
    Tensor<D> ftg = randpos({5, 2, 2}, rng);
    ad::Graph<D> g2;
    D got = ram_loss(g2.leaf(f), ftg, identity_warp(), 2, &degen).val()[0];
    Tensor<D> ao = affinity_oracle(f, 2), at = affinity_oracle(ftg, 2);
    D expect = 0;
    for (int i = 0; i < 16; ++i) expect += (ao[i] - at[i]) * (ao[i] - at[i]);
    expect /= 16;
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    CHECK(degen == 0);

    // no valid pairs: defined zero plus counter
    ad::Graph<D> g3;
    CHECK(ram_loss(g3.leaf(f), ftg, disjoint_warp(), 2, &degen).val()[0] == 0.0);
    CHECK(degen == 1);

    // shared orthogonal transform of every region vector leaves it unchanged
    int C = 5;
    Tensor<D> q({C, C});  // Householder reflection, orthogonal
    std::vector<D> u(C);
    D un = 0;
    for (int i = 0; i < C; ++i) {
        u[i] = rng.normal();
        un += u[i] * u[i];
    }
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j) q.at2(i, j) = (i == j ? 1.0 : 0.0) - 2 * u[i] * u[j] / un;
    auto rotate = [&](const Tensor<D>& x) {
        Tensor<D> out({C, 2, 2});
        for (int y = 0; y < 2; ++y)
            for (int xx = 0; xx < 2; ++xx)
                for (int i = 0; i < C; ++i) {
                    D s = 0;
                    for (int j = 0; j < C; ++j) s += q.at2(i, j) * x.at3(j, y, xx);
                    out.at3(i, y, xx) = s;
                }
        return out;
    };
    ad::Graph<D> g4;
    D rotated = ram_loss(g4.leaf(rotate(f)), rotate(ftg), identity_warp(), 2, &degen).val()[0];
    CHECK(rotated == doctest::Approx(got).epsilon(1e-9));

    // joint permutation of both views' region indices (identity index map)
    std::vector<int> perm = {2, 0, 3, 1};
    auto permute = [&](const Tensor<D>& x) {
        Tensor<D> out({C, 2, 2});
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < 4; ++i)
                out.at3(c, perm[i] / 2, perm[i] % 2) = x.at3(c, i / 2, i % 2);
        return out;
    };
    ad::Graph<D> g5;
    D permuted =
        ram_loss(g5.leaf(permute(f)), permute(ftg), identity_warp(), 2, &degen).val()[0];
    CHECK(permuted == doctest::Approx(got).epsilon(1e-9));

    // all-zero (ReLU-dead) regions degrade to distance 1 instead of aborting
    Tensor<D> fz = f;
    for (int c = 0; c < C; ++c) fz.at3(c, 0, 0) = 0.0;
    ad::Graph<D> g6;
    Tensor<D> az = region_affinity(g6.leaf(fz), 2).val();
    CHECK(az.at2(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(az.at2(2, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// combined objective
// ---------------------------------------------------------------------------

namespace {

struct CombinedFixture {
    ad::Graph<D> g;
    PyramidVars<D> on1, on2;
    Pyramid<D> tg1, tg2;
    std::vector<AffineWarp> w12, w21;
    CombinedLossInputs<D> ci;
    Tensor<D> bank0;

    CombinedFixture(uint64_t seed, int batch, bool identical) {
        Rng rng(seed);
        auto pyr_tensors = [&]() {
            Pyramid<D> p;
            p.f2 = randpos({batch, 8, 6, 6}, rng);
            p.f3 = randpos({batch, 8, 4, 4}, rng);
            p.f4 = randpos({batch, 8, 2, 2}, rng);
            p.proj = randn({batch, 5}, rng);
            return p;
        };
        // "identical" means the identity augmentation: both views and both
        // branches see the same single pyramid.
        tg1 = pyr_tensors();
        tg2 = identical ? tg1 : pyr_tensors();
        Pyramid<D> o1 = identical ? tg1 : pyr_tensors();
        Pyramid<D> o2 = identical ? tg1 : pyr_tensors();
        auto bind = [&](const Pyramid<D>& p, const Tensor<D>& pred) {
            PyramidVars<D> v;
            v.f2 = g.leaf(p.f2);
            v.f3 = g.leaf(p.f3);
            v.f4 = g.leaf(p.f4);
            v.rep = g.constant(Tensor<D>({batch, 4}));
            v.pred = g.leaf(pred);
            return v;
        };
        // the predictor should chase the other view's target projection
        on1 = bind(o1, identical ? tg2.proj : randn({batch, 5}, rng));
        on2 = bind(o2, identical ? tg1.proj : randn({batch, 5}, rng));
        bank0 = randn({6, 8}, rng);
        for (int n = 0; n < batch; ++n) {
            if (identical) {
                w12.push_back(identity_warp());
                w21.push_back(identity_warp());
            } else {
                ViewParams p1, p2;
                p1.crop = {2.0 + n, 3, 40, 48};
                p2.crop = {5, 1.0 + n, 44, 36};
                p1.hflip = n % 2 == 1;
                w12.push_back(warp_between(p1, p2));
                w21.push_back(warp_between(p2, p1));
            }
        }
        ci.online_v1 = &on1;
        ci.online_v2 = &on2;
        ci.target_v1 = &tg1;
        ci.target_v2 = &tg2;
        ci.warps_12 = &w12;
        ci.warps_21 = &w21;
        ci.bank = g.leaf(bank0);
    }
};

LossConfig small_loss_config() {
    LossConfig lc;
    lc.num_prototypes = 6;
    lc.ppda_grid = 3;
    lc.ram_grid = 4;
    return lc;
}

}  // namespace

TEST_CASE("zero lambdas reduce the total to the global term exactly") {
    CombinedFixture fx(51, 2, false);
    LossConfig lc = small_loss_config();
    lc.lambda_sal = lc.lambda_ppda = lc.lambda_ram = 0.0;
    LossReport<D> rep;
    ad::Var<D> total = combined_loss(fx.ci, lc, rep);
    CHECK(rep.total == rep.global);
    CHECK(total.val()[0] == rep.global);
    CHECK(rep.sal > 0.0);  // still computed, just unweighted
}

TEST_CASE("disabled terms report exactly zero") {
    CombinedFixture fx(52, 2, false);
    LossConfig lc = small_loss_config();
    lc.use_sal = lc.use_ppda = lc.use_ram = false;
    LossReport<D> rep;
    combined_loss(fx.ci, lc, rep);
    CHECK(rep.sal == 0.0);
    CHECK(rep.ppda == 0.0);
    CHECK(rep.ram == 0.0);
    CHECK(rep.total == rep.global);
}

TEST_CASE("identical views and branches drive every term to zero") {
    CombinedFixture fx(53, 2, true);
    LossReport<D> rep;
    combined_loss(fx.ci, small_loss_config(), rep);
    CHECK(std::abs(rep.global) < 1e-9);
    CHECK(std::abs(rep.sal) < 1e-9);
    CHECK(std::abs(rep.ppda) < 1e-9);
    CHECK(std::abs(rep.ram) < 1e-9);
    CHECK(std::abs(rep.total) < 1e-9);
}

TEST_CASE("the report obeys the recomposition identity and nonnegativity") {
    for (uint64_t seed : {54u, 55u, 56u}) {
        CombinedFixture fx(seed, 3, false);
        LossConfig lc = small_loss_config();
        LossReport<D> rep;
        ad::Var<D> total = combined_loss(fx.ci, lc, rep);
        CHECK(rep.global >= 0.0);
        CHECK(rep.sal >= 0.0);
        CHECK(rep.ppda >= 0.0);
        CHECK(rep.ram >= 0.0);
        D recomposed = rep.global + lc.lambda_sal * rep.sal + lc.lambda_ppda * rep.ppda +
                       lc.lambda_ram * rep.ram;
        CHECK(rep.total == doctest::Approx(recomposed).epsilon(1e-12));
        CHECK(total.val()[0] == rep.total);
        CHECK(rep.lambda_sal == lc.lambda_sal);
        CHECK(rep.lambda_ppda == lc.lambda_ppda);
        CHECK(rep.lambda_ram == lc.lambda_ram);
    }
}

TEST_CASE("the total matches independently invoked sub-losses on a 1-sample batch") {
    CombinedFixture fx(57, 1, false);
    LossConfig lc = small_loss_config();
    LossReport<D> rep;
    combined_loss(fx.ci, lc, rep);

    ad::Graph<D>& g = fx.g;
    // global
    D global = global_loss(g.leaf(fx.on1.pred.val()), fx.tg2.proj,
                           g.leaf(fx.on2.pred.val()), fx.tg1.proj)
                   .val()[0];
    CHECK(global == doctest::Approx(rep.global).epsilon(1e-12));

    auto slice = [](const Tensor<D>& x) { return loss_detail::slice_plain(x, 0); };
    // sal: unweighted mean over layers of the symmetrized per-layer value
    D sal = 0;
    const Tensor<D>* on_maps[3] = {&fx.on1.f2.val(), &fx.on1.f3.val(), &fx.on1.f4.val()};
    const Tensor<D>* on2_maps[3] = {&fx.on2.f2.val(), &fx.on2.f3.val(), &fx.on2.f4.val()};
    const Tensor<D>* tg1_maps[3] = {&fx.tg1.f2, &fx.tg1.f3, &fx.tg1.f4};
    const Tensor<D>* tg2_maps[3] = {&fx.tg2.f2, &fx.tg2.f3, &fx.tg2.f4};
    for (int l = 0; l < 3; ++l) {
        D d12 = sal_loss(saliency(g.leaf(slice(*on_maps[l]))),
                         saliency_plain(slice(*tg2_maps[l])), fx.w12[0], nullptr)
                    .val()[0];
        D d21 = sal_loss(saliency(g.leaf(slice(*on2_maps[l]))),
                         saliency_plain(slice(*tg1_maps[l])), fx.w21[0], nullptr)
                    .val()[0];
        sal += 0.5 * (d12 + d21) / 3.0;
    }
    CHECK(sal == doctest::Approx(rep.sal).epsilon(1e-12));

    // ppda and ram on layer 3
    D p12 = ppda_loss(g.leaf(slice(fx.on1.f3.val())), slice(fx.tg2.f3), g.leaf(fx.bank0), 0.1,
                      lc.ppda_grid, 1e-8)
                .val()[0];
    D p21 = ppda_loss(g.leaf(slice(fx.on2.f3.val())), slice(fx.tg1.f3), g.leaf(fx.bank0), 0.1,
                      lc.ppda_grid, 1e-8)
                .val()[0];
    CHECK(0.5 * (p12 + p21) == doctest::Approx(rep.ppda).epsilon(1e-12));

    D r12 = ram_loss(g.leaf(slice(fx.on1.f3.val())), slice(fx.tg2.f3), fx.w12[0], lc.ram_grid,
                     nullptr)
                .val()[0];
    D r21 = ram_loss(g.leaf(slice(fx.on2.f3.val())), slice(fx.tg1.f3), fx.w21[0], lc.ram_grid,
                     nullptr)
                .val()[0];
    CHECK(0.5 * (r12 + r21) == doctest::Approx(rep.ram).epsilon(1e-12));

    D total = global + lc.lambda_sal * sal + lc.lambda_ppda * 0.5 * (p12 + p21) +
              lc.lambda_ram * 0.5 * (r12 + r21);
    CHECK(total == doctest::Approx(rep.total).epsilon(1e-12));
}

TEST_CASE("gradients reach every online leaf and the bank but no target tensor") {
    CombinedFixture fx(58, 2, false);
    LossReport<D> rep;
    ad::Var<D> total = combined_loss(fx.ci, small_loss_config(), rep);
    fx.g.backward(total);
    auto nonzero = [&](ad::Var<D> v) {
        const Tensor<D>& gr = fx.g.grad(v);
        for (auto x : gr.v)
            if (x != 0.0) return true;
        return false;
    };
    CHECK(nonzero(fx.on1.pred));
    CHECK(nonzero(fx.on2.pred));
    CHECK(nonzero(fx.on1.f2));
    CHECK(nonzero(fx.on1.f3));
    CHECK(nonzero(fx.on1.f4));
    CHECK(nonzero(fx.on2.f3));
    CHECK(nonzero(fx.ci.bank));

    // target-side perturbation moves the value but owns no gradient variable
    CombinedFixture fy(58, 2, false);
    fy.tg2.f3[0] += 0.25;
    LossReport<D> rep2;
    combined_loss(fy.ci, small_loss_config(), rep2);
    CHECK(std::abs(rep2.total - rep.total) > 1e-12);
}
