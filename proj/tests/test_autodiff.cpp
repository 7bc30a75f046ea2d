#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>

#include "sarl/nn_ops.hpp"
#include "sarl/rng.hpp"

using namespace sarl;

namespace {

using D = double;
using BuildFn = std::function<ad::Var<D>(ad::Graph<D>&, ad::Var<D>)>;

Tensor<D> randn(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor<D> t(std::move(shape));
    for (auto& v : t.v) v = rng.normal() * scale;
    return t;
}

// Max relative error between analytic gradient and central finite differences
// of a scalar-valued build function of one tensor input.
double fd_check(const Tensor<D>& x0, const BuildFn& build, double h = 1e-6) {
    ad::Graph<D> g;
    ad::Var<D> x = g.leaf(x0);
    ad::Var<D> loss = build(g, x);
    g.backward(loss);
    const Tensor<D>& analytic = g.grad(x);

    double max_rel = 0;
    for (int64_t i = 0; i < x0.size(); ++i) {
        auto value_at = [&](double xi) {
            Tensor<D> xp = x0;
            xp[i] = xi;
            ad::Graph<D> g2;
            return build(g2, g2.leaf(xp)).val()[0];
        };
        double fd = (value_at(x0[i] + h) - value_at(x0[i] - h)) / (2 * h);
        double a = analytic[i];
        double scale = std::max({std::abs(a), std::abs(fd), 1e-4});
        max_rel = std::max(max_rel, std::abs(a - fd) / scale);
    }
    return max_rel;
}

}  // namespace

TEST_CASE("elementwise and reduction ops match finite differences") {
    Rng rng(11);
    Tensor<D> x0 = randn({3, 4}, rng);

    CHECK(fd_check(x0, [](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::add(x, x)));
          }) < 1e-7);
    CHECK(fd_check(x0, [](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::sum(ad::relu(ad::add_scalar(x, 0.3)));
          }) < 1e-7);
    CHECK(fd_check(x0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              Rng r2(5);
              Tensor<D> c = randn({3, 4}, r2);
              return ad::mean(ad::mul(ad::sub_const(x, c), ad::scale(x, 0.7)));
          }) < 1e-7);
    CHECK(fd_check(x0, [](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::sum(ad::gather(x, {0, 3, 5, 5, 11}));
          }) < 1e-7);
}

TEST_CASE("matmul family matches finite differences") {
    Rng rng(12);
    Tensor<D> a0 = randn({3, 5}, rng), b0 = randn({5, 2}, rng), bt0 = randn({4, 5}, rng);
    Tensor<D> w0 = randn({5, 3}, rng), bias0 = randn({3}, rng);

    CHECK(fd_check(a0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::matmul(x, g.constant(b0))));
          }) < 1e-7);
    CHECK(fd_check(b0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::matmul(g.constant(a0), x)));
          }) < 1e-7);
    CHECK(fd_check(a0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::matmul_nt(x, g.constant(bt0))));
          }) < 1e-7);
    CHECK(fd_check(bt0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::matmul_nt(g.constant(a0), x)));
          }) < 1e-7);
    CHECK(fd_check(w0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::linear(g.constant(a0), x, g.constant(bias0))));
          }) < 1e-7);
    CHECK(fd_check(bias0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::linear(g.constant(a0), g.constant(w0), x)));
          }) < 1e-7);
}

TEST_CASE("conv2d matches finite differences for both strides") {
    Rng rng(13);
    Tensor<D> x0 = randn({2, 3, 6, 6}, rng);
    Tensor<D> w0 = randn({4, 3, 3, 3}, rng, 0.5);
    Tensor<D> b0 = randn({4}, rng);
    for (int stride : {1, 2}) {
        CHECK(fd_check(x0, [&](ad::Graph<D>& g, ad::Var<D> x) {
                  return ad::mean(
                      ad::square(ad::conv2d(x, g.constant(w0), g.constant(b0), stride)));
              }) < 1e-5);
        CHECK(fd_check(w0, [&](ad::Graph<D>& g, ad::Var<D> x) {
                  return ad::mean(
                      ad::square(ad::conv2d(g.constant(x0), x, g.constant(b0), stride)));
              }) < 1e-5);
        CHECK(fd_check(b0, [&](ad::Graph<D>& g, ad::Var<D> x) {
                  return ad::mean(
                      ad::square(ad::conv2d(g.constant(x0), g.constant(w0), x, stride)));
              }) < 1e-5);
    }
}

TEST_CASE("batchnorm (train mode) matches finite differences") {
    Rng rng(14);
    Tensor<D> x0 = randn({4, 3, 2, 2}, rng);
    Tensor<D> gm0 = randn({3}, rng, 0.3);
    Tensor<D> bt0 = randn({3}, rng, 0.3);
    auto bn_loss = [&](ad::Graph<D>& g, ad::Var<D> x, ad::Var<D> gm, ad::Var<D> bt) {
        return ad::mean(ad::square(ad::batchnorm_train<D>(x, gm, bt, 1e-5, nullptr, nullptr)));
    };
    CHECK(fd_check(x0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return bn_loss(g, x, g.constant(gm0), g.constant(bt0));
          }) < 1e-6);
    CHECK(fd_check(gm0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return bn_loss(g, g.constant(x0), x, g.constant(bt0));
          }) < 1e-6);
    CHECK(fd_check(bt0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return bn_loss(g, g.constant(x0), g.constant(gm0), x);
          }) < 1e-6);
}

TEST_CASE("pooling, normalization and distribution ops match finite differences") {
    Rng rng(15);
    Tensor<D> x4 = randn({2, 3, 4, 4}, rng);
    Tensor<D> rows = randn({4, 6}, rng);

    CHECK(fd_check(x4, [](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::global_avg_pool(x)));
          }) < 1e-7);
    CHECK(fd_check(x4, [](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::cell_avg_pool(ad::slice_sample(x, 1), 3)));
          }) < 1e-7);
    Rng rc(21);
    Tensor<D> cn = randn({4, 6}, rc);
    CHECK(fd_check(rows, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::mul(ad::l2_normalize_rows(x), g.constant(cn)));
          }) < 1e-6);
    CHECK(fd_check(rows, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::mul(ad::l2_normalize_all(x), g.constant(cn)));
          }) < 1e-6);
    CHECK(fd_check(x4, [](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::channel_abs_sum(ad::slice_sample(x, 0))));
          }) < 1e-6);
    CHECK(fd_check(rows, [](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::softmax_rows(x)));
          }) < 1e-7);
    CHECK(fd_check(rows, [](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::square(ad::mean_rows(x)));
          }) < 1e-7);
    Rng r2(16);
    Tensor<D> c = randn({4, 6}, r2);
    CHECK(fd_check(rows, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::mean(ad::rowwise_dot_const(x, c));
          }) < 1e-7);
    Tensor<D> p({4});
    p.v = {0.1, 0.2, 0.3, 0.4};
    Tensor<D> q0({4});
    q0.v = {0.4, 0.3, 0.2, 0.1};
    CHECK(fd_check(q0, [&](ad::Graph<D>& g, ad::Var<D> x) {
              return ad::sym_kl_vs_const(x, p, 1e-8);
          }) < 1e-7);
}

TEST_CASE("gradient through two taps is the sum of single-tap gradients") {
    Rng rng(17);
    Tensor<D> x0 = randn({2, 3, 4, 4}, rng);
    Tensor<D> w0 = randn({3, 3, 3, 3}, rng, 0.4);
    Tensor<D> b0({3});

    auto run = [&](bool tapA, bool tapB) {
        ad::Graph<D> g;
        ad::Var<D> x = g.leaf(x0);
        ad::Var<D> h = ad::relu(ad::conv2d(x, g.constant(w0), g.constant(b0), 1));
        ad::Var<D> h2 = ad::conv2d(h, g.constant(w0), g.constant(b0), 2);
        ad::Var<D> loss = g.constant(Tensor<D>::scalar(0));
        if (tapA) loss = ad::add(loss, ad::mean(ad::square(h)));
        if (tapB) loss = ad::add(loss, ad::mean(ad::square(h2)));
        g.backward(loss);
        return g.grad(x);
    };
    Tensor<D> ga = run(true, false), gb = run(false, true), gab = run(true, true);
    for (int64_t i = 0; i < x0.size(); ++i)
        CHECK(gab[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-12));
}

TEST_CASE("zero upstream gradient yields zero parameter gradients") {
    Rng rng(18);
    Tensor<D> x0 = randn({2, 4}, rng);
    ad::Graph<D> g;
    ad::Var<D> x = g.leaf(x0);
    ad::Var<D> y = ad::scale(ad::mean(ad::square(x)), 0.0);
    g.backward(y);
    for (int64_t i = 0; i < x0.size(); ++i) CHECK(g.grad(x)[i] == 0.0);
}

TEST_CASE("constants never accumulate gradients") {
    ad::Graph<D> g;
    Tensor<D> t({2});
    t.v = {1.0, 2.0};
    ad::Var<D> c = g.constant(t);
    ad::Var<D> l = ad::sum(ad::square(c));
    g.backward(l);  // loss has no leaf dependencies; must be a no-op
    CHECK_THROWS_AS(g.grad(c), std::logic_error);
}
