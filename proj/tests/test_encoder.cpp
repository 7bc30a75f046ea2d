#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sarl/encoder.hpp"

using namespace sarl;

namespace {

using D = double;

EncoderConfig small_config() {
    EncoderConfig cfg;
    cfg.input_size = 64;
    cfg.stage_channels = {4, 4, 4, 8};
    cfg.rep_dim = 8;
    cfg.proj_dim = 4;
    return cfg;
}

Tensor<D> rand_input(int n, int size, uint64_t seed) {
    Rng rng(seed);
    Tensor<D> x({n, 3, size, size});
    for (auto& v : x.v) v = rng.uniform();
    return x;
}

D tensor_std(const Tensor<D>& t) {
    D mean = 0;
    for (auto v : t.v) mean += v;
    mean /= t.size();
    D var = 0;
    for (auto v : t.v) var += (v - mean) * (v - mean);
    return std::sqrt(var / t.size());
}

}  // namespace

TEST_CASE("initialization is deterministic in the seed") {
    EncoderConfig cfg;
    auto a = init_params<D>(cfg, 3, true);
    auto b = init_params<D>(cfg, 3, true);
    auto c = init_params<D>(cfg, 4, true);
    REQUIRE(a.params.size() == b.params.size());
    bool any_diff = false;
    for (const auto& [name, t] : a.params) {
        CHECK(t.v == b.params.at(name).v);
        if (t.v != c.params.at(name).v) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("target initialized by assignment matches the online branch exactly") {
    EncoderConfig cfg;
    auto online = init_params<D>(cfg, 3, true);
    auto target = init_params<D>(cfg, 3, false);
    for (auto& [name, t] : target.params) t = online.params.at(name);
    for (const auto& [name, t] : target.params) CHECK(t.v == online.params.at(name).v);
    CHECK(target.params.count("pred.l1.w") == 0);
}

TEST_CASE("weight scales follow fan-in initialization") {
    EncoderConfig cfg;
    auto np = init_params<D>(cfg, 11, true);
    auto check_std = [&](const std::string& name, int fan_in) {
        D expect = std::sqrt(2.0 / fan_in);
        D got = tensor_std(np.params.at(name));
        CHECK(got > 0.8 * expect);
        CHECK(got < 1.2 * expect);
    };
    check_std("stem.w", 3 * 9);
    check_std("s2.c1.w", cfg.stage_channels[0] * 9);
    check_std("s4.c2.w", cfg.stage_channels[3] * 9);
    check_std("proj.l1.w", cfg.rep_dim);
    check_std("pred.l2.w", cfg.proj_hidden());
    // biases, betas start at zero; gammas at one
    for (auto v : np.params.at("stem.b").v) CHECK(v == 0.0);
    for (auto v : np.params.at("s3.c1.gamma").v) CHECK(v == 1.0);
}

TEST_CASE("pyramid tap shapes at 64-pixel input") {
    EncoderConfig cfg;  // defaults: channels 16/32/64/128
    auto np = init_params<D>(cfg, 5, true);
    Tensor<D> x = rand_input(2, 64, 1);
    Pyramid<D> p = forward_plain(np, cfg, x, BnMode::kEval);
    CHECK(p.f2.shape == std::vector<int>{2, 32, 8, 8});
    CHECK(p.f3.shape == std::vector<int>{2, 64, 4, 4});
    CHECK(p.f4.shape == std::vector<int>{2, 128, 2, 2});
    CHECK(p.rep.shape == std::vector<int>{2, 128});
    CHECK(p.proj.shape == std::vector<int>{2, 64});
    CHECK(p.pred.shape == std::vector<int>{2, 64});
    CHECK(cfg.layer_side(2) == 8);
    CHECK(cfg.layer_side(3) == 4);
    CHECK(cfg.layer_side(4) == 2);
}

TEST_CASE("the representation is exactly the pooled last tap") {
    EncoderConfig cfg = small_config();
    auto np = init_params<D>(cfg, 5, false);
    Tensor<D> x = rand_input(3, 64, 2);
    Pyramid<D> p = forward_plain(np, cfg, x, BnMode::kEval);
    int C = p.f4.shape[1], H = p.f4.shape[2], W = p.f4.shape[3];
    for (int n = 0; n < 3; ++n)
        for (int c = 0; c < C; ++c) {
            D sum = 0;
            for (int i = 0; i < H * W; ++i) sum += p.f4[(int64_t(n) * C + c) * H * W + i];
            CHECK(p.rep[n * C + c] == doctest::Approx(sum / (H * W)).epsilon(1e-12));
        }
}

TEST_CASE("eval-mode forward is deterministic and leaves statistics untouched") {
    EncoderConfig cfg = small_config();
    auto np = init_params<D>(cfg, 5, true);
    Tensor<D> x = rand_input(2, 64, 3);
    auto rm_before = np.run_mean;
    Pyramid<D> a = forward_plain(np, cfg, x, BnMode::kEval);
    Pyramid<D> b = forward_plain(np, cfg, x, BnMode::kEval);
    CHECK(a.proj.v == b.proj.v);
    CHECK(a.f3.v == b.f3.v);
    for (const auto& [name, t] : np.run_mean) CHECK(t.v == rm_before.at(name).v);

    // train mode does update them
    forward_plain(np, cfg, x, BnMode::kTrain);
    bool moved = false;
    for (const auto& [name, t] : np.run_mean)
        if (t.v != rm_before.at(name).v) moved = true;
    CHECK(moved);
}

TEST_CASE("ema blending endpoints and decay law") {
    EncoderConfig cfg = small_config();
    auto online = init_params<D>(cfg, 1, false);
    auto target0 = init_params<D>(cfg, 2, false);

    auto target = target0;
    ema_blend(online, target, 1.0);
    for (const auto& [name, t] : target.params) CHECK(t.v == target0.params.at(name).v);

    target = target0;
    ema_blend(online, target, 0.0);
    for (const auto& [name, t] : target.params) CHECK(t.v == online.params.at(name).v);

    // n repeated blends against a fixed online branch follow
    // xi_n = mu^n xi_0 + (1 - mu^n) theta
    const D mu = 0.996;
    const int n = 10;
    target = target0;
    for (int i = 0; i < n; ++i) ema_blend(online, target, mu);
    D mun = std::pow(mu, n);
    for (const auto& [name, t] : target.params) {
        const auto& x0 = target0.params.at(name);
        const auto& th = online.params.at(name);
        for (int64_t i = 0; i < t.size(); ++i) {
            D expect = mun * x0[i] + (1 - mun) * th[i];
            D denom = std::max(std::abs(expect), 1e-12);
            CHECK(std::abs(t[i] - expect) / denom < 1e-10);
        }
    }

    CHECK_THROWS_AS(ema_blend(online, target, 1.5), std::invalid_argument);
}

TEST_CASE("backpropagation through the full network matches finite differences") {
    EncoderConfig cfg = small_config();
    auto np = init_params<D>(cfg, 9, true);
    Tensor<D> x = rand_input(2, 64, 4);

    auto loss_value = [&](NetworkParams<D>& p) {
        ad::Graph<D> g;
        auto pv = make_param_vars(g, p, true);
        PyramidVars<D> py = forward(g, pv, p, cfg, g.constant(x), BnMode::kTrain);
        return ad::mean(ad::square(py.pred)).val()[0];
    };

    // analytic gradients
    ad::Graph<D> g;
    auto pv = make_param_vars(g, np, true);
    PyramidVars<D> py = forward(g, pv, np, cfg, g.constant(x), BnMode::kTrain);
    g.backward(ad::mean(ad::square(py.pred)));

    Rng rng(55);
    const double h = 1e-5;
    std::vector<std::string> names = {"stem.w",    "s1.c1.w",  "s3.c2.gamma", "s4.c1.beta",
                                      "proj.l1.w", "pred.l2.b"};
    for (const auto& name : names) {
        Tensor<D>& t = np.params.at(name);
        for (int rep = 0; rep < 2; ++rep) {
            int64_t i = int64_t(rng.uniform() * t.size());
            D saved = t[i];
            t[i] = saved + h;
            D up = loss_value(np);
            t[i] = saved - h;
            D dn = loss_value(np);
            t[i] = saved;
            D fd = (up - dn) / (2 * h);
            D a = g.grad(pv.at(name))[i];
            D scale = std::max({std::abs(a), std::abs(fd), 1e-4});
            CHECK(std::abs(a - fd) / scale < 1e-4);
        }
    }
}

TEST_CASE("gradients from two taps add through the shared trunk") {
    EncoderConfig cfg = small_config();
    auto np = init_params<D>(cfg, 9, true);
    Tensor<D> x = rand_input(2, 64, 5);

    auto run = [&](bool tap3, bool tapPred) {
        ad::Graph<D> g;
        auto pv = make_param_vars(g, np, true);
        PyramidVars<D> py = forward(g, pv, np, cfg, g.constant(x), BnMode::kTrain);
        ad::Var<D> loss = g.constant(Tensor<D>::scalar(0));
        if (tap3) loss = ad::add(loss, ad::mean(ad::square(py.f3)));
        if (tapPred) loss = ad::add(loss, ad::mean(ad::square(py.pred)));
        g.backward(loss);
        return g.grad(pv.at("stem.w"));
    };
    Tensor<D> ga = run(true, false), gb = run(false, true), gab = run(true, true);
    for (int64_t i = 0; i < ga.size(); ++i)
        CHECK(gab[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-10));
}

TEST_CASE("configuration validation rejects malformed settings") {
    EncoderConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    EncoderConfig bad = cfg;
    bad.input_size = 48;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.input_size = 32;  // layer-3 side would be 2
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.rep_dim = 64;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.proj_dim = 128;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.stage_channels[1] = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
