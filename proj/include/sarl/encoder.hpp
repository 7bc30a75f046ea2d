#pragma once

#include <map>
#include <string>

#include "sarl/nn_ops.hpp"
#include "sarl/rng.hpp"

namespace sarl {

struct EncoderConfig {
    int input_size = 64;
    std::array<int, 4> stage_channels = {16, 32, 64, 128};
    int rep_dim = 128;   // must equal stage_channels[3]; rep is pooled F4
    int proj_dim = 64;

    void validate() const {
        if (input_size % 32 != 0 || input_size / 16 < 4)
            throw std::invalid_argument("EncoderConfig: layer-3 side input_size/16 must be >= 4");
        for (int c : stage_channels)
            if (c <= 0) throw std::invalid_argument("EncoderConfig: nonpositive channel count");
        if (rep_dim != stage_channels[3])
            throw std::invalid_argument("EncoderConfig: rep_dim must equal stage_channels[3]");
        if (proj_dim <= 0 || proj_dim >= rep_dim)
            throw std::invalid_argument("EncoderConfig: proj_dim must be in (0, rep_dim)");
    }

    int layer_side(int layer) const {  // layer in {2,3,4}
        return input_size >> (layer + 1);  // stem /2, stages /2 each
    }
    int layer_channels(int layer) const { return stage_channels[layer - 1]; }
    int proj_hidden() const { return 2 * proj_dim; }
};

// One branch's parameters plus its normalization running statistics. The
// online branch carries the extra predictor head; the target branch does not.
template <class T>
struct NetworkParams {
    std::map<std::string, Tensor<T>> params;
    std::map<std::string, Tensor<T>> run_mean;  // keyed by bn name
    std::map<std::string, Tensor<T>> run_var;
    bool has_predictor = false;
};

template <class T>
struct PyramidVars {
    ad::Var<T> f2, f3, f4;  // [N,C,H,W]
    ad::Var<T> rep;         // [N, rep_dim]
    ad::Var<T> proj;        // [N, proj_dim]
    ad::Var<T> pred;        // [N, proj_dim], online branch only
};

namespace enc_detail {

inline std::vector<std::string> bn_names() {
    std::vector<std::string> out = {"stem"};
    for (int s = 1; s <= 4; ++s)
        for (int c = 1; c <= 2; ++c)
            out.push_back("s" + std::to_string(s) + ".c" + std::to_string(c));
    return out;
}

}  // namespace enc_detail

// Deterministic fan-in-scaled initialization; target copies are made by the
// caller (assignment), so xi_0 = theta_0 exactly.
template <class T>
NetworkParams<T> init_params(const EncoderConfig& cfg, uint64_t seed, bool with_predictor) {
    cfg.validate();
    NetworkParams<T> np;
    np.has_predictor = with_predictor;
    Rng rng(seed);
    auto conv = [&](const std::string& name, int out_c, int in_c) {
        Tensor<T> w({out_c, in_c, 3, 3});
        T std_dev = std::sqrt(T(2) / static_cast<T>(in_c * 9));
        for (auto& x : w.v) x = static_cast<T>(rng.normal()) * std_dev;
        np.params[name + ".w"] = std::move(w);
        np.params[name + ".b"] = Tensor<T>({out_c});
        np.params[name + ".gamma"] = Tensor<T>::full({out_c}, T(1));
        np.params[name + ".beta"] = Tensor<T>({out_c});
        np.run_mean[name] = Tensor<T>({out_c});
        np.run_var[name] = Tensor<T>::full({out_c}, T(1));
    };
    auto dense = [&](const std::string& name, int in_d, int out_d) {
        Tensor<T> w({in_d, out_d});
        T std_dev = std::sqrt(T(2) / static_cast<T>(in_d));
        for (auto& x : w.v) x = static_cast<T>(rng.normal()) * std_dev;
        np.params[name + ".w"] = std::move(w);
        np.params[name + ".b"] = Tensor<T>({out_d});
    };

    conv("stem", cfg.stage_channels[0], 3);
    int prev = cfg.stage_channels[0];
    for (int s = 1; s <= 4; ++s) {
        int ch = cfg.stage_channels[s - 1];
        conv("s" + std::to_string(s) + ".c1", ch, prev);
        conv("s" + std::to_string(s) + ".c2", ch, ch);
        prev = ch;
    }
    dense("proj.l1", cfg.rep_dim, cfg.proj_hidden());
    dense("proj.l2", cfg.proj_hidden(), cfg.proj_dim);
    if (with_predictor) {
        dense("pred.l1", cfg.proj_dim, cfg.proj_hidden());
        dense("pred.l2", cfg.proj_hidden(), cfg.proj_dim);
    }
    return np;
}

// Bind every parameter to the graph, either as trainable leaves (online
// branch) or stop-gradient constants (target branch).
template <class T>
std::map<std::string, ad::Var<T>> make_param_vars(ad::Graph<T>& g, const NetworkParams<T>& np,
                                                  bool trainable) {
    std::map<std::string, ad::Var<T>> out;
    for (const auto& [name, t] : np.params)
        out[name] = trainable ? g.leaf(t) : g.constant(t);
    return out;
}

enum class BnMode { kTrain, kEval };

// Forward pass with taps. In train mode the branch's running statistics are
// updated in place (momentum 0.1); eval mode reads them and leaves them
// untouched.
template <class T>
PyramidVars<T> forward(ad::Graph<T>& g, const std::map<std::string, ad::Var<T>>& pv,
                       NetworkParams<T>& np, const EncoderConfig& cfg, ad::Var<T> x,
                       BnMode mode, T bn_momentum = T(0.1)) {
    const T eps = T(1e-5);
    auto block = [&](ad::Var<T> in, const std::string& name, int stride) {
        ad::Var<T> y = ad::conv2d(in, pv.at(name + ".w"), pv.at(name + ".b"), stride);
        if (mode == BnMode::kTrain) {
            Tensor<T> bm, bv;
            y = ad::batchnorm_train(y, pv.at(name + ".gamma"), pv.at(name + ".beta"), eps, &bm,
                                    &bv);
            auto& rm = np.run_mean.at(name);
            auto& rv = np.run_var.at(name);
            for (int64_t i = 0; i < rm.size(); ++i) {
                rm[i] = (T(1) - bn_momentum) * rm[i] + bn_momentum * bm[i];
                rv[i] = (T(1) - bn_momentum) * rv[i] + bn_momentum * bv[i];
            }
        } else {
            y = ad::batchnorm_eval(y, pv.at(name + ".gamma"), pv.at(name + ".beta"),
                                   np.run_mean.at(name), np.run_var.at(name), eps);
        }
        return ad::relu(y);
    };

    PyramidVars<T> out;
    ad::Var<T> h = block(x, "stem", 2);
    for (int s = 1; s <= 4; ++s) {
        std::string base = "s" + std::to_string(s);
        h = block(h, base + ".c1", 2);
        h = block(h, base + ".c2", 1);
        if (s == 2) out.f2 = h;
        if (s == 3) out.f3 = h;
        if (s == 4) out.f4 = h;
    }
    out.rep = ad::global_avg_pool(out.f4);
    ad::Var<T> ph = ad::relu(ad::linear(out.rep, pv.at("proj.l1.w"), pv.at("proj.l1.b")));
    out.proj = ad::linear(ph, pv.at("proj.l2.w"), pv.at("proj.l2.b"));
    if (np.has_predictor) {
        ad::Var<T> qh = ad::relu(ad::linear(out.proj, pv.at("pred.l1.w"), pv.at("pred.l1.b")));
        out.pred = ad::linear(qh, pv.at("pred.l2.w"), pv.at("pred.l2.b"));
    }
    return out;
}

// Plain (value-only) pyramid for the target branch and for probing.
template <class T>
struct Pyramid {
    Tensor<T> f2, f3, f4, rep, proj, pred;
};

template <class T>
Pyramid<T> forward_plain(NetworkParams<T>& np, const EncoderConfig& cfg, const Tensor<T>& x,
                         BnMode mode, T bn_momentum = T(0.1)) {
    ad::Graph<T> g;
    auto pv = make_param_vars(g, np, /*trainable=*/false);
    PyramidVars<T> p = forward(g, pv, np, cfg, g.constant(x), mode, bn_momentum);
    Pyramid<T> out;
    out.f2 = p.f2.val();
    out.f3 = p.f3.val();
    out.f4 = p.f4.val();
    out.rep = p.rep.val();
    out.proj = p.proj.val();
    if (np.has_predictor) out.pred = p.pred.val();
    return out;
}

// xi' = mu xi + (1-mu) theta over every tensor the target branch owns.
template <class T>
void ema_blend(const NetworkParams<T>& online, NetworkParams<T>& target, T mu) {
    if (mu < T(0) || mu > T(1)) throw std::invalid_argument("ema_blend: mu outside [0,1]");
    for (auto& [name, t] : target.params) {
        const auto& o = online.params.at(name);
        if (!t.same_shape(o)) throw std::invalid_argument("ema_blend: shape mismatch " + name);
        for (int64_t i = 0; i < t.size(); ++i) t[i] = mu * t[i] + (T(1) - mu) * o[i];
    }
}

}  // namespace sarl
