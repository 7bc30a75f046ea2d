#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>

#include <json.hpp>

#include "sarl/augment.hpp"
#include "sarl/checkpoint.hpp"
#include "sarl/losses.hpp"
#include "sarl/optimizer.hpp"
#include "sarl/synthdata.hpp"

namespace sarl {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 64;
    double base_lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double ema_momentum = 0.996;
    uint64_t seed = 1;
    bool cosine_lr = false;
    EncoderConfig encoder;
    LossConfig loss;
    AugmentConfig augment;
    Modality modality = Modality::kFused;

    void validate() const {
        if (epochs < 0 || batch_size < 1) throw std::invalid_argument("TrainConfig: bad loop sizes");
        if (base_lr <= 0 || weight_decay < 0) throw std::invalid_argument("TrainConfig: bad rates");
        if (ema_momentum <= 0 || ema_momentum >= 1)
            throw std::invalid_argument("TrainConfig: ema momentum must lie in (0,1)");
        if (loss.lambda_sal < 0 || loss.lambda_ppda < 0 || loss.lambda_ram < 0)
            throw std::invalid_argument("TrainConfig: negative lambda");
        encoder.validate();
    }
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

template <class T>
struct TrainState {
    TrainConfig config;
    NetworkParams<T> online;  // theta, with predictor
    NetworkParams<T> target;  // xi, EMA-only
    Tensor<T> bank;           // [K, C3] unit rows
    AdamW<T> opt;
    int64_t step = 0;
    int epoch = 0;
    Rng rng;

    explicit TrainState(const TrainConfig& cfg)
        : config(cfg),
          opt(static_cast<T>(cfg.base_lr), static_cast<T>(cfg.beta1), static_cast<T>(cfg.beta2),
              static_cast<T>(cfg.weight_decay)),
          rng(cfg.seed) {}
};

template <class T>
void renormalize_bank(Tensor<T>& bank) {
    int K = bank.dim(0), C = bank.dim(1);
    for (int k = 0; k < K; ++k) {
        T s = 0;
        for (int c = 0; c < C; ++c) s += bank.at2(k, c) * bank.at2(k, c);
        T inv = T(1) / std::max(std::sqrt(s), T(1e-12));
        for (int c = 0; c < C; ++c) bank.at2(k, c) *= inv;
    }
}

template <class T>
TrainState<T> init_train_state(const TrainConfig& cfg) {
    cfg.validate();
    TrainState<T> st(cfg);
    st.online = init_params<T>(cfg.encoder, cfg.seed, /*with_predictor=*/true);
    st.target = init_params<T>(cfg.encoder, cfg.seed, /*with_predictor=*/false);
    // xi_0 = theta_0 on the shared tensors (identical init seed already
    // guarantees it; assignment makes the contract explicit).
    for (auto& [name, t] : st.target.params) t = st.online.params.at(name);
    int c3 = cfg.encoder.stage_channels[2];
    st.bank = Tensor<T>({cfg.loss.num_prototypes, c3});
    Rng brng = Rng(cfg.seed).split(0x42);
    for (auto& v : st.bank.v) v = static_cast<T>(brng.normal());
    renormalize_bank(st.bank);
    return st;
}

// Per-dimension std across the batch plus the collapse alarm.
template <class T>
struct CollapseStats {
    std::vector<T> per_dim_std;
    T mean_std = 0;
    bool alarm = false;
};

template <class T>
CollapseStats<T> collapse_monitor(const Tensor<T>& embeddings) {
    if (embeddings.rank() != 2 || embeddings.dim(0) < 8)
        throw std::invalid_argument("collapse_monitor: need a batch of at least 8");
    int N = embeddings.dim(0), D = embeddings.dim(1);
    CollapseStats<T> out;
    out.per_dim_std.resize(D);
    for (int d = 0; d < D; ++d) {
        T mean = 0;
        for (int n = 0; n < N; ++n) mean += embeddings.at2(n, d);
        mean /= static_cast<T>(N);
        T var = 0;
        for (int n = 0; n < N; ++n) {
            T diff = embeddings.at2(n, d) - mean;
            var += diff * diff;
        }
        out.per_dim_std[d] = std::sqrt(var / static_cast<T>(N));
        out.mean_std += out.per_dim_std[d];
    }
    out.mean_std /= static_cast<T>(D);
    out.alarm = out.mean_std < T(1e-3);
    return out;
}

struct StepAugmentRecord {
    std::vector<ViewParams> view1, view2;
};

template <class T>
struct StepResult {
    LossReport<T> report;
    CollapseStats<T> collapse;
    StepAugmentRecord augments;
};

// One SARL training step over a batch of source images (render resolution).
// Order of effects: optimizer touches {theta, bank} only, then the EMA
// updates xi from the new theta.
template <class T>
StepResult<T> train_step(TrainState<T>& st, const std::vector<const Image*>& batch) {
    const TrainConfig& cfg = st.config;
    int N = static_cast<int>(batch.size());
    int S = cfg.encoder.input_size;
    StepResult<T> out;

    std::vector<AffineWarp> w12(N), w21(N);
    Tensor<T> x1({N, 3, S, S}), x2({N, 3, S, S});
    for (int n = 0; n < N; ++n) {
        const Image& src = *batch[n];
        ViewParams p1 = sample_view_params(st.rng, src.h, src.w, S, cfg.augment);
        ViewParams p2 = sample_view_params(st.rng, src.h, src.w, S, cfg.augment);
        w12[n] = warp_between(p1, p2);
        w21[n] = warp_between(p2, p1);
        Image v1 = apply_view(src, p1, cfg.augment);
        Image v2 = apply_view(src, p2, cfg.augment);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x) {
                    x1.at4(n, c, y, x) = static_cast<T>(v1.at(c, y, x));
                    x2.at4(n, c, y, x) = static_cast<T>(v2.at(c, y, x));
                }
        out.augments.view1.push_back(p1);
        out.augments.view2.push_back(p2);
    }

    ad::Graph<T> g;
    auto pv = make_param_vars(g, st.online, /*trainable=*/true);
    PyramidVars<T> on1 = forward(g, pv, st.online, cfg.encoder, g.constant(x1), BnMode::kTrain);
    PyramidVars<T> on2 = forward(g, pv, st.online, cfg.encoder, g.constant(x2), BnMode::kTrain);
    Pyramid<T> tg1 = forward_plain(st.target, cfg.encoder, x1, BnMode::kTrain);
    Pyramid<T> tg2 = forward_plain(st.target, cfg.encoder, x2, BnMode::kTrain);

    ad::Var<T> bank_var = g.leaf(st.bank);
    CombinedLossInputs<T> inputs;
    inputs.online_v1 = &on1;
    inputs.online_v2 = &on2;
    inputs.target_v1 = &tg1;
    inputs.target_v2 = &tg2;
    inputs.warps_12 = &w12;
    inputs.warps_21 = &w21;
    inputs.bank = bank_var;
    ad::Var<T> total = combined_loss(inputs, cfg.loss, out.report);

    if (!std::isfinite(static_cast<double>(out.report.total)))
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(st.step));

    g.backward(total);

    int64_t total_steps_hint = st.step + 1;
    (void)total_steps_hint;
    for (auto& [name, param] : st.online.params) {
        // weight decay on all network parameters; the bank is excluded below
        st.opt.step(name, param, g.grad(pv.at(name)), /*apply_decay=*/true);
    }
    st.opt.step("prototype_bank", st.bank, g.grad(bank_var), /*apply_decay=*/false);
    renormalize_bank(st.bank);

    ema_blend(st.online, st.target, static_cast<T>(cfg.ema_momentum));
    ++st.step;

    if (N >= 8) out.collapse = collapse_monitor(on1.proj.val());
    return out;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

template <class T>
void save_checkpoint(const TrainState<T>& st, const std::string& path) {
    namespace fs = std::filesystem;
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
        uint32_t magic = ckpt::kMagic, version = ckpt::kVersion;
        uint32_t scalar = sizeof(T);
        f.write(reinterpret_cast<const char*>(&magic), sizeof(magic));
        f.write(reinterpret_cast<const char*>(&version), sizeof(version));
        f.write(reinterpret_cast<const char*>(&scalar), sizeof(scalar));
        ckpt::write_string(f, train_config_to_json(st.config).dump());
        int64_t step = st.step;
        int32_t epoch = st.epoch;
        f.write(reinterpret_cast<const char*>(&step), sizeof(step));
        f.write(reinterpret_cast<const char*>(&epoch), sizeof(epoch));
        auto rs = st.rng.state();
        f.write(reinterpret_cast<const char*>(rs.data()), sizeof(rs));
        ckpt::write_tensor_map(f, st.online.params);
        ckpt::write_tensor_map(f, st.online.run_mean);
        ckpt::write_tensor_map(f, st.online.run_var);
        ckpt::write_tensor_map(f, st.target.params);
        ckpt::write_tensor_map(f, st.target.run_mean);
        ckpt::write_tensor_map(f, st.target.run_var);
        std::map<std::string, Tensor<T>> bank_map{{"bank", st.bank}};
        ckpt::write_tensor_map(f, bank_map);
        ckpt::write_tensor_map(f, const_cast<TrainState<T>&>(st).opt.moments1());
        ckpt::write_tensor_map(f, const_cast<TrainState<T>&>(st).opt.moments2());
        std::map<std::string, Tensor<T>> tmap;
        for (const auto& [k, v] : const_cast<TrainState<T>&>(st).opt.steps())
            tmap[k] = Tensor<T>::scalar(static_cast<T>(v));
        ckpt::write_tensor_map(f, tmap);
        if (!f) throw std::runtime_error("save_checkpoint: write failed " + tmp);
    }
    fs::rename(tmp, path);
}

template <class T>
TrainState<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint not found: " + path);
    uint32_t magic = 0, version = 0, scalar = 0;
    f.read(reinterpret_cast<char*>(&magic), sizeof(magic));
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    f.read(reinterpret_cast<char*>(&scalar), sizeof(scalar));
    if (magic != ckpt::kMagic) throw std::runtime_error("checkpoint: bad magic in " + path);
    if (version != ckpt::kVersion) throw std::runtime_error("checkpoint: unsupported version");
    if (scalar != sizeof(T)) throw std::runtime_error("checkpoint: scalar width mismatch");
    TrainConfig cfg = train_config_from_json(nlohmann::json::parse(ckpt::read_string(f)));
    TrainState<T> st(cfg);
    int64_t step = 0;
    int32_t epoch = 0;
    f.read(reinterpret_cast<char*>(&step), sizeof(step));
    f.read(reinterpret_cast<char*>(&epoch), sizeof(epoch));
    st.step = step;
    st.epoch = epoch;
    std::array<uint64_t, 4> rs{};
    f.read(reinterpret_cast<char*>(rs.data()), sizeof(rs));
    st.rng.set_state(rs);
    st.online.has_predictor = true;
    st.online.params = ckpt::read_tensor_map<T>(f);
    st.online.run_mean = ckpt::read_tensor_map<T>(f);
    st.online.run_var = ckpt::read_tensor_map<T>(f);
    st.target.has_predictor = false;
    st.target.params = ckpt::read_tensor_map<T>(f);
    st.target.run_mean = ckpt::read_tensor_map<T>(f);
    st.target.run_var = ckpt::read_tensor_map<T>(f);
    st.bank = ckpt::read_tensor_map<T>(f).at("bank");
    st.opt.moments1() = ckpt::read_tensor_map<T>(f);
    st.opt.moments2() = ckpt::read_tensor_map<T>(f);
    for (const auto& [k, v] : ckpt::read_tensor_map<T>(f))
        st.opt.steps()[k] = static_cast<int64_t>(v[0]);
    return st;
}

// ---------------------------------------------------------------------------
// Pretraining loop
// ---------------------------------------------------------------------------

nlohmann::json view_params_to_json(const ViewParams& p);

// Runs (or resumes) SARL pretraining on the dataset's unlabeled train+val
// pool. Writes metrics.log, augment_replay.log and one checkpoint per epoch
// under run_dir.
template <class T>
void pretrain(TrainState<T>& st, const Dataset& ds, const std::string& run_dir) {
    namespace fs = std::filesystem;
    const TrainConfig& cfg = st.config;
    fs::create_directories(fs::path(run_dir) / "ckpt");

    // Unlabeled pool: train + val splits.
    std::vector<int> pool = ds.split_indices(Split::kTrain);
    for (int i : ds.split_indices(Split::kVal)) pool.push_back(i);
    std::sort(pool.begin(), pool.end());
    if (static_cast<int>(pool.size()) < cfg.batch_size)
        throw std::invalid_argument("pretrain: pool smaller than one batch");

    std::vector<ImageU8> rendered = render_dataset(ds, cfg.modality);
    std::vector<Image> images;
    images.reserve(pool.size());
    for (int i : pool) images.push_back(dequantize(rendered[i]));

    for (int c = 0; c < 3; ++c) {
        st.config.augment.norm_mean[c] = ds.norm_mean[c];
        st.config.augment.norm_std[c] = ds.norm_std[c];
    }

    std::ofstream(fs::path(run_dir) / "config.snapshot")
        << train_config_to_json(st.config).dump(2) << "\n";

    std::ofstream metrics(fs::path(run_dir) / "metrics.log", std::ios::app);
    std::ofstream replay(fs::path(run_dir) / "augment_replay.log", std::ios::app);

    int steps_per_epoch = static_cast<int>(images.size()) / cfg.batch_size;
    int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * cfg.epochs;

    if (cfg.epochs == 0) {
        save_checkpoint(st, (fs::path(run_dir) / "ckpt" / "epoch_0000").string());
        return;
    }

    char name[32];
    while (st.epoch < cfg.epochs) {
        std::vector<int> order(images.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
            int j = static_cast<int>(st.rng.uniform_int(i + 1));
            std::swap(order[i], order[j]);
        }
        for (int s = 0; s < steps_per_epoch; ++s) {
            if (cfg.cosine_lr) {
                double t = static_cast<double>(st.step) / static_cast<double>(total_steps);
                st.opt.set_lr(static_cast<T>(cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * t))));
            }
            std::vector<const Image*> batch(cfg.batch_size);
            for (int b = 0; b < cfg.batch_size; ++b)
                batch[b] = &images[order[s * cfg.batch_size + b]];
            StepResult<T> res;
            try {
                res = train_step(st, batch);
            } catch (const std::runtime_error& e) {
                // Serialize the offending step for reproduction, then abort.
                nlohmann::json bundle{{"step", st.step},
                                      {"epoch", st.epoch},
                                      {"error", e.what()},
                                      {"config", train_config_to_json(cfg)}};
                std::ofstream(fs::path(run_dir) / "abort_bundle.json") << bundle.dump(2);
                throw;
            }
            metrics << nlohmann::json{{"step", st.step - 1},
                                      {"epoch", st.epoch},
                                      {"global", res.report.global},
                                      {"sal", res.report.sal},
                                      {"ppda", res.report.ppda},
                                      {"ram", res.report.ram},
                                      {"total", res.report.total},
                                      {"lr", static_cast<double>(st.opt.lr())},
                                      {"sal_empty_masks", res.report.sal_empty_masks},
                                      {"ram_no_valid_pairs", res.report.ram_no_valid_pairs},
                                      {"proj_std_mean", res.collapse.mean_std}}
                        .dump()
                    << "\n";
            nlohmann::json views = nlohmann::json::array();
            for (size_t b = 0; b < res.augments.view1.size(); ++b)
                views.push_back({view_params_to_json(res.augments.view1[b]),
                                 view_params_to_json(res.augments.view2[b])});
            replay << nlohmann::json{{"step", st.step - 1}, {"views", views}}.dump() << "\n";
        }
        ++st.epoch;
        std::snprintf(name, sizeof(name), "epoch_%04d", st.epoch);
        save_checkpoint(st, (fs::path(run_dir) / "ckpt" / name).string());
    }
}

}  // namespace sarl
