#include "sarl/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace sarl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

MetricsReport classification_metrics(const Tensor<float>& scores, const std::vector<int>& labels,
                                     Task task) {
    if (scores.dim(0) != static_cast<int>(labels.size()))
        throw std::invalid_argument("classification_metrics: length mismatch");
    int N = scores.dim(0), C = scores.dim(1);
    int hit1 = 0, hit5 = 0;
    for (int n = 0; n < N; ++n) {
        // Rank classes by (score desc, index asc); exact counting.
        std::vector<int> order(C);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return scores.at2(n, a) > scores.at2(n, b);
        });
        if (order[0] == labels[n]) ++hit1;
        int k = std::min(5, C);
        for (int r = 0; r < k; ++r)
            if (order[r] == labels[n]) {
                ++hit5;
                break;
            }
    }
    MetricsReport mr;
    mr.task = task;
    mr.classification = true;
    mr.top1 = 100.0 * hit1 / N;
    mr.top5 = 100.0 * hit5 / N;
    return mr;
}

MetricsReport regression_metrics(const Tensor<float>& preds,
                                 const std::vector<std::array<double, 3>>& targets, Task task) {
    if (preds.dim(0) != static_cast<int>(targets.size()))
        throw std::invalid_argument("regression_metrics: length mismatch");
    int N = preds.dim(0);
    MetricsReport mr;
    mr.task = task;
    mr.classification = false;
    for (int a = 0; a < 3; ++a) {
        double s = 0;
        for (int n = 0; n < N; ++n)
            s += std::abs(static_cast<double>(preds.at2(n, a)) - targets[n][a]);
        mr.per_axis_mae[a] = s / N;
        mr.avg_mae += mr.per_axis_mae[a] / 3.0;
    }
    return mr;
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

Tensor<float> probe_input(const Image& src, int input_size, const float mean[3],
                          const float stdev[3]) {
    Image r = crop_resize(src, 0, 0, src.h, src.w, input_size);
    normalize_inplace(r, mean, stdev);
    Tensor<float> out({3, input_size, input_size});
    std::copy(r.v.begin(), r.v.end(), out.v.begin());
    return out;
}

namespace {

Tensor<float> batched_reps(NetworkParams<float>& np, const EncoderConfig& cfg,
                           const std::vector<Image>& images, int batch, bool multipool) {
    int S = cfg.input_size;
    int N = static_cast<int>(images.size());
    int c3 = cfg.stage_channels[2], c4 = cfg.stage_channels[3];
    int D = multipool ? c3 + c4 : cfg.rep_dim;
    Tensor<float> out({N, D});
    for (int n0 = 0; n0 < N; n0 += batch) {
        int B = std::min(batch, N - n0);
        Tensor<float> x({B, 3, S, S});
        for (int b = 0; b < B; ++b) {
            const Image& im = images[n0 + b];
            std::copy(im.v.begin(), im.v.end(), x.v.begin() + static_cast<int64_t>(b) * 3 * S * S);
        }
        Pyramid<float> p = forward_plain(np, cfg, x, BnMode::kEval);
        for (int b = 0; b < B; ++b) {
            if (multipool) {
                int H3 = p.f3.dim(2), W3 = p.f3.dim(3);
                for (int c = 0; c < c3; ++c) {
                    float s = 0;
                    for (int y = 0; y < H3; ++y)
                        for (int xx = 0; xx < W3; ++xx) s += p.f3.at4(b, c, y, xx);
                    out.at2(n0 + b, c) = s / static_cast<float>(H3 * W3);
                }
                for (int c = 0; c < c4; ++c) out.at2(n0 + b, c3 + c) = p.rep.at2(b, c);
            } else {
                for (int d = 0; d < D; ++d) out.at2(n0 + b, d) = p.rep.at2(b, d);
            }
        }
    }
    return out;
}

}  // namespace

Tensor<float> extract_features(NetworkParams<float>& np, const EncoderConfig& cfg,
                               const std::vector<Image>& images, int batch) {
    // Images are expected pre-normalized (probe_input); channel-major S x S.
    return batched_reps(np, cfg, images, batch, /*multipool=*/false);
}

Tensor<float> extract_multipool_features(NetworkParams<float>& np, const EncoderConfig& cfg,
                                         const std::vector<Image>& images, int batch) {
    return batched_reps(np, cfg, images, batch, /*multipool=*/true);
}

double params_checksum(const NetworkParams<float>& np) {
    double s = 0;
    int64_t k = 1;
    auto fold = [&](const std::map<std::string, Tensor<float>>& m) {
        for (const auto& [name, t] : m)
            for (int64_t i = 0; i < t.size(); ++i) s += static_cast<double>(t[i]) * ((k++ % 97) + 1);
    };
    fold(np.params);
    fold(np.run_mean);
    fold(np.run_var);
    return s;
}

// ---------------------------------------------------------------------------
// Probe-head training (closed-form gradients; no tape needed for a linear head)
// ---------------------------------------------------------------------------

namespace {

struct Head {
    Tensor<float> w, b;  // [D,C], [C]
};

Tensor<float> head_scores(const Head& h, const Tensor<float>& feats,
                          const std::vector<int>& rows) {
    int D = h.w.dim(0), C = h.w.dim(1);
    Tensor<float> out({static_cast<int>(rows.size()), C});
    for (size_t r = 0; r < rows.size(); ++r)
        for (int c = 0; c < C; ++c) {
            float s = h.b[c];
            for (int d = 0; d < D; ++d) s += feats.at2(rows[r], d) * h.w.at2(d, c);
            out.at2(static_cast<int>(r), c) = s;
        }
    return out;
}

void softmax_rows_inplace(Tensor<float>& s) {
    int N = s.dim(0), C = s.dim(1);
    for (int n = 0; n < N; ++n) {
        float mx = s.at2(n, 0);
        for (int c = 1; c < C; ++c) mx = std::max(mx, s.at2(n, c));
        float z = 0;
        for (int c = 0; c < C; ++c) {
            s.at2(n, c) = std::exp(s.at2(n, c) - mx);
            z += s.at2(n, c);
        }
        for (int c = 0; c < C; ++c) s.at2(n, c) /= z;
    }
}

}  // namespace

MetricsReport probe_on_features(const Tensor<float>& feats, const Dataset& ds,
                                const std::vector<int>& train_idx,
                                const std::vector<int>& val_idx,
                                const std::vector<int>& test_idx, const ProbeConfig& pc) {
    Task task = pc.task;
    bool classify = task_is_classification(task);
    int D = feats.dim(1);
    int C = classify ? task_num_classes(task) : 3;
    Head h{Tensor<float>({D, C}), Tensor<float>({C})};

    std::vector<int> cls_labels(ds.samples.size(), 0);
    std::vector<std::array<double, 3>> reg_targets(ds.samples.size());
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        if (classify)
            cls_labels[i] = task_class_label(task, ds.samples[i].labels);
        else
            reg_targets[i] = task_regression_target(task, ds.samples[i].labels);
    }
    auto pick_cls = [&](const std::vector<int>& idx) {
        std::vector<int> out;
        for (int i : idx) out.push_back(cls_labels[i]);
        return out;
    };
    auto pick_reg = [&](const std::vector<int>& idx) {
        std::vector<std::array<double, 3>> out;
        for (int i : idx) out.push_back(reg_targets[i]);
        return out;
    };
    // Regression heads train in per-axis standardized target space (train-split
    // statistics) so no axis dominates the shared-learning-rate updates; the
    // reported metrics stay in the task's native units.
    std::array<double, 3> t_mean{}, t_std{1.0, 1.0, 1.0};
    if (!classify && !train_idx.empty()) {
        std::array<double, 3> var{};
        for (int i : train_idx)
            for (int a = 0; a < 3; ++a) t_mean[a] += reg_targets[i][a];
        for (int a = 0; a < 3; ++a) t_mean[a] /= static_cast<double>(train_idx.size());
        for (int i : train_idx)
            for (int a = 0; a < 3; ++a) {
                double d = reg_targets[i][a] - t_mean[a];
                var[a] += d * d;
            }
        for (int a = 0; a < 3; ++a)
            t_std[a] = std::max(std::sqrt(var[a] / static_cast<double>(train_idx.size())), 1e-8);
    }
    auto evaluate = [&](const Head& head, const std::vector<int>& idx) {
        Tensor<float> scores = head_scores(head, feats, idx);
        if (!classify)
            for (int n = 0; n < scores.dim(0); ++n)
                for (int a = 0; a < 3; ++a)
                    scores.at2(n, a) = static_cast<float>(scores.at2(n, a) * t_std[a] + t_mean[a]);
        return classify ? classification_metrics(scores, pick_cls(idx), task)
                        : regression_metrics(scores, pick_reg(idx), task);
    };

    SgdMomentum<float> sgd(static_cast<float>(pc.effective_lr()), 0.9f);
    AdamW<float> adamw(static_cast<float>(pc.effective_lr()), 0.9f, 0.999f,
                       static_cast<float>(pc.weight_decay));

    Rng rng(pc.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<int> order = train_idx;
    Head best = h;
    double best_metric = classify ? -1.0 : std::numeric_limits<double>::infinity();
    int epochs = pc.effective_epochs();

    for (int e = 0; e < epochs; ++e) {
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
            int j = static_cast<int>(rng.uniform_int(i + 1));
            std::swap(order[i], order[j]);
        }
        for (size_t s0 = 0; s0 < order.size(); s0 += pc.batch_size) {
            std::vector<int> rows(order.begin() + s0,
                                  order.begin() + std::min(s0 + pc.batch_size, order.size()));
            int B = static_cast<int>(rows.size());
            Tensor<float> g = head_scores(h, feats, rows);  // [B,C]
            if (classify) {
                softmax_rows_inplace(g);
                for (int b = 0; b < B; ++b) g.at2(b, cls_labels[rows[b]]) -= 1.f;
                for (auto& v : g.v) v /= static_cast<float>(B);
            } else {
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) {
                        float tgt = static_cast<float>((reg_targets[rows[b]][c] - t_mean[c]) /
                                                       t_std[c]);
                        g.at2(b, c) = 2.f * (g.at2(b, c) - tgt) / static_cast<float>(B * C);
                    }
            }
            Tensor<float> gw({D, C}), gb({C});
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    float gv = g.at2(b, c);
                    gb[c] += gv;
                    for (int d = 0; d < D; ++d) gw.at2(d, c) += feats.at2(rows[b], d) * gv;
                }
            if (classify) {
                sgd.step("w", h.w, gw);
                sgd.step("b", h.b, gb);
            } else {
                adamw.step("w", h.w, gw, /*apply_decay=*/true);
                adamw.step("b", h.b, gb, /*apply_decay=*/false);
            }
        }
        MetricsReport vm = evaluate(h, val_idx.empty() ? train_idx : val_idx);
        double metric = classify ? vm.top1 : vm.avg_mae;
        bool better = classify ? metric > best_metric : metric < best_metric;
        if (better) {
            best_metric = metric;
            best = h;
        }
    }
    MetricsReport out = evaluate(best, test_idx);
    out.seed = pc.seed;
    return out;
}

MetricsReport linear_probe(TrainState<float>& state, const ProbeConfig& pc, const Dataset& ds) {
    const EncoderConfig& ec = state.config.encoder;
    std::vector<ImageU8> rendered = render_dataset(ds, ds.modality);
    std::vector<Image> inputs;
    inputs.reserve(rendered.size());
    for (const auto& u8 : rendered) {
        Image im = dequantize(u8);
        Image r = crop_resize(im, 0, 0, im.h, im.w, ec.input_size);
        normalize_inplace(r, ds.norm_mean, ds.norm_std);
        inputs.push_back(std::move(r));
    }
    Tensor<float> feats = extract_features(state.online, ec, inputs);
    return probe_on_features(feats, ds, ds.split_indices(Split::kTrain),
                             ds.split_indices(Split::kVal), ds.split_indices(Split::kTest), pc);
}

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

std::vector<AblationCell> default_loss_subsets() {
    return {{"none", false, false, false},
            {"sal", true, false, false},
            {"ppda", false, true, false},
            {"ram", false, false, true},
            {"sal+ppda", true, true, false},
            {"ppda+ram", false, true, true},
            {"sal+ppda+ram", true, true, true}};
}

void write_results_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::ofstream f(path);
    f << "subset,modality,seed,task,top1,top5,mae_x,mae_y,mae_z,avg_mae\n";
    for (const auto& r : rows)
        f << r.subset << "," << r.modality << "," << r.seed << "," << r.task << "," << r.top1
          << "," << r.top5 << "," << r.mae_x << "," << r.mae_y << "," << r.mae_z << ","
          << r.avg_mae << "\n";
}

std::vector<AblationRow> read_results_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("results csv not found: " + path);
    std::vector<AblationRow> rows;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        AblationRow r;
        std::string tok;
        std::getline(ss, r.subset, ',');
        std::getline(ss, r.modality, ',');
        std::getline(ss, tok, ',');
        r.seed = std::stoull(tok);
        std::getline(ss, r.task, ',');
        std::getline(ss, tok, ',');
        r.top1 = std::stod(tok);
        std::getline(ss, tok, ',');
        r.top5 = std::stod(tok);
        std::getline(ss, tok, ',');
        r.mae_x = std::stod(tok);
        std::getline(ss, tok, ',');
        r.mae_y = std::stod(tok);
        std::getline(ss, tok, ',');
        r.mae_z = std::stod(tok);
        std::getline(ss, tok, ',');
        r.avg_mae = std::stod(tok);
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string render_results_table(const std::vector<AblationRow>& rows) {
    // Aggregate per (subset, modality, task) over seeds.
    struct Agg {
        std::vector<double> top1, mae;
    };
    std::map<std::string, Agg> cells;
    for (const auto& r : rows) {
        Agg& a = cells[r.subset + " | " + r.modality + " | " + r.task];
        a.top1.push_back(r.top1);
        a.mae.push_back(r.avg_mae);
    }
    auto mean_std = [](const std::vector<double>& v) {
        double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair<double, double>(m, std::sqrt(s / v.size()));
    };
    struct Line {
        std::string key;
        double sort_key;
        std::string text;
    };
    std::vector<Line> lines;
    for (const auto& [key, a] : cells) {
        auto [t1m, t1s] = mean_std(a.top1);
        auto [mm, ms] = mean_std(a.mae);
        bool regress = key.find("edge") != std::string::npos || mm > 0;
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%-40s  top1 %6.2f +/- %5.2f   avg-mae %8.4f +/- %6.4f",
                      key.c_str(), t1m, t1s, mm, ms);
        lines.push_back({key, regress ? mm : -t1m, buf});
    }
    std::sort(lines.begin(), lines.end(), [](const Line& a, const Line& b) {
        return a.sort_key < b.sort_key;
    });
    std::string out = "cell (subset | modality | task), ranked best-first\n";
    for (const auto& l : lines) out += l.text + "\n";
    return out;
}

std::vector<AblationRow> ablation_matrix(const TrainConfig& base,
                                         const std::vector<AblationCell>& subsets,
                                         const std::vector<Modality>& modes,
                                         const std::vector<uint64_t>& seeds, const Dataset& ds,
                                         const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::vector<AblationRow> rows;
    for (const auto& cell : subsets)
        for (Modality mode : modes)
            for (uint64_t seed : seeds) {
                TrainConfig cfg = base;
                cfg.loss.use_sal = cell.use_sal;
                cfg.loss.use_ppda = cell.use_ppda;
                cfg.loss.use_ram = cell.use_ram;
                cfg.modality = mode;
                cfg.seed = seed;
                std::string run = out_dir + "/runs/" + cell.name + "_" +
                                  modality_to_string(mode) + "_s" + std::to_string(seed);
                fs::create_directories(run);
                TrainState<float> st = init_train_state<float>(cfg);
                pretrain(st, ds, run);

                Dataset probe_ds = ds;
                probe_ds.modality = mode;
                for (Task task : {Task::kShape, Task::kEdgePose}) {
                    ProbeConfig pc;
                    pc.task = task;
                    pc.seed = seed;
                    MetricsReport mr = linear_probe(st, pc, probe_ds);
                    AblationRow r;
                    r.subset = cell.name;
                    r.modality = modality_to_string(mode);
                    r.seed = seed;
                    r.task = task_to_string(task);
                    r.top1 = mr.top1;
                    r.top5 = mr.top5;
                    r.mae_x = mr.per_axis_mae[0];
                    r.mae_y = mr.per_axis_mae[1];
                    r.mae_z = mr.per_axis_mae[2];
                    r.avg_mae = mr.avg_mae;
                    rows.push_back(std::move(r));
                }
                write_results_csv(out_dir + "/results.csv", rows);
            }
    return rows;
}

// ---------------------------------------------------------------------------
// Multipool fine-tune
// ---------------------------------------------------------------------------

MetricsReport multipool_finetune(TrainState<float>& state, const Dataset& ds, Task task,
                                 const FinetuneConfig& fc) {
    if (!task_is_classification(task))
        throw std::invalid_argument("multipool_finetune: classification tasks only");
    const EncoderConfig& ec = state.config.encoder;
    int C = task_num_classes(task);
    int c3 = ec.stage_channels[2], c4 = ec.stage_channels[3];

    // Work on a copy so callers keep their frozen encoder; stages 1-3 are
    // never touched even inside the copy.
    NetworkParams<float> np = state.online;

    std::vector<ImageU8> rendered = render_dataset(ds, ds.modality);
    std::vector<Image> inputs;
    for (const auto& u8 : rendered) {
        Image im = dequantize(u8);
        Image r = crop_resize(im, 0, 0, im.h, im.w, ec.input_size);
        normalize_inplace(r, ds.norm_mean, ds.norm_std);
        inputs.push_back(std::move(r));
    }
    int N = static_cast<int>(inputs.size());
    int S = ec.input_size;

    // Cache frozen F3 maps once (eval mode).
    int H3 = ec.layer_side(3);
    Tensor<float> f3_all({N, c3, H3, H3});
    for (int n0 = 0; n0 < N; n0 += 32) {
        int B = std::min(32, N - n0);
        Tensor<float> x({B, 3, S, S});
        for (int b = 0; b < B; ++b)
            std::copy(inputs[n0 + b].v.begin(), inputs[n0 + b].v.end(),
                      x.v.begin() + static_cast<int64_t>(b) * 3 * S * S);
        Pyramid<float> p = forward_plain(np, ec, x, BnMode::kEval);
        std::copy(p.f3.v.begin(), p.f3.v.end(),
                  f3_all.v.begin() + static_cast<int64_t>(n0) * c3 * H3 * H3);
    }

    std::vector<int> labels(N);
    for (int i = 0; i < N; ++i) labels[i] = task_class_label(task, ds.samples[i].labels);

    Tensor<float> w3({c3, C}), w4({c4, C}), bias({C});
    AdamW<float> opt(static_cast<float>(fc.base_lr), 0.9f, 0.999f,
                     static_cast<float>(fc.weight_decay));
    Rng rng(fc.seed ^ 0x6a09e667f3bcc909ull);

    std::vector<int> train_idx = ds.split_indices(Split::kTrain);
    std::vector<int> val_idx = ds.split_indices(Split::kVal);
    std::vector<int> test_idx = ds.split_indices(Split::kTest);

    auto slice_batch = [&](const std::vector<int>& rows) {
        int B = static_cast<int>(rows.size());
        Tensor<float> x({B, c3, H3, H3});
        int64_t len = static_cast<int64_t>(c3) * H3 * H3;
        for (int b = 0; b < B; ++b)
            std::copy(f3_all.v.begin() + rows[b] * len, f3_all.v.begin() + (rows[b] + 1) * len,
                      x.v.begin() + b * len);
        return x;
    };

    auto forward_scores = [&](const std::vector<int>& rows, bool train_mode, ad::Graph<float>& g,
                              std::map<std::string, ad::Var<float>>& leaves) {
        Tensor<float> x = slice_batch(rows);
        ad::Var<float> h = g.constant(std::move(x));
        const float eps = 1e-5f;
        auto block = [&](ad::Var<float> in, const std::string& name, int stride) {
            ad::Var<float> y = ad::conv2d(in, leaves.at(name + ".w"), leaves.at(name + ".b"),
                                          stride);
            if (train_mode && !fc.freeze_stage4) {
                Tensor<float> bm, bv;
                y = ad::batchnorm_train(y, leaves.at(name + ".gamma"), leaves.at(name + ".beta"),
                                        eps, &bm, &bv);
                auto& rm = np.run_mean.at(name);
                auto& rv = np.run_var.at(name);
                for (int64_t i = 0; i < rm.size(); ++i) {
                    rm[i] = 0.9f * rm[i] + 0.1f * bm[i];
                    rv[i] = 0.9f * rv[i] + 0.1f * bv[i];
                }
            } else {
                y = ad::batchnorm_eval(y, leaves.at(name + ".gamma"), leaves.at(name + ".beta"),
                                       np.run_mean.at(name), np.run_var.at(name), eps);
            }
            return ad::relu(y);
        };
        ad::Var<float> f4 = block(block(h, "s4.c1", 2), "s4.c2", 1);
        ad::Var<float> p4 = ad::global_avg_pool(f4);
        // pooled frozen F3 of the same rows
        int B = static_cast<int>(rows.size());
        Tensor<float> p3t({B, c3});
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < c3; ++c) {
                float s = 0;
                for (int y = 0; y < H3; ++y)
                    for (int xx = 0; xx < H3; ++xx) s += f3_all.at4(rows[b], c, y, xx);
                p3t.at2(b, c) = s / static_cast<float>(H3 * H3);
            }
        ad::Var<float> part4 = ad::matmul(p4, leaves.at("head.w4"));
        ad::Var<float> part3 = ad::matmul(g.constant(std::move(p3t)), leaves.at("head.w3"));
        ad::Var<float> logits = ad::add(part3, part4);
        // broadcast bias
        Tensor<float> zb({B, C});
        const auto& bb = leaves.at("head.b").val();
        ad::Var<float> biasful = g.make(
            [&] {
                Tensor<float> t({B, C});
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) t.at2(b, c) = bb[c];
                return t;
            }(),
            true,
            [bi = leaves.at("head.b").idx, B, C](ad::Graph<float>& gg,
                                                 ad::Graph<float>::Node& n) {
                if (auto* gbuf = gg.grad_buf(bi))
                    for (int b = 0; b < B; ++b)
                        for (int c = 0; c < C; ++c) (*gbuf)[c] += n.grad.at2(b, c);
            });
        (void)zb;
        return ad::add(logits, biasful);
    };

    auto make_leaves = [&](ad::Graph<float>& g, bool train_stage4) {
        std::map<std::string, ad::Var<float>> leaves;
        for (const std::string& base : {std::string("s4.c1"), std::string("s4.c2")})
            for (const std::string& suf :
                 {std::string(".w"), std::string(".b"), std::string(".gamma"),
                  std::string(".beta")}) {
                const std::string name = base + suf;
                leaves[name] = train_stage4 ? g.leaf(np.params.at(name))
                                            : g.constant(np.params.at(name));
            }
        leaves["head.w3"] = g.leaf(w3);
        leaves["head.w4"] = g.leaf(w4);
        leaves["head.b"] = g.leaf(bias);
        return leaves;
    };

    auto eval_top1 = [&](const std::vector<int>& idx) {
        ad::Graph<float> g;
        auto leaves = make_leaves(g, false);
        Tensor<float> scores = forward_scores(idx, /*train_mode=*/false, g, leaves).val();
        std::vector<int> lab;
        for (int i : idx) lab.push_back(labels[i]);
        return classification_metrics(scores, lab, task);
    };

    int64_t total_steps =
        static_cast<int64_t>(fc.epochs) *
        std::max<int64_t>(1, static_cast<int64_t>(train_idx.size()) / fc.batch_size);
    int64_t step = 0;
    double best_val = -1;
    NetworkParams<float> best_np = np;
    Tensor<float> bw3 = w3, bw4 = w4, bb2 = bias;

    bool train_s4 = !fc.freeze_stage4;
    for (int e = 0; e < fc.epochs; ++e) {
        std::vector<int> order = train_idx;
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
            int j = static_cast<int>(rng.uniform_int(i + 1));
            std::swap(order[i], order[j]);
        }
        for (size_t s0 = 0; s0 + fc.batch_size <= order.size(); s0 += fc.batch_size) {
            std::vector<int> rows(order.begin() + s0, order.begin() + s0 + fc.batch_size);
            ad::Graph<float> g;
            auto leaves = make_leaves(g, train_s4);
            ad::Var<float> logits = forward_scores(rows, /*train_mode=*/true, g, leaves);
            // cross-entropy with the classic softmax-minus-onehot backward
            Tensor<float> probs = logits.val();
            softmax_rows_inplace(probs);
            int B = static_cast<int>(rows.size());
            float loss = 0;
            for (int b = 0; b < B; ++b)
                loss -= std::log(std::max(probs.at2(b, labels[rows[b]]), 1e-12f)) / B;
            ad::Var<float> lvar = g.make(
                Tensor<float>::scalar(loss), true,
                [li = logits.idx, probs, rows, &labels, B](ad::Graph<float>& gg,
                                                           ad::Graph<float>::Node& n) {
                    if (auto* gl = gg.grad_buf(li)) {
                        int Cc = probs.dim(1);
                        for (int b = 0; b < B; ++b)
                            for (int c = 0; c < Cc; ++c)
                                gl->at2(b, c) +=
                                    n.grad[0] *
                                    (probs.at2(b, c) - (c == labels[rows[b]] ? 1.f : 0.f)) / B;
                    }
                });
            g.backward(lvar);
            double t = static_cast<double>(step) / std::max<int64_t>(1, total_steps);
            opt.set_lr(static_cast<float>(fc.base_lr * 0.5 * (1.0 + std::cos(M_PI * t))));
            if (train_s4)
                for (const std::string& base : {std::string("s4.c1"), std::string("s4.c2")})
                    for (const std::string& suf :
                         {std::string(".w"), std::string(".b"), std::string(".gamma"),
                          std::string(".beta")}) {
                        const std::string name = base + suf;
                        opt.step(name, np.params.at(name), g.grad(leaves.at(name)), true);
                    }
            opt.step("head.w3", w3, g.grad(leaves.at("head.w3")), true);
            opt.step("head.w4", w4, g.grad(leaves.at("head.w4")), true);
            opt.step("head.b", bias, g.grad(leaves.at("head.b")), false);
            ++step;
        }
        MetricsReport vm = eval_top1(val_idx.empty() ? train_idx : val_idx);
        if (vm.top1 > best_val) {
            best_val = vm.top1;
            best_np = np;
            bw3 = w3;
            bw4 = w4;
            bb2 = bias;
        }
    }
    np = best_np;
    w3 = bw3;
    w4 = bw4;
    bias = bb2;
    MetricsReport out = eval_top1(test_idx);
    out.seed = fc.seed;
    return out;
}

}  // namespace sarl
