#pragma once

#include <string>
#include <vector>

#include "sarl/trainer.hpp"

namespace sarl {

// ---------------------------------------------------------------------------
// Linear probing
// ---------------------------------------------------------------------------

struct ProbeConfig {
    Task task = Task::kShape;
    int epochs = 0;       // 0 -> family default (100 classification, 200 regression)
    double lr = 0;        // 0 -> family default (0.02 SGD / 0.01 AdamW)
    double weight_decay = 1e-4;  // regression head only
    int batch_size = 16;
    uint64_t seed = 0;

    int effective_epochs() const {
        if (epochs > 0) return epochs;
        return task_is_classification(task) ? 100 : 200;
    }
    double effective_lr() const {
        if (lr > 0) return lr;
        return task_is_classification(task) ? 0.02 : 0.01;
    }
};

struct MetricsReport {
    Task task = Task::kShape;
    bool classification = true;
    double top1 = 0, top5 = 0;             // percent
    std::array<double, 3> per_axis_mae{};  // regression only
    double avg_mae = 0;
    uint64_t seed = 0;
    std::string checkpoint;
};

// Exact top-k counting over class-score rows.
MetricsReport classification_metrics(const Tensor<float>& scores, const std::vector<int>& labels,
                                     Task task);
// Per-axis MAE plus their unweighted mean.
MetricsReport regression_metrics(const Tensor<float>& preds,
                                 const std::vector<std::array<double, 3>>& targets, Task task);

// Deterministic probe-time preprocessing: full-frame resize to the encoder
// input size plus per-channel normalization. No stochastic augmentation.
Tensor<float> probe_input(const Image& src, int input_size, const float mean[3],
                          const float stdev[3]);

// Eval-mode pooled representations for a list of images, index-aligned.
Tensor<float> extract_features(NetworkParams<float>& np, const EncoderConfig& cfg,
                               const std::vector<Image>& images, int batch = 32);

// Pooled F3 ++ pooled F4 concatenation (multipool readout input).
Tensor<float> extract_multipool_features(NetworkParams<float>& np, const EncoderConfig& cfg,
                                         const std::vector<Image>& images, int batch = 32);

// Frozen-encoder linear probe: head trained on the train split, selected on
// val, reported on test. The encoder is never modified.
MetricsReport linear_probe(TrainState<float>& state, const ProbeConfig& pc, const Dataset& ds);

// Probe over an explicit (features, labels) design — used for the sanity
// overfit path where train = val = test.
MetricsReport probe_on_features(const Tensor<float>& feats, const Dataset& ds,
                                const std::vector<int>& train_idx,
                                const std::vector<int>& val_idx,
                                const std::vector<int>& test_idx, const ProbeConfig& pc);

// Checksum over encoder parameters and running statistics (frozen-probe audit).
double params_checksum(const NetworkParams<float>& np);

// ---------------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------------

struct AblationCell {
    std::string name;  // e.g. "none", "sal", "sal+ppda+ram"
    bool use_sal = false, use_ppda = false, use_ram = false;
};

// Seven-subset default: baseline, the three singles, two pairs, and the full
// objective.
std::vector<AblationCell> default_loss_subsets();

struct AblationRow {
    std::string subset, modality, task;
    uint64_t seed = 0;
    double top1 = 0, top5 = 0;
    double mae_x = 0, mae_y = 0, mae_z = 0, avg_mae = 0;
};

void write_results_csv(const std::string& path, const std::vector<AblationRow>& rows);
std::vector<AblationRow> read_results_csv(const std::string& path);

// Renders the ranked ablation text table (mean +/- std over seeds per cell)
// from previously computed rows; no recomputation.
std::string render_results_table(const std::vector<AblationRow>& rows);

// Pretrains one run per (subset, modality, seed) cell and probes shape +
// edge-pose. Appends rows to out_dir/results.csv as cells finish.
std::vector<AblationRow> ablation_matrix(const TrainConfig& base,
                                         const std::vector<AblationCell>& subsets,
                                         const std::vector<Modality>& modes,
                                         const std::vector<uint64_t>& seeds, const Dataset& ds,
                                         const std::string& out_dir);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckEntry {
    std::string term;
    double max_rel_err = 0;
    bool pass = false;
};

struct GradCheckReport {
    double h = 1e-5, tolerance = 1e-4;
    std::vector<GradCheckEntry> entries;
    bool all_pass = false;
};

// Central-difference audit of every loss term at double precision on small
// random inputs (maps at most 6x6x8).
GradCheckReport gradcheck_suite(double h = 1e-5, double tolerance = 1e-4, uint64_t seed = 7);
void write_gradcheck_json(const GradCheckReport& r, const std::string& path);

// ---------------------------------------------------------------------------
// Multipool fine-tune (optional protocol)
// ---------------------------------------------------------------------------

struct FinetuneConfig {
    int epochs = 30;
    int batch_size = 32;
    double base_lr = 1e-3;  // cosine-annealed to 0
    double weight_decay = 1e-4;
    uint64_t seed = 0;
    bool freeze_stage4 = false;  // true degrades to a linear probe on concat features
};

// Unfreezes only stage 4; classifier reads concatenated pooled F3 (frozen) and
// pooled F4 (trainable). Stages 1-3 and the stem are untouched.
MetricsReport multipool_finetune(TrainState<float>& state, const Dataset& ds, Task task,
                                 const FinetuneConfig& fc);

}  // namespace sarl
