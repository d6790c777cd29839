#pragma once

#include "hsprobe/feature_store.hpp"
#include "hsprobe/metrics.hpp"
#include "hsprobe/probes.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hsprobe {

struct AdamHyper {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t step = 0;
};

// Bias-corrected Adam update of `params` in place. State vectors are sized
// on first use. Throws ErrorKind::non_finite on a non-finite gradient, leaving
// params and state untouched.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamHyper& hyper);

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 100;
    std::size_t patience = 10;  // epochs without a val-AUROC gain before stopping
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::optional<double> positive_weight;  // off by default

    AdamHyper adam() const noexcept { return {learning_rate, beta1, beta2, epsilon}; }
    void validate() const;
};

// What to train: architecture, its size, pooling and segment mode. Zero
// input_dim is filled in from the data. model_name and layer_index are
// copied into the checkpoint.
struct ProbeSpec {
    Architecture arch = Architecture::mlp;
    MLPConfig mlp;
    TransformerConfig transformer;
    PoolingSpec pooling;  // MLP only; the transformer always pools by attention
    SegmentMode mode = SegmentMode::question_only;
    std::string model_name;
    std::int64_t layer_index = 0;
};

struct EpochStats {
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_auroc = 0.0;

    bool operator==(const EpochStats&) const = default;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0;
    double wall_seconds = 0.0;

    // Wall time is not part of the reproducible result.
    bool operator==(const TrainHistory& o) const { return epochs == o.epochs && best_epoch == o.best_epoch; }
};

struct TrainResult {
    ProbeParams params;  // weights of the best-validation epoch
    TrainHistory history;
};

// Minibatch Adam on mean BCE with early stopping on validation AUROC.
// Deterministic per cfg.seed. Throws ErrorKind::one_class when train or val
// lacks a class.
TrainResult train(const ProbeSpec& spec, std::span<const HiddenStateRecord> train_set,
                  std::span<const HiddenStateRecord> val_set, const TrainConfig& cfg);

// Scores records in bounded chunks (token matrices are materialized per chunk).
ScoredSet score_records(const ProbeParams& params, std::span<const HiddenStateRecord> records);
EvalReport evaluate_probe(const ProbeParams& params, std::span<const HiddenStateRecord> records);

// Seed of independent sweep cell `index`.
std::uint64_t cell_seed(std::uint64_t base, std::uint64_t index) noexcept;

struct LayerSweepRow {
    std::int64_t layer = 0;
    double auroc = 0.0;
    double aurac = 0.0;
    double accuracy = 0.0;
    std::size_t test_count = 0;
    std::size_t best_epoch = 0;
};

// One detector per layer with shared hyperparameters, evaluated on the test
// split. All layers must hold the same ids and labels in the same order.
// Up to `jobs` layers train concurrently; results do not depend on jobs.
std::vector<LayerSweepRow> layer_sweep(std::span<const Dataset> layers, const ProbeSpec& spec,
                                       const TrainConfig& cfg, const SplitSpec& split_spec, std::size_t jobs = 1);
std::vector<LayerSweepRow> layer_sweep(std::span<const std::filesystem::path> paths, const ProbeSpec& spec,
                                       const TrainConfig& cfg, const SplitSpec& split_spec, std::size_t jobs = 1);

struct NamedDataset {
    std::string name;
    std::vector<HiddenStateRecord> records;
};

// auroc(t, s): detector trained on source s (last column = union "All"),
// evaluated on the test split of target t. K x (K + 1).
struct OodMatrix {
    std::vector<std::string> targets;
    std::vector<std::string> sources;  // targets + "All"
    Matrix<double> auroc;
};

OodMatrix ood_matrix(std::span<const NamedDataset> datasets, const ProbeSpec& spec, const TrainConfig& cfg,
                     const SplitSpec& split_spec, std::size_t jobs = 1);

struct TruncationPoint {
    double fraction = 1.0;
    EvalReport report;
};

// 0.05, 0.10, ..., 1.00
std::vector<double> default_truncation_fractions();

// Evaluates a question+answer probe on the first ceil(x * n_answer) answer
// tokens of every test record, for each x.
std::vector<TruncationPoint> truncation_sweep(const ProbeParams& params, std::span<const HiddenStateRecord> test,
                                              std::span<const double> fractions);

}  // namespace hsprobe
