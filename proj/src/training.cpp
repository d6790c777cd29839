#include "hsprobe/training.hpp"

#include "hsprobe/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace hsprobe {

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamHyper& hyper) {
    require(params.size() == grads.size(), ErrorKind::shape_mismatch, "adam_step: gradient size differs from params");
    for (double g : grads) {
        require(std::isfinite(g), ErrorKind::non_finite, "adam_step: non-finite gradient");
    }
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    require(state.m.size() == params.size() && state.v.size() == params.size(), ErrorKind::shape_mismatch,
            "adam_step: optimizer state size differs from params");

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.epsilon);
    }
}

void TrainConfig::validate() const {
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::invalid_argument,
            "learning rate must be > 0");
    require(batch_size >= 1, ErrorKind::invalid_argument, "batch size must be >= 1");
    require(max_epochs >= 1, ErrorKind::invalid_argument, "max epochs must be >= 1");
    require(patience >= 1, ErrorKind::invalid_argument, "patience must be >= 1");
    require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, ErrorKind::invalid_argument,
            "Adam betas must lie in (0, 1)");
    require(epsilon > 0.0, ErrorKind::invalid_argument, "Adam epsilon must be > 0");
    if (positive_weight) {
        require(*positive_weight > 0.0 && std::isfinite(*positive_weight), ErrorKind::invalid_argument,
                "positive-class weight must be > 0");
    }
}

std::uint64_t cell_seed(std::uint64_t base, std::uint64_t index) noexcept {
    // splitmix64 finalizer
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace {

constexpr std::size_t kScoreChunk = 256;

void require_both_classes(std::span<const HiddenStateRecord> records, const char* what) {
    std::size_t pos = 0;
    for (const auto& r : records) {
        pos += r.label;
    }
    require(pos > 0 && pos < records.size(), ErrorKind::one_class,
            std::string(what) + " split has a single class (" + std::to_string(pos) + " of " +
                std::to_string(records.size()) + " positive); AUROC is undefined");
}

ProbeParams init_for(const ProbeSpec& spec, std::size_t dim, std::span<const HiddenStateRecord> train_set,
                     std::uint64_t seed) {
    ProbeParams params;
    if (spec.arch == Architecture::mlp) {
        MLPConfig config = spec.mlp;
        const std::size_t input =
            spec.pooling.kind == PoolingKind::pca ? spec.pooling.pca_components : dim;
        require(config.input_dim == 0 || config.input_dim == input, ErrorKind::dimension_mismatch,
                "configured MLP input_dim " + std::to_string(config.input_dim) + " does not match the data (" +
                    std::to_string(input) + ")");
        config.input_dim = input;
        params = init_mlp(config, spec.pooling, seed);
        if (spec.pooling.kind == PoolingKind::pca) {
            std::vector<TokenMatrix> rows;
            rows.reserve(train_set.size());
            for (const auto& r : train_set) {
                rows.push_back(segment_select(r, spec.mode));
            }
            params.pca = pca_fit(rows, spec.pooling.pca_components);
        }
    } else {
        TransformerConfig config = spec.transformer;
        require(config.input_dim == 0 || config.input_dim == dim, ErrorKind::dimension_mismatch,
                "configured transformer input_dim " + std::to_string(config.input_dim) +
                    " does not match the data (" + std::to_string(dim) + ")");
        config.input_dim = dim;
        params = init_transformer(config, seed);
    }
    params.mode = spec.mode;
    params.model_name = spec.model_name;
    params.layer_index = spec.layer_index;
    return params;
}

// MLP inputs are small pooled vectors and are built once; transformer inputs
// are full token matrices and are built per batch to bound memory.
class InputSet {
public:
    InputSet(const ProbeParams& params, std::span<const HiddenStateRecord> records)
        : params_(params), records_(records), cached_(params.arch == Architecture::mlp) {
        if (cached_) {
            inputs_.reserve(records.size());
            for (const auto& r : records) {
                inputs_.push_back(prepare_input(params, segment_select(r, params.mode)));
            }
        }
    }

    // Inputs for the given record indices; pointers stay valid until the
    // next call.
    std::span<const ProbeInput> gather(std::span<const std::size_t> idx) {
        scratch_.clear();
        scratch_.reserve(idx.size());
        for (std::size_t i : idx) {
            scratch_.push_back(cached_ ? inputs_[i] : prepare_input(params_, segment_select(records_[i], params_.mode)));
        }
        return scratch_;
    }

private:
    const ProbeParams& params_;
    std::span<const HiddenStateRecord> records_;
    bool cached_;
    std::vector<ProbeInput> inputs_;
    std::vector<ProbeInput> scratch_;
};

struct ValResult {
    double loss = 0.0;
    ScoredSet scored;
};

ValResult score_and_loss(const ProbeParams& params, std::span<const HiddenStateRecord> records,
                         double positive_weight) {
    ValResult out;
    out.scored.scores.reserve(records.size());
    out.scored.labels.reserve(records.size());
    std::vector<ProbeInput> inputs;
    std::vector<BatchItem> items;
    for (std::size_t begin = 0; begin < records.size(); begin += kScoreChunk) {
        const std::size_t end = std::min(records.size(), begin + kScoreChunk);
        inputs.clear();
        for (std::size_t i = begin; i < end; ++i) {
            inputs.push_back(prepare_input(params, segment_select(records[i], params.mode)));
        }
        const auto p = score_batch(params, inputs);
        items.clear();
        for (std::size_t i = begin; i < end; ++i) {
            out.scored.scores.push_back(p[i - begin]);
            out.scored.labels.push_back(records[i].label);
            items.push_back({&inputs[i - begin], static_cast<double>(records[i].label)});
        }
        if (positive_weight > 0.0) {
            out.loss += batch_loss(params, items, positive_weight) * static_cast<double>(end - begin);
        }
    }
    out.loss /= static_cast<double>(std::max<std::size_t>(1, records.size()));
    return out;
}

void check_dims(std::span<const HiddenStateRecord> records, std::size_t dim, const char* what) {
    for (const auto& r : records) {
        require(r.hidden_dim() == dim, ErrorKind::dimension_mismatch,
                std::string(what) + " record '" + r.id + "' has hidden dim " + std::to_string(r.hidden_dim()) +
                    ", expected " + std::to_string(dim));
    }
}

// Runs body(i) for i in [0, count) on up to `jobs` threads, rethrowing the
// first failure (lowest index) afterwards.
template <class Body>
void run_cells(std::size_t count, std::size_t jobs, Body&& body) {
    std::vector<std::string> errors(count);
    std::vector<ErrorKind> kinds(count, ErrorKind::invalid_argument);
    std::vector<char> failed(count, 0);
    const int threads = static_cast<int>(std::max<std::size_t>(1, std::min(jobs, count)));
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads) if (threads > 1)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(count); ++i) {
        const auto k = static_cast<std::size_t>(i);
        try {
            body(k);
        } catch (const Error& e) {
            failed[k] = 1;
            kinds[k] = e.kind();
            errors[k] = e.what();
        } catch (const std::exception& e) {
            failed[k] = 1;
            errors[k] = e.what();
        }
    }
    for (std::size_t k = 0; k < count; ++k) {
        if (failed[k]) {
            fail(kinds[k], errors[k]);
        }
    }
}

}  // namespace

TrainResult train(const ProbeSpec& spec, std::span<const HiddenStateRecord> train_set,
                  std::span<const HiddenStateRecord> val_set, const TrainConfig& cfg) {
    cfg.validate();
    require(!train_set.empty() && !val_set.empty(), ErrorKind::invalid_argument, "train and val sets must be non-empty");
    require_both_classes(train_set, "train");
    require_both_classes(val_set, "val");
    const std::size_t dim = train_set.front().hidden_dim();
    check_dims(train_set, dim, "train");
    check_dims(val_set, dim, "val");

    const auto start = std::chrono::steady_clock::now();
    TrainResult result;
    ProbeParams params = init_for(spec, dim, train_set, cfg.seed);
    const double pos_weight = cfg.positive_weight.value_or(1.0);
    const AdamHyper hyper = cfg.adam();
    AdamState state;

    InputSet inputs(params, train_set);
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(cell_seed(cfg.seed, 0x5eed));

    double best_auroc = -1.0;
    ProbeParams best = params;
    std::vector<BatchItem> items;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            const std::span<const std::size_t> idx(order.data() + begin, end - begin);
            const auto batch_inputs = inputs.gather(idx);
            items.clear();
            for (std::size_t i = 0; i < idx.size(); ++i) {
                items.push_back({&batch_inputs[i], static_cast<double>(train_set[idx[i]].label)});
            }
            auto lg = forward_backward(params, items, pos_weight);
            adam_step(params.values, lg.grad, state, hyper);
            loss_sum += lg.loss * static_cast<double>(idx.size());
        }

        const auto val = score_and_loss(params, val_set, pos_weight);
        EpochStats stats;
        stats.train_loss = loss_sum / static_cast<double>(order.size());
        stats.val_loss = val.loss;
        stats.val_auroc = auroc(val.scored);
        result.history.epochs.push_back(stats);

        if (stats.val_auroc > best_auroc) {
            best_auroc = stats.val_auroc;
            best = params;
            result.history.best_epoch = epoch;
        } else if (epoch - result.history.best_epoch >= cfg.patience) {
            break;
        }
    }

    result.params = std::move(best);
    result.history.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

ScoredSet score_records(const ProbeParams& params, std::span<const HiddenStateRecord> records) {
    return score_and_loss(params, records, 0.0).scored;
}

EvalReport evaluate_probe(const ProbeParams& params, std::span<const HiddenStateRecord> records) {
    return evaluate(score_records(params, records));
}

std::vector<LayerSweepRow> layer_sweep(std::span<const Dataset> layers, const ProbeSpec& spec,
                                       const TrainConfig& cfg, const SplitSpec& split_spec, std::size_t jobs) {
    require(!layers.empty(), ErrorKind::invalid_argument, "layer sweep needs at least one layer");
    const auto& ref = layers.front().records;
    for (const auto& layer : layers) {
        require(layer.records.size() == ref.size(), ErrorKind::invalid_argument,
                "inconsistent record ids across layers: layer " + std::to_string(layer.header.layer_index) + " has " +
                    std::to_string(layer.records.size()) + " records, expected " + std::to_string(ref.size()));
        for (std::size_t i = 0; i < ref.size(); ++i) {
            require(layer.records[i].id == ref[i].id && layer.records[i].label == ref[i].label,
                    ErrorKind::invalid_argument,
                    "inconsistent record ids across layers: layer " + std::to_string(layer.header.layer_index) +
                        " record " + std::to_string(i) + " is '" + layer.records[i].id + "', expected '" + ref[i].id +
                        "' with the same label");
        }
    }

    std::vector<LayerSweepRow> rows(layers.size());
    run_cells(layers.size(), jobs, [&](std::size_t k) {
        const auto& layer = layers[k];
        const Splits parts = split(layer.records, split_spec);
        ProbeSpec cell = spec;
        cell.layer_index = layer.header.layer_index;
        cell.model_name = layer.header.model_name;
        TrainConfig cell_cfg = cfg;
        cell_cfg.seed = cell_seed(cfg.seed, k);
        const auto trained = train(cell, parts.train, parts.val, cell_cfg);
        const auto report = evaluate_probe(trained.params, parts.test);
        rows[k] = {layer.header.layer_index, report.auroc, report.aurac, report.accuracy, report.count,
                   trained.history.best_epoch};
    });
    return rows;
}

std::vector<LayerSweepRow> layer_sweep(std::span<const std::filesystem::path> paths, const ProbeSpec& spec,
                                       const TrainConfig& cfg, const SplitSpec& split_spec, std::size_t jobs) {
    std::vector<Dataset> layers;
    layers.reserve(paths.size());
    for (const auto& p : paths) {
        layers.push_back(read_dataset(p));
    }
    return layer_sweep(layers, spec, cfg, split_spec, jobs);
}

OodMatrix ood_matrix(std::span<const NamedDataset> datasets, const ProbeSpec& spec, const TrainConfig& cfg,
                     const SplitSpec& split_spec, std::size_t jobs) {
    require(datasets.size() >= 2, ErrorKind::invalid_argument, "OOD matrix needs at least two datasets");
    std::size_t dim = 0;
    for (const auto& d : datasets) {
        require(!d.records.empty(), ErrorKind::invalid_argument, "dataset '" + d.name + "' is empty");
        if (dim == 0) {
            dim = d.records.front().hidden_dim();
        }
        check_dims(d.records, dim, d.name.c_str());
    }

    const std::size_t k = datasets.size();
    std::vector<Splits> parts;
    parts.reserve(k);
    for (const auto& d : datasets) {
        parts.push_back(split(d.records, split_spec));
    }
    // Union source: every train and val split; no test rows.
    Splits all;
    for (const auto& p : parts) {
        all.train.insert(all.train.end(), p.train.begin(), p.train.end());
        all.val.insert(all.val.end(), p.val.begin(), p.val.end());
    }

    std::vector<ProbeParams> models(k + 1);
    run_cells(k + 1, jobs, [&](std::size_t s) {
        const Splits& src = s < k ? parts[s] : all;
        TrainConfig cell_cfg = cfg;
        cell_cfg.seed = cell_seed(cfg.seed, s);
        models[s] = train(spec, src.train, src.val, cell_cfg).params;
    });

    OodMatrix out;
    for (const auto& d : datasets) {
        out.targets.push_back(d.name);
        out.sources.push_back(d.name);
    }
    out.sources.push_back("All");
    out.auroc = Matrix<double>(k, k + 1);
    run_cells(k * (k + 1), jobs, [&](std::size_t cell) {
        const std::size_t t = cell / (k + 1);
        const std::size_t s = cell % (k + 1);
        out.auroc(t, s) = auroc(score_records(models[s], parts[t].test));
    });
    return out;
}

std::vector<double> default_truncation_fractions() {
    std::vector<double> xs;
    for (int i = 1; i <= 20; ++i) {
        xs.push_back(static_cast<double>(i) / 20.0);
    }
    return xs;
}

std::vector<TruncationPoint> truncation_sweep(const ProbeParams& params, std::span<const HiddenStateRecord> test,
                                              std::span<const double> fractions) {
    require(params.mode == SegmentMode::question_and_answer, ErrorKind::mode_mismatch,
            "truncation sweep needs a probe trained on question and answer tokens");
    for (double x : fractions) {
        require(std::isfinite(x) && x > 0.0 && x <= 1.0, ErrorKind::invalid_argument,
                "truncation fraction " + std::to_string(x) + " is outside (0, 1]");
    }
    std::vector<TruncationPoint> out;
    out.reserve(fractions.size());
    std::vector<HiddenStateRecord> cut;
    for (double x : fractions) {
        cut.clear();
        cut.reserve(test.size());
        for (const auto& r : test) {
            cut.push_back(truncate_answer(r, x));
        }
        out.push_back({x, evaluate_probe(params, cut)});
    }
    return out;
}

}  // namespace hsprobe
