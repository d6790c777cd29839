#pragma once

#include "hsprobe/feature_store.hpp"
#include "hsprobe/matrix.hpp"
#include "hsprobe/pooling.hpp"

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hsprobe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class Architecture { mlp, transformer };

std::string_view to_string(Architecture arch) noexcept;
Architecture parse_architecture(std::string_view text);

struct MLPConfig {
    std::size_t input_dim = 0;
    std::size_t hidden_dim = 512;
    std::size_t n_layers = 4;  // linear layers, the last one maps to the logit

    bool operator==(const MLPConfig&) const = default;
};

struct TransformerConfig {
    std::size_t input_dim = 0;
    std::size_t model_dim = 256;
    std::size_t n_layers = 4;
    std::size_t n_heads = 0;  // 0: model_dim / 64 (at least 1)
    std::size_t ff_dim = 0;   // 0: 4 * model_dim
    bool positional_encoding = true;

    std::size_t heads() const noexcept { return n_heads != 0 ? n_heads : std::max<std::size_t>(1, model_dim / 64); }
    std::size_t ff() const noexcept { return ff_dim != 0 ? ff_dim : 4 * model_dim; }
    std::size_t scorer_hidden() const noexcept { return std::max<std::size_t>(1, model_dim / 4); }
    bool operator==(const TransformerConfig&) const = default;
};

// One named weight tensor inside the flat parameter vector.
struct TensorSlot {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;

    std::size_t size() const noexcept { return rows * cols; }
    bool operator==(const TensorSlot&) const = default;
};

std::vector<TensorSlot> mlp_layout(const MLPConfig& config);
std::vector<TensorSlot> transformer_layout(const TransformerConfig& config);
std::size_t parameter_count(const std::vector<TensorSlot>& layout) noexcept;

// Probability that the base model answers correctly, with its logit.
struct Score {
    double p = 0.5;
    double logit = 0.0;
};

struct ProbeParams {
    Architecture arch = Architecture::mlp;
    MLPConfig mlp;
    TransformerConfig transformer;
    SegmentMode mode = SegmentMode::question_only;
    PoolingSpec pooling;  // MLP input pooling; attention for the transformer
    std::optional<PCABasis> pca;
    std::int64_t layer_index = 0;
    std::string model_name;

    std::vector<TensorSlot> layout;
    std::vector<double> values;

    // Width of the hidden-state rows the probe consumes.
    std::size_t feature_dim() const noexcept;
    const TensorSlot& slot(std::string_view name) const;
    std::span<const double> tensor(std::string_view name) const;
    std::span<double> tensor(std::string_view name);

    bool operator==(const ProbeParams&) const = default;
};

// Fan-in scaled normal weights, zero biases, unit layer-norm gains.
ProbeParams init_mlp(const MLPConfig& config, PoolingSpec pooling, std::uint64_t seed);
ProbeParams init_transformer(const TransformerConfig& config, std::uint64_t seed);

Score mlp_forward(const ProbeParams& params, std::span<const double> pooled);
Score transformer_forward(const ProbeParams& params, const TokenMatrix& tokens);

// What a probe consumes for one example after segment selection.
struct ProbeInput {
    TokenMatrix tokens;          // transformer input
    std::vector<double> pooled;  // MLP input
};

ProbeInput prepare_input(const ProbeParams& params, TokenMatrix tokens);
Score score_input(const ProbeParams& params, const ProbeInput& input);

// Segment-selects (per params.mode), pools if needed and scores one record.
Score score_record(const ProbeParams& params, const HiddenStateRecord& record);

struct BatchItem {
    const ProbeInput* input = nullptr;
    double label = 0.0;
};

struct LossAndGrad {
    double loss = 0.0;
    std::vector<double> grad;  // same layout as ProbeParams::values
};

// Mean (optionally positive-weighted) binary cross-entropy and its exact
// gradient. Examples are split into a fixed number of chunks that may run on
// separate threads; the chunk sums are combined in a fixed order, so the
// result does not depend on the thread count.
LossAndGrad forward_backward(const ProbeParams& params, std::span<const BatchItem> batch,
                             double positive_weight = 1.0);

// Forward-only version of the same loss.
double batch_loss(const ProbeParams& params, std::span<const BatchItem> batch, double positive_weight = 1.0);

// Scores many inputs; parallel over inputs, identical to scoring one by one.
std::vector<double> score_batch(const ProbeParams& params, std::span<const ProbeInput> inputs);

// Checkpoint layout: "DRFT" | version u32 | config_len u32 | config JSON |
// f64 weights in layout order | optional f64 PCA blocks (mean, components,
// explained variance, total variance).
void save_checkpoint(const ProbeParams& params, const std::filesystem::path& path);
ProbeParams load_checkpoint(const std::filesystem::path& path);

// Short content fingerprint of the weights, reported by the router service.
std::string probe_fingerprint(const ProbeParams& params);

}  // namespace hsprobe
