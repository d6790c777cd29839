#pragma once

// Per-example forward/backward passes shared by the batch drivers.

#include "hsprobe/probes.hpp"

#include <vector>

namespace hsprobe::detail {

struct LinearOffsets {
    std::size_t w = 0;
    std::size_t b = 0;
    std::size_t out = 0;
    std::size_t in = 0;
};

struct NormOffsets {
    std::size_t gain = 0;
    std::size_t bias = 0;
};

struct MlpOffsets {
    std::vector<LinearOffsets> layers;
};

struct BlockOffsets {
    NormOffsets ln1;
    LinearOffsets q, k, v, o;
    NormOffsets ln2;
    LinearOffsets ff1, ff2;
};

struct TransformerOffsets {
    LinearOffsets input;
    std::vector<BlockOffsets> blocks;
    NormOffsets final_norm;
    LinearOffsets scorer1;  // hidden x model_dim
    LinearOffsets scorer2;  // 1 x hidden
    LinearOffsets head;     // 1 x model_dim
};

MlpOffsets mlp_offsets(const ProbeParams& params);
TransformerOffsets transformer_offsets(const ProbeParams& params);

// Per-example loss term: weight * BCE(logit, label) * scale. When `grad` is
// non-null the gradient of that term is accumulated into it. `score` receives
// the forward result.
double mlp_example(const ProbeParams& params, const MlpOffsets& off, std::span<const double> x,
                   double label, double weight, double scale, double* grad, Score* score);

double transformer_example(const ProbeParams& params, const TransformerOffsets& off,
                           const TokenMatrix& tokens, double label, double weight, double scale,
                           double* grad, Score* score);

double bce_from_logit(double logit, double label) noexcept;

}  // namespace hsprobe::detail
