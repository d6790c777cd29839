#pragma once

#include "hsprobe/matrix.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hsprobe {

// Column-wise reductions of an N x D token matrix (N >= 1).
std::vector<double> mean_pool(const TokenMatrix& m);
std::vector<double> max_pool(const TokenMatrix& m);
std::vector<double> last_token_pool(const TokenMatrix& m);

// Token scorer for attention pooling: s_i = w2 . gelu(W1 x_i + b1) + b2.
// Non-owning; the transformer probe points it into its parameter block.
struct ScorerView {
    std::span<const double> w1;  // hidden x D
    std::span<const double> b1;  // hidden
    std::span<const double> w2;  // hidden
    double b2 = 0.0;
    std::size_t hidden = 0;
};

double score_token(const ScorerView& scorer, std::span<const double> token);

// Softmax (max-subtracted) of the per-token scores.
std::vector<double> attention_weights(const TokenMatrix& m, const ScorerView& scorer);

// sum_i softmax(s)_i * m_i
std::vector<double> attention_pool(const TokenMatrix& m, const ScorerView& scorer);

struct PCABasis {
    std::vector<double> mean;                 // D
    Matrix<double> components;                // n x D, orthonormal rows
    std::vector<double> explained_variance;   // n, descending
    double total_variance = 0.0;              // trace of the fitted covariance

    std::size_t dim() const noexcept { return mean.size(); }
    std::size_t count() const noexcept { return components.rows(); }
    bool operator==(const PCABasis&) const = default;
};

// Top-n principal directions of the token covariance pooled over every row
// of every matrix. Each component's largest-magnitude entry is positive.
PCABasis pca_fit(std::span<const TokenMatrix> matrices, std::size_t n);

// Scores of an arbitrary D-vector on the basis.
std::vector<double> pca_scores(const PCABasis& basis, std::span<const double> v);

// Scores of mean_pool(m): the fixed-length PCA feature fed to the MLP.
std::vector<double> pca_project(const PCABasis& basis, const TokenMatrix& m);

enum class PoolingKind { mean, max, last_token, pca, attention };

struct PoolingSpec {
    PoolingKind kind = PoolingKind::mean;
    std::size_t pca_components = 0;  // only for PoolingKind::pca

    bool operator==(const PoolingSpec&) const = default;
};

std::string to_string(const PoolingSpec& spec);
// "mean", "max", "last", "pca:<n>", "attention"
PoolingSpec parse_pooling(std::string_view text);

// Applies a fixed (non-learned) pooling. PCA pooling needs a basis.
std::vector<double> pool(const PoolingSpec& spec, const TokenMatrix& m, const PCABasis* basis = nullptr);

}  // namespace hsprobe
