#include "hsprobe/pooling.hpp"

#include "hsprobe/activation.hpp"
#include "hsprobe/error.hpp"
#include "hsprobe/kernels.hpp"
#include "hsprobe/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace hsprobe {

namespace {

void require_tokens(const TokenMatrix& m) {
    require(m.rows() >= 1 && m.cols() >= 1, ErrorKind::invalid_argument, "pooling needs at least one token");
}

}  // namespace

std::vector<double> mean_pool(const TokenMatrix& m) {
    require_tokens(m);
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        for (std::size_t c = 0; c < out.size(); ++c) {
            out[c] += row[c];
        }
    }
    const double inv = 1.0 / static_cast<double>(m.rows());
    for (auto& v : out) {
        v *= inv;
    }
    return out;
}

std::vector<double> max_pool(const TokenMatrix& m) {
    require_tokens(m);
    const auto first = m.row(0);
    std::vector<double> out(first.begin(), first.end());
    for (std::size_t r = 1; r < m.rows(); ++r) {
        const auto row = m.row(r);
        for (std::size_t c = 0; c < out.size(); ++c) {
            out[c] = std::max(out[c], row[c]);
        }
    }
    return out;
}

std::vector<double> last_token_pool(const TokenMatrix& m) {
    require_tokens(m);
    const auto last = m.row(m.rows() - 1);
    return {last.begin(), last.end()};
}

double score_token(const ScorerView& scorer, std::span<const double> token) {
    const std::size_t dim = token.size();
    double s = scorer.b2;
    for (std::size_t h = 0; h < scorer.hidden; ++h) {
        const double u = kernels::dot(scorer.w1.data() + h * dim, token.data(), dim) + scorer.b1[h];
        s += scorer.w2[h] * gelu(u);
    }
    return s;
}

std::vector<double> attention_weights(const TokenMatrix& m, const ScorerView& scorer) {
    require_tokens(m);
    require(scorer.w1.size() == scorer.hidden * m.cols() && scorer.b1.size() == scorer.hidden &&
                scorer.w2.size() == scorer.hidden,
            ErrorKind::shape_mismatch, "attention scorer shape does not match token dim");
    std::vector<double> w(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        w[r] = score_token(scorer, m.row(r));
    }
    const double top = *std::max_element(w.begin(), w.end());
    double total = 0.0;
    for (auto& v : w) {
        v = std::exp(v - top);
        total += v;
    }
    for (auto& v : w) {
        v /= total;
    }
    return w;
}

std::vector<double> attention_pool(const TokenMatrix& m, const ScorerView& scorer) {
    const auto w = attention_weights(m, scorer);
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        for (std::size_t c = 0; c < out.size(); ++c) {
            out[c] += w[r] * row[c];
        }
    }
    return out;
}

PCABasis pca_fit(std::span<const TokenMatrix> matrices, std::size_t n) {
    require(n >= 1, ErrorKind::invalid_argument, "pca_fit: need at least one component");
    require(!matrices.empty(), ErrorKind::invalid_argument, "pca_fit: no training matrices");
    const std::size_t dim = matrices.front().cols();
    require(n <= dim, ErrorKind::invalid_argument,
            "pca_fit: " + std::to_string(n) + " components requested but hidden dim is " + std::to_string(dim));

    std::size_t total_rows = 0;
    std::vector<double> mean(dim, 0.0);
    for (const auto& m : matrices) {
        require(m.cols() == dim, ErrorKind::dimension_mismatch, "pca_fit: matrices differ in hidden dim");
        for (std::size_t r = 0; r < m.rows(); ++r) {
            const auto row = m.row(r);
            for (std::size_t c = 0; c < dim; ++c) {
                mean[c] += row[c];
            }
        }
        total_rows += m.rows();
    }
    require(total_rows > n, ErrorKind::invalid_argument,
            "pca_fit: need more token rows (" + std::to_string(total_rows) + ") than components (" +
                std::to_string(n) + ")");
    for (auto& v : mean) {
        v /= static_cast<double>(total_rows);
    }

    Matrix<double> scatter(dim, dim, 0.0);
    for (const auto& m : matrices) {
        kernels::scatter_acc(m.values(), mean, scatter.values(), m.rows(), dim);
    }
    const double denom = static_cast<double>(total_rows - 1);
    for (auto& v : scatter.values()) {
        v /= denom;
    }

    const auto eig = linalg::symmetric_eigen(scatter);
    const double top = std::max(eig.values.front(), 0.0);
    const double tol = top * 1e-10 + 1e-300;
    const auto rank = static_cast<std::size_t>(
        std::count_if(eig.values.begin(), eig.values.end(), [&](double v) { return v > tol; }));
    if (rank < n) {
        fail(ErrorKind::rank_deficient, "pca_fit: token covariance has rank " + std::to_string(rank) +
                                            ", cannot retain " + std::to_string(n) + " components");
    }

    PCABasis basis;
    basis.mean = std::move(mean);
    basis.components = Matrix<double>(n, dim);
    basis.explained_variance.resize(n);
    for (std::size_t c = 0; c < dim; ++c) {
        basis.total_variance += scatter(c, c);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto vec = eig.vectors.row(i);
        std::size_t arg = 0;
        for (std::size_t c = 1; c < dim; ++c) {
            if (std::abs(vec[c]) > std::abs(vec[arg])) {
                arg = c;
            }
        }
        const double sign = vec[arg] < 0 ? -1.0 : 1.0;
        for (std::size_t c = 0; c < dim; ++c) {
            basis.components(i, c) = sign * vec[c];
        }
        basis.explained_variance[i] = std::max(eig.values[i], 0.0);
    }
    return basis;
}

std::vector<double> pca_scores(const PCABasis& basis, std::span<const double> v) {
    require(v.size() == basis.dim(), ErrorKind::dimension_mismatch,
            "pca: vector dim " + std::to_string(v.size()) + " != basis dim " + std::to_string(basis.dim()));
    std::vector<double> centered(v.size());
    for (std::size_t c = 0; c < v.size(); ++c) {
        centered[c] = v[c] - basis.mean[c];
    }
    std::vector<double> out(basis.count());
    for (std::size_t i = 0; i < basis.count(); ++i) {
        out[i] = kernels::dot(basis.components.row(i).data(), centered.data(), centered.size());
    }
    return out;
}

std::vector<double> pca_project(const PCABasis& basis, const TokenMatrix& m) {
    require(m.cols() == basis.dim(), ErrorKind::dimension_mismatch,
            "pca_project: token dim " + std::to_string(m.cols()) + " != basis dim " + std::to_string(basis.dim()));
    return pca_scores(basis, mean_pool(m));
}

std::string to_string(const PoolingSpec& spec) {
    switch (spec.kind) {
        case PoolingKind::mean: return "mean";
        case PoolingKind::max: return "max";
        case PoolingKind::last_token: return "last";
        case PoolingKind::pca: return "pca:" + std::to_string(spec.pca_components);
        case PoolingKind::attention: return "attention";
    }
    return "mean";
}

PoolingSpec parse_pooling(std::string_view text) {
    if (text == "mean") {
        return {PoolingKind::mean, 0};
    }
    if (text == "max") {
        return {PoolingKind::max, 0};
    }
    if (text == "last" || text == "last_token") {
        return {PoolingKind::last_token, 0};
    }
    if (text == "attention") {
        return {PoolingKind::attention, 0};
    }
    if (text.starts_with("pca:")) {
        const std::string count(text.substr(4));
        std::size_t used = 0;
        unsigned long n = 0;
        try {
            n = std::stoul(count, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        require(used == count.size() && n >= 1, ErrorKind::invalid_argument,
                "pooling 'pca:<n>' needs a positive component count");
        return {PoolingKind::pca, n};
    }
    fail(ErrorKind::invalid_argument, "unknown pooling '" + std::string(text) + "'");
}

std::vector<double> pool(const PoolingSpec& spec, const TokenMatrix& m, const PCABasis* basis) {
    switch (spec.kind) {
        case PoolingKind::mean: return mean_pool(m);
        case PoolingKind::max: return max_pool(m);
        case PoolingKind::last_token: return last_token_pool(m);
        case PoolingKind::pca:
            require(basis != nullptr, ErrorKind::invalid_argument, "pca pooling needs a fitted basis");
            return pca_project(*basis, m);
        case PoolingKind::attention:
            fail(ErrorKind::invalid_argument, "attention pooling needs a learned scorer");
    }
    return {};
}

}  // namespace hsprobe
